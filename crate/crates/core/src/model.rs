//! Encoder–decoder backbone with a segmentation head and a fusion
//! classification head.
//!
//! Layout for `enc_blocks = 4` at 32×32 input:
//!
//! ```text
//! stem 32² ─ enc.0 16² ─ enc.1 8² ─ enc.2 4² ─ enc.3 2²
//!   │          │          │          │          │
//! dec.4 32² ─ dec.3 16² ─ dec.2 8² ─ dec.1 4² ─ dec.0 2²
//! ```
//!
//! Decoder stage `j` consumes encoder output `enc_blocks - j` (the stem is
//! encoder output 0). The fusion head reads `enc.3` and `dec.4`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{bail, Result, SailError};
use crate::metrics::ProbabilityModel;
use crate::tensor::Tensor;

/// Default fusion side length; inputs smaller than this use their own size.
pub const DEFAULT_FUSION_SIZE: usize = 32;
pub const DEFAULT_FUSION_CHANNELS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadVariant {
    Gated,
    EncOnly,
    DecOnly,
    Merge,
    Multiply,
    ChMultiply,
}

impl HeadVariant {
    pub const ALL: [HeadVariant; 6] = [
        HeadVariant::EncOnly,
        HeadVariant::DecOnly,
        HeadVariant::Merge,
        HeadVariant::Multiply,
        HeadVariant::ChMultiply,
        HeadVariant::Gated,
    ];

    pub fn name(self) -> &'static str {
        match self {
            HeadVariant::Gated => "gated",
            HeadVariant::EncOnly => "enc_only",
            HeadVariant::DecOnly => "dec_only",
            HeadVariant::Merge => "merge",
            HeadVariant::Multiply => "multiply",
            HeadVariant::ChMultiply => "ch_multiply",
        }
    }

    pub fn uses_encoder(self) -> bool {
        self != HeadVariant::DecOnly
    }

    pub fn uses_decoder(self) -> bool {
        self != HeadVariant::EncOnly
    }
}

impl fmt::Display for HeadVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for HeadVariant {
    type Err = SailError;

    fn from_str(s: &str) -> Result<Self> {
        HeadVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| SailError::Config(format!("unknown head variant '{s}'")))
    }
}

/// Default fusion size for an input side length.
pub fn default_fusion_size(len: usize) -> usize {
    len.min(DEFAULT_FUSION_SIZE)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// `[height, width]` in pixels.
    pub input_size: [usize; 2],
    pub base_channels: usize,
    /// Stage widths double per encoder block up to this cap.
    pub max_channels: usize,
    pub enc_blocks: usize,
    pub dec_blocks: usize,
    pub num_seg_classes: usize,
    pub num_cls_classes: usize,
    /// `None` resolves to [`default_fusion_size`] of the input height.
    pub fusion_h: Option<usize>,
    pub fusion_w: Option<usize>,
    pub fusion_c: usize,
    pub head_variant: HeadVariant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_size: [32, 32],
            base_channels: 8,
            max_channels: 32,
            enc_blocks: 4,
            dec_blocks: 4,
            num_seg_classes: 9,
            num_cls_classes: 2,
            fusion_h: None,
            fusion_w: None,
            fusion_c: DEFAULT_FUSION_CHANNELS,
            head_variant: HeadVariant::Gated,
        }
    }
}

impl ModelConfig {
    pub fn fusion_dims(&self) -> (usize, usize, usize) {
        let [h, w] = self.input_size;
        (
            self.fusion_h.unwrap_or_else(|| default_fusion_size(h)),
            self.fusion_w.unwrap_or_else(|| default_fusion_size(w)),
            self.fusion_c,
        )
    }

    /// Fills every defaulted field with its concrete value.
    pub fn materialize(&mut self) {
        let (fh, fw, _) = self.fusion_dims();
        self.fusion_h = Some(fh);
        self.fusion_w = Some(fw);
    }

    pub fn validate(&self) -> Result<()> {
        let [h, w] = self.input_size;
        let div = 1usize << self.enc_blocks;
        if self.enc_blocks == 0 {
            bail!(Config, "enc_blocks must be at least 1");
        }
        if h == 0 || w == 0 || h % div != 0 || w % div != 0 {
            bail!(Config, "input {h}x{w} must be divisible by 2^enc_blocks = {div}");
        }
        if self.dec_blocks != self.enc_blocks {
            bail!(Config, "dec_blocks ({}) must equal enc_blocks ({})", self.dec_blocks, self.enc_blocks);
        }
        if self.base_channels == 0 || self.max_channels < self.base_channels {
            bail!(Config, "need 0 < base_channels <= max_channels");
        }
        if self.num_seg_classes < 2 || self.num_cls_classes < 2 {
            bail!(Config, "need at least two segmentation and two classification classes");
        }
        let (fh, fw, fc) = self.fusion_dims();
        if fc == 0 || fh == 0 || fw == 0 {
            bail!(Config, "fusion dimensions must be positive");
        }
        let (dh, dw) = (h / div, w / div);
        if fh < dh || fw < dw || fh > h || fw > w {
            bail!(
                Config,
                "fusion size {fh}x{fw} must lie between the deepest encoder size {dh}x{dw} and the input {h}x{w}"
            );
        }
        Ok(())
    }

    /// Channel width of encoder output `i` (0 = stem).
    pub fn stage_channels(&self, i: usize) -> usize {
        (self.base_channels << i).min(self.max_channels)
    }

    /// Layer ids accepted by attribution, in registry order.
    pub fn layer_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = (0..self.enc_blocks).map(|i| format!("enc.{i}")).collect();
        ids.extend((0..=self.dec_blocks).map(|j| format!("dec.{j}")));
        ids.push("fusion".to_string());
        ids
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Backbone,
    SegHead,
    Fusion,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub group: ParamGroup,
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    weight: usize,
    bias: usize,
    padding: usize,
}

#[derive(Clone, Copy, Debug)]
struct Block {
    first: Conv,
    second: Conv,
}

#[derive(Clone, Debug)]
struct FusionHead {
    proj_enc: Option<Conv>,
    proj_dec: Option<Conv>,
    gate: Option<usize>,
    merge: Option<Conv>,
    psi: Conv,
}

/// Which heads a forward pass runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Segment,
    Classify,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    /// Record parameters as differentiable leaves.
    pub param_grads: bool,
    /// Record the image as a differentiable leaf (needed to read feature
    /// gradients without parameter gradients).
    pub input_grad: bool,
    /// Replaces the learned gate value `sigmoid(w)` (gated head only).
    pub alpha_override: Option<f64>,
}

/// Everything recorded by one forward pass on a tape.
#[derive(Clone, Debug)]
pub struct Forward {
    pub image: Var,
    /// Parameter leaves, index-aligned with [`SailModel::params`].
    pub params: Vec<Var>,
    /// Stem followed by the encoder blocks.
    pub encoder: Vec<Var>,
    /// Decoder stages `dec.0 ..= dec.N`; empty when the head skips it.
    pub decoder: Vec<Var>,
    pub features: BTreeMap<String, Var>,
    pub seg_probs: Option<Var>,
    pub fused: Option<Var>,
    pub logits: Option<Var>,
    pub probs: Option<Var>,
}

impl Forward {
    pub fn feature(&self, layer_id: &str) -> Result<Var> {
        self.features.get(layer_id).copied().ok_or_else(|| {
            let known: Vec<&str> = self.features.keys().map(String::as_str).collect();
            SailError::Lookup(format!("unknown layer '{layer_id}'; valid ids: {}", known.join(", ")))
        })
    }
}

#[derive(Clone, Debug)]
pub struct SailModel {
    config: ModelConfig,
    params: Vec<Param>,
    stem: Block,
    enc: Vec<Block>,
    dec: Vec<Block>,
    seg_head: Conv,
    head: FusionHead,
}

struct Builder {
    params: Vec<Param>,
    rng: ChaCha8Rng,
    group: ParamGroup,
}

impl Builder {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, gain: f64) -> Conv {
        let fan_in = (cin * k * k) as f64;
        let std = (gain / fan_in).sqrt();
        let rng = &mut self.rng;
        let w = Tensor::from_fn(&[cout, cin, k, k], |_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        });
        let weight = self.push(format!("{name}.weight"), w);
        let bias = self.push(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Conv {
            weight,
            bias,
            padding: k / 2,
        }
    }

    fn zero_conv(&mut self, name: &str, cin: usize, cout: usize) -> Conv {
        let weight = self.push(format!("{name}.weight"), Tensor::zeros(&[cout, cin, 1, 1]));
        let bias = self.push(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Conv { weight, bias, padding: 0 }
    }

    fn block(&mut self, name: &str, cin: usize, cout: usize) -> Block {
        Block {
            first: self.conv(&format!("{name}.conv1"), cin, cout, 3, 2.0),
            second: self.conv(&format!("{name}.conv2"), cout, cout, 3, 2.0),
        }
    }

    fn push(&mut self, name: String, value: Tensor) -> usize {
        self.params.push(Param {
            name,
            value,
            group: self.group,
        });
        self.params.len() - 1
    }

    fn switch(&mut self, group: ParamGroup, seed: u64, stream: u64) {
        self.group = group;
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.rng.set_stream(stream);
    }
}

impl SailModel {
    /// Builds a model with He-normal conv weights, zero biases and a zero
    /// class scorer `psi`. Backbone, segmentation head and fusion head draw
    /// from separate RNG streams, so models that differ only in head variant
    /// share backbone weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            params: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            group: ParamGroup::Backbone,
        };
        b.switch(ParamGroup::Backbone, seed, 0);
        let n = config.enc_blocks;
        let ch = |i: usize| config.stage_channels(i);
        let stem = b.block("stem", 1, ch(0));
        let enc: Vec<Block> = (0..n).map(|i| b.block(&format!("enc.{i}"), ch(i), ch(i + 1))).collect();
        let mut dec = vec![b.block("dec.0", ch(n), ch(n))];
        for j in 1..=n {
            let skip = ch(n - j);
            let up = ch(n - j + 1);
            dec.push(b.block(&format!("dec.{j}"), up + skip, skip));
        }

        b.switch(ParamGroup::SegHead, seed, 1);
        let seg_head = b.conv("seg_head", ch(0), config.num_seg_classes, 1, 1.0);

        b.switch(ParamGroup::Fusion, seed, 2);
        let (_, _, fc) = config.fusion_dims();
        let variant = config.head_variant;
        let proj_enc = variant.uses_encoder().then(|| b.conv("fusion.proj_enc", ch(n), fc, 1, 1.0));
        let proj_dec = variant.uses_decoder().then(|| b.conv("fusion.proj_dec", ch(0), fc, 1, 1.0));
        let gate = (variant == HeadVariant::Gated).then(|| b.push("fusion.gate".into(), Tensor::scalar(0.0)));
        let merge = (variant == HeadVariant::Merge).then(|| b.conv("fusion.merge", 2 * fc, fc, 1, 1.0));
        // Zero class rows receive exactly opposite gradients under a
        // two-way softmax, so they stay antisymmetric through training.
        let psi = b.zero_conv("fusion.psi", fc, config.num_cls_classes);

        Ok(SailModel {
            config,
            params: b.params,
            stem,
            enc,
            dec,
            seg_head,
            head: FusionHead {
                proj_enc,
                proj_dec,
                gate,
                merge,
                psi,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let Some(p) = self.params.iter_mut().find(|p| p.name == name) else {
            bail!(Lookup, "no parameter named '{name}'");
        };
        if p.value.shape() != value.shape() {
            bail!(Dimension, "parameter '{name}' has shape {:?}, got {:?}", p.value.shape(), value.shape());
        }
        p.value = value;
        Ok(())
    }

    /// Gate value `sigmoid(w)`, or `None` for heads without a gate.
    pub fn alpha(&self) -> Option<f64> {
        self.head.gate.map(|g| {
            let w = self.params[g].value.data()[0];
            let mut t = Tape::new();
            let v = t.leaf(Tensor::scalar(w), false);
            let a = t.sigmoid(v).expect("finite gate");
            t.value(a).data()[0]
        })
    }

    /// Copies backbone and segmentation-head parameters from `other`.
    pub fn load_backbone_from(&mut self, other: &SailModel) -> Result<()> {
        for p in self.params.iter_mut().filter(|p| p.group != ParamGroup::Fusion) {
            let Some(src) = other.param(&p.name) else {
                bail!(Corrupt, "source model lacks parameter '{}'", p.name);
            };
            if src.value.shape() != p.value.shape() {
                bail!(Corrupt, "shape mismatch for '{}': {:?} vs {:?}", p.name, src.value.shape(), p.value.shape());
            }
            p.value = src.value.clone();
        }
        Ok(())
    }

    fn check_image(&self, images: &Tensor) -> Result<()> {
        let (_, c, h, w) = images.dims4()?;
        let [eh, ew] = self.config.input_size;
        if c != 1 || h != eh || w != ew {
            bail!(Dimension, "expected images [B,1,{eh},{ew}], got {:?}", images.shape());
        }
        Ok(())
    }

    fn conv(&self, tape: &mut Tape, pv: &[Var], x: Var, c: Conv) -> Result<Var> {
        tape.conv2d(x, pv[c.weight], pv[c.bias], 1, c.padding)
    }

    fn block(&self, tape: &mut Tape, pv: &[Var], x: Var, b: Block) -> Result<Var> {
        let y = self.conv(tape, pv, x, b.first)?;
        let y = tape.relu(y)?;
        let y = self.conv(tape, pv, y, b.second)?;
        tape.relu(y)
    }

    /// Stem plus one output per encoder block, halving resolution each block.
    pub fn encode(&self, tape: &mut Tape, pv: &[Var], image: Var) -> Result<Vec<Var>> {
        let mut feats = vec![self.block(tape, pv, image, self.stem)?];
        for b in &self.enc {
            let pooled = tape.max_pool2d(*feats.last().expect("stem"), 2, 2)?;
            feats.push(self.block(tape, pv, pooled, *b)?);
        }
        Ok(feats)
    }

    /// Decoder stages; the last one is at input resolution.
    pub fn decode(&self, tape: &mut Tape, pv: &[Var], enc: &[Var]) -> Result<Vec<Var>> {
        let n = self.config.enc_blocks;
        if enc.len() != n + 1 {
            bail!(Usage, "decoder needs {} encoder outputs, got {}", n + 1, enc.len());
        }
        let mut feats = vec![self.block(tape, pv, enc[n], self.dec[0])?];
        for j in 1..=n {
            let skip = enc[n - j];
            let (_, _, h, w) = tape.value(skip).dims4()?;
            let up = tape.bilinear_upsample(*feats.last().expect("dec.0"), h, w)?;
            let cat = tape.concat_channels(&[up, skip])?;
            feats.push(self.block(tape, pv, cat, self.dec[j])?);
        }
        Ok(feats)
    }

    /// Aligns, projects and combines the deepest encoder and final decoder
    /// features according to the head variant.
    pub fn fuse(
        &self,
        tape: &mut Tape,
        pv: &[Var],
        enc_deep: Option<Var>,
        dec_final: Option<Var>,
        alpha_override: Option<f64>,
    ) -> Result<Var> {
        let (fh, fw, _) = self.config.fusion_dims();
        let h = &self.head;
        let enc_hat = match (h.proj_enc, enc_deep) {
            (Some(c), Some(e)) => {
                let up = tape.bilinear_upsample(e, fh, fw)?;
                Some(self.conv(tape, pv, up, c)?)
            }
            (Some(_), None) => bail!(Usage, "head needs encoder features"),
            _ => None,
        };
        let dec_hat = match (h.proj_dec, dec_final) {
            (Some(c), Some(d)) => {
                let pooled = tape.adaptive_avg_pool(d, fh, fw)?;
                Some(self.conv(tape, pv, pooled, c)?)
            }
            (Some(_), None) => bail!(Usage, "head needs decoder features"),
            _ => None,
        };
        match self.config.head_variant {
            HeadVariant::EncOnly => Ok(enc_hat.expect("enc projection")),
            HeadVariant::DecOnly => Ok(dec_hat.expect("dec projection")),
            variant => {
                let (e, d) = (enc_hat.expect("enc projection"), dec_hat.expect("dec projection"));
                match variant {
                    HeadVariant::Gated => {
                        let alpha = match alpha_override {
                            Some(a) => tape.leaf(Tensor::scalar(a), false),
                            None => tape.sigmoid(pv[h.gate.expect("gate")])?,
                        };
                        let one_minus = tape.affine(alpha, -1.0, 1.0)?;
                        let a = tape.scale_by(e, alpha)?;
                        let b = tape.scale_by(d, one_minus)?;
                        tape.add(a, b)
                    }
                    HeadVariant::Merge => {
                        let cat = tape.concat_channels(&[e, d])?;
                        self.conv(tape, pv, cat, h.merge.expect("merge conv"))
                    }
                    HeadVariant::Multiply => tape.mul(e, d),
                    HeadVariant::ChMultiply => {
                        let pooled = tape.global_avg_pool(d)?;
                        let gate = tape.sigmoid(pooled)?;
                        tape.channel_scale(e, gate)
                    }
                    HeadVariant::EncOnly | HeadVariant::DecOnly => unreachable!(),
                }
            }
        }
    }

    /// Runs the network on `images [B,1,H,W]`, recording onto `tape`.
    pub fn forward(&self, tape: &mut Tape, images: &Tensor, task: Task, opts: ForwardOptions) -> Result<Forward> {
        self.check_image(images)?;
        let image = tape.leaf(images.clone(), opts.input_grad);
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), opts.param_grads))
            .collect();
        let encoder = self.encode(tape, &params, image)?;
        let need_decoder = task == Task::Segment || self.config.head_variant.uses_decoder();
        let decoder = if need_decoder {
            self.decode(tape, &params, &encoder)?
        } else {
            Vec::new()
        };

        let mut features = BTreeMap::new();
        for (i, &v) in encoder.iter().skip(1).enumerate() {
            features.insert(format!("enc.{i}"), v);
        }
        for (j, &v) in decoder.iter().enumerate() {
            features.insert(format!("dec.{j}"), v);
        }

        let mut fwd = Forward {
            image,
            params,
            encoder,
            decoder,
            features,
            seg_probs: None,
            fused: None,
            logits: None,
            probs: None,
        };
        match task {
            Task::Segment => {
                let last = *fwd.decoder.last().expect("decoder output");
                let logits = self.conv(tape, &fwd.params, last, self.seg_head)?;
                fwd.seg_probs = Some(tape.channel_softmax(logits)?);
            }
            Task::Classify => {
                let enc_deep = self.config.head_variant.uses_encoder().then(|| *fwd.encoder.last().expect("enc"));
                let dec_final = fwd.decoder.last().copied();
                let fused = self.fuse(tape, &fwd.params, enc_deep, dec_final, opts.alpha_override)?;
                fwd.features.insert("fusion".to_string(), fused);
                let scores = self.conv(tape, &fwd.params, fused, self.head.psi)?;
                let logits = tape.global_avg_pool(scores)?;
                fwd.fused = Some(fused);
                fwd.logits = Some(logits);
                fwd.probs = Some(tape.softmax(logits)?);
            }
        }
        Ok(fwd)
    }

    /// Per-pixel class probabilities `[B, L+1, H, W]`.
    pub fn segment(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let f = self.forward(&mut tape, images, Task::Segment, ForwardOptions::default())?;
        Ok(tape.value(f.seg_probs.expect("seg")).clone())
    }

    /// `(logits, probabilities)`, each `[B, K]`.
    pub fn classify(&self, images: &Tensor) -> Result<(Tensor, Tensor)> {
        self.classify_with(images, ForwardOptions::default())
    }

    pub fn classify_with(&self, images: &Tensor, opts: ForwardOptions) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let f = self.forward(&mut tape, images, Task::Classify, opts)?;
        Ok((
            tape.value(f.logits.expect("logits")).clone(),
            tape.value(f.probs.expect("probs")).clone(),
        ))
    }
}

impl ProbabilityModel for SailModel {
    fn class_probabilities(&self, images: &Tensor) -> Result<Tensor> {
        Ok(self.classify(images)?.1)
    }
}
