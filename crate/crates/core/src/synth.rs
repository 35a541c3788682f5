//! Synthetic layered scenes with exact layer masks and optional lesions.
//!
//! A scene is `layers` horizontal bands between background margins. Band
//! boundaries share one sinusoidal wobble, intensities are fixed per layer
//! and multiplicative Gaussian speckle is applied on top. Class 1 scenes
//! carry a dark elliptical pocket inside the lesion layer.
//!
//! Geometry, speckle and lesion placement draw from separate RNG streams
//! of the scene seed, so the class-0 and class-1 scenes of one seed differ
//! only on the lesion pixels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::metrics::LayerMask;
use crate::tensor::Tensor;

const BASE_INTENSITY: [f64; 8] = [0.80, 0.35, 0.65, 0.90, 0.45, 0.70, 0.30, 0.55];
const MIN_BAND_PX: f64 = 2.0;
const STREAM_GEOMETRY: u64 = 0;
const STREAM_SPECKLE: u64 = 1;
const STREAM_LESION: u64 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub layers: usize,
    /// Standard deviation of the multiplicative speckle.
    pub noise_sigma: f64,
    /// Amplitude in pixels of the shared boundary sinusoid.
    pub boundary_wobble: f64,
    /// Background fraction above and below the tissue.
    pub margin: f64,
    /// 1-based layer that receives the lesion; `None` means `layers / 2`.
    pub lesion_layer: Option<usize>,
    pub lesion_intensity: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            height: 32,
            width: 32,
            layers: 8,
            noise_sigma: 0.1,
            boundary_wobble: 1.5,
            margin: 0.2,
            lesion_layer: None,
            lesion_intensity: 0.08,
        }
    }
}

impl SynthConfig {
    pub const NUM_CLASSES: usize = 2;

    pub fn lesion_layer(&self) -> usize {
        self.lesion_layer.unwrap_or(self.layers / 2)
    }

    pub fn materialize(&mut self) {
        self.lesion_layer = Some(self.lesion_layer());
    }

    /// Relative band thickness: the lesion layer is twice as thick.
    fn weights(&self) -> Vec<f64> {
        let lesion = self.lesion_layer();
        (1..=self.layers).map(|l| if l == lesion { 2.0 } else { 1.0 }).collect()
    }

    /// Thickness in pixels of each band.
    pub fn thicknesses(&self) -> Vec<f64> {
        let weights = self.weights();
        let span = self.height as f64 * (1.0 - 2.0 * self.margin);
        let total: f64 = weights.iter().sum();
        weights.iter().map(|w| w * span / total).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers < 4 {
            bail!(Config, "need at least 4 layers, got {}", self.layers);
        }
        if self.height < 32 || self.width == 0 {
            bail!(Config, "scene height must be at least 32, got {}x{}", self.height, self.width);
        }
        if !(0.0..0.5).contains(&self.margin) {
            bail!(Config, "margin must lie in [0, 0.5), got {}", self.margin);
        }
        if !(1..=self.layers).contains(&self.lesion_layer()) {
            bail!(Config, "lesion layer {} outside 1..={}", self.lesion_layer(), self.layers);
        }
        if self.noise_sigma < 0.0 || self.boundary_wobble < 0.0 || !(0.0..=1.0).contains(&self.lesion_intensity) {
            bail!(Config, "noise, wobble and lesion intensity must be non-negative (intensity <= 1)");
        }
        let thinnest = self.thicknesses().into_iter().fold(f64::INFINITY, f64::min);
        if thinnest < MIN_BAND_PX {
            bail!(
                Config,
                "{} layers in {} rows gives {thinnest:.2} px bands; need at least {MIN_BAND_PX}",
                self.layers,
                self.height
            );
        }
        Ok(())
    }

    /// Base intensity of 1-based layer `l`.
    pub fn layer_intensity(l: usize) -> f64 {
        match BASE_INTENSITY.get(l - 1) {
            Some(&v) => v,
            None => 0.25 + 0.7 * ((l as f64 * 0.618_033_988_75).fract()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    /// Row-major `height * width` intensities in `[0, 1]`.
    pub image: Vec<f64>,
    pub mask: LayerMask,
    pub label: usize,
    /// Row-major pixel indices of the lesion, sorted; empty for class 0.
    pub lesion_region: Vec<usize>,
    pub seed: u64,
}

impl SyntheticScene {
    pub fn height(&self) -> usize {
        self.mask.height()
    }

    pub fn width(&self) -> usize {
        self.mask.width()
    }

    /// The image as `[1, 1, H, W]`.
    pub fn image_tensor(&self) -> Tensor {
        Tensor::new(vec![1, 1, self.height(), self.width()], self.image.clone()).expect("scene dims")
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

pub fn generate_scene(seed: u64, cfg: &SynthConfig, class_k: usize) -> Result<SyntheticScene> {
    cfg.validate()?;
    if class_k >= SynthConfig::NUM_CLASSES {
        bail!(Config, "class {class_k} not supported; classes are 0 (clean) and 1 (lesion)");
    }
    let (h, w, nl) = (cfg.height, cfg.width, cfg.layers);

    let mut geo = stream(seed, STREAM_GEOMETRY);
    let shift: f64 = geo.random_range(-1.0..=1.0);
    let freq: f64 = geo.random_range(0.5..=1.5);
    let phase: f64 = geo.random_range(0.0..std::f64::consts::TAU);
    let top = h as f64 * cfg.margin + shift;
    let mut edges = vec![top];
    for t in cfg.thicknesses() {
        edges.push(edges.last().expect("top") + t);
    }
    let offset = |x: usize| {
        cfg.boundary_wobble * (std::f64::consts::TAU * freq * (x as f64 + 0.5) / w as f64 + phase).sin()
    };

    let mut labels = vec![0usize; h * w];
    let mut image = vec![0.0; h * w];
    for x in 0..w {
        let dy = offset(x);
        for r in 0..h {
            let yc = r as f64 + 0.5 - dy;
            if let Some(l) = (1..=nl).find(|&l| edges[l - 1] <= yc && yc < edges[l]) {
                labels[r * w + x] = l;
                image[r * w + x] = SynthConfig::layer_intensity(l);
            }
        }
    }

    let mut lesion_region = Vec::new();
    if class_k == 1 {
        let ll = cfg.lesion_layer();
        let mut les = stream(seed, STREAM_LESION);
        let cx: f64 = les.random_range(0.25 * w as f64..=0.75 * w as f64);
        let rx = w as f64 / 8.0 * les.random_range(0.8..=1.2);
        let thick = edges[ll] - edges[ll - 1];
        let ry = 0.4 * thick;
        // Centre follows the local boundary height so it stays mid-band.
        let cy = (edges[ll - 1] + edges[ll]) / 2.0 + offset(cx.floor().min((w - 1) as f64) as usize);
        for r in 0..h {
            for x in 0..w {
                let p = r * w + x;
                let (u, v) = ((x as f64 + 0.5 - cx) / rx, (r as f64 + 0.5 - cy) / ry);
                if u * u + v * v <= 1.0 && labels[p] == ll {
                    lesion_region.push(p);
                    image[p] = cfg.lesion_intensity;
                }
            }
        }
    }

    let mut speckle = stream(seed, STREAM_SPECKLE);
    for v in image.iter_mut() {
        let z: f64 = StandardNormal.sample(&mut speckle);
        *v = (*v * (1.0 + cfg.noise_sigma * z)).clamp(0.0, 1.0);
    }

    Ok(SyntheticScene {
        image,
        mask: LayerMask::new(labels, h, w, nl)?,
        label: class_k,
        lesion_region,
        seed,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Vec<SyntheticScene>,
    pub val: Vec<SyntheticScene>,
    pub test: Vec<SyntheticScene>,
}

/// Scene seed for position `offset` of the concatenated splits.
pub fn scene_seed(master: u64, offset: usize) -> u64 {
    master.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(offset as u64)
}

/// Builds train/val/test splits with consecutive, non-overlapping scene
/// seeds. Labels alternate `0, 1, 0, ...` within each split.
pub fn make_dataset(n_train: usize, n_val: usize, n_test: usize, cfg: &SynthConfig, seed: u64) -> Result<Splits> {
    if n_train == 0 || n_val == 0 || n_test == 0 {
        bail!(Config, "split sizes must be at least 1");
    }
    cfg.validate()?;
    let split = |start: usize, n: usize| -> Result<Vec<SyntheticScene>> {
        (0..n)
            .into_par_iter()
            .map(|i| generate_scene(scene_seed(seed, start + i), cfg, i % SynthConfig::NUM_CLASSES))
            .collect()
    };
    Ok(Splits {
        train: split(0, n_train)?,
        val: split(n_train, n_val)?,
        test: split(n_train + n_val, n_test)?,
    })
}

/// Stacks scene images into `[B, 1, H, W]`.
pub fn stack_images(scenes: &[&SyntheticScene]) -> Result<Tensor> {
    let Some(first) = scenes.first() else {
        bail!(Input, "no scenes to stack");
    };
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(scenes.len() * h * w);
    for s in scenes {
        if (s.height(), s.width()) != (h, w) {
            bail!(Dimension, "scene sizes differ");
        }
        data.extend_from_slice(&s.image);
    }
    Tensor::new(vec![scenes.len(), 1, h, w], data)
}
