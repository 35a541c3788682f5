//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.
//!
//! Runs single-threaded. Training three seeds of the full desk benchmark
//! dominates the runtime (tens of minutes).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sail_core::attribution::{cam_raw, explain, grad_cam, hirescam, normalize_map, CamMethod, Target};
use sail_core::autodiff::{Tape, Var};
use sail_core::config::RunConfig;
use sail_core::io::Checkpoint;
use sail_core::metrics::{
    attribution_order, layer_relevance, mean_std, perturbation_curves, rma, rra, top3, LayerMask, Perturbation,
};
use sail_core::model::{ForwardOptions, HeadVariant, ModelConfig, SailModel, Task};
use sail_core::synth::{stack_images, Splits, SyntheticScene};
use sail_core::training::{
    evaluate_classification, evaluate_segmentation, finetune_classification, pretrain_segmentation, seg_loss,
};
use sail_core::{Result, Tensor};
use walkdir::WalkDir;

const SEEDS: [u64; 3] = [0, 1, 2];
/// Random orderings per scene for the faithfulness baseline.
const RANDOM_ORDERS: usize = 100;
/// Curve resolution for the faithfulness check (101 orderings per scene).
const FAITHFULNESS_STEPS: usize = 10;
/// Label of lesion scenes.
const LESION_CLASS: usize = 1;

/// Results by criterion number; printed in order once everything has run.
#[derive(Default)]
struct Report {
    lines: BTreeMap<usize, (bool, String)>,
}

impl Report {
    fn line(&mut self, n: usize, pass: bool, detail: String) {
        eprintln!("[criterion {n} done: {}]", if pass { "PASS" } else { "FAIL" });
        self.lines.insert(n, (pass, detail));
    }

    fn finish(self) -> ! {
        let mut failed = 0;
        for (n, (pass, detail)) in &self.lines {
            failed += usize::from(!pass);
            println!("criterion {n:>2}: {} | {detail}", if *pass { "PASS" } else { "FAIL" });
        }
        println!("acceptance: {failed} of {} criteria failed", self.lines.len());
        std::process::exit(i32::from(failed > 0));
    }
}

struct SeedRun {
    data: Splits,
    stage1: SailModel,
    stage1_secs: f64,
    gated: SailModel,
    gated_secs: f64,
    enc_only: SailModel,
}

fn train_seed(seed: u64) -> Result<SeedRun> {
    let mut cfg = RunConfig::default();
    cfg.set_seed(seed);
    let data = sail_core::pipeline::dataset(&cfg)?;
    let t = Instant::now();
    let stage1 = pretrain_segmentation(SailModel::new(cfg.model.clone(), seed)?, &data.train, &data.val, &cfg.pretrain)?.model;
    let stage1_secs = t.elapsed().as_secs_f64();
    let mut heads = Vec::new();
    let mut gated_secs = 0.0;
    for v in [HeadVariant::Gated, HeadVariant::EncOnly] {
        let mut mc = cfg.model.clone();
        mc.head_variant = v;
        let t = Instant::now();
        let m = finetune_classification(SailModel::new(mc, seed)?, Some(&stage1), &data.train, &data.val, &cfg.finetune)?;
        if v == HeadVariant::Gated {
            gated_secs = t.elapsed().as_secs_f64();
        }
        heads.push(m.model);
    }
    let enc_only = heads.pop().expect("enc_only");
    let gated = heads.pop().expect("gated");
    Ok(SeedRun {
        data,
        stage1,
        stage1_secs,
        gated,
        gated_secs,
        enc_only,
    })
}

// ---- criterion 1 --------------------------------------------------------

const FD_STEP: f64 = 1e-5;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

fn random(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn weighted_sum(tape: &mut Tape, x: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    let w = tape.leaf(random(&shape, seed, -1.0, 1.0), false);
    let p = tape.mul(x, w)?;
    tape.sum(p)
}

/// Max relative error of reverse-mode against central differences over
/// every input element.
fn gradcheck(inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| tape.grad_tensor(v)).collect();
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = inputs.iter().map(|x| t.leaf(x.clone(), false)).collect();
        let l = f(&mut t, &vs)?;
        Ok(t.value(l).data()[0])
    };
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[i].data()[j], numeric));
        }
    }
    Ok(worst)
}

/// Per-parameter result of a whole-model check.
struct ModelCheck {
    /// Worst `|a - n| / max(|a|, |n|)` over parameter tensors, in L2 norm.
    tensor: f64,
    tensor_name: String,
    /// Worst element-wise relative error, for reference.
    element: f64,
}

/// Full-model loss gradient against central differences on every scalar
/// parameter. Parameters the loss does not reach must have zero numeric
/// gradient.
fn model_gradcheck(model: &SailModel, loss: impl Fn(&SailModel, &mut Tape) -> Result<(Var, Vec<Var>)>) -> Result<ModelCheck> {
    let mut tape = Tape::new();
    let (l, params) = loss(model, &mut tape)?;
    tape.backward(l)?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .zip(model.params())
        .map(|(&v, p)| tape.grad(v).map_or_else(|| vec![0.0; p.value.numel()], <[f64]>::to_vec))
        .collect();
    let eval = |m: &SailModel| -> Result<f64> {
        let mut t = Tape::new();
        let (l, _) = loss(m, &mut t)?;
        Ok(t.value(l).data()[0])
    };
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let mut check = ModelCheck {
        tensor: 0.0,
        tensor_name: String::new(),
        element: 0.0,
    };
    let mut probe = model.clone();
    for (pi, grad) in analytic.iter().enumerate() {
        let mut numeric = Vec::with_capacity(grad.len());
        for j in 0..grad.len() {
            let orig = probe.params()[pi].value.data()[j];
            probe.params_mut()[pi].value.data_mut()[j] = orig + FD_STEP;
            let up = eval(&probe)?;
            probe.params_mut()[pi].value.data_mut()[j] = orig - FD_STEP;
            let down = eval(&probe)?;
            probe.params_mut()[pi].value.data_mut()[j] = orig;
            numeric.push((up - down) / (2.0 * FD_STEP));
            check.element = check.element.max(rel_err(grad[j], numeric[j]));
        }
        let diff = norm(&mut grad.iter().zip(&numeric).map(|(a, n)| a - n));
        let scale = norm(&mut grad.iter().copied()).max(norm(&mut numeric.iter().copied())).max(1e-6);
        if diff / scale > check.tensor || check.tensor_name.is_empty() {
            check.tensor = check.tensor.max(diff / scale);
            check.tensor_name.clone_from(&probe.params()[pi].name);
        }
    }
    Ok(check)
}

fn criterion_1() -> Result<(bool, String)> {
    let t = Instant::now();
    let x4 = random(&[2, 3, 6, 6], 1, -1.0, 1.0);
    let strict: Vec<(&str, f64)> = vec![
        (
            "conv2d",
            gradcheck(&[x4.clone(), random(&[4, 3, 3, 3], 2, -1.0, 1.0), random(&[4], 3, -1.0, 1.0)], |t, v| {
                let y = t.conv2d(v[0], v[1], v[2], 1, 1)?;
                weighted_sum(t, y, 10)
            })?,
        ),
        (
            "conv2d_1x1",
            gradcheck(&[x4.clone(), random(&[2, 3, 1, 1], 4, -1.0, 1.0), random(&[2], 5, -1.0, 1.0)], |t, v| {
                let y = t.conv2d(v[0], v[1], v[2], 1, 0)?;
                weighted_sum(t, y, 11)
            })?,
        ),
        (
            "bilinear",
            gradcheck(&[random(&[1, 2, 3, 4], 6, -1.0, 1.0)], |t, v| {
                let y = t.bilinear_upsample(v[0], 7, 9)?;
                weighted_sum(t, y, 12)
            })?,
        ),
        (
            "softmax",
            gradcheck(&[random(&[3, 4], 7, -2.0, 2.0)], |t, v| {
                let y = t.softmax(v[0])?;
                weighted_sum(t, y, 13)
            })?,
        ),
        (
            "channel_softmax",
            gradcheck(&[random(&[2, 4, 3, 3], 8, -2.0, 2.0)], |t, v| {
                let y = t.channel_softmax(v[0])?;
                weighted_sum(t, y, 14)
            })?,
        ),
        (
            "sigmoid",
            gradcheck(&[random(&[5], 9, -3.0, 3.0)], |t, v| {
                let y = t.sigmoid(v[0])?;
                weighted_sum(t, y, 15)
            })?,
        ),
    ];
    let labels_px: Vec<usize> = (0..2 * 3 * 3).map(|i| (i * 7) % 4).collect();
    let loose: Vec<(&str, f64)> = vec![
        (
            "relu",
            // Keep inputs away from the kink.
            gradcheck(&[Tensor::from_fn(&[2, 5], |i| (i as f64 - 4.5) * 0.3)], |t, v| {
                let y = t.relu(v[0])?;
                weighted_sum(t, y, 20)
            })?,
        ),
        (
            "max_pool",
            gradcheck(&[x4.clone()], |t, v| {
                let y = t.max_pool2d(v[0], 2, 2)?;
                weighted_sum(t, y, 21)
            })?,
        ),
        (
            "global_avg_pool",
            gradcheck(&[x4.clone()], |t, v| {
                let y = t.global_avg_pool(v[0])?;
                weighted_sum(t, y, 22)
            })?,
        ),
        (
            "adaptive_avg_pool",
            gradcheck(&[x4.clone()], |t, v| {
                let y = t.adaptive_avg_pool(v[0], 4, 3)?;
                weighted_sum(t, y, 23)
            })?,
        ),
        (
            "concat",
            gradcheck(&[x4.clone(), random(&[2, 1, 6, 6], 24, -1.0, 1.0)], |t, v| {
                let y = t.concat_channels(&[v[0], v[1]])?;
                weighted_sum(t, y, 25)
            })?,
        ),
        (
            "add_mul",
            gradcheck(&[random(&[3, 4], 26, -1.0, 1.0), random(&[3, 4], 27, -1.0, 1.0)], |t, v| {
                let s = t.add(v[0], v[1])?;
                let p = t.mul(s, v[1])?;
                weighted_sum(t, p, 28)
            })?,
        ),
        (
            "scale_affine",
            gradcheck(&[random(&[3, 4], 29, -1.0, 1.0), random(&[1], 30, 0.2, 0.8)], |t, v| {
                let y = t.scale_by(v[0], v[1])?;
                let y = t.affine(y, -1.5, 0.25)?;
                weighted_sum(t, y, 31)
            })?,
        ),
        (
            "channel_scale",
            gradcheck(&[x4.clone(), random(&[2, 3], 32, 0.0, 1.0)], |t, v| {
                let y = t.channel_scale(v[0], v[1])?;
                weighted_sum(t, y, 33)
            })?,
        ),
        (
            "cross_entropy",
            gradcheck(&[random(&[3, 4], 34, -2.0, 2.0)], |t, v| t.cross_entropy(v[0], &[0, 3, 1]))?,
        ),
        (
            "dice_loss",
            gradcheck(&[random(&[2, 4, 3, 3], 35, -2.0, 2.0)], |t, v| {
                let p = t.channel_softmax(v[0])?;
                t.dice_loss(p, &labels_px)
            })?,
        ),
        (
            "pixel_nll",
            gradcheck(&[random(&[2, 4, 3, 3], 36, -2.0, 2.0)], |t, v| {
                let p = t.channel_softmax(v[0])?;
                t.pixel_nll(p, &labels_px)
            })?,
        ),
    ];

    let cfg = ModelConfig {
        input_size: [16, 16],
        base_channels: 2,
        max_channels: 8,
        num_seg_classes: 5,
        ..ModelConfig::default()
    };
    // Zero-initialized biases and class scorer put pre-activations exactly
    // on ReLU kinks and hide the backbone from the Stage II loss, so the
    // check runs at a generic point.
    let mut model = SailModel::new(cfg, 7)?;
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for p in model.params_mut() {
        if p.value.data().iter().all(|&v| v == 0.0) {
            p.value.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.1..0.1));
        }
    }
    let image = random(&[1, 1, 16, 16], 40, 0.0, 1.0);
    let seg_labels: Vec<usize> = (0..256).map(|i| (i / 16) * 5 / 16).collect();
    let opts = ForwardOptions {
        param_grads: true,
        ..Default::default()
    };
    let stage1 = model_gradcheck(&model, |m, tape| {
        let f = m.forward(tape, &image, Task::Segment, opts)?;
        Ok((seg_loss(tape, f.seg_probs.expect("segment"), &seg_labels, 1.0)?, f.params))
    })?;
    let stage2 = model_gradcheck(&model, |m, tape| {
        let f = m.forward(tape, &image, Task::Classify, opts)?;
        Ok((tape.cross_entropy(f.logits.expect("classify"), &[1])?, f.params))
    })?;

    let secs = t.elapsed().as_secs_f64();
    let strict_max = strict.iter().map(|p| p.1).fold(0.0, f64::max);
    let loose_max = loose.iter().map(|p| p.1).fold(0.0, f64::max);
    let worst = strict.iter().chain(&loose).max_by(|a, b| a.1.total_cmp(&b.1)).expect("ops");
    let pass = strict_max < 1e-5 && loose_max < 1e-4 && stage1.tensor < 1e-4 && stage2.tensor < 1e-4 && secs < 60.0;
    Ok((
        pass,
        format!(
            "strict ops max rel err {strict_max:.2e} (<1e-5), other ops {loose_max:.2e} (worst op {}), \
             stage I loss {:.2e} (worst {}), stage II loss {:.2e} (worst {}) (<1e-4 per parameter tensor; \
             worst single element {:.2e} / {:.2e}), {} params, {secs:.1}s (<60s)",
            worst.0,
            stage1.tensor,
            stage1.tensor_name,
            stage2.tensor,
            stage2.tensor_name,
            stage1.element,
            stage2.element,
            model.num_scalars()
        ),
    ))
}

// ---- criterion 5 --------------------------------------------------------

fn criterion_5() -> Result<(bool, String)> {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (h, w, layers) = (8, 8, 4);
    let mut worst: f64 = 0.0;
    let mut mismatched = 0;
    for pair in 0..200 {
        // Every fourth map has ties, every tenth is all zero.
        let values: Vec<f64> = (0..h * w)
            .map(|_| match pair % 4 {
                0 => rng.random_range(0..4) as f64 / 3.0,
                _ => rng.random_range(0.0..1.0),
            })
            .map(|v| if pair % 10 == 9 { 0.0 } else { v })
            .collect();
        let mut labels: Vec<usize> = (0..h * w).map(|_| rng.random_range(0..=layers)).collect();
        labels[0] = 1;
        let mask = LayerMask::new(labels.clone(), h, w, layers)?;

        let total: f64 = values.iter().sum();
        let tissue: Vec<usize> = (0..h * w).filter(|&p| labels[p] > 0).collect();
        let in_tissue: f64 = tissue.iter().map(|&p| values[p]).sum();
        let oracle_rma = if total == 0.0 {
            tissue.len() as f64 / (h * w) as f64
        } else {
            in_tissue / total
        };
        // Selection by repeated arg-max with lowest-index tie-break.
        let mut taken = vec![false; h * w];
        let mut hits = 0;
        for _ in 0..tissue.len() {
            let mut best = usize::MAX;
            for p in 0..h * w {
                if !taken[p] && (best == usize::MAX || values[p] > values[best]) {
                    best = p;
                }
            }
            taken[best] = true;
            hits += usize::from(labels[best] > 0);
        }
        let oracle_rra = hits as f64 / tissue.len() as f64;
        let mut mass = vec![0.0; layers];
        for p in 0..h * w {
            if labels[p] > 0 {
                mass[labels[p] - 1] += values[p];
            }
        }
        let msum: f64 = mass.iter().sum();
        let dist: Vec<f64> = if msum > 0.0 {
            mass.iter().map(|m| m / msum).collect()
        } else {
            (1..=layers).map(|l| labels.iter().filter(|&&x| x == l).count() as f64 / tissue.len() as f64).collect()
        };
        // The unique 3-subset whose members all outrank every other layer,
        // lower index first on equal values.
        let outranks = |a: usize, b: usize| dist[a] > dist[b] || (dist[a] == dist[b] && a < b);
        let mut best = ([0; 3], 0.0);
        for a in 0..layers {
            for b in a + 1..layers {
                for c in b + 1..layers {
                    let set = [a, b, c];
                    if set.iter().all(|&s| (0..layers).filter(|o| !set.contains(o)).all(|o| outranks(s, o))) {
                        best = ([a + 1, b + 1, c + 1], (dist[a] + dist[b] + dist[c]) / dist.iter().sum::<f64>());
                    }
                }
            }
        }

        let (m, d) = layer_relevance(&values, &mask)?;
        let (mut t3, ratio) = top3(&d)?;
        t3.sort_unstable();
        worst = worst
            .max((rma(&values, &mask)? - oracle_rma).abs())
            .max((rra(&values, &mask)? - oracle_rra).abs())
            .max((ratio - best.1).abs());
        for l in 0..layers {
            worst = worst.max((m[l] - mass[l]).abs()).max((d[l] - dist[l]).abs());
        }
        mismatched += usize::from(t3 != best.0);
    }
    let secs = t.elapsed().as_secs_f64();
    Ok((
        worst <= 1e-12 && mismatched == 0 && secs < 10.0,
        format!("max deviation {worst:.1e} (<=1e-12), top-3 set mismatches {mismatched}/200, {secs:.2}s (<10s)"),
    ))
}

// ---- criterion 4 --------------------------------------------------------

fn fusion_scores(model: &SailModel, scenes: &[SyntheticScene]) -> Result<(f64, f64)> {
    let images = stack_images(&scenes.iter().collect::<Vec<_>>())?;
    let maps = explain(model, &images, &Target::Predicted, CamMethod::GradCam, "fusion")?;
    let mut r = Vec::new();
    let mut q = Vec::new();
    for (s, a) in scenes.iter().zip(&maps) {
        r.push(rma(&a.values, &s.mask)?);
        q.push(rra(&a.values, &s.mask)?);
    }
    Ok((mean_std(&r).0, mean_std(&q).0))
}

// ---- criterion 6 --------------------------------------------------------

fn criterion_6(run: &SeedRun) -> Result<(bool, String)> {
    let t = Instant::now();
    let scenes = &run.data.test;
    let images = stack_images(&scenes.iter().collect::<Vec<_>>())?;
    let maps = explain(&run.gated, &images, &Target::Predicted, CamMethod::GradCam, "fusion")?;
    let (mut ins, mut del) = (0, 0);
    for (i, (s, a)) in scenes.iter().zip(&maps).enumerate() {
        let n = s.image.len();
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + i as u64);
        let mut orders = vec![attribution_order(&a.values, a.zero_map)];
        for _ in 0..RANDOM_ORDERS {
            let mut o: Vec<usize> = (0..n).collect();
            o.shuffle(&mut rng);
            orders.push(o);
        }
        let img = s.image_tensor();
        for mode in [Perturbation::Insertion, Perturbation::Deletion] {
            let curves = perturbation_curves(&run.gated, &img, &orders, a.target_class, FAITHFULNESS_STEPS, mode)?;
            let random_mean = curves[1..].iter().map(|c| c.auc).sum::<f64>() / RANDOM_ORDERS as f64;
            match mode {
                Perturbation::Insertion => ins += usize::from(curves[0].auc > random_mean),
                Perturbation::Deletion => del += usize::from(curves[0].auc < random_mean),
            }
        }
    }
    let n = scenes.len();
    let pass = ins * 10 >= n * 8 && del * 10 >= n * 8;
    Ok((
        pass,
        format!(
            "insertion above random on {ins}/{n}, deletion below random on {del}/{n} (>=80% each; \
             {RANDOM_ORDERS} random orders, {FAITHFULNESS_STEPS} steps), {:.0}s",
            t.elapsed().as_secs_f64()
        ),
    ))
}

// ---- criterion 7 --------------------------------------------------------

fn criterion_7(run: &SeedRun) -> Result<(bool, String)> {
    let mut hires: f64 = 0.0;
    for s in run.data.test.iter().take(20) {
        let img = s.image_tensor();
        for k in 0..2 {
            let a = grad_cam(&run.gated, &img, k, "fusion")?;
            let b = hirescam(&run.gated, &img, k, "fusion")?;
            for (x, y) in a.values.iter().zip(&b.values) {
                hires = hires.max((x - y).abs());
            }
        }
    }
    // One channel whose gradient is the same positive constant everywhere.
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut pp: f64 = 0.0;
    for _ in 0..50 {
        let acts: Vec<f64> = (0..64).map(|_| rng.random_range(0.0..2.0)).collect();
        let g = vec![rng.random_range(0.01..3.0); 64];
        let a = normalize_map(&cam_raw(CamMethod::GradCam, &acts, &g, 1)?).0;
        let b = normalize_map(&cam_raw(CamMethod::GradCamPp, &acts, &g, 1)?).0;
        for (x, y) in a.iter().zip(&b) {
            pp = pp.max((x - y).abs());
        }
    }
    Ok((
        hires <= 1e-10 && pp <= 1e-10,
        format!("hirescam vs grad_cam at fusion {hires:.1e}, grad_cam_pp vs grad_cam on uniform gradients {pp:.1e} (<=1e-10)"),
    ))
}

// ---- criterion 8 --------------------------------------------------------

fn criterion_8(run: &SeedRun) -> Result<(bool, String)> {
    let lesion: Vec<&SyntheticScene> = run.data.test.iter().filter(|s| s.label == LESION_CLASS).collect();
    let images = stack_images(&lesion)?;
    let maps = explain(&run.gated, &images, &Target::Predicted, CamMethod::GradCam, "fusion")?;
    let layer = RunConfig::default().data.synth.lesion_layer();
    let mut hits = 0;
    for (s, a) in lesion.iter().zip(&maps) {
        let (_, d) = layer_relevance(&a.values, &s.mask)?;
        let (t3, _) = top3(&d)?;
        hits += usize::from(t3[0] == layer);
    }
    let n = lesion.len();
    Ok((hits * 10 >= n * 7, format!("top-1 layer = lesion layer {layer} on {hits}/{n} lesion scenes (>=70%)")))
}

// ---- criteria 9 and 10 --------------------------------------------------

fn small_config(dir: &Path) -> Result<PathBuf> {
    let cfg = serde_json::json!({
        "seed": 3,
        "model": { "base_channels": 4, "max_channels": 8 },
        "pretrain": { "epochs": 2, "warmup_epochs": 1 },
        "finetune": { "epochs": 2, "warmup_epochs": 1 },
        "data": { "n_train": 16, "n_val": 8, "n_test": 8 },
        "xai": { "steps": 4 }
    });
    let path = dir.join("small.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg)?)?;
    Ok(path)
}

fn sail(args: &[&str], out: &Path, config: &Path) -> std::io::Result<std::process::Output> {
    Command::new(env!("CARGO_BIN_EXE_sail"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .env("SAIL_THREADS", "1")
        .output()
}

fn run_ok(args: &[&str], out: &Path, config: &Path) -> std::result::Result<(), String> {
    let o = sail(args, out, config).map_err(|e| e.to_string())?;
    if o.status.success() {
        Ok(())
    } else {
        Err(format!("{} failed: {}", args[0], String::from_utf8_lossy(&o.stderr).trim()))
    }
}

fn artifacts(root: &Path) -> Vec<PathBuf> {
    let mut files: Vec<PathBuf> = WalkDir::new(root)
        .into_iter()
        .filter_map(|e| e.ok())
        .map(|e| e.into_path())
        .filter(|p| p.is_file() && matches!(p.extension().and_then(|e| e.to_str()), Some("ckpt" | "pgm" | "f64" | "csv")))
        .map(|p| p.strip_prefix(root).expect("under root").to_path_buf())
        .collect();
    files.sort();
    files
}

fn criterion_9(tmp: &Path) -> std::result::Result<(bool, String), String> {
    let config = small_config(tmp).map_err(|e| e.to_string())?;
    let runs = [tmp.join("run_a"), tmp.join("run_b")];
    for out in &runs {
        for cmd in ["pretrain", "finetune", "explain", "evaluate"] {
            run_ok(&[cmd], out, &config)?;
        }
    }
    let files = artifacts(&runs[0]);
    let identical = files == artifacts(&runs[1])
        && files.iter().all(|f| match (fs::read(runs[0].join(f)), fs::read(runs[1].join(f))) {
            (Ok(a), Ok(b)) => a == b,
            _ => false,
        });
    let has = |ext: &str| files.iter().any(|f| f.extension().and_then(|e| e.to_str()) == Some(ext));
    let complete = has("ckpt") && has("pgm") && has("f64") && has("csv");

    let ckpt = runs[0].join("stage2.ckpt");
    let bytes = fs::read(&ckpt).map_err(|e| e.to_string())?;
    let round_trip = Checkpoint::from_bytes(&bytes).map(|c| c.to_bytes() == bytes).unwrap_or(false);

    let mut bad = bytes.clone();
    let mid = bad.len() / 2;
    bad[mid] ^= 0x40;
    let bad_path = tmp.join("corrupt.ckpt");
    fs::write(&bad_path, &bad).map_err(|e| e.to_string())?;
    let corrupt = sail(&["explain", "--checkpoint", bad_path.to_str().expect("utf-8 path")], &tmp.join("run_c"), &config)
        .map_err(|e| e.to_string())?;
    let code = corrupt.status.code();

    Ok((
        identical && complete && round_trip && code == Some(4),
        format!(
            "{} artifacts byte-identical across runs: {identical}; checkpoint round-trip exact: {round_trip}; \
             corrupted checkpoint exit code {code:?} (want 4)",
            files.len()
        ),
    ))
}

fn csv_rows(path: &Path) -> Option<(usize, bool)> {
    let text = fs::read_to_string(path).ok()?;
    let mut lines = text.lines();
    let cols = lines.next()?.split(',').count();
    let rows: Vec<&str> = lines.collect();
    let well_formed = cols > 1 && rows.iter().all(|r| r.split(',').count() == cols);
    Some((rows.len(), well_formed))
}

fn criterion_10(tmp: &Path) -> std::result::Result<(bool, String), String> {
    let config = small_config(tmp).map_err(|e| e.to_string())?;
    let out = tmp.join("ablate");
    run_ok(&["pretrain"], &out, &config)?;
    run_ok(&["ablate-heads"], &out, &config)?;
    run_ok(&["finetune"], &out, &config)?;
    run_ok(&["ablate-layers"], &out, &config)?;
    let heads = csv_rows(&out.join("ablate_heads.csv"));
    let layers = csv_rows(&out.join("ablate_layers.csv"));
    Ok((
        heads == Some((6, true)) && layers == Some((10, true)),
        format!("ablate_heads.csv (rows, well-formed) {heads:?} want (6, true); ablate_layers.csv {layers:?} want (10, true)"),
    ))
}

fn main() {
    // Runtime bounds are single-threaded.
    rayon::ThreadPoolBuilder::new().num_threads(1).build_global().expect("fresh global pool");
    let mut report = Report::default();
    let fail = |e: &dyn std::fmt::Display| (false, format!("error: {e}"));

    let (p, d) = criterion_1().unwrap_or_else(|e| fail(&e));
    report.line(1, p, d);
    let (p, d) = criterion_5().unwrap_or_else(|e| fail(&e));
    report.line(5, p, d);

    let tmp = tempfile::tempdir().expect("temp dir");
    let (p, d) = criterion_9(tmp.path()).unwrap_or_else(|e| fail(&e));
    report.line(9, p, d);
    let (p, d) = criterion_10(tmp.path()).unwrap_or_else(|e| fail(&e));
    report.line(10, p, d);

    let mut runs = Vec::new();
    for seed in SEEDS {
        match train_seed(seed) {
            Ok(r) => runs.push(r),
            Err(e) => {
                for n in [2, 3, 4, 6, 7, 8] {
                    report.line(n, false, format!("training seed {seed} failed: {e}"));
                }
                report.finish();
            }
        }
    }
    let first = &runs[0];

    let (p, d) = (|| -> Result<(bool, String)> {
        let (dice, iou) = evaluate_segmentation(&first.stage1, &first.data.test)?;
        Ok((
            dice >= 0.85 && iou >= 0.75 && first.stage1_secs < 600.0,
            format!("test Dice {dice:.4} (>=0.85), IoU {iou:.4} (>=0.75), 50 epochs in {:.0}s (<600s)", first.stage1_secs),
        ))
    })()
    .unwrap_or_else(|e| fail(&e));
    report.line(2, p, d);

    let (p, d) = (|| -> Result<(bool, String)> {
        let r = evaluate_classification(&first.gated, &first.data.test)?;
        Ok((
            r.auroc >= 0.95 && first.gated_secs < 600.0,
            format!("gated test AUROC {:.4} (>=0.95), accuracy {:.3}, {:.0}s (<600s)", r.auroc, r.accuracy, first.gated_secs),
        ))
    })()
    .unwrap_or_else(|e| fail(&e));
    report.line(3, p, d);

    let (p, d) = (|| -> Result<(bool, String)> {
        let mut wins = 0;
        let mut parts = Vec::new();
        for (seed, r) in SEEDS.iter().zip(&runs) {
            let (gr, gq) = fusion_scores(&r.gated, &r.data.test)?;
            let (er, eq) = fusion_scores(&r.enc_only, &r.data.test)?;
            let win = gr - er >= 0.05 && gq > eq;
            wins += usize::from(win);
            parts.push(format!("seed {seed}: RMA {gr:.3} vs {er:.3}, RRA {gq:.3} vs {eq:.3}"));
        }
        Ok((
            wins * 2 > SEEDS.len(),
            format!("gated beats enc_only by >=5pp RMA and on RRA on {wins}/3 seeds [{}]", parts.join("; ")),
        ))
    })()
    .unwrap_or_else(|e| fail(&e));
    report.line(4, p, d);

    let (p, d) = criterion_6(first).unwrap_or_else(|e| fail(&e));
    report.line(6, p, d);
    let (p, d) = criterion_7(first).unwrap_or_else(|e| fail(&e));
    report.line(7, p, d);
    let (p, d) = criterion_8(first).unwrap_or_else(|e| fail(&e));
    report.line(8, p, d);

    report.finish();
}
