//! Explanation and classification metrics.
//!
//! Anatomy-aware scores (relevance mass / rank accuracy, layer relevance,
//! top-3 concentration) are pure functions of an attribution map and a
//! [`LayerMask`]. Deletion and insertion curves query a model through
//! [`ProbabilityModel`].

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::tensor::Tensor;

/// Per-pixel layer labels: 0 is background, `1..=layer_count` are layers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerMask {
    labels: Vec<usize>,
    height: usize,
    width: usize,
    layer_count: usize,
}

impl LayerMask {
    pub fn new(labels: Vec<usize>, height: usize, width: usize, layer_count: usize) -> Result<Self> {
        if labels.len() != height * width {
            bail!(Dimension, "mask has {} labels for {height}x{width}", labels.len());
        }
        if let Some(&bad) = labels.iter().find(|&&l| l > layer_count) {
            bail!(Input, "mask label {bad} exceeds layer count {layer_count}");
        }
        Ok(LayerMask {
            labels,
            height,
            width,
            layer_count,
        })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn layer_count(&self) -> usize {
        self.layer_count
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn in_tissue(&self, pixel: usize) -> bool {
        self.labels[pixel] > 0
    }

    /// `|G|`, the number of non-background pixels.
    pub fn tissue_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l > 0).count()
    }

    /// `|Omega_l|` for `l` in `0..=layer_count`.
    pub fn areas(&self) -> Vec<usize> {
        let mut a = vec![0; self.layer_count + 1];
        for &l in &self.labels {
            a[l] += 1;
        }
        a
    }
}

fn check_dims(values: &[f64], mask: &LayerMask) -> Result<()> {
    if values.len() != mask.len() {
        bail!(Input, "attribution has {} pixels, mask has {}", values.len(), mask.len());
    }
    Ok(())
}

/// Relevance mass accuracy: share of attribution mass inside tissue. A map
/// with zero total mass counts as uniform, giving `|G| / |Omega|`.
pub fn rma(values: &[f64], mask: &LayerMask) -> Result<f64> {
    check_dims(values, mask)?;
    let total: f64 = values.iter().sum();
    if total <= 0.0 {
        return Ok(mask.tissue_count() as f64 / mask.len() as f64);
    }
    let inside: f64 = values
        .iter()
        .enumerate()
        .filter(|&(p, _)| mask.in_tissue(p))
        .map(|(_, v)| v)
        .sum();
    Ok(inside / total)
}

/// Pixel indices by descending value; ties keep row-major order.
pub fn descending_order(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    idx
}

/// Relevance rank accuracy: fraction of the top-`|G|` pixels lying in `G`.
pub fn rra(values: &[f64], mask: &LayerMask) -> Result<f64> {
    check_dims(values, mask)?;
    let k = mask.tissue_count();
    if k == 0 {
        bail!(Input, "relevance rank accuracy needs at least one tissue pixel");
    }
    let hits = descending_order(values)[..k].iter().filter(|&&p| mask.in_tissue(p)).count();
    Ok(hits as f64 / k as f64)
}

/// Per-layer relevance mass `m(l)` and its distribution over layers
/// `1..=L` (background excluded). Zero total mass falls back to the
/// uniform-map distribution `|Omega_l| / |G|`.
pub fn layer_relevance(values: &[f64], mask: &LayerMask) -> Result<(Vec<f64>, Vec<f64>)> {
    check_dims(values, mask)?;
    let tissue = mask.tissue_count();
    if tissue == 0 {
        bail!(Input, "mask has no layer pixels");
    }
    let mut mass = vec![0.0; mask.layer_count()];
    for (&l, &v) in mask.labels().iter().zip(values) {
        if l > 0 {
            mass[l - 1] += v;
        }
    }
    let total: f64 = mass.iter().sum();
    let normalized = if total > 0.0 {
        mass.iter().map(|m| m / total).collect()
    } else {
        mask.areas()[1..].iter().map(|&a| a as f64 / tissue as f64).collect()
    };
    Ok((mass, normalized))
}

/// Three largest layers (1-based, ties to the lower index) and their share
/// of the total.
pub fn top3(distribution: &[f64]) -> Result<([usize; 3], f64)> {
    if distribution.len() < 3 {
        bail!(Input, "top-3 needs at least 3 layers, got {}", distribution.len());
    }
    let order = descending_order(distribution);
    let layers = [order[0] + 1, order[1] + 1, order[2] + 1];
    let total: f64 = distribution.iter().sum();
    let ratio = if total > 0.0 {
        order[..3].iter().map(|&i| distribution[i]).sum::<f64>() / total
    } else {
        3.0 / distribution.len() as f64
    };
    Ok((layers, ratio))
}

/// Most common unordered top-3 set (ties to the lexicographically smallest
/// sorted set) and the fraction of samples that share it.
pub fn top3_frequency(sets: &[[usize; 3]]) -> Result<([usize; 3], f64)> {
    if sets.is_empty() {
        bail!(Input, "top-3 frequency of an empty cohort");
    }
    let mut counts: BTreeMap<[usize; 3], usize> = BTreeMap::new();
    for s in sets {
        let mut key = *s;
        key.sort_unstable();
        *counts.entry(key).or_default() += 1;
    }
    let (modal, count) = counts
        .into_iter()
        .fold(([0; 3], 0), |best, (k, c)| if c > best.1 { (k, c) } else { best });
    Ok((modal, count as f64 / sets.len() as f64))
}

// ---- classification -------------------------------------------------------

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub auroc: f64,
    pub auprc: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub kappa: f64,
}

/// Tie-corrected Mann–Whitney AUROC of `scores` for binary `positive` flags.
pub fn auroc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        bail!(Input, "AUROC is undefined when only one class is present");
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // Average 1-based rank of the tie group.
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg * idx[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

/// Average precision over distinct score thresholds.
pub fn auprc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    if n_pos == 0 {
        bail!(Input, "AUPRC is undefined without positives");
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut seen, mut prev_recall, mut ap) = (0usize, 0usize, 0.0, 0.0);
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        tp += idx[i..=j].iter().filter(|&&k| positive[k]).count();
        seen += j - i + 1;
        let recall = tp as f64 / n_pos as f64;
        ap += (recall - prev_recall) * tp as f64 / seen as f64;
        prev_recall = recall;
        i = j + 1;
    }
    Ok(ap)
}

/// Cohen's kappa from a square confusion matrix (`rows = truth`).
pub fn cohen_kappa(confusion: &[Vec<usize>]) -> f64 {
    let n: usize = confusion.iter().flatten().sum();
    if n == 0 {
        return 0.0;
    }
    let n = n as f64;
    let k = confusion.len();
    let observed = (0..k).map(|i| confusion[i][i]).sum::<usize>() as f64 / n;
    let expected = (0..k)
        .map(|i| {
            let row: usize = confusion[i].iter().sum();
            let col: usize = confusion.iter().map(|r| r[i]).sum();
            row as f64 * col as f64
        })
        .sum::<f64>()
        / (n * n);
    if (1.0 - expected).abs() < f64::EPSILON {
        return if observed >= 1.0 { 1.0 } else { 0.0 };
    }
    (observed - expected) / (1.0 - expected)
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Metrics for `probs [n, K]`. Predictions are the arg-max class (ties to
/// the lower index, i.e. a 0.5 threshold on the positive class when
/// `K = 2`). Binary tasks score class 1; multiclass tasks macro-average
/// one-vs-rest.
pub fn classification_metrics(probs: &Tensor, labels: &[usize]) -> Result<ClassificationReport> {
    let (n, k) = probs.dims2()?;
    if labels.len() != n {
        bail!(Dimension, "{} labels for {n} predictions", labels.len());
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        bail!(Input, "label {bad} out of range for {k} classes");
    }
    let rows: Vec<&[f64]> = probs.data().chunks(k).collect();
    let pred: Vec<usize> = rows
        .iter()
        .map(|r| (0..k).fold(0, |best, c| if r[c] > r[best] { c } else { best }))
        .collect();
    let mut confusion = vec![vec![0usize; k]; k];
    for (&t, &p) in labels.iter().zip(&pred) {
        confusion[t][p] += 1;
    }
    let accuracy = ratio((0..k).map(|c| confusion[c][c]).sum(), n);
    let kappa = cohen_kappa(&confusion);

    let one_vs_rest = |c: usize| -> Result<(f64, f64, f64, f64, f64)> {
        let scores: Vec<f64> = rows.iter().map(|r| r[c]).collect();
        let positive: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        let tp = confusion[c][c];
        let predicted: usize = confusion.iter().map(|r| r[c]).sum();
        let actual: usize = confusion[c].iter().sum();
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, actual);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Ok((auroc(&scores, &positive)?, auprc(&scores, &positive)?, precision, recall, f1))
    };
    let (auroc, auprc, precision, recall, f1) = if k == 2 {
        one_vs_rest(1)?
    } else {
        let per: Vec<_> = (0..k).map(one_vs_rest).collect::<Result<_>>()?;
        let mean = |f: fn(&(f64, f64, f64, f64, f64)) -> f64| per.iter().map(f).sum::<f64>() / k as f64;
        (mean(|t| t.0), mean(|t| t.1), mean(|t| t.2), mean(|t| t.3), mean(|t| t.4))
    };
    Ok(ClassificationReport {
        auroc,
        auprc,
        accuracy,
        precision,
        recall,
        f1,
        kappa,
    })
}

/// Mean Dice and IoU over classes `0..classes`, pooling pixels across all
/// samples. A class absent from both prediction and truth scores 1.
pub fn segmentation_scores(pred: &[usize], truth: &[usize], classes: usize) -> Result<(f64, f64)> {
    if pred.len() != truth.len() {
        bail!(Dimension, "{} predicted labels vs {} true labels", pred.len(), truth.len());
    }
    let mut inter = vec![0usize; classes];
    let mut psum = vec![0usize; classes];
    let mut tsum = vec![0usize; classes];
    for (&p, &t) in pred.iter().zip(truth) {
        if p >= classes || t >= classes {
            bail!(Input, "label out of range for {classes} classes");
        }
        psum[p] += 1;
        tsum[t] += 1;
        if p == t {
            inter[p] += 1;
        }
    }
    let (mut dice, mut iou) = (0.0, 0.0);
    for c in 0..classes {
        let union = psum[c] + tsum[c] - inter[c];
        if union == 0 {
            dice += 1.0;
            iou += 1.0;
        } else {
            dice += 2.0 * inter[c] as f64 / (psum[c] + tsum[c]) as f64;
            iou += inter[c] as f64 / union as f64;
        }
    }
    Ok((dice / classes as f64, iou / classes as f64))
}

// ---- deletion / insertion ---------------------------------------------------

/// Anything that maps images `[B,1,H,W]` to class probabilities `[B,K]`.
pub trait ProbabilityModel {
    fn class_probabilities(&self, images: &Tensor) -> Result<Tensor>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Perturbation {
    /// Start from the image and set pixels to 0 in order.
    Deletion,
    /// Start from a blurred copy and restore original pixels in order.
    Insertion,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationCurve {
    /// Fraction of pixels perturbed, `i / steps` for `i in 0..=steps`.
    pub fractions: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub auc: f64,
}

/// Default number of perturbation steps.
pub const DEFAULT_STEPS: usize = 100;
/// Perturbed images evaluated per model call.
const CURVE_BATCH: usize = 64;

pub fn trapezoid(xs: &[f64], ys: &[f64]) -> f64 {
    xs.windows(2)
        .zip(ys.windows(2))
        .map(|(x, y)| (x[1] - x[0]) * (y[0] + y[1]) / 2.0)
        .sum()
}

/// Separable Gaussian blur with taps at `|d| <= 3 sigma`; weights are
/// renormalized over the taps that fall inside the image.
pub fn gaussian_blur(plane: &[f64], height: usize, width: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return plane.to_vec();
    }
    let radius = (3.0 * sigma).floor() as isize;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let pass = |src: &[f64], along_rows: bool| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for y in 0..height {
            for x in 0..width {
                let (mut acc, mut norm) = (0.0, 0.0);
                for (ti, d) in (-radius..=radius).enumerate() {
                    let (sy, sx) = if along_rows {
                        (y as isize, x as isize + d)
                    } else {
                        (y as isize + d, x as isize)
                    };
                    if sy < 0 || sx < 0 || sy >= height as isize || sx >= width as isize {
                        continue;
                    }
                    acc += taps[ti] * src[sy as usize * width + sx as usize];
                    norm += taps[ti];
                }
                out[y * width + x] = acc / norm;
            }
        }
        out
    };
    pass(&pass(plane, true), false)
}

/// Blur width used as the insertion baseline: `height / 45`.
pub fn insertion_sigma(height: usize) -> f64 {
    height as f64 / 45.0
}

/// Pixel order used to perturb: descending attribution, or row-major when
/// the map carries no signal.
pub fn attribution_order(values: &[f64], zero_map: bool) -> Vec<usize> {
    if zero_map || values.iter().all(|&v| v <= 0.0) {
        (0..values.len()).collect()
    } else {
        descending_order(values)
    }
}

/// Evaluates one perturbation curve per pixel order in `orders`.
pub fn perturbation_curves<M: ProbabilityModel + ?Sized>(
    model: &M,
    image: &Tensor,
    orders: &[Vec<usize>],
    class_k: usize,
    steps: usize,
    mode: Perturbation,
) -> Result<Vec<PerturbationCurve>> {
    let (b, c, h, w) = image.dims4()?;
    if b != 1 || c != 1 {
        bail!(Dimension, "perturbation curves take a single-channel image [1,1,H,W]");
    }
    if steps < 2 {
        bail!(Config, "need at least 2 perturbation steps, got {steps}");
    }
    let n = h * w;
    for o in orders {
        if o.len() != n {
            bail!(Dimension, "pixel order has {} entries for {n} pixels", o.len());
        }
    }
    let original = image.data();
    let (start, target): (Vec<f64>, Vec<f64>) = match mode {
        Perturbation::Deletion => (original.to_vec(), vec![0.0; n]),
        Perturbation::Insertion => (gaussian_blur(original, h, w, insertion_sigma(h)), original.to_vec()),
    };
    let counts: Vec<usize> = (0..=steps).map(|i| (i * n + steps / 2) / steps).collect();

    // The endpoints do not depend on the order; evaluate them once.
    let mut frames: Vec<Vec<f64>> = vec![start.clone(), target.clone()];
    for order in orders {
        let mut cur = start.clone();
        let mut done = 0;
        for &cnt in &counts[1..steps] {
            for &p in &order[done..cnt] {
                cur[p] = target[p];
            }
            done = cnt;
            frames.push(cur.clone());
        }
    }
    let mut probs = Vec::with_capacity(frames.len());
    for chunk in frames.chunks(CURVE_BATCH) {
        let batch = Tensor::new(vec![chunk.len(), 1, h, w], chunk.concat())?;
        let out = model.class_probabilities(&batch)?;
        let (_, k) = out.dims2()?;
        if class_k >= k {
            bail!(Input, "class {class_k} out of range for {k} classes");
        }
        probs.extend(out.data().chunks(k).map(|r| r[class_k]));
    }
    let fractions: Vec<f64> = (0..=steps).map(|i| i as f64 / steps as f64).collect();
    let inner = steps - 1;
    Ok((0..orders.len())
        .map(|oi| {
            let mut ys = Vec::with_capacity(steps + 1);
            ys.push(probs[0]);
            ys.extend_from_slice(&probs[2 + oi * inner..2 + (oi + 1) * inner]);
            ys.push(probs[1]);
            PerturbationCurve {
                auc: trapezoid(&fractions, &ys),
                fractions: fractions.clone(),
                probabilities: ys,
            }
        })
        .collect())
}

pub fn deletion_auc<M: ProbabilityModel + ?Sized>(
    model: &M,
    image: &Tensor,
    values: &[f64],
    zero_map: bool,
    class_k: usize,
    steps: usize,
) -> Result<f64> {
    let order = attribution_order(values, zero_map);
    Ok(perturbation_curves(model, image, &[order], class_k, steps, Perturbation::Deletion)?[0].auc)
}

pub fn insertion_auc<M: ProbabilityModel + ?Sized>(
    model: &M,
    image: &Tensor,
    values: &[f64],
    zero_map: bool,
    class_k: usize,
    steps: usize,
) -> Result<f64> {
    let order = attribution_order(values, zero_map);
    Ok(perturbation_curves(model, image, &[order], class_k, steps, Perturbation::Insertion)?[0].auc)
}

/// Every per-sample explanation score for one map.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SampleRecord {
    pub rma: f64,
    pub rra: f64,
    pub deletion_auc: f64,
    pub insertion_auc: f64,
    pub layer_mass: Vec<f64>,
    /// Normalized layer relevance, layers `1..=L`.
    pub layer_distribution: Vec<f64>,
    pub top3_layers: [usize; 3],
    pub top3_ratio: f64,
}

/// Scores `values` (an `H*W` map) against `mask` and, through `model`, the
/// deletion and insertion curves for `class_k` on `image [1,1,H,W]`.
pub fn evaluate_sample<M: ProbabilityModel + ?Sized>(
    model: &M,
    image: &Tensor,
    mask: &LayerMask,
    values: &[f64],
    zero_map: bool,
    class_k: usize,
    steps: usize,
) -> Result<SampleRecord> {
    let (layer_mass, layer_distribution) = layer_relevance(values, mask)?;
    let (top3_layers, top3_ratio) = top3(&layer_distribution)?;
    Ok(SampleRecord {
        rma: rma(values, mask)?,
        rra: rra(values, mask)?,
        deletion_auc: deletion_auc(model, image, values, zero_map, class_k, steps)?,
        insertion_auc: insertion_auc(model, image, values, zero_map, class_k, steps)?,
        layer_mass,
        layer_distribution,
        top3_layers,
        top3_ratio,
    })
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}
