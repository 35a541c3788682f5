//! CAM-family attribution (Grad-CAM, Grad-CAM++, HiResCAM) at any
//! registered layer, returned at input resolution and max-normalized.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::kernels::bilinear_plane;
use crate::autodiff::Tape;
use crate::error::{bail, Result, SailError};
use crate::model::{ForwardOptions, SailModel, Task};
use crate::tensor::Tensor;

/// Guards the Grad-CAM++ weight denominator.
pub const PP_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CamMethod {
    GradCam,
    GradCamPp,
    HiResCam,
}

impl CamMethod {
    pub const ALL: [CamMethod; 3] = [CamMethod::GradCam, CamMethod::GradCamPp, CamMethod::HiResCam];

    pub fn name(self) -> &'static str {
        match self {
            CamMethod::GradCam => "gradcam",
            CamMethod::GradCamPp => "gradcampp",
            CamMethod::HiResCam => "hirescam",
        }
    }
}

impl fmt::Display for CamMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CamMethod {
    type Err = SailError;

    fn from_str(s: &str) -> Result<Self> {
        CamMethod::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| SailError::Config(format!("unknown method '{s}'; expected gradcam, gradcampp or hirescam")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttributionMap {
    /// Row-major `height * width` values in `[0, 1]`.
    pub values: Vec<f64>,
    pub height: usize,
    pub width: usize,
    pub target_class: usize,
    pub method: CamMethod,
    pub layer_id: String,
    /// The raw map was identically zero.
    pub zero_map: bool,
    /// Softmax probability of `target_class`.
    pub probability: f64,
}

/// Which class each explanation targets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Target {
    /// Arg-max of the model's prediction (ties to the lower class).
    Predicted,
    /// One class for the whole batch.
    Class(usize),
    /// One class per sample.
    PerSample(Vec<usize>),
}

/// Divides by the maximum; an all-zero (or non-positive) input returns
/// zeros and `true`.
pub fn normalize_map(raw: &[f64]) -> (Vec<f64>, bool) {
    let max = raw.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        (raw.iter().map(|v| v / max).collect(), false)
    } else {
        (vec![0.0; raw.len()], true)
    }
}

/// Un-normalized CAM at feature resolution from one sample's activations
/// and gradients, both `[C, h*w]` flattened.
pub fn cam_raw(method: CamMethod, activations: &[f64], grads: &[f64], channels: usize) -> Result<Vec<f64>> {
    if activations.len() != grads.len() || channels == 0 || activations.len() % channels != 0 {
        bail!(Dimension, "activations and gradients must both be [C, h*w]");
    }
    let n = activations.len() / channels;
    let mut map = vec![0.0; n];
    for c in 0..channels {
        let a = &activations[c * n..(c + 1) * n];
        let g = &grads[c * n..(c + 1) * n];
        match method {
            CamMethod::GradCam => {
                let w = g.iter().sum::<f64>() / n as f64;
                map.iter_mut().zip(a).for_each(|(m, av)| *m += w * av);
            }
            CamMethod::HiResCam => {
                map.iter_mut().zip(a.iter().zip(g)).for_each(|(m, (av, gv))| *m += gv * av);
            }
            CamMethod::GradCamPp => {
                let sum_a: f64 = a.iter().sum();
                let w: f64 = g
                    .iter()
                    .filter(|&&gv| gv != 0.0)
                    .map(|&gv| {
                        let g2 = gv * gv;
                        let alpha = g2 / (2.0 * g2 + sum_a * g2 * gv + PP_EPS);
                        alpha * gv.max(0.0)
                    })
                    .sum();
                map.iter_mut().zip(a).for_each(|(m, av)| *m += w * av);
            }
        }
    }
    map.iter_mut().for_each(|m| *m = m.max(0.0));
    Ok(map)
}

fn argmax(row: &[f64]) -> usize {
    (0..row.len()).fold(0, |best, c| if row[c] > row[best] { c } else { best })
}

/// Explains every image of `images [B,1,H,W]` with one forward and one
/// backward pass; samples never interact, so batching is exact.
pub fn explain(
    model: &SailModel,
    images: &Tensor,
    target: &Target,
    method: CamMethod,
    layer_id: &str,
) -> Result<Vec<AttributionMap>> {
    let (b, _, h, w) = images.dims4()?;
    let mut tape = Tape::new();
    let opts = ForwardOptions {
        input_grad: true,
        ..Default::default()
    };
    let fwd = model.forward(&mut tape, images, Task::Classify, opts)?;
    let feature = fwd.feature(layer_id)?;
    let logits = fwd.logits.expect("classify task");
    let probs = tape.value(fwd.probs.expect("classify task")).clone();
    let k = probs.dims2()?.1;
    let classes: Vec<usize> = match target {
        Target::Predicted => probs.data().chunks(k).map(argmax).collect(),
        Target::Class(c) => vec![*c; b],
        Target::PerSample(v) => v.clone(),
    };
    if classes.len() != b {
        bail!(Dimension, "{} target classes for {b} images", classes.len());
    }
    if let Some(&bad) = classes.iter().find(|&&c| c >= k) {
        bail!(Input, "target class {bad} out of range for {k} classes");
    }
    let mut seed = vec![0.0; b * k];
    for (i, &c) in classes.iter().enumerate() {
        seed[i * k + c] = 1.0;
    }
    tape.backward_seeded(logits, &seed)?;

    let acts = tape.value(feature);
    let (_, ch, fh, fw) = acts.dims4()?;
    let per = ch * fh * fw;
    let zeros = vec![0.0; acts.numel()];
    let grads = tape.grad(feature).unwrap_or(&zeros);
    (0..b)
        .map(|i| {
            let raw = cam_raw(method, &acts.data()[i * per..(i + 1) * per], &grads[i * per..(i + 1) * per], ch)?;
            let up = bilinear_plane(&raw, fh, fw, h, w);
            let (values, zero_map) = normalize_map(&up);
            Ok(AttributionMap {
                values,
                height: h,
                width: w,
                target_class: classes[i],
                method,
                layer_id: layer_id.to_string(),
                zero_map,
                probability: probs.data()[i * k + classes[i]],
            })
        })
        .collect()
}

fn single(model: &SailModel, image: &Tensor, class_k: usize, layer_id: &str, method: CamMethod) -> Result<AttributionMap> {
    if image.shape().first() != Some(&1) {
        bail!(Dimension, "expected a single image [1,1,H,W], got {:?}", image.shape());
    }
    Ok(explain(model, image, &Target::Class(class_k), method, layer_id)?.remove(0))
}

pub fn grad_cam(model: &SailModel, image: &Tensor, class_k: usize, layer_id: &str) -> Result<AttributionMap> {
    single(model, image, class_k, layer_id, CamMethod::GradCam)
}

pub fn grad_cam_pp(model: &SailModel, image: &Tensor, class_k: usize, layer_id: &str) -> Result<AttributionMap> {
    single(model, image, class_k, layer_id, CamMethod::GradCamPp)
}

pub fn hirescam(model: &SailModel, image: &Tensor, class_k: usize, layer_id: &str) -> Result<AttributionMap> {
    single(model, image, class_k, layer_id, CamMethod::HiResCam)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{HeadVariant, ModelConfig};

    fn img(seed: u64) -> Tensor {
        Tensor::from_fn(&[1, 1, 32, 32], |i| ((i as u64 * 2654435761 + seed) % 101) as f64 / 101.0)
    }

    fn model() -> SailModel {
        crate::model::tests::with_random_scorer(SailModel::new(ModelConfig::default(), 3).unwrap(), 4)
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_map(&[0.0, 2.0, 4.0]), (vec![0.0, 0.5, 1.0], false));
        assert_eq!(normalize_map(&[0.0; 3]), (vec![0.0; 3], true));
        let once = normalize_map(&[0.3, 0.7, 0.1]).0;
        assert_eq!(normalize_map(&once).0, once);
    }

    #[test]
    fn single_channel_linear_head() {
        // z = sum A gives an all-ones gradient.
        let a = [0.5, -1.0, 2.0, 0.0];
        let g = [1.0; 4];
        assert_eq!(cam_raw(CamMethod::GradCam, &a, &g, 1).unwrap(), vec![0.5, 0.0, 2.0, 0.0]);
        assert_eq!(cam_raw(CamMethod::HiResCam, &a, &g, 1).unwrap(), vec![0.5, 0.0, 2.0, 0.0]);
        let pp = normalize_map(&cam_raw(CamMethod::GradCamPp, &[0.5, 1.0, 2.0, 0.0], &g, 1).unwrap()).0;
        assert_eq!(pp, normalize_map(&[0.5, 1.0, 2.0, 0.0]).0);
        let g = [2.0, -1.0, 0.5, 3.0];
        assert_eq!(cam_raw(CamMethod::HiResCam, &a, &g, 1).unwrap(), vec![1.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn pp_single_location_matches_gradcam() {
        let a = [0.3, 1.2, 0.0];
        let g = [0.7, 0.2, 1.5];
        let n = |m| normalize_map(&cam_raw(m, &a, &g, 3).unwrap()).0;
        assert_eq!(n(CamMethod::GradCamPp).len(), 1);
        assert_eq!(n(CamMethod::GradCamPp), n(CamMethod::GradCam));
    }

    #[test]
    fn fusion_layer_identity_and_ranges() {
        let m = model();
        let x = img(1);
        for k in 0..2 {
            let gc = grad_cam(&m, &x, k, "fusion").unwrap();
            let hr = hirescam(&m, &x, k, "fusion").unwrap();
            assert_eq!(gc.zero_map, hr.zero_map);
            for (a, b) in gc.values.iter().zip(&hr.values) {
                assert!((a - b).abs() < 1e-10);
            }
            if !gc.zero_map {
                assert_eq!(gc.values.iter().copied().fold(0.0, f64::max), 1.0);
            }
            assert!(gc.values.iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(gc.values.len(), 32 * 32);
        }
    }

    #[test]
    fn every_method_at_every_layer() {
        let m = model();
        let x = img(2);
        for id in m.config().layer_ids() {
            for method in CamMethod::ALL {
                let map = single(&m, &x, 1, &id, method).unwrap();
                assert_eq!((map.height, map.width), (32, 32));
                assert!(map.values.iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
        assert!(matches!(grad_cam(&m, &x, 0, "dec.9"), Err(SailError::Lookup(_))));
        let enc_only = SailModel::new(ModelConfig { head_variant: HeadVariant::EncOnly, ..ModelConfig::default() }, 3).unwrap();
        assert!(matches!(grad_cam(&enc_only, &x, 0, "dec.0"), Err(SailError::Lookup(_))));
    }

    #[test]
    fn model_is_unchanged_and_batch_matches_single() {
        let m = model();
        let before = m.clone();
        let x = Tensor::stack(&[img(4), img(5)]).unwrap();
        let out = m.classify(&x).unwrap();
        let batch = explain(&m, &x, &Target::Predicted, CamMethod::GradCamPp, "enc.2").unwrap();
        assert_eq!(m.params(), before.params());
        assert_eq!(m.classify(&x).unwrap(), out);
        for (i, map) in batch.iter().enumerate() {
            let one = grad_cam_pp(&m, &x.batch_item(i).unwrap(), map.target_class, "enc.2").unwrap();
            for (a, b) in one.values.iter().zip(&map.values) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn scaling_class_row_keeps_map() {
        let m = model();
        let x = img(6);
        let base = grad_cam(&m, &x, 1, "dec.3").unwrap();
        let mut scaled = m.clone();
        let w = scaled.param("fusion.psi.weight").unwrap().value.clone();
        let (k, c) = (w.shape()[0], w.shape()[1]);
        let mut data = w.data().to_vec();
        data[c..2 * c].iter_mut().for_each(|v| *v *= 3.5);
        assert_eq!(k, 2);
        scaled.set_param("fusion.psi.weight", Tensor::new(w.shape().to_vec(), data).unwrap()).unwrap();
        let other = grad_cam(&scaled, &x, 1, "dec.3").unwrap();
        for (a, b) in base.values.iter().zip(&other.values) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn method_names_round_trip() {
        for m in CamMethod::ALL {
            assert_eq!(m.name().parse::<CamMethod>().unwrap(), m);
        }
        assert!("lime".parse::<CamMethod>().is_err());
    }
}
