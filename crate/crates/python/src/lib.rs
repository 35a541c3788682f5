//! Python bindings: models, scenes, attribution, metrics and the pipeline
//! commands. Images and maps cross the boundary as flat row-major lists.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyKeyError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use sail_core::attribution::{explain, CamMethod, Target};
use sail_core::config::RunConfig;
use sail_core::io::Checkpoint;
use sail_core::metrics::{self, LayerMask};
use sail_core::model::{HeadVariant, ModelConfig, SailModel};
use sail_core::synth::{generate_scene as synth_scene, SynthConfig};
use sail_core::{pipeline, SailError, Tensor};

fn py_err(e: SailError) -> PyErr {
    let msg = e.to_string();
    match e {
        SailError::Lookup(_) => PyKeyError::new_err(msg),
        SailError::NonFinite(_) => PyRuntimeError::new_err(msg),
        SailError::Corrupt(_) | SailError::Io(_) => PyIOError::new_err(msg),
        _ => PyValueError::new_err(msg),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for sail_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

fn parse_variant(name: &str) -> PyResult<HeadVariant> {
    HeadVariant::ALL
        .into_iter()
        .find(|v| v.name() == name)
        .ok_or_else(|| {
            let names: Vec<&str> = HeadVariant::ALL.iter().map(|v| v.name()).collect();
            PyValueError::new_err(format!("unknown head variant '{name}'; expected one of {}", names.join(", ")))
        })
}

fn mask(labels: Vec<usize>, layers: usize) -> PyResult<LayerMask> {
    let n = labels.len();
    LayerMask::new(labels, 1, n, layers).py()
}

/// A saliency map at input resolution.
#[pyclass(name = "AttributionMap", module = "sail", get_all, frozen)]
struct PyAttribution {
    values: Vec<f64>,
    height: usize,
    width: usize,
    target_class: usize,
    method: String,
    layer_id: String,
    zero_map: bool,
    probability: f64,
}

/// A synthetic layered scene with its layer mask.
#[pyclass(name = "Scene", module = "sail", get_all, frozen)]
struct PyScene {
    image: Vec<f64>,
    mask: Vec<usize>,
    label: usize,
    lesion_region: Vec<usize>,
    height: usize,
    width: usize,
    layers: usize,
}

#[pyclass(name = "Model", module = "sail", frozen)]
struct PyModel {
    inner: SailModel,
}

impl PyModel {
    fn image(&self, image: Vec<f64>) -> PyResult<Tensor> {
        let [h, w] = self.inner.config().input_size;
        if image.len() != h * w {
            return Err(PyValueError::new_err(format!("expected {} pixels ({h}x{w}), got {}", h * w, image.len())));
        }
        Tensor::new(vec![1, 1, h, w], image).py()
    }
}

#[pymethods]
impl PyModel {
    /// Freshly initialized model for square `size` inputs.
    #[new]
    #[pyo3(signature = (seed = 0, head_variant = "gated", size = 32))]
    fn new(seed: u64, head_variant: &str, size: usize) -> PyResult<Self> {
        let config = ModelConfig {
            input_size: [size, size],
            head_variant: parse_variant(head_variant)?,
            ..ModelConfig::default()
        };
        Ok(PyModel {
            inner: SailModel::new(config, seed).py()?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = Checkpoint::load(&path).and_then(|c| c.to_model()).py()?;
        Ok(PyModel { inner })
    }

    #[getter]
    fn head_variant(&self) -> &'static str {
        self.inner.config().head_variant.name()
    }

    #[getter]
    fn input_size(&self) -> (usize, usize) {
        let [h, w] = self.inner.config().input_size;
        (h, w)
    }

    /// Gate value of the gated head, `None` for other heads.
    #[getter]
    fn alpha(&self) -> Option<f64> {
        self.inner.alpha()
    }

    fn layer_ids(&self) -> Vec<String> {
        let uses_decoder = self.inner.config().head_variant.uses_decoder();
        self.inner
            .config()
            .layer_ids()
            .into_iter()
            .filter(|id| uses_decoder || !id.starts_with("dec."))
            .collect()
    }

    fn num_parameters(&self) -> usize {
        self.inner.num_scalars()
    }

    /// Class probabilities for one image.
    fn classify(&self, py: Python<'_>, image: Vec<f64>) -> PyResult<Vec<f64>> {
        let x = self.image(image)?;
        py.detach(|| self.inner.classify(&x)).py().map(|(_, p)| p.into_data())
    }

    /// Arg-max layer label per pixel.
    fn segment(&self, py: Python<'_>, image: Vec<f64>) -> PyResult<Vec<usize>> {
        let x = self.image(image)?;
        let probs = py.detach(|| self.inner.segment(&x)).py()?;
        let (_, c, h, w) = probs.dims4().py()?;
        let hw = h * w;
        let p = probs.data();
        Ok((0..hw)
            .map(|i| (0..c).fold(0, |best, k| if p[k * hw + i] > p[best * hw + i] { k } else { best }))
            .collect())
    }

    /// CAM-family attribution; `target=None` explains the predicted class.
    #[pyo3(signature = (image, method = "gradcam", layer_id = "fusion", target = None))]
    fn explain(
        &self,
        py: Python<'_>,
        image: Vec<f64>,
        method: &str,
        layer_id: &str,
        target: Option<usize>,
    ) -> PyResult<PyAttribution> {
        let x = self.image(image)?;
        let method: CamMethod = method.parse().py()?;
        let target = target.map_or(Target::Predicted, Target::Class);
        let mut maps = py.detach(|| explain(&self.inner, &x, &target, method, layer_id)).py()?;
        let m = maps.remove(0);
        Ok(PyAttribution {
            values: m.values,
            height: m.height,
            width: m.width,
            target_class: m.target_class,
            method: m.method.name().to_string(),
            layer_id: m.layer_id,
            zero_map: m.zero_map,
            probability: m.probability,
        })
    }
}

#[pyfunction]
#[pyo3(signature = (seed, class_k, height = 32, width = 32, layers = 8))]
fn generate_scene(seed: u64, class_k: usize, height: usize, width: usize, layers: usize) -> PyResult<PyScene> {
    let mut cfg = SynthConfig {
        height,
        width,
        layers,
        lesion_layer: None,
        ..SynthConfig::default()
    };
    cfg.materialize();
    cfg.validate().py()?;
    let s = synth_scene(seed, &cfg, class_k).py()?;
    Ok(PyScene {
        mask: s.mask.labels().to_vec(),
        image: s.image,
        label: s.label,
        lesion_region: s.lesion_region,
        height,
        width,
        layers,
    })
}

/// Fraction of attribution mass inside the tissue (labels >= 1).
#[pyfunction]
fn rma(values: Vec<f64>, mask_labels: Vec<usize>, layers: usize) -> PyResult<f64> {
    metrics::rma(&values, &mask(mask_labels, layers)?).py()
}

/// Fraction of the top-|tissue| pixels that lie in the tissue.
#[pyfunction]
fn rra(values: Vec<f64>, mask_labels: Vec<usize>, layers: usize) -> PyResult<f64> {
    metrics::rra(&values, &mask(mask_labels, layers)?).py()
}

/// `(mass, normalized)` per layer `1..=layers`.
#[pyfunction]
fn layer_relevance(values: Vec<f64>, mask_labels: Vec<usize>, layers: usize) -> PyResult<(Vec<f64>, Vec<f64>)> {
    metrics::layer_relevance(&values, &mask(mask_labels, layers)?).py()
}

/// Three most relevant layers (1-based, descending) and their share.
#[pyfunction]
fn top3(distribution: Vec<f64>) -> PyResult<([usize; 3], f64)> {
    metrics::top3(&distribution).py()
}

/// Runs one pipeline command, as the `sail` CLI does, and returns the
/// path it reports.
#[pyfunction]
#[pyo3(signature = (command, config = None, seed = None, out = None, checkpoint = None, maps = None, from_scratch = false, force = false))]
#[allow(clippy::too_many_arguments)]
fn run(
    py: Python<'_>,
    command: &str,
    config: Option<PathBuf>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    maps: Option<PathBuf>,
    from_scratch: bool,
    force: bool,
) -> PyResult<String> {
    let mut cfg = match &config {
        Some(p) => RunConfig::load(p).py()?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.set_seed(s);
    }
    if let Some(o) = out {
        cfg.out_dir = o;
    }
    let ck = checkpoint.as_deref();
    let result = py.detach(|| match command {
        "pretrain" => Ok(pipeline::cmd_pretrain(&cfg)),
        "finetune" => Ok(pipeline::cmd_finetune(&cfg, ck, from_scratch)),
        "explain" => Ok(pipeline::cmd_explain(&cfg, ck)),
        "evaluate" => Ok(pipeline::cmd_evaluate(&cfg, ck, maps.as_deref(), force)),
        "ablate-heads" => Ok(pipeline::cmd_ablate_heads(&cfg, ck, from_scratch)),
        "ablate-layers" => Ok(pipeline::cmd_ablate_layers(&cfg, ck)),
        "gen-data" => Ok(pipeline::cmd_gen_data(&cfg)),
        other => Err(other.to_string()),
    });
    match result {
        Ok(r) => Ok(r.py()?.display().to_string()),
        Err(other) => Err(PyValueError::new_err(format!("unknown command '{other}'"))),
    }
}

#[pymodule]
fn sail(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_class::<PyAttribution>()?;
    m.add_class::<PyScene>()?;
    m.add_function(wrap_pyfunction!(generate_scene, m)?)?;
    m.add_function(wrap_pyfunction!(rma, m)?)?;
    m.add_function(wrap_pyfunction!(rra, m)?)?;
    m.add_function(wrap_pyfunction!(layer_relevance, m)?)?;
    m.add_function(wrap_pyfunction!(top3, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    Ok(())
}
