//! Python bindings: images, pipelines, attacks, metrics and the experiment
//! runner, with plain lists in place of arrays.

use dlove::attack::{self, AttackConfig, AttackResult};
use dlove::data::{self, BitString, DatasetSource, Seed, Split, Watermark};
use dlove::harness::{ExperimentConfig, Runner, StageKind};
use dlove::surrogate::{finetune_decoder, harvest_pairs, FinetuneBudget};
use dlove::wmnet::{self, ArchConfig, TechniqueProfile, TrainConfig};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

/// Per-epoch `(test_bit_accuracy, test_psnr)`.
type EpochScore = (Option<f64>, Option<f64>);

fn err(e: dlove::Error) -> PyErr {
    match e {
        dlove::Error::Unreadable { .. } | dlove::Error::Unwritable { .. } => {
            PyIOError::new_err(e.to_string())
        }
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn bits(v: &[u8]) -> PyResult<Watermark> {
    Ok(Watermark::Bits(BitString::from_u8(v).map_err(err)?))
}

fn bits_out(w: &Watermark) -> Option<Vec<u8>> {
    w.bits().map(BitString::as_u8)
}

#[pyclass(name = "Image", module = "dlove", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyImage(data::Image);

#[pymethods]
impl PyImage {
    /// Pixels in `[0, 1]`, row-major HWC.
    #[new]
    fn new(height: usize, width: usize, channels: usize, pixels: Vec<f32>) -> PyResult<Self> {
        data::Image::new(height, width, channels, pixels)
            .map(Self)
            .map_err(err)
    }

    #[staticmethod]
    fn synthetic(height: usize, width: usize, channels: usize, seed: u64) -> PyResult<Self> {
        data::synthetic_image((height, width, channels), Seed(seed))
            .map(Self)
            .map_err(err)
    }

    #[staticmethod]
    #[pyo3(signature = (path, channels=3))]
    fn load(path: &str, channels: usize) -> PyResult<Self> {
        data::load_image(path, channels).map(Self).map_err(err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        data::save_image(&self.0, path).map_err(err)
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        self.0.shape()
    }

    fn pixels(&self) -> Vec<f32> {
        self.0.pixels().to_vec()
    }

    fn quantize8(&self) -> Self {
        Self(self.0.quantize8())
    }

    fn adapt(&self, height: usize, width: usize, channels: usize) -> PyResult<Self> {
        self.0
            .adapt((height, width, channels))
            .map(Self)
            .map_err(err)
    }

    fn __repr__(&self) -> String {
        let (h, w, c) = self.0.shape();
        format!("Image({h}x{w}x{c})")
    }
}

/// Encoder, decoder and optional discriminator for one technique profile.
#[pyclass(name = "Pipeline", module = "dlove", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyPipeline(wmnet::Pipeline);

#[pymethods]
impl PyPipeline {
    /// Fresh weights for a named profile such as `"redmark-like"`.
    #[staticmethod]
    #[pyo3(signature = (profile, seed=0, scale=1.0))]
    fn build(profile: &str, seed: u64, scale: f64) -> PyResult<Self> {
        let p = TechniqueProfile::preset(profile)
            .ok_or_else(|| PyValueError::new_err(format!("unknown profile `{profile}`")))?;
        wmnet::Pipeline::new(&p.scaled(scale), ArchConfig::default(), Seed(seed))
            .map(Self)
            .map_err(err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        wmnet::load_pipeline(path)
            .map(|(p, _)| Self(p))
            .map_err(err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        wmnet::save_pipeline(&self.0, path, serde_json::Value::Null).map_err(err)
    }

    #[getter]
    fn profile(&self) -> String {
        self.0.profile.name.clone()
    }

    #[getter]
    fn cover_shape(&self) -> (usize, usize, usize) {
        self.0.cover_shape()
    }

    #[getter]
    fn num_bits(&self) -> Option<usize> {
        self.0
            .profile
            .watermark
            .is_bits()
            .then(|| self.0.profile.watermark.arity())
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.0.num_parameters()
    }

    /// Train on synthetic covers. Returns `(test_bit_accuracy, test_psnr)`
    /// per epoch.
    #[pyo3(signature = (train_count, epochs, seed=0, test_count=64, batch_size=32))]
    fn train(
        &self,
        py: Python<'_>,
        train_count: usize,
        epochs: usize,
        seed: u64,
        test_count: usize,
        batch_size: usize,
    ) -> PyResult<(Self, Vec<EpochScore>)> {
        let shape = self.0.cover_shape();
        let p = self.0.clone();
        py.detach(move || {
            let s = Seed(seed);
            let train = data::build_dataset(
                "train",
                &DatasetSource::Synthetic,
                train_count,
                shape,
                Split::Train,
                s.derive("train"),
            )?;
            let test = if test_count > 0 {
                Some(data::build_dataset(
                    "test",
                    &DatasetSource::Synthetic,
                    test_count,
                    shape,
                    Split::Test,
                    s.derive("test"),
                )?)
            } else {
                None
            };
            let cfg = TrainConfig {
                epochs,
                batch_size,
                seed: s,
                ..TrainConfig::default()
            };
            let (p, h) = wmnet::train_pipeline(p, &train, test.as_ref(), &cfg)?;
            Ok((
                Self(p),
                h.epochs
                    .iter()
                    .map(|e| (e.test_bit_accuracy, e.test_psnr))
                    .collect(),
            ))
        })
        .map_err(err)
    }

    fn embed(&self, cover: &PyImage, watermark: Vec<u8>) -> PyResult<PyImage> {
        self.0
            .embed(&cover.0, &bits(&watermark)?)
            .map(PyImage)
            .map_err(err)
    }

    fn extract_logits(&self, image: &PyImage) -> PyResult<Vec<f64>> {
        self.0.extract(&image.0).map(|e| e.logits).map_err(err)
    }

    fn extract_bits(&self, image: &PyImage) -> PyResult<Vec<u8>> {
        let est = self.0.extract(&image.0).map_err(err)?;
        let w = wmnet::decode_bits(&est).map_err(err)?;
        Ok(bits_out(&w).unwrap_or_default())
    }

    /// Harvest `pairs` watermarked images from `target` and fine-tune this
    /// pipeline's decoder on them. Returns the tuned copy and held-out
    /// bit accuracy.
    #[pyo3(signature = (target, pairs=200, epochs=100, seed=0))]
    fn finetune_on(
        &self,
        py: Python<'_>,
        target: &PyPipeline,
        pairs: usize,
        epochs: usize,
        seed: u64,
    ) -> PyResult<(Self, Option<f64>)> {
        let (p, t) = (self.0.clone(), target.0.clone());
        py.detach(move || {
            let s = Seed(seed);
            let covers = data::build_dataset(
                "harvest",
                &DatasetSource::Synthetic,
                pairs,
                t.cover_shape(),
                Split::AttackPairs,
                s.derive("covers"),
            )?;
            let harvested = harvest_pairs(&t, &covers, pairs, s.derive("harvest"))?;
            let mut budget = FinetuneBudget::new(epochs, pairs);
            budget.seed = s.derive("finetune");
            let (p, rep) = finetune_decoder(p, &harvested, &budget)?;
            Ok((Self(p), rep.heldout_accuracy))
        })
        .map_err(err)
    }

    fn __repr__(&self) -> String {
        format!(
            "Pipeline({}, {:?})",
            self.0.profile.name,
            self.0.cover_shape()
        )
    }
}

#[pyclass(name = "AttackResult", module = "dlove", frozen, get_all)]
struct PyAttackResult {
    success: bool,
    removal: bool,
    attacked: PyImage,
    extracted: Option<Vec<u8>>,
    epsilon_used: f64,
    iterations: usize,
    linf: f64,
    psnr: f64,
    ssim: f64,
    lpips_proxy: f64,
    ber_beta: Option<f64>,
    ber_alpha: Option<f64>,
    surrogate_success: Option<bool>,
}

impl From<AttackResult> for PyAttackResult {
    fn from(r: AttackResult) -> Self {
        Self {
            success: r.success,
            removal: r.removal,
            extracted: bits_out(&r.extracted),
            epsilon_used: r.epsilon_used,
            iterations: r.iterations_used,
            linf: r.delta.linf(),
            psnr: r.metrics.psnr,
            ssim: r.metrics.ssim,
            lpips_proxy: r.metrics.lpips_proxy,
            ber_beta: r.metrics.ber,
            ber_alpha: r.ber_alpha,
            surrogate_success: r.surrogate_success,
            attacked: PyImage(r.attacked),
        }
    }
}

#[pymethods]
impl PyAttackResult {
    fn __repr__(&self) -> String {
        format!(
            "AttackResult(success={}, removal={}, psnr={:.2}, iterations={})",
            self.success, self.removal, self.psnr, self.iterations
        )
    }
}

fn attack_config(epsilon: f64, max_iter: usize, learning_rate: f64) -> AttackConfig {
    AttackConfig {
        epsilon,
        max_iter,
        learning_rate,
        ..AttackConfig::default()
    }
}

/// Overwrite `alpha` with `beta` using the target decoder's own gradients.
#[pyfunction]
#[pyo3(signature = (target, watermarked, alpha, beta, epsilon=0.05, max_iter=5000, learning_rate=0.001))]
#[allow(clippy::too_many_arguments)]
fn attack_whitebox(
    py: Python<'_>,
    target: &PyPipeline,
    watermarked: &PyImage,
    alpha: Vec<u8>,
    beta: Vec<u8>,
    epsilon: f64,
    max_iter: usize,
    learning_rate: f64,
) -> PyResult<PyAttackResult> {
    let (a, b) = (bits(&alpha)?, bits(&beta)?);
    let cfg = attack_config(epsilon, max_iter, learning_rate);
    py.detach(|| attack::attack_whitebox(&target.0, &watermarked.0, &a, &b, &cfg))
        .map(Into::into)
        .map_err(err)
}

/// Craft against `surrogate`, adjudicate on `target`.
#[pyfunction]
#[pyo3(signature = (surrogate, target, watermarked, alpha, beta, epsilon=0.05, max_iter=5000, learning_rate=0.001))]
#[allow(clippy::too_many_arguments)]
fn attack_blackbox(
    py: Python<'_>,
    surrogate: &PyPipeline,
    target: &PyPipeline,
    watermarked: &PyImage,
    alpha: Vec<u8>,
    beta: Vec<u8>,
    epsilon: f64,
    max_iter: usize,
    learning_rate: f64,
) -> PyResult<PyAttackResult> {
    let (a, b) = (bits(&alpha)?, bits(&beta)?);
    let cfg = attack_config(epsilon, max_iter, learning_rate);
    py.detach(|| attack::attack_blackbox(&surrogate.0, &target.0, &watermarked.0, &a, &b, &cfg))
        .map(Into::into)
        .map_err(err)
}

#[pyfunction]
fn sample_bits(n: usize, seed: u64) -> PyResult<Vec<u8>> {
    let w = data::sample_bit_watermark(n, Seed(seed)).map_err(err)?;
    Ok(bits_out(&w).unwrap_or_default())
}

#[pyfunction]
fn mse(a: &PyImage, b: &PyImage) -> PyResult<f64> {
    dlove::metrics::mse(&a.0, &b.0).map_err(err)
}

#[pyfunction]
fn psnr(a: &PyImage, b: &PyImage) -> PyResult<f64> {
    dlove::metrics::psnr(&a.0, &b.0).map_err(err)
}

#[pyfunction]
fn ssim(a: &PyImage, b: &PyImage) -> PyResult<f64> {
    dlove::metrics::ssim(&a.0, &b.0).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (a, b, pyramid_seed=wmnet::DEFAULT_PYRAMID_SEED))]
fn lpips_proxy(a: &PyImage, b: &PyImage, pyramid_seed: u64) -> PyResult<f64> {
    dlove::metrics::lpips_proxy(&a.0, &b.0, pyramid_seed).map_err(err)
}

#[pyfunction]
fn ber(a: Vec<u8>, b: Vec<u8>) -> PyResult<f64> {
    dlove::metrics::ber(&bits(&a)?, &bits(&b)?).map_err(err)
}

/// Run an experiment config through `until` (default: attack) and return
/// the manifest as JSON text.
#[pyfunction]
#[pyo3(signature = (config_path, out, until="attack"))]
fn run_experiment(py: Python<'_>, config_path: &str, out: &str, until: &str) -> PyResult<String> {
    let stage = match until {
        "train-target" => StageKind::TrainTarget,
        "train-surrogate" => StageKind::TrainSurrogate,
        "harvest" => StageKind::Harvest,
        "finetune" => StageKind::Finetune,
        "attack" => StageKind::Attack,
        other => return Err(PyValueError::new_err(format!("unknown stage `{other}`"))),
    };
    let cfg = ExperimentConfig::load(config_path).map_err(err)?;
    py.detach(|| {
        let mut runner = Runner::new(&cfg, out)?;
        let manifest = runner.run(stage)?;
        serde_json::to_string_pretty(&manifest).map_err(|e| dlove::Error::Config(e.to_string()))
    })
    .map_err(err)
}

#[pymodule]
#[pyo3(name = "dlove")]
fn dlove_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyImage>()?;
    m.add_class::<PyPipeline>()?;
    m.add_class::<PyAttackResult>()?;
    m.add_function(wrap_pyfunction!(attack_whitebox, m)?)?;
    m.add_function(wrap_pyfunction!(attack_blackbox, m)?)?;
    m.add_function(wrap_pyfunction!(sample_bits, m)?)?;
    m.add_function(wrap_pyfunction!(mse, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(lpips_proxy, m)?)?;
    m.add_function(wrap_pyfunction!(ber, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
