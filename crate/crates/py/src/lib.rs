//! Python bindings. Arrays cross the boundary as flat row-major lists.

use ndarray::Array3;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use seg::config::ExperimentConfig;
use seg::io::{load_dataset, save_dataset};
use seg::metrics;
use seg::model::CoordDrUNet;
use seg::nn::{Mode, Tensor};
use seg::phantom::{domain_by_name, generate_domain};
use seg::train::{self, Checkpoint};
use seg::volume::{MaskVolume, Spacing};

fn err(e: seg::Error) -> PyErr {
    match e {
        seg::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn mask(v: Vec<u8>, dims: (usize, usize, usize)) -> PyResult<MaskVolume> {
    let a = Array3::from_shape_vec(dims, v).map_err(|e| PyValueError::new_err(e.to_string()))?;
    MaskVolume::new(a).map_err(err)
}

fn tensor(v: Vec<f64>, shape: [usize; 4]) -> PyResult<Tensor<f64>> {
    Tensor::from_vec(shape, v).map_err(err)
}

fn experiment(config_toml: Option<&str>) -> PyResult<ExperimentConfig> {
    ExperimentConfig::from_toml_str(config_toml.unwrap_or("")).map_err(err)
}

/// Volumetric Dice of two binary masks of shape `dims` (D, H, W).
#[pyfunction]
fn dice(a: Vec<u8>, b: Vec<u8>, dims: (usize, usize, usize)) -> PyResult<f64> {
    metrics::dice_coeff(&mask(a, dims)?, &mask(b, dims)?).map_err(err)
}

/// 95th percentile symmetric surface distance in mm; spacing is (z, y, x).
#[pyfunction]
fn hd95(a: Vec<u8>, b: Vec<u8>, dims: (usize, usize, usize), spacing: (f64, f64, f64)) -> PyResult<f64> {
    let s = Spacing::new(spacing.0, spacing.1, spacing.2).map_err(err)?;
    metrics::hd95(&mask(a, dims)?, &mask(b, dims)?, &s).map_err(err)
}

#[pyfunction]
fn sensitivity(pred: Vec<u8>, gt: Vec<u8>, dims: (usize, usize, usize)) -> PyResult<f64> {
    metrics::sensitivity(&mask(pred, dims)?, &mask(gt, dims)?).map_err(err)
}

/// Paired two-sided t-test; returns `(t, p)` with `t = None` for zero-variance differences.
#[pyfunction]
fn paired_ttest(x: Vec<f64>, y: Vec<f64>) -> PyResult<(Option<f64>, f64)> {
    let r = metrics::paired_ttest(&x, &y).map_err(err)?;
    Ok((r.t, r.p))
}

/// Soft-Dice loss for one-hot `y` and probabilities `yhat`, both of shape (N, K, H, W).
#[pyfunction]
fn soft_dice_loss(y: Vec<f64>, yhat: Vec<f64>, shape: [usize; 4]) -> PyResult<f64> {
    seg::losses::soft_dice_loss(&tensor(y, shape)?, &tensor(yhat, shape)?).map_err(err)
}

#[pyfunction]
fn kd_loss(z: Vec<f64>, z_prime: Vec<f64>, shape: [usize; 4], n_target: usize) -> PyResult<f64> {
    seg::losses::kd_loss(&tensor(z, shape)?, &tensor(z_prime, shape)?, n_target).map_err(err)
}

/// Writes `n` phantoms of preset domain A, B or C to `out`; returns the case ids.
#[pyfunction]
#[pyo3(signature = (domain, n, seed, out, desk = false))]
fn generate_phantoms(domain: &str, n: usize, seed: u64, out: &str, desk: bool) -> PyResult<Vec<String>> {
    let mut spec = domain_by_name(domain).map_err(err)?;
    if desk {
        spec = spec.desk();
    }
    let ds = generate_domain(&spec, n, seed).map_err(err)?;
    save_dataset(out, &ds).map_err(err)?;
    Ok(ds.items.into_iter().map(|c| c.id).collect())
}

#[pyclass(name = "Model")]
struct PyModel {
    inner: CoordDrUNet<f32>,
}

#[pymethods]
impl PyModel {
    /// `config_toml` uses the `[model]` table of an experiment config.
    #[new]
    #[pyo3(signature = (config_toml = None, seed = 0))]
    fn new(config_toml: Option<&str>, seed: u64) -> PyResult<Self> {
        let cfg = experiment(config_toml)?;
        Ok(Self {
            inner: CoordDrUNet::new(cfg.model, seed).map_err(err)?,
        })
    }

    fn num_params(&mut self) -> usize {
        self.inner.num_params()
    }

    fn latent_shape(&self) -> [usize; 3] {
        self.inner.config().latent_shape()
    }

    /// Eval-mode forward of a (batch, C, H, W) input; returns flat `(probs, latent)`.
    fn forward(&mut self, x: Vec<f32>, batch: usize) -> PyResult<(Vec<f32>, Vec<f32>)> {
        let c = self.inner.config();
        let shape = [batch, c.in_channels, c.input_height, c.input_width];
        let x = Tensor::from_vec(shape, x).map_err(err)?;
        let out = self.inner.forward(&x, Mode::Eval).map_err(err)?;
        Ok((out.probs.into_vec(), out.latent.into_vec()))
    }
}

#[pyclass(name = "Checkpoint")]
struct PyCheckpoint {
    inner: Checkpoint,
}

#[pymethods]
impl PyCheckpoint {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: Checkpoint::load(path).map_err(err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(err)
    }

    #[getter]
    fn stage(&self) -> &'static str {
        self.inner.stage.as_str()
    }

    #[getter]
    fn sha256(&self) -> String {
        self.inner.hash()
    }

    #[getter]
    fn parent_sha256(&self) -> Option<String> {
        self.inner.parent.as_ref().map(|p| p.sha256.clone())
    }

    /// Per-volume metrics CSV for the dataset directory.
    fn evaluate(&self, data_dir: &str) -> PyResult<String> {
        let ds = load_dataset(data_dir).map_err(err)?;
        Ok(train::evaluate(&self.inner, &ds).map_err(err)?.to_csv())
    }

    fn model(&self) -> PyResult<PyModel> {
        Ok(PyModel {
            inner: self.inner.model().map_err(err)?,
        })
    }
}

/// Trains a source model (stage M_s) on a dataset directory.
#[pyfunction]
#[pyo3(signature = (data_dir, config_toml = None, augment = true))]
fn train_source(data_dir: &str, config_toml: Option<&str>, augment: bool) -> PyResult<PyCheckpoint> {
    let cfg = experiment(config_toml)?;
    let ds = load_dataset(data_dir).map_err(err)?;
    let aug = augment.then_some(&cfg.augmentation);
    let inner = train::train_source(&ds, &cfg.training, &cfg.model, aug).map_err(err)?;
    Ok(PyCheckpoint { inner })
}

/// Finetunes `parent` with mode `kd`, `classic` or `full`.
#[pyfunction]
#[pyo3(signature = (parent, data_dir, mode = "kd", config_toml = None, augment = true))]
fn finetune(parent: &PyCheckpoint, data_dir: &str, mode: &str, config_toml: Option<&str>, augment: bool) -> PyResult<PyCheckpoint> {
    let cfg = experiment(config_toml)?;
    let ds = load_dataset(data_dir).map_err(err)?;
    let aug = augment.then_some(&cfg.augmentation);
    let run = match mode {
        "kd" => train::finetune_kd,
        "classic" => train::finetune_classic,
        "full" => train::finetune_full,
        other => return Err(PyValueError::new_err(format!("unknown finetune mode {other:?}"))),
    };
    let inner = run(&parent.inner, &ds, &cfg.training, aug).map_err(err)?;
    Ok(PyCheckpoint { inner })
}

#[pymodule]
fn trus_seg(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(dice, m)?)?;
    m.add_function(wrap_pyfunction!(hd95, m)?)?;
    m.add_function(wrap_pyfunction!(sensitivity, m)?)?;
    m.add_function(wrap_pyfunction!(paired_ttest, m)?)?;
    m.add_function(wrap_pyfunction!(soft_dice_loss, m)?)?;
    m.add_function(wrap_pyfunction!(kd_loss, m)?)?;
    m.add_function(wrap_pyfunction!(generate_phantoms, m)?)?;
    m.add_function(wrap_pyfunction!(train_source, m)?)?;
    m.add_function(wrap_pyfunction!(finetune, m)?)?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyCheckpoint>()?;
    Ok(())
}
