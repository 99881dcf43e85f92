//! Python bindings: datasets, training, prediction, metrics and baselines.

use std::path::PathBuf;

use cetransformer::baselines;
use cetransformer::dataset::{self, CsvSchema, EffectFn, SplitIndices, SplitRatio, SynthConfig};
use cetransformer::encoder::attention_2d;
use cetransformer::metrics::{self, EvalReport, Predictions};
use cetransformer::tensor::Tensor;
use cetransformer::trainer::{self, TrainedModel, TrainTrace};
use cetransformer::Error;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    Tensor::from_rows(&rows).map_err(py_err)
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.shape()[0]).map(|i| t.row(i).to_vec()).collect()
}

#[pyclass(name = "Dataset", module = "cetransformer_py", skip_from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: dataset::Dataset,
}

#[pymethods]
impl PyDataset {
    #[new]
    #[pyo3(signature = (x, t, yf, ycf=None, mu0=None, mu1=None))]
    fn new(
        x: Vec<Vec<f64>>,
        t: Vec<bool>,
        yf: Vec<f64>,
        ycf: Option<Vec<f64>>,
        mu0: Option<Vec<f64>>,
        mu1: Option<Vec<f64>>,
    ) -> PyResult<Self> {
        let inner = dataset::Dataset::new(matrix(x)?, t, yf, ycf, mu0, mu1, Vec::new()).map_err(py_err)?;
        Ok(PyDataset { inner })
    }

    /// Synthetic data with known potential outcomes. `effect` is one of
    /// `constant`, `linear`, `nonlinear`.
    #[staticmethod]
    #[pyo3(signature = (n=1000, d=10, bias_strength=0.0, effect="nonlinear", tau=3.0, noise_sd=0.1, seed=0))]
    fn synthetic(
        n: usize,
        d: usize,
        bias_strength: f64,
        effect: &str,
        tau: f64,
        noise_sd: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let effect = match effect.parse::<EffectFn>().map_err(py_err)? {
            EffectFn::Constant { .. } => EffectFn::Constant { tau },
            other => other,
        };
        let cfg = SynthConfig {
            n,
            d,
            bias_strength,
            effect,
            noise_sd,
            seed,
        };
        Ok(PyDataset {
            inner: dataset::generate_synthetic(&cfg).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn from_csv(path: PathBuf) -> PyResult<Self> {
        Ok(PyDataset {
            inner: dataset::load_csv(&path, &CsvSchema::default()).map_err(py_err)?,
        })
    }

    fn to_csv(&self, path: PathBuf) -> PyResult<()> {
        self.inner.write_csv(&path).map_err(py_err)
    }

    #[pyo3(signature = (ratio="61/27/10", seed=0))]
    fn split(&self, ratio: &str, seed: u64) -> PyResult<Splits> {
        let ratio: SplitRatio = ratio.parse().map_err(py_err)?;
        Ok(Splits {
            inner: dataset::split(&self.inner, ratio, seed).map_err(py_err)?,
        })
    }

    fn subset(&self, idx: Vec<usize>) -> PyResult<Self> {
        if let Some(&bad) = idx.iter().find(|&&i| i >= self.inner.n()) {
            return Err(PyValueError::new_err(format!("index {bad} out of range")));
        }
        Ok(PyDataset {
            inner: self.inner.subset(&idx),
        })
    }

    /// Propensity-overlap warnings, as text.
    fn overlap_check(&self) -> Vec<String> {
        dataset::overlap_check(&self.inner)
            .iter()
            .map(|w| w.to_string())
            .collect()
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn d(&self) -> usize {
        self.inner.d()
    }

    #[getter]
    fn x(&self) -> Vec<Vec<f64>> {
        rows(self.inner.covariates())
    }

    #[getter]
    fn t(&self) -> Vec<bool> {
        self.inner.treatment().to_vec()
    }

    #[getter]
    fn yf(&self) -> Vec<f64> {
        self.inner.y_factual().to_vec()
    }

    #[getter]
    fn mu0(&self) -> Option<Vec<f64>> {
        self.inner.mu0().map(<[f64]>::to_vec)
    }

    #[getter]
    fn mu1(&self) -> Option<Vec<f64>> {
        self.inner.mu1().map(<[f64]>::to_vec)
    }

    /// True individual effects, when the dataset carries them.
    fn ite_true(&self) -> PyResult<Vec<f64>> {
        metrics::ite_true(&self.inner).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.inner.n()
    }

    fn __repr__(&self) -> String {
        format!("Dataset(n={}, d={})", self.inner.n(), self.inner.d())
    }
}

#[pyclass(module = "cetransformer_py", skip_from_py_object)]
#[derive(Clone)]
struct Splits {
    inner: SplitIndices,
}

#[pymethods]
impl Splits {
    #[new]
    fn new(train: Vec<usize>, valid: Vec<usize>, test: Vec<usize>) -> Self {
        Splits {
            inner: SplitIndices { train, valid, test },
        }
    }

    #[getter]
    fn train(&self) -> Vec<usize> {
        self.inner.train.clone()
    }

    #[getter]
    fn valid(&self) -> Vec<usize> {
        self.inner.valid.clone()
    }

    #[getter]
    fn test(&self) -> Vec<usize> {
        self.inner.test.clone()
    }
}

/// Training configuration. Keyword arguments override the defaults and
/// use the same names as the TOML config file, e.g.
/// `TrainConfig(beta=10.0, epochs=50, encoder={"d_model": 16})`.
#[pyclass(name = "TrainConfig", module = "cetransformer_py", skip_from_py_object)]
#[derive(Clone)]
struct PyTrainConfig {
    inner: trainer::TrainConfig,
}

fn merge(base: &mut serde_json::Value, patch: serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

#[pymethods]
impl PyTrainConfig {
    #[new]
    #[pyo3(signature = (**kwargs))]
    fn new(py: Python<'_>, kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut value = serde_json::to_value(trainer::TrainConfig::default())
            .map_err(|e| PyValueError::new_err(e.to_string()))?;
        if let Some(kw) = kwargs {
            let text: String = py.import("json")?.call_method1("dumps", (kw,))?.extract()?;
            let patch = serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))?;
            merge(&mut value, patch);
        }
        Self::from_value(value)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let value = serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Self::from_value(value)
    }

    fn to_json(&self) -> String {
        serde_json::to_string(&self.inner).expect("config serializes")
    }

    #[getter]
    fn alpha(&self) -> f64 {
        self.inner.alpha
    }

    #[getter]
    fn beta(&self) -> f64 {
        self.inner.beta
    }

    #[getter]
    fn gamma(&self) -> f64 {
        self.inner.gamma
    }

    #[getter]
    fn epochs(&self) -> usize {
        self.inner.epochs
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn ablation(&self) -> String {
        self.inner.ablation.to_string()
    }

    fn __repr__(&self) -> String {
        format!("TrainConfig({})", self.to_json())
    }
}

impl PyTrainConfig {
    fn from_value(value: serde_json::Value) -> PyResult<Self> {
        let inner: trainer::TrainConfig =
            serde_json::from_value(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
        inner.validate().map_err(py_err)?;
        Ok(PyTrainConfig { inner })
    }
}

fn report_dict<'py>(py: Python<'py>, r: &EvalReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("split", &r.split)?;
    d.set_item("method", &r.method)?;
    d.set_item("n", r.n)?;
    d.set_item("sqrt_pehe", r.sqrt_pehe)?;
    d.set_item("ate_error", r.ate_error)?;
    d.set_item("ate_pred", r.ate_pred)?;
    d.set_item("policy_risk", r.policy_risk)?;
    d.set_item("factual_mse", r.factual_mse)?;
    d.set_item("group_kl", r.group_kl)?;
    d.set_item("group_kl_reverse", r.group_kl_reverse)?;
    d.set_item("warnings", r.warnings.clone())?;
    Ok(d)
}

/// A trained model with its per-epoch trace.
#[pyclass(name = "Model", module = "cetransformer_py")]
struct PyModel {
    inner: TrainedModel,
    trace: TrainTrace,
    stopped_early: bool,
}

#[pymethods]
impl PyModel {
    /// Potential outcomes `(y0, y1)` for raw covariate rows.
    fn predict(&self, x: Vec<Vec<f64>>) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let p = self.inner.predict(&matrix(x)?).map_err(py_err)?;
        Ok((p.y0, p.y1))
    }

    fn embed(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&self.inner.embed(&matrix(x)?).map_err(py_err)?))
    }

    #[pyo3(signature = (dataset, idx, split="test", lambda_=0.0))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        dataset: &PyDataset,
        idx: Vec<usize>,
        split: &str,
        lambda_: f64,
    ) -> PyResult<Bound<'py, PyDict>> {
        let r = self
            .inner
            .evaluate(&dataset.inner, &idx, split, lambda_)
            .map_err(py_err)?;
        report_dict(py, &r)
    }

    fn checkpoint(&self) -> String {
        self.inner.to_checkpoint_string()
    }

    #[staticmethod]
    fn from_checkpoint(config: &PyTrainConfig, n_features: usize, text: &str) -> PyResult<Self> {
        let inner = TrainedModel::from_checkpoint(config.inner.clone(), n_features, text).map_err(py_err)?;
        Ok(PyModel {
            inner,
            trace: TrainTrace::default(),
            stopped_early: false,
        })
    }

    /// Trace rows `(epoch, l_reco, l_p, wass, group_kl, val_mse)`.
    #[getter]
    fn trace(&self) -> Vec<(usize, f64, f64, f64, f64, f64)> {
        self.trace
            .records
            .iter()
            .map(|r| (r.epoch, r.l_reco, r.l_p, r.wass, r.group_kl, r.val_mse))
            .collect()
    }

    fn trace_csv(&self) -> String {
        self.trace.to_csv_string()
    }

    #[getter]
    fn best_epoch(&self) -> usize {
        self.inner.best_epoch
    }

    #[getter]
    fn stopped_early(&self) -> bool {
        self.stopped_early
    }
}

#[pyfunction]
#[pyo3(signature = (dataset, splits, config=None))]
fn train(py: Python<'_>, dataset: &PyDataset, splits: &Splits, config: Option<&PyTrainConfig>) -> PyResult<PyModel> {
    let cfg = config.map(|c| c.inner.clone()).unwrap_or_default();
    let ds = dataset.inner.clone();
    let sp = splits.inner.clone();
    let out = py
        .detach(move || trainer::train(&ds, &sp, &cfg))
        .map_err(py_err)?;
    Ok(PyModel {
        inner: out.model,
        trace: out.trace,
        stopped_early: out.stopped_early,
    })
}

#[pyfunction]
fn sqrt_pehe(ite_pred: Vec<f64>, ite_true: Vec<f64>) -> PyResult<f64> {
    metrics::sqrt_pehe(&ite_pred, &ite_true).map_err(py_err)
}

#[pyfunction]
fn ate_error(ite_pred: Vec<f64>, ite_true: Vec<f64>) -> PyResult<f64> {
    metrics::ate_error(&ite_pred, &ite_true).map_err(py_err)
}

/// Policy risk of treating units whose predicted effect exceeds `lambda_`.
/// Outcomes must lie in `[0, 1]`.
#[pyfunction]
#[pyo3(signature = (y0, y1, t, y, lambda_=0.0))]
fn policy_risk(y0: Vec<f64>, y1: Vec<f64>, t: Vec<bool>, y: Vec<f64>, lambda_: f64) -> PyResult<f64> {
    Ok(metrics::policy_risk(&y0, &y1, &t, &y, lambda_).map_err(py_err)?.value)
}

/// Diagonal-Gaussian KL(treated || control) between two embedding sets.
#[pyfunction]
fn group_kl(treated: Vec<Vec<f64>>, control: Vec<Vec<f64>>) -> PyResult<f64> {
    metrics::group_kl(&matrix(treated)?, &matrix(control)?).map_err(py_err)
}

/// Scaled dot-product attention on `[s, d]` matrices; returns
/// `(output, weights)`.
#[pyfunction]
fn attention(
    q: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let (out, w) = attention_2d(&matrix(q)?, &matrix(k)?, &matrix(v)?).map_err(py_err)?;
    Ok((rows(&out), rows(&w)))
}

/// Baseline potential outcomes `(y0, y1)` for every unit. `method` is one
/// of `ols_lr1`, `ols_lr2`, `knn`.
#[pyfunction]
#[pyo3(signature = (dataset, splits, method, k=baselines::DEFAULT_K))]
fn baseline(dataset: &PyDataset, splits: &Splits, method: &str, k: usize) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let fit = match method {
        "ols_lr1" => baselines::ols_lr1(&dataset.inner, &splits.inner),
        "ols_lr2" => baselines::ols_lr2(&dataset.inner, &splits.inner),
        "knn" => baselines::knn_ite(&dataset.inner, &splits.inner, k),
        other => return Err(PyValueError::new_err(format!("unknown baseline {other:?}"))),
    }
    .map_err(py_err)?;
    let Predictions { y0, y1 } = fit.predictions;
    Ok((y0, y1))
}

#[pymodule]
fn cetransformer_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<Splits>()?;
    m.add_class::<PyTrainConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(sqrt_pehe, m)?)?;
    m.add_function(wrap_pyfunction!(ate_error, m)?)?;
    m.add_function(wrap_pyfunction!(policy_risk, m)?)?;
    m.add_function(wrap_pyfunction!(group_kl, m)?)?;
    m.add_function(wrap_pyfunction!(attention, m)?)?;
    m.add_function(wrap_pyfunction!(baseline, m)?)?;
    Ok(())
}
