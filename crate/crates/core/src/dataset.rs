//! Observational datasets: loading, synthetic generation, standardization,
//! stratified splitting, and overlap diagnostics.
//!
//! CSV layout: a header row, then columns `t`, `yf`, optional `ycf`,
//! `mu0`, `mu1`, then covariates `x0..x{d-1}`. Comma separated, `.`
//! decimal point, no quoting.

use std::fmt;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::cholesky_solve;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    covariates: Tensor,
    treatment: Vec<bool>,
    y_factual: Vec<f64>,
    y_cf: Option<Vec<f64>>,
    mu0: Option<Vec<f64>>,
    mu1: Option<Vec<f64>>,
    feature_names: Vec<String>,
}

fn check_finite(name: &str, values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::Validation(format!("{name}[{i}] is not finite"))),
        None => Ok(()),
    }
}

impl Dataset {
    /// Validates lengths and finiteness. `feature_names` defaults to
    /// `x0..x{d-1}` when empty.
    pub fn new(
        covariates: Tensor,
        treatment: Vec<bool>,
        y_factual: Vec<f64>,
        y_cf: Option<Vec<f64>>,
        mu0: Option<Vec<f64>>,
        mu1: Option<Vec<f64>>,
        mut feature_names: Vec<String>,
    ) -> Result<Self> {
        if covariates.rank() != 2 {
            return Err(Error::shape("dataset", covariates.shape(), &[0, 0]));
        }
        let (n, d) = (covariates.shape()[0], covariates.shape()[1]);
        if feature_names.is_empty() {
            feature_names = (0..d).map(|j| format!("x{j}")).collect();
        }
        if treatment.len() != n || y_factual.len() != n || feature_names.len() != d {
            return Err(Error::Validation(format!(
                "length mismatch: {n} rows, {} treatments, {} outcomes, {} names for {d} features",
                treatment.len(),
                y_factual.len(),
                feature_names.len()
            )));
        }
        for (name, v) in [("ycf", &y_cf), ("mu0", &mu0), ("mu1", &mu1)] {
            if let Some(v) = v {
                if v.len() != n {
                    return Err(Error::Validation(format!("{name} has {} entries, expected {n}", v.len())));
                }
                check_finite(name, v)?;
            }
        }
        if mu0.is_some() != mu1.is_some() {
            return Err(Error::Validation("mu0 and mu1 must be given together".into()));
        }
        check_finite("covariates", covariates.data())?;
        check_finite("yf", &y_factual)?;
        Ok(Dataset {
            covariates,
            treatment,
            y_factual,
            y_cf,
            mu0,
            mu1,
            feature_names,
        })
    }

    pub fn n(&self) -> usize {
        self.treatment.len()
    }

    pub fn d(&self) -> usize {
        self.covariates.shape()[1]
    }

    pub fn covariates(&self) -> &Tensor {
        &self.covariates
    }

    pub fn treatment(&self) -> &[bool] {
        &self.treatment
    }

    /// Treatment as 0.0 / 1.0.
    pub fn treatment_f64(&self) -> Vec<f64> {
        self.treatment.iter().map(|&t| f64::from(u8::from(t))).collect()
    }

    pub fn y_factual(&self) -> &[f64] {
        &self.y_factual
    }

    pub fn y_cf(&self) -> Option<&[f64]> {
        self.y_cf.as_deref()
    }

    pub fn mu0(&self) -> Option<&[f64]> {
        self.mu0.as_deref()
    }

    pub fn mu1(&self) -> Option<&[f64]> {
        self.mu1.as_deref()
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn has_ground_truth(&self) -> bool {
        self.mu0.is_some() || self.y_cf.is_some()
    }

    pub fn treated_indices(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.treatment[i]).collect()
    }

    pub fn control_indices(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| !self.treatment[i]).collect()
    }

    /// Rows `idx` of `[n,d]` covariates as a new tensor.
    pub fn covariate_rows(&self, idx: &[usize]) -> Tensor {
        let d = self.d();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(self.covariates.row(i));
        }
        Tensor::new(vec![idx.len(), d], data).unwrap()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let pick = |v: &[f64]| idx.iter().map(|&i| v[i]).collect::<Vec<_>>();
        Dataset {
            covariates: self.covariate_rows(idx),
            treatment: idx.iter().map(|&i| self.treatment[i]).collect(),
            y_factual: pick(&self.y_factual),
            y_cf: self.y_cf.as_deref().map(pick),
            mu0: self.mu0.as_deref().map(pick),
            mu1: self.mu1.as_deref().map(pick),
            feature_names: self.feature_names.clone(),
        }
    }

    pub fn with_covariates(&self, covariates: Tensor) -> Result<Dataset> {
        if covariates.shape() != self.covariates.shape() {
            return Err(Error::shape("with_covariates", self.covariates.shape(), covariates.shape()));
        }
        check_finite("covariates", covariates.data())?;
        Ok(Dataset {
            covariates,
            ..self.clone()
        })
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("t,yf");
        for (name, present) in [
            ("ycf", self.y_cf.is_some()),
            ("mu0", self.mu0.is_some()),
            ("mu1", self.mu1.is_some()),
        ] {
            if present {
                out.push(',');
                out.push_str(name);
            }
        }
        for name in &self.feature_names {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for i in 0..self.n() {
            write!(out, "{},{}", u8::from(self.treatment[i]), self.y_factual[i]).unwrap();
            for col in [&self.y_cf, &self.mu0, &self.mu1].into_iter().flatten() {
                write!(out, ",{}", col[i]).unwrap();
            }
            for v in self.covariates.row(i) {
                write!(out, ",{v}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string()).map_err(|e| Error::io(path, e))
    }
}

/// Maps dataset roles to CSV column names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub treatment: String,
    pub factual: String,
    pub counterfactual: String,
    pub mu0: String,
    pub mu1: String,
    /// Explicit covariate columns; `None` takes every remaining column.
    pub covariates: Option<Vec<String>>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema {
            treatment: "t".into(),
            factual: "yf".into(),
            counterfactual: "ycf".into(),
            mu0: "mu0".into(),
            mu1: "mu1".into(),
            covariates: None,
        }
    }
}

pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text, schema)
}

pub fn parse_csv(text: &str, schema: &CsvSchema) -> Result<Dataset> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| Error::Schema(schema.treatment.clone()))?
        .split(',')
        .map(str::trim)
        .collect();
    let find = |name: &str| header.iter().position(|h| *h == name);
    let require = |name: &str| find(name).ok_or_else(|| Error::Schema(name.to_string()));
    let t_col = require(&schema.treatment)?;
    let y_col = require(&schema.factual)?;
    let cf_col = find(&schema.counterfactual);
    let mu0_col = find(&schema.mu0);
    let mu1_col = find(&schema.mu1);
    let reserved = [Some(t_col), Some(y_col), cf_col, mu0_col, mu1_col];
    let x_cols: Vec<usize> = match &schema.covariates {
        Some(names) => names.iter().map(|n| require(n)).collect::<Result<_>>()?,
        None => (0..header.len())
            .filter(|c| !reserved.contains(&Some(*c)))
            .collect(),
    };

    let mut treatment = Vec::new();
    let mut yf = Vec::new();
    let mut ycf = Vec::new();
    let mut mu0 = Vec::new();
    let mut mu1 = Vec::new();
    let mut x = Vec::new();
    for (row, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        let num = |c: usize| -> Result<f64> {
            let cell = cells.get(c).ok_or_else(|| Error::Parse {
                row,
                column: header[c].to_string(),
                message: "missing cell".into(),
            })?;
            cell.parse::<f64>().map_err(|e| Error::Parse {
                row,
                column: header[c].to_string(),
                message: format!("{cell:?}: {e}"),
            })
        };
        let t = num(t_col)?;
        treatment.push(if t == 0.0 {
            false
        } else if t == 1.0 {
            true
        } else {
            return Err(Error::Validation(format!(
                "row {row}: treatment must be 0 or 1, got {t}"
            )));
        });
        yf.push(num(y_col)?);
        if let Some(c) = cf_col {
            ycf.push(num(c)?);
        }
        if let Some(c) = mu0_col {
            mu0.push(num(c)?);
        }
        if let Some(c) = mu1_col {
            mu1.push(num(c)?);
        }
        for &c in &x_cols {
            x.push(num(c)?);
        }
    }
    let n = treatment.len();
    let covariates = Tensor::new(vec![n, x_cols.len()], x)?;
    let names = x_cols.iter().map(|&c| header[c].to_string()).collect();
    Dataset::new(
        covariates,
        treatment,
        yf,
        cf_col.map(|_| ycf),
        mu0_col.map(|_| mu0),
        mu1_col.map(|_| mu1),
        names,
    )
}

/// Per-feature affine transform fitted by [`standardize`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl Standardizer {
    /// Population mean and sd per column; constant columns get sd 1.
    pub fn fit(x: &Tensor) -> Self {
        let (n, d) = (x.shape()[0], x.shape()[1]);
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(x.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for i in 0..n {
            for j in 0..d {
                var[j] += (x.row(i)[j] - mean[j]).powi(2);
            }
        }
        let sd = var
            .iter()
            .map(|v| {
                let s = (v / n as f64).sqrt();
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Standardizer { mean, sd }
    }

    pub fn identity(d: usize) -> Self {
        Standardizer {
            mean: vec![0.0; d],
            sd: vec![1.0; d],
        }
    }

    pub fn transform(&self, x: &Tensor) -> Tensor {
        let d = self.mean.len();
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(d) {
            for j in 0..d {
                row[j] = (row[j] - self.mean[j]) / self.sd[j];
            }
        }
        Tensor::new(x.shape().to_vec(), data).unwrap()
    }

    pub fn apply(&self, ds: &Dataset) -> Result<Dataset> {
        if self.mean.len() != ds.d() {
            return Err(Error::shape("standardize", &[self.mean.len()], &[ds.d()]));
        }
        ds.with_covariates(self.transform(ds.covariates()))
    }
}

/// Standardizes every covariate column to mean 0, population sd 1.
pub fn standardize(ds: &Dataset) -> Result<(Dataset, Standardizer)> {
    if ds.n() < 2 {
        return Err(Error::Sizing(format!("standardize needs n >= 2, got {}", ds.n())));
    }
    let s = Standardizer::fit(ds.covariates());
    Ok((s.apply(ds)?, s))
}

/// Train / validation / test percentages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitRatio {
    pub train: u32,
    pub valid: u32,
    pub test: u32,
}

impl SplitRatio {
    pub const IHDP: SplitRatio = SplitRatio {
        train: 61,
        valid: 27,
        test: 10,
    };
    pub const JOBS: SplitRatio = SplitRatio {
        train: 56,
        valid: 24,
        test: 20,
    };
}

impl fmt::Display for SplitRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.train, self.valid, self.test)
    }
}

impl std::str::FromStr for SplitRatio {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<u32> = s
            .split('/')
            .map(|p| p.trim().parse::<u32>())
            .collect::<Result<_, _>>()
            .map_err(|e| Error::Config(format!("bad split ratio {s:?}: {e}")))?;
        match parts[..] {
            [train, valid, test] => Ok(SplitRatio { train, valid, test }),
            _ => Err(Error::Config(format!("split ratio needs three parts, got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

/// Splits `n` units into `floor(n * pct / 100)` validation and test units,
/// every remaining unit going to train. Each part is apportioned across
/// the treatment arms in proportion to arm size, and train keeps at least
/// one unit of each arm whenever the arm has more than one unit.
pub fn split(ds: &Dataset, ratio: SplitRatio, seed: u64) -> Result<SplitIndices> {
    let SplitRatio { train, valid, test } = ratio;
    if train == 0 || valid == 0 || test == 0 || train + valid + test > 100 {
        return Err(Error::Config(format!(
            "split percentages must be positive and sum to at most 100, got {ratio}"
        )));
    }
    let n = ds.n();
    let n_valid = n * valid as usize / 100;
    let n_test = n * test as usize / 100;
    let n_train_floor = n * train as usize / 100;
    if n_valid == 0 || n_test == 0 || n_train_floor == 0 {
        return Err(Error::Sizing(format!(
            "{n} units are too few for a {ratio} split"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut treated = ds.treated_indices();
    let mut control = ds.control_indices();
    treated.shuffle(&mut rng);
    control.shuffle(&mut rng);
    let (nt, nc) = (treated.len(), control.len());

    let share = |part: usize, arm: usize| -> usize { (part * arm + n / 2) / n };
    let mut v_t = share(n_valid, nt).min(nt).min(n_valid);
    let mut v_c = n_valid - v_t;
    if v_c > nc {
        v_t += v_c - nc;
        v_c = nc;
    }
    let mut te_t = share(n_test, nt).min(nt - v_t).min(n_test);
    let mut te_c = n_test - te_t;
    if te_c > nc - v_c {
        te_t += te_c - (nc - v_c);
        te_c = nc - v_c;
    }
    keep_arm_in_train(nt, &mut v_t, &mut te_t, &mut v_c, &mut te_c, nc);
    keep_arm_in_train(nc, &mut v_c, &mut te_c, &mut v_t, &mut te_t, nt);

    let mut parts = SplitIndices {
        valid: treated[..v_t].iter().chain(&control[..v_c]).copied().collect(),
        test: treated[v_t..v_t + te_t]
            .iter()
            .chain(&control[v_c..v_c + te_c])
            .copied()
            .collect(),
        train: treated[v_t + te_t..]
            .iter()
            .chain(&control[v_c + te_c..])
            .copied()
            .collect(),
    };
    parts.train.sort_unstable();
    parts.valid.sort_unstable();
    parts.test.sort_unstable();
    Ok(parts)
}

/// If arm `a` has no train units left, trades one of its held-out slots
/// with arm `b`, provided `b` keeps at least one train unit.
fn keep_arm_in_train(
    a_n: usize,
    a_valid: &mut usize,
    a_test: &mut usize,
    b_valid: &mut usize,
    b_test: &mut usize,
    b_n: usize,
) {
    if a_n < 2 || a_n != *a_valid + *a_test || b_n - *b_valid - *b_test < 2 {
        return;
    }
    if *a_test > 0 {
        *a_test -= 1;
        *b_test += 1;
    } else {
        *a_valid -= 1;
        *b_valid += 1;
    }
}

/// Treatment-effect surface of a synthetic dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EffectFn {
    /// `tau(x) = tau`.
    Constant { tau: f64 },
    /// `tau(x) = theta . x`.
    Linear,
    /// `tau(x) = sin(theta . x) + 1`.
    Nonlinear,
}

impl std::str::FromStr for EffectFn {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(EffectFn::Constant { tau: 3.0 }),
            "linear" => Ok(EffectFn::Linear),
            "nonlinear" => Ok(EffectFn::Nonlinear),
            other => Err(Error::Config(format!("unknown effect function {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n: usize,
    pub d: usize,
    pub bias_strength: f64,
    pub effect: EffectFn,
    pub noise_sd: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n: 1000,
            d: 10,
            bias_strength: 0.0,
            effect: EffectFn::Nonlinear,
            noise_sd: 0.1,
            seed: 0,
        }
    }
}

/// Selection direction `w = (1,..,1)/sqrt(d)`.
pub fn selection_direction(d: usize) -> Vec<f64> {
    vec![1.0 / (d as f64).sqrt(); d]
}

/// Effect direction `theta_j = (-1)^j / sqrt(d)`.
pub fn effect_direction(d: usize) -> Vec<f64> {
    let s = 1.0 / (d as f64).sqrt();
    (0..d).map(|j| if j % 2 == 0 { s } else { -s }).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Control surface `mu0(x) = w . x + 0.5 sin(x_0)`.
pub fn control_surface(x: &[f64]) -> f64 {
    dot(&selection_direction(x.len()), x) + 0.5 * x[0].sin()
}

pub fn effect_surface(effect: EffectFn, x: &[f64]) -> f64 {
    match effect {
        EffectFn::Constant { tau } => tau,
        EffectFn::Linear => dot(&effect_direction(x.len()), x),
        EffectFn::Nonlinear => dot(&effect_direction(x.len()), x).sin() + 1.0,
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Draws `X ~ N(0, I)`, assigns treatment with probability
/// `sigmoid(bias_strength * w . x)` and attaches noiseless and noisy
/// potential outcomes.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Dataset> {
    if cfg.n < 4 || cfg.d < 1 {
        return Err(Error::Sizing(format!(
            "synthetic data needs n >= 4 and d >= 1, got n={} d={}",
            cfg.n, cfg.d
        )));
    }
    if !(cfg.bias_strength >= 0.0) || !(cfg.noise_sd >= 0.0) {
        return Err(Error::Config("bias_strength and noise_sd must be >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let w = selection_direction(cfg.d);
    for _attempt in 0..10 {
        let x: Vec<f64> = (0..cfg.n * cfg.d)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let t: Vec<bool> = x
            .chunks(cfg.d)
            .map(|row| rng.random::<f64>() < sigmoid(cfg.bias_strength * dot(&w, row)))
            .collect();
        let n_treated = t.iter().filter(|&&b| b).count();
        if n_treated == 0 || n_treated == cfg.n {
            continue;
        }
        let mut mu0 = Vec::with_capacity(cfg.n);
        let mut mu1 = Vec::with_capacity(cfg.n);
        let mut yf = Vec::with_capacity(cfg.n);
        let mut ycf = Vec::with_capacity(cfg.n);
        for (row, &ti) in x.chunks(cfg.d).zip(&t) {
            let m0 = control_surface(row);
            let m1 = m0 + effect_surface(cfg.effect, row);
            let e_f: f64 = rng.sample(StandardNormal);
            let e_cf: f64 = rng.sample(StandardNormal);
            let (f, cf) = if ti { (m1, m0) } else { (m0, m1) };
            yf.push(f + cfg.noise_sd * e_f);
            ycf.push(cf + cfg.noise_sd * e_cf);
            mu0.push(m0);
            mu1.push(m1);
        }
        return Dataset::new(
            Tensor::new(vec![cfg.n, cfg.d], x)?,
            t,
            yf,
            Some(ycf),
            Some(mu0),
            Some(mu1),
            Vec::new(),
        );
    }
    Err(Error::Validation(
        "every draw left a treatment arm empty after 10 attempts".into(),
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub enum OverlapWarning {
    /// One arm holds less than 5% of the units.
    SmallArm { treated: bool, fraction: f64 },
    /// More than 10% of fitted propensities fall outside [0.02, 0.98].
    ExtremePropensity { fraction: f64 },
}

impl fmt::Display for OverlapWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OverlapWarning::SmallArm { treated, fraction } => write!(
                f,
                "{} arm holds only {:.1}% of units",
                if *treated { "treated" } else { "control" },
                100.0 * fraction
            ),
            OverlapWarning::ExtremePropensity { fraction } => write!(
                f,
                "{:.1}% of estimated propensities lie outside [0.02, 0.98]",
                100.0 * fraction
            ),
        }
    }
}

/// Logistic-regression propensity scores (Newton iterations, small ridge).
pub fn fit_propensity(ds: &Dataset) -> Vec<f64> {
    let (n, d) = (ds.n(), ds.d());
    let p = d + 1;
    let design: Vec<f64> = (0..n)
        .flat_map(|i| std::iter::once(1.0).chain(ds.covariates().row(i).iter().copied()))
        .collect();
    let t = ds.treatment_f64();
    let mut beta = vec![0.0; p];
    let mut probs = vec![0.5; n];
    for _ in 0..50 {
        for i in 0..n {
            probs[i] = sigmoid(dot(&design[i * p..(i + 1) * p], &beta));
        }
        let mut hess = vec![0.0; p * p];
        let mut grad = vec![0.0; p];
        for i in 0..n {
            let row = &design[i * p..(i + 1) * p];
            let wgt = (probs[i] * (1.0 - probs[i])).max(1e-10);
            for a in 0..p {
                grad[a] += row[a] * (t[i] - probs[i]);
                for b in 0..p {
                    hess[a * p + b] += wgt * row[a] * row[b];
                }
            }
        }
        for a in 0..p {
            hess[a * p + a] += 1e-4;
            grad[a] -= 1e-4 * beta[a];
        }
        let Some(step) = cholesky_solve(&hess, &grad, p) else { break };
        let max_step = step.iter().fold(0.0f64, |m, s| m.max(s.abs()));
        for (b, s) in beta.iter_mut().zip(&step) {
            *b += s;
        }
        if max_step < 1e-8 {
            break;
        }
    }
    (0..n)
        .map(|i| sigmoid(dot(&design[i * p..(i + 1) * p], &beta)))
        .collect()
}

/// Positivity diagnostics for a dataset.
pub fn overlap_check(ds: &Dataset) -> Vec<OverlapWarning> {
    let mut warnings = Vec::new();
    let n = ds.n();
    if n == 0 {
        return warnings;
    }
    let treated = ds.treatment().iter().filter(|&&t| t).count() as f64 / n as f64;
    if treated < 0.05 {
        warnings.push(OverlapWarning::SmallArm {
            treated: true,
            fraction: treated,
        });
    }
    if 1.0 - treated < 0.05 {
        warnings.push(OverlapWarning::SmallArm {
            treated: false,
            fraction: 1.0 - treated,
        });
    }
    let probs = fit_propensity(ds);
    let extreme = probs.iter().filter(|&&p| !(0.02..=0.98).contains(&p)).count() as f64 / n as f64;
    if extreme > 0.10 {
        warnings.push(OverlapWarning::ExtremePropensity { fraction: extreme });
    }
    warnings
}
