//! Effect-estimation metrics and the embedding balance diagnostic.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-dimension variance floor used by [`group_kl`].
pub const VARIANCE_FLOOR: f64 = 1e-6;

/// True individual effects, from `mu0/mu1` when present, otherwise from
/// factual and counterfactual outcomes oriented by treatment.
pub fn ite_true(ds: &Dataset) -> Result<Vec<f64>> {
    if let (Some(m0), Some(m1)) = (ds.mu0(), ds.mu1()) {
        return Ok(m1.iter().zip(m0).map(|(a, b)| a - b).collect());
    }
    let ycf = ds
        .y_cf()
        .ok_or(Error::MissingGroundTruth("mu0/mu1 or counterfactual outcome"))?;
    Ok(ds
        .treatment()
        .iter()
        .zip(ds.y_factual().iter().zip(ycf))
        .map(|(&t, (&yf, &ycf))| if t { yf - ycf } else { ycf - yf })
        .collect())
}

pub fn ate_true(ds: &Dataset) -> Result<f64> {
    Ok(mean(&ite_true(ds)?))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// `sqrt(mean((pred - truth)^2))`.
pub fn sqrt_pehe(ite_pred: &[f64], ite_true: &[f64]) -> Result<f64> {
    if ite_pred.len() != ite_true.len() || ite_pred.is_empty() {
        return Err(Error::shape("sqrt_pehe", &[ite_pred.len()], &[ite_true.len()]));
    }
    let mse = ite_pred
        .iter()
        .zip(ite_true)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / ite_pred.len() as f64;
    Ok(mse.sqrt())
}

/// `|mean(pred) - mean(truth)|`.
pub fn ate_error(ite_pred: &[f64], ite_true: &[f64]) -> Result<f64> {
    if ite_pred.len() != ite_true.len() || ite_pred.is_empty() {
        return Err(Error::shape("ate_error", &[ite_pred.len()], &[ite_true.len()]));
    }
    Ok((mean(ite_pred) - mean(ite_true)).abs())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyWarning {
    /// No unit is both recommended treatment and actually treated.
    NoTreatedAgreement,
    /// No unit is both recommended control and actually untreated.
    NoControlAgreement,
}

impl fmt::Display for PolicyWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PolicyWarning::NoTreatedAgreement => {
                f.write_str("no unit with policy=1 and t=1; treated term skipped")
            }
            PolicyWarning::NoControlAgreement => {
                f.write_str("no unit with policy=0 and t=0; control term skipped")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyRisk {
    pub value: f64,
    pub warnings: Vec<PolicyWarning>,
}

fn check_unit_interval(y: &[f64]) -> Result<()> {
    match y.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        Some(&v) => Err(Error::Scaling(v)),
        None => Ok(()),
    }
}

/// Policy risk of `pi(x) = 1[y1_hat - y0_hat > lambda]` estimated from
/// factual outcomes:
/// `1 - (E[y | pi=1, t=1] P(pi=1) + E[y | pi=0, t=0] P(pi=0))`.
pub fn policy_risk(
    y0_hat: &[f64],
    y1_hat: &[f64],
    t: &[bool],
    y: &[f64],
    lambda: f64,
) -> Result<PolicyRisk> {
    let n = t.len();
    if y0_hat.len() != n || y1_hat.len() != n || y.len() != n || n == 0 {
        return Err(Error::shape("policy_risk", &[y0_hat.len(), y1_hat.len()], &[n, y.len()]));
    }
    check_unit_interval(y)?;
    let policy: Vec<bool> = y1_hat.iter().zip(y0_hat).map(|(a, b)| a - b > lambda).collect();
    let p_treat = policy.iter().filter(|&&p| p).count() as f64 / n as f64;
    let agree_mean = |arm: bool| {
        let ys: Vec<f64> = (0..n)
            .filter(|&i| policy[i] == arm && t[i] == arm)
            .map(|i| y[i])
            .collect();
        (!ys.is_empty()).then(|| mean(&ys))
    };
    let mut value = 1.0;
    let mut warnings = Vec::new();
    match agree_mean(true) {
        Some(m) => value -= m * p_treat,
        None => warnings.push(PolicyWarning::NoTreatedAgreement),
    }
    match agree_mean(false) {
        Some(m) => value -= m * (1.0 - p_treat),
        None => warnings.push(PolicyWarning::NoControlAgreement),
    }
    Ok(PolicyRisk { value, warnings })
}

/// Risk of a policy under known potential outcomes in `[0, 1]`:
/// `1 - mean(pi mu1 + (1 - pi) mu0)`.
pub fn policy_risk_true(policy: &[bool], mu0: &[f64], mu1: &[f64]) -> Result<f64> {
    let n = policy.len();
    if mu0.len() != n || mu1.len() != n || n == 0 {
        return Err(Error::shape("policy_risk_true", &[n], &[mu0.len(), mu1.len()]));
    }
    check_unit_interval(mu0)?;
    check_unit_interval(mu1)?;
    let value: f64 = (0..n).map(|i| if policy[i] { mu1[i] } else { mu0[i] }).sum();
    Ok(1.0 - value / n as f64)
}

/// Maps every value of both slices with the same `(v - min) / (max - min)`.
pub fn minmax_scale_jointly(a: &[f64], b: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (lo, hi) = a
        .iter()
        .chain(b)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let f = |v: &f64| ((v - lo) / span).clamp(0.0, 1.0);
    (a.iter().map(f).collect(), b.iter().map(f).collect())
}

fn gaussian_fit(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let mut mu = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mu.iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    mu.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; d];
    for i in 0..n {
        for ((s, v), m) in var.iter_mut().zip(x.row(i)).zip(&mu) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut()
        .for_each(|s| *s = (*s / n as f64).max(VARIANCE_FLOOR));
    (mu, var)
}

/// Closed-form KL(treated || control) between diagonal Gaussians fitted to
/// each group's `[m, k]` embeddings.
pub fn group_kl(emb_treated: &Tensor, emb_control: &Tensor) -> Result<f64> {
    for (name, e) in [("treated", emb_treated), ("control", emb_control)] {
        if e.rank() != 2 || e.shape()[0] < 2 {
            return Err(Error::Group(format!(
                "{name} group needs at least 2 embeddings, got shape {:?}",
                e.shape()
            )));
        }
    }
    if emb_treated.shape()[1] != emb_control.shape()[1] {
        return Err(Error::shape("group_kl", emb_treated.shape(), emb_control.shape()));
    }
    let (mt, vt) = gaussian_fit(emb_treated);
    let (mc, vc) = gaussian_fit(emb_control);
    let kl = (0..mt.len())
        .map(|j| {
            let dm = mt[j] - mc[j];
            0.5 * ((vc[j] / vt[j]).ln() + (vt[j] + dm * dm) / vc[j] - 1.0)
        })
        .sum::<f64>();
    Ok(kl.max(0.0))
}

/// Both directions of [`group_kl`] for an embedding matrix and its arm labels.
pub fn group_kl_by_arm(embedding: &Tensor, t: &[bool]) -> Result<(f64, f64)> {
    let treated: Vec<usize> = (0..t.len()).filter(|&i| t[i]).collect();
    let control: Vec<usize> = (0..t.len()).filter(|&i| !t[i]).collect();
    let take = |idx: &[usize]| {
        let k = embedding.last_dim();
        let mut data = Vec::with_capacity(idx.len() * k);
        for &i in idx {
            data.extend_from_slice(embedding.row(i));
        }
        Tensor::new(vec![idx.len(), k], data)
    };
    let (et, ec) = (take(&treated)?, take(&control)?);
    Ok((group_kl(&et, &ec)?, group_kl(&ec, &et)?))
}

/// Factual mean squared error of potential-outcome predictions.
pub fn factual_mse(y0_hat: &[f64], y1_hat: &[f64], t: &[bool], y: &[f64]) -> Result<f64> {
    let n = t.len();
    if y0_hat.len() != n || y1_hat.len() != n || y.len() != n || n == 0 {
        return Err(Error::shape("factual_mse", &[y0_hat.len(), y1_hat.len()], &[n, y.len()]));
    }
    Ok((0..n)
        .map(|i| {
            let p = if t[i] { y1_hat[i] } else { y0_hat[i] };
            (p - y[i]) * (p - y[i])
        })
        .sum::<f64>()
        / n as f64)
}

/// Metrics of one set of predictions on one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub method: String,
    pub n: usize,
    pub sqrt_pehe: Option<f64>,
    pub ate_error: Option<f64>,
    pub ate_pred: f64,
    pub policy_risk: Option<f64>,
    pub factual_mse: f64,
    pub group_kl: Option<f64>,
    pub group_kl_reverse: Option<f64>,
    #[serde(default)]
    pub warnings: Vec<String>,
    /// Resolved configuration of the run, as JSON.
    #[serde(default)]
    pub config: Option<serde_json::Value>,
}

/// Potential-outcome predictions for each unit of a dataset.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Predictions {
    pub y0: Vec<f64>,
    pub y1: Vec<f64>,
}

impl Predictions {
    pub fn ite(&self) -> Vec<f64> {
        self.y1.iter().zip(&self.y0).map(|(a, b)| a - b).collect()
    }

    pub fn len(&self) -> usize {
        self.y0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y0.is_empty()
    }

    /// Row subset.
    pub fn subset(&self, idx: &[usize]) -> Predictions {
        Predictions {
            y0: idx.iter().map(|&i| self.y0[i]).collect(),
            y1: idx.iter().map(|&i| self.y1[i]).collect(),
        }
    }

    /// CSV with columns `unit,t,yf,y0_hat,y1_hat,ite_hat`.
    pub fn to_csv_string(&self, units: &[usize], ds: &Dataset) -> String {
        let mut out = String::from("unit,t,yf,y0_hat,y1_hat,ite_hat\n");
        for (k, &u) in units.iter().enumerate() {
            out.push_str(&format!(
                "{u},{},{},{},{},{}\n",
                u8::from(ds.treatment()[k]),
                ds.y_factual()[k],
                self.y0[k],
                self.y1[k],
                self.y1[k] - self.y0[k]
            ));
        }
        out
    }
}

/// Scores predictions against a dataset. Ground-truth metrics are filled
/// when the dataset carries them; policy risk only when every factual
/// outcome already lies in `[0, 1]`.
pub fn evaluate(
    split: &str,
    method: &str,
    ds: &Dataset,
    pred: &Predictions,
    embedding: Option<&Tensor>,
    lambda: f64,
) -> Result<EvalReport> {
    if pred.len() != ds.n() {
        return Err(Error::shape("evaluate", &[pred.len()], &[ds.n()]));
    }
    let ite = pred.ite();
    let mut warnings = Vec::new();
    let (sqrt_pehe_v, ate_err) = match ite_true(ds) {
        Ok(truth) => (Some(sqrt_pehe(&ite, &truth)?), Some(ate_error(&ite, &truth)?)),
        Err(Error::MissingGroundTruth(_)) => (None, None),
        Err(e) => return Err(e),
    };
    let in_unit = ds.y_factual().iter().all(|v| (0.0..=1.0).contains(v));
    let policy = if in_unit {
        let r = policy_risk(&pred.y0, &pred.y1, ds.treatment(), ds.y_factual(), lambda)?;
        warnings.extend(r.warnings.iter().map(|w| w.to_string()));
        Some(r.value)
    } else {
        None
    };
    let (kl, kl_rev) = match embedding {
        Some(e) if ds.treated_indices().len() >= 2 && ds.control_indices().len() >= 2 => {
            let (a, b) = group_kl_by_arm(e, ds.treatment())?;
            (Some(a), Some(b))
        }
        _ => (None, None),
    };
    let report = EvalReport {
        split: split.to_string(),
        method: method.to_string(),
        n: ds.n(),
        sqrt_pehe: sqrt_pehe_v,
        ate_error: ate_err,
        ate_pred: mean(&ite),
        policy_risk: policy,
        factual_mse: factual_mse(&pred.y0, &pred.y1, ds.treatment(), ds.y_factual())?,
        group_kl: kl,
        group_kl_reverse: kl_rev,
        warnings,
        config: None,
    };
    if !report.is_finite() {
        return Err(Error::Numeric(format!("non-finite metric in {method}/{split}")));
    }
    Ok(report)
}

impl EvalReport {
    fn is_finite(&self) -> bool {
        [
            self.sqrt_pehe,
            self.ate_error,
            Some(self.ate_pred),
            self.policy_risk,
            Some(self.factual_mse),
            self.group_kl,
            self.group_kl_reverse,
        ]
        .iter()
        .flatten()
        .all(|v| v.is_finite())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Header line for [`EvalReport::table_row`].
    pub fn table_header() -> String {
        format!(
            "{:<18} {:<8} {:>6} {:>10} {:>10} {:>10} {:>10} {:>10}",
            "method", "split", "n", "sqrt_pehe", "ate_err", "pol_risk", "f_mse", "group_kl"
        )
    }

    pub fn table_row(&self) -> String {
        let f = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
        format!(
            "{:<18} {:<8} {:>6} {:>10} {:>10} {:>10} {:>10} {:>10}",
            self.method,
            self.split,
            self.n,
            f(self.sqrt_pehe),
            f(self.ate_error),
            f(self.policy_risk),
            f(Some(self.factual_mse)),
            f(self.group_kl)
        )
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}", EvalReport::table_header())?;
        write!(f, "{}", self.table_row())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, EffectFn, SynthConfig};

    #[test]
    fn pehe_examples() {
        assert_eq!(sqrt_pehe(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!((sqrt_pehe(&[1.5, 2.5], &[1.0, 2.0]).unwrap() - 0.5).abs() < 1e-15);
        assert!((sqrt_pehe(&[1.0, 2.0], &[0.0, 0.0]).unwrap() - 2.5f64.sqrt()).abs() < 1e-12);
        assert!(sqrt_pehe(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn ite_from_constant_effect() {
        let ds = generate_synthetic(&SynthConfig {
            n: 50,
            effect: EffectFn::Constant { tau: 3.0 },
            ..Default::default()
        })
        .unwrap();
        assert!(ite_true(&ds).unwrap().iter().all(|&v| (v - 3.0).abs() < 1e-12));
        assert!((ate_true(&ds).unwrap() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn policy_risk_examples() {
        let t = [true; 4];
        let r = policy_risk(&[0.0; 4], &[1.0; 4], &t, &[1.0; 4], 0.0).unwrap();
        assert_eq!(r.value, 0.0);
        let r = policy_risk(&[0.0; 4], &[1.0; 4], &t, &[0.0; 4], 0.0).unwrap();
        assert_eq!(r.value, 1.0);
        // Half treated by policy; agreeing treated outcomes average 0.8,
        // agreeing control outcomes average 0.6.
        let y0 = [0.0, 0.0, 1.0, 1.0];
        let y1 = [1.0, 1.0, 0.0, 0.0];
        let t = [true, true, false, false];
        let y = [0.7, 0.9, 0.5, 0.7];
        let r = policy_risk(&y0, &y1, &t, &y, 0.0).unwrap();
        assert!((r.value - 0.3).abs() < 1e-12);
        assert!(r.warnings.is_empty());
        assert!(matches!(
            policy_risk(&y0, &y1, &t, &[2.0, 0.0, 0.0, 0.0], 0.0),
            Err(Error::Scaling(_))
        ));
    }

    #[test]
    fn policy_risk_skips_missing_term() {
        let r = policy_risk(&[0.0; 2], &[1.0; 2], &[true, true], &[0.5, 0.5], 0.0).unwrap();
        assert_eq!(r.warnings, vec![PolicyWarning::NoControlAgreement]);
        assert_eq!(r.value, 0.5);
    }

    #[test]
    fn kl_examples() {
        let a = Tensor::from_rows(&[[0.0, 1.0], [2.0, -1.0], [1.0, 0.5]]).unwrap();
        assert!(group_kl(&a, &a).unwrap().abs() < 1e-9);
        let one = Tensor::from_rows(&[[0.0]]).unwrap();
        assert!(matches!(group_kl(&one, &a), Err(Error::Group(_))));
    }

    #[test]
    fn minmax_joint() {
        let (a, b) = minmax_scale_jointly(&[1.0, 3.0], &[5.0]);
        assert_eq!(a, vec![0.0, 0.5]);
        assert_eq!(b, vec![1.0]);
    }

    #[test]
    fn report_roundtrips_json() {
        let ds = generate_synthetic(&SynthConfig {
            n: 20,
            ..Default::default()
        })
        .unwrap();
        let pred = Predictions {
            y0: ds.mu0().unwrap().to_vec(),
            y1: ds.mu1().unwrap().to_vec(),
        };
        let rep = evaluate("test", "oracle", &ds, &pred, None, 0.0).unwrap();
        assert_eq!(rep.sqrt_pehe, Some(0.0));
        let back: EvalReport = serde_json::from_str(&rep.to_json()).unwrap();
        assert_eq!(back, rep);
    }
}
