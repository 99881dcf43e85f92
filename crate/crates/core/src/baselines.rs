//! Classical comparators: pooled and per-arm least squares, and k-nearest
//! neighbor matching. Each fits on the training split and predicts both
//! potential outcomes for every unit of the dataset.

use crate::dataset::{Dataset, SplitIndices, Standardizer};
use crate::error::{Error, Result};
use crate::linalg::least_squares;
use crate::metrics::Predictions;

/// Penalty added to the normal equations when they are singular.
pub const RIDGE_JITTER: f64 = 1e-8;

pub const DEFAULT_K: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub coef: Vec<f64>,
    pub intercept: f64,
}

impl LinearModel {
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.intercept + self.coef.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineFit {
    pub predictions: Predictions,
    pub warnings: Vec<String>,
}

/// Fits `y ~ intercept + rows . coef` where each row already includes any
/// extra columns.
fn fit_linear(rows: &[Vec<f64>], y: &[f64], warnings: &mut Vec<String>, what: &str) -> Result<LinearModel> {
    let p = rows.first().map_or(0, Vec::len) + 1;
    let mut design = Vec::with_capacity(rows.len() * p);
    for r in rows {
        design.push(1.0);
        design.extend_from_slice(r);
    }
    let fit = least_squares(&design, y, p, RIDGE_JITTER)
        .ok_or_else(|| Error::Numeric(format!("{what}: least squares failed")))?;
    if fit.ridge.is_some() {
        warnings.push(format!(
            "{what}: design matrix is rank deficient; used ridge penalty {RIDGE_JITTER:e}"
        ));
    }
    Ok(LinearModel {
        intercept: fit.coef[0],
        coef: fit.coef[1..].to_vec(),
    })
}

fn train_arm(ds: &Dataset, splits: &SplitIndices) -> Result<(Vec<usize>, Vec<usize>)> {
    let treated: Vec<usize> = splits.train.iter().copied().filter(|&i| ds.treatment()[i]).collect();
    let control: Vec<usize> = splits.train.iter().copied().filter(|&i| !ds.treatment()[i]).collect();
    if treated.is_empty() || control.is_empty() {
        return Err(Error::Validation("train split must contain both arms".into()));
    }
    Ok((treated, control))
}

/// Least squares on `[x, t]`; the effect estimate is the coefficient on
/// `t`, identical for every unit.
pub fn ols_lr1(ds: &Dataset, splits: &SplitIndices) -> Result<BaselineFit> {
    train_arm(ds, splits)?;
    let x = ds.covariates();
    let rows: Vec<Vec<f64>> = splits
        .train
        .iter()
        .map(|&i| {
            let mut r = x.row(i).to_vec();
            r.push(if ds.treatment()[i] { 1.0 } else { 0.0 });
            r
        })
        .collect();
    let y: Vec<f64> = splits.train.iter().map(|&i| ds.y_factual()[i]).collect();
    let mut warnings = Vec::new();
    let model = fit_linear(&rows, &y, &mut warnings, "ols_lr1")?;
    let tau = *model.coef.last().unwrap();
    let base = LinearModel {
        coef: model.coef[..ds.d()].to_vec(),
        intercept: model.intercept,
    };
    let y0: Vec<f64> = (0..ds.n()).map(|i| base.predict(x.row(i))).collect();
    let y1 = y0.iter().map(|v| v + tau).collect();
    Ok(BaselineFit {
        predictions: Predictions { y0, y1 },
        warnings,
    })
}

/// Separate least squares per arm; the effect is the difference of the
/// two fitted surfaces.
pub fn ols_lr2(ds: &Dataset, splits: &SplitIndices) -> Result<BaselineFit> {
    let (treated, control) = train_arm(ds, splits)?;
    let x = ds.covariates();
    let mut warnings = Vec::new();
    let mut fit_arm = |idx: &[usize], name: &str| {
        let rows: Vec<Vec<f64>> = idx.iter().map(|&i| x.row(i).to_vec()).collect();
        let y: Vec<f64> = idx.iter().map(|&i| ds.y_factual()[i]).collect();
        fit_linear(&rows, &y, &mut warnings, name)
    };
    let m0 = fit_arm(&control, "ols_lr2 control arm")?;
    let m1 = fit_arm(&treated, "ols_lr2 treated arm")?;
    Ok(BaselineFit {
        predictions: Predictions {
            y0: (0..ds.n()).map(|i| m0.predict(x.row(i))).collect(),
            y1: (0..ds.n()).map(|i| m1.predict(x.row(i))).collect(),
        },
        warnings,
    })
}

/// Counterfactual of each unit = mean factual outcome of its `k` nearest
/// training units in the opposite arm (Euclidean distance on covariates
/// standardized with training statistics, ties broken by index). The
/// factual side is the unit's own observed outcome.
pub fn knn_ite(ds: &Dataset, splits: &SplitIndices, k: usize) -> Result<BaselineFit> {
    if k == 0 {
        return Err(Error::Config("k must be >= 1".into()));
    }
    let (treated, control) = train_arm(ds, splits)?;
    let scaler = Standardizer::fit(&ds.covariate_rows(&splits.train));
    let z = scaler.transform(ds.covariates());
    let mut warnings = Vec::new();
    for (arm, name) in [(&treated, "treated"), (&control, "control")] {
        if arm.len() < k {
            warnings.push(format!(
                "k={k} exceeds the {} {name} training units; using k={}",
                arm.len(),
                arm.len()
            ));
        }
    }
    let nearest_mean = |i: usize, pool: &[usize]| {
        let kk = k.min(pool.len());
        let mut dist: Vec<(f64, usize)> = pool
            .iter()
            .map(|&j| {
                let d2 = z
                    .row(i)
                    .iter()
                    .zip(z.row(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>();
                (d2, j)
            })
            .collect();
        dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        dist[..kk].iter().map(|&(_, j)| ds.y_factual()[j]).sum::<f64>() / kk as f64
    };
    let mut y0 = Vec::with_capacity(ds.n());
    let mut y1 = Vec::with_capacity(ds.n());
    for i in 0..ds.n() {
        let yf = ds.y_factual()[i];
        if ds.treatment()[i] {
            y0.push(nearest_mean(i, &control));
            y1.push(yf);
        } else {
            y0.push(yf);
            y1.push(nearest_mean(i, &treated));
        }
    }
    Ok(BaselineFit {
        predictions: Predictions { y0, y1 },
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn all_train(n: usize) -> SplitIndices {
        SplitIndices {
            train: (0..n).collect(),
            valid: Vec::new(),
            test: Vec::new(),
        }
    }

    fn linear_ds(heterogeneous: bool) -> Dataset {
        let xs: Vec<f64> = (0..20).map(|i| (i as f64 * 0.37).sin() * 3.0).collect();
        let t: Vec<bool> = (0..20).map(|i| i % 3 == 0).collect();
        let y = xs
            .iter()
            .zip(&t)
            .map(|(&x, &ti)| {
                let tau = if heterogeneous { 3.0 + x } else { 3.0 };
                2.0 * x + if ti { tau } else { 0.0 }
            })
            .collect();
        Dataset::new(Tensor::new(vec![20, 1], xs).unwrap(), t, y, None, None, None, Vec::new())
            .unwrap()
    }

    #[test]
    fn lr1_recovers_constant_effect() {
        let ds = linear_ds(false);
        let fit = ols_lr1(&ds, &all_train(20)).unwrap();
        assert!(fit.predictions.ite().iter().all(|v| (v - 3.0).abs() < 1e-9));
    }

    #[test]
    fn lr2_recovers_linear_effect() {
        let ds = linear_ds(true);
        let fit = ols_lr2(&ds, &all_train(20)).unwrap();
        for (i, ite) in fit.predictions.ite().iter().enumerate() {
            let x = ds.covariates().row(i)[0];
            assert!((ite - (3.0 + x)).abs() < 1e-9);
        }
    }

    #[test]
    fn knn_hand_example() {
        // 2-D points: treated at (0,0) (y=1), (4,0) (y=5), (0,3) (y=2);
        // control at (1,0) (y=0), (4,1) (y=10), (0,4) (y=-1).
        let x = Tensor::from_rows(&[
            [0.0, 0.0],
            [4.0, 0.0],
            [0.0, 3.0],
            [1.0, 0.0],
            [4.0, 1.0],
            [0.0, 4.0],
        ])
        .unwrap();
        let t = vec![true, true, true, false, false, false];
        let y = vec![1.0, 5.0, 2.0, 0.0, 10.0, -1.0];
        let ds = Dataset::new(x, t, y, None, None, None, Vec::new()).unwrap();
        let fit = knn_ite(&ds, &all_train(6), 1).unwrap();
        // Each point's nearest opposite-arm neighbor is at distance 1 and
        // every other candidate is at least 3 away, so standardizing the
        // columns does not change the neighbor sets.
        assert_eq!(fit.predictions.y0[..3], [0.0, 10.0, -1.0]);
        assert_eq!(fit.predictions.y1[3..], [1.0, 5.0, 2.0]);

        let fit = knn_ite(&ds, &all_train(6), 3).unwrap();
        assert!(fit.predictions.y0[..3].iter().all(|&v| v == 3.0));
        let fit = knn_ite(&ds, &all_train(6), 10).unwrap();
        assert_eq!(fit.warnings.len(), 2);
        assert!(fit.predictions.y1[3..].iter().all(|&v| (v - 8.0 / 3.0).abs() < 1e-12));
    }
}
