//! Wasserstein critic over embeddings of the two treatment arms.
//!
//! The critic maximizes `mean D(treated) - mean D(control)`, an estimate
//! of the earth-mover distance between the two embedding distributions
//! when `D` is (approximately) 1-Lipschitz. The encoder minimizes the
//! same quantity to pull the distributions together.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::Mlp;
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// How the critic is kept approximately 1-Lipschitz.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CriticRegularizer {
    /// Clamp every critic parameter into `[-clip, clip]` after each step.
    WeightClip { clip: f64 },
    /// Penalize `(||grad_x D(x)|| - 1)^2` on interpolates.
    GradientPenalty { weight: f64 },
}

/// Which embeddings receive the balancing gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvFlow {
    Both,
    /// Treated embeddings are held fixed ("real"); only control moves.
    ControlOnly,
}

impl std::str::FromStr for AdvFlow {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(AdvFlow::Both),
            "control_only" => Ok(AdvFlow::ControlOnly),
            other => Err(Error::Config(format!("unknown adv_flow {other:?}"))),
        }
    }
}

/// `d_model -> hidden -> 1` dense stack with unbounded output, under `critic.`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Critic {
    pub mlp: Mlp,
}

impl Critic {
    pub fn new(store: &mut ParamStore, d_model: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Critic {
            mlp: Mlp::new(store, "critic", &[d_model, hidden, 1], rng),
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        self.mlp.ids()
    }

    /// `[m, d_model]` embeddings to `[m, 1]` scores.
    pub fn score(&self, g: &mut Graph, store: &ParamStore, embedding: Var) -> Result<Var> {
        self.mlp.forward(g, store, embedding)
    }

    pub fn score_tensor(&self, store: &ParamStore, embedding: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let e = g.constant(embedding.clone());
        let s = self.score(&mut g, store, e)?;
        Ok(g.value(s).clone())
    }

    /// Upper bound on the critic's Lipschitz constant: the product of the
    /// Frobenius norms of its weight matrices (relu is 1-Lipschitz).
    pub fn lipschitz_bound(&self, store: &ParamStore) -> f64 {
        self.mlp
            .layers
            .iter()
            .map(|l| {
                let w = &store.get(l.w).tensor;
                w.data().iter().map(|v| v * v).sum::<f64>().sqrt()
            })
            .product()
    }

    /// `(||grad_x D(x_hat)|| - 1)^2` averaged over interpolates
    /// `x_hat = eps * treated_i + (1 - eps) * control_j` of random pairs.
    /// The input gradient of the two-layer relu critic is written in closed
    /// form, `(mask * w2^T) w1^T`, so the penalty stays differentiable in
    /// the critic weights.
    pub fn gradient_penalty(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        treated: &Tensor,
        control: &Tensor,
        rng: &mut impl Rng,
    ) -> Result<Var> {
        if self.mlp.layers.len() != 2 {
            return Err(Error::Config("gradient penalty needs a two-layer critic".into()));
        }
        let m = treated.shape()[0].max(control.shape()[0]);
        let dm = treated.shape()[1];
        let mut interp = Vec::with_capacity(m * dm);
        for _ in 0..m {
            let a = treated.row(rng.random_range(0..treated.shape()[0]));
            let b = control.row(rng.random_range(0..control.shape()[0]));
            let eps: f64 = rng.random();
            interp.extend(a.iter().zip(b).map(|(x, y)| eps * x + (1.0 - eps) * y));
        }
        let x_hat = Tensor::new(vec![m, dm], interp)?;
        let (l1, l2) = (self.mlp.layers[0], self.mlp.layers[1]);
        let w1 = g.param(store, l1.w);
        let b1 = g.param(store, l1.b);
        let w2 = g.param(store, l2.w);
        let xv = g.constant(x_hat);
        let pre = crate::nn::dense(g, xv, w1, b1)?;
        let mask = g.value(pre).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
        let mask = g.constant(mask);
        let hidden = g.shape(w2)[0];
        let w2v = g.reshape(w2, &[hidden])?;
        let masked = g.mul(mask, w2v)?;
        let w1t = g.transpose(w1)?;
        let grad_x = g.matmul(masked, w1t)?;
        let sq = g.square(grad_x);
        let norm2 = g.row_sum(sq)?;
        let norm2 = g.add_scalar(norm2, 1e-12);
        let norm = g.sqrt(norm2);
        let dev = g.add_scalar(norm, -1.0);
        let dev2 = g.square(dev);
        Ok(g.mean(dev2))
    }
}

fn non_empty(g: &Graph, v: Var, which: &str) -> Result<()> {
    if g.value(v).is_empty() {
        return Err(Error::Group(format!("{which} group is empty")));
    }
    Ok(())
}

/// Loss minimized by the critic, `-(mean_t - mean_c)`, together with the
/// Wasserstein estimate `mean_t - mean_c`.
pub fn critic_loss(g: &mut Graph, scores_treated: Var, scores_control: Var) -> Result<(Var, f64)> {
    non_empty(g, scores_treated, "treated")?;
    non_empty(g, scores_control, "control")?;
    let mt = g.mean(scores_treated);
    let mc = g.mean(scores_control);
    let loss = g.sub(mc, mt)?;
    let estimate = -g.value(loss).item();
    Ok((loss, estimate))
}

/// Loss minimized by the encoder, `mean_t - mean_c`.
pub fn generator_balance_loss(g: &mut Graph, scores_treated: Var, scores_control: Var) -> Result<Var> {
    non_empty(g, scores_treated, "treated")?;
    non_empty(g, scores_control, "control")?;
    let mt = g.mean(scores_treated);
    let mc = g.mean(scores_control);
    g.sub(mt, mc)
}

/// Wasserstein estimate from plain score vectors.
pub fn wasserstein_estimate(scores_treated: &[f64], scores_control: &[f64]) -> Result<f64> {
    if scores_treated.is_empty() || scores_control.is_empty() {
        return Err(Error::Group("both groups need at least one score".into()));
    }
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    Ok(mean(scores_treated) - mean(scores_control))
}

/// Clamps every listed parameter into `[-c, c]`.
pub fn clip_weights(store: &mut ParamStore, ids: &[ParamId], c: f64) {
    for &id in ids {
        for w in store.get_mut(id).tensor.data_mut() {
            *w = w.clamp(-c, c);
        }
    }
}
