//! Decoder reconstructing covariates from embeddings, and its loss.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::Mlp;
use crate::param::{ParamId, ParamStore};

/// `d_model -> hidden -> d` dense stack, parameters under `dec.`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decoder {
    pub mlp: Mlp,
}

impl Decoder {
    pub fn new(
        store: &mut ParamStore,
        d_model: usize,
        hidden: usize,
        n_features: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Decoder {
            mlp: Mlp::new(store, "dec", &[d_model, hidden, n_features], rng),
        }
    }

    /// `[n, d_model]` embeddings to `[n, d]` reconstructions.
    pub fn reconstruct(&self, g: &mut Graph, store: &ParamStore, embedding: Var) -> Result<Var> {
        self.mlp.forward(g, store, embedding)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        self.mlp.ids()
    }
}

/// Squared Frobenius distance divided by the number of rows.
pub fn reco_loss(g: &mut Graph, x: Var, x_hat: Var) -> Result<Var> {
    if g.shape(x) != g.shape(x_hat) {
        return Err(Error::shape("reco_loss", g.shape(x), g.shape(x_hat)));
    }
    let n = g.shape(x).first().copied().unwrap_or(1).max(1);
    let diff = g.sub(x, x_hat)?;
    let sq = g.square(diff);
    let total = g.sum(sq);
    Ok(g.scale(total, 1.0 / n as f64))
}
