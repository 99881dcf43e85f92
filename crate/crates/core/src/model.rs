//! The full network: a representation backbone feeding a reconstruction
//! decoder, a Wasserstein critic, and two outcome heads.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adversary::{generator_balance_loss, AdvFlow, Critic};
use crate::encoder::{Encoder, EncoderConfig, Pooling};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::Mlp;
use crate::outcome::{factual_loss, Heads};
use crate::param::{ParamId, ParamStore};
use crate::reconstruction::{reco_loss, Decoder};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    /// Dense backbone with roughly the transformer's parameter count.
    NoTransformer,
    /// Balancing weight forced to zero.
    NoDiscriminator,
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Ablation::Full => "full",
            Ablation::NoTransformer => "no_transformer",
            Ablation::NoDiscriminator => "no_discriminator",
        })
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Ablation::Full),
            "no_transformer" => Ok(Ablation::NoTransformer),
            "no_discriminator" => Ok(Ablation::NoDiscriminator),
            other => Err(Error::Config(format!("unknown ablation {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Backbone {
    Transformer(Encoder),
    /// Relu stack `d -> h -> ... -> h -> d_model` under `enc.mlp.`.
    Dense(Mlp),
}

/// Number of scalars in a transformer encoder for `d` features.
pub fn transformer_param_count(d: usize, cfg: &EncoderConfig) -> usize {
    let (dm, ff) = (cfg.d_model, cfg.d_ff);
    let cls = if cfg.pooling == Pooling::ClsToken { dm } else { 0 };
    let block = 4 * dm * dm + 4 * dm + dm * ff + ff + ff * dm + dm;
    2 * d * dm + cls + cfg.n_blocks * block
}

fn dense_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

/// Layer widths of the dense backbone whose parameter count is closest
/// to the transformer's. Uses `max(1, n_blocks)` hidden layers.
pub fn matched_dense_dims(d: usize, cfg: &EncoderConfig) -> Vec<usize> {
    let target = transformer_param_count(d, cfg) as i64;
    let layers = cfg.n_blocks.max(1);
    let dims_for = |h: usize| {
        let mut dims = vec![d];
        dims.extend(std::iter::repeat_n(h, layers));
        dims.push(cfg.d_model);
        dims
    };
    let best = (1..=4096)
        .min_by_key(|&h| (dense_count(&dims_for(h)) as i64 - target).abs())
        .unwrap();
    dims_for(best)
}

/// Loss weights of the joint objective `alpha reco + beta balance + gamma factual`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
        }
    }
}

/// Unweighted values of the three loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub reco: f64,
    pub balance: f64,
    pub factual: f64,
}

/// A minibatch in model space (standardized covariates and outcomes).
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub x: &'a Tensor,
    pub t: &'a [bool],
    pub y: &'a [f64],
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CetModel {
    pub backbone: Backbone,
    pub decoder: Decoder,
    pub critic: Critic,
    pub heads: Heads,
    pub n_features: usize,
    pub d_model: usize,
}

impl CetModel {
    /// Registers every parameter in `store`. Decoder, critic and heads use
    /// hidden width `d_model`.
    pub fn new(
        store: &mut ParamStore,
        n_features: usize,
        cfg: &EncoderConfig,
        ablation: Ablation,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if n_features == 0 {
            return Err(Error::Config("need at least one covariate".into()));
        }
        cfg.validate()?;
        let dm = cfg.d_model;
        let backbone = match ablation {
            Ablation::NoTransformer => {
                Backbone::Dense(Mlp::new(store, "enc.mlp", &matched_dense_dims(n_features, cfg), rng))
            }
            _ => Backbone::Transformer(Encoder::new(store, n_features, *cfg, rng)?),
        };
        Ok(CetModel {
            backbone,
            decoder: Decoder::new(store, dm, dm, n_features, rng),
            critic: Critic::new(store, dm, dm, rng),
            heads: Heads::new(store, dm, dm, rng),
            n_features,
            d_model: dm,
        })
    }

    pub fn encoder_ids(&self) -> Vec<ParamId> {
        match &self.backbone {
            Backbone::Transformer(e) => e.ids(),
            Backbone::Dense(m) => m.ids(),
        }
    }

    /// Parameters moved by the joint step: backbone, decoder and heads.
    pub fn joint_ids(&self) -> Vec<ParamId> {
        let mut ids = self.encoder_ids();
        ids.extend(self.decoder.ids());
        ids.extend(self.heads.ids());
        ids
    }

    pub fn critic_ids(&self) -> Vec<ParamId> {
        self.critic.ids()
    }

    pub fn embed(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        match &self.backbone {
            Backbone::Transformer(e) => Ok(e.forward(g, store, x)?.embedding),
            Backbone::Dense(m) => {
                let w = g.shape(x);
                if w.len() != 2 || w[1] != self.n_features {
                    return Err(Error::shape("encode", w, &[self.n_features]));
                }
                m.forward(g, store, x)
            }
        }
    }

    pub fn embed_tensor(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let e = self.embed(&mut g, store, xv)?;
        Ok(g.value(e).clone())
    }

    /// `(y0_hat, y1_hat)` for every row of `x`, in model space.
    pub fn predict(&self, store: &ParamStore, x: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let e = self.embed(&mut g, store, xv)?;
        let (y0, y1) = self.heads.predict_potential(&mut g, store, e)?;
        Ok((g.value(y0).data().to_vec(), g.value(y1).data().to_vec()))
    }

    /// Builds the weighted joint loss given an already computed embedding.
    /// Terms with zero weight are not added to the graph.
    pub fn loss_from_embedding(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        embedding: Var,
        batch: Batch<'_>,
        weights: LossWeights,
        flow: AdvFlow,
    ) -> Result<(Var, LossParts)> {
        let mut parts = LossParts::default();
        let mut terms = Vec::with_capacity(3);

        let x = g.constant(batch.x.clone());
        if weights.alpha != 0.0 {
            let x_hat = self.decoder.reconstruct(g, store, embedding)?;
            let l = reco_loss(g, x, x_hat)?;
            parts.reco = g.value(l).item();
            terms.push(g.scale(l, weights.alpha));
        }
        if weights.beta != 0.0 {
            let (treated, control) = arm_rows(batch.t);
            let mut e_t = g.select_rows(embedding, &treated)?;
            if flow == AdvFlow::ControlOnly {
                e_t = g.detach(e_t);
            }
            let e_c = g.select_rows(embedding, &control)?;
            let s_t = self.critic.score(g, store, e_t)?;
            let s_c = self.critic.score(g, store, e_c)?;
            let l = generator_balance_loss(g, s_t, s_c)?;
            parts.balance = g.value(l).item();
            terms.push(g.scale(l, weights.beta));
        }
        if weights.gamma != 0.0 {
            let (y0, y1) = self.heads.predict_potential(g, store, embedding)?;
            let l = factual_loss(g, y0, y1, batch.t, batch.y)?;
            parts.factual = g.value(l).item();
            terms.push(g.scale(l, weights.gamma));
        }
        let mut total = match terms.first() {
            Some(&t) => t,
            None => return Err(Error::Config("all loss weights are zero".into())),
        };
        for &t in &terms[1..] {
            total = g.add(total, t)?;
        }
        Ok((total, parts))
    }

    /// `alpha L_reco + beta L_balance + gamma L_factual` on one batch.
    pub fn combined_loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: Batch<'_>,
        weights: LossWeights,
        flow: AdvFlow,
    ) -> Result<(Var, LossParts)> {
        let x = g.constant(batch.x.clone());
        let e = self.embed(g, store, x)?;
        self.loss_from_embedding(g, store, e, batch, weights, flow)
    }
}

/// Row indices of the treated and control units.
pub fn arm_rows(t: &[bool]) -> (Vec<usize>, Vec<usize>) {
    let treated = (0..t.len()).filter(|&i| t[i]).collect();
    let control = (0..t.len()).filter(|&i| !t[i]).collect();
    (treated, control)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            n_blocks: 1,
            n_heads: 2,
            d_model: 4,
            d_ff: 8,
            pooling: Pooling::Mean,
        }
    }

    #[test]
    fn dense_backbone_matches_parameter_count() {
        for (d, cfg) in [(10, EncoderConfig::default()), (4, tiny()), (25, EncoderConfig::default())] {
            let target = transformer_param_count(d, &cfg) as f64;
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let full = CetModel::new(&mut store, d, &cfg, Ablation::Full, &mut rng).unwrap();
            assert_eq!(store.num_scalars(&full.encoder_ids()) as f64, target);
            let mut store = ParamStore::new();
            let dense = CetModel::new(&mut store, d, &cfg, Ablation::NoTransformer, &mut rng).unwrap();
            let got = store.num_scalars(&dense.encoder_ids()) as f64;
            assert!((got - target).abs() <= 0.1 * target, "{got} vs {target}");
        }
    }

    #[test]
    fn combined_loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let model = CetModel::new(&mut store, 4, &tiny(), Ablation::Full, &mut rng).unwrap();
        let x = Tensor::from_rows(&[
            [0.3, -1.2, 0.8, 0.1],
            [1.5, 0.2, -0.4, -0.9],
            [-0.7, 0.9, 0.05, 1.1],
            [0.2, 0.4, -1.3, 0.6],
        ])
        .unwrap();
        let t = [true, false, true, false];
        let y = [1.0, -0.5, 0.3, 2.0];
        let ids: Vec<ParamId> = store.ids().collect();
        let report = grad_check(&mut store, &ids, 1e-6, |g, s| {
            let batch = Batch { x: &x, t: &t, y: &y };
            Ok(model
                .combined_loss(g, s, batch, LossWeights::default(), AdvFlow::Both)?
                .0)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn control_only_flow_leaves_treated_rows_without_balance_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let model = CetModel::new(&mut store, 3, &tiny(), Ablation::Full, &mut rng).unwrap();
        let x = Tensor::from_rows(&[[0.1, 0.2, 0.3], [1.0, -1.0, 0.5], [0.7, 0.7, -0.2]]).unwrap();
        let t = [true, false, false];
        let y = [0.0; 3];
        let weights = LossWeights {
            alpha: 0.0,
            beta: 1.0,
            gamma: 0.0,
        };
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let e = model.embed(&mut g, &store, xv).unwrap();
        let batch = Batch { x: &x, t: &t, y: &y };
        let (loss, _) = model
            .loss_from_embedding(&mut g, &store, e, batch, weights, AdvFlow::ControlOnly)
            .unwrap();
        let grads = g.backward(loss).unwrap();
        let ge = grads.get(e).unwrap();
        assert!(ge.row(0).iter().all(|&v| v == 0.0));
        assert!(ge.row(1).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn all_zero_weights_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let model = CetModel::new(&mut store, 2, &tiny(), Ablation::Full, &mut rng).unwrap();
        let x = Tensor::zeros(&[2, 2]);
        let mut g = Graph::new();
        let w = LossWeights {
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
        };
        let batch = Batch {
            x: &x,
            t: &[true, false],
            y: &[0.0, 0.0],
        };
        assert!(model.combined_loss(&mut g, &store, batch, w, AdvFlow::Both).is_err());
    }
}
