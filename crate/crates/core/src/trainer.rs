//! Joint optimization with alternating critic updates, warm-up, early
//! stopping and ablations.
//!
//! Every epoch walks over stratified minibatches. For each batch the
//! backbone is evaluated once; the critic takes `n_critic` steps on the
//! detached batch embeddings, then backbone, decoder and heads take one
//! Adam step on `alpha L_reco + beta L_balance + gamma L_factual`. The
//! first `warmup_epochs` epochs train the reconstruction term alone and
//! leave the critic untouched.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversary::{clip_weights, critic_loss, AdvFlow, CriticRegularizer};
use crate::dataset::{Dataset, SplitIndices, Standardizer};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::metrics::{evaluate, factual_mse, group_kl_by_arm, EvalReport, Predictions};
use crate::model::{arm_rows, Ablation, Batch, CetModel, LossWeights};
use crate::optim::{Adam, Optimizer, RmsProp};
use crate::param::{parse_checkpoint, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Adam learning rate of backbone, decoder and heads.
    pub lr: f64,
    /// RMSProp learning rate of the critic.
    pub critic_lr: f64,
    pub n_critic: usize,
    pub critic_reg: CriticRegularizer,
    pub seed: u64,
    pub ablation: Ablation,
    pub patience: usize,
    pub warmup_epochs: usize,
    pub adv_flow: AdvFlow,
    pub encoder: EncoderConfig,
    pub standardize_x: bool,
    pub standardize_y: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            epochs: 100,
            batch_size: 64,
            lr: 1e-3,
            critic_lr: 5e-5,
            n_critic: 5,
            critic_reg: CriticRegularizer::WeightClip { clip: 0.01 },
            seed: 0,
            ablation: Ablation::Full,
            patience: 20,
            warmup_epochs: 5,
            adv_flow: AdvFlow::Both,
            encoder: EncoderConfig::default(),
            standardize_x: true,
            standardize_y: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [self.alpha, self.beta, self.gamma];
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("loss weights must be finite and >= 0".into()));
        }
        if weights.iter().all(|&w| w == 0.0) {
            return Err(Error::Config("at least one loss weight must be > 0".into()));
        }
        if self.batch_size < 4 {
            return Err(Error::Config(format!("batch size {} < 4", self.batch_size)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if !(self.lr > 0.0) || !(self.critic_lr > 0.0) {
            return Err(Error::Config("learning rates must be > 0".into()));
        }
        match self.critic_reg {
            CriticRegularizer::WeightClip { clip } if !(clip > 0.0) => {
                return Err(Error::Config("clip bound must be > 0".into()))
            }
            CriticRegularizer::GradientPenalty { weight } if !(weight >= 0.0) => {
                return Err(Error::Config("gradient penalty weight must be >= 0".into()))
            }
            _ => {}
        }
        self.encoder.validate()
    }

    /// Loss weights used in `epoch` (1-based).
    pub fn weights_at(&self, epoch: usize) -> LossWeights {
        let beta = if self.ablation == Ablation::NoDiscriminator {
            0.0
        } else {
            self.beta
        };
        if self.in_warmup(epoch) {
            LossWeights {
                alpha: self.alpha,
                beta: 0.0,
                gamma: 0.0,
            }
        } else {
            LossWeights {
                alpha: self.alpha,
                beta,
                gamma: self.gamma,
            }
        }
    }

    /// Warm-up needs a reconstruction term to train; with `alpha = 0` it is skipped.
    pub fn in_warmup(&self, epoch: usize) -> bool {
        self.alpha > 0.0 && epoch <= self.warmup_epochs
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_reco: f64,
    pub l_p: f64,
    pub wass: f64,
    pub group_kl: f64,
    pub val_mse: f64,
}

/// One record per completed epoch.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainTrace {
    pub records: Vec<EpochRecord>,
}

pub const TRACE_HEADER: &str = "epoch,l_reco,l_p,wass,group_kl,val_mse";

impl TrainTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::from(TRACE_HEADER);
        out.push('\n');
        for r in &self.records {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.epoch, r.l_reco, r.l_p, r.wass, r.group_kl, r.val_mse
            )
            .unwrap();
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(TRACE_HEADER) {
            return Err(Error::Schema(format!("trace header must be {TRACE_HEADER:?}")));
        }
        let mut records = Vec::new();
        for (row, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(Error::Parse {
                    row: row + 1,
                    column: String::new(),
                    message: format!("expected 6 fields, got {}", f.len()),
                });
            }
            let num = |k: usize| {
                f[k].trim().parse::<f64>().map_err(|e| Error::Parse {
                    row: row + 1,
                    column: TRACE_HEADER.split(',').nth(k).unwrap().to_string(),
                    message: e.to_string(),
                })
            };
            records.push(EpochRecord {
                epoch: num(0)? as usize,
                l_reco: num(1)?,
                l_p: num(2)?,
                wass: num(3)?,
                group_kl: num(4)?,
                val_mse: num(5)?,
            });
        }
        Ok(TrainTrace { records })
    }
}

/// A trained network together with the input and outcome scaling it was
/// fitted under.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub config: TrainConfig,
    pub model: CetModel,
    pub store: ParamStore,
    pub x_scaler: Standardizer,
    pub y_mean: f64,
    pub y_sd: f64,
    /// Epoch whose parameters were kept (0 if none after warm-up).
    pub best_epoch: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: TrainedModel,
    pub trace: TrainTrace,
    pub stopped_early: bool,
}

impl TrainedModel {
    /// Potential outcomes for raw covariate rows, in original outcome units.
    pub fn predict(&self, x: &Tensor) -> Result<Predictions> {
        let xs = self.x_scaler.transform(x);
        let (y0, y1) = self.model.predict(&self.store, &xs)?;
        let back = |v: Vec<f64>| v.into_iter().map(|y| y * self.y_sd + self.y_mean).collect();
        Ok(Predictions {
            y0: back(y0),
            y1: back(y1),
        })
    }

    /// Representation of raw covariate rows.
    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        self.model.embed_tensor(&self.store, &self.x_scaler.transform(x))
    }

    /// Metrics on the units `idx` of `ds`, labelled `split`.
    pub fn evaluate(&self, ds: &Dataset, idx: &[usize], split: &str, lambda: f64) -> Result<EvalReport> {
        let sub = ds.subset(idx);
        let pred = self.predict(sub.covariates())?;
        let emb = self.embed(sub.covariates())?;
        let mut report = evaluate(split, &self.config.ablation.to_string(), &sub, &pred, Some(&emb), lambda)?;
        report.config = serde_json::to_value(&self.config).ok();
        Ok(report)
    }

    /// Checkpoint text: every network parameter plus `norm.*` entries
    /// holding the covariate and outcome scaling.
    pub fn to_checkpoint_string(&self) -> String {
        let mut store = self.store.clone();
        store.add("norm.x_mean", Tensor::vector(self.x_scaler.mean.clone()));
        store.add("norm.x_sd", Tensor::vector(self.x_scaler.sd.clone()));
        store.add("norm.y", Tensor::vector(vec![self.y_mean, self.y_sd]));
        store.to_checkpoint_string()
    }

    /// Rebuilds a model from its configuration and checkpoint text.
    pub fn from_checkpoint(config: TrainConfig, n_features: usize, text: &str) -> Result<Self> {
        let map = parse_checkpoint(text)?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = CetModel::new(&mut store, n_features, &config.encoder, config.ablation, &mut rng)?;
        store.load_values(&map)?;
        let get = |name: &str| {
            map.get(name)
                .map(|t| t.data().to_vec())
                .ok_or_else(|| Error::Checkpoint(format!("missing entry {name:?}")))
        };
        let (mean, sd, y) = (get("norm.x_mean")?, get("norm.x_sd")?, get("norm.y")?);
        if mean.len() != n_features || sd.len() != n_features || y.len() != 2 {
            return Err(Error::Checkpoint("normalization entries have wrong sizes".into()));
        }
        Ok(TrainedModel {
            config,
            model,
            store,
            x_scaler: Standardizer { mean, sd },
            y_mean: y[0],
            y_sd: y[1],
            best_epoch: 0,
        })
    }
}

/// Draws indices from one arm without replacement, reshuffling whenever
/// the arm is exhausted.
struct ArmSampler {
    pool: Vec<usize>,
    pos: usize,
}

impl ArmSampler {
    fn new(pool: Vec<usize>, rng: &mut impl Rng) -> Self {
        let mut s = ArmSampler { pool, pos: 0 };
        s.pool.shuffle(rng);
        s
    }

    fn next(&mut self, rng: &mut impl Rng) -> usize {
        if self.pos == self.pool.len() {
            self.pool.shuffle(rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.pool[self.pos - 1]
    }
}

/// Treated units per batch: the arm's share of `batch_size`, kept within
/// `[2, batch_size - 2]`.
pub fn treated_per_batch(batch_size: usize, n_treated: usize, n: usize) -> usize {
    let share = (batch_size as f64 * n_treated as f64 / n as f64).round() as usize;
    share.clamp(2, batch_size - 2)
}

fn select(values: &[f64], idx: &[usize]) -> Vec<f64> {
    idx.iter().map(|&i| values[i]).collect()
}

fn rows_of(x: &Tensor, idx: &[usize]) -> Tensor {
    let d = x.last_dim();
    let mut data = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        data.extend_from_slice(x.row(i));
    }
    Tensor::new(vec![idx.len(), d], data).unwrap()
}

/// Trains on `splits.train`, early-stopping on the factual MSE of
/// `splits.valid` (or of the training split when no validation units exist).
pub fn train(ds: &Dataset, splits: &SplitIndices, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train_idx = &splits.train;
    let t_all = ds.treatment();
    let treated: Vec<usize> = train_idx.iter().copied().filter(|&i| t_all[i]).collect();
    let control: Vec<usize> = train_idx.iter().copied().filter(|&i| !t_all[i]).collect();
    if treated.is_empty() || control.is_empty() {
        return Err(Error::Validation("train split must contain both arms".into()));
    }
    if train_idx.len() < 4 {
        return Err(Error::Sizing(format!("train split has {} units, need >= 4", train_idx.len())));
    }
    let valid_idx = if splits.valid.is_empty() {
        train_idx
    } else {
        &splits.valid
    };

    let x_scaler = if cfg.standardize_x {
        Standardizer::fit(&ds.covariate_rows(train_idx))
    } else {
        Standardizer::identity(ds.d())
    };
    let (y_mean, y_sd) = if cfg.standardize_y {
        let y = select(ds.y_factual(), train_idx);
        let m = y.iter().sum::<f64>() / y.len() as f64;
        let v = y.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / y.len() as f64;
        (m, if v > 0.0 { v.sqrt() } else { 1.0 })
    } else {
        (0.0, 1.0)
    };
    let xs = x_scaler.transform(ds.covariates());
    let ys: Vec<f64> = ds.y_factual().iter().map(|y| (y - y_mean) / y_sd).collect();

    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut batch_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    batch_rng.set_stream(1);
    let mut gp_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    gp_rng.set_stream(2);

    let mut store = ParamStore::new();
    let model = CetModel::new(&mut store, ds.d(), &cfg.encoder, cfg.ablation, &mut init_rng)?;
    let critic_ids = model.critic_ids();
    let mut joint_opt = Adam::new(&store, model.joint_ids(), cfg.lr);
    let mut critic_opt = RmsProp::new(&store, critic_ids.clone(), cfg.critic_lr);
    let clip = match cfg.critic_reg {
        CriticRegularizer::WeightClip { clip } => Some(clip),
        CriticRegularizer::GradientPenalty { .. } => None,
    };
    if let Some(c) = clip {
        clip_weights(&mut store, &critic_ids, c);
    }

    let n_train = train_idx.len();
    let bs = cfg.batch_size.min(n_train);
    let t_per = treated_per_batch(bs, treated.len(), n_train);
    let n_batches = n_train.div_ceil(bs);
    let mut treated_sampler = ArmSampler::new(treated, &mut batch_rng);
    let mut control_sampler = ArmSampler::new(control, &mut batch_rng);

    let x_train = rows_of(&xs, train_idx);
    let t_train: Vec<bool> = train_idx.iter().map(|&i| t_all[i]).collect();
    let (tr_rows, ct_rows) = arm_rows(&t_train);
    let x_valid = rows_of(&xs, valid_idx);
    let t_valid: Vec<bool> = valid_idx.iter().map(|&i| t_all[i]).collect();
    let y_valid = select(ds.y_factual(), valid_idx);

    let mut trace = TrainTrace::default();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut since_best = 0;
    let mut stopped_early = false;

    for epoch in 1..=cfg.epochs {
        let weights = cfg.weights_at(epoch);
        let critic_active = !cfg.in_warmup(epoch) && cfg.n_critic > 0;
        let (mut sum_reco, mut sum_p) = (0.0, 0.0);
        for b in 0..n_batches {
            let mut idx: Vec<usize> = (0..t_per).map(|_| treated_sampler.next(&mut batch_rng)).collect();
            idx.extend((t_per..bs).map(|_| control_sampler.next(&mut batch_rng)));
            let xb = rows_of(&xs, &idx);
            let tb: Vec<bool> = idx.iter().map(|&i| t_all[i]).collect();
            let yb = select(&ys, &idx);

            let mut g = Graph::new();
            let xv = g.constant(xb.clone());
            let emb = model.embed(&mut g, &store, xv)?;

            if critic_active {
                let e = g.value(emb);
                let (et, ec) = (rows_of(e, &(0..t_per).collect::<Vec<_>>()), rows_of(e, &(t_per..bs).collect::<Vec<_>>()));
                for _ in 0..cfg.n_critic {
                    store.zero_grad();
                    let mut cg = Graph::new();
                    let (etv, ecv) = (cg.constant(et.clone()), cg.constant(ec.clone()));
                    let st = model.critic.score(&mut cg, &store, etv)?;
                    let sc = model.critic.score(&mut cg, &store, ecv)?;
                    let (mut loss, _) = critic_loss(&mut cg, st, sc)?;
                    if let CriticRegularizer::GradientPenalty { weight } = cfg.critic_reg {
                        let gp = model.critic.gradient_penalty(&mut cg, &store, &et, &ec, &mut gp_rng)?;
                        let gp = cg.scale(gp, weight);
                        loss = cg.add(loss, gp)?;
                    }
                    if !cg.value(loss).is_finite() {
                        return Err(Error::Numeric(format!(
                            "non-finite critic loss at epoch {epoch}, batch {b}"
                        )));
                    }
                    cg.backward_into(loss, &mut store)?;
                    critic_opt.step(&mut store);
                    if let Some(c) = clip {
                        clip_weights(&mut store, &critic_ids, c);
                    }
                }
            }

            store.zero_grad();
            let batch = Batch { x: &xb, t: &tb, y: &yb };
            let (loss, parts) =
                model.loss_from_embedding(&mut g, &store, emb, batch, weights, cfg.adv_flow)?;
            if !g.value(loss).is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite training loss at epoch {epoch}, batch {b}"
                )));
            }
            g.backward_into(loss, &mut store)?;
            joint_opt.step(&mut store);
            sum_reco += parts.reco;
            sum_p += parts.factual;
        }

        let emb_train = model.embed_tensor(&store, &x_train)?;
        let scores = model.critic.score_tensor(&store, &emb_train)?;
        let mean_of = |rows: &[usize]| rows.iter().map(|&i| scores.data()[i]).sum::<f64>() / rows.len() as f64;
        let wass = mean_of(&tr_rows) - mean_of(&ct_rows);
        let group_kl = if tr_rows.len() >= 2 && ct_rows.len() >= 2 {
            group_kl_by_arm(&emb_train, &t_train)?.0
        } else {
            f64::NAN
        };
        let (y0, y1) = model.predict(&store, &x_valid)?;
        let back = |v: Vec<f64>| -> Vec<f64> { v.into_iter().map(|y| y * y_sd + y_mean).collect() };
        let val_mse = factual_mse(&back(y0), &back(y1), &t_valid, &y_valid)?;
        if !val_mse.is_finite() {
            return Err(Error::Numeric(format!("non-finite validation error at epoch {epoch}")));
        }
        trace.records.push(EpochRecord {
            epoch,
            l_reco: sum_reco / n_batches as f64,
            l_p: sum_p / n_batches as f64,
            wass,
            group_kl,
            val_mse,
        });

        if cfg.in_warmup(epoch) {
            continue;
        }
        if best.as_ref().is_none_or(|(b, _, _)| val_mse < *b) {
            best = Some((val_mse, epoch, store.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                stopped_early = epoch < cfg.epochs;
                break;
            }
        }
    }

    let (store, best_epoch) = match best {
        Some((_, epoch, s)) => (s, epoch),
        None => (store, 0),
    };
    Ok(TrainOutcome {
        model: TrainedModel {
            config: cfg.clone(),
            model,
            store,
            x_scaler,
            y_mean,
            y_sd,
            best_epoch,
        },
        trace,
        stopped_early,
    })
}

/// One arm of an ablation study.
#[derive(Debug, Clone)]
pub struct AblationRun {
    pub ablation: Ablation,
    pub outcome: TrainOutcome,
    pub in_sample: EvalReport,
    pub out_sample: EvalReport,
}

/// Trains the full model and both ablations on identical splits and
/// configuration, reporting each on the train and test splits.
pub fn ablate(ds: &Dataset, splits: &SplitIndices, cfg: &TrainConfig) -> Result<Vec<AblationRun>> {
    [Ablation::Full, Ablation::NoTransformer, Ablation::NoDiscriminator]
        .into_iter()
        .map(|ablation| {
            let cfg = TrainConfig {
                ablation,
                ..cfg.clone()
            };
            let outcome = train(ds, splits, &cfg)?;
            let in_sample = outcome.model.evaluate(ds, &splits.train, "in", 0.0)?;
            let test = if splits.test.is_empty() {
                &splits.train
            } else {
                &splits.test
            };
            let out_sample = outcome.model.evaluate(ds, test, "out", 0.0)?;
            Ok(AblationRun {
                ablation,
                outcome,
                in_sample,
                out_sample,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, split, SplitRatio, SynthConfig};
    use crate::encoder::Pooling;

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 8,
            batch_size: 16,
            warmup_epochs: 2,
            encoder: EncoderConfig {
                n_blocks: 1,
                n_heads: 2,
                d_model: 8,
                d_ff: 16,
                pooling: Pooling::Mean,
            },
            ..Default::default()
        }
    }

    fn data() -> (Dataset, SplitIndices) {
        let ds = generate_synthetic(&SynthConfig {
            n: 120,
            d: 4,
            bias_strength: 1.0,
            ..Default::default()
        })
        .unwrap();
        let s = split(&ds, SplitRatio::IHDP, 0).unwrap();
        (ds, s)
    }

    #[test]
    fn stratified_share() {
        assert_eq!(treated_per_batch(64, 10, 1000), 2);
        assert_eq!(treated_per_batch(64, 990, 1000), 62);
        assert_eq!(treated_per_batch(64, 500, 1000), 32);
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig {
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = TrainConfig {
            batch_size: 3,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn warmup_weights() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.weights_at(5).beta, 0.0);
        assert_eq!(cfg.weights_at(5).gamma, 0.0);
        assert_eq!(cfg.weights_at(6), LossWeights::default());
    }

    #[test]
    fn trace_roundtrip_and_clip_invariant() {
        let (ds, s) = data();
        let out = train(&ds, &s, &small_cfg()).unwrap();
        assert_eq!(out.trace.len(), 8);
        let csv = out.trace.to_csv_string();
        assert_eq!(TrainTrace::parse_csv(&csv).unwrap(), out.trace);
        for id in out.model.model.critic_ids() {
            assert!(out.model.store.get(id).tensor.max_abs() <= 0.01);
        }
    }

    #[test]
    fn checkpoint_roundtrip_predicts_identically() {
        let (ds, s) = data();
        let out = train(&ds, &s, &small_cfg()).unwrap();
        let text = out.model.to_checkpoint_string();
        let back = TrainedModel::from_checkpoint(small_cfg(), ds.d(), &text).unwrap();
        assert_eq!(
            out.model.predict(ds.covariates()).unwrap(),
            back.predict(ds.covariates()).unwrap()
        );
    }

    #[test]
    fn one_armed_train_split_rejected() {
        let (ds, _) = data();
        let treated = ds.treated_indices();
        let s = SplitIndices {
            train: treated,
            valid: Vec::new(),
            test: Vec::new(),
        };
        assert!(matches!(train(&ds, &s, &small_cfg()), Err(Error::Validation(_))));
    }
}
