//! `cetx`: generate synthetic data, train, evaluate, ablate and report.
//!
//! Every command writes a `manifest.json` recording its resolved
//! arguments and the content hashes of its inputs; `cetx replay` re-runs a
//! manifest.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::Result;
use cetransformer::adversary::{AdvFlow, CriticRegularizer};
use cetransformer::dataset::{CsvSchema, EffectFn, SplitRatio};
use cetransformer::encoder::Pooling;
use cetransformer::model::Ablation;
use cetransformer::trainer::TrainConfig;
use cetransformer::Error;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

pub mod eval;
pub mod manifest;
pub mod report;
pub mod synth;
pub mod train;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "cetx", version, about = "Treatment-effect experiments with a transformer encoder")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    /// Write a synthetic dataset with known potential outcomes.
    Synth(SynthArgs),
    /// Train a model (one run directory per seed).
    Train(TrainArgs),
    /// Evaluate a trained run in-sample and out-of-sample.
    Eval(EvalArgs),
    /// Train the full model and both ablations on identical splits.
    Ablate(AblateArgs),
    /// Grid over the loss weights.
    Sweep(SweepArgs),
    /// Aggregate run directories into comparison tables.
    Report(ReportArgs),
    /// Re-run the command recorded in a manifest.
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, default_value_t = 10)]
    pub d: usize,
    /// Selection strength; 0 gives a randomized trial.
    #[arg(long, default_value_t = 0.0)]
    pub bias: f64,
    /// constant, linear or nonlinear.
    #[arg(long, default_value = "nonlinear")]
    pub effect: EffectFn,
    /// Effect size for `--effect constant`.
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Column names of the input CSV.
#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SchemaArgs {
    #[arg(long, default_value = "t")]
    pub t_col: String,
    #[arg(long, default_value = "yf")]
    pub yf_col: String,
    #[arg(long, default_value = "ycf")]
    pub ycf_col: String,
    #[arg(long, default_value = "mu0")]
    pub mu0_col: String,
    #[arg(long, default_value = "mu1")]
    pub mu1_col: String,
    /// Comma-separated covariate columns (default: all other columns).
    #[arg(long, value_delimiter = ',')]
    pub covariates: Option<Vec<String>>,
}

impl SchemaArgs {
    pub fn schema(&self) -> CsvSchema {
        CsvSchema {
            treatment: self.t_col.clone(),
            factual: self.yf_col.clone(),
            counterfactual: self.ycf_col.clone(),
            mu0: self.mu0_col.clone(),
            mu1: self.mu1_col.clone(),
            covariates: self.covariates.clone(),
        }
    }
}

/// Training settings; each flag overrides the config file.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct TrainOverrides {
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub critic_lr: Option<f64>,
    #[arg(long)]
    pub n_critic: Option<usize>,
    /// Weight-clipping bound of the critic.
    #[arg(long, conflicts_with = "gp_weight")]
    pub clip: Option<f64>,
    /// Use a gradient penalty with this weight instead of clipping.
    #[arg(long)]
    pub gp_weight: Option<f64>,
    /// full, no_transformer or no_discriminator.
    #[arg(long)]
    pub ablation: Option<Ablation>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    /// both or control_only.
    #[arg(long)]
    pub adv_flow: Option<AdvFlow>,
    #[arg(long)]
    pub n_blocks: Option<usize>,
    #[arg(long)]
    pub n_heads: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub d_ff: Option<usize>,
    /// mean or cls_token.
    #[arg(long)]
    pub pooling: Option<Pooling>,
    #[arg(long)]
    pub standardize_x: Option<bool>,
    #[arg(long)]
    pub standardize_y: Option<bool>,
}

impl TrainOverrides {
    pub fn apply(&self, cfg: &mut TrainConfig) {
        macro_rules! set {
            ($($field:ident => $target:expr),* $(,)?) => {
                $(if let Some(v) = self.$field { $target = v; })*
            };
        }
        set!(
            alpha => cfg.alpha,
            beta => cfg.beta,
            gamma => cfg.gamma,
            epochs => cfg.epochs,
            batch_size => cfg.batch_size,
            lr => cfg.lr,
            critic_lr => cfg.critic_lr,
            n_critic => cfg.n_critic,
            ablation => cfg.ablation,
            patience => cfg.patience,
            warmup => cfg.warmup_epochs,
            adv_flow => cfg.adv_flow,
            n_blocks => cfg.encoder.n_blocks,
            n_heads => cfg.encoder.n_heads,
            d_model => cfg.encoder.d_model,
            d_ff => cfg.encoder.d_ff,
            pooling => cfg.encoder.pooling,
            standardize_x => cfg.standardize_x,
            standardize_y => cfg.standardize_y,
        );
        if let Some(clip) = self.clip {
            cfg.critic_reg = CriticRegularizer::WeightClip { clip };
        }
        if let Some(weight) = self.gp_weight {
            cfg.critic_reg = CriticRegularizer::GradientPenalty { weight };
        }
    }
}

/// Seeds as `a..b` (inclusive) or a comma list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedList(pub Vec<u64>);

impl FromStr for SeedList {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        let bad = |e: std::num::ParseIntError| Error::Config(format!("bad seed list {s:?}: {e}"));
        let seeds = if let Some((a, b)) = s.split_once("..") {
            let (a, b): (u64, u64) = (a.trim().parse().map_err(bad)?, b.trim().parse().map_err(bad)?);
            if a > b {
                return Err(Error::Config(format!("empty seed range {s:?}")));
            }
            (a..=b).collect()
        } else {
            s.split(',')
                .map(|p| p.trim().parse::<u64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(bad)?
        };
        Ok(SeedList(seeds))
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// TOML file with training settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: TrainOverrides,
    #[arg(long, conflicts_with = "seeds")]
    pub seed: Option<u64>,
    /// Several seeds, e.g. `1..10` or `1,4,7`; one sub-directory per seed.
    #[arg(long)]
    pub seeds: Option<SeedList>,
    /// Worker processes for multi-seed runs.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Train/validation/test percentages.
    #[arg(long, default_value = "61/27/10")]
    pub split: SplitRatio,
    /// Seed of the data split (default: the training seed).
    #[arg(long)]
    pub split_seed: Option<u64>,
    #[command(flatten)]
    pub schema: SchemaArgs,
    #[arg(long)]
    pub out: PathBuf,
}

impl TrainArgs {
    pub fn seed_list(&self) -> Vec<u64> {
        match (&self.seeds, self.seed) {
            (Some(s), _) => s.0.clone(),
            (None, Some(s)) => vec![s],
            (None, None) => vec![0],
        }
    }

    /// Config file (if any) with flag overrides and `seed` applied.
    pub fn resolve_config(&self, seed: u64) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = manifest::read_text(path)?;
                toml::from_str(&text).map_err(|e| {
                    Error::Config(format!("{}: {}", path.display(), e.message()))
                })?
            }
            None => TrainConfig::default(),
        };
        self.overrides.apply(&mut cfg);
        cfg.seed = seed;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct EvalArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    pub run: PathBuf,
    /// Also score OLS/LR1, OLS/LR2 and k-NN.
    #[arg(long)]
    pub with_baselines: bool,
    /// Also score the true potential outcomes.
    #[arg(long)]
    pub oracle: bool,
    /// Policy threshold: treat when the predicted effect exceeds it.
    #[arg(long, default_value_t = 0.0)]
    pub lambda: f64,
    /// Neighbors for the k-NN baseline.
    #[arg(long, default_value_t = cetransformer::baselines::DEFAULT_K)]
    pub k: usize,
    /// Output directory (default: `<run>/eval`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct AblateArgs {
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SweepArgs {
    #[command(flatten)]
    pub train: TrainArgs,
    /// Comma-separated alpha values.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    pub alphas: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0,1")]
    pub betas: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "1")]
    pub gammas: Vec<f64>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ReportArgs {
    /// Run directories to compare.
    #[arg(long, num_args = 1.., required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Write outputs here instead of the recorded location.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Command {
    /// Redirects the command's output location.
    pub fn set_out(&mut self, out: PathBuf) {
        match self {
            Command::Synth(a) => a.out = out,
            Command::Train(a) => a.out = out,
            Command::Ablate(a) => a.train.out = out,
            Command::Sweep(a) => a.train.out = out,
            Command::Eval(a) => a.out = Some(out),
            Command::Report(a) => a.out = out,
            Command::Replay(a) => a.out = Some(out),
        }
    }
}

pub fn run(command: &Command) -> Result<()> {
    match command {
        Command::Synth(a) => synth::run(a),
        Command::Train(a) => train::run(a),
        Command::Eval(a) => eval::run(a),
        Command::Ablate(a) => train::ablate(a),
        Command::Sweep(a) => train::sweep(a),
        Command::Report(a) => report::run(a),
        Command::Replay(a) => replay(a),
    }
}

fn replay(args: &ReplayArgs) -> Result<()> {
    let m = manifest::RunManifest::load(&args.manifest)?;
    m.verify_inputs()?;
    let mut command = m.command.clone();
    if let Command::Replay(_) = command {
        return Err(Error::Config("a manifest cannot replay another replay".into()).into());
    }
    if let Some(out) = &args.out {
        command.set_out(out.clone());
    }
    run(&command)
}

/// Process exit status for an error: configuration problems, data and
/// file problems, and numeric failures get distinct codes.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(w) = cause.downcast_ref::<train::WorkerFailed>() {
            return w.code.unwrap_or(1);
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_) => EXIT_CONFIG,
                Error::Numeric(_) | Error::Shape { .. } => EXIT_NUMERIC,
                _ => EXIT_DATA,
            };
        }
        if cause.is::<serde_json::Error>() || cause.is::<std::io::Error>() {
            return EXIT_DATA;
        }
    }
    1
}

/// `dir/seed-<s>` for multi-seed runs, `dir` otherwise.
pub fn seed_dir(dir: &Path, seed: u64, multi: bool) -> PathBuf {
    if multi {
        dir.join(format!("seed-{seed}"))
    } else {
        dir.to_path_buf()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_lists() {
        assert_eq!("1..3".parse::<SeedList>().unwrap().0, vec![1, 2, 3]);
        assert_eq!("4,2".parse::<SeedList>().unwrap().0, vec![4, 2]);
        assert!("3..1".parse::<SeedList>().is_err());
        assert!("x".parse::<SeedList>().is_err());
    }

    #[test]
    fn overrides_take_precedence() {
        let mut cfg = TrainConfig::default();
        TrainOverrides {
            beta: Some(7.0),
            gp_weight: Some(10.0),
            d_model: Some(16),
            ..Default::default()
        }
        .apply(&mut cfg);
        assert_eq!(cfg.beta, 7.0);
        assert_eq!(cfg.encoder.d_model, 16);
        assert_eq!(cfg.critic_reg, CriticRegularizer::GradientPenalty { weight: 10.0 });
    }

    #[test]
    fn config_errors_map_to_their_exit_code() {
        let e: anyhow::Error = Error::Config("x".into()).into();
        assert_eq!(exit_code(&e), EXIT_CONFIG);
        let e: anyhow::Error = Error::Numeric("x".into()).into();
        assert_eq!(exit_code(&e), EXIT_NUMERIC);
        let e: anyhow::Error = Error::Sizing("x".into()).into();
        assert_eq!(exit_code(&e), EXIT_DATA);
    }
}
