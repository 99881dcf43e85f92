//! Acceptance suite. Each test prints one `PASS`/`FAIL` line to the real
//! stdout (bypassing the test harness capture) and then asserts.

use std::io::Write;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use cetransformer::adversary::AdvFlow;
use cetransformer::baselines::ols_lr2;
use cetransformer::dataset::{self, Dataset, EffectFn, SplitIndices, SplitRatio, SynthConfig};
use cetransformer::encoder::{attention_2d, EncoderConfig, Pooling};
use cetransformer::gradcheck::grad_check;
use cetransformer::metrics::{self, minmax_scale_jointly, policy_risk_true};
use cetransformer::model::{Ablation, Batch, CetModel, LossWeights};
use cetransformer::param::{ParamId, ParamStore};
use cetransformer::tensor::Tensor;
use cetransformer::trainer::{train, TrainConfig, TrainOutcome};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

const SEEDS: [u64; 3] = [0, 1, 2];

/// Balance weight of the "full" model in the synthetic criteria. With
/// weight clipping at 0.01 the critic scores are about 1e-2 in scale, so
/// the balance term needs a larger weight than the reconstruction and
/// factual terms to move the representation.
const FULL_BETA: f64 = 100.0;

fn report(id: u32, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    writeln!(out, "criterion {id} {verdict} {name}: {detail}").unwrap();
    out.flush().unwrap();
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn randn(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
    let data = (0..n * d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(vec![n, d], data).unwrap()
}

#[test]
fn criterion_1_gradient_integrity() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cfg = EncoderConfig {
        n_blocks: 1,
        n_heads: 2,
        d_model: 4,
        d_ff: 8,
        pooling: Pooling::Mean,
    };
    let mut store = ParamStore::new();
    let model = CetModel::new(&mut store, 4, &cfg, Ablation::Full, &mut rng).unwrap();
    let x = randn(&mut rng, 4, 4);
    let t = [true, false, false, true];
    let y: Vec<f64> = (0..4).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let ids: Vec<ParamId> = store.ids().collect();
    let check = grad_check(&mut store, &ids, 1e-6, |g, s| {
        let batch = Batch { x: &x, t: &t, y: &y };
        Ok(model
            .combined_loss(g, s, batch, LossWeights::default(), AdvFlow::Both)?
            .0)
    })
    .unwrap();
    let elapsed = start.elapsed();
    let pass = check.max_rel_error < 1e-4 && elapsed < Duration::from_secs(10);
    report(
        1,
        "gradient integrity",
        pass,
        &format!(
            "max rel error {:.2e} over {} entries ({} inactive), {:.2}s",
            check.max_rel_error,
            check.checked,
            check.skipped,
            elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_2_attention_correctness() {
    let q = Tensor::from_rows(&[[1.0], [0.0]]).unwrap();
    let k = Tensor::from_rows(&[[1.0], [0.0]]).unwrap();
    let v = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
    let (_, w) = attention_2d(&q, &k, &v).unwrap();
    let hand_ok = (w.row(0)[0] - 0.7311).abs() < 1e-4 && (w.row(0)[1] - 0.2689).abs() < 1e-4;

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let s = rng.random_range(1..10);
        let dk = rng.random_range(1..9);
        let scale = rng.random_range(0.1..10.0);
        let q = randn(&mut rng, s, dk).map(|x| x * scale);
        let k = randn(&mut rng, s, dk);
        let v = randn(&mut rng, s, dk);
        let (_, w) = attention_2d(&q, &k, &v).unwrap();
        for i in 0..s {
            worst = worst.max((w.row(i).iter().sum::<f64>() - 1.0).abs());
        }
    }
    let pass = hand_ok && worst < 1e-6;
    report(
        2,
        "attention correctness",
        pass,
        &format!(
            "weights [{:.4}, {:.4}], worst row-sum error {worst:.1e} over 100 configs",
            w.row(0)[0],
            w.row(0)[1]
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_3_oracle_metrics() {
    let ds = dataset::generate_synthetic(&SynthConfig {
        n: 50,
        d: 5,
        bias_strength: 1.0,
        effect: EffectFn::Nonlinear,
        noise_sd: 0.0,
        seed: 3,
    })
    .unwrap();
    let (mu0, mu1) = (ds.mu0().unwrap(), ds.mu1().unwrap());
    let truth = metrics::ite_true(&ds).unwrap();
    let oracle_ite: Vec<f64> = mu1.iter().zip(mu0).map(|(a, b)| a - b).collect();
    let pehe = metrics::sqrt_pehe(&oracle_ite, &truth).unwrap();

    let (s0, s1) = minmax_scale_jointly(mu0, mu1);
    let oracle_policy: Vec<bool> = oracle_ite.iter().map(|&v| v > 0.0).collect();
    let oracle_risk = policy_risk_true(&oracle_policy, &s0, &s1).unwrap();

    // The value of a policy is a sum over units, so enumerating every
    // assignment of each block of 10 units covers all 2^50 policies.
    let n = ds.n();
    let mut best_value = 0.0;
    for block in (0..n).collect::<Vec<_>>().chunks(10) {
        let mut block_best = f64::NEG_INFINITY;
        for mask in 0u32..(1 << block.len()) {
            let v: f64 = block
                .iter()
                .enumerate()
                .map(|(j, &i)| if mask >> j & 1 == 1 { s1[i] } else { s0[i] })
                .sum();
            block_best = block_best.max(v);
        }
        best_value += block_best;
    }
    let brute = 1.0 - best_value / n as f64;
    let pass = pehe == 0.0 && (oracle_risk - brute).abs() < 1e-12;
    report(
        3,
        "oracle metrics",
        pass,
        &format!("sqrt_pehe {pehe}, oracle policy risk {oracle_risk:.6}, brute-force optimum {brute:.6}"),
    );
    assert!(pass);
}

#[test]
fn criterion_4_exact_baseline_recovery() {
    let (n, d) = (200, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = randn(&mut rng, n, d);
    let a: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
    let b: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
    let dot = |w: &[f64], r: &[f64]| w.iter().zip(r).map(|(p, q)| p * q).sum::<f64>();
    let mu0: Vec<f64> = (0..n).map(|i| 0.5 + dot(&a, x.row(i))).collect();
    let mu1: Vec<f64> = (0..n).map(|i| 2.0 + dot(&b, x.row(i))).collect();
    let t: Vec<bool> = (0..n).map(|i| x.row(i)[0] + 0.3 * rng.sample::<f64, _>(StandardNormal) > 0.0).collect();
    let yf: Vec<f64> = (0..n).map(|i| if t[i] { mu1[i] } else { mu0[i] }).collect();
    let ds = Dataset::new(x, t, yf, None, Some(mu0), Some(mu1), Vec::new()).unwrap();
    let splits = SplitIndices {
        train: (0..n).collect(),
        valid: Vec::new(),
        test: Vec::new(),
    };
    let fit = ols_lr2(&ds, &splits).unwrap();
    let pehe = metrics::sqrt_pehe(&fit.predictions.ite(), &metrics::ite_true(&ds).unwrap()).unwrap();
    let pass = pehe < 1e-6;
    report(4, "exact baseline recovery", pass, &format!("ols_lr2 sqrt_pehe {pehe:.2e}"));
    assert!(pass);
}

fn acceptance_config(seed: u64, ablation: Ablation) -> TrainConfig {
    TrainConfig {
        beta: FULL_BETA,
        seed,
        ablation,
        ..TrainConfig::default()
    }
}

struct SynthRun {
    ablation: Ablation,
    outcome: TrainOutcome,
    /// Group-KL of the returned model's train-split embeddings.
    final_kl: f64,
    pehe_out: f64,
    elapsed: Duration,
}

struct SeedRuns {
    seed: u64,
    runs: Vec<SynthRun>,
}

impl SeedRuns {
    fn get(&self, a: Ablation) -> &SynthRun {
        self.runs.iter().find(|r| r.ablation == a).unwrap()
    }
}

fn biased_family(seed: u64) -> (Dataset, SplitIndices) {
    let ds = dataset::generate_synthetic(&SynthConfig {
        n: 2000,
        d: 10,
        bias_strength: 3.0,
        effect: EffectFn::Nonlinear,
        noise_sd: 0.1,
        seed,
    })
    .unwrap();
    let splits = dataset::split(&ds, SplitRatio::IHDP, seed).unwrap();
    (ds, splits)
}

/// Full model and both ablations on the bias-3 synthetic family, trained
/// once and shared by the balance and ablation criteria.
fn synthetic_runs() -> &'static [SeedRuns] {
    static RUNS: OnceLock<Vec<SeedRuns>> = OnceLock::new();
    RUNS.get_or_init(|| {
        let jobs: Vec<(u64, Ablation)> = SEEDS
            .iter()
            .flat_map(|&s| {
                [Ablation::Full, Ablation::NoDiscriminator, Ablation::NoTransformer].map(|a| (s, a))
            })
            .collect();
        let done: Vec<(u64, SynthRun)> = jobs
            .into_par_iter()
            .map(|(seed, ablation)| {
                let (ds, splits) = biased_family(seed);
                let start = Instant::now();
                let outcome = train(&ds, &splits, &acceptance_config(seed, ablation)).unwrap();
                let elapsed = start.elapsed();
                let in_sample = outcome.model.evaluate(&ds, &splits.train, "in", 0.0).unwrap();
                let out_sample = outcome.model.evaluate(&ds, &splits.test, "out", 0.0).unwrap();
                let run = SynthRun {
                    ablation,
                    final_kl: in_sample.group_kl.unwrap(),
                    pehe_out: out_sample.sqrt_pehe.unwrap(),
                    outcome,
                    elapsed,
                };
                (seed, run)
            })
            .collect();
        let mut grouped: Vec<SeedRuns> = SEEDS
            .iter()
            .map(|&seed| SeedRuns { seed, runs: Vec::new() })
            .collect();
        for (seed, run) in done {
            grouped.iter_mut().find(|g| g.seed == seed).unwrap().runs.push(run);
        }
        grouped
    })
}

#[test]
fn criterion_5_balance_property() {
    let runs = synthetic_runs();
    let mut vs_initial = Vec::new();
    let mut vs_unbalanced = Vec::new();
    let mut detail = Vec::new();
    let mut slowest = Duration::ZERO;
    for s in runs {
        let full = s.get(Ablation::Full);
        let free = s.get(Ablation::NoDiscriminator);
        let kl1 = full.outcome.trace.records[0].group_kl;
        vs_initial.push(full.final_kl / kl1);
        vs_unbalanced.push(full.final_kl / free.final_kl);
        slowest = slowest.max(full.elapsed);
        detail.push(format!(
            "seed {}: epoch-1 {kl1:.3} final {:.3} beta=0 final {:.3}",
            s.seed, full.final_kl, free.final_kl
        ));
    }
    let (r1, r2) = (median(vs_initial), median(vs_unbalanced));
    let pass = r1 < 0.25 && r2 < 0.5;
    report(
        5,
        "balance property",
        pass,
        &format!(
            "median final/epoch-1 {r1:.3} (< 0.25), median final/beta=0 {r2:.3} (< 0.5), slowest full run {:.0}s [{}]",
            slowest.as_secs_f64(),
            detail.join("; ")
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_6_ablation_ordering() {
    let runs = synthetic_runs();
    let med = |a: Ablation| median(runs.iter().map(|s| s.get(a).pehe_out).collect());
    let (full, no_tr, no_disc) = (
        med(Ablation::Full),
        med(Ablation::NoTransformer),
        med(Ablation::NoDiscriminator),
    );
    let pass = full <= no_tr && no_tr < no_disc;
    let per_seed: Vec<String> = runs
        .iter()
        .map(|s| {
            format!(
                "seed {}: {:.3}/{:.3}/{:.3}",
                s.seed,
                s.get(Ablation::Full).pehe_out,
                s.get(Ablation::NoTransformer).pehe_out,
                s.get(Ablation::NoDiscriminator).pehe_out
            )
        })
        .collect();
    report(
        6,
        "ablation ordering",
        pass,
        &format!(
            "median out-of-sample sqrt_pehe full {full:.3}, no_transformer {no_tr:.3}, no_discriminator {no_disc:.3} [{}]",
            per_seed.join("; ")
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_7_effect_recovery() {
    let ates: Vec<f64> = SEEDS
        .par_iter()
        .map(|&seed| {
            let ds = dataset::generate_synthetic(&SynthConfig {
                n: 2000,
                d: 10,
                bias_strength: 2.0,
                effect: EffectFn::Constant { tau: 3.0 },
                noise_sd: 0.5,
                seed: 100 + seed,
            })
            .unwrap();
            let splits = dataset::split(&ds, SplitRatio::IHDP, seed).unwrap();
            let out = train(&ds, &splits, &acceptance_config(seed, Ablation::Full)).unwrap();
            let pred = out.model.predict(ds.covariates()).unwrap();
            pred.ite().iter().sum::<f64>() / ds.n() as f64
        })
        .collect();
    let ate = median(ates.clone());
    let pass = (ate - 3.0).abs() < 0.3;
    report(
        7,
        "effect recovery",
        pass,
        &format!("median ATE {ate:.3} (target 3 +/- 0.3), per seed {ates:.3?}"),
    );
    assert!(pass);
}

#[test]
fn criterion_8_determinism() {
    let ds = dataset::generate_synthetic(&SynthConfig {
        n: 300,
        d: 5,
        bias_strength: 2.0,
        seed: 8,
        ..SynthConfig::default()
    })
    .unwrap();
    let splits = dataset::split(&ds, SplitRatio::IHDP, 8).unwrap();
    let cfg = TrainConfig {
        epochs: 12,
        seed: 8,
        ..TrainConfig::default()
    };
    let a = train(&ds, &splits, &cfg).unwrap().trace.to_csv_string();
    let b = train(&ds, &splits, &cfg).unwrap().trace.to_csv_string();
    let pass = a == b;
    report(
        8,
        "determinism",
        pass,
        &format!("two runs produced {} and {} trace bytes, identical: {pass}", a.len(), b.len()),
    );
    assert!(pass);
}

/// Set `CET_IHDP_CSV` to a realization in the standard column layout
/// (`t,yf,ycf,mu0,mu1,x0..`) to run this check.
#[test]
fn criterion_9_ihdp_best_effort() {
    let Some(path) = std::env::var_os("CET_IHDP_CSV") else {
        let mut out = std::io::stdout().lock();
        writeln!(out, "criterion 9 SKIP ihdp best effort: CET_IHDP_CSV not set").unwrap();
        return;
    };
    let ds = dataset::load_csv(path.as_ref(), &dataset::CsvSchema::default()).unwrap();
    let splits = dataset::split(&ds, SplitRatio::IHDP, 0).unwrap();
    let out = train(&ds, &splits, &acceptance_config(0, Ablation::Full)).unwrap();
    let r = out.model.evaluate(&ds, &splits.test, "out", 0.0).unwrap();
    let pehe = r.sqrt_pehe.unwrap();
    let pass = pehe <= 1.5;
    report(9, "ihdp best effort", pass, &format!("out-of-sample sqrt_pehe {pehe:.3} (<= 1.5)"));
    assert!(pass);
}
