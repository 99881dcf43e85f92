//! `cetx train`, `cetx ablate` and `cetx sweep`.

use std::path::{Path, PathBuf};
use std::process::{Child, Command as Process};

use anyhow::{Context, Result};
use cetransformer::dataset::{load_csv, split};
use cetransformer::metrics::EvalReport;
use cetransformer::model::Ablation;
use cetransformer::trainer::train;

use crate::manifest::{create_dir, write_json, write_text, RunManifest};
use crate::report::{collect_run, summary_table, RunReports};
use crate::{seed_dir, AblateArgs, Command, SweepArgs, TrainArgs};

pub const CHECKPOINT_FILE: &str = "checkpoint.txt";
pub const TRACE_FILE: &str = "trace.csv";
pub const REPORT_FILE: &str = "report.json";
pub const SPLITS_FILE: &str = "splits.json";
pub const CONFIG_FILE: &str = "config.toml";

/// A worker process exited unsuccessfully.
#[derive(Debug)]
pub struct WorkerFailed {
    pub seed: u64,
    pub code: Option<i32>,
}

impl std::fmt::Display for WorkerFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.code {
            Some(c) => write!(f, "run for seed {} exited with status {c}", self.seed),
            None => write!(f, "run for seed {} was terminated", self.seed),
        }
    }
}

impl std::error::Error for WorkerFailed {}

pub fn run(args: &TrainArgs) -> Result<()> {
    let seeds = args.seed_list();
    if args.seeds.is_none() {
        return train_seed(args, seeds[0], &args.out);
    }
    create_dir(&args.out)?;
    let jobs = args
        .jobs
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .clamp(1, seeds.len());
    let single = |seed: u64| TrainArgs {
        seed: Some(seed),
        seeds: None,
        jobs: None,
        out: seed_dir(&args.out, seed, true),
        ..args.clone()
    };
    if jobs == 1 {
        for &seed in &seeds {
            let a = single(seed);
            train_seed(&a, seed, &a.out)?;
        }
    } else {
        run_workers(&seeds, jobs, |seed| Command::Train(single(seed)))?;
    }

    let mut manifest = RunManifest::new(Command::Train(args.clone()));
    manifest.seeds = seeds.clone();
    manifest.config = Some(args.resolve_config(seeds[0])?);
    add_inputs(&mut manifest, args)?;
    manifest.outputs = seeds.iter().map(|&s| seed_dir(&args.out, s, true)).collect();
    manifest.save(&args.out)?;

    let run = collect_run(&args.out)?;
    let table = summary_table(std::slice::from_ref(&run));
    write_text(&args.out.join("summary.md"), &table)?;
    print!("{table}");
    Ok(())
}

/// Runs one `cetx replay` worker per seed, at most `jobs` at a time, and
/// waits for them in seed order.
fn run_workers(seeds: &[u64], jobs: usize, command_for: impl Fn(u64) -> Command) -> Result<()> {
    let exe = std::env::current_exe().context("locating the cetx executable")?;
    let mut running: Vec<(u64, Child)> = Vec::new();
    let mut pending = seeds.iter().copied();
    loop {
        while running.len() < jobs {
            let Some(seed) = pending.next() else { break };
            let command = command_for(seed);
            let Command::Train(a) = &command else { unreachable!() };
            create_dir(&a.out)?;
            let request = a.out.join("request.json");
            write_json(&request, &RunManifest::new(command.clone()))?;
            let child = Process::new(&exe)
                .arg("replay")
                .arg("--manifest")
                .arg(&request)
                .spawn()
                .with_context(|| format!("starting worker for seed {seed}"))?;
            running.push((seed, child));
        }
        if running.is_empty() {
            return Ok(());
        }
        let (seed, mut child) = running.remove(0);
        let status = child.wait()?;
        if !status.success() {
            for (_, mut c) in running {
                let _ = c.kill();
            }
            return Err(WorkerFailed {
                seed,
                code: status.code(),
            }
            .into());
        }
    }
}

fn add_inputs(manifest: &mut RunManifest, args: &TrainArgs) -> Result<()> {
    manifest.add_input(&args.data)?;
    if let Some(c) = &args.config {
        manifest.add_input(c)?;
    }
    Ok(())
}

/// Trains one seed into `out`.
pub fn train_seed(args: &TrainArgs, seed: u64, out: &Path) -> Result<()> {
    let cfg = args.resolve_config(seed)?;
    let ds = load_csv(&args.data, &args.schema.schema())?;
    let splits = split(&ds, args.split, args.split_seed.unwrap_or(seed))?;
    let outcome = train(&ds, &splits, &cfg)?;
    let model = &outcome.model;
    let test = if splits.test.is_empty() { &splits.train } else { &splits.test };
    let reports: Vec<EvalReport> = vec![
        model.evaluate(&ds, &splits.train, "in", 0.0)?,
        model.evaluate(&ds, test, "out", 0.0)?,
    ];

    create_dir(out)?;
    write_text(&out.join(CHECKPOINT_FILE), &model.to_checkpoint_string())?;
    write_text(&out.join(TRACE_FILE), &outcome.trace.to_csv_string())?;
    write_json(&out.join(SPLITS_FILE), &splits)?;
    write_text(&out.join(CONFIG_FILE), &toml::to_string(&cfg)?)?;
    write_json(&out.join(REPORT_FILE), &reports)?;

    let recorded = TrainArgs {
        seed: Some(seed),
        seeds: None,
        jobs: None,
        out: out.to_path_buf(),
        ..args.clone()
    };
    let mut manifest = RunManifest::new(Command::Train(recorded));
    manifest.config = Some(cfg);
    manifest.seeds = vec![seed];
    add_inputs(&mut manifest, args)?;
    manifest.outputs = [CHECKPOINT_FILE, TRACE_FILE, SPLITS_FILE, CONFIG_FILE, REPORT_FILE]
        .iter()
        .map(|f| out.join(f))
        .collect();
    manifest.save(out)?;

    println!(
        "seed {seed}: {} epochs (best {}{}) -> {}",
        outcome.trace.len(),
        model.best_epoch,
        if outcome.stopped_early { ", early stop" } else { "" },
        out.display()
    );
    println!("{}", EvalReport::table_header());
    for r in &reports {
        println!("{}", r.table_row());
    }
    Ok(())
}

pub fn ablate(args: &AblateArgs) -> Result<()> {
    let base = &args.train;
    let mut runs = Vec::new();
    let mut outputs = Vec::new();
    for ablation in [Ablation::Full, Ablation::NoTransformer, Ablation::NoDiscriminator] {
        let mut a = base.clone();
        a.overrides.ablation = Some(ablation);
        a.out = base.out.join(ablation.to_string());
        run(&a)?;
        runs.push(collect_run(&a.out)?);
        outputs.push(a.out);
    }
    finish_group(Command::Ablate(args.clone()), base, &runs, outputs, "ablation.md")
}

pub fn sweep(args: &SweepArgs) -> Result<()> {
    let base = &args.train;
    let mut runs = Vec::new();
    let mut outputs = Vec::new();
    for &alpha in &args.alphas {
        for &beta in &args.betas {
            for &gamma in &args.gammas {
                let mut a = base.clone();
                a.overrides.alpha = Some(alpha);
                a.overrides.beta = Some(beta);
                a.overrides.gamma = Some(gamma);
                a.out = base.out.join(format!("a{alpha}_b{beta}_g{gamma}"));
                run(&a)?;
                runs.push(collect_run(&a.out)?);
                outputs.push(a.out);
            }
        }
    }
    finish_group(Command::Sweep(args.clone()), base, &runs, outputs, "sweep.md")
}

fn finish_group(
    command: Command,
    base: &TrainArgs,
    runs: &[RunReports],
    outputs: Vec<PathBuf>,
    table_file: &str,
) -> Result<()> {
    let table = summary_table(runs);
    write_text(&base.out.join(table_file), &table)?;
    let mut manifest = RunManifest::new(command);
    manifest.seeds = base.seed_list();
    add_inputs(&mut manifest, base)?;
    manifest.outputs = outputs;
    manifest.save(&base.out)?;
    print!("{table}");
    Ok(())
}
