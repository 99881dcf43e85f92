//! `cetx eval`.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::Result;
use cetransformer::baselines::{knn_ite, ols_lr1, ols_lr2, BaselineFit};
use cetransformer::dataset::{load_csv, Dataset, SplitIndices};
use cetransformer::metrics::{evaluate, ite_true, EvalReport, Predictions};
use cetransformer::trainer::TrainedModel;
use cetransformer::Error;

use crate::manifest::{read_json, read_text, write_json, write_text, RunManifest, MANIFEST_FILE};
use crate::report::{seed_dirs, summary_table, RunReports};
use crate::train::{CHECKPOINT_FILE, REPORT_FILE, SPLITS_FILE};
use crate::{seed_dir, Command, EvalArgs};

fn oracle(ds: &Dataset) -> Result<Predictions> {
    if let (Some(m0), Some(m1)) = (ds.mu0(), ds.mu1()) {
        return Ok(Predictions {
            y0: m0.to_vec(),
            y1: m1.to_vec(),
        });
    }
    let ite = ite_true(ds)?;
    let (mut y0, mut y1) = (Vec::new(), Vec::new());
    for i in 0..ds.n() {
        let yf = ds.y_factual()[i];
        if ds.treatment()[i] {
            y0.push(yf - ite[i]);
            y1.push(yf);
        } else {
            y0.push(yf);
            y1.push(yf + ite[i]);
        }
    }
    Ok(Predictions { y0, y1 })
}

fn score(
    method: &str,
    ds: &Dataset,
    splits: &SplitIndices,
    pred: &Predictions,
    lambda: f64,
    reports: &mut Vec<EvalReport>,
) -> Result<()> {
    let test = if splits.test.is_empty() { &splits.train } else { &splits.test };
    for (split, idx) in [("in", &splits.train), ("out", test)] {
        let sub = ds.subset(idx);
        let r = evaluate(split, method, &sub, &pred.subset(idx), None, lambda)?;
        for w in &r.warnings {
            eprintln!("warning: {method}/{split}: {w}");
        }
        reports.push(r);
    }
    Ok(())
}

fn embeddings_csv(ds: &Dataset, splits: &SplitIndices, emb: &cetransformer::tensor::Tensor) -> String {
    let mut part = vec!["train"; ds.n()];
    for &i in &splits.valid {
        part[i] = "valid";
    }
    for &i in &splits.test {
        part[i] = "test";
    }
    let mut out = String::from("unit,t,split");
    for j in 0..emb.last_dim() {
        write!(out, ",e{j}").unwrap();
    }
    out.push('\n');
    for i in 0..ds.n() {
        write!(out, "{i},{},{}", u8::from(ds.treatment()[i]), part[i]).unwrap();
        for v in emb.row(i) {
            write!(out, ",{v}").unwrap();
        }
        out.push('\n');
    }
    out
}

fn eval_seed(args: &EvalArgs, dir: &Path, out: &Path) -> Result<Vec<EvalReport>> {
    let manifest = RunManifest::load(&dir.join(MANIFEST_FILE))?;
    let (Command::Train(targs), Some(cfg)) = (&manifest.command, manifest.config.clone()) else {
        return Err(Error::Config(format!("{} is not a training run", dir.display())).into());
    };
    let ds = load_csv(&targs.data, &targs.schema.schema())?;
    let splits: SplitIndices = read_json(&dir.join(SPLITS_FILE))?;
    let model = TrainedModel::from_checkpoint(cfg, ds.d(), &read_text(&dir.join(CHECKPOINT_FILE))?)?;

    let test = if splits.test.is_empty() { &splits.train } else { &splits.test };
    let mut reports = vec![
        model.evaluate(&ds, &splits.train, "in", args.lambda)?,
        model.evaluate(&ds, test, "out", args.lambda)?,
    ];
    let pred = model.predict(ds.covariates())?;
    let units: Vec<usize> = (0..ds.n()).collect();
    write_text(&out.join("predictions.csv"), &pred.to_csv_string(&units, &ds))?;
    write_text(
        &out.join("embeddings.csv"),
        &embeddings_csv(&ds, &splits, &model.embed(ds.covariates())?),
    )?;

    if args.with_baselines {
        let fits: [(&str, Result<BaselineFit, Error>); 3] = [
            ("ols_lr1", ols_lr1(&ds, &splits)),
            ("ols_lr2", ols_lr2(&ds, &splits)),
            ("knn", knn_ite(&ds, &splits, args.k)),
        ];
        for (name, fit) in fits {
            let fit = fit?;
            for w in &fit.warnings {
                eprintln!("warning: {name}: {w}");
            }
            write_text(
                &out.join(format!("predictions_{name}.csv")),
                &fit.predictions.to_csv_string(&units, &ds),
            )?;
            score(name, &ds, &splits, &fit.predictions, args.lambda, &mut reports)?;
        }
    }
    if args.oracle {
        score("oracle", &ds, &splits, &oracle(&ds)?, args.lambda, &mut reports)?;
    }
    write_json(&out.join(REPORT_FILE), &reports)?;
    Ok(reports)
}

pub fn run(args: &EvalArgs) -> Result<()> {
    let out = args.out.clone().unwrap_or_else(|| args.run.join("eval"));
    let dirs = seed_dirs(&args.run)?;
    let multi = dirs.len() > 1 || dirs.iter().any(|(_, d)| d != &args.run);
    let mut per_seed = Vec::with_capacity(dirs.len());
    for (seed, dir) in &dirs {
        per_seed.push(eval_seed(args, dir, &seed_dir(&out, *seed, multi))?);
    }
    let label = args
        .run
        .file_name()
        .map_or_else(|| "run".to_string(), |n| n.to_string_lossy().into_owned());
    let table = summary_table(&[RunReports {
        label,
        dir: args.run.clone(),
        seeds: dirs.iter().map(|(s, _)| *s).collect(),
        reports: per_seed,
        traces: Vec::new(),
    }]);
    write_text(&out.join("summary.md"), &table)?;

    let mut manifest = RunManifest::new(Command::Eval(args.clone()));
    manifest.seeds = dirs.iter().map(|(s, _)| *s).collect();
    for (_, dir) in &dirs {
        manifest.add_input(&dir.join(CHECKPOINT_FILE))?;
    }
    manifest.outputs = vec![out.join("summary.md")];
    manifest.save(&out)?;
    print!("{table}");
    Ok(())
}
