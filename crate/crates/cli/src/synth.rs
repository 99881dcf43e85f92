//! `cetx synth`.

use anyhow::Result;
use cetransformer::dataset::{generate_synthetic, EffectFn, SynthConfig};

use crate::manifest::{write_json, write_text, RunManifest};
use crate::{Command, SynthArgs};

pub fn run(args: &SynthArgs) -> Result<()> {
    let effect = match (args.effect, args.tau) {
        (EffectFn::Constant { .. }, Some(tau)) => EffectFn::Constant { tau },
        (e, _) => e,
    };
    let cfg = SynthConfig {
        n: args.n,
        d: args.d,
        bias_strength: args.bias,
        effect,
        noise_sd: args.noise,
        seed: args.seed,
    };
    let ds = generate_synthetic(&cfg)?;
    write_text(&args.out, &ds.to_csv_string())?;
    let mut manifest = RunManifest::new(Command::Synth(args.clone()));
    manifest.seeds = vec![args.seed];
    manifest.outputs = vec![args.out.clone()];
    write_json(&args.out.with_extension("manifest.json"), &manifest)?;
    println!(
        "wrote {} ({} units, {} treated, {} covariates)",
        args.out.display(),
        ds.n(),
        ds.treated_indices().len(),
        ds.d()
    );
    Ok(())
}
