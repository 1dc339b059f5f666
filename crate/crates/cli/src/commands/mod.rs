mod annotate;
mod data;
mod eval;
mod train;

use std::path::{Path, PathBuf};

use dmsl_core::evaluation::NmeMode;
use dmsl_core::manifest::read_manifest;
use dmsl_core::training::Hyperparams;
use dmsl_core::SampleRecord;

use crate::error::CliResult;
use crate::out::{OutDir, RunInfo};
use crate::{Cli, Command, MetricArgs};

pub fn run(cli: &Cli) -> CliResult<()> {
    let out = OutDir::new(&cli.out, cli.force)?;
    let seed = cli.seed.unwrap_or(0);
    match &cli.command {
        Command::Ingest { root, name_pattern } => data::ingest(&out, root, name_pattern),
        Command::Synth {
            subjects,
            width,
            height,
            variations,
        } => data::synth(&out, *subjects, seed, *width, *height, variations),
        Command::Preprocess { manifest, no_mirror } => data::preprocess(&out, manifest, !no_mirror),
        Command::Masks {
            manifest,
            kind,
            limit,
        } => data::masks(&out, manifest, *kind, *limit),
        Command::Annotate {
            root,
            detector,
            manifest,
            db,
        } => annotate::annotate(&out, root, detector, manifest.as_deref(), db.as_deref(), cli.force),
        Command::Serve {
            port,
            db,
            manifest,
            images,
            detector,
            host,
        } => annotate::serve(host, *port, db, manifest.as_deref(), images.as_deref(), detector),
        Command::Train(args) => train::train(&out, args, cli.seed),
        Command::Eval {
            checkpoints,
            manifest,
            fold,
            predictions,
            metric,
        } => eval::eval(
            &out,
            checkpoints.as_deref(),
            manifest,
            *fold,
            predictions.as_deref(),
            mode(metric),
        ),
        Command::Cv {
            manifest,
            hp,
            jobs,
            metric,
        } => eval::cv(&out, manifest, hp.as_deref(), cli.seed, *jobs, metric, cli.verbose),
        Command::CvFold {
            manifest,
            hp,
            fold,
            metric,
        } => eval::cv_fold(&out, manifest, hp.as_deref(), cli.seed, *fold, mode(metric)),
        Command::Infer {
            checkpoints,
            image,
            spectrum,
        } => eval::infer(&out, checkpoints, image, *spectrum),
    }
    .and_then(|name| {
        out.write_json(&format!("run_{name}.json"), &RunInfo::new(name, seed))?;
        Ok(())
    })
}

fn mode(m: &MetricArgs) -> NmeMode {
    if m.nme_vector_norm {
        NmeMode::VectorNorm
    } else {
        NmeMode::PointMean
    }
}

/// Records plus the directory their relative paths resolve against.
fn load_manifest(path: &Path) -> CliResult<(Vec<SampleRecord>, PathBuf)> {
    let records = read_manifest(path)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((records, base))
}

/// Hyperparameters from a file (or defaults), with the CLI seed applied.
fn load_hp(path: Option<&Path>, seed: Option<u64>) -> CliResult<Hyperparams> {
    let mut hp = match path {
        Some(p) => Hyperparams::load(p)?,
        None => Hyperparams::default(),
    };
    if let Some(s) = seed {
        hp.seed = s;
    }
    Ok(hp)
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json value"));
}
