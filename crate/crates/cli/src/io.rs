//! Artifact reading and writing shared by the commands.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use boostnet::budget::CostProfile;
use boostnet::data::Splits;
use boostnet::eval::{cost_profile_estimate, read_logit_dump, LogitTable};
use boostnet::model::load_checkpoint;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::CostArgs;

pub fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for row in rows {
        w.serialize(row).context("writing curve data")?;
    }
    w.flush()?;
    Ok(())
}

/// Loads a config and applies a `--seed` override.
pub fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

pub fn output_dir(cli: Option<&PathBuf>, cfg: &RunConfig) -> Result<PathBuf, CliError> {
    cli.or(cfg.output_dir.as_ref())
        .cloned()
        .ok_or_else(|| CliError::Config("no output directory: pass --out or set output_dir".into()))
}

pub fn load_splits(cfg: &RunConfig) -> Result<Splits, CliError> {
    let data = cfg.load_dataset()?;
    Ok(data.split(cfg.holdout_fraction, cfg.test_fraction, cfg.seed)?)
}

pub fn load_dump(path: &Path) -> Result<LogitTable, CliError> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(read_logit_dump(BufReader::new(f))?)
}

pub fn resolve_costs(args: &CostArgs) -> Result<CostProfile, CliError> {
    match (&args.costs, &args.checkpoint) {
        (Some(c), _) => Ok(CostProfile::new(c.clone())?),
        (None, Some(ck)) => Ok(cost_profile_estimate(&load_checkpoint(ck)?)?),
        (None, None) => Err(CliError::Config("pass --costs or --checkpoint".into())),
    }
}
