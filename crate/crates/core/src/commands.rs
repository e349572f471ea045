//! Command implementations behind the binary, callable in-process.

use std::io::Write;
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::EvalReport;
use crate::gradcheck::{run_suite, BlockReport};
use crate::pipeline::Encoded;
use crate::scenegen::{generate_world, load_split_files, write_split_files, Dataset, Manifest, Split, MANIFEST};
use crate::train::{load_coarse, load_fine, train_coarse, train_fine, EpochLog, TrainOptions};

/// Seeds per block for the gradient suite.
pub const GRADCHECK_SEEDS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Coarse,
    Fine,
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "coarse" => Ok(Self::Coarse),
            "fine" => Ok(Self::Fine),
            _ => Err(Error::Config(format!("unknown stage {s:?}; expected coarse or fine"))),
        }
    }
}

/// Defaults, then the config file, then overrides; validated.
pub fn load_config(file: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|_| Error::Dependency(path.to_path_buf()))?;
        cfg.apply(&text)?;
    }
    cfg.apply_overrides(overrides)?;
    Ok(cfg)
}

/// Writes the three split files and the manifest into `out`.
pub fn gen_data(cfg: &RunConfig, out: &Path, force: bool) -> Result<Manifest> {
    if out.join(MANIFEST).exists() && !force {
        return Err(Error::Exists(out.to_path_buf()));
    }
    let world = cfg.world();
    let ds = generate_world(&world)?;
    write_split_files(out, &ds, &world, cfg.world_canonical())
}

pub fn load_data(cfg: &RunConfig) -> Result<(Dataset, String)> {
    load_split_files(&cfg.data_dir)
}

pub fn train(cfg: &RunConfig, stage: Stage, opts: &TrainOptions, log: &mut dyn Write) -> Result<Vec<EpochLog>> {
    let (ds, digest) = load_data(cfg)?;
    Ok(match stage {
        Stage::Coarse => train_coarse(cfg, &ds, &digest, opts, log)?.1,
        Stage::Fine => train_fine(cfg, &ds, &digest, opts, log)?.1,
    })
}

/// Retrieval over every cell, then fine regression in each retrieved cell.
pub fn eval(cfg: &RunConfig, split: Split) -> Result<EvalReport> {
    let (ds, digest) = load_data(cfg)?;
    let (coarse, coarse_digest) = load_coarse(cfg, &digest)?;
    let fine = load_fine(cfg, &digest, &coarse, &coarse_digest)?;
    Encoded::new(&coarse, &ds, ds.queries_in(split))?.report(&fine)
}

pub fn gradcheck() -> Result<(Vec<BlockReport>, f64)> {
    run_suite(GRADCHECK_SEEDS)
}
