//! Run manifest: everything needed to reproduce or audit a run.
//!
//! The manifest is the one output that carries timing, so the CSVs stay
//! byte-identical across reruns with the same config and seed.

use crate::config::Config;
use serde::Serialize;
use std::path::Path;

#[derive(Debug, Serialize)]
pub struct Manifest {
    /// Subcommand that produced this run.
    pub command: String,
    /// Fully resolved configuration after CLI overrides were applied.
    pub config: Config,
    pub seed: u64,
    pub trials: usize,
    pub threads: usize,
    pub versions: Versions,
    /// Files written by the run, relative to the output directory.
    pub outputs: Vec<String>,
    /// Anything the run noticed that weakens the usual guarantees, e.g.
    /// change spacings too tight for full refinement between changes.
    pub notes: Vec<String>,
    pub wall_ms: u128,
}

#[derive(Debug, Serialize)]
pub struct Versions {
    pub cli: &'static str,
    pub core: &'static str,
}

impl Versions {
    pub fn current() -> Self {
        Versions {
            cli: env!("CARGO_PKG_VERSION"),
            core: norst_core::version(),
        }
    }
}

impl Manifest {
    pub fn write(&self, dir: &Path) -> anyhow::Result<()> {
        let path = dir.join("manifest.json");
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, json + "\n")?;
        Ok(())
    }
}
