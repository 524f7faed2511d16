//! Run configuration shared by training, inference and the CLI.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// All tunables of a training/evaluation run.
///
/// `workers` controls execution parallelism only; it never affects results
/// and is not stored in model files.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Trees per forest.
    pub trees: u32,
    /// Maximum tree depth; nodes at this depth are always leaves.
    pub depth: u32,
    /// Randomly proposed weak-classifier shapes per frontier node.
    pub candidates: u32,
    /// Thresholds proposed per candidate shape.
    pub thresholds: u32,
    /// Reservoir capacity per frontier node and domain.
    pub samples: u32,
    /// Orientation bins of the gradient channels.
    pub orient_bins: u32,
    /// Spatial-bin grid resolution per axis (B = grid^2 bins).
    pub grid: u32,
    /// Rectangle offset radius in units of sqrt(bbox area).
    pub rho: f64,
    /// Minimum synthetic pixel count for a node to be split.
    pub min_syn: u32,
    /// Objective mix: alpha * entropy + (1 - alpha) * chi-square.
    pub alpha: f64,
    /// Location-prior grid resolution per axis.
    pub prior_grid: u32,
    /// Pixel stride (per axis) when streaming training pixels.
    pub stride: u32,
    /// Master seed.
    pub seed: u64,
    /// Worker threads; 0 means one per logical CPU.
    pub workers: u32,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            trees: 2,
            depth: 12,
            candidates: 2000,
            thresholds: 60,
            samples: 100,
            orient_bins: 9,
            grid: 8,
            rho: 0.5,
            min_syn: 50,
            alpha: 0.2,
            prior_grid: 24,
            stride: 2,
            seed: 1,
            workers: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        fn check(ok: bool, msg: &str) -> Result<()> {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(msg.to_string()))
            }
        }
        check(self.trees >= 1, "trees must be >= 1")?;
        check(self.depth >= 1, "depth must be >= 1")?;
        check(self.candidates >= 1, "candidates must be >= 1")?;
        check(self.thresholds >= 1, "thresholds must be >= 1")?;
        check(self.samples >= 1, "samples must be >= 1")?;
        check(self.orient_bins >= 2, "orient-bins must be >= 2")?;
        check(
            self.grid >= 1 && self.grid <= 64,
            "grid must lie in 1..=64",
        )?;
        check(
            self.rho.is_finite() && self.rho > 0.0,
            "rho must be positive",
        )?;
        check(
            (0.0..=1.0).contains(&self.alpha),
            "alpha must lie in [0, 1]",
        )?;
        check(
            self.prior_grid >= 1 && self.prior_grid <= 256,
            "prior-grid must lie in 1..=256",
        )?;
        check(self.stride >= 1, "stride must be >= 1")?;
        Ok(())
    }

    /// Total spatial bins B = grid^2.
    pub fn spatial_bins(&self) -> usize {
        (self.grid as usize) * (self.grid as usize)
    }

    /// Apply one `key=value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("bad value for {key}: {value:?}")))
        }
        match key {
            "trees" => self.trees = parse(key, value)?,
            "depth" => self.depth = parse(key, value)?,
            "candidates" => self.candidates = parse(key, value)?,
            "thresholds" => self.thresholds = parse(key, value)?,
            "samples" => self.samples = parse(key, value)?,
            "orient-bins" | "orient_bins" => self.orient_bins = parse(key, value)?,
            "grid" => self.grid = parse(key, value)?,
            "rho" => self.rho = parse(key, value)?,
            "min-syn" | "min_syn" => self.min_syn = parse(key, value)?,
            "alpha" => self.alpha = parse(key, value)?,
            "prior-grid" | "prior_grid" => self.prior_grid = parse(key, value)?,
            "stride" => self.stride = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "workers" => self.workers = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Load overrides from a flat `key=value` file with `#` comments.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config(format!(
                "{}:{}: expected key=value, got {raw:?}",
                path.display(),
                lineno + 1
            )))?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Effective worker-thread count.
    pub fn effective_workers(&self) -> usize {
        if self.workers == 0 {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        } else {
            self.workers as usize
        }
    }
}
