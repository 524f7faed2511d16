//! Joint-localization scoring and the alpha-sweep experiment harness.
//!
//! A pixel extracted for a part counts as correct when it falls within an
//! axis-aligned square of side 0.2 * sqrt(bbox area) centered on any
//! ground-truth joint of that part. Per-part percentages are aggregated over
//! the whole test set and averaged (unweighted) over the seven foreground
//! parts.

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;

use crate::config::RunConfig;
use crate::data_model::{load_rgb, BoundingBox, DatasetManifest, Domain, Joints, NUM_PARTS};
use crate::error::{Error, Result};
use crate::features::compute_channels;
use crate::forest::Forest;
use crate::infer::{extract_pixels, modulate, posterior, prior_posterior};
use crate::synthgen::{chebyshev, label_tolerance};
use crate::train::{self, train_forest, DiagRow, SplitObjective};

/// What feeds the per-part pixel extraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreMode {
    /// The raw forest posterior.
    Plain,
    /// The forest posterior reweighted by the location prior.
    Modulated,
    /// The location prior alone; the no-image baseline.
    PriorOnly,
}

/// Per-part tally of extracted pixels.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PartCount {
    pub correct: u64,
    pub total: u64,
    /// Images whose ground truth lacks any joint for this part.
    pub skipped_images: u64,
}

impl PartCount {
    fn merge(&mut self, other: &PartCount) {
        self.correct += other.correct;
        self.total += other.total;
        self.skipped_images += other.skipped_images;
    }
}

/// Aggregated accuracy over a test set.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalScores {
    pub counts: [PartCount; NUM_PARTS],
    /// Percent correct per part, 0 when a part never produced pixels.
    pub percents: [f64; NUM_PARTS],
    /// Unweighted mean of the seven per-part percentages.
    pub p: f64,
}

impl EvalScores {
    fn from_counts(counts: [PartCount; NUM_PARTS]) -> Self {
        let percents = std::array::from_fn(|p| {
            let c = &counts[p];
            if c.total == 0 {
                0.0
            } else {
                100.0 * c.correct as f64 / c.total as f64
            }
        });
        let p = percents.iter().sum::<f64>() / NUM_PARTS as f64;
        EvalScores { counts, percents, p }
    }
}

/// Score one image's extracted pixels against its ground-truth joints.
/// A part without any ground-truth joint is skipped and flagged.
pub fn score_image(
    extracted: &[Vec<(i32, i32)>; NUM_PARTS],
    joints: &Joints,
    bbox: &BoundingBox,
) -> [PartCount; NUM_PARTS] {
    let tol = label_tolerance(bbox.sqrt_area());
    std::array::from_fn(|part| {
        let gt = &joints.per_part[part];
        if gt.is_empty() {
            return PartCount { correct: 0, total: 0, skipped_images: 1 };
        }
        let correct = extracted[part]
            .iter()
            .filter(|&&(px, py)| gt.iter().any(|&(x, y)| chebyshev(px, py, x, y) <= tol))
            .count() as u64;
        PartCount {
            correct,
            total: extracted[part].len() as u64,
            skipped_images: 0,
        }
    })
}

fn merge_counts(into: &mut [PartCount; NUM_PARTS], from: &[PartCount; NUM_PARTS]) {
    for (a, b) in into.iter_mut().zip(from.iter()) {
        a.merge(b);
    }
}

/// Evaluate a forest over the manifest's test entries in the given modes,
/// sharing the per-image posterior across modes.
pub fn evaluate_modes(
    forest: &Forest,
    manifest: &DatasetManifest,
    modes: &[ScoreMode],
) -> Result<Vec<EvalScores>> {
    let entries: Vec<_> = manifest.entries_in(Domain::Test).collect();
    if entries.is_empty() {
        return Err(Error::InvalidInput("manifest has no test entries".into()));
    }
    let needs_forest = modes
        .iter()
        .any(|m| matches!(m, ScoreMode::Plain | ScoreMode::Modulated));

    let per_image: Vec<Vec<[PartCount; NUM_PARTS]>> = entries
        .par_iter()
        .map(|(idx, entry)| {
            let joints = entry.joints.as_ref().ok_or_else(|| {
                Error::InvalidInput(format!("test entry {idx} carries no joints"))
            })?;
            let bbox = entry.bbox;
            let pm = if needs_forest {
                let img = load_rgb(&entry.image)?;
                let ch = compute_channels(&img, &bbox, forest.config.orient_bins as usize)?;
                Some(posterior(forest, &ch, &bbox))
            } else {
                None
            };
            modes
                .iter()
                .map(|mode| {
                    let map = match mode {
                        ScoreMode::Plain => pm.clone().unwrap(),
                        ScoreMode::Modulated => modulate(pm.as_ref().unwrap(), &forest.prior),
                        ScoreMode::PriorOnly => prior_posterior(&forest.prior, &bbox),
                    };
                    let pixels = extract_pixels(&map, &forest.phi);
                    Ok(score_image(&pixels, joints, &bbox))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    Ok((0..modes.len())
        .map(|m| {
            let mut counts = [PartCount::default(); NUM_PARTS];
            for image in &per_image {
                merge_counts(&mut counts, &image[m]);
            }
            EvalScores::from_counts(counts)
        })
        .collect())
}

/// Single-mode evaluation.
pub fn evaluate(forest: &Forest, manifest: &DatasetManifest, mode: ScoreMode) -> Result<EvalScores> {
    Ok(evaluate_modes(forest, manifest, &[mode])?.pop().unwrap())
}

/// One row of the experiment report.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub alpha: f64,
    pub e_leaf: f64,
    pub p: f64,
    pub p_prior: f64,
    pub p_prior_only: f64,
    pub runtime_s: f64,
}

/// One alpha's full result: report row, trained forest, and per-level
/// diagnostics recomputed over the finished trees (so the chi-square and KL
/// columns are filled even for alpha = 1, which never routes target pixels
/// while training).
pub struct SweepEntry {
    pub row: SweepRow,
    pub forest: Forest,
    pub diagnostics: Vec<DiagRow>,
}

/// Train and evaluate one forest per alpha with identical seeds and data.
pub fn sweep(
    manifest: &DatasetManifest,
    alphas: &[f64],
    config: &RunConfig,
) -> Result<Vec<SweepEntry>> {
    if alphas.is_empty() {
        return Err(Error::InvalidInput("sweep needs at least one alpha".into()));
    }
    let mut out = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let start = Instant::now();
        let mut cfg = config.clone();
        cfg.alpha = alpha;
        cfg.validate()?;
        let trained = train_forest(manifest, SplitObjective::Mixed { alpha }, &cfg)?;
        let scores = evaluate_modes(
            &trained.forest,
            manifest,
            &[ScoreMode::Plain, ScoreMode::Modulated, ScoreMode::PriorOnly],
        )?;
        let diagnostics = train::recompute_diagnostics(&trained.forest, manifest)?;
        out.push(SweepEntry {
            row: SweepRow {
                alpha,
                e_leaf: train::leaf_entropy(&trained.diagnostics),
                p: scores[0].p,
                p_prior: scores[1].p,
                p_prior_only: scores[2].p,
                runtime_s: start.elapsed().as_secs_f64(),
            },
            forest: trained.forest,
            diagnostics,
        });
    }
    Ok(out)
}

/// Write report rows as `alpha,e_leaf,p,p_prior,p_prior_only,runtime_s`.
pub fn write_report_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut out = String::from("alpha,e_leaf,p,p_prior,p_prior_only,runtime_s\n");
    for r in rows {
        out.push_str(&format!(
            "{:.3},{:.6},{:.4},{:.4},{:.4},{:.3}\n",
            r.alpha, r.e_leaf, r.p, r.p_prior, r.p_prior_only, r.runtime_s
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
