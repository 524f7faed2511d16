//! Breadth-first, two-pass-per-level forest training.
//!
//! Each level first routes every training pixel to its frontier node,
//! feeding full count statistics plus a bounded uniform reservoir per node
//! (pass 1). Candidate splits are proposed and pre-ranked on the reservoir
//! samples alone (stage 1), then the survivors are re-scored against every
//! pixel at the node (pass 2) before the best one is fixed or the node is
//! sealed as a leaf (stage 2). All cross-thread accumulation uses integer
//! counters, so results are identical for any worker count.

use std::ops::Range;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::counters;
use crate::data_model::{
    collect_pixels, load_rgb, DatasetManifest, Domain, LabelMap, BACKGROUND,
};
use crate::error::{Error, Result};
use crate::features::{compute_channels, FeatureChannels, OffsetRect, Side, WeakClassifier};
use crate::forest::{Forest, LocationPrior, Tree, TreeNode};
use crate::rng::{derive_seed, rng_from};
use crate::stats::{self, LabelHistogram, NodeStats, SpatialHistogram, NUM_LABELS};

/// Shapes kept by stage-1 pre-selection.
pub const SHAPE_KEEP: usize = 30;
/// Thresholds kept per surviving shape.
pub const THRESH_KEEP: usize = 10;
/// Total (shape, threshold) pairs forwarded to the full-data pass.
pub const FINALIST_CAP: usize = SHAPE_KEEP * THRESH_KEEP;

/// Label value marking a pixel without one (target pixels that lack an
/// analysis label map).
pub const NO_LABEL: u8 = u8::MAX;

// ---------------------------------------------------------------------------
// Split objective

/// The per-node impurity a split should reduce: either the alpha-blend of
/// label entropy and cross-domain spatial chi-square, or plain entropy (the
/// classical baseline used to cross-check the alpha = 1 endpoint).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SplitObjective {
    Mixed { alpha: f64 },
    EntropyOnly,
}

impl SplitObjective {
    /// The alpha recorded into trained models.
    pub fn alpha(&self) -> f64 {
        match self {
            SplitObjective::Mixed { alpha } => *alpha,
            SplitObjective::EntropyOnly => 1.0,
        }
    }

    /// Whether target-domain pixels participate in training at all.
    pub fn uses_target(&self) -> bool {
        match self {
            SplitObjective::Mixed { alpha } => *alpha < 1.0,
            SplitObjective::EntropyOnly => false,
        }
    }

    /// Node fitness under this objective.
    pub fn fitness(&self, ns: &NodeStats) -> f64 {
        match self {
            SplitObjective::Mixed { alpha } => stats::fitness(ns, *alpha),
            // Matches the Mixed alpha=1 path bitwise: empty nodes are 0,
            // otherwise the normalized label entropy.
            SplitObjective::EntropyOnly => {
                if ns.syn_count() == 0 {
                    0.0
                } else {
                    stats::entropy(&ns.syn_labels)
                }
            }
        }
    }

    /// Split gain with a precomputed parent fitness; mirrors `stats::gain`
    /// term for term so both objectives agree bitwise at alpha = 1.
    fn gain_given(&self, f_parent: f64, m: u64, left: &NodeStats, right: &NodeStats) -> f64 {
        if m == 0 {
            return 0.0;
        }
        let inv_m = 1.0 / m as f64;
        let wl = left.syn_count() as f64 * inv_m;
        let wr = right.syn_count() as f64 * inv_m;
        f_parent - wl * self.fitness(left) - wr * self.fitness(right)
    }

    /// Split gain: fitness(parent) minus the synthetic-count-weighted mean
    /// fitness of the children.
    pub fn gain(&self, parent: &NodeStats, left: &NodeStats, right: &NodeStats) -> f64 {
        self.gain_given(self.fitness(parent), parent.syn_count(), left, right)
    }
}

// ---------------------------------------------------------------------------
// Reservoir sampling

/// Classic single-pass uniform reservoir (algorithm R).
#[derive(Debug, Clone)]
pub struct Reservoir<T> {
    capacity: usize,
    seen: u64,
    items: Vec<T>,
    rng: ChaCha8Rng,
}

impl<T: Copy> Reservoir<T> {
    pub fn new(capacity: usize, rng: ChaCha8Rng) -> Self {
        Reservoir {
            capacity,
            seen: 0,
            items: Vec::with_capacity(capacity.min(1024)),
            rng,
        }
    }

    /// Offer one stream item; it is retained with probability
    /// capacity / items-seen-so-far.
    pub fn push(&mut self, item: T) {
        self.seen += 1;
        if self.items.len() < self.capacity {
            self.items.push(item);
        } else {
            let j = self.rng.random_range(0..self.seen);
            if (j as usize) < self.capacity {
                self.items[j as usize] = item;
            }
        }
    }

    pub fn items(&self) -> &[T] {
        &self.items
    }
}

/// Uniform sample of at most `capacity` items from a stream.
pub fn reservoir_sample<T: Copy>(
    stream: impl IntoIterator<Item = T>,
    capacity: usize,
    seed: u64,
) -> Vec<T> {
    let mut res = Reservoir::new(capacity, rng_from(seed, &[]));
    for item in stream {
        res.push(item);
    }
    res.items.clone()
}

// ---------------------------------------------------------------------------
// Training data in memory

/// One training pixel in compact form.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainSample {
    /// Manifest entry index.
    pub entry: u32,
    pub px: u16,
    pub py: u16,
    /// Part label; NO_LABEL for target pixels without an analysis map.
    pub label: u8,
    /// Spatial bin within the entry's bounding box.
    pub bin: u16,
}

/// Feature channels for every entry of the domains a run touches.
pub struct ChannelStore {
    channels: Vec<Option<FeatureChannels>>,
}

impl ChannelStore {
    /// Load images and build integral channels for every entry of the given
    /// domains, in parallel. Planes are discarded; only tables remain.
    pub fn build(manifest: &DatasetManifest, domains: &[Domain], bins: usize) -> Result<Self> {
        let channels = manifest
            .entries
            .par_iter()
            .map(|entry| {
                if !domains.contains(&entry.domain) {
                    return Ok(None);
                }
                let img = load_rgb(&entry.image)?;
                let mut ch = compute_channels(&img, &entry.bbox, bins)?;
                ch.discard_planes();
                Ok(Some(ch))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ChannelStore { channels })
    }

    /// Wrap precomputed channels (single-image pipelines and tests).
    pub fn from_parts(channels: Vec<Option<FeatureChannels>>) -> Self {
        ChannelStore { channels }
    }

    pub fn get(&self, entry: usize) -> &FeatureChannels {
        self.channels[entry]
            .as_ref()
            .expect("feature channels were built for this entry")
    }
}

/// All streamed pixels of one domain plus contiguous per-image ranges.
struct DomainData {
    samples: Vec<TrainSample>,
    /// (entry index, sample range), in manifest order.
    shards: Vec<(u32, Range<usize>)>,
}

impl DomainData {
    fn empty() -> Self {
        DomainData {
            samples: Vec::new(),
            shards: Vec::new(),
        }
    }
}

fn build_domain(manifest: &DatasetManifest, domain: Domain, config: &RunConfig) -> Result<DomainData> {
    let pixels = collect_pixels(manifest, domain, config.stride, config.grid)?;
    let mut samples = Vec::with_capacity(pixels.len());
    for p in &pixels {
        let (px, py) = (u16::try_from(p.px), u16::try_from(p.py));
        let (px, py) = match (px, py) {
            (Ok(x), Ok(y)) => (x, y),
            _ => {
                return Err(Error::InvalidInput(format!(
                    "pixel ({}, {}) exceeds the supported coordinate range",
                    p.px, p.py
                )))
            }
        };
        samples.push(TrainSample {
            entry: p.entry as u32,
            px,
            py,
            label: p.label.unwrap_or(NO_LABEL),
            bin: p.bin as u16,
        });
    }
    let mut shards = Vec::new();
    let mut start = 0usize;
    for i in 1..=samples.len() {
        if i == samples.len() || samples[i].entry != samples[start].entry {
            shards.push((samples[start].entry, start..i));
            start = i;
        }
    }
    Ok(DomainData { samples, shards })
}

/// Attach labels from on-disk maps to target pixels. The labels feed the
/// target-error diagnostics column only; the split objective never sees them.
fn attach_analysis_labels(manifest: &DatasetManifest, data: &mut DomainData) -> Result<()> {
    for (entry_idx, range) in data.shards.clone() {
        let entry = &manifest.entries[entry_idx as usize];
        let Some(path) = &entry.labels else { continue };
        let map = LabelMap::load(path)?;
        for s in &mut data.samples[range] {
            s.label = map.get(s.px as u32, s.py as u32);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Candidate proposal

/// A weak classifier before threshold selection: the two rectangles and
/// orientation bins, without t.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitShape {
    pub rect1: OffsetRect,
    pub theta1: usize,
    pub rect2: OffsetRect,
    pub theta2: usize,
}

impl SplitShape {
    /// The thresholded quantity (same as WeakClassifier::ratio).
    pub fn ratio(&self, ch: &FeatureChannels, px: i32, py: i32) -> f64 {
        self.with_threshold(0.0).ratio(ch, px, py)
    }

    pub fn with_threshold(&self, t: f64) -> WeakClassifier {
        WeakClassifier {
            rect1: self.rect1,
            theta1: self.theta1,
            rect2: self.rect2,
            theta2: self.theta2,
            t,
        }
    }
}

fn random_rect(rng: &mut ChaCha8Rng, rho: f64) -> OffsetRect {
    loop {
        let (x1, y1) = (rng.random_range(-rho..rho), rng.random_range(-rho..rho));
        let (x2, y2) = (rng.random_range(-rho..rho), rng.random_range(-rho..rho));
        let rect = OffsetRect {
            ux: x1.min(x2),
            uy: y1.min(y2),
            vx: x1.max(x2),
            vy: y1.max(y2),
        };
        // zero-width/height draws are measure-zero but would violate the
        // rectangle invariant, so redraw
        if rect.ux < rect.vx && rect.uy < rect.vy {
            return rect;
        }
    }
}

/// `count` random shapes: rectangle corners uniform in [-rho, rho]^2
/// (corner-sorted), orientations uniform over the channel bins.
pub fn propose_candidates(seed: u64, count: usize, rho: f64, bins: usize) -> Vec<SplitShape> {
    let mut rng = rng_from(seed, &[]);
    (0..count)
        .map(|_| {
            let rect1 = random_rect(&mut rng, rho);
            let theta1 = rng.random_range(0..bins);
            let rect2 = random_rect(&mut rng, rho);
            let theta2 = rng.random_range(0..bins);
            SplitShape {
                rect1,
                theta1,
                rect2,
                theta2,
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Threshold proposal

/// The `t` interior quantiles of the sorted values: midpoints of t+1
/// equal-probability slices. All-equal input collapses to one threshold.
pub fn quantile_thresholds(sorted: &[f64], t: usize) -> Vec<f64> {
    assert!(!sorted.is_empty() && t >= 1);
    let n = sorted.len();
    if sorted[0] == sorted[n - 1] {
        return vec![sorted[0]];
    }
    (1..=t)
        .map(|i| {
            let u = i as f64 * n as f64 / (t as f64 + 1.0);
            let lo = sorted[(u.ceil() as usize - 1).min(n - 1)];
            let hi = sorted[(u.floor() as usize).min(n - 1)];
            0.5 * (lo + hi)
        })
        .collect()
}

/// Thresholds for one shape from the observed response ratios of the given
/// samples (analysis helper; the level trainer computes ratios inline).
pub fn propose_thresholds(
    shape: &SplitShape,
    samples: &[TrainSample],
    store: &ChannelStore,
    t: usize,
) -> Vec<f64> {
    let mut ratios: Vec<f64> = samples
        .iter()
        .map(|s| shape.ratio(store.get(s.entry as usize), s.px as i32, s.py as i32))
        .collect();
    ratios.sort_unstable_by(f64::total_cmp);
    quantile_thresholds(&ratios, t)
}

// ---------------------------------------------------------------------------
// Stage 1: pre-selection on the reservoir sample

/// One shape surviving stage 1 with its selected thresholds as
/// (threshold value, global finalist index) in selection order.
#[derive(Debug, Clone)]
pub struct FinalistShape {
    pub shape: SplitShape,
    pub thresholds: Vec<(f64, u32)>,
}

struct ShapeEval {
    thresholds: Vec<f64>,
    gains: Vec<f64>,
    best: f64,
}

fn node_stats_of(syn: &[TrainSample], real: &[TrainSample], bins: usize) -> NodeStats {
    let mut ns = NodeStats::new(bins);
    for s in syn {
        ns.add_syn(s.label as usize, s.bin as usize);
    }
    for s in real {
        ns.add_real(s.bin as usize);
    }
    ns
}

fn argsort_desc(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Score every (shape, threshold) pair on the frontier sample and keep the
/// strongest: the SHAPE_KEEP best shapes by best-threshold gain with their
/// THRESH_KEEP best thresholds each, padded from the remaining ranked pairs
/// up to min(FINALIST_CAP, pairs available). Ties break toward lower shape
/// and threshold indices.
pub fn stage1_select(
    objective: SplitObjective,
    shapes: &[SplitShape],
    syn: &[TrainSample],
    real: &[TrainSample],
    store: &ChannelStore,
    thresholds: usize,
    bins: usize,
) -> Vec<FinalistShape> {
    let parent = node_stats_of(syn, real, bins);
    let f_parent = objective.fitness(&parent);
    let m = parent.syn_count();
    // (sample, is_real) pairs; ratio evaluation order must not matter, and
    // it does not: each shape sorts its own ratios.
    let all: Vec<(TrainSample, bool)> = syn
        .iter()
        .map(|s| (*s, false))
        .chain(real.iter().map(|s| (*s, true)))
        .collect();

    let evals: Vec<ShapeEval> = shapes
        .par_iter()
        .map(|shape| {
            if !real.is_empty() {
                counters::add_target_feature_evals(real.len() as u64);
            }
            let mut order: Vec<(f64, u32)> = all
                .iter()
                .enumerate()
                .map(|(i, (s, _))| {
                    let ch = store.get(s.entry as usize);
                    (shape.ratio(ch, s.px as i32, s.py as i32), i as u32)
                })
                .collect();
            order.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
            let ratios: Vec<f64> = order.iter().map(|r| r.0).collect();
            let thr = quantile_thresholds(&ratios, thresholds);

            let mut left = NodeStats::new(bins);
            let mut right = NodeStats::new(bins);
            let mut gains = Vec::with_capacity(thr.len());
            let mut best = f64::NEG_INFINITY;
            let mut at = 0usize;
            for &t in &thr {
                while at < order.len() && order[at].0 <= t {
                    let (s, is_real) = &all[order[at].1 as usize];
                    if *is_real {
                        left.add_real(s.bin as usize);
                    } else {
                        left.add_syn(s.label as usize, s.bin as usize);
                    }
                    at += 1;
                }
                right.set_sub(&parent, &left);
                let g = objective.gain_given(f_parent, m, &left, &right);
                if g > best {
                    best = g;
                }
                gains.push(g);
            }
            ShapeEval {
                thresholds: thr,
                gains,
                best,
            }
        })
        .collect();

    select_finalists(shapes, &evals)
}

fn select_finalists(shapes: &[SplitShape], evals: &[ShapeEval]) -> Vec<FinalistShape> {
    let ranked_thr: Vec<Vec<usize>> = evals.iter().map(|e| argsort_desc(&e.gains)).collect();
    let best_scores: Vec<f64> = evals.iter().map(|e| e.best).collect();
    let shape_rank = argsort_desc(&best_scores);
    let total: usize = evals.iter().map(|e| e.thresholds.len()).sum();
    let cap = FINALIST_CAP.min(total);

    let mut picks: Vec<(usize, usize)> = Vec::with_capacity(cap);
    'shapes: for &s in shape_rank.iter().take(SHAPE_KEEP) {
        for &ti in ranked_thr[s].iter().take(THRESH_KEEP) {
            picks.push((s, ti));
            if picks.len() == cap {
                break 'shapes;
            }
        }
    }
    if picks.len() < cap {
        // pad with the best remaining pairs, still shape-rank major
        'pad: for (rank_pos, &s) in shape_rank.iter().enumerate() {
            let skip = if rank_pos < SHAPE_KEEP { THRESH_KEEP } else { 0 };
            for &ti in ranked_thr[s].iter().skip(skip) {
                picks.push((s, ti));
                if picks.len() == cap {
                    break 'pad;
                }
            }
        }
    }

    let mut slot: Vec<Option<usize>> = vec![None; shapes.len()];
    let mut out: Vec<FinalistShape> = Vec::new();
    for (g, (s, ti)) in picks.into_iter().enumerate() {
        let at = *slot[s].get_or_insert_with(|| {
            out.push(FinalistShape {
                shape: shapes[s],
                thresholds: Vec::new(),
            });
            out.len() - 1
        });
        out[at].thresholds.push((evals[s].thresholds[ti], g as u32));
    }
    out
}

// ---------------------------------------------------------------------------
// Pass 2 buckets and stage 2

/// Count-bucket layout for the full-data pass over one node: per finalist
/// shape, thresholds sorted ascending split the ratio axis into k+1 buckets,
/// each holding label + per-domain spatial counts. The right child of the
/// j-th sorted threshold is then the bucket suffix j+1..=k.
struct BucketLayout {
    finalists: Vec<FinalistShape>,
    /// Per shape: (threshold value, finalist index) ascending by value.
    sorted: Vec<Vec<(f64, u32)>>,
    offsets: Vec<usize>,
    stride: usize,
    len: usize,
    bins: usize,
    total_finalists: usize,
}

impl BucketLayout {
    fn new(finalists: Vec<FinalistShape>, bins: usize) -> Self {
        let stride = NUM_LABELS + 2 * bins;
        let mut sorted = Vec::with_capacity(finalists.len());
        let mut offsets = Vec::with_capacity(finalists.len());
        let mut len = 0usize;
        let mut total_finalists = 0usize;
        for f in &finalists {
            let mut thr = f.thresholds.clone();
            thr.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            offsets.push(len);
            len += (thr.len() + 1) * stride;
            total_finalists += thr.len();
            sorted.push(thr);
        }
        BucketLayout {
            finalists,
            sorted,
            offsets,
            stride,
            len,
            bins,
            total_finalists,
        }
    }

    /// Route one pixel into the bucket of every finalist shape.
    fn deposit(&self, buf: &mut [u32], ch: &FeatureChannels, s: &TrainSample, is_real: bool) {
        for (i, f) in self.finalists.iter().enumerate() {
            let ratio = f.shape.ratio(ch, s.px as i32, s.py as i32);
            let b = self.sorted[i].partition_point(|e| e.0 < ratio);
            let base = self.offsets[i] + b * self.stride;
            if is_real {
                buf[base + NUM_LABELS + self.bins + s.bin as usize] += 1;
            } else {
                buf[base + s.label as usize] += 1;
                buf[base + NUM_LABELS + s.bin as usize] += 1;
            }
        }
    }

    fn bucket_stats(&self, buf: &[u32], shape: usize, bucket: usize) -> NodeStats {
        let base = self.offsets[shape] + bucket * self.stride;
        let mut labels = [0u32; NUM_LABELS];
        labels.copy_from_slice(&buf[base..base + NUM_LABELS]);
        let syn = buf[base + NUM_LABELS..base + NUM_LABELS + self.bins].to_vec();
        let real = buf[base + NUM_LABELS + self.bins..base + self.stride].to_vec();
        NodeStats {
            syn_labels: LabelHistogram::from_counts(labels),
            syn_spatial: SpatialHistogram::from_counts(syn),
            real_spatial: SpatialHistogram::from_counts(real),
        }
    }

    /// Pick the finalist with the highest full-data gain; ties go to the
    /// lowest finalist index, and a best gain <= 0 seals the node as a leaf.
    fn stage2(
        &self,
        objective: SplitObjective,
        parent: &NodeStats,
        buf: &[u32],
    ) -> Result<Option<(WeakClassifier, f64)>> {
        let f_parent = objective.fitness(parent);
        let m = parent.syn_count();
        let mut by_finalist: Vec<Option<(f64, WeakClassifier)>> = vec![None; self.total_finalists];
        let mut left = NodeStats::new(self.bins);
        for (i, f) in self.finalists.iter().enumerate() {
            let k = self.sorted[i].len();
            let mut right = self.bucket_stats(buf, i, k);
            for j in (0..k).rev() {
                // right currently covers buckets j+1..=k
                left.set_sub(parent, &right);
                let (tval, fid) = self.sorted[i][j];
                let g = objective.gain_given(f_parent, m, &left, &right);
                by_finalist[fid as usize] = Some((g, f.shape.with_threshold(tval)));
                if j > 0 {
                    right.merge(&self.bucket_stats(buf, i, j));
                }
            }
            right.merge(&self.bucket_stats(buf, i, 0));
            if right != *parent {
                return Err(Error::Internal(format!(
                    "full-data pass lost pixels: bucket totals {}/{} vs parent {}/{}",
                    right.syn_count(),
                    right.real_count(),
                    parent.syn_count(),
                    parent.real_count()
                )));
            }
        }
        let mut best: Option<(f64, WeakClassifier)> = None;
        for entry in by_finalist.into_iter().flatten() {
            match &best {
                Some((bg, _)) if entry.0 <= *bg => {}
                _ => best = Some(entry),
            }
        }
        Ok(best.filter(|(g, _)| *g > 0.0).map(|(g, w)| (w, g)))
    }
}

/// Full two-stage selection for one node whose frontier sample is the given
/// data itself (reservoir capacity >= population). Used by the per-level
/// trainer's oracle tests and exposed for miniature-node verification.
pub fn choose_split(
    objective: SplitObjective,
    shapes: &[SplitShape],
    syn: &[TrainSample],
    real: &[TrainSample],
    store: &ChannelStore,
    thresholds: usize,
    bins: usize,
) -> Result<Option<(WeakClassifier, f64)>> {
    let finalists = stage1_select(objective, shapes, syn, real, store, thresholds, bins);
    let layout = BucketLayout::new(finalists, bins);
    let parent = node_stats_of(syn, real, bins);
    let mut buf = vec![0u32; layout.len];
    for s in syn {
        layout.deposit(&mut buf, store.get(s.entry as usize), s, false);
    }
    for s in real {
        layout.deposit(&mut buf, store.get(s.entry as usize), s, true);
    }
    if !real.is_empty() {
        counters::add_target_feature_evals((real.len() * layout.finalists.len()) as u64);
    }
    layout.stage2(objective, &parent, &buf)
}

// ---------------------------------------------------------------------------
// Diagnostics

/// One diagnostics row: the depth-`level` cross-section of tree `tree`,
/// aggregated with synthetic-pixel weights (target-error with target-pixel
/// weights). Columns that are unavailable hold -1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiagRow {
    pub level: u32,
    pub tree: u32,
    pub alpha: f64,
    pub entropy: f64,
    pub chi2: f64,
    pub kl: f64,
    pub target_err: f64,
}

/// Per-node diagnostics snapshot, frozen when a node leaves the frontier.
#[derive(Debug, Clone, Copy)]
struct NodeDiag {
    syn: u64,
    tgt: u64,
    entropy: f64,
    chi2: f64,
    kl: f64,
    target_err: f64,
}

fn node_diag(uses_target: bool, st: &NodeStats, tgt: &[u32; NUM_LABELS]) -> Result<NodeDiag> {
    let entropy = stats::entropy(&st.syn_labels);
    let (chi2, kl) = if uses_target {
        (
            stats::chi2(&st.syn_spatial, &st.real_spatial)?,
            stats::kl(&st.syn_spatial, &st.real_spatial)?,
        )
    } else {
        (-1.0, -1.0)
    };
    let tgt_total: u64 = tgt.iter().map(|&c| c as u64).sum();
    let target_err = if tgt_total > 0 {
        let counts = st.syn_labels.counts();
        let mut pred = 0usize;
        for (i, &c) in counts.iter().enumerate() {
            if c > counts[pred] {
                pred = i;
            }
        }
        1.0 - tgt[pred] as f64 / tgt_total as f64
    } else {
        0.0
    };
    Ok(NodeDiag {
        syn: st.syn_count(),
        tgt: tgt_total,
        entropy,
        chi2,
        kl,
        target_err,
    })
}

fn aggregate_row<'a>(
    level: u32,
    tree: u32,
    alpha: f64,
    uses_target: bool,
    diags: impl Iterator<Item = &'a NodeDiag>,
) -> DiagRow {
    let (mut syn, mut tgt) = (0u64, 0u64);
    let (mut e, mut c, mut k, mut te) = (0.0, 0.0, 0.0, 0.0);
    for d in diags {
        let w = d.syn as f64;
        syn += d.syn;
        e += w * d.entropy;
        if uses_target {
            c += w * d.chi2;
            k += w * d.kl;
        }
        tgt += d.tgt;
        te += d.tgt as f64 * d.target_err;
    }
    let sw = if syn > 0 { syn as f64 } else { 1.0 };
    DiagRow {
        level,
        tree,
        alpha,
        entropy: e / sw,
        chi2: if uses_target { c / sw } else { -1.0 },
        kl: if uses_target { k / sw } else { -1.0 },
        target_err: if tgt > 0 { te / tgt as f64 } else { -1.0 },
    }
}

/// Write rows as `level,tree,alpha,entropy,chi2,kl,target_err`.
pub fn write_diag_csv(path: &Path, rows: &[DiagRow]) -> Result<()> {
    let mut out = String::from("level,tree,alpha,entropy,chi2,kl,target_err\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            r.level, r.tree, r.alpha, r.entropy, r.chi2, r.kl, r.target_err
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Read rows written by `write_diag_csv`.
pub fn read_diag_csv(path: &Path) -> Result<Vec<DiagRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some("level,tree,alpha,entropy,chi2,kl,target_err") {
        return Err(Error::InvalidInput(format!(
            "{}: not a diagnostics CSV (bad header)",
            path.display()
        )));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let bad = || {
            Error::InvalidInput(format!(
                "{} line {}: malformed diagnostics row",
                path.display(),
                i + 2
            ))
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(bad());
        }
        rows.push(DiagRow {
            level: f[0].parse().map_err(|_| bad())?,
            tree: f[1].parse().map_err(|_| bad())?,
            alpha: f[2].parse().map_err(|_| bad())?,
            entropy: f[3].parse().map_err(|_| bad())?,
            chi2: f[4].parse().map_err(|_| bad())?,
            kl: f[5].parse().map_err(|_| bad())?,
            target_err: f[6].parse().map_err(|_| bad())?,
        });
    }
    Ok(rows)
}

/// Weighted mean leaf entropy of a training run: the final-level entropy
/// averaged over trees.
pub fn leaf_entropy(rows: &[DiagRow]) -> f64 {
    let mut per_tree: Vec<(u32, DiagRow)> = Vec::new();
    for r in rows {
        match per_tree.iter_mut().find(|(t, _)| *t == r.tree) {
            Some((_, cur)) if r.level > cur.level => *cur = *r,
            Some(_) => {}
            None => per_tree.push((r.tree, *r)),
        }
    }
    if per_tree.is_empty() {
        return -1.0;
    }
    per_tree.iter().map(|(_, r)| r.entropy).sum::<f64>() / per_tree.len() as f64
}

// ---------------------------------------------------------------------------
// Per-level training

enum BuildNode {
    Pending { depth: u32 },
    Split { weak: WeakClassifier, left: u32, right: u32 },
    Leaf { posterior: [f64; NUM_LABELS], depth: u32 },
}

fn leaf_posterior_of(h: &LabelHistogram) -> [f64; NUM_LABELS] {
    // add-one smoothing keeps every class representable
    let denom = h.total() as f64 + NUM_LABELS as f64;
    std::array::from_fn(|i| (h.counts()[i] as f64 + 1.0) / denom)
}

/// Pass-1 output for one level: per pending node, full counts plus the two
/// reservoirs.
struct LevelTally {
    stats: Vec<NodeStats>,
    tgt_labels: Vec<[u32; NUM_LABELS]>,
    rsv_syn: Vec<Reservoir<TrainSample>>,
    rsv_real: Vec<Reservoir<TrainSample>>,
}

#[allow(clippy::too_many_arguments)]
fn pass1(
    arena: &[BuildNode],
    pending_lo: u32,
    pending_len: usize,
    syn: &DomainData,
    real: &DomainData,
    assign_syn: &mut [u32],
    assign_real: &mut [u32],
    store: &ChannelStore,
    config: &RunConfig,
    tree: u32,
    level: u32,
) -> LevelTally {
    let bins = config.spatial_bins();
    let cap = config.samples as usize;
    let mut tally = LevelTally {
        stats: (0..pending_len).map(|_| NodeStats::new(bins)).collect(),
        tgt_labels: vec![[0u32; NUM_LABELS]; pending_len],
        rsv_syn: (0..pending_len)
            .map(|i| {
                let node = (pending_lo + i as u32) as u64;
                Reservoir::new(cap, rng_from(config.seed, &[2, tree as u64, level as u64, node, 0]))
            })
            .collect(),
        rsv_real: (0..pending_len)
            .map(|i| {
                let node = (pending_lo + i as u32) as u64;
                Reservoir::new(cap, rng_from(config.seed, &[2, tree as u64, level as u64, node, 1]))
            })
            .collect(),
    };

    for (i, s) in syn.samples.iter().enumerate() {
        let mut n = assign_syn[i];
        match &arena[n as usize] {
            BuildNode::Leaf { .. } => continue,
            BuildNode::Split { weak, left, right } => {
                let ch = store.get(s.entry as usize);
                n = match weak.evaluate(ch, s.px as i32, s.py as i32) {
                    Side::Left => *left,
                    Side::Right => *right,
                };
                assign_syn[i] = n;
            }
            BuildNode::Pending { .. } => {}
        }
        let slot = (n - pending_lo) as usize;
        tally.stats[slot].add_syn(s.label as usize, s.bin as usize);
        tally.rsv_syn[slot].push(*s);
    }

    let mut tgt_evals = 0u64;
    for (i, s) in real.samples.iter().enumerate() {
        let mut n = assign_real[i];
        match &arena[n as usize] {
            BuildNode::Leaf { .. } => continue,
            BuildNode::Split { weak, left, right } => {
                let ch = store.get(s.entry as usize);
                tgt_evals += 1;
                n = match weak.evaluate(ch, s.px as i32, s.py as i32) {
                    Side::Left => *left,
                    Side::Right => *right,
                };
                assign_real[i] = n;
            }
            BuildNode::Pending { .. } => {}
        }
        let slot = (n - pending_lo) as usize;
        tally.stats[slot].add_real(s.bin as usize);
        if s.label != NO_LABEL {
            tally.tgt_labels[slot][s.label as usize] += 1;
        }
        tally.rsv_real[slot].push(*s);
    }
    if tgt_evals > 0 {
        counters::add_target_feature_evals(tgt_evals);
    }
    tally
}

/// Upper bound on one full-data-pass accumulation buffer (u32 slots), per
/// node batch. Bounds memory when grids are large.
const BATCH_BUDGET_U32: usize = 16 << 20;
const BATCH_MAX_NODES: usize = 128;

struct BatchTask {
    slot: usize,
    layout: BucketLayout,
    base: usize,
}

#[allow(clippy::too_many_arguments)]
fn accumulate_batch(
    tasks: &[BatchTask],
    pending_lo: u32,
    slot_to_task: &[Option<u32>],
    syn: &DomainData,
    assign_syn: &[u32],
    real: &DomainData,
    assign_real: &[u32],
    store: &ChannelStore,
    workers: usize,
    buf_len: usize,
) -> Vec<u32> {
    // (is_real, entry, range) in manifest order, split into worker groups
    let shard_list: Vec<(bool, u32, Range<usize>)> = syn
        .shards
        .iter()
        .map(|(e, r)| (false, *e, r.clone()))
        .chain(real.shards.iter().map(|(e, r)| (true, *e, r.clone())))
        .collect();
    let group_size = shard_list.len().div_ceil(workers.max(1)).max(1);

    let parts: Vec<(Vec<u32>, u64)> = shard_list
        .par_chunks(group_size)
        .map(|group| {
            let mut buf = vec![0u32; buf_len];
            let mut tgt_evals = 0u64;
            for (is_real, entry, range) in group {
                let ch = store.get(*entry as usize);
                let (samples, assign) = if *is_real {
                    (&real.samples, assign_real)
                } else {
                    (&syn.samples, assign_syn)
                };
                for i in range.clone() {
                    let n = assign[i];
                    if n < pending_lo {
                        continue;
                    }
                    let Some(task_idx) = slot_to_task[(n - pending_lo) as usize] else {
                        continue;
                    };
                    let task = &tasks[task_idx as usize];
                    if *is_real {
                        tgt_evals += task.layout.finalists.len() as u64;
                    }
                    task.layout.deposit(
                        &mut buf[task.base..task.base + task.layout.len],
                        ch,
                        &samples[i],
                        *is_real,
                    );
                }
            }
            (buf, tgt_evals)
        })
        .collect();

    let mut buf = vec![0u32; buf_len];
    let mut tgt_evals = 0u64;
    for (part, e) in parts {
        for (dst, src) in buf.iter_mut().zip(part) {
            *dst += src;
        }
        tgt_evals += e;
    }
    if tgt_evals > 0 {
        counters::add_target_feature_evals(tgt_evals);
    }
    buf
}

#[allow(clippy::too_many_arguments)]
fn train_tree(
    tree_idx: u32,
    syn: &DomainData,
    real: &DomainData,
    store: &ChannelStore,
    objective: SplitObjective,
    config: &RunConfig,
    rows: &mut Vec<DiagRow>,
) -> Result<Tree> {
    let bins = config.spatial_bins();
    let uses_target = objective.uses_target();
    let alpha = objective.alpha();
    let workers = config.effective_workers();

    let mut arena: Vec<BuildNode> = vec![BuildNode::Pending { depth: 0 }];
    let mut assign_syn = vec![0u32; syn.samples.len()];
    let mut assign_real = vec![0u32; real.samples.len()];
    let mut pending_lo = 0u32;
    let mut pending_len = 1usize;
    let mut leaf_diags: Vec<NodeDiag> = Vec::new();

    for level in 0..=config.depth {
        let tally = pass1(
            &arena,
            pending_lo,
            pending_len,
            syn,
            real,
            &mut assign_syn,
            &mut assign_real,
            store,
            config,
            tree_idx,
            level,
        );

        // decide which frontier nodes stay splittable
        let mut split_slots: Vec<usize> = Vec::new();
        let mut live_diags: Vec<NodeDiag> = Vec::new();
        for slot in 0..pending_len {
            let st = &tally.stats[slot];
            let diag = node_diag(uses_target, st, &tally.tgt_labels[slot])?;
            let force_leaf = level == config.depth
                || st.syn_count() < config.min_syn as u64
                || objective.fitness(st) == 0.0;
            if force_leaf {
                let node = (pending_lo + slot as u32) as usize;
                arena[node] = BuildNode::Leaf {
                    posterior: leaf_posterior_of(&st.syn_labels),
                    depth: level,
                };
                leaf_diags.push(diag);
            } else {
                split_slots.push(slot);
                live_diags.push(diag);
            }
        }

        let total_syn: u64 = leaf_diags.iter().chain(live_diags.iter()).map(|d| d.syn).sum();
        if total_syn != syn.samples.len() as u64 {
            return Err(Error::Internal(format!(
                "level {level} cross-section holds {total_syn} synthetic pixels, expected {}",
                syn.samples.len()
            )));
        }
        rows.push(aggregate_row(
            level,
            tree_idx,
            alpha,
            uses_target,
            leaf_diags.iter().chain(live_diags.iter()),
        ));

        if level == config.depth {
            break;
        }

        // stage 1 per node, then the batched full-data pass and stage 2
        let next_lo = arena.len() as u32;
        let mut batch_start = 0usize;
        while batch_start < split_slots.len() {
            let mut batch: Vec<BatchTask> = Vec::new();
            let mut buf_len = 0usize;
            while batch_start + batch.len() < split_slots.len() && batch.len() < BATCH_MAX_NODES {
                let slot = split_slots[batch_start + batch.len()];
                let node = pending_lo + slot as u32;
                let seed = derive_seed(
                    config.seed,
                    &[1, tree_idx as u64, level as u64, node as u64],
                );
                let shapes = propose_candidates(
                    seed,
                    config.candidates as usize,
                    config.rho,
                    config.orient_bins as usize,
                );
                let finalists = stage1_select(
                    objective,
                    &shapes,
                    tally.rsv_syn[slot].items(),
                    tally.rsv_real[slot].items(),
                    store,
                    config.thresholds as usize,
                    bins,
                );
                let layout = BucketLayout::new(finalists, bins);
                if !batch.is_empty() && buf_len + layout.len > BATCH_BUDGET_U32 {
                    break;
                }
                let base = buf_len;
                buf_len += layout.len;
                batch.push(BatchTask { slot, layout, base });
            }

            let mut slot_to_task: Vec<Option<u32>> = vec![None; pending_len];
            for (t, task) in batch.iter().enumerate() {
                slot_to_task[task.slot] = Some(t as u32);
            }
            let buf = accumulate_batch(
                &batch,
                pending_lo,
                &slot_to_task,
                syn,
                &assign_syn,
                real,
                &assign_real,
                store,
                workers,
                buf_len,
            );

            for task in &batch {
                let node = (pending_lo + task.slot as u32) as usize;
                let st = &tally.stats[task.slot];
                let choice = task.layout.stage2(
                    objective,
                    st,
                    &buf[task.base..task.base + task.layout.len],
                )?;
                match choice {
                    Some((weak, _gain)) => {
                        let left = arena.len() as u32;
                        arena.push(BuildNode::Pending { depth: level + 1 });
                        arena.push(BuildNode::Pending { depth: level + 1 });
                        arena[node] = BuildNode::Split {
                            weak,
                            left,
                            right: left + 1,
                        };
                    }
                    None => {
                        arena[node] = BuildNode::Leaf {
                            posterior: leaf_posterior_of(&st.syn_labels),
                            depth: level,
                        };
                        leaf_diags.push(node_diag(uses_target, st, &tally.tgt_labels[task.slot])?);
                    }
                }
            }
            batch_start += batch.len();
        }
        pending_lo = next_lo;
        pending_len = arena.len() - next_lo as usize;
    }

    let nodes = arena
        .into_iter()
        .map(|n| match n {
            BuildNode::Split { weak, left, right } => Ok(TreeNode::Split { weak, left, right }),
            BuildNode::Leaf { posterior, depth } => Ok(TreeNode::Leaf { posterior, depth }),
            BuildNode::Pending { depth } => Err(Error::Internal(format!(
                "undecided frontier node survived training at depth {depth}"
            ))),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Tree { nodes })
}

// ---------------------------------------------------------------------------
// Forest training

/// A trained forest plus its per-level diagnostics rows.
pub struct TrainOutput {
    pub forest: Forest,
    pub diagnostics: Vec<DiagRow>,
}

/// Mean labelled-area fractions and the location prior, both measured on the
/// full-resolution source label maps.
fn part_stats(
    manifest: &DatasetManifest,
    prior_grid: u32,
) -> Result<([f64; crate::data_model::NUM_PARTS], LocationPrior)> {
    use crate::data_model::{spatial_bin, NUM_PARTS};
    let cells_per_part = (prior_grid * prior_grid) as usize;
    let mut phi_sum = [0.0f64; NUM_PARTS];
    let mut counts = vec![vec![0u64; cells_per_part]; NUM_PARTS];
    let mut images = 0usize;
    for (_, entry) in manifest.entries_in(Domain::Source) {
        let path = entry.labels.as_ref().ok_or_else(|| {
            Error::Internal("source entry without labels survived manifest loading".into())
        })?;
        let map = LabelMap::load(path)?;
        let mut part_px = [0u64; NUM_PARTS];
        for y in 0..map.h {
            for x in 0..map.w {
                let label = map.get(x, y);
                if label >= BACKGROUND {
                    continue;
                }
                // labelled pixels outside the box cannot be trained on or
                // extracted, so they do not count toward phi or the prior
                let Ok(cell) = spatial_bin(x as i32, y as i32, &entry.bbox, prior_grid) else {
                    continue;
                };
                part_px[label as usize] += 1;
                counts[label as usize][cell] += 1;
            }
        }
        let area = entry.bbox.area() as f64;
        for p in 0..NUM_PARTS {
            phi_sum[p] += part_px[p] as f64 / area;
        }
        images += 1;
    }
    if images == 0 {
        return Err(Error::InvalidInput("no source entries in manifest".into()));
    }
    let mut phi = [0.0f64; NUM_PARTS];
    for p in 0..NUM_PARTS {
        phi[p] = phi_sum[p] / images as f64;
        if phi[p] <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "part {p} never appears in the source label maps"
            )));
        }
    }
    const SMOOTH: f64 = 1e-3;
    let cells = counts
        .into_iter()
        .map(|c| {
            let total: f64 = c.iter().map(|&v| v as f64 + SMOOTH).sum();
            c.into_iter().map(|v| (v as f64 + SMOOTH) / total).collect()
        })
        .collect();
    Ok((
        phi,
        LocationPrior {
            grid: prior_grid,
            cells,
        },
    ))
}

/// Train a forest on the manifest's source and target entries.
pub fn train_forest(
    manifest: &DatasetManifest,
    objective: SplitObjective,
    config: &RunConfig,
) -> Result<TrainOutput> {
    config.validate()?;
    if manifest.count(Domain::Source) == 0 {
        return Err(Error::InvalidInput("manifest has no source entries".into()));
    }
    if manifest.count(Domain::Target) == 0 {
        return Err(Error::InvalidInput("manifest has no target entries".into()));
    }

    let uses_target = objective.uses_target();
    let domains: Vec<Domain> = if uses_target {
        vec![Domain::Source, Domain::Target]
    } else {
        vec![Domain::Source]
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.effective_workers())
        .build()
        .map_err(|e| Error::Internal(format!("thread pool: {e}")))?;

    pool.install(|| {
        let store = ChannelStore::build(manifest, &domains, config.orient_bins as usize)?;
        let syn = build_domain(manifest, Domain::Source, config)?;
        if syn.samples.is_empty() {
            return Err(Error::InvalidInput("source entries yield no pixels".into()));
        }
        let real = if uses_target {
            let mut real = build_domain(manifest, Domain::Target, config)?;
            attach_analysis_labels(manifest, &mut real)?;
            real
        } else {
            DomainData::empty()
        };

        let (phi, prior) = part_stats(manifest, config.prior_grid)?;

        let mut diagnostics = Vec::new();
        let mut trees = Vec::with_capacity(config.trees as usize);
        for t in 0..config.trees {
            trees.push(train_tree(
                t,
                &syn,
                &real,
                &store,
                objective,
                config,
                &mut diagnostics,
            )?);
        }

        let mut stored = config.clone();
        stored.alpha = objective.alpha();
        Ok(TrainOutput {
            forest: Forest {
                config: stored,
                trees,
                phi,
                prior,
            },
            diagnostics,
        })
    })
}

// ---------------------------------------------------------------------------
// Post-hoc diagnostics over a finished forest

/// Recompute the per-level diagnostics of a trained forest by routing the
/// manifest's source and target pixels through it level by level. Unlike
/// training-time rows, this fills chi2/KL even for alpha = 1 models (which
/// never touch target pixels while training).
pub fn recompute_diagnostics(forest: &Forest, manifest: &DatasetManifest) -> Result<Vec<DiagRow>> {
    let config = &forest.config;
    if manifest.count(Domain::Target) == 0 {
        return Err(Error::InvalidInput("manifest has no target entries".into()));
    }
    let store = ChannelStore::build(
        manifest,
        &[Domain::Source, Domain::Target],
        config.orient_bins as usize,
    )?;
    let syn = build_domain(manifest, Domain::Source, config)?;
    let mut real = build_domain(manifest, Domain::Target, config)?;
    attach_analysis_labels(manifest, &mut real)?;
    let bins = config.spatial_bins();

    let mut rows = Vec::new();
    for (t, tree) in forest.trees.iter().enumerate() {
        let mut assign_syn = vec![0u32; syn.samples.len()];
        let mut assign_real = vec![0u32; real.samples.len()];
        for level in 0..=config.depth {
            let mut map: std::collections::BTreeMap<u32, (NodeStats, [u32; NUM_LABELS])> =
                std::collections::BTreeMap::new();
            for (i, s) in syn.samples.iter().enumerate() {
                let e = map
                    .entry(assign_syn[i])
                    .or_insert_with(|| (NodeStats::new(bins), [0; NUM_LABELS]));
                e.0.add_syn(s.label as usize, s.bin as usize);
            }
            for (i, s) in real.samples.iter().enumerate() {
                let e = map
                    .entry(assign_real[i])
                    .or_insert_with(|| (NodeStats::new(bins), [0; NUM_LABELS]));
                e.0.add_real(s.bin as usize);
                if s.label != NO_LABEL {
                    e.1[s.label as usize] += 1;
                }
            }
            let diags = map
                .values()
                .map(|(st, tgt)| node_diag(true, st, tgt))
                .collect::<Result<Vec<_>>>()?;
            rows.push(aggregate_row(
                level,
                t as u32,
                config.alpha,
                true,
                diags.iter(),
            ));
            if level == config.depth {
                break;
            }
            let route = |samples: &[TrainSample], assign: &mut [u32]| {
                for (i, s) in samples.iter().enumerate() {
                    if let TreeNode::Split { weak, left, right } = &tree.nodes[assign[i] as usize] {
                        let ch = store.get(s.entry as usize);
                        assign[i] = match weak.evaluate(ch, s.px as i32, s.py as i32) {
                            Side::Left => *left,
                            Side::Right => *right,
                        };
                    }
                }
            };
            route(&syn.samples, &mut assign_syn);
            route(&real.samples, &mut assign_real);
        }
    }
    Ok(rows)
}
