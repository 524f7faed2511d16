//! Histograms and the split-objective kernels.
//!
//! A node's fitness mixes the label entropy of its synthetic pixels with the
//! chi-square distance between the synthetic and real spatial-bin histograms;
//! the gain of a weak classifier is the synthetic-count-weighted drop in
//! fitness across the split.

use crate::error::{Error, Result};

/// Number of part classes including background.
pub const NUM_LABELS: usize = 8;

const LN_LABELS: f64 = 2.0794415416798357; // ln(8)

/// Counts over the 8 part labels.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LabelHistogram {
    counts: [u32; NUM_LABELS],
    total: u64,
}

impl LabelHistogram {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_counts(counts: [u32; NUM_LABELS]) -> Self {
        let total = counts.iter().map(|&c| c as u64).sum();
        LabelHistogram { counts, total }
    }

    pub fn add(&mut self, label: usize) {
        self.counts[label] += 1;
        self.total += 1;
    }

    pub fn counts(&self) -> &[u32; NUM_LABELS] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn merge(&mut self, other: &LabelHistogram) {
        for (a, b) in self.counts.iter_mut().zip(other.counts.iter()) {
            *a += b;
        }
        self.total += other.total;
    }

    /// self = a - b, where b is bin-wise <= a.
    fn set_sub(&mut self, a: &LabelHistogram, b: &LabelHistogram) {
        for i in 0..NUM_LABELS {
            self.counts[i] = a.counts[i] - b.counts[i];
        }
        self.total = a.total - b.total;
    }
}

/// Counts over the B = G^2 spatial bins of the bounding-box grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpatialHistogram {
    counts: Vec<u32>,
    total: u64,
}

impl SpatialHistogram {
    pub fn new(bins: usize) -> Self {
        SpatialHistogram {
            counts: vec![0; bins],
            total: 0,
        }
    }

    pub fn from_counts(counts: Vec<u32>) -> Self {
        let total = counts.iter().map(|&c| c as u64).sum();
        SpatialHistogram { counts, total }
    }

    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    pub fn add(&mut self, bin: usize) {
        self.counts[bin] += 1;
        self.total += 1;
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn merge(&mut self, other: &SpatialHistogram) {
        debug_assert_eq!(self.counts.len(), other.counts.len());
        for (a, b) in self.counts.iter_mut().zip(other.counts.iter()) {
            *a += b;
        }
        self.total += other.total;
    }

    fn set_sub(&mut self, a: &SpatialHistogram, b: &SpatialHistogram) {
        for i in 0..self.counts.len() {
            self.counts[i] = a.counts[i] - b.counts[i];
        }
        self.total = a.total - b.total;
    }
}

/// Per-node accumulation: synthetic label + spatial histograms and the real
/// (target-domain) spatial histogram.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeStats {
    pub syn_labels: LabelHistogram,
    pub syn_spatial: SpatialHistogram,
    pub real_spatial: SpatialHistogram,
}

impl NodeStats {
    pub fn new(bins: usize) -> Self {
        NodeStats {
            syn_labels: LabelHistogram::new(),
            syn_spatial: SpatialHistogram::new(bins),
            real_spatial: SpatialHistogram::new(bins),
        }
    }

    /// Synthetic pixel count |T_S(n)|.
    pub fn syn_count(&self) -> u64 {
        self.syn_labels.total()
    }

    /// Real pixel count |T_R(n)|.
    pub fn real_count(&self) -> u64 {
        self.real_spatial.total()
    }

    pub fn add_syn(&mut self, label: usize, bin: usize) {
        self.syn_labels.add(label);
        self.syn_spatial.add(bin);
    }

    pub fn add_real(&mut self, bin: usize) {
        self.real_spatial.add(bin);
    }

    pub fn merge(&mut self, other: &NodeStats) {
        self.syn_labels.merge(&other.syn_labels);
        self.syn_spatial.merge(&other.syn_spatial);
        self.real_spatial.merge(&other.real_spatial);
    }

    /// self = a - b without allocating; used by the threshold sweep to derive
    /// right-child stats from parent and left.
    pub fn set_sub(&mut self, a: &NodeStats, b: &NodeStats) {
        self.syn_labels.set_sub(&a.syn_labels, &b.syn_labels);
        self.syn_spatial.set_sub(&a.syn_spatial, &b.syn_spatial);
        self.real_spatial.set_sub(&a.real_spatial, &b.real_spatial);
    }
}

/// Shannon entropy of the normalized histogram, in units of ln(8) so the
/// result lies in [0, 1]. Empty histogram yields 0.
pub fn entropy(h: &LabelHistogram) -> f64 {
    let total = h.total();
    if total == 0 {
        return 0.0;
    }
    let inv = 1.0 / total as f64;
    let mut e = 0.0;
    for &c in h.counts() {
        if c > 0 {
            let p = c as f64 * inv;
            e -= p * p.ln();
        }
    }
    e / LN_LABELS
}

fn chi2_counts(p: &[u32], p_total: u64, q: &[u32], q_total: u64) -> f64 {
    if p_total == 0 || q_total == 0 {
        return 1.0;
    }
    let pi = 1.0 / p_total as f64;
    let qi = 1.0 / q_total as f64;
    let mut d = 0.0;
    for (&a, &b) in p.iter().zip(q.iter()) {
        if a == 0 && b == 0 {
            continue;
        }
        let pa = a as f64 * pi;
        let qb = b as f64 * qi;
        let diff = pa - qb;
        d += diff * diff / (pa + qb);
    }
    0.5 * d
}

/// Symmetric chi-square distance between normalized histograms, in [0, 1].
/// An empty histogram on either side counts as maximal distance 1.
pub fn chi2(p: &SpatialHistogram, q: &SpatialHistogram) -> Result<f64> {
    if p.bins() != q.bins() {
        return Err(Error::InvalidInput(format!(
            "chi2: histogram sizes differ ({} vs {})",
            p.bins(),
            q.bins()
        )));
    }
    Ok(chi2_counts(p.counts(), p.total(), q.counts(), q.total()))
}

/// KL divergence KL(p || q) of the smoothed, normalized histograms.
/// Each bin count receives +1e-3 before normalization. Diagnostics only.
pub fn kl(p: &SpatialHistogram, q: &SpatialHistogram) -> Result<f64> {
    if p.bins() != q.bins() {
        return Err(Error::InvalidInput(format!(
            "kl: histogram sizes differ ({} vs {})",
            p.bins(),
            q.bins()
        )));
    }
    const SMOOTH: f64 = 1e-3;
    let bins = p.bins() as f64;
    let pt = p.total() as f64 + SMOOTH * bins;
    let qt = q.total() as f64 + SMOOTH * bins;
    let mut d = 0.0;
    for (&a, &b) in p.counts().iter().zip(q.counts().iter()) {
        let pa = (a as f64 + SMOOTH) / pt;
        let qb = (b as f64 + SMOOTH) / qt;
        d += pa * (pa / qb).ln();
    }
    Ok(d)
}

/// Node fitness f(n) = alpha * E + (1 - alpha) * d_chi2. A node without
/// synthetic mass has fitness 0 and never splits.
pub fn fitness(ns: &NodeStats, alpha: f64) -> f64 {
    if ns.syn_count() == 0 {
        return 0.0;
    }
    // endpoint shortcuts: 1*e + 0*d == e and 0*e + 1*d == d bitwise for the
    // finite nonnegative values both terms take, so these skip work only
    if alpha == 1.0 {
        return entropy(&ns.syn_labels);
    }
    let d = chi2_counts(
        ns.syn_spatial.counts(),
        ns.syn_spatial.total(),
        ns.real_spatial.counts(),
        ns.real_spatial.total(),
    );
    if alpha == 0.0 {
        return d;
    }
    let e = entropy(&ns.syn_labels);
    alpha * e + (1.0 - alpha) * d
}

/// Gain of a split: IG = f(n) - (m_l/m) f(n_l) - (m_r/m) f(n_r), with both
/// fitness terms weighted by synthetic counts.
pub fn gain(parent: &NodeStats, left: &NodeStats, right: &NodeStats, alpha: f64) -> Result<f64> {
    let m = parent.syn_count();
    let k = parent.real_count();
    if left.syn_count() + right.syn_count() != m || left.real_count() + right.real_count() != k {
        return Err(Error::Internal(format!(
            "split does not conserve counts: syn {}+{} vs {}, real {}+{} vs {}",
            left.syn_count(),
            right.syn_count(),
            m,
            left.real_count(),
            right.real_count(),
            k
        )));
    }
    if m == 0 {
        return Ok(0.0);
    }
    let inv_m = 1.0 / m as f64;
    let wl = left.syn_count() as f64 * inv_m;
    let wr = right.syn_count() as f64 * inv_m;
    Ok(fitness(parent, alpha) - wl * fitness(left, alpha) - wr * fitness(right, alpha))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lh(counts: [u32; NUM_LABELS]) -> LabelHistogram {
        LabelHistogram::from_counts(counts)
    }

    fn sh(counts: &[u32]) -> SpatialHistogram {
        SpatialHistogram::from_counts(counts.to_vec())
    }

    #[test]
    fn entropy_uniform_is_one() {
        let h = lh([5, 5, 5, 5, 5, 5, 5, 5]);
        assert!((entropy(&h) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn entropy_point_mass_is_zero() {
        let h = lh([0, 0, 42, 0, 0, 0, 0, 0]);
        assert_eq!(entropy(&h), 0.0);
    }

    #[test]
    fn entropy_two_equal_classes() {
        let h = lh([50, 50, 0, 0, 0, 0, 0, 0]);
        let expect = 2f64.ln() / 8f64.ln();
        assert!((entropy(&h) - expect).abs() < 1e-12);
    }

    #[test]
    fn entropy_empty_is_zero() {
        assert_eq!(entropy(&LabelHistogram::new()), 0.0);
    }

    #[test]
    fn chi2_identical_is_zero() {
        let p = sh(&[3, 1, 4]);
        assert_eq!(chi2(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn chi2_disjoint_is_one() {
        let p = sh(&[10, 0, 2, 0]);
        let q = sh(&[0, 7, 0, 1]);
        assert!((chi2(&p, &q).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn chi2_hand_value() {
        // p_hat = (1/2, 1/2), q_hat = (1/4, 3/4):
        // 0.5 * [(1/4)^2 / (3/4) + (1/4)^2 / (5/4)] = 1/15
        let p = sh(&[2, 2]);
        let q = sh(&[1, 3]);
        assert!((chi2(&p, &q).unwrap() - 1.0 / 15.0).abs() < 1e-12);
    }

    #[test]
    fn chi2_empty_side_is_one() {
        let p = sh(&[0, 0]);
        let q = sh(&[1, 3]);
        assert_eq!(chi2(&p, &q).unwrap(), 1.0);
        assert_eq!(chi2(&q, &p).unwrap(), 1.0);
        assert_eq!(chi2(&p, &p).unwrap(), 1.0);
    }

    #[test]
    fn chi2_size_mismatch_rejected() {
        let p = sh(&[1, 2]);
        let q = sh(&[1, 2, 3]);
        assert!(chi2(&p, &q).is_err());
    }

    #[test]
    fn kl_identical_is_zero() {
        let p = sh(&[4, 4, 2]);
        assert!(kl(&p, &p).unwrap().abs() <= 1e-12);
    }

    #[test]
    fn kl_matches_independent_computation() {
        // counts p = (10, 0), q = (5, 5), smoothing 1e-3 per bin.
        let p = sh(&[10, 0]);
        let q = sh(&[5, 5]);
        let pt: f64 = 10.0 + 2e-3;
        let qt: f64 = 10.0 + 2e-3;
        let p0 = 10.001 / pt;
        let p1 = 0.001 / pt;
        let q0 = 5.001 / qt;
        let q1 = 5.001 / qt;
        let expect = p0 * (p0 / q0).ln() + p1 * (p1 / q1).ln();
        assert!((kl(&p, &q).unwrap() - expect).abs() < 1e-12);
    }

    fn ns(labels: [u32; NUM_LABELS], syn_sp: &[u32], real_sp: &[u32]) -> NodeStats {
        let stats = NodeStats {
            syn_labels: lh(labels),
            syn_spatial: sh(syn_sp),
            real_spatial: sh(real_sp),
        };
        assert_eq!(stats.syn_labels.total(), stats.syn_spatial.total());
        stats
    }

    #[test]
    fn fitness_alpha_endpoints() {
        let stats = ns([3, 1, 0, 0, 0, 0, 0, 0], &[2, 2], &[1, 3]);
        let e = entropy(&stats.syn_labels);
        let d = chi2(&stats.syn_spatial, &stats.real_spatial).unwrap();
        assert_eq!(fitness(&stats, 1.0), e);
        assert_eq!(fitness(&stats, 0.0), d);
    }

    #[test]
    fn fitness_hand_value() {
        // entropy = ln2/ln8 = 1/3, chi2 = 1/15, alpha = 0.2
        let stats = ns([2, 2, 0, 0, 0, 0, 0, 0], &[2, 2], &[1, 3]);
        let expect = 0.2 * (2f64.ln() / 8f64.ln()) + 0.8 * (1.0 / 15.0);
        assert!((fitness(&stats, 0.2) - expect).abs() < 1e-12);
    }

    #[test]
    fn fitness_empty_node_is_zero() {
        let empty = NodeStats::new(4);
        assert_eq!(fitness(&empty, 0.3), 0.0);
        // even though an empty node would have chi2 = 1 against anything
        let mut with_real = NodeStats::new(4);
        with_real.add_real(1);
        assert_eq!(fitness(&with_real, 0.0), 0.0);
    }

    #[test]
    fn gain_null_split_is_zero() {
        let parent = ns([3, 2, 0, 0, 0, 0, 0, 0], &[3, 2], &[2, 2]);
        let empty = NodeStats::new(2);
        let g = gain(&parent, &parent.clone(), &empty, 0.4).unwrap();
        assert_eq!(g, 0.0);
    }

    #[test]
    fn gain_pure_split_removes_all_entropy() {
        // parent (50,50), children pure; alpha = 1. The full normalized
        // parent entropy ln2/ln8 is removed.
        let parent = ns([50, 50, 0, 0, 0, 0, 0, 0], &[100], &[]);
        let left = ns([50, 0, 0, 0, 0, 0, 0, 0], &[50], &[]);
        let right = ns([0, 50, 0, 0, 0, 0, 0, 0], &[50], &[]);
        let g = gain(&parent, &left, &right, 1.0).unwrap();
        let expect = 2f64.ln() / 8f64.ln();
        assert!((g - expect).abs() < 1e-12);
    }

    #[test]
    fn gain_alpha1_ignores_real_histograms() {
        let parent = ns([4, 4, 0, 0, 0, 0, 0, 0], &[4, 4], &[3, 1]);
        let left = ns([4, 0, 0, 0, 0, 0, 0, 0], &[4, 0], &[3, 0]);
        let right = ns([0, 4, 0, 0, 0, 0, 0, 0], &[0, 4], &[0, 1]);
        let g1 = gain(&parent, &left, &right, 1.0).unwrap();

        let mut parent2 = parent.clone();
        let mut left2 = left.clone();
        let mut right2 = right.clone();
        parent2.real_spatial = sh(&[0, 9]);
        left2.real_spatial = sh(&[0, 9]);
        right2.real_spatial = sh(&[0, 0]);
        let g2 = gain(&parent2, &left2, &right2, 1.0).unwrap();
        assert_eq!(g1.to_bits(), g2.to_bits());
    }

    #[test]
    fn gain_rejects_nonconserved_counts() {
        let parent = ns([4, 0, 0, 0, 0, 0, 0, 0], &[4], &[]);
        let left = ns([1, 0, 0, 0, 0, 0, 0, 0], &[1], &[]);
        let right = ns([1, 0, 0, 0, 0, 0, 0, 0], &[1], &[]);
        assert!(matches!(
            gain(&parent, &left, &right, 1.0),
            Err(Error::Internal(_))
        ));
    }

    #[test]
    fn gain_alpha1_matches_classical_information_gain() {
        use rand::Rng;
        let mut rng = crate::rng::rng_from(7, &[b'i' as u64]);
        for _ in 0..20 {
            let mut parent = NodeStats::new(4);
            let mut left = NodeStats::new(4);
            let mut right = NodeStats::new(4);
            for _ in 0..rng.random_range(2..40) {
                let label = rng.random_range(0..NUM_LABELS);
                let bin = rng.random_range(0..4);
                parent.add_syn(label, bin);
                if rng.random_range(0..2) == 0 {
                    left.add_syn(label, bin);
                } else {
                    right.add_syn(label, bin);
                }
            }
            let g = gain(&parent, &left, &right, 1.0).unwrap();

            // independent oracle: weighted entropy drop, normalized by ln 8
            let h = |counts: &[u32; NUM_LABELS]| -> f64 {
                let total: f64 = counts.iter().map(|&c| c as f64).sum();
                if total == 0.0 {
                    return 0.0;
                }
                let mut e = 0.0;
                for &c in counts {
                    if c > 0 {
                        let p = c as f64 / total;
                        e -= p * p.ln();
                    }
                }
                e / 8f64.ln()
            };
            let m = parent.syn_count() as f64;
            let oracle = h(parent.syn_labels.counts())
                - (left.syn_count() as f64 / m) * h(left.syn_labels.counts())
                - (right.syn_count() as f64 / m) * h(right.syn_labels.counts());
            assert!((g - oracle).abs() < 1e-12, "gain {g} vs oracle {oracle}");
        }
    }

    proptest! {
        #[test]
        fn chi2_symmetric_and_bounded(
            p in proptest::collection::vec(0u32..50, 8),
            q in proptest::collection::vec(0u32..50, 8),
        ) {
            let hp = sh(&p);
            let hq = sh(&q);
            let d1 = chi2(&hp, &hq).unwrap();
            let d2 = chi2(&hq, &hp).unwrap();
            prop_assert_eq!(d1.to_bits(), d2.to_bits());
            prop_assert!((0.0..=1.0 + 1e-12).contains(&d1));
        }

        #[test]
        fn kl_nonnegative(
            p in proptest::collection::vec(0u32..50, 6),
            q in proptest::collection::vec(0u32..50, 6),
        ) {
            let d = kl(&sh(&p), &sh(&q)).unwrap();
            prop_assert!(d >= -1e-12);
        }

        #[test]
        fn entropy_in_unit_interval(counts in proptest::collection::vec(0u32..1000, 8)) {
            let mut arr = [0u32; NUM_LABELS];
            arr.copy_from_slice(&counts);
            let e = entropy(&lh(arr));
            prop_assert!((0.0..=1.0 + 1e-12).contains(&e));
        }

        #[test]
        fn fitness_is_linear_in_alpha(
            labels in proptest::collection::vec(0u32..20, 8),
            syn in proptest::collection::vec(0u32..20, 4),
            real in proptest::collection::vec(0u32..20, 4),
            alpha in 0.0f64..1.0,
        ) {
            let mut arr = [0u32; NUM_LABELS];
            arr.copy_from_slice(&labels);
            let total: u32 = arr.iter().sum();
            let mut syn = syn;
            // keep the syn spatial histogram total consistent with labels
            syn[0] += total.saturating_sub(syn.iter().sum());
            while syn.iter().sum::<u32>() > total {
                let i = syn.iter().position(|&c| c > 0).unwrap();
                syn[i] -= 1;
            }
            let stats = NodeStats {
                syn_labels: lh(arr),
                syn_spatial: sh(&syn),
                real_spatial: sh(&real),
            };
            prop_assume!(stats.syn_labels.total() == stats.syn_spatial.total());
            let f = fitness(&stats, alpha);
            let expect = alpha * fitness(&stats, 1.0) + (1.0 - alpha) * fitness(&stats, 0.0);
            prop_assert!((f - expect).abs() < 1e-12);
        }
    }
}
