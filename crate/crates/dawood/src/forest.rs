//! Forest structure and the binary model format.
//!
//! A model file starts with the magic "DAWF", a format version and the run
//! configuration, followed by each tree as a breadth-first node array. A
//! split stores its weak classifier, a leaf its 8-way posterior; child links
//! are implicit in the breadth-first order (the children of the i-th split
//! are the next two unassigned array slots). Part-area fractions and the
//! location-prior grids complete the file. Everything is little-endian.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::config::RunConfig;
use crate::counters;
use crate::data_model::{spatial_bin, BoundingBox, NUM_PARTS};
use crate::error::{Error, Result};
use crate::features::{FeatureChannels, OffsetRect, Side, WeakClassifier};
use crate::stats::NUM_LABELS;

const MAGIC: &[u8; 4] = b"DAWF";
const VERSION: u32 = 1;

/// Per-part spatial distribution over a P x P grid of normalized
/// bounding-box coordinates; strictly positive and normalized per part.
/// The background class uses an implicit uniform prior.
#[derive(Debug, Clone, PartialEq)]
pub struct LocationPrior {
    pub grid: u32,
    /// One normalized P*P grid per foreground part, row-major.
    pub cells: Vec<Vec<f64>>,
}

impl LocationPrior {
    /// Uniform prior, the identity under modulation.
    pub fn uniform(grid: u32) -> Self {
        let cells = (0..NUM_PARTS)
            .map(|_| vec![1.0 / (grid * grid) as f64; (grid * grid) as usize])
            .collect();
        LocationPrior { grid, cells }
    }

    /// Prior weight of a part at a pixel inside the box.
    pub fn value(&self, part: usize, px: i32, py: i32, bbox: &BoundingBox) -> f64 {
        let cell = spatial_bin(px, py, bbox, self.grid).expect("pixel inside bbox");
        self.cells[part][cell]
    }

    /// The uniform per-cell weight used for the background class.
    pub fn background_value(&self) -> f64 {
        1.0 / (self.grid * self.grid) as f64
    }

    fn validate(&self) -> Result<()> {
        if self.cells.len() != NUM_PARTS {
            return Err(Error::Model(format!(
                "prior has {} parts, expected {NUM_PARTS}",
                self.cells.len()
            )));
        }
        let bins = (self.grid * self.grid) as usize;
        for (part, grid) in self.cells.iter().enumerate() {
            if grid.len() != bins {
                return Err(Error::Model(format!(
                    "prior grid for part {part} has {} cells, expected {bins}",
                    grid.len()
                )));
            }
            let sum: f64 = grid.iter().sum();
            if grid.iter().any(|&v| !(v > 0.0)) || (sum - 1.0).abs() > 1e-6 {
                return Err(Error::Model(format!(
                    "prior grid for part {part} is not a positive distribution (sum {sum})"
                )));
            }
        }
        Ok(())
    }
}

/// One node of a trained tree.
#[derive(Debug, Clone, PartialEq)]
pub enum TreeNode {
    Split {
        weak: WeakClassifier,
        left: u32,
        right: u32,
    },
    Leaf {
        posterior: [f64; NUM_LABELS],
        depth: u32,
    },
}

/// A decision tree as a breadth-first node array rooted at index 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
}

impl Tree {
    /// Posterior of the leaf a pixel routes to.
    pub fn leaf_posterior(&self, ch: &FeatureChannels, px: i32, py: i32) -> &[f64; NUM_LABELS] {
        let mut idx = 0usize;
        loop {
            match &self.nodes[idx] {
                TreeNode::Split { weak, left, right } => {
                    counters::add_split_evals(1);
                    idx = match weak.evaluate(ch, px, py) {
                        Side::Left => *left as usize,
                        Side::Right => *right as usize,
                    };
                }
                TreeNode::Leaf { posterior, .. } => return posterior,
            }
        }
    }

    pub fn max_depth(&self) -> u32 {
        self.nodes
            .iter()
            .map(|n| match n {
                TreeNode::Leaf { depth, .. } => *depth,
                TreeNode::Split { .. } => 0,
            })
            .max()
            .unwrap_or(0)
    }

    pub fn leaf_count(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n, TreeNode::Leaf { .. }))
            .count()
    }
}

/// A trained model: trees plus everything inference needs.
#[derive(Debug, Clone, PartialEq)]
pub struct Forest {
    pub config: RunConfig,
    pub trees: Vec<Tree>,
    /// Mean fraction of bounding-box area covered by each foreground part.
    pub phi: [f64; NUM_PARTS],
    pub prior: LocationPrior,
}

impl Forest {
    /// Mean leaf posterior over all trees for one pixel.
    pub fn posterior_at(&self, ch: &FeatureChannels, px: i32, py: i32) -> [f64; NUM_LABELS] {
        let mut acc = [0.0f64; NUM_LABELS];
        for tree in &self.trees {
            let leaf = tree.leaf_posterior(ch, px, py);
            for (a, &p) in acc.iter_mut().zip(leaf.iter()) {
                *a += p;
            }
        }
        let inv = 1.0 / self.trees.len() as f64;
        for a in &mut acc {
            *a *= inv;
        }
        acc
    }
}

fn write_config<W: Write>(w: &mut W, c: &RunConfig) -> std::io::Result<()> {
    w.write_u32::<LittleEndian>(c.trees)?;
    w.write_u32::<LittleEndian>(c.depth)?;
    w.write_u32::<LittleEndian>(c.candidates)?;
    w.write_u32::<LittleEndian>(c.thresholds)?;
    w.write_u32::<LittleEndian>(c.samples)?;
    w.write_u32::<LittleEndian>(c.orient_bins)?;
    w.write_u32::<LittleEndian>(c.grid)?;
    w.write_f64::<LittleEndian>(c.rho)?;
    w.write_u32::<LittleEndian>(c.min_syn)?;
    w.write_f64::<LittleEndian>(c.alpha)?;
    w.write_u32::<LittleEndian>(c.prior_grid)?;
    w.write_u32::<LittleEndian>(c.stride)?;
    w.write_u64::<LittleEndian>(c.seed)
}

fn read_config<R: Read>(r: &mut R) -> std::io::Result<RunConfig> {
    Ok(RunConfig {
        trees: r.read_u32::<LittleEndian>()?,
        depth: r.read_u32::<LittleEndian>()?,
        candidates: r.read_u32::<LittleEndian>()?,
        thresholds: r.read_u32::<LittleEndian>()?,
        samples: r.read_u32::<LittleEndian>()?,
        orient_bins: r.read_u32::<LittleEndian>()?,
        grid: r.read_u32::<LittleEndian>()?,
        rho: r.read_f64::<LittleEndian>()?,
        min_syn: r.read_u32::<LittleEndian>()?,
        alpha: r.read_f64::<LittleEndian>()?,
        prior_grid: r.read_u32::<LittleEndian>()?,
        stride: r.read_u32::<LittleEndian>()?,
        seed: r.read_u64::<LittleEndian>()?,
        // execution parallelism is not part of a model
        workers: 0,
    })
}

fn write_rect<W: Write>(w: &mut W, r: &OffsetRect) -> std::io::Result<()> {
    w.write_f64::<LittleEndian>(r.ux)?;
    w.write_f64::<LittleEndian>(r.uy)?;
    w.write_f64::<LittleEndian>(r.vx)?;
    w.write_f64::<LittleEndian>(r.vy)
}

fn read_rect<R: Read>(r: &mut R) -> std::io::Result<OffsetRect> {
    Ok(OffsetRect {
        ux: r.read_f64::<LittleEndian>()?,
        uy: r.read_f64::<LittleEndian>()?,
        vx: r.read_f64::<LittleEndian>()?,
        vy: r.read_f64::<LittleEndian>()?,
    })
}

/// Serialize a forest. Verifies the breadth-first child layout so that a
/// reader can reconstruct child indices implicitly.
pub fn write_model(path: &Path, forest: &Forest) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(path, e);

    w.write_all(MAGIC).map_err(io_err)?;
    w.write_u32::<LittleEndian>(VERSION).map_err(io_err)?;
    write_config(&mut w, &forest.config).map_err(io_err)?;

    w.write_u32::<LittleEndian>(forest.trees.len() as u32)
        .map_err(io_err)?;
    for tree in &forest.trees {
        w.write_u32::<LittleEndian>(tree.nodes.len() as u32)
            .map_err(io_err)?;
        let mut next = 1u32;
        for node in &tree.nodes {
            match node {
                TreeNode::Split { weak, left, right } => {
                    if *left != next || *right != next + 1 {
                        return Err(Error::Internal(format!(
                            "tree is not in breadth-first layout: split children ({left},{right}), expected ({next},{})",
                            next + 1
                        )));
                    }
                    next += 2;
                    w.write_u8(1).map_err(io_err)?;
                    write_rect(&mut w, &weak.rect1).map_err(io_err)?;
                    w.write_u64::<LittleEndian>(weak.theta1 as u64).map_err(io_err)?;
                    write_rect(&mut w, &weak.rect2).map_err(io_err)?;
                    w.write_u64::<LittleEndian>(weak.theta2 as u64).map_err(io_err)?;
                    w.write_f64::<LittleEndian>(weak.t).map_err(io_err)?;
                }
                TreeNode::Leaf { posterior, .. } => {
                    w.write_u8(0).map_err(io_err)?;
                    for &p in posterior {
                        w.write_f64::<LittleEndian>(p).map_err(io_err)?;
                    }
                }
            }
        }
        if next as usize != tree.nodes.len() {
            return Err(Error::Internal(format!(
                "tree claims {} nodes but breadth-first layout assigns {next}",
                tree.nodes.len()
            )));
        }
    }

    for &f in &forest.phi {
        w.write_f64::<LittleEndian>(f).map_err(io_err)?;
    }
    for grid in &forest.prior.cells {
        for &v in grid {
            w.write_f64::<LittleEndian>(v).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

/// Load and validate a model file.
pub fn read_model(path: &Path) -> Result<Forest> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let trunc = |_: std::io::Error| Error::Model(format!("{}: truncated file", path.display()));

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(trunc)?;
    if &magic != MAGIC {
        return Err(Error::Model(format!(
            "{}: bad magic {magic:?}",
            path.display()
        )));
    }
    let version = r.read_u32::<LittleEndian>().map_err(trunc)?;
    if version != VERSION {
        return Err(Error::Model(format!(
            "{}: unsupported version {version}",
            path.display()
        )));
    }
    let config = read_config(&mut r).map_err(trunc)?;
    config.validate()?;

    let tree_count = r.read_u32::<LittleEndian>().map_err(trunc)?;
    if tree_count != config.trees {
        return Err(Error::Model(format!(
            "{}: {tree_count} trees stored but config says {}",
            path.display(),
            config.trees
        )));
    }
    let mut trees = Vec::with_capacity(tree_count as usize);
    for _ in 0..tree_count {
        let node_count = r.read_u32::<LittleEndian>().map_err(trunc)? as usize;
        if node_count == 0 {
            return Err(Error::Model(format!("{}: empty tree", path.display())));
        }
        let mut nodes = Vec::with_capacity(node_count);
        let mut depths = vec![0u32; node_count];
        let mut next = 1usize;
        for i in 0..node_count {
            let tag = r.read_u8().map_err(trunc)?;
            match tag {
                1 => {
                    let rect1 = read_rect(&mut r).map_err(trunc)?;
                    let theta1 = r.read_u64::<LittleEndian>().map_err(trunc)? as usize;
                    let rect2 = read_rect(&mut r).map_err(trunc)?;
                    let theta2 = r.read_u64::<LittleEndian>().map_err(trunc)? as usize;
                    let t = r.read_f64::<LittleEndian>().map_err(trunc)?;
                    if theta1 >= config.orient_bins as usize || theta2 >= config.orient_bins as usize
                    {
                        return Err(Error::Model(format!(
                            "{}: orientation bin out of range",
                            path.display()
                        )));
                    }
                    if next + 1 >= node_count {
                        return Err(Error::Model(format!(
                            "{}: split children exceed node count",
                            path.display()
                        )));
                    }
                    let (left, right) = (next as u32, next as u32 + 1);
                    depths[left as usize] = depths[i] + 1;
                    depths[right as usize] = depths[i] + 1;
                    next += 2;
                    nodes.push(TreeNode::Split {
                        weak: WeakClassifier { rect1, theta1, rect2, theta2, t },
                        left,
                        right,
                    });
                }
                0 => {
                    let mut posterior = [0.0f64; NUM_LABELS];
                    for p in &mut posterior {
                        *p = r.read_f64::<LittleEndian>().map_err(trunc)?;
                    }
                    let sum: f64 = posterior.iter().sum();
                    if posterior.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
                        return Err(Error::Model(format!(
                            "{}: leaf posterior is not a distribution (sum {sum})",
                            path.display()
                        )));
                    }
                    nodes.push(TreeNode::Leaf { posterior, depth: depths[i] });
                }
                other => {
                    return Err(Error::Model(format!(
                        "{}: unknown node tag {other}",
                        path.display()
                    )));
                }
            }
        }
        if next != node_count {
            return Err(Error::Model(format!(
                "{}: breadth-first layout assigns {next} nodes, header says {node_count}",
                path.display()
            )));
        }
        trees.push(Tree { nodes });
    }

    let mut phi = [0.0f64; NUM_PARTS];
    for f in &mut phi {
        *f = r.read_f64::<LittleEndian>().map_err(trunc)?;
        if !(*f > 0.0) {
            return Err(Error::Model(format!(
                "{}: nonpositive part area fraction",
                path.display()
            )));
        }
    }
    let bins = (config.prior_grid * config.prior_grid) as usize;
    let mut cells = Vec::with_capacity(NUM_PARTS);
    for _ in 0..NUM_PARTS {
        let mut grid = vec![0.0f64; bins];
        for v in &mut grid {
            *v = r.read_f64::<LittleEndian>().map_err(trunc)?;
        }
        cells.push(grid);
    }
    let prior = LocationPrior { grid: config.prior_grid, cells };
    prior.validate()?;

    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::Model(format!(
            "{}: trailing bytes after model data",
            path.display()
        )));
    }

    Ok(Forest { config, trees, phi, prior })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_classifier(t: f64) -> WeakClassifier {
        WeakClassifier {
            rect1: OffsetRect { ux: -0.25, uy: -0.125, vx: 0.125, vy: 0.25 },
            theta1: 2,
            rect2: OffsetRect { ux: -0.125, uy: -0.25, vx: 0.25, vy: 0.125 },
            theta2: 5,
            t,
        }
    }

    fn leaf(p0: f64, depth: u32) -> TreeNode {
        let rest = (1.0 - p0) / 7.0;
        let mut posterior = [rest; NUM_LABELS];
        posterior[0] = p0;
        TreeNode::Leaf { posterior, depth }
    }

    fn sample_forest() -> Forest {
        let mut config = RunConfig::default();
        config.trees = 2;
        config.prior_grid = 4;
        let tree0 = Tree {
            nodes: vec![
                TreeNode::Split { weak: sample_classifier(0.7), left: 1, right: 2 },
                TreeNode::Split { weak: sample_classifier(1.3), left: 3, right: 4 },
                leaf(0.5, 1),
                leaf(0.25, 2),
                leaf(0.125, 2),
            ],
        };
        let tree1 = Tree { nodes: vec![leaf(0.9, 0)] };
        let mut prior = LocationPrior::uniform(4);
        // make it non-trivial but still normalized
        prior.cells[0][0] = 2.0 / 16.0;
        prior.cells[0][1] = 1.0 / 32.0;
        prior.cells[0][2] = 1.0 / 32.0;
        Forest {
            config,
            trees: vec![tree0, tree1],
            phi: [0.05, 0.04, 0.03, 0.05, 0.02, 0.01, 0.06],
            prior,
        }
    }

    #[test]
    fn model_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.dawf");
        let forest = sample_forest();
        write_model(&path, &forest).unwrap();
        let loaded = read_model(&path).unwrap();
        assert_eq!(loaded, forest);
    }

    #[test]
    fn model_bytes_are_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let forest = sample_forest();
        let p1 = dir.path().join("a.dawf");
        let p2 = dir.path().join("b.dawf");
        write_model(&p1, &forest).unwrap();
        write_model(&p2, &forest).unwrap();
        assert_eq!(std::fs::read(p1).unwrap(), std::fs::read(p2).unwrap());
    }

    #[test]
    fn non_bfs_layout_is_an_internal_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.dawf");
        let mut forest = sample_forest();
        if let TreeNode::Split { left, .. } = &mut forest.trees[0].nodes[0] {
            *left = 3;
        }
        assert!(matches!(
            write_model(&path, &forest),
            Err(Error::Internal(_))
        ));
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.dawf");
        write_model(&path, &sample_forest()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(read_model(&path), Err(Error::Model(_))));
    }

    #[test]
    fn truncated_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.dawf");
        write_model(&path, &sample_forest()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        assert!(matches!(read_model(&path), Err(Error::Model(_))));
    }

    #[test]
    fn trailing_bytes_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.dawf");
        write_model(&path, &sample_forest()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.push(0);
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(read_model(&path), Err(Error::Model(_))));
    }

    #[test]
    fn corrupt_posterior_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.dawf");
        let mut forest = sample_forest();
        if let TreeNode::Leaf { posterior, .. } = &mut forest.trees[1].nodes[0] {
            posterior[3] += 0.5; // breaks the sum-to-1 invariant
        }
        write_model(&path, &forest).unwrap();
        assert!(matches!(read_model(&path), Err(Error::Model(_))));
    }

    #[test]
    fn leaf_depths_reconstructed_from_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.dawf");
        write_model(&path, &sample_forest()).unwrap();
        let loaded = read_model(&path).unwrap();
        let depths: Vec<u32> = loaded.trees[0]
            .nodes
            .iter()
            .filter_map(|n| match n {
                TreeNode::Leaf { depth, .. } => Some(*depth),
                _ => None,
            })
            .collect();
        assert_eq!(depths, vec![1, 2, 2]);
        assert_eq!(loaded.trees[0].max_depth(), 2);
        assert_eq!(loaded.trees[0].leaf_count(), 3);
    }

    #[test]
    fn workers_never_persisted() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.dawf");
        let mut forest = sample_forest();
        forest.config.workers = 7;
        write_model(&path, &forest).unwrap();
        let loaded = read_model(&path).unwrap();
        assert_eq!(loaded.config.workers, 0);
    }

    #[test]
    fn posterior_averages_trees() {
        let _guard = counters::test_guard();
        let forest = sample_forest();
        let img = image::RgbImage::from_fn(32, 32, |x, y| {
            image::Rgb([(x * 7 % 255) as u8, (y * 11 % 255) as u8, 128])
        });
        let bbox = BoundingBox { x: 0, y: 0, w: 32, h: 32 };
        let ch = crate::features::compute_channels(&img, &bbox, 9).unwrap();
        let p = forest.posterior_at(&ch, 10, 10);
        let sum: f64 = p.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
        // tree 1 is a bare leaf, so the average must mix in 0.9 for part 0
        let t0 = forest.trees[0].leaf_posterior(&ch, 10, 10);
        assert!((p[0] - (t0[0] + 0.9) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn split_eval_counter_counts_path_length() {
        let _guard = counters::test_guard();
        let forest = sample_forest();
        let img = image::RgbImage::from_fn(32, 32, |x, y| {
            image::Rgb([(x * 3) as u8, (y * 5) as u8, 40])
        });
        let bbox = BoundingBox { x: 0, y: 0, w: 32, h: 32 };
        let ch = crate::features::compute_channels(&img, &bbox, 9).unwrap();
        counters::reset();
        let _ = forest.trees[1].leaf_posterior(&ch, 5, 5);
        assert_eq!(counters::split_evals(), 0); // single-leaf tree
        counters::reset();
        let _ = forest.trees[0].leaf_posterior(&ch, 5, 5);
        let d = counters::split_evals();
        assert!(d == 1 || d == 2, "path length {d} impossible in this tree");
    }
}
