//! Forest posterior evaluation, location-prior modulation, and conversion of
//! posteriors into per-part pixel lists of the known part sizes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use image::RgbImage;

use crate::data_model::{BoundingBox, NUM_PARTS};
use crate::error::{Error, Result};
use crate::features::FeatureChannels;
use crate::forest::{Forest, LocationPrior};
use crate::stats::NUM_LABELS;

/// Overlay colors, one per class in label order
/// (foot, knee, hip, shoulder, elbow, hand, head, background).
pub const PART_PALETTE: [[u8; 3]; NUM_LABELS] = [
    [230, 25, 75],   // foot: red
    [245, 130, 48],  // knee: orange
    [255, 225, 25],  // hip: yellow
    [60, 180, 75],   // shoulder: green
    [70, 240, 240],  // elbow: cyan
    [0, 130, 200],   // hand: blue
    [240, 50, 230],  // head: magenta
    [128, 128, 128], // background: grey
];

/// A per-pixel class distribution over the bounding-box region.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorMap {
    bbox: BoundingBox,
    /// Row-major over the box, NUM_LABELS values per pixel.
    data: Vec<f64>,
}

impl PosteriorMap {
    /// Build from a per-pixel distribution function of absolute image
    /// coordinates.
    pub fn from_fn(bbox: BoundingBox, mut f: impl FnMut(i32, i32) -> [f64; NUM_LABELS]) -> Self {
        let mut data = Vec::with_capacity(bbox.area() as usize * NUM_LABELS);
        for py in bbox.y..bbox.y + bbox.h as i32 {
            for px in bbox.x..bbox.x + bbox.w as i32 {
                data.extend_from_slice(&f(px, py));
            }
        }
        PosteriorMap { bbox, data }
    }

    /// The all-classes-equal map (modulating it bares the prior itself).
    pub fn uniform(bbox: BoundingBox) -> Self {
        PosteriorMap::from_fn(bbox, |_, _| [1.0 / NUM_LABELS as f64; NUM_LABELS])
    }

    pub fn bbox(&self) -> &BoundingBox {
        &self.bbox
    }

    fn index(&self, px: i32, py: i32) -> usize {
        debug_assert!(self.bbox.contains(px, py));
        let x = (px - self.bbox.x) as usize;
        let y = (py - self.bbox.y) as usize;
        (y * self.bbox.w as usize + x) * NUM_LABELS
    }

    /// The distribution at an absolute pixel inside the box.
    pub fn get(&self, px: i32, py: i32) -> &[f64; NUM_LABELS] {
        let i = self.index(px, py);
        self.data[i..i + NUM_LABELS].try_into().unwrap()
    }

    /// Check that every pixel holds a nonnegative distribution summing to
    /// 1 within 1e-6.
    pub fn validate(&self) -> Result<()> {
        for (i, pixel) in self.data.chunks_exact(NUM_LABELS).enumerate() {
            let sum: f64 = pixel.iter().sum();
            if pixel.iter().any(|&v| !(v >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
                return Err(Error::Internal(format!(
                    "pixel {i} holds an invalid distribution (sum {sum})"
                )));
            }
        }
        Ok(())
    }
}

/// Mean leaf posterior of the forest at every pixel of the box.
///
/// The channels must cover this image and the box must lie inside it.
pub fn posterior(forest: &Forest, ch: &FeatureChannels, bbox: &BoundingBox) -> PosteriorMap {
    PosteriorMap::from_fn(*bbox, |px, py| forest.posterior_at(ch, px, py))
}

/// Reweight each pixel's distribution by the location prior of its cell
/// (uniform for background) and renormalize.
pub fn modulate(pm: &PosteriorMap, prior: &LocationPrior) -> PosteriorMap {
    let bbox = pm.bbox;
    PosteriorMap::from_fn(bbox, |px, py| {
        let p = pm.get(px, py);
        let mut q = [0.0f64; NUM_LABELS];
        for part in 0..NUM_PARTS {
            q[part] = p[part] * prior.value(part, px, py, &bbox);
        }
        q[NUM_PARTS] = p[NUM_PARTS] * prior.background_value();
        let sum: f64 = q.iter().sum();
        let inv = 1.0 / sum;
        for v in &mut q {
            *v *= inv;
        }
        q
    })
}

/// The prior alone, viewed as a posterior map (the no-image baseline).
pub fn prior_posterior(prior: &LocationPrior, bbox: &BoundingBox) -> PosteriorMap {
    modulate(&PosteriorMap::uniform(*bbox), prior)
}

/// How many pixels each part claims in a box of area `area`.
pub fn part_pixel_counts(phi: &[f64; NUM_PARTS], area: u64) -> [usize; NUM_PARTS] {
    std::array::from_fn(|p| {
        let n = (phi[p] * area as f64).round() as usize;
        n.max(1).min(area as usize)
    })
}

/// For each part independently, the N_p = max(1, round(phi_p * A)) pixels
/// with the highest posterior for that part; ties fall to row-major pixel
/// order. Pixels may appear under several parts.
pub fn extract_pixels(pm: &PosteriorMap, phi: &[f64; NUM_PARTS]) -> [Vec<(i32, i32)>; NUM_PARTS] {
    let bbox = pm.bbox;
    let counts = part_pixel_counts(phi, bbox.area());
    let w = bbox.w as usize;
    std::array::from_fn(|part| {
        let mut order: Vec<(f64, u32)> = pm
            .data
            .chunks_exact(NUM_LABELS)
            .enumerate()
            .map(|(i, pixel)| (pixel[part], i as u32))
            .collect();
        order.sort_unstable_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        order[..counts[part]]
            .iter()
            .map(|&(_, i)| {
                let (x, y) = (i as usize % w, i as usize / w);
                (bbox.x + x as i32, bbox.y + y as i32)
            })
            .collect()
    })
}

/// Centroid of each part's extracted pixels: the exposed joint-location
/// estimate.
pub fn joint_estimates(pixels: &[Vec<(i32, i32)>; NUM_PARTS]) -> [(f64, f64); NUM_PARTS] {
    std::array::from_fn(|part| {
        let pts = &pixels[part];
        let inv = 1.0 / pts.len() as f64;
        let (sx, sy) = pts
            .iter()
            .fold((0.0, 0.0), |(sx, sy), &(x, y)| (sx + x as f64, sy + y as f64));
        (sx * inv, sy * inv)
    })
}

/// Paint the extracted pixels over a copy of the image with the class
/// palette. Pixels carrying several part labels show the highest part index
/// (parts are painted in label order).
pub fn render_overlay(img: &RgbImage, pixels: &[Vec<(i32, i32)>; NUM_PARTS]) -> RgbImage {
    let mut out = img.clone();
    for (part, pts) in pixels.iter().enumerate() {
        let color = image::Rgb(PART_PALETTE[part]);
        for &(x, y) in pts {
            if x >= 0 && y >= 0 && (x as u32) < out.width() && (y as u32) < out.height() {
                out.put_pixel(x as u32, y as u32, color);
            }
        }
    }
    out
}

/// Dump a posterior map as raw raster planes: a 12-byte header of
/// little-endian u32 (box width, box height, class count), then one
/// row-major f32 plane per class.
pub fn write_posterior_dump(path: &Path, pm: &PosteriorMap) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    w.write_u32::<LittleEndian>(pm.bbox.w).map_err(io)?;
    w.write_u32::<LittleEndian>(pm.bbox.h).map_err(io)?;
    w.write_u32::<LittleEndian>(NUM_LABELS as u32).map_err(io)?;
    for class in 0..NUM_LABELS {
        for pixel in pm.data.chunks_exact(NUM_LABELS) {
            w.write_f32::<LittleEndian>(pixel[class] as f32).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// Read a posterior dump back as (width, height, per-class planes).
pub fn read_posterior_dump(path: &Path) -> Result<(u32, u32, Vec<Vec<f32>>)> {
    let io = |e| Error::io(path, e);
    let mut r = BufReader::new(File::open(path).map_err(io)?);
    let w = r.read_u32::<LittleEndian>().map_err(io)?;
    let h = r.read_u32::<LittleEndian>().map_err(io)?;
    let classes = r.read_u32::<LittleEndian>().map_err(io)?;
    if w == 0 || h == 0 || classes == 0 || (w as u64 * h as u64 * classes as u64) > (1 << 32) {
        return Err(Error::InvalidInput(format!(
            "posterior dump {} has implausible header {w}x{h}x{classes}",
            path.display()
        )));
    }
    let mut planes = Vec::with_capacity(classes as usize);
    for _ in 0..classes {
        let mut plane = vec![0f32; (w * h) as usize];
        r.read_f32_into::<LittleEndian>(&mut plane).map_err(io)?;
        planes.push(plane);
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest).map_err(io)?;
    if !rest.is_empty() {
        return Err(Error::InvalidInput(format!(
            "posterior dump {} has {} trailing bytes",
            path.display(),
            rest.len()
        )));
    }
    Ok((w, h, planes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::counters;
    use crate::features::{compute_channels, OffsetRect, WeakClassifier};
    use crate::forest::{Tree, TreeNode};
    use crate::config::RunConfig;

    fn bbox(w: u32, h: u32) -> BoundingBox {
        BoundingBox::new(0, 0, w, h).unwrap()
    }

    fn leaf(posterior: [f64; NUM_LABELS], depth: u32) -> TreeNode {
        TreeNode::Leaf { posterior, depth }
    }

    fn one_hotish(part: usize) -> [f64; NUM_LABELS] {
        let mut p = [0.02; NUM_LABELS];
        p[part] = 1.0 - 0.02 * (NUM_LABELS - 1) as f64;
        p
    }

    fn channels_for(w: u32, h: u32) -> (RgbImage, FeatureChannels) {
        let img = RgbImage::from_fn(w, h, |x, y| {
            image::Rgb([(x * 31 % 251) as u8, (y * 57 % 251) as u8, ((x + y) % 251) as u8])
        });
        let ch = compute_channels(&img, &bbox(w, h), 9).unwrap();
        (img, ch)
    }

    fn forest_of(trees: Vec<Tree>) -> Forest {
        Forest {
            config: RunConfig::default(),
            trees,
            phi: [0.05; NUM_PARTS],
            prior: LocationPrior::uniform(4),
        }
    }

    #[test]
    fn single_tree_posterior_is_its_leaf_distribution() {
        let _guard = counters::test_guard();
        let (_, ch) = channels_for(12, 10);
        let q = one_hotish(3);
        let single = forest_of(vec![Tree { nodes: vec![leaf(q, 0)] }]);
        let pm = posterior(&single, &ch, &bbox(12, 10));
        pm.validate().unwrap();
        for py in 0..10 {
            for px in 0..12 {
                assert_eq!(pm.get(px, py), &q);
            }
        }
        // two structurally identical trees average to the same distribution
        let twin = forest_of(vec![
            Tree { nodes: vec![leaf(q, 0)] },
            Tree { nodes: vec![leaf(q, 0)] },
        ]);
        let pm2 = posterior(&twin, &ch, &bbox(12, 10));
        assert_eq!(pm, pm2);
    }

    #[test]
    fn split_evals_scale_with_tree_depth() {
        let _guard = counters::test_guard();
        let (_, ch) = channels_for(8, 8);
        // complete depth-2 tree: every pixel crosses exactly two splits
        let weak = |t: f64| WeakClassifier {
            rect1: OffsetRect { ux: -0.3, uy: -0.3, vx: 0.3, vy: 0.3 },
            theta1: 2,
            rect2: OffsetRect { ux: -0.2, uy: -0.1, vx: 0.4, vy: 0.3 },
            theta2: 5,
            t,
        };
        let tree = Tree {
            nodes: vec![
                TreeNode::Split { weak: weak(0.5), left: 1, right: 2 },
                TreeNode::Split { weak: weak(1.0), left: 3, right: 4 },
                TreeNode::Split { weak: weak(2.0), left: 5, right: 6 },
                leaf(one_hotish(0), 2),
                leaf(one_hotish(1), 2),
                leaf(one_hotish(2), 2),
                leaf(one_hotish(3), 2),
            ],
        };
        let forest = forest_of(vec![tree.clone(), tree]);
        counters::reset();
        let pm = posterior(&forest, &ch, &bbox(8, 8));
        assert_eq!(counters::split_evals(), 2 * 2 * 64);
        pm.validate().unwrap();
    }

    #[test]
    fn uniform_prior_modulation_is_identity() {
        let b = bbox(9, 7);
        // four distinct distributions with well-separated values; pixels of
        // the same class hold bitwise-identical vectors, so extraction ties
        // stay exact under the renormalization noise
        let pool: [[f64; NUM_LABELS]; 4] = [
            [0.30, 0.05, 0.10, 0.15, 0.02, 0.08, 0.18, 0.12],
            [0.05, 0.30, 0.15, 0.10, 0.08, 0.02, 0.12, 0.18],
            [0.10, 0.15, 0.30, 0.05, 0.18, 0.12, 0.02, 0.08],
            [0.15, 0.10, 0.05, 0.30, 0.12, 0.18, 0.08, 0.02],
        ];
        let pm = PosteriorMap::from_fn(b, |px, py| pool[(px as usize + py as usize) % 4]);
        pm.validate().unwrap();
        let out = modulate(&pm, &LocationPrior::uniform(3));
        for (a, b) in out.data.iter().zip(pm.data.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        let phi = [0.1, 0.05, 0.2, 0.03, 0.08, 0.01, 0.15];
        assert_eq!(extract_pixels(&out, &phi), extract_pixels(&pm, &phi));
    }

    #[test]
    fn concentrated_prior_pulls_argmax_into_its_support() {
        let b = bbox(16, 16);
        // part 0 slightly prefers the bottom-right corner pixel
        let pm = PosteriorMap::from_fn(b, |px, py| {
            let p0 = if (px, py) == (15, 15) { 0.4 } else { 0.3 };
            let mut p = [0.0; NUM_LABELS];
            p[0] = p0;
            p[NUM_PARTS] = 1.0 - p0;
            p
        });
        // prior: part 0 lives in the top-left cell of a 4x4 grid
        let mut prior = LocationPrior::uniform(4);
        let eps = 1e-4;
        prior.cells[0] = vec![eps / (1.0 + 15.0 * eps); 16];
        prior.cells[0][0] = 1.0 / (1.0 + 15.0 * eps);
        let out = modulate(&pm, &prior);
        out.validate().unwrap();

        let mut phi = [1.0 / 256.0; NUM_PARTS]; // N_p = 1
        phi[0] = 16.0 / 256.0; // N_0 = 16
        let picked = &extract_pixels(&out, &phi)[0];
        assert_eq!(picked.len(), 16);
        for &(x, y) in picked {
            assert!(x < 4 && y < 4, "({x},{y}) escaped the prior's support");
        }
        // without modulation the best pixel was the bottom-right corner
        let before = &extract_pixels(&pm, &phi)[0];
        assert_eq!(before[0], (15, 15));
    }

    #[test]
    fn extraction_counts_and_tie_break() {
        let b = bbox(6, 4);
        let pm = PosteriorMap::uniform(b);
        // round(phi * 24): 0.4 -> 1 pixel (floor guard), 2.2 -> 2 pixels
        let phi = [
            0.4 / 24.0,
            2.2 / 24.0,
            5.0 / 24.0,
            1.0 / 24.0,
            1.0 / 24.0,
            1.0 / 24.0,
            1.0 / 24.0,
        ];
        let counts = part_pixel_counts(&phi, b.area());
        assert_eq!(counts, [1, 2, 5, 1, 1, 1, 1]);
        let pixels = extract_pixels(&pm, &phi);
        let total: usize = pixels.iter().map(|p| p.len()).sum();
        assert_eq!(total, counts.iter().sum::<usize>());
        // all-equal posteriors: ties resolve to row-major order
        assert_eq!(pixels[1], vec![(0, 0), (1, 0)]);
        assert_eq!(pixels[2], vec![(0, 0), (1, 0), (2, 0), (3, 0), (4, 0)]);
        // deterministic
        assert_eq!(extract_pixels(&pm, &phi), pixels);
    }

    #[test]
    fn extraction_recovers_a_posterior_blob() {
        let b = bbox(8, 8);
        let blob = [(2, 3), (3, 3), (4, 3), (3, 4), (3, 5)];
        let pm = PosteriorMap::from_fn(b, |px, py| {
            let hot = blob.contains(&(px, py));
            let mut p = [0.0; NUM_LABELS];
            p[2] = if hot { 0.9 } else { 0.01 };
            p[NUM_PARTS] = 1.0 - p[2];
            p
        });
        let mut phi = [1.0 / 64.0; NUM_PARTS];
        phi[2] = 5.0 / 64.0;
        let got = &extract_pixels(&pm, &phi)[2];
        // the blob itself, in row-major order
        assert_eq!(got, &[(2, 3), (3, 3), (4, 3), (3, 4), (3, 5)]);
        let est = joint_estimates(&extract_pixels(&pm, &phi));
        assert!((est[2].0 - 3.0).abs() < 1e-12 && (est[2].1 - 3.6).abs() < 1e-12);
    }

    #[test]
    fn prior_posterior_exposes_the_prior() {
        let mut prior = LocationPrior::uniform(2);
        prior.cells[4] = vec![0.7, 0.1, 0.1, 0.1];
        let b = bbox(8, 8);
        let pm = prior_posterior(&prior, &b);
        pm.validate().unwrap();
        // top-left quadrant holds cell weight 0.7 for part 4, 0.25 for each
        // other part and the background; elsewhere part 4 drops to 0.1
        let hot = pm.get(1, 1);
        let cold = pm.get(6, 6);
        assert!((hot[4] - 0.7 / 2.45).abs() < 1e-12);
        assert!((cold[4] - 0.1 / 1.85).abs() < 1e-12);
        for c in (0..NUM_LABELS).filter(|&c| c != 4) {
            assert!((hot[c] - 0.25 / 2.45).abs() < 1e-12);
            assert!((cold[c] - 0.25 / 1.85).abs() < 1e-12);
        }
    }

    #[test]
    fn overlay_paints_palette_colors() {
        let img = RgbImage::from_pixel(4, 4, image::Rgb([9, 9, 9]));
        let mut pixels: [Vec<(i32, i32)>; NUM_PARTS] = Default::default();
        pixels[0] = vec![(0, 0), (2, 1)];
        pixels[1] = vec![(0, 0)]; // overlap: later part wins
        pixels[6] = vec![(3, 3), (-1, 7)]; // out-of-frame pixels are skipped
        let out = render_overlay(&img, &pixels);
        assert_eq!(out.get_pixel(2, 1).0, PART_PALETTE[0]);
        assert_eq!(out.get_pixel(0, 0).0, PART_PALETTE[1]);
        assert_eq!(out.get_pixel(3, 3).0, PART_PALETTE[6]);
        assert_eq!(out.get_pixel(1, 2).0, [9, 9, 9]);
    }

    #[test]
    fn posterior_dump_roundtrip() {
        let b = BoundingBox::new(3, 2, 5, 4).unwrap();
        let pm = PosteriorMap::from_fn(b, |px, py| {
            let mut p = [0.05; NUM_LABELS];
            p[(px + 2 * py) as usize % NUM_LABELS] += 0.65;
            let sum: f64 = p.iter().sum();
            p.map(|v| v / sum)
        });
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("post.bin");
        write_posterior_dump(&path, &pm).unwrap();
        let (w, h, planes) = read_posterior_dump(&path).unwrap();
        assert_eq!((w, h, planes.len()), (5, 4, NUM_LABELS));
        for class in 0..NUM_LABELS {
            for py in 0..4 {
                for px in 0..5 {
                    let expect = pm.get(3 + px, 2 + py)[class] as f32;
                    assert_eq!(planes[class][(py * 5 + px) as usize], expect);
                }
            }
        }
    }
}
