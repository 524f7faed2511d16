//! Dataset records: part labels, bounding boxes, manifest I/O, spatial-bin
//! assignment and deterministic pixel iteration.
//!
//! A dataset is a JSON-lines manifest; each line describes one image with its
//! bounding box, domain (`source`, `target` or `test`), an optional label map
//! and optional ground-truth joint coordinates. Paths are resolved relative
//! to the manifest file.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::NUM_LABELS;

/// Names of the 8 classes, in label order.
pub const PART_NAMES: [&str; NUM_LABELS] = [
    "foot", "knee", "hip", "shoulder", "elbow", "hand", "head", "background",
];

/// Label id of the background class.
pub const BACKGROUND: u8 = 7;

/// Number of foreground part classes.
pub const NUM_PARTS: usize = 7;

/// Look up a foreground part id by name.
pub fn part_id(name: &str) -> Option<usize> {
    PART_NAMES[..NUM_PARTS].iter().position(|&n| n == name)
}

/// Which split an image belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    /// Synthetic images with per-pixel labels.
    Source,
    /// Real-style images with only a bounding box.
    Target,
    /// Held-out images with joint annotations for scoring.
    Test,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
            Domain::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Domain> {
        match s {
            "source" => Some(Domain::Source),
            "target" => Some(Domain::Target),
            "test" => Some(Domain::Test),
            _ => None,
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Axis-aligned pixel box; `w` and `h` are always positive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundingBox {
    pub x: i32,
    pub y: i32,
    pub w: u32,
    pub h: u32,
}

impl BoundingBox {
    pub fn new(x: i32, y: i32, w: u32, h: u32) -> Result<Self> {
        if w == 0 || h == 0 {
            return Err(Error::InvalidInput(format!(
                "bounding box must have positive size, got {w}x{h}"
            )));
        }
        Ok(BoundingBox { x, y, w, h })
    }

    /// Area in pixels.
    pub fn area(&self) -> u64 {
        self.w as u64 * self.h as u64
    }

    /// Scale reference sqrt(A) used to size offsets and tolerances.
    pub fn sqrt_area(&self) -> f64 {
        (self.area() as f64).sqrt()
    }

    pub fn contains(&self, px: i32, py: i32) -> bool {
        px >= self.x
            && py >= self.y
            && px < self.x + self.w as i32
            && py < self.y + self.h as i32
    }

    /// Intersect with an image of the given size; errors if nothing is left.
    pub fn clamp_to(&self, img_w: u32, img_h: u32) -> Result<BoundingBox> {
        let x0 = self.x.max(0);
        let y0 = self.y.max(0);
        let x1 = (self.x + self.w as i32).min(img_w as i32);
        let y1 = (self.y + self.h as i32).min(img_h as i32);
        if x1 <= x0 || y1 <= y0 {
            return Err(Error::InvalidInput(format!(
                "bounding box ({},{},{},{}) lies outside the {}x{} image",
                self.x, self.y, self.w, self.h, img_w, img_h
            )));
        }
        Ok(BoundingBox {
            x: x0,
            y: y0,
            w: (x1 - x0) as u32,
            h: (y1 - y0) as u32,
        })
    }
}

/// Index of the G x G grid cell that (px, py) falls into within the box,
/// counted row-major: bin = col + G * row. The boundary pixels at exactly
/// x + w (resp. y + h) are clamped into the last column (row).
pub fn spatial_bin(px: i32, py: i32, bbox: &BoundingBox, grid: u32) -> Result<usize> {
    if grid == 0 {
        return Err(Error::InvalidInput("spatial grid must be >= 1".into()));
    }
    let in_closed = px >= bbox.x
        && px <= bbox.x + bbox.w as i32
        && py >= bbox.y
        && py <= bbox.y + bbox.h as i32;
    if !in_closed {
        return Err(Error::InvalidInput(format!(
            "pixel ({px},{py}) outside bounding box ({},{},{},{})",
            bbox.x, bbox.y, bbox.w, bbox.h
        )));
    }
    let g = grid as u64;
    let dx = (px - bbox.x) as u64;
    let dy = (py - bbox.y) as u64;
    let col = (g * dx / bbox.w as u64).min(g - 1);
    let row = (g * dy / bbox.h as u64).min(g - 1);
    Ok((col + g * row) as usize)
}

/// Ground-truth joint coordinates, one list per foreground part.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Joints {
    pub per_part: [Vec<(f64, f64)>; NUM_PARTS],
}

impl Joints {
    pub fn is_empty(&self) -> bool {
        self.per_part.iter().all(|v| v.is_empty())
    }
}

/// Single-channel label map with values in 0..=7.
#[derive(Debug, Clone)]
pub struct LabelMap {
    pub w: u32,
    pub h: u32,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(w: u32, h: u32) -> Self {
        LabelMap {
            w,
            h,
            data: vec![BACKGROUND; (w * h) as usize],
        }
    }

    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.data[(y * self.w + x) as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, label: u8) {
        debug_assert!(label < NUM_LABELS as u8);
        self.data[(y * self.w + x) as usize] = label;
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    /// Save as an 8-bit grayscale PNG.
    pub fn save(&self, path: &Path) -> Result<()> {
        let img = image::GrayImage::from_raw(self.w, self.h, self.data.clone())
            .expect("buffer matches dimensions");
        img.save(path).map_err(|e| Error::image(path, e))
    }

    /// Load from an 8-bit grayscale PNG, validating the value range.
    pub fn load(path: &Path) -> Result<LabelMap> {
        let dynimg = image::open(path).map_err(|e| Error::image(path, e))?;
        let img = match dynimg {
            image::DynamicImage::ImageLuma8(img) => img,
            other => {
                return Err(Error::InvalidInput(format!(
                    "label map {} must be single-channel 8-bit, got {:?}",
                    path.display(),
                    other.color()
                )))
            }
        };
        let (w, h) = (img.width(), img.height());
        let data = img.into_raw();
        if let Some(&bad) = data.iter().find(|&&v| v >= NUM_LABELS as u8) {
            return Err(Error::InvalidInput(format!(
                "label map {} contains value {bad}, expected 0..7",
                path.display()
            )));
        }
        Ok(LabelMap { w, h, data })
    }
}

/// Load an image as 8-bit RGB.
pub fn load_rgb(path: &Path) -> Result<image::RgbImage> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?;
    Ok(img.into_rgb8())
}

/// One manifest line, with paths resolved against the manifest directory.
#[derive(Debug, Clone)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub labels: Option<PathBuf>,
    pub bbox: BoundingBox,
    pub domain: Domain,
    pub joints: Option<Joints>,
}

/// An ordered dataset description.
#[derive(Debug, Clone, Default)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn entries_in(&self, domain: Domain) -> impl Iterator<Item = (usize, &ManifestEntry)> {
        self.entries
            .iter()
            .enumerate()
            .filter(move |(_, e)| e.domain == domain)
    }

    pub fn count(&self, domain: Domain) -> usize {
        self.entries_in(domain).count()
    }
}

/// Wire format of one manifest line.
#[derive(Serialize, Deserialize)]
pub struct ManifestLine {
    pub image: String,
    pub labels: Option<String>,
    pub bbox: [i64; 4],
    pub domain: String,
    pub joints: Option<BTreeMap<String, Vec<[f64; 2]>>>,
}

impl ManifestLine {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("manifest line serializes")
    }
}

fn parse_joints(raw: &BTreeMap<String, Vec<[f64; 2]>>) -> std::result::Result<Joints, String> {
    let mut joints = Joints::default();
    for (name, list) in raw {
        let id = part_id(name).ok_or_else(|| format!("unknown part name {name:?}"))?;
        joints.per_part[id] = list.iter().map(|&[x, y]| (x, y)).collect();
    }
    Ok(joints)
}

fn parse_line(dir: &Path, text: &str) -> std::result::Result<ManifestEntry, String> {
    let raw: ManifestLine = serde_json::from_str(text).map_err(|e| e.to_string())?;
    let domain =
        Domain::parse(&raw.domain).ok_or_else(|| format!("unknown domain {:?}", raw.domain))?;
    let [x, y, w, h] = raw.bbox;
    if w <= 0 || h <= 0 || x.abs() > i32::MAX as i64 || y.abs() > i32::MAX as i64 {
        return Err(format!("bad bbox [{x},{y},{w},{h}]"));
    }
    let bbox = BoundingBox::new(x as i32, y as i32, w as u32, h as u32).map_err(|e| e.to_string())?;
    if domain == Domain::Source && raw.labels.is_none() {
        return Err("source entry lacks a label map".into());
    }
    let joints = match &raw.joints {
        Some(map) => Some(parse_joints(map)?),
        None => None,
    };
    Ok(ManifestEntry {
        image: dir.join(&raw.image),
        labels: raw.labels.as_ref().map(|l| dir.join(l)),
        bbox,
        domain,
        joints,
    })
}

/// Parse a JSON-lines manifest. Validates label-map dimensions against the
/// image headers and clamps every bounding box to its image.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let dir = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
    let mut entries = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut entry = parse_line(&dir, &line).map_err(|msg| Error::Manifest {
            path: path.to_path_buf(),
            line: idx + 1,
            msg,
        })?;
        let (iw, ih) = image::image_dimensions(&entry.image)
            .map_err(|e| Error::image(&entry.image, e))?;
        if let Some(labels) = &entry.labels {
            let (lw, lh) = image::image_dimensions(labels).map_err(|e| Error::image(labels, e))?;
            if (lw, lh) != (iw, ih) {
                return Err(Error::Manifest {
                    path: path.to_path_buf(),
                    line: idx + 1,
                    msg: format!(
                        "label map is {lw}x{lh} but image is {iw}x{ih}"
                    ),
                });
            }
        }
        entry.bbox = entry.bbox.clamp_to(iw, ih).map_err(|e| Error::Manifest {
            path: path.to_path_buf(),
            line: idx + 1,
            msg: e.to_string(),
        })?;
        entries.push(entry);
    }
    Ok(DatasetManifest { entries })
}

/// Write manifest lines to a file, one JSON object per line.
pub fn write_manifest(path: &Path, lines: &[ManifestLine]) -> Result<()> {
    let mut out = String::new();
    for line in lines {
        out.push_str(&line.to_json());
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// A pixel drawn from inside an entry's bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelSample {
    /// Index of the entry in the manifest.
    pub entry: usize,
    pub px: i32,
    pub py: i32,
    /// Present for source pixels only.
    pub label: Option<u8>,
    /// Spatial bin of (px, py) within the entry's bounding box.
    pub bin: usize,
}

/// Row-major pixels of a box, keeping every stride-th row and column counted
/// from the box origin.
pub fn bbox_pixels(bbox: &BoundingBox, stride: u32) -> impl Iterator<Item = (i32, i32)> {
    let b = *bbox;
    (0..b.h)
        .step_by(stride as usize)
        .flat_map(move |dy| {
            (0..b.w)
                .step_by(stride as usize)
                .map(move |dx| (b.x + dx as i32, b.y + dy as i32))
        })
}

/// Visit every stride-th in-box pixel of every entry in the given domain, in
/// manifest order. Source pixels carry the label from the entry's label map;
/// target pixels never carry one, even if a map is present on disk.
pub fn for_each_pixel<F>(
    manifest: &DatasetManifest,
    domain: Domain,
    stride: u32,
    grid: u32,
    mut visit: F,
) -> Result<()>
where
    F: FnMut(PixelSample),
{
    if stride == 0 {
        return Err(Error::InvalidInput("stride must be >= 1".into()));
    }
    for (entry_idx, entry) in manifest.entries_in(domain) {
        let labels = match (domain, &entry.labels) {
            (Domain::Source, Some(path)) => Some(LabelMap::load(path)?),
            (Domain::Source, None) => {
                return Err(Error::InvalidInput(format!(
                    "source entry {} lacks a label map",
                    entry.image.display()
                )))
            }
            _ => None,
        };
        for (px, py) in bbox_pixels(&entry.bbox, stride) {
            let bin = spatial_bin(px, py, &entry.bbox, grid)?;
            let label = labels.as_ref().map(|m| m.get(px as u32, py as u32));
            visit(PixelSample {
                entry: entry_idx,
                px,
                py,
                label,
                bin,
            });
        }
    }
    Ok(())
}

/// Materialize the pixel stream; mainly for tests and small runs.
pub fn collect_pixels(
    manifest: &DatasetManifest,
    domain: Domain,
    stride: u32,
    grid: u32,
) -> Result<Vec<PixelSample>> {
    let mut out = Vec::new();
    for_each_pixel(manifest, domain, stride, grid, |s| out.push(s))?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write as _;

    #[test]
    fn spatial_bin_corners_and_examples() {
        let bb = BoundingBox::new(0, 0, 10, 10).unwrap();
        assert_eq!(spatial_bin(0, 0, &bb, 4).unwrap(), 0);
        assert_eq!(spatial_bin(3, 7, &bb, 1).unwrap(), 0);
        assert_eq!(spatial_bin(9, 9, &bb, 4).unwrap(), 15);
        // boundary pixels clamp into the last row/column
        assert_eq!(spatial_bin(10, 0, &bb, 4).unwrap(), 3);
        assert_eq!(spatial_bin(0, 10, &bb, 4).unwrap(), 12);
    }

    #[test]
    fn spatial_bin_rejects_outside_pixels() {
        let bb = BoundingBox::new(5, 5, 10, 10).unwrap();
        assert!(spatial_bin(4, 6, &bb, 4).is_err());
        assert!(spatial_bin(6, 40, &bb, 4).is_err());
    }

    proptest! {
        #[test]
        fn spatial_bin_surjective_when_box_at_least_grid(
            w in 8u32..40, h in 8u32..40, x in -5i32..5, y in -5i32..5,
        ) {
            let g = 8u32;
            prop_assume!(w >= g && h >= g);
            let bb = BoundingBox { x, y, w, h };
            let mut seen = vec![false; (g * g) as usize];
            for (px, py) in bbox_pixels(&bb, 1) {
                seen[spatial_bin(px, py, &bb, g).unwrap()] = true;
            }
            prop_assert!(seen.iter().all(|&s| s));
        }
    }

    #[test]
    fn bbox_pixels_counts() {
        let bb = BoundingBox::new(1, 1, 10, 10).unwrap();
        assert_eq!(bbox_pixels(&bb, 1).count(), 100);
        assert_eq!(bbox_pixels(&bb, 2).count(), 25);
        assert_eq!(bbox_pixels(&bb, 3).count(), 16);
        // row-major: first pixel is the origin, next is one to the right
        let first: Vec<_> = bbox_pixels(&bb, 2).take(3).collect();
        assert_eq!(first, vec![(1, 1), (3, 1), (5, 1)]);
    }

    #[test]
    fn clamp_to_trims_out_of_bounds() {
        let bb = BoundingBox::new(-3, 2, 10, 10).unwrap();
        let clamped = bb.clamp_to(8, 8).unwrap();
        assert_eq!(clamped, BoundingBox { x: 0, y: 2, w: 7, h: 6 });
        assert!(BoundingBox::new(20, 20, 4, 4).unwrap().clamp_to(8, 8).is_err());
    }

    fn write_png(path: &Path, w: u32, h: u32) {
        image::RgbImage::from_pixel(w, h, image::Rgb([10, 20, 30]))
            .save(path)
            .unwrap();
    }

    fn write_label_png(path: &Path, w: u32, h: u32, value: u8) {
        image::GrayImage::from_pixel(w, h, image::Luma([value]))
            .save(path)
            .unwrap();
    }

    #[test]
    fn empty_manifest_loads_empty() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        std::fs::write(&path, "").unwrap();
        let m = load_manifest(&path).unwrap();
        assert!(m.entries.is_empty());
    }

    #[test]
    fn manifest_round_trip_with_joints() {
        let dir = tempfile::tempdir().unwrap();
        write_png(&dir.path().join("a.png"), 12, 12);
        write_label_png(&dir.path().join("a_l.png"), 12, 12, 7);
        let mut joints = BTreeMap::new();
        joints.insert("head".to_string(), vec![[5.0, 2.5]]);
        joints.insert("foot".to_string(), vec![[1.0, 10.0], [8.0, 10.0]]);
        let line = ManifestLine {
            image: "a.png".into(),
            labels: Some("a_l.png".into()),
            bbox: [1, 1, 10, 10],
            domain: "source".into(),
            joints: Some(joints),
        };
        let path = dir.path().join("m.jsonl");
        write_manifest(&path, &[line]).unwrap();

        let m = load_manifest(&path).unwrap();
        assert_eq!(m.entries.len(), 1);
        let e = &m.entries[0];
        assert_eq!(e.domain, Domain::Source);
        assert_eq!(e.bbox, BoundingBox { x: 1, y: 1, w: 10, h: 10 });
        let joints = e.joints.as_ref().unwrap();
        assert_eq!(joints.per_part[6], vec![(5.0, 2.5)]);
        assert_eq!(joints.per_part[0], vec![(1.0, 10.0), (8.0, 10.0)]);
        assert!(joints.per_part[2].is_empty());
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        write_png(&dir.path().join("a.png"), 8, 8);
        let path = dir.path().join("m.jsonl");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(
            f,
            "{}",
            r#"{"image":"a.png","labels":null,"bbox":[0,0,8,8],"domain":"target","joints":null}"#
        )
        .unwrap();
        writeln!(f, "{}", "{not json").unwrap();
        drop(f);
        match load_manifest(&path) {
            Err(Error::Manifest { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected manifest error, got {other:?}"),
        }
    }

    #[test]
    fn source_without_labels_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_png(&dir.path().join("a.png"), 8, 8);
        let path = dir.path().join("m.jsonl");
        std::fs::write(
            &path,
            r#"{"image":"a.png","labels":null,"bbox":[0,0,8,8],"domain":"source","joints":null}"#,
        )
        .unwrap();
        assert!(matches!(load_manifest(&path), Err(Error::Manifest { .. })));
    }

    #[test]
    fn label_map_dimension_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_png(&dir.path().join("a.png"), 8, 8);
        write_label_png(&dir.path().join("a_l.png"), 9, 8, 0);
        let path = dir.path().join("m.jsonl");
        std::fs::write(
            &path,
            r#"{"image":"a.png","labels":"a_l.png","bbox":[0,0,8,8],"domain":"source","joints":null}"#,
        )
        .unwrap();
        assert!(matches!(load_manifest(&path), Err(Error::Manifest { .. })));
    }

    #[test]
    fn label_map_value_range_enforced() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.png");
        write_label_png(&path, 4, 4, 9);
        assert!(LabelMap::load(&path).is_err());
        write_label_png(&path, 4, 4, 7);
        let m = LabelMap::load(&path).unwrap();
        assert_eq!(m.get(3, 3), 7);
    }

    fn tiny_dataset(dir: &Path) -> PathBuf {
        write_png(&dir.join("s.png"), 12, 12);
        write_label_png(&dir.join("s_l.png"), 12, 12, 7);
        write_png(&dir.join("t.png"), 12, 12);
        let path = dir.join("m.jsonl");
        std::fs::write(
            &path,
            concat!(
                r#"{"image":"s.png","labels":"s_l.png","bbox":[1,1,10,10],"domain":"source","joints":null}"#,
                "\n",
                r#"{"image":"t.png","labels":null,"bbox":[0,0,10,10],"domain":"target","joints":null}"#,
                "\n",
            ),
        )
        .unwrap();
        path
    }

    #[test]
    fn pixel_stream_counts_and_labels() {
        let dir = tempfile::tempdir().unwrap();
        let path = tiny_dataset(dir.path());
        let m = load_manifest(&path).unwrap();

        let src = collect_pixels(&m, Domain::Source, 1, 8).unwrap();
        assert_eq!(src.len(), 100);
        assert!(src.iter().all(|s| s.label == Some(7)));
        assert!(src.iter().all(|s| s.entry == 0));

        let src2 = collect_pixels(&m, Domain::Source, 2, 8).unwrap();
        assert_eq!(src2.len(), 25);

        let tgt = collect_pixels(&m, Domain::Target, 1, 8).unwrap();
        assert_eq!(tgt.len(), 100);
        assert!(tgt.iter().all(|s| s.label.is_none()));
        assert!(tgt.iter().all(|s| s.entry == 1));
    }

    #[test]
    fn pixel_stream_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let path = tiny_dataset(dir.path());
        let m = load_manifest(&path).unwrap();
        let a = collect_pixels(&m, Domain::Source, 2, 8).unwrap();
        let b = collect_pixels(&m, Domain::Source, 2, 8).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sample_bins_are_recomputable() {
        let dir = tempfile::tempdir().unwrap();
        let path = tiny_dataset(dir.path());
        let m = load_manifest(&path).unwrap();
        for s in collect_pixels(&m, Domain::Source, 3, 4).unwrap() {
            let bb = &m.entries[s.entry].bbox;
            assert_eq!(s.bin, spatial_bin(s.px, s.py, bb, 4).unwrap());
        }
    }

    #[test]
    fn part_names_resolve() {
        assert_eq!(part_id("foot"), Some(0));
        assert_eq!(part_id("head"), Some(6));
        assert_eq!(part_id("background"), None);
        assert_eq!(part_id("tail"), None);
    }
}
