//! Procedural two-domain articulated-figure datasets.
//!
//! Draws a 2D stick figure as textured capsules on a textured background.
//! Two style presets ("domA" for the source domain, "domB" for target and
//! test) differ in limb widths and every texture parameter, creating a
//! controllable appearance gap while poses share the same gait semantics.
//! Every image comes with a per-pixel part label map, a bounding box and the
//! ground-truth joint coordinates.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use crate::data_model::{BoundingBox, Joints, LabelMap, ManifestLine, PART_NAMES};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from, splitmix64};
use rand::Rng;

/// Default square canvas edge in pixels.
pub const DEFAULT_CANVAS: u32 = 112;

/// Joint radius of the generated label disks, as a fraction of sqrt(bbox
/// area); half the evaluation tolerance, so generated labels always score.
pub const LABEL_RADIUS_FRAC: f64 = 0.1;

/// Pixels whose Chebyshev distance to a joint is at most this are inside the
/// side-L square centered on the joint, with L/2 rounded to the nearest half
/// pixel. The same rule scores classified pixels, so generated label disks
/// and scoring squares coincide exactly.
pub fn label_tolerance(sqrt_area: f64) -> f64 {
    (2.0 * LABEL_RADIUS_FRAC * sqrt_area).round() / 2.0
}

/// Chebyshev (max-axis) distance between a pixel center and a point.
pub fn chebyshev(px: i32, py: i32, x: f64, y: f64) -> f64 {
    (px as f64 - x).abs().max((py as f64 - y).abs())
}

/// Procedural fill.
#[derive(Debug, Clone, PartialEq)]
pub enum Texture {
    Flat {
        rgb: [u8; 3],
    },
    Stripes {
        a: [u8; 3],
        b: [u8; 3],
        period: f64,
        angle: f64,
    },
    Noise {
        base: [u8; 3],
        amp: u8,
    },
}

impl Texture {
    fn sample(&self, x: u32, y: u32, salt: u64) -> [u8; 3] {
        match self {
            Texture::Flat { rgb } => *rgb,
            Texture::Stripes { a, b, period, angle } => {
                let s = x as f64 * angle.cos() + y as f64 * angle.sin();
                let band = (s / period).floor() as i64;
                if band.rem_euclid(2) == 0 {
                    *a
                } else {
                    *b
                }
            }
            Texture::Noise { base, amp } => {
                let h = splitmix64(salt ^ splitmix64(((x as u64) << 32) | y as u64));
                let mut out = [0u8; 3];
                for (i, o) in out.iter_mut().enumerate() {
                    let r = ((h >> (i * 8)) & 0xff) as i32;
                    let delta = (r * (2 * *amp as i32 + 1)) / 256 - *amp as i32;
                    *o = (base[i] as i32 + delta).clamp(0, 255) as u8;
                }
                out
            }
        }
    }
}

/// Appearance parameters of one domain. Widths and the head radius are
/// fractions of the figure height; `h_frac` is the figure height as a
/// fraction of the canvas edge.
#[derive(Debug, Clone, PartialEq)]
pub struct FigureStyle {
    pub name: &'static str,
    pub h_frac: f64,
    pub torso_w: f64,
    pub arm_w: f64,
    pub leg_w: f64,
    pub head_r: f64,
    pub torso_tex: Texture,
    pub limb_tex: Texture,
    pub bg_tex: Texture,
}

/// The two built-in domains.
pub fn style_preset(name: &str) -> Option<FigureStyle> {
    match name {
        "domA" => Some(FigureStyle {
            name: "domA",
            h_frac: 0.60,
            torso_w: 0.16,
            arm_w: 0.055,
            leg_w: 0.075,
            head_r: 0.085,
            torso_tex: Texture::Stripes {
                a: [70, 90, 200],
                b: [235, 235, 245],
                period: 4.0,
                angle: 0.35,
            },
            limb_tex: Texture::Flat { rgb: [70, 55, 45] },
            bg_tex: Texture::Stripes {
                a: [205, 210, 220],
                b: [220, 224, 233],
                period: 3.0,
                angle: 2.2,
            },
        }),
        "domB" => Some(FigureStyle {
            name: "domB",
            h_frac: 0.64,
            torso_w: 0.20,
            arm_w: 0.07,
            leg_w: 0.095,
            head_r: 0.095,
            torso_tex: Texture::Stripes {
                a: [150, 45, 55],
                b: [250, 210, 80],
                period: 6.0,
                angle: 1.25,
            },
            limb_tex: Texture::Flat { rgb: [35, 70, 100] },
            bg_tex: Texture::Flat { rgb: [150, 140, 125] },
        }),
        _ => None,
    }
}

// Skeleton proportions in figure-height units.
const TORSO_LEN: f64 = 0.32;
const NECK_LEN: f64 = 0.12;
const SHOULDER_HW: f64 = 0.10;
const HIP_HW: f64 = 0.07;
const UPPER_LEG: f64 = 0.22;
const LOWER_LEG: f64 = 0.22;
const UPPER_ARM: f64 = 0.16;
const FOREARM: f64 = 0.14;

/// Number of skeleton joints (head, and left+right of shoulder, elbow,
/// hand, hip, knee, foot).
pub const NUM_JOINTS: usize = 13;

/// Part id of each skeleton joint, in the order produced by
/// [`PoseSpec::joint_points`].
pub const JOINT_PARTS: [usize; NUM_JOINTS] = [
    6, // head
    3, 3, // shoulders L, R
    4, 4, // elbows
    5, 5, // hands
    2, 2, // hips
    1, 1, // knees
    0, 0, // feet
];

/// A sampled body configuration: root position (canvas fractions), joint
/// angles in radians. Left/right limb angles share their noise terms, so
/// advancing the gait phase by one half-cycle exactly swaps sides.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseSpec {
    pub root: (f64, f64),
    pub lean: f64,
    pub head_tilt: f64,
    /// Upper-leg swing angles from straight down, left then right.
    pub leg: [f64; 2],
    /// Knee bend relative to the upper leg.
    pub knee: [f64; 2],
    /// Upper-arm swing angles, left then right.
    pub arm: [f64; 2],
    /// Elbow bend relative to the upper arm.
    pub elbow: [f64; 2],
}

/// Draw a pose for the given gait phase in [0, 1). Limbs swing sinusoidally
/// with the phase; bounded noise perturbs amplitudes and phase offsets but is
/// shared between the left and right side of each limb pair, so
/// `sample_pose(seed, p + 0.5)` swaps left and right angles exactly.
pub fn sample_pose(seed: u64, phase: f64) -> PoseSpec {
    let mut rng = rng_from(seed, &[b'p' as u64]);
    // noise draws are position-independent of phase: same seed, same noise
    let n_leg_amp: f64 = rng.random_range(-0.06..0.06);
    let n_leg_ph: f64 = rng.random_range(-0.25..0.25);
    let n_knee_amp: f64 = rng.random_range(-0.06..0.06);
    let n_knee_ph: f64 = rng.random_range(-0.25..0.25);
    let n_arm_amp: f64 = rng.random_range(-0.05..0.05);
    let n_arm_ph: f64 = rng.random_range(-0.25..0.25);
    let n_elb_amp: f64 = rng.random_range(-0.05..0.05);
    let n_elb_ph: f64 = rng.random_range(-0.25..0.25);
    let lean: f64 = rng.random_range(-0.06..0.06);
    let head_tilt: f64 = rng.random_range(-0.10..0.10);
    let root_dx: f64 = rng.random_range(-0.03..0.03);
    let root_dy: f64 = rng.random_range(-0.02..0.02);

    let w = 2.0 * PI * phase;
    let swing = |amp: f64, ph: f64, flip: f64| amp * (w + ph + flip).sin();
    let leg_l = swing(0.45 + n_leg_amp, n_leg_ph, 0.0);
    let leg_r = swing(0.45 + n_leg_amp, n_leg_ph, PI);
    let knee = |flip: f64| 0.12 + (0.30 + n_knee_amp) * (1.0 + (w + n_knee_ph + flip).sin()) / 2.0;
    // arms counter-swing against the legs
    let arm_l = swing(0.35 + n_arm_amp, n_arm_ph, PI);
    let arm_r = swing(0.35 + n_arm_amp, n_arm_ph, 0.0);
    let elbow = |flip: f64| {
        -(0.15 + (0.25 + n_elb_amp) * (1.0 + (w + n_elb_ph + flip).sin()) / 2.0)
    };

    PoseSpec {
        root: (0.5 + root_dx, 0.58 + root_dy),
        lean,
        head_tilt,
        leg: [leg_l, leg_r],
        knee: [knee(0.0), knee(PI)],
        arm: [arm_l, arm_r],
        elbow: [elbow(PI), elbow(0.0)],
    }
}

type Pt = (f64, f64);

fn add(a: Pt, b: Pt) -> Pt {
    (a.0 + b.0, a.1 + b.1)
}

fn mul(a: Pt, s: f64) -> Pt {
    (a.0 * s, a.1 * s)
}

/// Direction `a` radians off straight up (screen y grows downward).
fn up(a: f64) -> Pt {
    (a.sin(), -a.cos())
}

/// Direction `a` radians off straight down.
fn down(a: f64) -> Pt {
    (a.sin(), a.cos())
}

impl PoseSpec {
    /// Forward kinematics: the 13 joint points in canvas-fraction
    /// coordinates, ordered as in [`JOINT_PARTS`]. `h_frac` is the figure
    /// height as a canvas fraction.
    pub fn joint_points(&self, h_frac: f64) -> [Pt; NUM_JOINTS] {
        let s = h_frac;
        let hip_c = self.root;
        let shoulder_c = add(hip_c, mul(up(self.lean), TORSO_LEN * s));
        let head = add(shoulder_c, mul(up(self.lean + self.head_tilt), NECK_LEN * s));
        let lat = (self.lean.cos(), self.lean.sin());
        let sh_l = add(shoulder_c, mul(lat, -SHOULDER_HW * s));
        let sh_r = add(shoulder_c, mul(lat, SHOULDER_HW * s));
        let hip_l = add(hip_c, mul(lat, -HIP_HW * s));
        let hip_r = add(hip_c, mul(lat, HIP_HW * s));
        let knee_l = add(hip_l, mul(down(self.leg[0]), UPPER_LEG * s));
        let knee_r = add(hip_r, mul(down(self.leg[1]), UPPER_LEG * s));
        let foot_l = add(knee_l, mul(down(self.leg[0] + self.knee[0]), LOWER_LEG * s));
        let foot_r = add(knee_r, mul(down(self.leg[1] + self.knee[1]), LOWER_LEG * s));
        let elb_l = add(sh_l, mul(down(self.arm[0]), UPPER_ARM * s));
        let elb_r = add(sh_r, mul(down(self.arm[1]), UPPER_ARM * s));
        let hand_l = add(elb_l, mul(down(self.arm[0] + self.elbow[0]), FOREARM * s));
        let hand_r = add(elb_r, mul(down(self.arm[1] + self.elbow[1]), FOREARM * s));
        [
            head, sh_l, sh_r, elb_l, elb_r, hand_l, hand_r, hip_l, hip_r, knee_l, knee_r,
            foot_l, foot_r,
        ]
    }
}

/// Distance from a point to a segment.
fn segment_distance(p: Pt, a: Pt, b: Pt) -> f64 {
    let ab = (b.0 - a.0, b.1 - a.1);
    let ap = (p.0 - a.0, p.1 - a.1);
    let len2 = ab.0 * ab.0 + ab.1 * ab.1;
    let t = if len2 == 0.0 {
        0.0
    } else {
        ((ap.0 * ab.0 + ap.1 * ab.1) / len2).clamp(0.0, 1.0)
    };
    let dx = ap.0 - t * ab.0;
    let dy = ap.1 - t * ab.1;
    (dx * dx + dy * dy).sqrt()
}

enum Fill {
    Torso,
    Limb,
}

struct Capsule {
    a: Pt,
    b: Pt,
    radius: f64,
    fill: Fill,
}

/// Rendered sample: image, per-pixel labels, bounding box and joints.
pub struct Rendered {
    pub image: image::RgbImage,
    pub label_map: LabelMap,
    pub bbox: BoundingBox,
    pub joints: Joints,
}

/// Rasterize a pose in a style onto a square canvas. Capsules are painted
/// back to front; figure pixels within the label tolerance of a joint get
/// that joint's part (ties: nearest joint, then lower part id), all other
/// pixels are background. The bounding box is the tight box around the
/// figure dilated by 5%.
pub fn render(pose: &PoseSpec, style: &FigureStyle, canvas: u32, rng_seed: u64) -> Rendered {
    let c = canvas as f64;
    let pts = pose.joint_points(style.h_frac).map(|p| (p.0 * c, p.1 * c));
    let [head, sh_l, sh_r, elb_l, elb_r, hand_l, hand_r, hip_l, hip_r, knee_l, knee_r, foot_l, foot_r] =
        pts;
    let hip_c = ((hip_l.0 + hip_r.0) / 2.0, (hip_l.1 + hip_r.1) / 2.0);
    let sh_c = ((sh_l.0 + sh_r.0) / 2.0, (sh_l.1 + sh_r.1) / 2.0);

    let hs = style.h_frac * c; // figure height in pixels
    let torso_r = style.torso_w * hs / 2.0;
    let arm_r = style.arm_w * hs / 2.0;
    let leg_r = style.leg_w * hs / 2.0;
    let head_r = style.head_r * hs;

    // back-to-front: right limbs, torso block, head, left limbs
    let capsules = [
        Capsule { a: sh_r, b: elb_r, radius: arm_r, fill: Fill::Limb },
        Capsule { a: elb_r, b: hand_r, radius: arm_r, fill: Fill::Limb },
        Capsule { a: hip_r, b: knee_r, radius: leg_r, fill: Fill::Limb },
        Capsule { a: knee_r, b: foot_r, radius: leg_r, fill: Fill::Limb },
        Capsule { a: hip_c, b: sh_c, radius: torso_r, fill: Fill::Torso },
        Capsule { a: hip_l, b: hip_r, radius: leg_r, fill: Fill::Torso },
        Capsule { a: sh_l, b: sh_r, radius: arm_r, fill: Fill::Torso },
        Capsule { a: head, b: head, radius: head_r, fill: Fill::Torso },
        Capsule { a: hip_l, b: knee_l, radius: leg_r, fill: Fill::Limb },
        Capsule { a: knee_l, b: foot_l, radius: leg_r, fill: Fill::Limb },
        Capsule { a: sh_l, b: elb_l, radius: arm_r, fill: Fill::Limb },
        Capsule { a: elb_l, b: hand_l, radius: arm_r, fill: Fill::Limb },
    ];

    let bg_salt = splitmix64(rng_seed ^ 0xb0);
    let fig_salt = splitmix64(rng_seed ^ 0xf1);
    let mut image = image::RgbImage::new(canvas, canvas);
    let mut covered = vec![false; (canvas * canvas) as usize];
    for y in 0..canvas {
        for x in 0..canvas {
            let p = (x as f64, y as f64);
            // front-most = last in paint order
            let mut tex: Option<&Texture> = None;
            for cap in capsules.iter().rev() {
                if segment_distance(p, cap.a, cap.b) <= cap.radius {
                    tex = Some(match cap.fill {
                        Fill::Torso => &style.torso_tex,
                        Fill::Limb => &style.limb_tex,
                    });
                    break;
                }
            }
            let rgb = match tex {
                Some(t) => {
                    covered[(y * canvas + x) as usize] = true;
                    t.sample(x, y, fig_salt)
                }
                None => style.bg_tex.sample(x, y, bg_salt),
            };
            image.put_pixel(x, y, image::Rgb(rgb));
        }
    }

    // tight figure box, dilated by 5% (2.5% per side) and clamped
    let mut min_x = canvas as i64;
    let mut min_y = canvas as i64;
    let mut max_x = -1i64;
    let mut max_y = -1i64;
    for y in 0..canvas as i64 {
        for x in 0..canvas as i64 {
            if covered[(y * canvas as i64 + x) as usize] {
                min_x = min_x.min(x);
                min_y = min_y.min(y);
                max_x = max_x.max(x);
                max_y = max_y.max(y);
            }
        }
    }
    debug_assert!(max_x >= min_x && max_y >= min_y, "figure fully off canvas");
    let w = max_x - min_x + 1;
    let h = max_y - min_y + 1;
    let mx = ((w as f64) * 0.025).round() as i64;
    let my = ((h as f64) * 0.025).round() as i64;
    let x0 = (min_x - mx).max(0);
    let y0 = (min_y - my).max(0);
    let x1 = (max_x + mx + 1).min(canvas as i64);
    let y1 = (max_y + my + 1).min(canvas as i64);
    let bbox = BoundingBox {
        x: x0 as i32,
        y: y0 as i32,
        w: (x1 - x0) as u32,
        h: (y1 - y0) as u32,
    };

    let tol = label_tolerance(bbox.sqrt_area());
    let mut label_map = LabelMap::new(canvas, canvas);
    for y in 0..canvas {
        for x in 0..canvas {
            if !covered[(y * canvas + x) as usize] {
                continue;
            }
            // nearest joint within tolerance wins; ties prefer lower part id
            let mut best: Option<(f64, usize)> = None;
            for (j, &(jx, jy)) in pts.iter().enumerate() {
                let d = chebyshev(x as i32, y as i32, jx, jy);
                if d > tol {
                    continue;
                }
                let part = JOINT_PARTS[j];
                best = match best {
                    None => Some((d, part)),
                    Some((bd, bp)) if d < bd || (d == bd && part < bp) => Some((d, part)),
                    other => other,
                };
            }
            if let Some((_, part)) = best {
                label_map.set(x, y, part as u8);
            }
        }
    }

    let mut joints = Joints::default();
    for (j, &(jx, jy)) in pts.iter().enumerate() {
        joints.per_part[JOINT_PARTS[j]].push((jx, jy));
    }

    Rendered { image, label_map, bbox, joints }
}

fn joints_to_wire(joints: &Joints) -> std::collections::BTreeMap<String, Vec<[f64; 2]>> {
    let mut map = std::collections::BTreeMap::new();
    for (part, list) in joints.per_part.iter().enumerate() {
        if !list.is_empty() {
            map.insert(
                PART_NAMES[part].to_string(),
                list.iter().map(|&(x, y)| [x, y]).collect(),
            );
        }
    }
    map
}

/// Generate a dataset: `n_source` images in style domA with labels,
/// `n_target` and `n_test` images in style domB. Every entry gets a label
/// map (target/test maps are for analysis only; training never reads them)
/// and its joints. Returns the manifest path.
pub fn generate(
    out_dir: &Path,
    n_source: usize,
    n_target: usize,
    n_test: usize,
    seed: u64,
    canvas: u32,
) -> Result<PathBuf> {
    if canvas < 32 {
        return Err(Error::Config(format!("canvas must be >= 32, got {canvas}")));
    }
    let img_dir = out_dir.join("img");
    let lbl_dir = out_dir.join("lbl");
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    std::fs::create_dir_all(&lbl_dir).map_err(|e| Error::io(&lbl_dir, e))?;

    let dom_a = style_preset("domA").expect("built-in style");
    let dom_b = style_preset("domB").expect("built-in style");
    let groups: [(&str, &str, usize, &FigureStyle, u64); 3] = [
        ("source", "src", n_source, &dom_a, 1),
        ("target", "tgt", n_target, &dom_b, 2),
        ("test", "tst", n_test, &dom_b, 3),
    ];

    let mut lines = Vec::new();
    for (domain, prefix, count, style, tag) in groups {
        for i in 0..count {
            let pose_seed = derive_seed(seed, &[tag, i as u64, 0]);
            let render_seed = derive_seed(seed, &[tag, i as u64, 1]);
            let phase = (i % 16) as f64 / 16.0;
            let pose = sample_pose(pose_seed, phase);
            let r = render(&pose, style, canvas, render_seed);

            let img_rel = format!("img/{prefix}_{i:04}.png");
            let lbl_rel = format!("lbl/{prefix}_{i:04}.png");
            let img_path = out_dir.join(&img_rel);
            r.image.save(&img_path).map_err(|e| Error::image(&img_path, e))?;
            r.label_map.save(&out_dir.join(&lbl_rel))?;

            lines.push(ManifestLine {
                image: img_rel,
                labels: Some(lbl_rel),
                bbox: [r.bbox.x as i64, r.bbox.y as i64, r.bbox.w as i64, r.bbox.h as i64],
                domain: domain.to_string(),
                joints: Some(joints_to_wire(&r.joints)),
            });
        }
    }

    let manifest_path = out_dir.join("manifest.jsonl");
    crate::data_model::write_manifest(&manifest_path, &lines)?;
    Ok(manifest_path)
}
