//! Synthetic correspondence data with exactly known ground truth.
//!
//! Small-object pairs place a smoothly textured ellipse on a flat mid-gray
//! background and map it to the target by a random similarity with shear.
//! Texture color is a function of object coordinates only, so matching
//! appearance survives the warp. Shift pairs translate a full-frame texture
//! by a constant offset.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::annotation::PairAnnotation;
use crate::error::{Error, Result};
use crate::kbc::{BoundingBox, KeypointSet};
use crate::tensor::Tensor;

/// Sum of three sinusoids per color channel over a 2D coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct Texture {
    /// `[channel][term] = (kx, ky, phase)` with wave numbers in radians per
    /// pixel.
    terms: [[(f64, f64, f64); 3]; 3],
    amplitude: f64,
}

impl Texture {
    pub fn random<R: Rng>(rng: &mut R, min_period: f64, max_period: f64, amplitude: f64) -> Self {
        let mut terms = [[(0.0, 0.0, 0.0); 3]; 3];
        for ch in terms.iter_mut() {
            for t in ch.iter_mut() {
                let period = rng.gen_range(min_period..max_period);
                let angle = rng.gen_range(0.0..TAU);
                let k = TAU / period;
                *t = (k * angle.cos(), k * angle.sin(), rng.gen_range(0.0..TAU));
            }
        }
        Self { terms, amplitude }
    }

    /// Color in `[0.5 - amplitude, 0.5 + amplitude]`.
    pub fn color(&self, x: f64, y: f64) -> [f64; 3] {
        let mut out = [0.0; 3];
        for (o, ch) in out.iter_mut().zip(&self.terms) {
            let s: f64 = ch
                .iter()
                .map(|&(kx, ky, ph)| (kx * x + ky * y + ph).sin())
                .sum();
            *o = 0.5 + self.amplitude * s / 3.0;
        }
        out
    }
}

/// Row-major 2x2 matrix with translation: `p -> m p + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine {
    pub m: [[f64; 2]; 2],
    pub t: [f64; 2],
}

impl Affine {
    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        [
            self.m[0][0] * p[0] + self.m[0][1] * p[1] + self.t[0],
            self.m[1][0] * p[0] + self.m[1][1] * p[1] + self.t[1],
        ]
    }

    pub fn inverse(&self) -> Affine {
        let [[a, b], [c, d]] = self.m;
        let det = a * d - b * c;
        let m = [[d / det, -b / det], [-c / det, a / det]];
        let t = [
            -(m[0][0] * self.t[0] + m[0][1] * self.t[1]),
            -(m[1][0] * self.t[0] + m[1][1] * self.t[1]),
        ];
        Affine { m, t }
    }

    pub fn then(&self, next: &Affine) -> Affine {
        let m = |i: usize, j: usize| next.m[i][0] * self.m[0][j] + next.m[i][1] * self.m[1][j];
        Affine {
            m: [[m(0, 0), m(0, 1)], [m(1, 0), m(1, 1)]],
            t: next.apply(self.t),
        }
    }
}

/// One generated image pair with ground truth.
#[derive(Clone, Debug)]
pub struct SyntheticPair {
    pub pair_id: String,
    pub src_id: String,
    pub trg_id: String,
    pub src_image: Tensor<f32>,
    pub trg_image: Tensor<f32>,
    pub src_points: KeypointSet,
    pub trg_points: KeypointSet,
    pub src_bbox: BoundingBox,
    pub trg_bbox: BoundingBox,
    /// Source-to-target pixel map.
    pub warp: Affine,
}

impl SyntheticPair {
    /// Annotation record with both object boxes.
    pub fn annotation(&self) -> PairAnnotation {
        let size = |t: &Tensor<f32>| [t.dim(2), t.dim(1)];
        PairAnnotation {
            pair_id: self.pair_id.clone(),
            src_id: self.src_id.clone(),
            trg_id: self.trg_id.clone(),
            src_size: size(&self.src_image),
            trg_size: size(&self.trg_image),
            category: "synthetic".into(),
            src_keypoints: self.src_points.points.clone(),
            trg_keypoints: self.trg_points.points.clone(),
            src_valid: Some(self.src_points.valid.clone()),
            trg_valid: Some(self.trg_points.valid.clone()),
            src_bbox: Some(self.src_bbox),
            trg_bbox: Some(self.trg_bbox),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SmallObjectConfig {
    pub size: usize,
    pub keypoints: usize,
    /// Object bounding-box side limits as a fraction of the frame, applied
    /// to both images.
    pub min_extent: f64,
    pub max_extent: f64,
    /// Texture wavelength range in object pixels.
    pub min_period: f64,
    pub max_period: f64,
    pub seed: u64,
}

impl Default for SmallObjectConfig {
    fn default() -> Self {
        Self {
            size: 256,
            keypoints: 8,
            min_extent: 0.22,
            max_extent: 0.39,
            min_period: 28.0,
            max_period: 64.0,
            seed: 0,
        }
    }
}

fn pair_rng(seed: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// Axis-aligned box of the ellipse `{ pose(a cos t, b sin t) }`.
fn ellipse_bbox(pose: &Affine, a: f64, b: f64) -> BoundingBox {
    // Extreme x of m*(a cos t, b sin t) is |(m00 a, m01 b)|, likewise for y.
    let hx = (pose.m[0][0] * a).hypot(pose.m[0][1] * b);
    let hy = (pose.m[1][0] * a).hypot(pose.m[1][1] * b);
    BoundingBox {
        xmin: pose.t[0] - hx,
        ymin: pose.t[1] - hy,
        xmax: pose.t[0] + hx,
        ymax: pose.t[1] + hy,
    }
}

fn render(size: usize, tex: &Texture, to_object: &Affine, a: f64, b: f64) -> Result<Tensor<f32>> {
    let plane = size * size;
    let mut data = vec![0.5f32; 3 * plane];
    for y in 0..size {
        for x in 0..size {
            let o = to_object.apply([x as f64, y as f64]);
            if (o[0] / a).powi(2) + (o[1] / b).powi(2) <= 1.0 {
                let c = tex.color(o[0], o[1]);
                for ch in 0..3 {
                    data[ch * plane + y * size + x] = c[ch] as f32;
                }
            }
        }
    }
    Tensor::new(&[3, size, size], data)
}

fn pose<R: Rng>(
    rng: &mut R,
    scale: f64,
    angle: f64,
    shear: f64,
    a: f64,
    b: f64,
    size: f64,
) -> Affine {
    let (c, s) = (angle.cos(), angle.sin());
    // Rotation * scale * shear.
    let m = [
        [scale * c, scale * (c * shear - s)],
        [scale * s, scale * (s * shear + c)],
    ];
    let probe = Affine { m, t: [0.0, 0.0] };
    let bb = ellipse_bbox(&probe, a, b);
    let margin = 4.0;
    let tx = rng.gen_range(margin - bb.xmin..size - margin - bb.xmax);
    let ty = rng.gen_range(margin - bb.ymin..size - margin - bb.ymax);
    Affine { m, t: [tx, ty] }
}

/// Small textured object with keypoints, and its affinely warped copy.
pub fn small_object_pair(cfg: &SmallObjectConfig, index: usize) -> Result<SyntheticPair> {
    if cfg.keypoints == 0
        || cfg.size < 32
        || !(0.0 < cfg.min_extent && cfg.min_extent < cfg.max_extent)
        || !(0.0 < cfg.min_period && cfg.min_period <= cfg.max_period)
    {
        return Err(Error::Config(
            "invalid synthetic benchmark configuration".into(),
        ));
    }
    let mut rng = pair_rng(cfg.seed, index);
    let size = cfg.size as f64;
    let tex = Texture::random(&mut rng, cfg.min_period, cfg.max_period, 0.45);

    let trg_scale: f64 = rng.gen_range(0.85..1.15);
    let src_angle = rng.gen_range(-0.3..0.3);
    let trg_angle = src_angle + rng.gen_range(-0.25..0.25);
    let shear: f64 = rng.gen_range(-0.1..0.1);
    // Longest side at scale 1, kept inside the extent limits in both images.
    let hi = cfg.max_extent * size / trg_scale.max(1.0) / (1.0 + shear.abs());
    let lo = (cfg.min_extent * size / trg_scale.min(1.0)).min(hi * 0.9);
    let long = rng.gen_range(lo..hi);
    let aspect = rng.gen_range(0.7..1.0);
    let (a, b) = (0.5 * long, 0.5 * long * aspect);

    let src_pose = pose(&mut rng, 1.0, src_angle, 0.0, a, b, size);
    let trg_pose = pose(&mut rng, trg_scale, trg_angle, shear, a, b, size);
    let warp = src_pose.inverse().then(&trg_pose);

    let mut obj = Vec::with_capacity(cfg.keypoints);
    while obj.len() < cfg.keypoints {
        let (u, v) = (rng.gen_range(-1.0..1.0f64), rng.gen_range(-1.0..1.0f64));
        if u * u + v * v <= 0.8f64.powi(2) {
            obj.push([u * a, v * b]);
        }
    }
    let src_points = KeypointSet::from_points(obj.iter().map(|&o| src_pose.apply(o)).collect());
    let trg_points = KeypointSet::from_points(obj.iter().map(|&o| trg_pose.apply(o)).collect());

    Ok(SyntheticPair {
        pair_id: format!("syn{index:04}"),
        src_id: format!("syn{index:04}s"),
        trg_id: format!("syn{index:04}t"),
        src_image: render(cfg.size, &tex, &src_pose.inverse(), a, b)?,
        trg_image: render(cfg.size, &tex, &trg_pose.inverse(), a, b)?,
        src_points,
        trg_points,
        src_bbox: ellipse_bbox(&src_pose, a, b),
        trg_bbox: ellipse_bbox(&trg_pose, a, b),
        warp,
    })
}

/// Full-frame texture and its copy translated by `shift` pixels. Keypoints
/// sit at every stride-`stride` cell center whose shifted position stays in
/// the frame.
pub fn shift_pair(
    size: usize,
    stride: usize,
    shift: [f64; 2],
    seed: u64,
    index: usize,
) -> Result<SyntheticPair> {
    let mut rng = pair_rng(seed, index);
    let tex = Texture::random(&mut rng, 20.0, 48.0, 0.45);
    let plane = size * size;
    let draw = |dx: f64, dy: f64| {
        Tensor::from_fn(&[3, size, size], |i| {
            let (ch, y, x) = (i / plane, (i / size) % size, i % size);
            tex.color(x as f64 - dx, y as f64 - dy)[ch] as f32
        })
    };
    let limit = size as f64 - 0.5;
    let mut sp = Vec::new();
    let mut tp = Vec::new();
    let cells = size / stride;
    for i in 0..cells {
        for j in 0..cells {
            let p = [
                (j * stride) as f64 + 0.5 * stride as f64 - 0.5,
                (i * stride) as f64 + 0.5 * stride as f64 - 0.5,
            ];
            let q = [p[0] + shift[0], p[1] + shift[1]];
            if (-0.5..=limit).contains(&q[0]) && (-0.5..=limit).contains(&q[1]) {
                sp.push(p);
                tp.push(q);
            }
        }
    }
    let full = BoundingBox {
        xmin: 0.0,
        ymin: 0.0,
        xmax: size as f64,
        ymax: size as f64,
    };
    Ok(SyntheticPair {
        pair_id: format!("shift{index:04}"),
        src_id: format!("shift{index:04}s"),
        trg_id: format!("shift{index:04}t"),
        src_image: draw(0.0, 0.0)?,
        trg_image: draw(shift[0], shift[1])?,
        src_points: KeypointSet::from_points(sp),
        trg_points: KeypointSet::from_points(tp),
        src_bbox: full,
        trg_bbox: full,
        warp: Affine {
            m: [[1.0, 0.0], [0.0, 1.0]],
            t: shift,
        },
    })
}
