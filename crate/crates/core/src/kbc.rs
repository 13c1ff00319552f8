//! Keypoint bounding-box-centered cropping.
//!
//! Keypoints are in pixel-index coordinates: `x` grows rightward, `y`
//! downward, and pixel `(c, r)` has its center at `(c, r)`. A
//! [`KbcTransform`] maps original coordinates into the cropped frame as
//! `p -> s * p - offset`.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{check_rank, Error, Result};
use crate::tensor::{resize_by_scale, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeypointSet {
    pub points: Vec<[f64; 2]>,
    pub valid: Vec<bool>,
}

impl KeypointSet {
    pub fn new(points: Vec<[f64; 2]>, valid: Vec<bool>) -> Result<Self> {
        if points.len() != valid.len() {
            return Err(Error::KeypointCount {
                left: points.len(),
                right: valid.len(),
            });
        }
        Ok(Self { points, valid })
    }

    /// All points marked valid.
    pub fn from_points(points: Vec<[f64; 2]>) -> Self {
        let valid = vec![true; points.len()];
        Self { points, valid }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn valid_points(&self) -> impl Iterator<Item = [f64; 2]> + '_ {
        self.points
            .iter()
            .zip(&self.valid)
            .filter(|(_, &v)| v)
            .map(|(p, _)| *p)
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Applies `f` to every point, valid or not.
    pub fn map(&self, f: impl Fn([f64; 2]) -> [f64; 2]) -> Self {
        Self {
            points: self.points.iter().map(|&p| f(p)).collect(),
            valid: self.valid.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
}

impl BoundingBox {
    pub fn width(&self) -> f64 {
        self.xmax - self.xmin
    }

    pub fn height(&self) -> f64 {
        self.ymax - self.ymin
    }

    pub fn center(&self) -> [f64; 2] {
        [0.5 * (self.xmin + self.xmax), 0.5 * (self.ymin + self.ymax)]
    }
}

/// Uniform scale followed by a crop: `p -> scale * p - offset`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KbcTransform {
    pub scale: f64,
    pub offset: [f64; 2],
    pub applied: bool,
}

impl Default for KbcTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl KbcTransform {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            offset: [0.0, 0.0],
            applied: false,
        }
    }

    pub fn forward(&self, p: [f64; 2]) -> [f64; 2] {
        [
            self.scale * p[0] - self.offset[0],
            self.scale * p[1] - self.offset[1],
        ]
    }

    pub fn inverse(&self, q: [f64; 2]) -> [f64; 2] {
        [
            (q[0] + self.offset[0]) / self.scale,
            (q[1] + self.offset[1]) / self.scale,
        ]
    }

    pub fn forward_set(&self, p: &KeypointSet) -> KeypointSet {
        p.map(|x| self.forward(x))
    }

    pub fn inverse_set(&self, q: &KeypointSet) -> KeypointSet {
        q.map(|x| self.inverse(x))
    }

    /// Short hex digest of the exact transform bits, used to key cached
    /// features of transformed images.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.scale.to_le_bytes());
        h.update(self.offset[0].to_le_bytes());
        h.update(self.offset[1].to_le_bytes());
        h.update([self.applied as u8]);
        hex::encode(&h.finalize()[..8])
    }
}

/// Tunables of the crop procedure.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KbcConfig {
    /// Keypoint separation (pixels) that triggers enlargement when not exceeded.
    pub min_distance: f64,
    /// Fraction of the crop the enlarged keypoint box may occupy.
    pub context_margin: f64,
    /// Hard ceiling on the enlargement factor.
    pub max_scale: f64,
}

impl Default for KbcConfig {
    fn default() -> Self {
        Self {
            min_distance: 16.0,
            context_margin: 0.9,
            max_scale: 8.0,
        }
    }
}

pub fn get_bounding_box(p: &KeypointSet) -> Result<BoundingBox> {
    let mut it = p.valid_points();
    let first = it.next().ok_or(Error::EmptyKeypoints)?;
    let init = BoundingBox {
        xmin: first[0],
        ymin: first[1],
        xmax: first[0],
        ymax: first[1],
    };
    Ok(it.fold(init, |b, [x, y]| BoundingBox {
        xmin: b.xmin.min(x),
        ymin: b.ymin.min(y),
        xmax: b.xmax.max(x),
        ymax: b.ymax.max(y),
    }))
}

/// Smallest Euclidean distance between two valid points; `+inf` with fewer
/// than two.
pub fn min_pairwise_distance(p: &KeypointSet) -> f64 {
    let pts: Vec<[f64; 2]> = p.valid_points().collect();
    let mut best = f64::INFINITY;
    for (i, a) in pts.iter().enumerate() {
        for b in &pts[i + 1..] {
            best = best.min((a[0] - b[0]).hypot(a[1] - b[1]));
        }
    }
    best
}

/// `max(w_box / w, h_box / h) < threshold`.
pub fn contains_small_object(
    p: &KeypointSet,
    input_w: f64,
    input_h: f64,
    threshold: f64,
) -> Result<bool> {
    if !(input_w > 0.0 && input_h > 0.0) {
        return Err(Error::Config(format!(
            "degenerate input size {input_w}x{input_h}"
        )));
    }
    let b = get_bounding_box(p)?;
    let r = (b.width() / input_w).max(b.height() / input_h);
    Ok(r < threshold)
}

fn image_extents<T: Scalar>(img: &Tensor<T>) -> Result<(usize, usize)> {
    check_rank("kbc.image", 3, img.rank())?;
    Ok((img.dim(2), img.dim(1)))
}

/// Crops an `out_w x out_h` window centered on `center`, shifted to stay
/// inside the image. Offsets are whole pixels.
pub fn center_crop<T: Scalar>(
    img: &Tensor<T>,
    p: &KeypointSet,
    center: [f64; 2],
    out_w: usize,
    out_h: usize,
) -> Result<(Tensor<T>, KeypointSet, KbcTransform)> {
    let (w, h) = image_extents(img)?;
    if out_w > w || out_h > h || out_w == 0 || out_h == 0 {
        return Err(Error::CropTooLarge {
            crop_w: out_w,
            crop_h: out_h,
            img_w: w,
            img_h: h,
        });
    }
    let place = |c: f64, out: usize, full: usize| -> usize {
        let start = (c - out as f64 / 2.0).round();
        start.clamp(0.0, (full - out) as f64) as usize
    };
    let (ox, oy) = (place(center[0], out_w, w), place(center[1], out_h, h));
    let c = img.dim(0);
    let mut data = Vec::with_capacity(c * out_w * out_h);
    for ch in 0..c {
        for y in oy..oy + out_h {
            let row = (ch * h + y) * w;
            data.extend_from_slice(&img.data()[row + ox..row + ox + out_w]);
        }
    }
    let t = KbcTransform {
        scale: 1.0,
        offset: [ox as f64, oy as f64],
        applied: true,
    };
    Ok((Tensor::new(&[c, out_h, out_w], data)?, t.forward_set(p), t))
}

/// Enlargement factor for the resize branch:
/// `min(D / min_dis, margin * min(out_w / w_box, out_h / h_box))`, floored
/// at 1 and capped at `max_scale`.
pub fn kbc_scale(
    bbox: &BoundingBox,
    min_dis: f64,
    out_w: usize,
    out_h: usize,
    cfg: &KbcConfig,
) -> f64 {
    let fit = |out: usize, extent: f64| {
        if extent > 0.0 {
            out as f64 / extent
        } else {
            f64::INFINITY
        }
    };
    let s_max = cfg.context_margin * fit(out_w, bbox.width()).min(fit(out_h, bbox.height()));
    let target = if min_dis > 0.0 {
        cfg.min_distance / min_dis
    } else {
        log::warn!("duplicate keypoints cannot be separated by enlargement");
        f64::INFINITY
    };
    target.min(s_max).max(1.0).min(cfg.max_scale)
}

/// Enlarges the image so keypoints move apart; returns the image, the
/// scaled keypoints and the factor.
pub fn resize_for_kbc<T: Scalar>(
    img: &Tensor<T>,
    p: &KeypointSet,
    min_dis: f64,
    out_w: usize,
    out_h: usize,
    cfg: &KbcConfig,
) -> Result<(Tensor<T>, KeypointSet, f64)> {
    image_extents(img)?;
    let s = kbc_scale(&get_bounding_box(p)?, min_dis, out_w, out_h, cfg);
    let resized = if s == 1.0 {
        img.clone()
    } else {
        resize_by_scale(img, s)?
    };
    Ok((resized, p.map(|[x, y]| [s * x, s * y]), s))
}

/// Which branch [`kbc_preprocess`] took.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KbcBranch {
    DirectCrop,
    ResizeThenCrop,
}

#[derive(Clone, Debug)]
pub struct KbcOutput<T = f32> {
    pub image: Tensor<T>,
    pub keypoints: KeypointSet,
    pub transform: KbcTransform,
    pub branch: KbcBranch,
}

/// Crop directly when keypoints are already further apart than
/// `cfg.min_distance`, otherwise enlarge first and crop around the enlarged
/// keypoint box.
pub fn kbc_preprocess<T: Scalar>(
    img: &Tensor<T>,
    p: &KeypointSet,
    out_w: usize,
    out_h: usize,
    cfg: &KbcConfig,
) -> Result<KbcOutput<T>> {
    let bbox = get_bounding_box(p)?;
    let min_dis = min_pairwise_distance(p);
    if min_dis > cfg.min_distance {
        let (image, keypoints, transform) = center_crop(img, p, bbox.center(), out_w, out_h)?;
        return Ok(KbcOutput {
            image,
            keypoints,
            transform,
            branch: KbcBranch::DirectCrop,
        });
    }
    let (resized, scaled, s) = resize_for_kbc(img, p, min_dis, out_w, out_h, cfg)?;
    let center = get_bounding_box(&scaled)?.center();
    let (image, keypoints, crop) = center_crop(&resized, &scaled, center, out_w, out_h)?;
    Ok(KbcOutput {
        image,
        keypoints,
        transform: KbcTransform {
            scale: s,
            offset: crop.offset,
            applied: true,
        },
        branch: KbcBranch::ResizeThenCrop,
    })
}
