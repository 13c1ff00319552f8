//! Flow maps: soft-argmax readout of a refined correlation volume, sparse
//! ground-truth flow from keypoint pairs, and flow-to-keypoint transfer.
//!
//! Grid cell `(i, j)` of a stride-`s` feature map covers pixels
//! `[s*j, s*(j+1))` horizontally, so pixel coordinate `p` sits at grid
//! coordinate `(p + 0.5) / s - 0.5`.

use crate::correlation::Corr4D;
use crate::error::{check_axis, Error, Result};
use crate::kbc::KeypointSet;
use crate::tensor::{bilinear_sample, softmax_in_place, Scalar, Tensor};

/// Per-source-cell displacement `[2, h, w]` (`dx` then `dy`, grid units)
/// with a supervision mask.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowMap<T = f32> {
    pub values: Tensor<T>,
    pub mask: Vec<bool>,
}

impl<T: Scalar> FlowMap<T> {
    pub fn new(values: Tensor<T>, mask: Vec<bool>) -> Result<Self> {
        crate::error::check_rank("FlowMap", 3, values.rank())?;
        check_axis("FlowMap", "components", 2, values.dim(0))?;
        check_axis("FlowMap", "mask", values.dim(1) * values.dim(2), mask.len())?;
        Ok(Self { values, mask })
    }

    /// Fully supervised map from `[2, h, w]` values.
    pub fn dense(values: Tensor<T>) -> Result<Self> {
        let n = values.len() / 2;
        Self::new(values, vec![true; n])
    }

    pub fn zeros(h: usize, w: usize) -> Result<Self> {
        Self::dense(Tensor::zeros(&[2, h, w])?)
    }

    pub fn height(&self) -> usize {
        self.values.dim(1)
    }

    pub fn width(&self) -> usize {
        self.values.dim(2)
    }

    /// `(dx, dy)` at cell `(i, j)`.
    pub fn at(&self, i: usize, j: usize) -> (T, T) {
        (self.values.at(&[0, i, j]), self.values.at(&[1, i, j]))
    }

    pub fn cast<U: Scalar>(&self) -> FlowMap<U> {
        FlowMap {
            values: self.values.cast(),
            mask: self.mask.clone(),
        }
    }
}

pub fn pixel_to_grid(p: f64, stride: f64) -> f64 {
    (p + 0.5) / stride - 0.5
}

pub fn grid_to_pixel(g: f64, stride: f64) -> f64 {
    (g + 0.5) * stride - 0.5
}

fn check_temperature(temperature: f64) -> Result<()> {
    if temperature > 0.0 && temperature.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "temperature must be positive, got {temperature}"
        )))
    }
}

/// Soft-argmax over target cells for every source cell, one map per batch
/// entry.
pub fn flow_from_correlation<T: Scalar>(
    refined: &Corr4D<T>,
    temperature: f64,
) -> Result<Vec<FlowMap<T>>> {
    check_temperature(temperature)?;
    check_axis("flow_from_correlation", "channels", 1, refined.channels())?;
    let [b, _, h, w, ht, wt] = refined.shape();
    let plane = ht * wt;
    let scale = T::lit(1.0 / temperature);
    let mut out = Vec::with_capacity(b);
    let mut probs = vec![T::zero(); plane];
    for bi in 0..b {
        let mut values = vec![T::zero(); 2 * h * w];
        for cell in 0..h * w {
            let o = (bi * h * w + cell) * plane;
            probs.copy_from_slice(&refined.values().data()[o..o + plane]);
            softmax_in_place(&mut probs, scale);
            let (ex, ey) = expectation(&probs, wt);
            values[cell] = ex - T::lit((cell % w) as f64);
            values[h * w + cell] = ey - T::lit((cell / w) as f64);
        }
        out.push(FlowMap::dense(Tensor::new(&[2, h, w], values)?)?);
    }
    Ok(out)
}

fn expectation<T: Scalar>(probs: &[T], wt: usize) -> (T, T) {
    let (mut ex, mut ey) = (T::zero(), T::zero());
    for (k, &p) in probs.iter().enumerate() {
        ex += p * T::lit((k % wt) as f64);
        ey += p * T::lit((k / wt) as f64);
    }
    (ex, ey)
}

/// Vector-Jacobian product of [`flow_from_correlation`]: maps gradients on
/// each `[2, h, w]` flow to a gradient on the refined volume.
pub fn flow_backward<T: Scalar>(
    refined: &Corr4D<T>,
    temperature: f64,
    grad_flow: &[Tensor<T>],
) -> Result<Tensor<T>> {
    check_temperature(temperature)?;
    let [b, _, h, w, ht, wt] = refined.shape();
    check_axis("flow_backward", "batch", b, grad_flow.len())?;
    let plane = ht * wt;
    let inv_t = T::lit(1.0 / temperature);
    let mut grad = vec![T::zero(); refined.values().len()];
    for (bi, gf) in grad_flow.iter().enumerate() {
        check_axis("flow_backward", "grad.len", 2 * h * w, gf.len())?;
        for cell in 0..h * w {
            let o = (bi * h * w + cell) * plane;
            let probs = &mut grad[o..o + plane];
            probs.copy_from_slice(&refined.values().data()[o..o + plane]);
            softmax_in_place(probs, inv_t);
            let (ex, ey) = expectation(probs, wt);
            let (gx, gy) = (gf.data()[cell], gf.data()[h * w + cell]);
            for (k, p) in probs.iter_mut().enumerate() {
                let cx = T::lit((k % wt) as f64) - ex;
                let cy = T::lit((k / wt) as f64) - ey;
                *p = *p * (cx * gx + cy * gy) * inv_t;
            }
        }
    }
    Tensor::new(refined.values().shape(), grad)
}

/// Transfers source keypoints through `flow`: each point samples the flow
/// bilinearly at its grid position and moves by `stride` times that
/// displacement.
///
/// A prediction is flagged invalid when its source point is invalid or lies
/// outside the image covered by the grid; sampling is clamped either way.
pub fn keypoints_from_flow<T: Scalar>(
    flow: &FlowMap<T>,
    src: &KeypointSet,
    stride: f64,
) -> KeypointSet {
    let (h, w) = (flow.height(), flow.width());
    let (dx, dy) = flow.values.data().split_at(h * w);
    let (max_x, max_y) = (stride * w as f64 - 0.5, stride * h as f64 - 0.5);
    let mut points = Vec::with_capacity(src.len());
    let mut valid = Vec::with_capacity(src.len());
    for (&[x, y], &v) in src.points.iter().zip(&src.valid) {
        let (gx, gy) = (pixel_to_grid(x, stride), pixel_to_grid(y, stride));
        let fx = bilinear_sample(dx, h, w, gy, gx).to_f64().unwrap_or(0.0);
        let fy = bilinear_sample(dy, h, w, gy, gx).to_f64().unwrap_or(0.0);
        points.push([x + stride * fx, y + stride * fy]);
        let inside = (-0.5..=max_x).contains(&x) && (-0.5..=max_y).contains(&y);
        valid.push(v && inside);
    }
    KeypointSet { points, valid }
}

/// Sparse flow target: each valid pair supervises the source cell nearest
/// its source point with displacement `(p_t - p_s) / stride`. When several
/// pairs land in one cell, the pair whose source point is closest to the
/// cell center wins; exact ties keep the earlier pair.
pub fn build_gt_flow(
    ps: &KeypointSet,
    pt: &KeypointSet,
    h: usize,
    w: usize,
    stride: f64,
) -> Result<FlowMap<f64>> {
    if ps.len() != pt.len() {
        return Err(Error::KeypointCount {
            left: ps.len(),
            right: pt.len(),
        });
    }
    let mut values = Tensor::zeros(&[2, h, w])?;
    let mut mask = vec![false; h * w];
    let mut best = vec![f64::INFINITY; h * w];
    for k in 0..ps.len() {
        if !(ps.valid[k] && pt.valid[k]) {
            continue;
        }
        let [sx, sy] = ps.points[k];
        let [tx, ty] = pt.points[k];
        let j = pixel_to_grid(sx, stride).round().clamp(0.0, (w - 1) as f64) as usize;
        let i = pixel_to_grid(sy, stride).round().clamp(0.0, (h - 1) as f64) as usize;
        let dist =
            (sx - grid_to_pixel(j as f64, stride)).hypot(sy - grid_to_pixel(i as f64, stride));
        let cell = i * w + j;
        if dist < best[cell] {
            best[cell] = dist;
            mask[cell] = true;
            values.set(&[0, i, j], (tx - sx) / stride);
            values.set(&[1, i, j], (ty - sy) / stride);
        }
    }
    FlowMap::new(values, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn one_hot(
        h: usize,
        w: usize,
        ht: usize,
        wt: usize,
        target: impl Fn(usize, usize) -> (usize, usize),
    ) -> Corr4D<f64> {
        let mut v = Tensor::zeros(&[1, 1, h, w, ht, wt]).unwrap();
        for i in 0..h {
            for j in 0..w {
                let (a, b) = target(i, j);
                v.set(&[0, 0, i, j, a, b], 1.0);
            }
        }
        Corr4D::new(v).unwrap()
    }

    #[test]
    fn one_hot_correlation_points_at_the_peak() {
        let m = one_hot(3, 4, 5, 5, |i, j| ((i + 2) % 5, (3 * j) % 5));
        let f = &flow_from_correlation(&m, 0.01).unwrap()[0];
        for i in 0..3 {
            for j in 0..4 {
                let (dx, dy) = f.at(i, j);
                assert!((dx - ((3 * j) % 5) as f64 + j as f64).abs() < 1e-3);
                assert!((dy - ((i + 2) % 5) as f64 + i as f64).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn uniform_correlation_targets_the_centroid() {
        let m = Corr4D::new(Tensor::<f64>::full(&[1, 1, 2, 3, 4, 5], 0.3).unwrap()).unwrap();
        let f = &flow_from_correlation(&m, 0.05).unwrap()[0];
        for i in 0..2 {
            for j in 0..3 {
                let (dx, dy) = f.at(i, j);
                assert!((dx + j as f64 - 2.0).abs() < 1e-12);
                assert!((dy + i as f64 - 1.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn two_peak_blend() {
        // Logits chosen so that softmax at temperature 1 puts 3/4 on (0, 0)
        // and 1/4 on (2, 3), with the remaining cells negligible.
        let mut v = Tensor::<f64>::full(&[1, 1, 1, 1, 3, 4], -1e3).unwrap();
        v.set(&[0, 0, 0, 0, 0, 0], 3f64.ln());
        v.set(&[0, 0, 0, 0, 2, 3], 0.0);
        let f = &flow_from_correlation(&Corr4D::new(v).unwrap(), 1.0).unwrap()[0];
        let (dx, dy) = f.at(0, 0);
        assert!((dx - 0.25 * 3.0).abs() < 1e-12);
        assert!((dy - 0.25 * 2.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_temperature() {
        let m = Corr4D::<f64>::zeros([1, 1, 1, 1, 1, 1]).unwrap();
        assert!(flow_from_correlation(&m, 0.0).is_err());
        assert!(flow_from_correlation(&m, f64::NAN).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut g = ChaCha8Rng::seed_from_u64(1);
        let m =
            Corr4D::new(Tensor::<f64>::uniform(&[2, 1, 2, 2, 3, 3], -1.0, 1.0, &mut g).unwrap())
                .unwrap();
        let probes: Vec<Tensor<f64>> = (0..2)
            .map(|_| Tensor::uniform(&[2, 2, 2], -1.0, 1.0, &mut g).unwrap())
            .collect();
        let t = 0.7;
        let loss = |m: &Corr4D<f64>| -> f64 {
            flow_from_correlation(m, t)
                .unwrap()
                .iter()
                .zip(&probes)
                .map(|(f, p)| {
                    f.values
                        .data()
                        .iter()
                        .zip(p.data())
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                })
                .sum()
        };
        let grad = flow_backward(&m, t, &probes).unwrap();
        for idx in 0..m.values().len() {
            let mut a = m.clone();
            a.values_mut().data_mut()[idx] += 1e-6;
            let mut b = m.clone();
            b.values_mut().data_mut()[idx] -= 1e-6;
            let fd = (loss(&a) - loss(&b)) / 2e-6;
            assert!(
                (fd - grad.data()[idx]).abs() < 1e-7,
                "{idx}: {fd} vs {}",
                grad.data()[idx]
            );
        }
    }

    #[test]
    fn zero_and_constant_flow_transfer() {
        let src = KeypointSet::from_points(vec![[3.0, 4.0], [100.0, 17.5], [255.0, 0.0]]);
        let zero = FlowMap::<f32>::zeros(16, 16).unwrap();
        assert_eq!(keypoints_from_flow(&zero, &src, 16.0), src);
        let mut v = Tensor::<f32>::zeros(&[2, 16, 16]).unwrap();
        v.data_mut()[..256].fill(1.0);
        v.data_mut()[256..].fill(2.0);
        let moved = keypoints_from_flow(&FlowMap::dense(v).unwrap(), &src, 16.0);
        for (a, b) in src.points.iter().zip(&moved.points) {
            assert_eq!([b[0] - a[0], b[1] - a[1]], [16.0, 32.0]);
        }
    }

    #[test]
    fn smooth_flow_matches_scalar_interpolation() {
        let (h, w) = (6, 7);
        let fx = |i: f64, j: f64| 0.3 * i - 0.2 * j + 0.05 * i * j;
        let fy = |i: f64, j: f64| (0.4 * i).sin() + 0.1 * j;
        let mut v = Tensor::<f64>::zeros(&[2, h, w]).unwrap();
        for i in 0..h {
            for j in 0..w {
                v.set(&[0, i, j], fx(i as f64, j as f64));
                v.set(&[1, i, j], fy(i as f64, j as f64));
            }
        }
        let flow = FlowMap::dense(v.clone()).unwrap();
        let mut g = ChaCha8Rng::seed_from_u64(2);
        let pts: Vec<[f64; 2]> = (0..30)
            .map(|_| [g.gen_range(0.0..111.0), g.gen_range(0.0..95.0)])
            .collect();
        let out = keypoints_from_flow(&flow, &KeypointSet::from_points(pts.clone()), 16.0);
        for (p, q) in pts.iter().zip(&out.points) {
            let gx = ((p[0] + 0.5) / 16.0 - 0.5).clamp(0.0, (w - 1) as f64);
            let gy = ((p[1] + 0.5) / 16.0 - 0.5).clamp(0.0, (h - 1) as f64);
            let (j0, i0) = (gx.floor() as usize, gy.floor() as usize);
            let (j1, i1) = ((j0 + 1).min(w - 1), (i0 + 1).min(h - 1));
            let (tx, ty) = (gx - j0 as f64, gy - i0 as f64);
            let lerp = |c: usize| {
                let top = v.at(&[c, i0, j0]) * (1.0 - tx) + v.at(&[c, i0, j1]) * tx;
                let bot = v.at(&[c, i1, j0]) * (1.0 - tx) + v.at(&[c, i1, j1]) * tx;
                top * (1.0 - ty) + bot * ty
            };
            assert!((q[0] - p[0] - 16.0 * lerp(0)).abs() < 1e-9);
            assert!((q[1] - p[1] - 16.0 * lerp(1)).abs() < 1e-9);
        }
        assert!(out.valid.iter().all(|&v| v));
        let outside = keypoints_from_flow(
            &flow,
            &KeypointSet::from_points(vec![[-3.0, 10.0], [112.0, 0.0]]),
            16.0,
        );
        assert_eq!(outside.valid, vec![false, false]);
    }

    #[test]
    fn gt_flow_single_pair() {
        let ps = KeypointSet::from_points(vec![[16.0 * 2.0 + 7.5, 16.0 + 7.5]]);
        let pt = KeypointSet::from_points(vec![[ps.points[0][0] + 16.0, ps.points[0][1] + 32.0]]);
        let f = build_gt_flow(&ps, &pt, 4, 4, 16.0).unwrap();
        assert_eq!(f.at(1, 2), (1.0, 2.0));
        assert_eq!(f.mask.iter().filter(|&&m| m).count(), 1);
        assert!(f.mask[4 + 2]);
        let same = build_gt_flow(&ps, &ps, 4, 4, 16.0).unwrap();
        assert_eq!(same.at(1, 2), (0.0, 0.0));
    }

    #[test]
    fn gt_flow_matches_scan_oracle() {
        let mut g = ChaCha8Rng::seed_from_u64(3);
        let (h, w, s) = (5usize, 6usize, 16.0);
        let n = 40;
        let ps: Vec<[f64; 2]> = (0..n)
            .map(|_| [g.gen_range(0.0..96.0), g.gen_range(0.0..80.0)])
            .collect();
        let pt: Vec<[f64; 2]> = (0..n)
            .map(|_| [g.gen_range(0.0..96.0), g.gen_range(0.0..80.0)])
            .collect();
        let f = build_gt_flow(
            &KeypointSet::from_points(ps.clone()),
            &KeypointSet::from_points(pt.clone()),
            h,
            w,
            s,
        )
        .unwrap();
        for i in 0..h {
            for j in 0..w {
                // Pairs whose source point is closer to this cell center than
                // to any other, keeping the closest such pair.
                let center =
                    |r: usize, c: usize| ((c as f64 + 0.5) * s - 0.5, (r as f64 + 0.5) * s - 0.5);
                let dist = |k: usize, r: usize, c: usize| {
                    let (x, y) = center(r, c);
                    (ps[k][0] - x).hypot(ps[k][1] - y)
                };
                let owner = (0..n)
                    .filter(|&k| (0..h).all(|r| (0..w).all(|c| dist(k, i, j) <= dist(k, r, c))))
                    .min_by(|&a, &b| dist(a, i, j).total_cmp(&dist(b, i, j)).then(a.cmp(&b)));
                match owner {
                    None => assert!(!f.mask[i * w + j]),
                    Some(k) => {
                        assert!(f.mask[i * w + j]);
                        assert_eq!(
                            f.at(i, j),
                            ((pt[k][0] - ps[k][0]) / s, (pt[k][1] - ps[k][1]) / s)
                        );
                    }
                }
            }
        }
    }

    proptest! {
        #[test]
        fn displacements_stay_within_the_target_grid(seed in any::<u64>(), t in 0.01f64..2.0) {
            let mut g = ChaCha8Rng::seed_from_u64(seed);
            let m = Corr4D::new(Tensor::<f64>::uniform(&[1, 1, 4, 5, 4, 5], -1.0, 1.0, &mut g).unwrap()).unwrap();
            let f = &flow_from_correlation(&m, t).unwrap()[0];
            let diag = 3.0f64.hypot(4.0);
            for i in 0..4 {
                for j in 0..5 {
                    let (dx, dy) = f.at(i, j);
                    prop_assert!(dx.hypot(dy) <= diag);
                }
            }
        }
    }
}
