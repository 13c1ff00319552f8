//! Dense and center-pivot 4D convolution over correlation volumes.
//!
//! Volumes are `[B, C, h, w, h', w']`. Both convolutions are
//! cross-correlations with zero padding and preserve all spatial extents.
//! The center-pivot kernel keeps only the taps that pass through the center
//! of either window, so it splits into a 2D convolution over the source
//! grid (target cells act as batch) plus a 2D convolution over the target
//! grid (source cells act as batch).

use crate::correlation::Corr4D;
use crate::error::{check_axis, check_rank, Error, Result};
use rayon::prelude::*;

use crate::tensor::{Scalar, Tensor};

/// Full `[Cout, Cin, k, k, k', k']` kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel4D<T = f32> {
    pub weights: Tensor<T>,
}

impl<T: Scalar> Kernel4D<T> {
    pub fn new(weights: Tensor<T>) -> Result<Self> {
        check_rank("Kernel4D", 6, weights.rank())?;
        let s = weights.shape();
        check_axis("Kernel4D", "source.kernel_cols", s[2], s[3])?;
        check_axis("Kernel4D", "target.kernel_cols", s[4], s[5])?;
        if s[2] % 2 == 0 || s[4] % 2 == 0 {
            return Err(Error::Config(format!(
                "4D kernel sizes must be odd, got {}x{}",
                s[2], s[4]
            )));
        }
        Ok(Self { weights })
    }

    pub fn out_channels(&self) -> usize {
        self.weights.dim(0)
    }

    pub fn in_channels(&self) -> usize {
        self.weights.dim(1)
    }

    pub fn source_size(&self) -> usize {
        self.weights.dim(2)
    }

    pub fn target_size(&self) -> usize {
        self.weights.dim(4)
    }
}

/// Source-side `[Cout, Cin, k, k]` and target-side `[Cout, Cin, k', k']`
/// kernels plus a `[Cout]` bias.
#[derive(Clone, Debug, PartialEq)]
pub struct CenterPivotKernel<T = f32> {
    pub source: Tensor<T>,
    pub target: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> CenterPivotKernel<T> {
    pub fn new(source: Tensor<T>, target: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        const OP: &str = "CenterPivotKernel";
        check_rank(OP, 4, source.rank())?;
        check_rank(OP, 4, target.rank())?;
        check_axis(OP, "target.out_channels", source.dim(0), target.dim(0))?;
        check_axis(OP, "target.in_channels", source.dim(1), target.dim(1))?;
        check_axis(OP, "bias", source.dim(0), bias.len())?;
        check_axis(OP, "source.kernel_cols", source.dim(2), source.dim(3))?;
        check_axis(OP, "target.kernel_cols", target.dim(2), target.dim(3))?;
        if source.dim(2) % 2 == 0 || target.dim(2) % 2 == 0 {
            return Err(Error::Config(
                "center-pivot kernel sizes must be odd".into(),
            ));
        }
        Ok(Self {
            source,
            target,
            bias,
        })
    }

    pub fn zeros(cout: usize, cin: usize, k: usize, kt: usize) -> Result<Self> {
        Self::new(
            Tensor::zeros(&[cout, cin, k, k])?,
            Tensor::zeros(&[cout, cin, kt, kt])?,
            Tensor::zeros(&[cout])?,
        )
    }

    pub fn out_channels(&self) -> usize {
        self.source.dim(0)
    }

    pub fn in_channels(&self) -> usize {
        self.source.dim(1)
    }

    pub fn source_size(&self) -> usize {
        self.source.dim(2)
    }

    pub fn target_size(&self) -> usize {
        self.target.dim(2)
    }

    /// Equivalent dense kernel: the source kernel on the slice through the
    /// target-window center, the target kernel on the slice through the
    /// source-window center. The shared center tap holds the sum of both
    /// center weights. The bias is not part of the dense kernel.
    pub fn to_dense(&self) -> Kernel4D<T> {
        let (co, ci, k, kt) = (
            self.out_channels(),
            self.in_channels(),
            self.source_size(),
            self.target_size(),
        );
        let (r, rt) = (k / 2, kt / 2);
        let mut dense = Tensor::zeros(&[co, ci, k, k, kt, kt]).expect("non-empty");
        for o in 0..co {
            for i in 0..ci {
                for a in 0..k {
                    for b in 0..k {
                        dense.set(&[o, i, a, b, rt, rt], self.source.at(&[o, i, a, b]));
                    }
                }
                for c in 0..kt {
                    for d in 0..kt {
                        let idx = [o, i, r, r, c, d];
                        let prev = dense.at(&idx);
                        dense.set(&idx, prev + self.target.at(&[o, i, c, d]));
                    }
                }
            }
        }
        Kernel4D { weights: dense }
    }
}

/// `dst[r, c, :] += w * src[r + dr, c + dc, :]` over a `rows x cols` grid of
/// `elem`-long cells, skipping out-of-range source cells.
#[allow(clippy::too_many_arguments)]
#[inline]
pub(crate) fn shifted_axpy<T: Scalar>(
    dst: &mut [T],
    src: &[T],
    w: T,
    rows: usize,
    cols: usize,
    elem: usize,
    dr: isize,
    dc: isize,
) {
    let Some((r0, r1)) = valid_range(rows, dr) else {
        return;
    };
    let Some((c0, c1)) = valid_range(cols, dc) else {
        return;
    };
    let span = (c1 - c0) * elem;
    for r in r0..r1 {
        let sr = (r as isize + dr) as usize;
        let d0 = (r * cols + c0) * elem;
        let s0 = (sr * cols + (c0 as isize + dc) as usize) * elem;
        for (d, &s) in dst[d0..d0 + span].iter_mut().zip(&src[s0..s0 + span]) {
            *d += w * s;
        }
    }
}

/// `sum a[r, c, :] * b[r + dr, c + dc, :]` over in-range cells.
#[inline]
pub(crate) fn shifted_dot<T: Scalar>(
    a: &[T],
    b: &[T],
    rows: usize,
    cols: usize,
    elem: usize,
    dr: isize,
    dc: isize,
) -> T {
    let mut acc = T::zero();
    let Some((r0, r1)) = valid_range(rows, dr) else {
        return acc;
    };
    let Some((c0, c1)) = valid_range(cols, dc) else {
        return acc;
    };
    let span = (c1 - c0) * elem;
    for r in r0..r1 {
        let sr = (r as isize + dr) as usize;
        let a0 = (r * cols + c0) * elem;
        let b0 = (sr * cols + (c0 as isize + dc) as usize) * elem;
        acc += a[a0..a0 + span]
            .iter()
            .zip(&b[b0..b0 + span])
            .map(|(&x, &y)| x * y)
            .sum::<T>();
    }
    acc
}

/// Output indices `r` with `0 <= r + shift < n`.
#[inline]
fn valid_range(n: usize, shift: isize) -> Option<(usize, usize)> {
    let lo = (-shift).max(0) as usize;
    let hi = (n as isize - shift).min(n as isize);
    if hi <= lo as isize {
        None
    } else {
        Some((lo, hi as usize))
    }
}

fn check_volume<T: Scalar>(op: &'static str, m: &Corr4D<T>, cin: usize) -> Result<()> {
    check_axis(op, "channels", cin, m.channels())
}

/// Brute-force 4D convolution: every source-window tap against every
/// target-window tap.
pub fn dense_conv4d<T: Scalar>(m: &Corr4D<T>, kernel: &Kernel4D<T>) -> Result<Corr4D<T>> {
    check_volume("dense_conv4d", m, kernel.in_channels())?;
    let [b, cin, h, w, ht, wt] = m.shape();
    let cout = kernel.out_channels();
    let (k, kt) = (kernel.source_size(), kernel.target_size());
    let (r, rt) = ((k / 2) as isize, (kt / 2) as isize);
    let plane = ht * wt;
    let vol = h * w * plane;
    let x = m.values().data();
    let kd = kernel.weights.data();
    let mut out = vec![T::zero(); b * cout * vol];
    out.par_chunks_mut(vol).enumerate().for_each(|(slot, dst)| {
        let (bi, co) = (slot / cout, slot % cout);
        {
            for ci in 0..cin {
                let src = &x[(bi * cin + ci) * vol..(bi * cin + ci + 1) * vol];
                for a in 0..k {
                    for bb in 0..k {
                        let ka = &kd[(((co * cin + ci) * k + a) * k + bb) * kt * kt..][..kt * kt];
                        if ka.iter().all(|&v| v == T::zero()) {
                            continue;
                        }
                        let (da, db) = (a as isize - r, bb as isize - r);
                        for i in 0..h {
                            let si = i as isize + da;
                            if si < 0 || si >= h as isize {
                                continue;
                            }
                            for j in 0..w {
                                let sj = j as isize + db;
                                if sj < 0 || sj >= w as isize {
                                    continue;
                                }
                                let so = (si as usize * w + sj as usize) * plane;
                                let dpl = &mut dst[(i * w + j) * plane..(i * w + j + 1) * plane];
                                let spl = &src[so..so + plane];
                                for c in 0..kt {
                                    for d in 0..kt {
                                        let wgt = ka[c * kt + d];
                                        if wgt != T::zero() {
                                            shifted_axpy(
                                                dpl,
                                                spl,
                                                wgt,
                                                ht,
                                                wt,
                                                1,
                                                c as isize - rt,
                                                d as isize - rt,
                                            );
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    Corr4D::new(Tensor::new(&[b, cout, h, w, ht, wt], out)?)
}

/// Center-pivot 4D convolution as the sum of a source-grid and a
/// target-grid 2D convolution, plus bias.
pub fn center_pivot_conv4d<T: Scalar>(
    m: &Corr4D<T>,
    kernel: &CenterPivotKernel<T>,
) -> Result<Corr4D<T>> {
    check_volume("center_pivot_conv4d", m, kernel.in_channels())?;
    let [b, cin, h, w, ht, wt] = m.shape();
    let cout = kernel.out_channels();
    let (k, kt) = (kernel.source_size(), kernel.target_size());
    let (r, rt) = ((k / 2) as isize, (kt / 2) as isize);
    let plane = ht * wt;
    let vol = h * w * plane;
    let x = m.values().data();
    let (ks, ktg) = (kernel.source.data(), kernel.target.data());
    let mut out = vec![T::zero(); b * cout * vol];
    out.par_chunks_mut(vol).enumerate().for_each(|(slot, dst)| {
        let (bi, co) = (slot / cout, slot % cout);
        {
            dst.fill(kernel.bias.data()[co]);
            for ci in 0..cin {
                let src = &x[(bi * cin + ci) * vol..(bi * cin + ci + 1) * vol];
                // Source-side: whole target planes shift together.
                let kc = &ks[(co * cin + ci) * k * k..][..k * k];
                for a in 0..k {
                    for bb in 0..k {
                        let wgt = kc[a * k + bb];
                        if wgt != T::zero() {
                            shifted_axpy(
                                dst,
                                src,
                                wgt,
                                h,
                                w,
                                plane,
                                a as isize - r,
                                bb as isize - r,
                            );
                        }
                    }
                }
                // Target-side: one 2D convolution per source cell.
                let kc_t = &ktg[(co * cin + ci) * kt * kt..][..kt * kt];
                if kc_t.iter().all(|&v| v == T::zero()) {
                    continue;
                }
                for cell in 0..h * w {
                    let dpl = &mut dst[cell * plane..(cell + 1) * plane];
                    let spl = &src[cell * plane..(cell + 1) * plane];
                    for c in 0..kt {
                        for d in 0..kt {
                            let wgt = kc_t[c * kt + d];
                            if wgt != T::zero() {
                                shifted_axpy(
                                    dpl,
                                    spl,
                                    wgt,
                                    ht,
                                    wt,
                                    1,
                                    c as isize - rt,
                                    d as isize - rt,
                                );
                            }
                        }
                    }
                }
            }
        }
    });
    Corr4D::new(Tensor::new(&[b, cout, h, w, ht, wt], out)?)
}

/// Gradients of a center-pivot convolution.
#[derive(Clone, Debug)]
pub struct CenterPivotGrads<T> {
    pub input: Tensor<T>,
    pub kernel: CenterPivotKernel<T>,
}

/// Vector-Jacobian product of [`center_pivot_conv4d`] for upstream gradient
/// `grad_out`.
pub fn center_pivot_backward<T: Scalar>(
    m: &Corr4D<T>,
    kernel: &CenterPivotKernel<T>,
    grad_out: &Tensor<T>,
    need_input: bool,
) -> Result<CenterPivotGrads<T>> {
    let [b, cin, h, w, ht, wt] = m.shape();
    let cout = kernel.out_channels();
    check_axis(
        "center_pivot_backward",
        "grad.channels",
        cout,
        grad_out.dim(1),
    )?;
    let (k, kt) = (kernel.source_size(), kernel.target_size());
    let (r, rt) = ((k / 2) as isize, (kt / 2) as isize);
    let plane = ht * wt;
    let vol = h * w * plane;
    let x = m.values().data();
    let g = grad_out.data();
    let mut gin = vec![T::zero(); if need_input { x.len() } else { 0 }];
    let mut gks = vec![T::zero(); kernel.source.len()];
    let mut gkt = vec![T::zero(); kernel.target.len()];
    let mut gb = vec![T::zero(); cout];
    for bi in 0..b {
        for co in 0..cout {
            let go = &g[(bi * cout + co) * vol..(bi * cout + co + 1) * vol];
            gb[co] += go.iter().copied().sum::<T>();
            for ci in 0..cin {
                let xin = &x[(bi * cin + ci) * vol..(bi * cin + ci + 1) * vol];
                let kbase = (co * cin + ci) * k * k;
                let tbase = (co * cin + ci) * kt * kt;
                for a in 0..k {
                    for bb in 0..k {
                        let (da, db) = (a as isize - r, bb as isize - r);
                        gks[kbase + a * k + bb] += shifted_dot(go, xin, h, w, plane, da, db);
                        if need_input {
                            let gi = &mut gin[(bi * cin + ci) * vol..(bi * cin + ci + 1) * vol];
                            let wgt = kernel.source.data()[kbase + a * k + bb];
                            if wgt != T::zero() {
                                shifted_axpy(gi, go, wgt, h, w, plane, -da, -db);
                            }
                        }
                    }
                }
                for cell in 0..h * w {
                    let gpl = &go[cell * plane..(cell + 1) * plane];
                    let xpl = &xin[cell * plane..(cell + 1) * plane];
                    for c in 0..kt {
                        for d in 0..kt {
                            let (dc, dd) = (c as isize - rt, d as isize - rt);
                            gkt[tbase + c * kt + d] += shifted_dot(gpl, xpl, ht, wt, 1, dc, dd);
                            if need_input {
                                let wgt = kernel.target.data()[tbase + c * kt + d];
                                if wgt != T::zero() {
                                    let o = (bi * cin + ci) * vol + cell * plane;
                                    shifted_axpy(
                                        &mut gin[o..o + plane],
                                        gpl,
                                        wgt,
                                        ht,
                                        wt,
                                        1,
                                        -dc,
                                        -dd,
                                    );
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    let input = if need_input {
        Tensor::new(m.values().shape(), gin)?
    } else {
        Tensor::zeros(&[1])?
    };
    Ok(CenterPivotGrads {
        input,
        kernel: CenterPivotKernel::new(
            Tensor::new(kernel.source.shape(), gks)?,
            Tensor::new(kernel.target.shape(), gkt)?,
            Tensor::new(&[cout], gb)?,
        )?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn volume(shape: [usize; 6], seed: u64) -> Corr4D<f64> {
        Corr4D::new(Tensor::uniform(&shape, -1.0, 1.0, &mut rng(seed)).unwrap()).unwrap()
    }

    // Eight nested loops over output and kernel coordinates, indexing by
    // explicit offset arithmetic.
    fn naive_dense(m: &Corr4D<f64>, k: &Kernel4D<f64>) -> Tensor<f64> {
        let [b, cin, h, w, ht, wt] = m.shape();
        let kw = &k.weights;
        let (cout, ks, kts) = (kw.dim(0), kw.dim(2), kw.dim(4));
        let inside = |v: isize, n: usize| v >= 0 && (v as usize) < n;
        let mut out = Tensor::zeros(&[b, cout, h, w, ht, wt]).unwrap();
        for bi in 0..b {
            for co in 0..cout {
                for i in 0..h {
                    for j in 0..w {
                        for it in 0..ht {
                            for jt in 0..wt {
                                let mut acc = 0.0;
                                for ci in 0..cin {
                                    for a in 0..ks {
                                        for bb in 0..ks {
                                            for c in 0..kts {
                                                for d in 0..kts {
                                                    let si =
                                                        i as isize + a as isize - (ks / 2) as isize;
                                                    let sj = j as isize + bb as isize
                                                        - (ks / 2) as isize;
                                                    let ti = it as isize + c as isize
                                                        - (kts / 2) as isize;
                                                    let tj = jt as isize + d as isize
                                                        - (kts / 2) as isize;
                                                    if inside(si, h)
                                                        && inside(sj, w)
                                                        && inside(ti, ht)
                                                        && inside(tj, wt)
                                                    {
                                                        acc += kw.at(&[co, ci, a, bb, c, d])
                                                            * m.values().at(&[
                                                                bi,
                                                                ci,
                                                                si as usize,
                                                                sj as usize,
                                                                ti as usize,
                                                                tj as usize,
                                                            ]);
                                                    }
                                                }
                                            }
                                        }
                                    }
                                }
                                out.set(&[bi, co, i, j, it, jt], acc);
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn random_cp(
        cout: usize,
        cin: usize,
        k: usize,
        kt: usize,
        seed: u64,
    ) -> CenterPivotKernel<f64> {
        let mut g = rng(seed);
        CenterPivotKernel::new(
            Tensor::uniform(&[cout, cin, k, k], -1.0, 1.0, &mut g).unwrap(),
            Tensor::uniform(&[cout, cin, kt, kt], -1.0, 1.0, &mut g).unwrap(),
            Tensor::uniform(&[cout], -1.0, 1.0, &mut g).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn dense_delta_kernel_is_identity() {
        let m = volume([1, 2, 3, 4, 3, 2], 1);
        let mut kw = Tensor::zeros(&[2, 2, 3, 3, 3, 3]).unwrap();
        kw.set(&[0, 0, 1, 1, 1, 1], 1.0);
        kw.set(&[1, 1, 1, 1, 1, 1], 1.0);
        let y = dense_conv4d(&m, &Kernel4D::new(kw).unwrap()).unwrap();
        assert_eq!(y, m);
    }

    #[test]
    fn dense_ones_kernel_interior_sum() {
        let m = Corr4D::new(Tensor::<f64>::full(&[1, 1, 5, 5, 5, 5], 1.0).unwrap()).unwrap();
        let k = Kernel4D::new(Tensor::full(&[1, 1, 3, 3, 3, 3], 1.0).unwrap()).unwrap();
        let y = dense_conv4d(&m, &k).unwrap();
        assert_eq!(y.values().at(&[0, 0, 2, 2, 2, 2]), 81.0);
        assert_eq!(y.values().at(&[0, 0, 0, 0, 0, 0]), 16.0);
    }

    #[test]
    fn dense_matches_naive_loops() {
        let m = volume([1, 1, 4, 4, 4, 4], 2);
        let k =
            Kernel4D::new(Tensor::uniform(&[1, 1, 3, 3, 3, 3], -1.0, 1.0, &mut rng(3)).unwrap())
                .unwrap();
        let y = dense_conv4d(&m, &k).unwrap();
        assert!(y.values().max_rel_diff(&naive_dense(&m, &k)) < 1e-5);

        let m = volume([2, 2, 3, 4, 5, 3], 4);
        let k =
            Kernel4D::new(Tensor::uniform(&[3, 2, 3, 3, 5, 5], -1.0, 1.0, &mut rng(5)).unwrap())
                .unwrap();
        let y = dense_conv4d(&m, &k).unwrap();
        assert!(y.values().max_rel_diff(&naive_dense(&m, &k)) < 1e-12);
    }

    #[test]
    fn center_pivot_trivial_kernels() {
        let m = volume([1, 2, 3, 3, 4, 4], 6);
        let zero = CenterPivotKernel::zeros(3, 2, 3, 3).unwrap();
        let y = center_pivot_conv4d(&m, &zero).unwrap();
        assert!(y.values().data().iter().all(|&v| v == 0.0));

        let mut delta = CenterPivotKernel::zeros(2, 2, 3, 3).unwrap();
        delta.source.set(&[0, 0, 1, 1], 1.0);
        delta.source.set(&[1, 1, 1, 1], 1.0);
        assert_eq!(center_pivot_conv4d(&m, &delta).unwrap(), m);
    }

    #[test]
    fn center_pivot_equals_embedded_dense_kernel() {
        for case in 0..10u64 {
            let m = volume([1, 2, 4, 5, 5, 3], 100 + case);
            let mut cp = random_cp(3, 2, 3, 3, 200 + case);
            let dense = cp.to_dense();
            let got = center_pivot_conv4d(&m, &{
                cp.bias = Tensor::zeros(&[3]).unwrap();
                cp.clone()
            })
            .unwrap();
            assert!(got.values().max_rel_diff(&naive_dense(&m, &dense)) < 1e-12);
        }
        // Mixed kernel sizes.
        let m = volume([1, 1, 5, 5, 4, 4], 9);
        let mut cp = random_cp(2, 1, 5, 3, 10);
        cp.bias = Tensor::zeros(&[2]).unwrap();
        let got = center_pivot_conv4d(&m, &cp).unwrap();
        let want = dense_conv4d(&m, &cp.to_dense()).unwrap();
        assert!(got.values().max_rel_diff(want.values()) < 1e-12);
    }

    #[test]
    fn center_pivot_is_additive_in_its_halves() {
        let m = volume([1, 2, 4, 4, 4, 4], 11);
        let full = {
            let mut k = random_cp(2, 2, 3, 3, 12);
            k.bias = Tensor::zeros(&[2]).unwrap();
            k
        };
        let src_only = CenterPivotKernel::new(
            full.source.clone(),
            Tensor::zeros(&[2, 2, 3, 3]).unwrap(),
            full.bias.clone(),
        )
        .unwrap();
        let trg_only = CenterPivotKernel::new(
            Tensor::zeros(&[2, 2, 3, 3]).unwrap(),
            full.target.clone(),
            full.bias.clone(),
        )
        .unwrap();
        let a = center_pivot_conv4d(&m, &src_only).unwrap();
        let b = center_pivot_conv4d(&m, &trg_only).unwrap();
        let sum = a.values().zip_map(b.values(), |x, y| x + y).unwrap();
        let whole = center_pivot_conv4d(&m, &full).unwrap();
        assert!(sum.max_abs_diff(whole.values()) < 1e-12);
    }

    #[test]
    fn shape_errors() {
        let m = volume([1, 2, 3, 3, 3, 3], 13);
        assert!(center_pivot_conv4d(&m, &CenterPivotKernel::zeros(1, 3, 3, 3).unwrap()).is_err());
        assert!(Kernel4D::new(Tensor::<f64>::zeros(&[1, 1, 2, 2, 3, 3]).unwrap()).is_err());
        assert!(CenterPivotKernel::<f64>::zeros(1, 1, 4, 3).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let m = volume([1, 2, 3, 3, 3, 3], 14);
        let k = random_cp(2, 2, 3, 3, 15);
        let probe = Tensor::uniform(&[1, 2, 3, 3, 3, 3], -1.0, 1.0, &mut rng(16)).unwrap();
        let loss = |m: &Corr4D<f64>, k: &CenterPivotKernel<f64>| -> f64 {
            let y = center_pivot_conv4d(m, k).unwrap();
            y.values()
                .data()
                .iter()
                .zip(probe.data())
                .map(|(a, b)| a * b)
                .sum()
        };
        let grads = center_pivot_backward(&m, &k, &probe, true).unwrap();
        let h = 1e-6;
        // Loss is linear in every argument, so central differences are exact
        // up to rounding.
        for idx in [0usize, 7, 17] {
            let mut kp = k.clone();
            kp.source.data_mut()[idx] += h;
            let mut km = k.clone();
            km.source.data_mut()[idx] -= h;
            let fd = (loss(&m, &kp) - loss(&m, &km)) / (2.0 * h);
            assert!((fd - grads.kernel.source.data()[idx]).abs() < 1e-6);
            let mut kp = k.clone();
            kp.target.data_mut()[idx] += h;
            let mut km = k.clone();
            km.target.data_mut()[idx] -= h;
            let fd = (loss(&m, &kp) - loss(&m, &km)) / (2.0 * h);
            assert!((fd - grads.kernel.target.data()[idx]).abs() < 1e-6);
        }
        for idx in [0usize, 40, 101, 161] {
            let mut mp = m.clone();
            mp.values_mut().data_mut()[idx] += h;
            let mut mm = m.clone();
            mm.values_mut().data_mut()[idx] -= h;
            let fd = (loss(&mp, &k) - loss(&mm, &k)) / (2.0 * h);
            assert!((fd - grads.input.data()[idx]).abs() < 1e-6);
        }
        let total: f64 = probe.data()[..81].iter().sum();
        assert!((grads.kernel.bias.data()[0] - total).abs() < 1e-12);
    }
}
