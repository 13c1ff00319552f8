use super::{first_mismatch, Scalar, Tensor};
use crate::error::{check_axis, check_rank, Error, Result};

/// 2D cross-correlation with zero padding and a square kernel.
///
/// `input` is `[Cin, H, W]`, `kernel` is `[Cout, Cin, k, k]`, `bias` is `[Cout]`.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    const OP: &str = "conv2d";
    check_rank(OP, 3, input.rank())?;
    check_rank(OP, 4, kernel.rank())?;
    check_rank(OP, 1, bias.rank())?;
    let (cin, h, w) = (input.dim(0), input.dim(1), input.dim(2));
    let (cout, k) = (kernel.dim(0), kernel.dim(2));
    check_axis(OP, "kernel.in_channels", cin, kernel.dim(1))?;
    check_axis(OP, "kernel.width", k, kernel.dim(3))?;
    check_axis(OP, "bias", cout, bias.dim(0))?;
    if stride == 0 {
        return Err(Error::Config("conv2d stride must be positive".into()));
    }
    if h + 2 * pad < k || w + 2 * pad < k {
        return Err(Error::Config(format!(
            "conv2d kernel {k} larger than padded input {}x{}",
            h + 2 * pad,
            w + 2 * pad
        )));
    }
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let x = input.data();
    let kd = kernel.data();
    let mut out = vec![T::zero(); cout * ho * wo];
    for co in 0..cout {
        let plane = &mut out[co * ho * wo..(co + 1) * ho * wo];
        plane.fill(bias.data()[co]);
        for ci in 0..cin {
            let src = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let wgt = kd[((co * cin + ci) * k + ky) * k + kx];
                    if wgt == T::zero() {
                        continue;
                    }
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = &src[iy as usize * w..(iy as usize + 1) * w];
                        let dst = &mut plane[oy * wo..(oy + 1) * wo];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                *d += wgt * row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[cout, ho, wo], out)
}

/// Stride-1 convolution whose output keeps the input's spatial extents.
pub fn conv2d_same<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    check_rank("conv2d_same", 4, kernel.rank())?;
    let k = kernel.dim(2);
    if k % 2 == 0 {
        return Err(Error::Config(format!(
            "conv2d_same needs an odd kernel, got {k}"
        )));
    }
    conv2d(input, kernel, bias, 1, (k - 1) / 2)
}

/// Bilinear sample of a row-major `h x w` plane at fractional `(y, x)`;
/// coordinates are clamped to the plane.
pub fn bilinear_sample<T: Scalar>(plane: &[T], h: usize, w: usize, y: f64, x: f64) -> T {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let y0 = (y.floor() as usize).min(h - 1);
    let x0 = (x.floor() as usize).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = T::lit(y - y0 as f64);
    let fx = T::lit(x - x0 as f64);
    let one = T::one();
    let top = plane[y0 * w + x0] * (one - fx) + plane[y0 * w + x1] * fx;
    let bottom = plane[y1 * w + x0] * (one - fx) + plane[y1 * w + x1] * fx;
    top * (one - fy) + bottom * fy
}

/// Align-corners bilinear resize of a `[C, H, W]` tensor.
pub fn bilinear_resize<T: Scalar>(
    input: &Tensor<T>,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<T>> {
    check_rank("bilinear_resize", 3, input.rank())?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::Config(
            "bilinear_resize output extents must be >= 1".into(),
        ));
    }
    let (c, h, w) = (input.dim(0), input.dim(1), input.dim(2));
    let step = |n_in: usize, n_out: usize| {
        if n_out > 1 {
            (n_in - 1) as f64 / (n_out - 1) as f64
        } else {
            0.0
        }
    };
    let (sy, sx) = (step(h, out_h), step(w, out_w));
    resample(
        input,
        out_h,
        out_w,
        |oy| oy as f64 * sy,
        |ox| ox as f64 * sx,
        c,
        h,
        w,
    )
}

/// Number of samples covering `n` input samples after scaling by `s`, with
/// sample 0 anchored to input sample 0. The last input sample lands at
/// `(n - 1) s`, which always falls inside the last output pixel.
pub fn scaled_extent(n: usize, s: f64) -> usize {
    ((n - 1) as f64 * s + 0.5 - 1e-9).ceil() as usize
}

/// Resize by a uniform factor `s`: output sample `i` reads input position
/// `i / s`, so a point `p` in input pixel coordinates lands at `s * p`.
pub fn resize_by_scale<T: Scalar>(input: &Tensor<T>, s: f64) -> Result<Tensor<T>> {
    check_rank("resize_by_scale", 3, input.rank())?;
    if !(s.is_finite() && s > 0.0) {
        return Err(Error::Config(format!(
            "resize scale must be positive, got {s}"
        )));
    }
    let (c, h, w) = (input.dim(0), input.dim(1), input.dim(2));
    let (oh, ow) = (scaled_extent(h, s), scaled_extent(w, s));
    resample(
        input,
        oh,
        ow,
        |oy| oy as f64 / s,
        |ox| ox as f64 / s,
        c,
        h,
        w,
    )
}

#[allow(clippy::too_many_arguments)]
fn resample<T: Scalar>(
    input: &Tensor<T>,
    oh: usize,
    ow: usize,
    ys: impl Fn(usize) -> f64,
    xs: impl Fn(usize) -> f64,
    c: usize,
    h: usize,
    w: usize,
) -> Result<Tensor<T>> {
    let xcoords: Vec<f64> = (0..ow).map(&xs).collect();
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let plane = &input.data()[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            let y = ys(oy);
            for &x in &xcoords {
                out.push(bilinear_sample(plane, h, w, y, x));
            }
        }
    }
    Tensor::new(&[c, oh, ow], out)
}

/// Numerically stable softmax of `scale * x` over a slice.
pub fn softmax_in_place<T: Scalar>(x: &mut [T], scale: T) {
    let m = x.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in x.iter_mut() {
        *v = ((*v - m) * scale).exp();
        total += *v;
    }
    for v in x.iter_mut() {
        *v = *v / total;
    }
}

/// Softmax over the trailing axis with inverse temperature `scale`.
pub fn row_softmax<T: Scalar>(input: &Tensor<T>, scale: T) -> Result<Tensor<T>> {
    if !(scale > T::zero()) {
        return Err(Error::Config("row_softmax scale must be positive".into()));
    }
    let n = input.dim(input.rank() - 1);
    let mut out = input.clone();
    for row in out.data_mut().chunks_mut(n) {
        softmax_in_place(row, scale);
    }
    Ok(out)
}

/// Group normalization of a `[C, ...]` tensor: statistics are taken over each
/// group of `C / groups` channels and all trailing positions.
pub fn group_norm<T: Scalar>(
    input: &Tensor<T>,
    groups: usize,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let c = input.dim(0);
    check_axis("group_norm", "gamma", c, gamma.len())?;
    check_axis("group_norm", "beta", c, beta.len())?;
    if groups == 0 || c % groups != 0 {
        return Err(Error::Config(format!(
            "group_norm: {c} channels not divisible into {groups} groups"
        )));
    }
    let mut out = input.clone();
    let per_channel = input.len() / c;
    group_norm_slice(
        out.data_mut(),
        c,
        per_channel,
        groups,
        gamma.data(),
        beta.data(),
        eps,
    );
    Ok(out)
}

/// In-place group norm over one sample laid out as `[C, positions]`.
pub(crate) fn group_norm_slice<T: Scalar>(
    x: &mut [T],
    c: usize,
    positions: usize,
    groups: usize,
    gamma: &[T],
    beta: &[T],
    eps: T,
) {
    let cg = c / groups;
    let count = T::lit((cg * positions) as f64);
    for g in 0..groups {
        let block = &mut x[g * cg * positions..(g + 1) * cg * positions];
        let mean = block.iter().copied().sum::<T>() / count;
        let var = block.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / count;
        let inv = T::one() / (var + eps).sqrt();
        for (ci, chunk) in block.chunks_mut(positions).enumerate() {
            let ch = g * cg + ci;
            for v in chunk.iter_mut() {
                *v = (*v - mean) * inv * gamma[ch] + beta[ch];
            }
        }
    }
}

/// Affine map over the trailing axis: `[..., Din] -> [..., Dout]`.
pub fn linear<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    const OP: &str = "linear";
    check_rank(OP, 2, weight.rank())?;
    let (dout, din) = (weight.dim(0), weight.dim(1));
    check_axis(OP, "input.features", din, input.dim(input.rank() - 1))?;
    check_axis(OP, "bias", dout, bias.len())?;
    let rows = input.len() / din;
    let wd = weight.data();
    let mut out = Vec::with_capacity(rows * dout);
    for row in input.data().chunks(din) {
        for (o, wrow) in wd.chunks(din).enumerate() {
            let dot: T = row.iter().zip(wrow).map(|(&a, &b)| a * b).sum();
            out.push(dot + bias.data()[o]);
        }
    }
    let mut shape = input.shape().to_vec();
    *shape.last_mut().unwrap() = dout;
    Tensor::new(&shape, out)
}

/// Plain matrix product `[n, k] x [k, m] -> [n, m]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    check_rank("matmul", 2, a.rank())?;
    check_rank("matmul", 2, b.rank())?;
    let (n, k, m) = (a.dim(0), a.dim(1), b.dim(1));
    if b.dim(0) != k {
        return Err(first_mismatch("matmul", &[n, k], &[n, b.dim(0)]));
    }
    let mut out = vec![T::zero(); n * m];
    for i in 0..n {
        let dst = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a.data()[i * k + p];
            if av == T::zero() {
                continue;
            }
            for (d, &bv) in dst.iter_mut().zip(&b.data()[p * m..(p + 1) * m]) {
                *d += av * bv;
            }
        }
    }
    Tensor::new(&[n, m], out)
}

/// Exact (erf-based) GELU.
pub fn gelu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| {
        let x = v.to_f64().unwrap_or(0.0);
        T::lit(0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2)))
    })
}

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| v.max(T::zero()))
}
