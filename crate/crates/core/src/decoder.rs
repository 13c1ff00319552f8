//! Three-group center-pivot decoder reducing a 6-channel correlation volume
//! to a single refined matching score per 4D position.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conv4d::{center_pivot_conv4d, CenterPivotKernel};
use crate::correlation::Corr4D;
use crate::error::{check_axis, Error, Result};
use crate::tensor::{group_norm_slice, Scalar, Tensor};

/// Channel widths from input volume to output score.
pub const CHANNEL_PLAN: [usize; 5] = [6, 16, 16, 16, 1];
pub const NORM_GROUPS: usize = 4;
pub const NORM_EPS: f64 = 1e-5;
pub const KERNEL_SIZE: usize = 3;

/// One CP convolution followed by group norm affine parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderGroup<T = f32> {
    pub conv: CenterPivotKernel<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderWeights<T = f32> {
    pub groups: Vec<DecoderGroup<T>>,
    /// `[1, 16]`
    pub head_w: Tensor<T>,
    /// `[1]`
    pub head_b: Tensor<T>,
}

impl<T: Scalar> DecoderWeights<T> {
    pub fn zeros() -> Result<Self> {
        let groups = (0..3)
            .map(|g| {
                let (cin, cout) = (CHANNEL_PLAN[g], CHANNEL_PLAN[g + 1]);
                Ok(DecoderGroup {
                    conv: CenterPivotKernel::zeros(cout, cin, KERNEL_SIZE, KERNEL_SIZE)?,
                    gamma: Tensor::zeros(&[cout])?,
                    beta: Tensor::zeros(&[cout])?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            groups,
            head_w: Tensor::zeros(&[1, CHANNEL_PLAN[3]])?,
            head_b: Tensor::zeros(&[1])?,
        })
    }

    /// Uniform `±1/sqrt(fan_in)` kernels and head, unit gamma, zero beta and
    /// biases.
    pub fn seeded(seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = Self::zeros()?;
        for g in &mut w.groups {
            let cin = g.conv.in_channels();
            let bound = 1.0 / ((cin * 2 * KERNEL_SIZE * KERNEL_SIZE) as f64).sqrt();
            for v in g
                .conv
                .source
                .data_mut()
                .iter_mut()
                .chain(g.conv.target.data_mut())
            {
                *v = T::lit(rng.gen_range(-bound..bound));
            }
            g.gamma = Tensor::full(g.gamma.shape(), T::one())?;
        }
        let bound = 1.0 / (CHANNEL_PLAN[3] as f64).sqrt();
        for v in w.head_w.data_mut() {
            *v = T::lit(rng.gen_range(-bound..bound));
        }
        Ok(w)
    }

    /// Hand-set weights whose output is the channel-mean correlation,
    /// standardized over the whole volume.
    ///
    /// Every convolution averages its input channels at the center tap only,
    /// each group norm shifts by `beta` so that ReLU stays inactive for
    /// values above `-beta` standard deviations, and the head removes that
    /// shift again.
    pub fn pass_through(beta: f64) -> Result<Self> {
        let mut w = Self::zeros()?;
        let c = KERNEL_SIZE / 2;
        for g in &mut w.groups {
            let (cout, cin) = (g.conv.out_channels(), g.conv.in_channels());
            for co in 0..cout {
                for ci in 0..cin {
                    g.conv.source.set(&[co, ci, c, c], T::lit(1.0 / cin as f64));
                }
            }
            g.gamma = Tensor::full(&[cout], T::one())?;
            g.beta = Tensor::full(&[cout], T::lit(beta))?;
        }
        let width = CHANNEL_PLAN[3];
        w.head_w = Tensor::full(&[1, width], T::lit(1.0 / width as f64))?;
        w.head_b = Tensor::full(&[1], T::lit(-beta))?;
        Ok(w)
    }

    pub fn cast<U: Scalar>(&self) -> DecoderWeights<U> {
        DecoderWeights {
            groups: self
                .groups
                .iter()
                .map(|g| DecoderGroup {
                    conv: CenterPivotKernel {
                        source: g.conv.source.cast(),
                        target: g.conv.target.cast(),
                        bias: g.conv.bias.cast(),
                    },
                    gamma: g.gamma.cast(),
                    beta: g.beta.cast(),
                })
                .collect(),
            head_w: self.head_w.cast(),
            head_b: self.head_b.cast(),
        }
    }

    pub fn named_params(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for (i, g) in self.groups.iter().enumerate() {
            let p = format!("decoder.group{i}");
            out.push((format!("{p}.conv.source"), g.conv.source.clone()));
            out.push((format!("{p}.conv.target"), g.conv.target.clone()));
            out.push((format!("{p}.conv.bias"), g.conv.bias.clone()));
            out.push((format!("{p}.norm.gamma"), g.gamma.clone()));
            out.push((format!("{p}.norm.beta"), g.beta.clone()));
        }
        out.push(("decoder.head.weight".into(), self.head_w.clone()));
        out.push(("decoder.head.bias".into(), self.head_b.clone()));
        out
    }

    /// Rebuilds weights from named tensors, checking every shape against the
    /// channel plan.
    pub fn from_named(lookup: impl Fn(&str) -> Option<Tensor<T>>) -> Result<Self> {
        let template = Self::zeros()?;
        let mut params = Vec::new();
        for (name, t) in template.named_params() {
            let got =
                lookup(&name).ok_or_else(|| Error::Config(format!("missing parameter {name}")))?;
            if got.shape() != t.shape() {
                return Err(Error::Config(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
            params.push(got);
        }
        let mut it = params.into_iter();
        let mut next = || it.next().expect("template length");
        let mut groups = Vec::new();
        for _ in 0..3 {
            let conv = CenterPivotKernel::new(next(), next(), next())?;
            groups.push(DecoderGroup {
                conv,
                gamma: next(),
                beta: next(),
            });
        }
        Ok(Self {
            groups,
            head_w: next(),
            head_b: next(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        check_axis("decoder", "groups", 3, self.groups.len())?;
        for (i, g) in self.groups.iter().enumerate() {
            check_axis("decoder", "conv.in", CHANNEL_PLAN[i], g.conv.in_channels())?;
            check_axis(
                "decoder",
                "conv.out",
                CHANNEL_PLAN[i + 1],
                g.conv.out_channels(),
            )?;
            check_axis("decoder", "gamma", CHANNEL_PLAN[i + 1], g.gamma.len())?;
            check_axis("decoder", "beta", CHANNEL_PLAN[i + 1], g.beta.len())?;
        }
        check_axis("decoder", "head.in", CHANNEL_PLAN[3], self.head_w.len())?;
        check_axis("decoder", "head.bias", 1, self.head_b.len())
    }
}

/// Intermediates kept by [`decoder_forward_traced`] for the backward pass.
#[derive(Clone, Debug)]
pub struct DecoderTrace<T> {
    /// Normalized, pre-affine values per group.
    pub normalized: Vec<Tensor<T>>,
    /// `1/sqrt(var + eps)` per group, indexed `[batch * NORM_GROUPS + g]`.
    pub inv_std: Vec<Vec<T>>,
    /// Post-ReLU activations per group.
    pub activations: Vec<Corr4D<T>>,
}

pub fn decoder_forward<T: Scalar>(corr: &Corr4D<T>, w: &DecoderWeights<T>) -> Result<Corr4D<T>> {
    forward(corr, w, None)
}

pub fn decoder_forward_traced<T: Scalar>(
    corr: &Corr4D<T>,
    w: &DecoderWeights<T>,
) -> Result<(Corr4D<T>, DecoderTrace<T>)> {
    let mut trace = DecoderTrace {
        normalized: Vec::new(),
        inv_std: Vec::new(),
        activations: Vec::new(),
    };
    let out = forward(corr, w, Some(&mut trace))?;
    Ok((out, trace))
}

fn forward<T: Scalar>(
    corr: &Corr4D<T>,
    w: &DecoderWeights<T>,
    mut trace: Option<&mut DecoderTrace<T>>,
) -> Result<Corr4D<T>> {
    w.validate()?;
    check_axis(
        "decoder_forward",
        "channels",
        CHANNEL_PLAN[0],
        corr.channels(),
    )?;
    let [b, _, h, wd, ht, wt] = corr.shape();
    let positions = h * wd * ht * wt;
    let eps = T::lit(NORM_EPS);
    let mut x = corr.clone();
    for g in &w.groups {
        let mut y = center_pivot_conv4d(&x, &g.conv)?;
        let c = y.channels();
        let sample = c * positions;
        if let Some(tr) = trace.as_deref_mut() {
            let ones = vec![T::one(); c];
            let zeros = vec![T::zero(); c];
            let mut normalized = y.values().clone();
            let mut inv = Vec::with_capacity(b * NORM_GROUPS);
            for chunk in normalized.data_mut().chunks_mut(sample) {
                inv.extend(group_stats(chunk, c, positions, eps));
                group_norm_slice(chunk, c, positions, NORM_GROUPS, &ones, &zeros, eps);
            }
            tr.normalized.push(normalized);
            tr.inv_std.push(inv);
        }
        for chunk in y.values_mut().data_mut().chunks_mut(sample) {
            group_norm_slice(
                chunk,
                c,
                positions,
                NORM_GROUPS,
                g.gamma.data(),
                g.beta.data(),
                eps,
            );
        }
        for v in y.values_mut().data_mut() {
            *v = v.max(T::zero());
        }
        if let Some(tr) = trace.as_deref_mut() {
            tr.activations.push(y.clone());
        }
        x = y;
    }
    let c = x.channels();
    let mut out = vec![w.head_b.data()[0]; b * positions];
    for bi in 0..b {
        let dst = &mut out[bi * positions..(bi + 1) * positions];
        for ci in 0..c {
            let wc = w.head_w.data()[ci];
            let src = &x.values().data()[(bi * c + ci) * positions..(bi * c + ci + 1) * positions];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += wc * s;
            }
        }
    }
    Corr4D::new(Tensor::new(&[b, 1, h, wd, ht, wt], out)?)
}

fn group_stats<T: Scalar>(x: &[T], c: usize, positions: usize, eps: T) -> Vec<T> {
    let cg = c / NORM_GROUPS;
    let count = T::lit((cg * positions) as f64);
    x.chunks(cg * positions)
        .map(|block| {
            let mean = block.iter().copied().sum::<T>() / count;
            let var = block.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / count;
            T::one() / (var + eps).sqrt()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn volume(shape: [usize; 6], seed: u64) -> Corr4D<f64> {
        let mut g = ChaCha8Rng::seed_from_u64(seed);
        Corr4D::new(Tensor::uniform(&shape, -1.0, 1.0, &mut g).unwrap()).unwrap()
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let y = decoder_forward(
            &volume([1, 6, 3, 3, 3, 3], 1),
            &DecoderWeights::zeros().unwrap(),
        )
        .unwrap();
        assert!(y.values().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_shape_follows_input() {
        let w = DecoderWeights::<f64>::seeded(2).unwrap();
        for shape in [[1, 6, 2, 3, 4, 2], [2, 6, 3, 3, 3, 3]] {
            let y = decoder_forward(&volume(shape, 3), &w).unwrap();
            assert_eq!(
                y.shape(),
                [shape[0], 1, shape[2], shape[3], shape[4], shape[5]]
            );
        }
        assert!(decoder_forward(&volume([1, 5, 2, 2, 2, 2], 4), &w).is_err());
    }

    #[test]
    fn seeded_golden_probes() {
        let w = DecoderWeights::<f32>::seeded(7).unwrap();
        let m = volume([1, 6, 4, 4, 4, 4], 8).cast::<f32>();
        let y = decoder_forward(&m, &w).unwrap();
        let again = decoder_forward(&m, &w).unwrap();
        assert_eq!(y, again);
        let probes = [0usize, 100, 255];
        let golden = [-0.026973985f32, -0.21251138, -0.28831226];
        for (&i, want) in probes.iter().zip(golden) {
            let got = y.values().data()[i];
            assert!((got - want).abs() < 1e-5, "probe {i}: {got}");
        }
    }

    #[test]
    fn traced_forward_matches_plain() {
        let w = DecoderWeights::<f64>::seeded(9).unwrap();
        let m = volume([2, 6, 3, 2, 3, 3], 10);
        let (a, tr) = decoder_forward_traced(&m, &w).unwrap();
        assert_eq!(a, decoder_forward(&m, &w).unwrap());
        assert_eq!(tr.activations.len(), 3);
        assert_eq!(tr.inv_std[0].len(), 2 * NORM_GROUPS);
    }

    #[test]
    fn pass_through_standardizes_mean_correlation() {
        let m = volume([1, 6, 3, 3, 3, 3], 11);
        let y = decoder_forward(&m, &DecoderWeights::pass_through(8.0).unwrap()).unwrap();
        let n = 81;
        let mean: Vec<f64> = (0..n)
            .map(|p| (0..6).map(|c| m.values().data()[c * n + p]).sum::<f64>() / 6.0)
            .collect();
        let mu = mean.iter().sum::<f64>() / n as f64;
        let sd = (mean.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n as f64).sqrt();
        for (p, &v) in mean.iter().enumerate() {
            assert!((y.values().data()[p] - (v - mu) / sd).abs() < 1e-3);
        }
    }

    #[test]
    fn named_round_trip() {
        let w = DecoderWeights::<f32>::seeded(12).unwrap();
        let named = w.named_params();
        assert_eq!(named.len(), 17);
        let back = DecoderWeights::from_named(|n| {
            named.iter().find(|(k, _)| k == n).map(|(_, t)| t.clone())
        })
        .unwrap();
        assert_eq!(back, w);
        assert!(DecoderWeights::<f32>::from_named(|_| None).is_err());
    }

    #[test]
    fn thread_count_does_not_change_output() {
        let w = DecoderWeights::<f32>::seeded(13).unwrap();
        let m = volume([1, 6, 5, 5, 5, 5], 14).cast::<f32>();
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| decoder_forward(&m, &w).unwrap())
        };
        let one = run(1);
        assert_eq!(one, run(4));
    }
}
