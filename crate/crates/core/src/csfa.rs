//! Cross-scale feature alignment.
//!
//! The stride-16 map is the anchor: it attends to the stride-8 map for fine
//! detail and to the stride-32 map for semantics, attends to itself, and each
//! of the three results is refined by one more self-attention block. The
//! three bilinearly aligned pyramid levels are appended, giving six
//! equally shaped token maps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{check_axis, check_rank, Error, Result};
use crate::tensor::{bilinear_resize, gelu, linear, matmul, row_softmax, Scalar, Tensor};

/// Backbone features at strides 8, 16 and 32, stored token-major
/// (`[rows * cols, channels]`).
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid<T = f32> {
    pub f1: Tensor<T>,
    pub f2: Tensor<T>,
    pub f3: Tensor<T>,
    /// Image height in pixels.
    pub height: usize,
    /// Image width in pixels.
    pub width: usize,
}

impl<T: Scalar> FeaturePyramid<T> {
    pub fn new(
        f1: Tensor<T>,
        f2: Tensor<T>,
        f3: Tensor<T>,
        height: usize,
        width: usize,
    ) -> Result<Self> {
        let p = Self {
            f1,
            f2,
            f3,
            height,
            width,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height % 32 != 0 || self.width % 32 != 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config(format!(
                "pyramid base extents {}x{} must be positive multiples of 32",
                self.height, self.width
            )));
        }
        for (t, stride, name) in [
            (&self.f1, 8, "f1.tokens"),
            (&self.f2, 16, "f2.tokens"),
            (&self.f3, 32, "f3.tokens"),
        ] {
            check_rank("FeaturePyramid", 2, t.rank())?;
            check_axis(
                "FeaturePyramid",
                name,
                (self.height / stride) * (self.width / stride),
                t.dim(0),
            )?;
        }
        Ok(())
    }

    /// Channel count of the stride-8 level.
    pub fn base_channels(&self) -> usize {
        self.f1.dim(1)
    }

    pub fn grid(&self, stride: usize) -> (usize, usize) {
        (self.height / stride, self.width / stride)
    }

    pub fn cast<U: Scalar>(&self) -> FeaturePyramid<U> {
        FeaturePyramid {
            f1: self.f1.cast(),
            f2: self.f2.cast(),
            f3: self.f3.cast(),
            height: self.height,
            width: self.width,
        }
    }
}

/// Names of the aligned features, in correlation-channel order.
pub const FEATURE_NAMES: [&str; 6] = [
    "fine",
    "sem",
    "self",
    "f1_aligned",
    "f2_aligned",
    "f3_aligned",
];

/// Six `[h16 * w16, 2C]` token maps.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignedFeatureSet<T = f32> {
    pub features: [Tensor<T>; 6],
    /// Token grid `(rows, cols)` at stride 16.
    pub grid: (usize, usize),
}

impl<T: Scalar> AlignedFeatureSet<T> {
    pub fn new(features: [Tensor<T>; 6], grid: (usize, usize)) -> Result<Self> {
        let shape = features[0].shape().to_vec();
        check_rank("AlignedFeatureSet", 2, shape.len())?;
        check_axis("AlignedFeatureSet", "tokens", grid.0 * grid.1, shape[0])?;
        for f in &features[1..] {
            check_rank("AlignedFeatureSet", 2, f.rank())?;
            check_axis("AlignedFeatureSet", "tokens", shape[0], f.dim(0))?;
            check_axis("AlignedFeatureSet", "channels", shape[1], f.dim(1))?;
        }
        Ok(Self { features, grid })
    }

    pub fn tokens(&self) -> usize {
        self.features[0].dim(0)
    }

    pub fn channels(&self) -> usize {
        self.features[0].dim(1)
    }
}

/// Weights of one attention block: single-head attention with an output
/// projection and a residual, then a GELU MLP with a residual. Linear
/// weights are `[out, in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights<T = f32> {
    pub wq: Tensor<T>,
    pub bq: Tensor<T>,
    pub wk: Tensor<T>,
    pub bk: Tensor<T>,
    pub wv: Tensor<T>,
    pub bv: Tensor<T>,
    pub wo: Tensor<T>,
    pub bo: Tensor<T>,
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

const ATTN_PARAMS: [&str; 12] = [
    "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "w1", "b1", "w2", "b2",
];

impl<T: Scalar> AttentionWeights<T> {
    pub fn zeros(dim: usize) -> Result<Self> {
        let hidden = 4 * dim;
        let sq = || Tensor::zeros(&[dim, dim]);
        let v = |n| Tensor::zeros(&[n]);
        Ok(Self {
            wq: sq()?,
            bq: v(dim)?,
            wk: sq()?,
            bk: v(dim)?,
            wv: sq()?,
            bv: v(dim)?,
            wo: sq()?,
            bo: v(dim)?,
            w1: Tensor::zeros(&[hidden, dim])?,
            b1: v(hidden)?,
            w2: Tensor::zeros(&[dim, hidden])?,
            b2: v(dim)?,
        })
    }

    /// Uniform `±gain / sqrt(fan_in)` weights, zero biases.
    pub fn seeded<R: Rng>(dim: usize, gain: f64, rng: &mut R) -> Result<Self> {
        let mut w = Self::zeros(dim)?;
        for t in [
            &mut w.wq, &mut w.wk, &mut w.wv, &mut w.wo, &mut w.w1, &mut w.w2,
        ] {
            let a = gain / (t.dim(1) as f64).sqrt();
            *t = Tensor::uniform(t.shape(), -a, a, rng)?;
        }
        Ok(w)
    }

    pub fn dim(&self) -> usize {
        self.wq.dim(0)
    }

    fn params(&self) -> [&Tensor<T>; 12] {
        [
            &self.wq, &self.bq, &self.wk, &self.bk, &self.wv, &self.bv, &self.wo, &self.bo,
            &self.w1, &self.b1, &self.w2, &self.b2,
        ]
    }

    fn params_mut(&mut self) -> [&mut Tensor<T>; 12] {
        [
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CsfaWeights<T = f32> {
    /// `[2C, C]` map of the stride-8 level to the model width.
    pub align_f1_w: Tensor<T>,
    pub align_f1_b: Tensor<T>,
    /// `[2C, 4C]` map of the stride-32 level to the model width.
    pub align_f3_w: Tensor<T>,
    pub align_f3_b: Tensor<T>,
    pub cross_fine: AttentionWeights<T>,
    pub cross_sem: AttentionWeights<T>,
    pub self_anchor: AttentionWeights<T>,
    pub refine_fine: AttentionWeights<T>,
    pub refine_sem: AttentionWeights<T>,
    pub refine_self: AttentionWeights<T>,
}

impl<T: Scalar> CsfaWeights<T> {
    /// Everything zero; every attention block reduces to the identity.
    pub fn zeros(base_channels: usize) -> Result<Self> {
        let d = 2 * base_channels;
        Ok(Self {
            align_f1_w: Tensor::zeros(&[d, base_channels])?,
            align_f1_b: Tensor::zeros(&[d])?,
            align_f3_w: Tensor::zeros(&[d, 4 * base_channels])?,
            align_f3_b: Tensor::zeros(&[d])?,
            cross_fine: AttentionWeights::zeros(d)?,
            cross_sem: AttentionWeights::zeros(d)?,
            self_anchor: AttentionWeights::zeros(d)?,
            refine_fine: AttentionWeights::zeros(d)?,
            refine_sem: AttentionWeights::zeros(d)?,
            refine_self: AttentionWeights::zeros(d)?,
        })
    }

    /// Deterministic initialization: channel-align maps at unit gain,
    /// attention blocks at `block_gain`.
    pub fn seeded(base_channels: usize, seed: u64, block_gain: f64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = Self::zeros(base_channels)?;
        let a1 = 1.0 / (base_channels as f64).sqrt();
        w.align_f1_w = Tensor::uniform(w.align_f1_w.shape(), -a1, a1, &mut rng)?;
        let a3 = 1.0 / ((4 * base_channels) as f64).sqrt();
        w.align_f3_w = Tensor::uniform(w.align_f3_w.shape(), -a3, a3, &mut rng)?;
        let d = 2 * base_channels;
        for b in w.blocks_mut() {
            *b = AttentionWeights::seeded(d, block_gain, &mut rng)?;
        }
        Ok(w)
    }

    pub fn base_channels(&self) -> usize {
        self.align_f1_w.dim(1)
    }

    fn blocks(&self) -> [(&'static str, &AttentionWeights<T>); 6] {
        [
            ("cross_fine", &self.cross_fine),
            ("cross_sem", &self.cross_sem),
            ("self_anchor", &self.self_anchor),
            ("refine_fine", &self.refine_fine),
            ("refine_sem", &self.refine_sem),
            ("refine_self", &self.refine_self),
        ]
    }

    fn blocks_mut(&mut self) -> [&mut AttentionWeights<T>; 6] {
        [
            &mut self.cross_fine,
            &mut self.cross_sem,
            &mut self.self_anchor,
            &mut self.refine_fine,
            &mut self.refine_sem,
            &mut self.refine_self,
        ]
    }

    /// Flattened `(name, tensor)` list, e.g. `csfa.cross_fine.wq`.
    pub fn named_params(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = vec![
            ("csfa.align_f1.w".to_owned(), self.align_f1_w.clone()),
            ("csfa.align_f1.b".to_owned(), self.align_f1_b.clone()),
            ("csfa.align_f3.w".to_owned(), self.align_f3_w.clone()),
            ("csfa.align_f3.b".to_owned(), self.align_f3_b.clone()),
        ];
        for (block, w) in self.blocks() {
            for (name, t) in ATTN_PARAMS.iter().zip(w.params()) {
                out.push((format!("csfa.{block}.{name}"), t.clone()));
            }
        }
        out
    }

    /// Rebuilds weights from named tensors; every name must be present with
    /// the expected shape.
    pub fn from_named(
        base_channels: usize,
        lookup: impl Fn(&str) -> Option<Tensor<T>>,
    ) -> Result<Self> {
        let mut w = Self::zeros(base_channels)?;
        let fetch = |name: String, slot: &mut Tensor<T>| -> Result<()> {
            let t =
                lookup(&name).ok_or_else(|| Error::Config(format!("missing parameter {name}")))?;
            if t.shape() != slot.shape() {
                return Err(Error::Config(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
            Ok(())
        };
        fetch("csfa.align_f1.w".into(), &mut w.align_f1_w)?;
        fetch("csfa.align_f1.b".into(), &mut w.align_f1_b)?;
        fetch("csfa.align_f3.w".into(), &mut w.align_f3_w)?;
        fetch("csfa.align_f3.b".into(), &mut w.align_f3_b)?;
        let names = [
            "cross_fine",
            "cross_sem",
            "self_anchor",
            "refine_fine",
            "refine_sem",
            "refine_self",
        ];
        for (block, bw) in names.iter().zip(w.blocks_mut()) {
            for (name, slot) in ATTN_PARAMS.iter().zip(bw.params_mut()) {
                fetch(format!("csfa.{block}.{name}"), slot)?;
            }
        }
        Ok(w)
    }
}

/// Maps the stride-8 and stride-32 levels to the stride-16 channel width.
pub fn channel_align<T: Scalar>(
    pyr: &FeaturePyramid<T>,
    w: &CsfaWeights<T>,
) -> Result<FeaturePyramid<T>> {
    pyr.validate()?;
    let c = pyr.base_channels();
    check_axis("channel_align", "f1.channels", w.base_channels(), c)?;
    check_axis("channel_align", "f2.channels", 2 * c, pyr.f2.dim(1))?;
    check_axis("channel_align", "f3.channels", 4 * c, pyr.f3.dim(1))?;
    Ok(FeaturePyramid {
        f1: linear(&pyr.f1, &w.align_f1_w, &w.align_f1_b)?,
        f2: pyr.f2.clone(),
        f3: linear(&pyr.f3, &w.align_f3_w, &w.align_f3_b)?,
        height: pyr.height,
        width: pyr.width,
    })
}

/// `MLP(h) + h` with `h = proj(softmax(q kᵀ / sqrt(d)) v) + query`.
pub fn cross_attention_block<T: Scalar>(
    query: &Tensor<T>,
    kv: &Tensor<T>,
    w: &AttentionWeights<T>,
) -> Result<Tensor<T>> {
    const OP: &str = "attention_block";
    check_rank(OP, 2, query.rank())?;
    check_rank(OP, 2, kv.rank())?;
    let d = w.dim();
    check_axis(OP, "query.channels", d, query.dim(1))?;
    check_axis(OP, "kv.channels", d, kv.dim(1))?;

    let q = linear(query, &w.wq, &w.bq)?;
    let k = linear(kv, &w.wk, &w.bk)?;
    let v = linear(kv, &w.wv, &w.bv)?;
    let scores = linear(&q, &k, &Tensor::zeros(&[kv.dim(0)])?)?;
    let attn = row_softmax(&scores, T::one() / T::lit(d as f64).sqrt())?;
    let mixed = linear(&matmul(&attn, &v)?, &w.wo, &w.bo)?;
    let h = mixed.zip_map(query, |a, b| a + b)?;
    let m = linear(&gelu(&linear(&h, &w.w1, &w.b1)?), &w.w2, &w.b2)?;
    m.zip_map(&h, |a, b| a + b)
}

pub fn self_attention_block<T: Scalar>(
    x: &Tensor<T>,
    w: &AttentionWeights<T>,
) -> Result<Tensor<T>> {
    cross_attention_block(x, x, w)
}

/// `[rows * cols, D]` tokens to `[D, rows, cols]` planes.
pub fn tokens_to_planes<T: Scalar>(t: &Tensor<T>, rows: usize, cols: usize) -> Result<Tensor<T>> {
    check_rank("tokens_to_planes", 2, t.rank())?;
    check_axis("tokens_to_planes", "tokens", rows * cols, t.dim(0))?;
    let (n, d) = (t.dim(0), t.dim(1));
    Tensor::from_fn(&[d, rows, cols], |i| t.data()[(i % n) * d + i / n])
}

/// `[D, rows, cols]` planes to `[rows * cols, D]` tokens.
pub fn planes_to_tokens<T: Scalar>(p: &Tensor<T>) -> Result<Tensor<T>> {
    check_rank("planes_to_tokens", 3, p.rank())?;
    let (d, n) = (p.dim(0), p.dim(1) * p.dim(2));
    Tensor::from_fn(&[n, d], |i| p.data()[(i % d) * n + i / d])
}

/// Bilinear alignment of a channel-aligned pyramid onto the stride-16 grid.
pub fn linear_alignment<T: Scalar>(
    aligned: &FeaturePyramid<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    aligned.validate()?;
    let (h16, w16) = aligned.grid(16);
    let d = aligned.f2.dim(1);
    check_axis("linear_alignment", "f1.channels", d, aligned.f1.dim(1))?;
    check_axis("linear_alignment", "f3.channels", d, aligned.f3.dim(1))?;
    let to_anchor = |t: &Tensor<T>, stride: usize| -> Result<Tensor<T>> {
        let (r, c) = aligned.grid(stride);
        planes_to_tokens(&bilinear_resize(&tokens_to_planes(t, r, c)?, h16, w16)?)
    };
    Ok((
        to_anchor(&aligned.f1, 8)?,
        aligned.f2.clone(),
        to_anchor(&aligned.f3, 32)?,
    ))
}

pub fn csfa_forward<T: Scalar>(
    pyr: &FeaturePyramid<T>,
    w: &CsfaWeights<T>,
) -> Result<AlignedFeatureSet<T>> {
    let aligned = channel_align(pyr, w)?;
    let anchor = &aligned.f2;
    let fine = self_attention_block(
        &cross_attention_block(anchor, &aligned.f1, &w.cross_fine)?,
        &w.refine_fine,
    )?;
    let sem = self_attention_block(
        &cross_attention_block(anchor, &aligned.f3, &w.cross_sem)?,
        &w.refine_sem,
    )?;
    let selff = self_attention_block(
        &self_attention_block(anchor, &w.self_anchor)?,
        &w.refine_self,
    )?;
    let (f1a, f2a, f3a) = linear_alignment(&aligned)?;
    AlignedFeatureSet::new([fine, sem, selff, f1a, f2a, f3a], aligned.grid(16))
}
