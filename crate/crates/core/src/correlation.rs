//! Stacked 4D correlation volumes.

use crate::csfa::AlignedFeatureSet;
use crate::error::{check_axis, check_rank, Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Denominator guard for cosine normalization.
pub const COSINE_EPS: f64 = 1e-8;

/// 6-axis volume `[batch, channel, src_rows, src_cols, trg_rows, trg_cols]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Corr4D<T = f32> {
    values: Tensor<T>,
}

impl<T: Scalar> Corr4D<T> {
    pub fn new(values: Tensor<T>) -> Result<Self> {
        check_rank("Corr4D", 6, values.rank())?;
        Ok(Self { values })
    }

    pub fn zeros(shape: [usize; 6]) -> Result<Self> {
        Self::new(Tensor::zeros(&shape)?)
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut Tensor<T> {
        &mut self.values
    }

    pub fn into_values(self) -> Tensor<T> {
        self.values
    }

    pub fn shape(&self) -> [usize; 6] {
        self.values.shape().try_into().expect("rank 6")
    }

    pub fn batch(&self) -> usize {
        self.values.dim(0)
    }

    pub fn channels(&self) -> usize {
        self.values.dim(1)
    }

    pub fn source_grid(&self) -> (usize, usize) {
        (self.values.dim(2), self.values.dim(3))
    }

    pub fn target_grid(&self) -> (usize, usize) {
        (self.values.dim(4), self.values.dim(5))
    }

    pub fn cast<U: Scalar>(&self) -> Corr4D<U> {
        Corr4D {
            values: self.values.cast(),
        }
    }

    /// Swaps the source and target axis pairs.
    pub fn transpose_source_target(&self) -> Corr4D<T> {
        let [b, c, h, w, ht, wt] = self.shape();
        let mut out = vec![T::zero(); self.values.len()];
        let src = self.values.data();
        for bc in 0..b * c {
            for i in 0..h {
                for j in 0..w {
                    for it in 0..ht {
                        for jt in 0..wt {
                            let from = (((bc * h + i) * w + j) * ht + it) * wt + jt;
                            let to = (((bc * ht + it) * wt + jt) * h + i) * w + j;
                            out[to] = src[from];
                        }
                    }
                }
            }
        }
        Corr4D {
            values: Tensor::new(&[b, c, ht, wt, h, w], out).expect("permuted shape"),
        }
    }
}

/// How correlation scores are normalized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Normalization {
    /// Cosine similarity per token pair; entries lie in [-1, 1].
    #[default]
    PerToken,
    /// One global scale: the product of the two feature matrices' Frobenius
    /// norms. Kept for comparison; entries are not bounded per pair.
    Frobenius,
}

/// `[Ns, D] x [Nt, D] -> [Ns, Nt]` cosine similarities.
pub fn cosine_correlation<T: Scalar>(src: &Tensor<T>, trg: &Tensor<T>) -> Result<Tensor<T>> {
    correlation_with(src, trg, Normalization::PerToken)
}

pub fn correlation_with<T: Scalar>(
    src: &Tensor<T>,
    trg: &Tensor<T>,
    mode: Normalization,
) -> Result<Tensor<T>> {
    check_rank("correlation", 2, src.rank())?;
    check_rank("correlation", 2, trg.rank())?;
    let d = src.dim(1);
    check_axis("correlation", "channels", d, trg.dim(1))?;
    let norms = |t: &Tensor<T>| -> Vec<T> {
        t.data()
            .chunks(d)
            .map(|r| r.iter().map(|&v| v * v).sum::<T>().sqrt())
            .collect()
    };
    let (ns, nt) = (norms(src), norms(trg));
    let eps = T::lit(COSINE_EPS);
    let global = match mode {
        Normalization::PerToken => None,
        Normalization::Frobenius => {
            let f = |n: &[T]| n.iter().map(|&v| v * v).sum::<T>().sqrt();
            Some(f(&ns) * f(&nt) + eps)
        }
    };
    let mut out = Vec::with_capacity(ns.len() * nt.len());
    for (srow, &sn) in src.data().chunks(d).zip(&ns) {
        for (trow, &tn) in trg.data().chunks(d).zip(&nt) {
            let dot: T = srow.iter().zip(trow).map(|(&a, &b)| a * b).sum();
            let denom = global.unwrap_or_else(|| sn * tn + eps);
            out.push(dot / denom);
        }
    }
    Tensor::new(&[ns.len(), nt.len()], out)
}

/// Six-channel volume, channel `i` correlating the `i`-th source and target features.
pub fn build_corr4d<T: Scalar>(
    src: &AlignedFeatureSet<T>,
    trg: &AlignedFeatureSet<T>,
    dims: (usize, usize, usize, usize),
) -> Result<Corr4D<T>> {
    build_corr4d_with(src, trg, dims, Normalization::PerToken)
}

pub fn build_corr4d_with<T: Scalar>(
    src: &AlignedFeatureSet<T>,
    trg: &AlignedFeatureSet<T>,
    dims: (usize, usize, usize, usize),
    mode: Normalization,
) -> Result<Corr4D<T>> {
    let (h, w, ht, wt) = dims;
    check_axis("build_corr4d", "source.tokens", h * w, src.tokens())?;
    check_axis("build_corr4d", "target.tokens", ht * wt, trg.tokens())?;
    if src.channels() != trg.channels() {
        return Err(Error::Shape {
            op: "build_corr4d",
            axis: "channels",
            expected: src.channels(),
            found: trg.channels(),
        });
    }
    let mut data = Vec::with_capacity(6 * h * w * ht * wt);
    for (s, t) in src.features.iter().zip(&trg.features) {
        data.extend_from_slice(correlation_with(s, t, mode)?.data());
    }
    Corr4D::new(Tensor::new(&[1, 6, h, w, ht, wt], data)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_set(n: usize, d: usize, grid: (usize, usize), seed: u64) -> AlignedFeatureSet<f64> {
        let mut g = ChaCha8Rng::seed_from_u64(seed);
        let feats: Vec<Tensor<f64>> = (0..6)
            .map(|_| Tensor::uniform(&[n, d], -1.0, 1.0, &mut g).unwrap())
            .collect();
        AlignedFeatureSet::new(feats.try_into().unwrap(), grid).unwrap()
    }

    #[test]
    fn self_similarity_diagonal() {
        let mut g = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f32>::uniform(&[6, 5], -1.0, 1.0, &mut g).unwrap();
        let c = cosine_correlation(&x, &x).unwrap();
        for i in 0..6 {
            assert!((c.at(&[i, i]) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn orthogonal_and_zero_rows() {
        let a = Tensor::<f64>::new(&[2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let b = Tensor::<f64>::new(&[1, 2], vec![0.0, 3.0]).unwrap();
        let c = cosine_correlation(&a, &b).unwrap();
        assert_eq!(c.data(), &[0.0, 0.0]);
    }

    #[test]
    fn matches_per_pair_oracle() {
        let mut g = ChaCha8Rng::seed_from_u64(2);
        let s = Tensor::<f64>::uniform(&[5, 8], -1.0, 1.0, &mut g).unwrap();
        let t = Tensor::<f64>::uniform(&[7, 8], -1.0, 1.0, &mut g).unwrap();
        let c = cosine_correlation(&s, &t).unwrap();
        for i in 0..5 {
            for j in 0..7 {
                let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
                for k in 0..8 {
                    dot += s.at(&[i, k]) * t.at(&[j, k]);
                    na += s.at(&[i, k]).powi(2);
                    nb += t.at(&[j, k]).powi(2);
                }
                assert!((c.at(&[i, j]) - dot / (na.sqrt() * nb.sqrt())).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn frobenius_mode_uses_one_global_scale() {
        let mut g = ChaCha8Rng::seed_from_u64(3);
        let s = Tensor::<f64>::uniform(&[3, 4], -1.0, 1.0, &mut g).unwrap();
        let t = Tensor::<f64>::uniform(&[2, 4], -1.0, 1.0, &mut g).unwrap();
        let c = correlation_with(&s, &t, Normalization::Frobenius).unwrap();
        let fro = |x: &Tensor<f64>| x.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        let raw = crate::tensor::linear(&s, &t, &Tensor::zeros(&[2]).unwrap()).unwrap();
        assert!(c.max_rel_diff(&raw.scale(1.0 / (fro(&s) * fro(&t)))) < 1e-6);
    }

    #[test]
    fn stacked_volume_structure() {
        let a = random_set(6, 4, (2, 3), 4);
        let b = random_set(4, 4, (2, 2), 5);
        let v = build_corr4d(&a, &b, (2, 3, 2, 2)).unwrap();
        assert_eq!(v.shape(), [1, 6, 2, 3, 2, 2]);
        for k in 0..6 {
            let direct = cosine_correlation(&a.features[k], &b.features[k]).unwrap();
            assert_eq!(&v.values().data()[k * 24..(k + 1) * 24], direct.data());
        }
        assert!(v.values().data().iter().all(|x| x.abs() <= 1.0 + 1e-5));
        assert!(build_corr4d(&a, &b, (3, 3, 2, 2)).is_err());
    }

    #[test]
    fn identical_sets_have_unit_diagonal() {
        let a = random_set(4, 3, (2, 2), 6);
        let v = build_corr4d(&a, &a, (2, 2, 2, 2)).unwrap();
        for ch in 0..6 {
            for i in 0..2 {
                for j in 0..2 {
                    assert!((v.values().at(&[0, ch, i, j, i, j]) - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn transpose_symmetry_is_exact() {
        let a = random_set(6, 4, (3, 2), 7);
        let b = random_set(4, 4, (2, 2), 8);
        let ab = build_corr4d(&a, &b, (3, 2, 2, 2)).unwrap();
        let ba = build_corr4d(&b, &a, (2, 2, 3, 2)).unwrap();
        assert_eq!(ab.transpose_source_target(), ba);
    }

    #[test]
    fn positive_scaling_of_a_token_is_invisible() {
        let a = random_set(4, 5, (2, 2), 9);
        let b = random_set(4, 5, (2, 2), 10);
        let mut scaled = a.clone();
        for f in scaled.features.iter_mut() {
            for v in &mut f.data_mut()[5..10] {
                *v *= 37.5;
            }
        }
        let x = build_corr4d(&a, &b, (2, 2, 2, 2)).unwrap();
        let y = build_corr4d(&scaled, &b, (2, 2, 2, 2)).unwrap();
        assert!(x.values().max_abs_diff(y.values()) < 1e-5);
    }
}
