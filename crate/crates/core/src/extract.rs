//! Fixed-weight convolutional feature extractor standing in for a
//! pretrained backbone.
//!
//! Three stages, each a seeded convolution followed by ReLU:
//! `8x8` stride 8 to `C` channels, then `3x3` stride 2 to `2C`, then `3x3`
//! stride 2 to `4C`, giving strides 8, 16 and 32. Images are centered at
//! 0.5 first, so a flat mid-gray region produces zero features.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::csfa::{planes_to_tokens, FeaturePyramid};
use crate::error::{check_axis, check_rank, Error, Result};
use crate::tensor::{conv2d, relu, Scalar, Tensor};

/// Seeded stage kernels of the toy extractor.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyExtractor<T = f32> {
    pub stage1: Tensor<T>,
    pub stage2: Tensor<T>,
    pub stage3: Tensor<T>,
}

impl<T: Scalar> ToyExtractor<T> {
    pub fn new(base_channels: usize, seed: u64) -> Result<Self> {
        if base_channels == 0 {
            return Err(Error::Config(
                "toy extractor needs at least one channel".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = base_channels;
        let mut kernel = |cout: usize, cin: usize, k: usize| {
            let a = (3.0 / (cin * k * k) as f64).sqrt();
            Tensor::uniform(&[cout, cin, k, k], -a, a, &mut rng)
        };
        Ok(Self {
            stage1: kernel(c, 3, 8)?,
            stage2: kernel(2 * c, c, 3)?,
            stage3: kernel(4 * c, 2 * c, 3)?,
        })
    }

    pub fn base_channels(&self) -> usize {
        self.stage1.dim(0)
    }

    /// Features of a `[3, H, W]` image with `H` and `W` multiples of 32.
    pub fn extract(&self, img: &Tensor<T>) -> Result<FeaturePyramid<T>> {
        check_rank("toy_extract", 3, img.rank())?;
        check_axis("toy_extract", "channels", 3, img.dim(0))?;
        let (h, w) = (img.dim(1), img.dim(2));
        if h % 32 != 0 || w % 32 != 0 {
            return Err(Error::Config(format!(
                "toy_extract needs extents divisible by 32, got {w}x{h}"
            )));
        }
        let half = T::lit(0.5);
        let x = img.map(|v| v - half);
        let zeros = |n: usize| Tensor::zeros(&[n]);
        let s1 = relu(&conv2d(
            &x,
            &self.stage1,
            &zeros(self.stage1.dim(0))?,
            8,
            0,
        )?);
        let s2 = relu(&conv2d(
            &s1,
            &self.stage2,
            &zeros(self.stage2.dim(0))?,
            2,
            1,
        )?);
        let s3 = relu(&conv2d(
            &s2,
            &self.stage3,
            &zeros(self.stage3.dim(0))?,
            2,
            1,
        )?);
        FeaturePyramid::new(
            planes_to_tokens(&s1)?,
            planes_to_tokens(&s2)?,
            planes_to_tokens(&s3)?,
            h,
            w,
        )
    }
}

/// One-shot extraction with freshly seeded weights.
pub fn toy_extract<T: Scalar>(
    img: &Tensor<T>,
    base_channels: usize,
    seed: u64,
) -> Result<FeaturePyramid<T>> {
    ToyExtractor::new(base_channels, seed)?.extract(img)
}
