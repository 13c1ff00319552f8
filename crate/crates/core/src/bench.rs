//! Wall-clock comparison of dense and center-pivot 4D convolution.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::conv4d::{center_pivot_conv4d, dense_conv4d, CenterPivotKernel, Kernel4D};
use crate::correlation::Corr4D;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BenchConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Extent of each of the four spatial axes.
    pub size: usize,
    pub kernel: usize,
    pub runs: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            in_channels: 6,
            out_channels: 16,
            size: 16,
            kernel: 3,
            runs: 21,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub method: &'static str,
    pub median_ms: f64,
    pub min_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub rows: Vec<BenchRow>,
    /// Dense median over center-pivot median.
    pub speedup: f64,
}

fn time_runs(runs: usize, mut f: impl FnMut() -> Result<()>) -> Result<BenchRow> {
    let mut ms = Vec::with_capacity(runs);
    for _ in 0..runs {
        let t0 = Instant::now();
        f()?;
        ms.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    ms.sort_by(f64::total_cmp);
    Ok(BenchRow {
        method: "",
        median_ms: ms[runs / 2],
        min_ms: ms[0],
    })
}

/// Times forward passes of both methods on the same seeded volume. The
/// dense kernel is fully populated, so every one of its taps is computed.
pub fn bench_conv4d(cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.runs == 0 || cfg.size == 0 || cfg.in_channels == 0 || cfg.out_channels == 0 {
        return Err(Error::Config(
            "benchmark sizes and run count must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (n, k) = (cfg.size, cfg.kernel);
    let m = Corr4D::new(Tensor::<f32>::uniform(
        &[1, cfg.in_channels, n, n, n, n],
        -1.0,
        1.0,
        &mut rng,
    )?)?;
    let cp = CenterPivotKernel::new(
        Tensor::uniform(
            &[cfg.out_channels, cfg.in_channels, k, k],
            -0.2,
            0.2,
            &mut rng,
        )?,
        Tensor::uniform(
            &[cfg.out_channels, cfg.in_channels, k, k],
            -0.2,
            0.2,
            &mut rng,
        )?,
        Tensor::uniform(&[cfg.out_channels], -0.1, 0.1, &mut rng)?,
    )?;
    let dense = Kernel4D::new(Tensor::uniform(
        &[cfg.out_channels, cfg.in_channels, k, k, k, k],
        -0.05,
        0.05,
        &mut rng,
    )?)?;
    let mut d = time_runs(cfg.runs, || dense_conv4d(&m, &dense).map(drop))?;
    d.method = "dense";
    let mut c = time_runs(cfg.runs, || center_pivot_conv4d(&m, &cp).map(drop))?;
    c.method = "center-pivot";
    let speedup = d.median_ms / c.median_ms;
    Ok(BenchReport {
        config: *cfg,
        rows: vec![d, c],
        speedup,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_bench_reports_both_rows() {
        let r = bench_conv4d(&BenchConfig {
            size: 4,
            runs: 3,
            out_channels: 2,
            ..BenchConfig::default()
        })
        .unwrap();
        assert_eq!(r.rows.len(), 2);
        assert_eq!(r.rows[0].method, "dense");
        assert!(r
            .rows
            .iter()
            .all(|row| row.median_ms >= row.min_ms && row.min_ms >= 0.0));
        assert!(r.speedup > 0.0);
    }

    #[test]
    fn rejects_zero_runs() {
        let cfg = BenchConfig {
            runs: 0,
            ..BenchConfig::default()
        };
        assert!(bench_conv4d(&cfg).is_err());
    }
}
