//! Decoder-only gradient descent on precomputed correlation volumes.
//!
//! Feature extraction and CSFA stay frozen, so each training pair reduces
//! to a fixed `[6, h, w, h, w]` volume and a ground-truth flow map. The
//! volumes are built once and stacked into one batch.

use std::collections::HashMap;

use serde::Serialize;

use crate::correlation::{build_corr4d, Corr4D};
use crate::csfa::{csfa_forward, CsfaWeights};
use crate::decoder::DecoderWeights;
use crate::error::{Error, Result};
use crate::extract::ToyExtractor;
use crate::flow::{build_gt_flow, FlowMap};
use crate::grad::{decoder_backward, decoder_loss};
use crate::synthetic::shift_pair;
use crate::tensor::Tensor;

/// A batch of correlation volumes with one target flow per item.
#[derive(Clone, Debug)]
pub struct TrainSet {
    pub corr: Corr4D<f64>,
    pub gt: Vec<FlowMap<f64>>,
}

impl TrainSet {
    pub fn new(corr: Corr4D<f64>, gt: Vec<FlowMap<f64>>) -> Result<Self> {
        if corr.batch() != gt.len() {
            return Err(Error::Config(format!(
                "training set has {} volumes but {} flow maps",
                corr.batch(),
                gt.len()
            )));
        }
        Ok(Self { corr, gt })
    }

    pub fn len(&self) -> usize {
        self.gt.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gt.is_empty()
    }
}

/// Layout of the constant-shift training set.
#[derive(Clone, Debug, PartialEq)]
pub struct ShiftSetConfig {
    /// Square image side in pixels, a multiple of 32.
    pub size: usize,
    pub pairs: usize,
    /// Per-pair displacements, used cyclically.
    pub shifts: Vec<[f64; 2]>,
    pub base_channels: usize,
    pub block_gain: f64,
    pub seed: u64,
}

impl Default for ShiftSetConfig {
    fn default() -> Self {
        Self {
            size: 96,
            pairs: 4,
            shifts: vec![[16.0, 0.0], [0.0, 16.0], [-16.0, 16.0], [16.0, -16.0]],
            base_channels: 8,
            block_gain: 0.5,
            seed: 0,
        }
    }
}

/// Renders shift pairs, runs the frozen toy extractor and CSFA, and stacks
/// the resulting volumes.
pub fn shift_training_set(cfg: &ShiftSetConfig) -> Result<TrainSet> {
    if cfg.pairs == 0 || cfg.shifts.is_empty() {
        return Err(Error::Config(
            "shift training set needs pairs and shifts".into(),
        ));
    }
    const STRIDE: usize = 16;
    let extractor = ToyExtractor::<f64>::new(cfg.base_channels, cfg.seed)?;
    let csfa =
        CsfaWeights::<f64>::seeded(cfg.base_channels, cfg.seed.wrapping_add(1), cfg.block_gain)?;
    let cells = cfg.size / STRIDE;
    let mut values = Vec::new();
    let mut gt = Vec::with_capacity(cfg.pairs);
    let mut shape = [0; 6];
    for i in 0..cfg.pairs {
        let pair = shift_pair(
            cfg.size,
            STRIDE,
            cfg.shifts[i % cfg.shifts.len()],
            cfg.seed,
            i,
        )?;
        let a = csfa_forward(&extractor.extract(&pair.src_image.cast::<f64>())?, &csfa)?;
        let b = csfa_forward(&extractor.extract(&pair.trg_image.cast::<f64>())?, &csfa)?;
        let corr = build_corr4d(&a, &b, (cells, cells, cells, cells))?;
        shape = corr.shape();
        values.extend_from_slice(corr.values().data());
        gt.push(build_gt_flow(
            &pair.src_points,
            &pair.trg_points,
            cells,
            cells,
            STRIDE as f64,
        )?);
    }
    shape[0] = cfg.pairs;
    TrainSet::new(Corr4D::new(Tensor::new(&shape, values)?)?, gt)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub temperature: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            lr: 0.05,
            temperature: 0.05,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub weights: DecoderWeights<f64>,
    /// Loss before each step, then the loss of the final weights.
    pub trace: Vec<f64>,
}

impl TrainOutcome {
    pub fn initial_loss(&self) -> f64 {
        self.trace[0]
    }

    pub fn final_loss(&self) -> f64 {
        *self.trace.last().expect("trace is never empty")
    }

    /// Running minimum of the trace.
    pub fn best_so_far(&self) -> Vec<f64> {
        self.trace
            .iter()
            .scan(f64::INFINITY, |best, &l| {
                *best = best.min(l);
                Some(*best)
            })
            .collect()
    }
}

fn descend(
    w: &DecoderWeights<f64>,
    g: &DecoderWeights<f64>,
    lr: f64,
) -> Result<DecoderWeights<f64>> {
    let grads: HashMap<String, Tensor<f64>> = g.named_params().into_iter().collect();
    let params: HashMap<String, Tensor<f64>> = w.named_params().into_iter().collect();
    DecoderWeights::from_named(|name| {
        let (p, d) = (params.get(name)?, grads.get(name)?);
        Tensor::from_fn(p.shape(), |i| p.data()[i] - lr * d.data()[i]).ok()
    })
}

/// Plain gradient descent on the batch-mean AEPE.
///
/// Returns [`Error::Diverged`] with the trace so far if the loss or any
/// gradient stops being finite.
pub fn train_toy(
    set: &TrainSet,
    w0: &DecoderWeights<f64>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if !(cfg.lr >= 0.0 && cfg.lr.is_finite()) {
        return Err(Error::Config(format!(
            "learning rate must be finite and non-negative, got {}",
            cfg.lr
        )));
    }
    w0.validate()?;
    let mut w = w0.clone();
    let mut trace = Vec::with_capacity(cfg.steps + 1);
    for step in 0..cfg.steps {
        let back = decoder_backward(&set.corr, &w, &set.gt, cfg.temperature)?;
        trace.push(back.loss);
        let finite = back.loss.is_finite()
            && back
                .grads
                .named_params()
                .iter()
                .all(|(_, t)| t.data().iter().all(|v| v.is_finite()));
        if !finite {
            return Err(Error::Diverged { step, trace });
        }
        log::debug!("train_toy step {step}: loss {:.6}", back.loss);
        if cfg.lr > 0.0 {
            w = descend(&w, &back.grads, cfg.lr)?;
        }
    }
    let last = decoder_loss(&set.corr, &w, &set.gt, cfg.temperature)?;
    trace.push(last);
    if !last.is_finite() {
        return Err(Error::Diverged {
            step: cfg.steps,
            trace,
        });
    }
    Ok(TrainOutcome { weights: w, trace })
}
