//! Reverse-mode gradients of the flow loss with respect to decoder
//! parameters, and a central finite-difference check.
//!
//! The chain is `corr -> decoder -> soft-argmax flow -> AEPE`, averaged over
//! the batch. Everything here runs in `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::conv4d::{center_pivot_backward, CenterPivotKernel};
use crate::correlation::Corr4D;
use crate::decoder::{decoder_forward, decoder_forward_traced, DecoderWeights, NORM_GROUPS};
use crate::error::{check_axis, Result};
use crate::flow::{flow_backward, flow_from_correlation, FlowMap};
use crate::metrics::{aepe_grad, aepe_loss};
use crate::tensor::Tensor;

/// Loss value together with its parameter gradients.
#[derive(Clone, Debug)]
pub struct Backward {
    pub loss: f64,
    pub grads: DecoderWeights<f64>,
}

/// Batch-mean AEPE of the decoder's soft-argmax flow against `gt`.
pub fn decoder_loss(
    corr: &Corr4D<f64>,
    w: &DecoderWeights<f64>,
    gt: &[FlowMap<f64>],
    temperature: f64,
) -> Result<f64> {
    check_axis("decoder_loss", "batch", corr.batch(), gt.len())?;
    let refined = decoder_forward(corr, w)?;
    let flows = flow_from_correlation(&refined, temperature)?;
    let mut total = 0.0;
    for (f, g) in flows.iter().zip(gt) {
        total += aepe_loss(f, g)?;
    }
    Ok(total / gt.len() as f64)
}

pub fn decoder_backward(
    corr: &Corr4D<f64>,
    w: &DecoderWeights<f64>,
    gt: &[FlowMap<f64>],
    temperature: f64,
) -> Result<Backward> {
    let b = corr.batch();
    check_axis("decoder_backward", "batch", b, gt.len())?;
    let (refined, trace) = decoder_forward_traced(corr, w)?;
    let flows = flow_from_correlation(&refined, temperature)?;

    let mut loss = 0.0;
    let mut grad_flow = Vec::with_capacity(b);
    for (f, g) in flows.iter().zip(gt) {
        let (l, gr) = aepe_grad(f, g)?;
        loss += l / b as f64;
        grad_flow.push(gr.scale(1.0 / b as f64));
    }
    let g_out = flow_backward(&refined, temperature, &grad_flow)?;

    let [_, _, h, wd, ht, wt] = corr.shape();
    let positions = h * wd * ht * wt;
    let mut grads = DecoderWeights::<f64>::zeros()?;

    // Head: out = sum_c w_c a_c + bias.
    let last = &trace.activations[2];
    let c = last.channels();
    let mut g_act = vec![0.0; last.values().len()];
    for bi in 0..b {
        let go = &g_out.data()[bi * positions..(bi + 1) * positions];
        grads.head_b.data_mut()[0] += go.iter().sum::<f64>();
        for ci in 0..c {
            let off = (bi * c + ci) * positions;
            let a = &last.values().data()[off..off + positions];
            grads.head_w.data_mut()[ci] += a.iter().zip(go).map(|(x, y)| x * y).sum::<f64>();
            let wc = w.head_w.data()[ci];
            for (d, &y) in g_act[off..off + positions].iter_mut().zip(go) {
                *d = wc * y;
            }
        }
    }

    for gi in (0..3).rev() {
        let group = &w.groups[gi];
        let act = &trace.activations[gi];
        let xhat = &trace.normalized[gi];
        let inv = &trace.inv_std[gi];
        let c = act.channels();
        let cg = c / NORM_GROUPS;
        let block = cg * positions;
        let mut g_pre = vec![0.0; act.values().len()];
        for bi in 0..b {
            for g in 0..NORM_GROUPS {
                let off = (bi * c + g * cg) * positions;
                let mut dxhat = vec![0.0; block];
                for k in 0..block {
                    let ch = g * cg + k / positions;
                    let dz = if act.values().data()[off + k] > 0.0 {
                        g_act[off + k]
                    } else {
                        0.0
                    };
                    let xh = xhat.data()[off + k];
                    grads.groups[gi].gamma.data_mut()[ch] += dz * xh;
                    grads.groups[gi].beta.data_mut()[ch] += dz;
                    dxhat[k] = dz * group.gamma.data()[ch];
                }
                let n = block as f64;
                let sum_d: f64 = dxhat.iter().sum();
                let sum_dx: f64 = dxhat
                    .iter()
                    .zip(&xhat.data()[off..off + block])
                    .map(|(d, x)| d * x)
                    .sum();
                let s = inv[bi * NORM_GROUPS + g] / n;
                for k in 0..block {
                    g_pre[off + k] = s * (n * dxhat[k] - sum_d - xhat.data()[off + k] * sum_dx);
                }
            }
        }
        let input = if gi == 0 {
            corr
        } else {
            &trace.activations[gi - 1]
        };
        let g_pre = Tensor::new(act.values().shape(), g_pre)?;
        let cp = center_pivot_backward(input, &group.conv, &g_pre, gi > 0)?;
        grads.groups[gi].conv = cp.kernel;
        if gi > 0 {
            g_act = cp.input.into_data();
        }
    }
    Ok(Backward { loss, grads })
}

/// Largest relative disagreement for one named parameter tensor.
#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    /// Entries whose `±step` probes straddle a ReLU kink, where central
    /// differences do not estimate the derivative.
    pub skipped_nonsmooth: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub step: f64,
    pub temperature: f64,
    pub loss: f64,
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
}

/// Options for [`gradcheck`].
#[derive(Clone, Copy, Debug)]
pub struct GradcheckConfig {
    pub seed: u64,
    /// Central-difference step.
    pub step: f64,
    pub temperature: f64,
    /// Grid extent of the `1 x 6 x n x n x n x n` probe volume.
    pub grid: usize,
    /// Entries sampled per parameter tensor; smaller tensors are checked in
    /// full.
    pub samples_per_param: usize,
    /// Magnitude below which both gradients count as zero.
    pub zero_floor: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            step: 1e-4,
            temperature: 1.0,
            grid: 4,
            samples_per_param: 24,
            zero_floor: 1e-8,
        }
    }
}

/// Relative error `|a - n| / max(|a|, |n|)`, zero when both magnitudes are
/// below `floor`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < floor {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Seeded probe instance: random correlation volume, seeded decoder with
/// randomized affine and bias terms, and a fully supervised random flow
/// target.
pub fn gradcheck_instance(
    cfg: &GradcheckConfig,
) -> Result<(Corr4D<f64>, DecoderWeights<f64>, Vec<FlowMap<f64>>)> {
    let n = cfg.grid;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let corr = Corr4D::new(Tensor::uniform(&[1, 6, n, n, n, n], -1.0, 1.0, &mut rng)?)?;
    let mut w = DecoderWeights::<f64>::seeded(cfg.seed.wrapping_add(1))?;
    for g in &mut w.groups {
        for v in g.gamma.data_mut() {
            *v = rng.gen_range(0.5..1.5);
        }
        for v in g.beta.data_mut().iter_mut().chain(g.conv.bias.data_mut()) {
            *v = rng.gen_range(-0.2..0.2);
        }
    }
    w.head_b.data_mut()[0] = rng.gen_range(-0.2..0.2);
    let gt = FlowMap::dense(Tensor::uniform(&[2, n, n], -1.5, 1.5, &mut rng)?)?;
    Ok((corr, w, vec![gt]))
}

fn param_mut(w: &mut DecoderWeights<f64>, index: usize) -> &mut Tensor<f64> {
    let (group, slot) = (index / 5, index % 5);
    if group == 3 {
        return if slot == 0 {
            &mut w.head_w
        } else {
            &mut w.head_b
        };
    }
    let g = &mut w.groups[group];
    let CenterPivotKernel {
        source,
        target,
        bias,
    } = &mut g.conv;
    match slot {
        0 => source,
        1 => target,
        2 => bias,
        3 => &mut g.gamma,
        _ => &mut g.beta,
    }
}

fn relu_pattern(corr: &Corr4D<f64>, w: &DecoderWeights<f64>) -> Result<Vec<bool>> {
    let (_, trace) = decoder_forward_traced(corr, w)?;
    Ok(trace
        .activations
        .iter()
        .flat_map(|a| a.values().data().iter().map(|&v| v > 0.0))
        .collect())
}

/// Compares analytic gradients with central differences on every named
/// decoder parameter.
pub fn gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let (corr, w, gt) = gradcheck_instance(cfg)?;
    let back = decoder_backward(&corr, &w, &gt, cfg.temperature)?;
    let names: Vec<String> = w.named_params().into_iter().map(|(n, _)| n).collect();
    let mut grads = back.grads.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9);
    let mut params = Vec::with_capacity(names.len());
    for (pi, name) in names.into_iter().enumerate() {
        let len = param_mut(&mut grads, pi).len();
        let picks: Vec<usize> = if len <= cfg.samples_per_param {
            (0..len).collect()
        } else {
            rand::seq::index::sample(&mut rng, len, cfg.samples_per_param).into_vec()
        };
        let mut worst = 0.0f64;
        let mut skipped = 0;
        for &k in &picks {
            let mut probe = w.clone();
            let orig = param_mut(&mut probe, pi).data()[k];
            param_mut(&mut probe, pi).data_mut()[k] = orig + cfg.step;
            let up = decoder_loss(&corr, &probe, &gt, cfg.temperature)?;
            let up_pattern = relu_pattern(&corr, &probe)?;
            param_mut(&mut probe, pi).data_mut()[k] = orig - cfg.step;
            let down = decoder_loss(&corr, &probe, &gt, cfg.temperature)?;
            if relu_pattern(&corr, &probe)? != up_pattern {
                skipped += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * cfg.step);
            let analytic = param_mut(&mut grads, pi).data()[k];
            worst = worst.max(relative_error(analytic, numeric, cfg.zero_floor));
        }
        params.push(ParamCheck {
            name,
            checked: picks.len() - skipped,
            skipped_nonsmooth: skipped,
            max_rel_error: worst,
        });
    }
    let max_rel_error = params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max);
    Ok(GradcheckReport {
        step: cfg.step,
        temperature: cfg.temperature,
        loss: back.loss,
        params,
        max_rel_error,
    })
}
