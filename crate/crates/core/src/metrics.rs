//! Average end-point error and percentage of correct keypoints.

use serde::{Deserialize, Serialize};

use crate::error::{check_axis, Error, Result};
use crate::flow::FlowMap;
use crate::kbc::KeypointSet;
use crate::tensor::{Scalar, Tensor};

fn check_extents<T: Scalar>(op: &'static str, pred: &FlowMap<T>, gt: &FlowMap<T>) -> Result<()> {
    check_axis(op, "height", gt.height(), pred.height())?;
    check_axis(op, "width", gt.width(), pred.width())
}

/// Mean Euclidean distance between predicted and target flow vectors over
/// the target's supervised cells. Zero, with a warning, when nothing is
/// supervised.
pub fn aepe_loss<T: Scalar>(pred: &FlowMap<T>, gt: &FlowMap<T>) -> Result<f64> {
    Ok(aepe_with_grad(&pred.cast::<f64>(), &gt.cast::<f64>(), false)?.0)
}

/// AEPE and its gradient with respect to the predicted `[2, h, w]` values.
/// Cells where prediction and target coincide contribute zero gradient.
pub fn aepe_grad(pred: &FlowMap<f64>, gt: &FlowMap<f64>) -> Result<(f64, Tensor<f64>)> {
    let (loss, grad) = aepe_with_grad(pred, gt, true)?;
    Ok((loss, grad.expect("requested")))
}

fn aepe_with_grad(
    pred: &FlowMap<f64>,
    gt: &FlowMap<f64>,
    want_grad: bool,
) -> Result<(f64, Option<Tensor<f64>>)> {
    check_extents("aepe_loss", pred, gt)?;
    let n = gt.height() * gt.width();
    let count = gt.mask.iter().filter(|&&m| m).count();
    let mut grad = want_grad.then(|| vec![0.0; 2 * n]);
    if count == 0 {
        log::warn!("aepe_loss: no supervised cells");
        let grad = grad
            .map(|g| Tensor::new(pred.values.shape(), g))
            .transpose()?;
        return Ok((0.0, grad));
    }
    let (p, g) = (pred.values.data(), gt.values.data());
    let mut total = 0.0;
    for cell in (0..n).filter(|&c| gt.mask[c]) {
        let (ex, ey) = (p[cell] - g[cell], p[n + cell] - g[n + cell]);
        let d = ex.hypot(ey);
        total += d;
        if let Some(gr) = grad.as_mut() {
            if d > 0.0 {
                gr[cell] = ex / (d * count as f64);
                gr[n + cell] = ey / (d * count as f64);
            }
        }
    }
    let grad = grad
        .map(|g| Tensor::new(pred.values.shape(), g))
        .transpose()?;
    Ok((total / count as f64, grad))
}

/// Outcome for one ground-truth-valid keypoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointResult {
    pub index: usize,
    pub distance: f64,
    pub hit: bool,
}

/// PCK outcome for one image pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub alpha: f64,
    /// `max(h, w)` of the reference extent, pixels.
    pub reference: f64,
    /// `alpha * reference`.
    pub threshold: f64,
    pub points: Vec<PointResult>,
    pub pck: f64,
}

/// A prediction hits when it is valid and strictly closer than
/// `alpha * max(ref_h, ref_w)` to its ground truth. Only ground-truth-valid
/// points are scored.
pub fn pck(
    pred: &KeypointSet,
    gt: &KeypointSet,
    alpha: f64,
    ref_h: f64,
    ref_w: f64,
) -> Result<EvalRecord> {
    if pred.len() != gt.len() {
        return Err(Error::KeypointCount {
            left: pred.len(),
            right: gt.len(),
        });
    }
    if !(alpha > 0.0) {
        return Err(Error::Config(format!(
            "alpha must be positive, got {alpha}"
        )));
    }
    let reference = ref_h.max(ref_w);
    if !(reference > 0.0) {
        return Err(Error::Config(format!(
            "degenerate reference extent {ref_w}x{ref_h}"
        )));
    }
    let threshold = alpha * reference;
    let points: Vec<PointResult> = (0..gt.len())
        .filter(|&i| gt.valid[i])
        .map(|i| {
            let (p, g) = (pred.points[i], gt.points[i]);
            let distance = (p[0] - g[0]).hypot(p[1] - g[1]);
            PointResult {
                index: i,
                distance,
                hit: pred.valid[i] && distance < threshold,
            }
        })
        .collect();
    if points.is_empty() {
        return Err(Error::EmptyKeypoints);
    }
    let hits = points.iter().filter(|p| p.hit).count();
    Ok(EvalRecord {
        alpha,
        reference,
        threshold,
        pck: hits as f64 / points.len() as f64,
        points,
    })
}
