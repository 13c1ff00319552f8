//! Closed-form example checks, runnable from the command line.
//!
//! Each check exercises one small case whose answer is fixed by the
//! definition of the operation (identity kernels, 3-4-5 triangles, strict
//! thresholds and the like). [`run_selftest`] runs them all and reports each
//! by name.

use serde::Serialize;

use crate::annotation::{evaluate_predictions, write_jsonl, PairAnnotation, PredictionRecord};
use crate::conv4d::{center_pivot_conv4d, dense_conv4d, CenterPivotKernel, Kernel4D};
use crate::correlation::{build_corr4d, cosine_correlation, Corr4D};
use crate::csfa::{
    channel_align, csfa_forward, linear_alignment, self_attention_block, AlignedFeatureSet,
    AttentionWeights, CsfaWeights, FeaturePyramid,
};
use crate::decoder::{decoder_forward, DecoderWeights};
use crate::error::Error;
use crate::extract::toy_extract;
use crate::flow::{build_gt_flow, flow_from_correlation, keypoints_from_flow, FlowMap};
use crate::grad::{decoder_backward, gradcheck_instance, GradcheckConfig};
use crate::kbc::{
    center_crop, contains_small_object, get_bounding_box, kbc_preprocess, kbc_scale,
    min_pairwise_distance, BoundingBox, KbcBranch, KbcConfig, KbcTransform, KeypointSet,
};
use crate::metrics::{aepe_loss, pck};
use crate::pipeline::{
    run_inference_with, ImageView, InferenceConfig, KbcMode, Matcher, PairInput,
};
use crate::tensor::{
    bilinear_resize, conv2d, conv2d_same, gelu, group_norm, linear, row_softmax, softmax_in_place,
    Tensor,
};
use crate::tensorfile::{decode, encode, AnyTensor, FormatError};
use crate::train::{shift_training_set, train_toy, ShiftSetConfig, TrainConfig};

/// Why a check failed.
#[derive(Debug)]
pub struct Failure(pub String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(e.to_string())
    }
}

impl From<FormatError> for Failure {
    fn from(e: FormatError) -> Self {
        Failure(e.to_string())
    }
}

type Outcome = std::result::Result<(), Failure>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(Failure(format!($($msg)+)));
        }
    };
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

pub struct Check {
    pub name: &'static str,
    run: fn() -> Outcome,
}

impl Check {
    pub fn run(&self) -> CheckResult {
        match (self.run)() {
            Ok(()) => CheckResult {
                name: self.name,
                passed: true,
                detail: None,
            },
            Err(Failure(detail)) => CheckResult {
                name: self.name,
                passed: false,
                detail: Some(detail),
            },
        }
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn t(shape: &[usize], data: Vec<f64>) -> std::result::Result<Tensor<f64>, Failure> {
    Ok(Tensor::new(shape, data)?)
}

fn ramp(shape: &[usize]) -> std::result::Result<Tensor<f64>, Failure> {
    Ok(Tensor::from_fn(shape, |i| {
        ((i * 7919) % 23) as f64 / 23.0 - 0.4
    })?)
}

// tensor-core

fn conv2d_identity_kernel() -> Outcome {
    let x = ramp(&[3, 4, 5])?;
    let mut k = Tensor::zeros(&[3, 3, 1, 1])?;
    for c in 0..3 {
        k.set(&[c, c, 0, 0], 1.0);
    }
    let y = conv2d(&x, &k, &Tensor::zeros(&[3])?, 1, 0)?;
    ensure!(y == x, "1x1 identity kernel changed the input");
    Ok(())
}

fn conv2d_zero_padding_sums() -> Outcome {
    let x = Tensor::full(&[1, 3, 3], 1.0)?;
    let y = conv2d_same(
        &x,
        &Tensor::full(&[1, 1, 3, 3], 1.0)?,
        &Tensor::zeros(&[1])?,
    )?;
    ensure!(y.at(&[0, 1, 1]) == 9.0, "center {}", y.at(&[0, 1, 1]));
    for (i, j) in [(0, 0), (0, 2), (2, 0), (2, 2)] {
        ensure!(
            y.at(&[0, i, j]) == 4.0,
            "corner ({i},{j}) = {}",
            y.at(&[0, i, j])
        );
    }
    Ok(())
}

fn resize_identity() -> Outcome {
    let x = ramp(&[2, 5, 7])?;
    ensure!(
        bilinear_resize(&x, 5, 7)? == x,
        "same-size resize changed the input"
    );
    Ok(())
}

fn resize_center_average() -> Outcome {
    let y = bilinear_resize(&t(&[1, 2, 2], vec![0.0, 1.0, 2.0, 3.0])?, 3, 3)?;
    ensure!(
        close(y.at(&[0, 1, 1]), 1.5, 1e-12),
        "center {}",
        y.at(&[0, 1, 1])
    );
    Ok(())
}

fn softmax_symmetric() -> Outcome {
    let mut x = [0.3f64; 4];
    softmax_in_place(&mut x, 1.0);
    ensure!(x.iter().all(|&v| close(v, 0.25, 1e-15)), "{x:?}");
    Ok(())
}

fn softmax_closed_form() -> Outcome {
    let mut x = [0.0, std::f64::consts::LN_2];
    softmax_in_place(&mut x, 1.0);
    ensure!(
        close(x[0], 1.0 / 3.0, 1e-12) && close(x[1], 2.0 / 3.0, 1e-12),
        "{x:?}"
    );
    Ok(())
}

fn softmax_large_inputs() -> Outcome {
    let mut x = [1000.0f64, 1000.0];
    softmax_in_place(&mut x, 1.0);
    ensure!(x == [0.5, 0.5], "{x:?}");
    Ok(())
}

fn group_norm_constant_input() -> Outcome {
    let x = Tensor::full(&[4, 3, 3], 2.5)?;
    let y = group_norm(
        &x,
        2,
        &Tensor::full(&[4], 1.0)?,
        &Tensor::zeros(&[4])?,
        1e-5,
    )?;
    ensure!(
        y.data().iter().all(|&v| v == 0.0),
        "nonzero output on constant input"
    );
    Ok(())
}

fn group_norm_affine_only() -> Outcome {
    let y = group_norm(
        &ramp(&[4, 3, 3])?,
        2,
        &Tensor::zeros(&[4])?,
        &Tensor::full(&[4], 5.0)?,
        1e-5,
    )?;
    ensure!(y.data().iter().all(|&v| v == 5.0), "output is not all 5");
    Ok(())
}

fn linear_identity() -> Outcome {
    let x = ramp(&[5, 3])?;
    let eye = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 })?;
    ensure!(
        linear(&x, &eye, &Tensor::zeros(&[3])?)? == x,
        "identity weight changed the input"
    );
    Ok(())
}

fn linear_bias_only() -> Outcome {
    let b = t(&[2], vec![0.5, -2.0])?;
    let y = linear(&ramp(&[4, 3])?, &Tensor::zeros(&[2, 3])?, &b)?;
    ensure!(
        y.data().chunks(2).all(|r| r == b.data()),
        "rows are not the bias"
    );
    Ok(())
}

// csfa

fn channel_align_identity_embedding() -> Outcome {
    let c = 2;
    let pyr: FeaturePyramid<f64> = toy_extract(&ramp(&[3, 32, 32])?, c, 1)?;
    let mut w = CsfaWeights::<f64>::zeros(c)?;
    for i in 0..c {
        w.align_f1_w.set(&[i, i], 1.0);
    }
    let out = channel_align(&pyr, &w)?;
    for (row_in, row_out) in pyr.f1.data().chunks(c).zip(out.f1.data().chunks(2 * c)) {
        ensure!(row_out[..c] == *row_in, "first channels not preserved");
        ensure!(
            row_out[c..].iter().all(|&v| v == 0.0),
            "padding channels not zero"
        );
    }
    Ok(())
}

fn channel_align_zero_weights() -> Outcome {
    let pyr: FeaturePyramid<f64> = toy_extract(&ramp(&[3, 32, 32])?, 2, 1)?;
    let out = channel_align(&pyr, &CsfaWeights::zeros(2)?)?;
    ensure!(
        out.f1.data().iter().chain(out.f3.data()).all(|&v| v == 0.0),
        "zero weights gave nonzero features"
    );
    Ok(())
}

fn attention_zero_weights_pass_query() -> Outcome {
    let q = ramp(&[5, 4])?;
    let y = crate::csfa::cross_attention_block(&q, &ramp(&[3, 4])?, &AttentionWeights::zeros(4)?)?;
    ensure!(y == q, "zero-weight block changed the query");
    Ok(())
}

fn attention_single_key_weight_one() -> Outcome {
    let a = row_softmax(&t(&[3, 1], vec![-40.0, 0.0, 75.0])?, 1.0)?;
    ensure!(a.data().iter().all(|&v| v == 1.0), "{:?}", a.data());
    Ok(())
}

fn self_attention_zero_weights() -> Outcome {
    let x = ramp(&[6, 4])?;
    ensure!(
        self_attention_block(&x, &AttentionWeights::zeros(4)?)? == x,
        "not a pass-through"
    );
    Ok(())
}

fn self_attention_single_token() -> Outcome {
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(3);
    let w = AttentionWeights::<f64>::seeded(4, 1.0, &mut rng)?;
    let x = ramp(&[1, 4])?;
    let v = linear(&x, &w.wv, &w.bv)?;
    let h = linear(&v, &w.wo, &w.bo)?.zip_map(&x, |a, b| a + b)?;
    let want =
        linear(&gelu(&linear(&h, &w.w1, &w.b1)?), &w.w2, &w.b2)?.zip_map(&h, |a, b| a + b)?;
    let got = self_attention_block(&x, &w)?;
    ensure!(
        got.max_abs_diff(&want) < 1e-12,
        "differs by {}",
        got.max_abs_diff(&want)
    );
    Ok(())
}

fn aligned_pyramid(f1: Tensor<f64>, f2: Tensor<f64>, f3: Tensor<f64>) -> FeaturePyramid<f64> {
    FeaturePyramid {
        f1,
        f2,
        f3,
        height: 32,
        width: 32,
    }
}

fn alignment_constant_f1() -> Outcome {
    let p = aligned_pyramid(Tensor::full(&[16, 3], 0.7)?, ramp(&[4, 3])?, ramp(&[1, 3])?);
    let (f1, _, _) = linear_alignment(&p)?;
    ensure!(f1.shape() == [4, 3], "shape {:?}", f1.shape());
    ensure!(
        f1.data().iter().all(|&v| close(v, 0.7, 1e-12)),
        "not constant"
    );
    Ok(())
}

fn alignment_broadcasts_single_f3() -> Outcome {
    let p = aligned_pyramid(
        ramp(&[16, 3])?,
        ramp(&[4, 3])?,
        t(&[1, 3], vec![0.1, -0.2, 0.3])?,
    );
    let (_, _, f3) = linear_alignment(&p)?;
    ensure!(f3.shape() == [4, 3], "shape {:?}", f3.shape());
    ensure!(
        f3.data().chunks(3).all(|r| r == [0.1, -0.2, 0.3]),
        "not broadcast"
    );
    Ok(())
}

fn csfa_zero_weights_collapse() -> Outcome {
    let pyr: FeaturePyramid<f64> = toy_extract(&ramp(&[3, 64, 32])?, 2, 4)?;
    let out = csfa_forward(&pyr, &CsfaWeights::zeros(2)?)?;
    for k in 0..3 {
        ensure!(
            out.features[k] == pyr.f2,
            "feature {k} differs from the anchor"
        );
    }
    Ok(())
}

fn csfa_output_structure() -> Outcome {
    let pyr: FeaturePyramid<f64> = toy_extract(&ramp(&[3, 64, 96])?, 2, 4)?;
    let out = csfa_forward(&pyr, &CsfaWeights::seeded(2, 5, 0.5)?)?;
    ensure!(out.features.len() == 6, "length {}", out.features.len());
    ensure!(
        out.features.iter().all(|f| f.shape() == [24, 4]),
        "shapes differ"
    );
    ensure!(out.grid == (4, 6), "grid {:?}", out.grid);
    Ok(())
}

// correlation

fn cosine_self_similarity() -> Outcome {
    let x = ramp(&[5, 4])?;
    let c = cosine_correlation(&x, &x)?;
    for i in 0..5 {
        ensure!(
            close(c.at(&[i, i]), 1.0, 1e-6),
            "diagonal {i} = {}",
            c.at(&[i, i])
        );
    }
    Ok(())
}

fn cosine_orthogonal() -> Outcome {
    let c = cosine_correlation(&t(&[1, 2], vec![1.0, 0.0])?, &t(&[1, 2], vec![0.0, 3.0])?)?;
    ensure!(c.data() == [0.0], "{:?}", c.data());
    Ok(())
}

fn feature_set(seed: usize) -> std::result::Result<AlignedFeatureSet<f64>, Failure> {
    let f = |k: usize| {
        Tensor::from_fn(&[6, 3], |i| {
            (((i + 5 * k + seed) * 2654435761) % 97) as f64 / 97.0 + 0.05
        })
    };
    Ok(AlignedFeatureSet::new(
        [f(0)?, f(1)?, f(2)?, f(3)?, f(4)?, f(5)?],
        (2, 3),
    )?)
}

fn corr_identical_sets_diagonal() -> Outcome {
    let s = feature_set(0)?;
    let c = build_corr4d(&s, &s, (2, 3, 2, 3))?;
    for ch in 0..6 {
        for i in 0..2 {
            for j in 0..3 {
                let v = c.values().at(&[0, ch, i, j, i, j]);
                ensure!(close(v, 1.0, 1e-6), "channel {ch} ({i},{j}) = {v}");
            }
        }
    }
    Ok(())
}

fn corr_shape() -> Outcome {
    let s = feature_set(1)?;
    let trg = AlignedFeatureSet::new(
        std::array::from_fn(|k| Tensor::from_fn(&[4, 3], |i| ((i + k) % 5) as f64 + 1.0).unwrap()),
        (1, 4),
    )?;
    let c = build_corr4d(&s, &trg, (2, 3, 1, 4))?;
    ensure!(c.shape() == [1, 6, 2, 3, 1, 4], "shape {:?}", c.shape());
    Ok(())
}

// conv4d

fn volume(shape: [usize; 6]) -> std::result::Result<Corr4D<f64>, Failure> {
    Ok(Corr4D::new(ramp(&shape)?)?)
}

fn dense_delta_identity() -> Outcome {
    let m = volume([1, 1, 4, 4, 4, 4])?;
    let mut k = Tensor::zeros(&[1, 1, 3, 3, 3, 3])?;
    k.set(&[0, 0, 1, 1, 1, 1], 1.0);
    let y = dense_conv4d(&m, &Kernel4D::new(k)?)?;
    ensure!(y.values() == m.values(), "delta kernel changed the input");
    Ok(())
}

fn dense_all_ones_interior() -> Outcome {
    let m = Corr4D::new(Tensor::full(&[1, 1, 5, 5, 5, 5], 1.0)?)?;
    let y = dense_conv4d(&m, &Kernel4D::new(Tensor::full(&[1, 1, 3, 3, 3, 3], 1.0)?)?)?;
    ensure!(
        y.values().at(&[0, 0, 2, 2, 2, 2]) == 81.0,
        "interior {}",
        y.values().at(&[0, 0, 2, 2, 2, 2])
    );
    Ok(())
}

fn center_pivot_zero() -> Outcome {
    let m = volume([1, 2, 3, 3, 3, 3])?;
    let y = center_pivot_conv4d(&m, &CenterPivotKernel::zeros(3, 2, 3, 3)?)?;
    ensure!(
        y.values().data().iter().all(|&v| v == 0.0),
        "nonzero output"
    );
    Ok(())
}

fn center_pivot_one_sided_identity() -> Outcome {
    let m = volume([1, 1, 4, 3, 3, 4])?;
    let mut k = CenterPivotKernel::zeros(1, 1, 3, 3)?;
    k.source.set(&[0, 0, 1, 1], 1.0);
    let y = center_pivot_conv4d(&m, &k)?;
    ensure!(y.values() == m.values(), "source delta changed the input");
    Ok(())
}

// decoder

fn decoder_zero_weights() -> Outcome {
    let y = decoder_forward(&volume([1, 6, 3, 3, 3, 3])?, &DecoderWeights::zeros()?)?;
    ensure!(
        y.values().data().iter().all(|&v| v == 0.0),
        "nonzero output"
    );
    Ok(())
}

fn decoder_shape() -> Outcome {
    let y = decoder_forward(&volume([2, 6, 3, 2, 2, 3])?, &DecoderWeights::seeded(1)?)?;
    ensure!(y.shape() == [2, 1, 3, 2, 2, 3], "shape {:?}", y.shape());
    Ok(())
}

// flow

fn one_hot_flow() -> Outcome {
    let (h, w) = (3, 4);
    let target = |i: usize, j: usize| ((i + 2 * j) % h, (3 * i + j + 1) % w);
    let mut v = Tensor::zeros(&[1, 1, h, w, h, w])?;
    for i in 0..h {
        for j in 0..w {
            let (ti, tj) = target(i, j);
            v.set(&[0, 0, i, j, ti, tj], 1.0);
        }
    }
    let flow = &flow_from_correlation(&Corr4D::new(v)?, 0.01)?[0];
    for i in 0..h {
        for j in 0..w {
            let (ti, tj) = target(i, j);
            let (dx, dy) = flow.at(i, j);
            let err = (j as f64 + dx - tj as f64).hypot(i as f64 + dy - ti as f64);
            ensure!(err < 1e-3, "cell ({i},{j}) off by {err} cells");
        }
    }
    Ok(())
}

fn uniform_flow_targets_centroid() -> Outcome {
    let (h, w) = (3, 5);
    let flow =
        &flow_from_correlation(&Corr4D::new(Tensor::full(&[1, 1, h, w, h, w], 0.2)?)?, 0.05)?[0];
    for i in 0..h {
        for j in 0..w {
            let (dx, dy) = flow.at(i, j);
            ensure!(
                close(j as f64 + dx, (w as f64 - 1.0) / 2.0, 1e-9)
                    && close(i as f64 + dy, (h as f64 - 1.0) / 2.0, 1e-9),
                "cell ({i},{j}) targets ({}, {})",
                j as f64 + dx,
                i as f64 + dy
            );
        }
    }
    Ok(())
}

fn src_points() -> KeypointSet {
    KeypointSet::from_points(vec![[7.5, 7.5], [20.0, 33.0], [40.25, 10.5]])
}

fn zero_flow_keeps_points() -> Outcome {
    let p = src_points();
    let out = keypoints_from_flow(&FlowMap::<f64>::zeros(4, 4)?, &p, 16.0);
    ensure!(out == p, "{:?}", out.points);
    Ok(())
}

fn constant_flow_offsets_points() -> Outcome {
    let mut v = Tensor::zeros(&[2, 4, 4])?;
    for c in 0..16 {
        v.data_mut()[c] = 1.0;
        v.data_mut()[16 + c] = 2.0;
    }
    let p = src_points();
    let out = keypoints_from_flow(&FlowMap::dense(v)?, &p, 16.0);
    for (a, b) in out.points.iter().zip(&p.points) {
        ensure!(
            close(a[0] - b[0], 16.0, 1e-12) && close(a[1] - b[1], 32.0, 1e-12),
            "{a:?} from {b:?}"
        );
    }
    Ok(())
}

// kbc

fn bbox_two_points() -> Outcome {
    let b = get_bounding_box(&KeypointSet::from_points(vec![[10.0, 20.0], [30.0, 40.0]]))?;
    ensure!(
        [b.xmin, b.ymin, b.xmax, b.ymax] == [10.0, 20.0, 30.0, 40.0],
        "{b:?}"
    );
    ensure!(b.width() == 20.0 && b.height() == 20.0, "{b:?}");
    Ok(())
}

fn bbox_single_point() -> Outcome {
    let b = get_bounding_box(&KeypointSet::from_points(vec![[5.0, 5.0]]))?;
    ensure!([b.xmin, b.ymin, b.xmax, b.ymax] == [5.0; 4], "{b:?}");
    Ok(())
}

fn min_distance_345() -> Outcome {
    let d = min_pairwise_distance(&KeypointSet::from_points(vec![[0.0, 0.0], [3.0, 4.0]]));
    ensure!(d == 5.0, "{d}");
    Ok(())
}

fn min_distance_duplicates() -> Outcome {
    let d = min_pairwise_distance(&KeypointSet::from_points(vec![
        [2.0, 2.0],
        [9.0, 1.0],
        [2.0, 2.0],
    ]));
    ensure!(d == 0.0, "{d}");
    Ok(())
}

fn box_points(w: f64, h: f64) -> KeypointSet {
    KeypointSet::from_points(vec![[3.0, 3.0], [3.0 + w, 3.0 + h]])
}

fn small_object_gate_fires() -> Outcome {
    ensure!(
        contains_small_object(&box_points(100.0, 80.0), 256.0, 256.0, 0.8)?,
        "gate did not fire"
    );
    Ok(())
}

fn large_object_gate_quiet() -> Outcome {
    ensure!(
        !contains_small_object(&box_points(250.0, 250.0), 256.0, 256.0, 0.8)?,
        "gate fired"
    );
    Ok(())
}

fn gate_is_strict() -> Outcome {
    // 128 x 128 in 256 x 256 gives r = 0.25 exactly.
    ensure!(
        !contains_small_object(&box_points(128.0, 128.0), 256.0, 256.0, 0.25)?,
        "gate fired at r == threshold"
    );
    Ok(())
}

fn crop_center_offset() -> Outcome {
    let img = Tensor::<f32>::zeros(&[1, 512, 512])?;
    let p = KeypointSet::from_points(vec![[256.0, 256.0]]);
    let (out, q, tr) = center_crop(&img, &p, [256.0, 256.0], 256, 256)?;
    ensure!(out.shape() == [1, 256, 256], "shape {:?}", out.shape());
    ensure!(tr.offset == [128.0, 128.0], "offset {:?}", tr.offset);
    ensure!(q.points[0] == [128.0, 128.0], "{:?}", q.points[0]);
    Ok(())
}

fn crop_clamps_at_corner() -> Outcome {
    let img = Tensor::<f32>::zeros(&[1, 512, 512])?;
    let p = KeypointSet::from_points(vec![[10.0, 10.0]]);
    let (_, _, tr) = center_crop(&img, &p, [10.0, 10.0], 256, 256)?;
    ensure!(tr.offset == [0.0, 0.0], "offset {:?}", tr.offset);
    Ok(())
}

fn small_box() -> BoundingBox {
    BoundingBox {
        xmin: 100.0,
        ymin: 100.0,
        xmax: 130.0,
        ymax: 120.0,
    }
}

fn scale_reaches_separation() -> Outcome {
    let s = kbc_scale(&small_box(), 8.0, 256, 256, &KbcConfig::default());
    ensure!(s == 2.0, "{s}");
    Ok(())
}

fn scale_respects_margin() -> Outcome {
    let b = BoundingBox {
        xmin: 0.0,
        ymin: 0.0,
        xmax: 200.0,
        ymax: 200.0,
    };
    let s = kbc_scale(&b, 4.0, 256, 256, &KbcConfig::default());
    ensure!(close(s, 1.152, 1e-12), "{s}");
    Ok(())
}

fn kbc_direct_branch() -> Outcome {
    let img = Tensor::<f32>::zeros(&[3, 256, 256])?;
    let p = KeypointSet::from_points(vec![[100.0, 100.0], [120.0, 100.0]]);
    let out = kbc_preprocess(&img, &p, 256, 256, &KbcConfig::default())?;
    ensure!(out.branch == KbcBranch::DirectCrop, "{:?}", out.branch);
    ensure!(out.transform.scale == 1.0, "scale {}", out.transform.scale);
    Ok(())
}

fn kbc_resize_branch() -> Outcome {
    let img = Tensor::<f32>::zeros(&[3, 256, 256])?;
    let p = KeypointSet::from_points(vec![[100.0, 100.0], [108.0, 100.0], [100.0, 110.0]]);
    let out = kbc_preprocess(&img, &p, 256, 256, &KbcConfig::default())?;
    let want = kbc_scale(&get_bounding_box(&p)?, 8.0, 256, 256, &KbcConfig::default());
    ensure!(out.branch == KbcBranch::ResizeThenCrop, "{:?}", out.branch);
    ensure!(
        out.transform.scale == want && want == 2.0,
        "scale {} want {want}",
        out.transform.scale
    );
    Ok(())
}

/// Predicts every target keypoint at its source position.
struct Identity;

impl Matcher for Identity {
    fn predict(
        &self,
        _: &ImageView<'_>,
        _: &ImageView<'_>,
        pts: &KeypointSet,
    ) -> crate::Result<KeypointSet> {
        Ok(pts.clone())
    }
}

fn inference_cfg(mode: KbcMode, threshold: f64) -> InferenceConfig {
    InferenceConfig {
        mode,
        threshold,
        kbc: KbcConfig::default(),
    }
}

fn gates_off_single_pass() -> Outcome {
    let img = Tensor::<f32>::full(&[3, 256, 256], 0.5)?;
    let pts = KeypointSet::from_points(vec![[100.0, 100.0], [104.0, 108.0]]);
    let pair = PairInput {
        src_id: "a",
        src: &img,
        trg_id: "b",
        trg: &img,
        src_points: &pts,
    };
    for (mode, threshold) in [(KbcMode::Off, 0.8), (KbcMode::Both, 0.0)] {
        let out = run_inference_with(&Identity, &pair, &inference_cfg(mode, threshold))?;
        ensure!(
            out.passes == 1 && out.predictions == pts,
            "{mode} at {threshold} ran KBC"
        );
    }
    Ok(())
}

fn source_gate_composition() -> Outcome {
    let img = Tensor::<f32>::full(&[3, 256, 256], 0.5)?;
    let pts = KeypointSet::from_points(vec![[100.0, 100.0], [104.0, 108.0], [120.0, 96.0]]);
    let pair = PairInput {
        src_id: "a",
        src: &img,
        trg_id: "b",
        trg: &img,
        src_points: &pts,
    };
    let pre = kbc_preprocess(&img, &pts, 256, 256, &KbcConfig::default())?;
    let out = run_inference_with(&Identity, &pair, &inference_cfg(KbcMode::Source, 0.8))?;
    ensure!(out.src_transform == pre.transform, "transform differs");
    ensure!(
        out.predictions == pre.keypoints,
        "predictions are not the cropped sources"
    );
    let back = out.src_transform.inverse_set(&out.predictions);
    for (a, b) in back.points.iter().zip(&pts.points) {
        ensure!(
            close(a[0], b[0], 1e-6) && close(a[1], b[1], 1e-6),
            "{a:?} vs {b:?}"
        );
    }
    Ok(())
}

// metrics-train

fn gt_flow_single_pair() -> Outcome {
    let ps = KeypointSet::from_points(vec![[23.5, 7.5]]);
    let pt = KeypointSet::from_points(vec![[39.5, 39.5]]);
    let f = build_gt_flow(&ps, &pt, 4, 4, 16.0)?;
    for i in 0..4 {
        for j in 0..4 {
            let cell = i * 4 + j;
            if (i, j) == (0, 1) {
                ensure!(
                    f.mask[cell] && f.at(i, j) == (1.0, 2.0),
                    "cell holds {:?}",
                    f.at(i, j)
                );
            } else {
                ensure!(!f.mask[cell], "cell ({i},{j}) supervised");
            }
        }
    }
    Ok(())
}

fn gt_flow_identity() -> Outcome {
    let p = src_points();
    let f = build_gt_flow(&p, &p, 4, 4, 16.0)?;
    for c in (0..16).filter(|&c| f.mask[c]) {
        ensure!(f.at(c / 4, c % 4) == (0.0, 0.0), "cell {c} nonzero");
    }
    ensure!(f.mask.iter().any(|&m| m), "nothing supervised");
    Ok(())
}

fn flow2(values: Vec<f64>) -> std::result::Result<FlowMap<f64>, Failure> {
    Ok(FlowMap::dense(t(&[2, 1, 2], values)?)?)
}

fn aepe_exact() -> Outcome {
    let g = flow2(vec![1.0, 2.0, 3.0, 4.0])?;
    ensure!(aepe_loss(&g, &g)? == 0.0, "nonzero");
    Ok(())
}

fn aepe_345() -> Outcome {
    let g = flow2(vec![1.0, 2.0, 3.0, 4.0])?;
    let p = flow2(vec![4.0, 5.0, 7.0, 8.0])?;
    let l = aepe_loss(&p, &g)?;
    ensure!(l == 5.0, "{l}");
    Ok(())
}

fn pck_exact() -> Outcome {
    let g = src_points();
    ensure!(pck(&g, &g, 0.1, 50.0, 50.0)?.pck == 1.0, "not 1");
    Ok(())
}

fn pck_hand_case() -> Outcome {
    let g = KeypointSet::from_points(vec![[0.0, 0.0], [50.0, 50.0]]);
    let p = KeypointSet::from_points(vec![[3.0, 4.0], [62.0, 66.0]]);
    let r = pck(&p, &g, 0.1, 100.0, 60.0)?;
    ensure!(r.threshold == 10.0, "threshold {}", r.threshold);
    ensure!(
        r.points[0].distance == 5.0 && r.points[1].distance == 20.0,
        "distances"
    );
    ensure!(r.pck == 0.5, "{}", r.pck);
    Ok(())
}

fn gradient_stationary_at_exact_match() -> Outcome {
    let (corr, w, _) = gradcheck_instance(&GradcheckConfig::default())?;
    let gt = flow_from_correlation(&decoder_forward(&corr, &w)?, 1.0)?;
    let back = decoder_backward(&corr, &w, &gt, 1.0)?;
    ensure!(back.loss == 0.0, "loss {}", back.loss);
    for (name, g) in back.grads.named_params() {
        ensure!(g.data().iter().all(|v| v.abs() <= 1e-8), "{name} nonzero");
    }
    Ok(())
}

fn gradient_scales_with_loss() -> Outcome {
    // An unsupervised batch partner halves the batch-mean loss.
    let (corr, w, gt) = gradcheck_instance(&GradcheckConfig::default())?;
    let single = decoder_backward(&corr, &w, &gt, 1.0)?;
    let [_, c, h, wd, ht, wt] = corr.shape();
    let mut doubled = corr.values().data().to_vec();
    doubled.extend_from_slice(corr.values().data());
    let corr2 = Corr4D::new(Tensor::new(&[2, c, h, wd, ht, wt], doubled)?)?;
    let none = FlowMap::new(Tensor::zeros(&[2, h, wd])?, vec![false; h * wd])?;
    let half = decoder_backward(&corr2, &w, &[gt[0].clone(), none], 1.0)?;
    ensure!(
        close(half.loss, 0.5 * single.loss, 1e-12),
        "loss did not halve"
    );
    for ((name, a), (_, b)) in half
        .grads
        .named_params()
        .iter()
        .zip(single.grads.named_params())
    {
        ensure!(
            a.max_abs_diff(&b.scale(0.5)) < 1e-12,
            "{name} did not halve"
        );
    }
    Ok(())
}

fn tiny_train_set() -> std::result::Result<crate::train::TrainSet, Failure> {
    Ok(shift_training_set(&ShiftSetConfig {
        size: 64,
        pairs: 2,
        base_channels: 4,
        ..ShiftSetConfig::default()
    })?)
}

fn zero_lr_keeps_weights() -> Outcome {
    let set = tiny_train_set()?;
    let w0 = DecoderWeights::seeded(2)?;
    let out = train_toy(
        &set,
        &w0,
        &TrainConfig {
            steps: 3,
            lr: 0.0,
            temperature: 0.05,
        },
    )?;
    ensure!(out.weights == w0, "weights moved");
    ensure!(
        out.trace.iter().all(|&l| l == out.trace[0]),
        "trace not flat"
    );
    Ok(())
}

fn more_steps_never_worse() -> Outcome {
    let set = tiny_train_set()?;
    let w0 = DecoderWeights::seeded(2)?;
    let run = |steps| {
        train_toy(
            &set,
            &w0,
            &TrainConfig {
                steps,
                lr: 0.05,
                temperature: 0.05,
            },
        )
    };
    let (a, b) = (run(4)?, run(8)?);
    let (ba, bb) = (a.best_so_far(), b.best_so_far());
    ensure!(
        bb.last() <= ba.last(),
        "best after 8 steps {:?} above best after 4 {:?}",
        bb.last(),
        ba.last()
    );
    Ok(())
}

// io-cli

fn tensorfile_round_trip() -> Outcome {
    let x = ramp(&[2, 3, 1, 4])?;
    match decode(&encode(&x))? {
        AnyTensor::F64(y) => ensure!(
            y.data()
                .iter()
                .zip(x.data())
                .all(|(a, b)| a.to_bits() == b.to_bits()),
            "bits differ"
        ),
        AnyTensor::F32(_) => return Err(Failure("decoded with the wrong dtype".into())),
    }
    Ok(())
}

fn tensorfile_bad_magic() -> Outcome {
    let mut bytes = encode(&ramp(&[3])?);
    bytes[0] = b'X';
    ensure!(
        matches!(decode(&bytes), Err(FormatError::BadMagic(_))),
        "corruption not detected"
    );
    Ok(())
}

fn extractor_deterministic() -> Outcome {
    let img: Tensor<f32> = ramp(&[3, 64, 64])?.cast();
    ensure!(
        toy_extract(&img, 4, 11)? == toy_extract(&img, 4, 11)?,
        "two runs differ"
    );
    Ok(())
}

fn extractor_shapes() -> Outcome {
    let p = toy_extract(&Tensor::<f32>::full(&[3, 256, 256], 0.3)?, 16, 0)?;
    ensure!(
        p.f1.shape() == [1024, 16] && p.f2.shape() == [256, 32] && p.f3.shape() == [64, 64],
        "{:?} {:?} {:?}",
        p.f1.shape(),
        p.f2.shape(),
        p.f3.shape()
    );
    Ok(())
}

fn annotation_for_eval() -> PairAnnotation {
    PairAnnotation {
        pair_id: "p0".into(),
        src_id: "s".into(),
        trg_id: "t".into(),
        src_size: [64, 64],
        trg_size: [64, 64],
        category: "toy".into(),
        src_keypoints: vec![[10.0, 10.0], [30.0, 40.0]],
        trg_keypoints: vec![[12.0, 9.0], [33.0, 41.0]],
        src_valid: None,
        trg_valid: None,
        src_bbox: None,
        trg_bbox: None,
    }
}

fn evaluate_exact_predictions() -> Outcome {
    let a = annotation_for_eval();
    let p = PredictionRecord {
        pair_id: a.pair_id.clone(),
        mode: KbcMode::Off,
        keypoints: a.trg_keypoints.clone(),
        valid: vec![true; 2],
        src_transform: KbcTransform::identity(),
        trg_transform: KbcTransform::identity(),
    };
    let (lines, footer) = evaluate_predictions(&[a], &[p], &[0.05, 0.1, 0.15])?;
    ensure!(lines[0].scores.iter().all(|s| s.pck == 1.0), "pair below 1");
    ensure!(footer.mean.iter().all(|s| s.pck == 1.0), "mean below 1");
    Ok(())
}

fn inference_output_deterministic() -> Outcome {
    let img: Tensor<f32> = ramp(&[3, 64, 64])?.map(|v| v + 0.4).cast();
    let ex = crate::extract::ToyExtractor::<f32>::new(4, 0)?;
    let model = crate::pipeline::Model::untrained(4, 1, 0.5, 0.05)?;
    let pts = KeypointSet::from_points(vec![[20.0, 20.0], [40.0, 30.0]]);
    let pair = PairInput {
        src_id: "a",
        src: &img,
        trg_id: "b",
        trg: &img,
        src_points: &pts,
    };
    let render = || -> std::result::Result<Vec<u8>, Failure> {
        let out =
            crate::pipeline::run_inference(&ex, &model, &pair, &inference_cfg(KbcMode::Off, 0.8))?;
        let rec = PredictionRecord {
            pair_id: "p".into(),
            mode: KbcMode::Off,
            keypoints: out.crop_predictions.points,
            valid: out.crop_predictions.valid,
            src_transform: out.src_transform,
            trg_transform: out.trg_transform,
        };
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &[rec])?;
        Ok(buf)
    };
    ensure!(render()? == render()?, "prediction bytes differ");
    Ok(())
}

macro_rules! checks {
    ($($f:ident),* $(,)?) => {
        vec![$(Check { name: stringify!($f), run: $f }),*]
    };
}

/// Every example check, in module order.
pub fn all_checks() -> Vec<Check> {
    checks![
        conv2d_identity_kernel,
        conv2d_zero_padding_sums,
        resize_identity,
        resize_center_average,
        softmax_symmetric,
        softmax_closed_form,
        softmax_large_inputs,
        group_norm_constant_input,
        group_norm_affine_only,
        linear_identity,
        linear_bias_only,
        channel_align_identity_embedding,
        channel_align_zero_weights,
        attention_zero_weights_pass_query,
        attention_single_key_weight_one,
        self_attention_zero_weights,
        self_attention_single_token,
        alignment_constant_f1,
        alignment_broadcasts_single_f3,
        csfa_zero_weights_collapse,
        csfa_output_structure,
        cosine_self_similarity,
        cosine_orthogonal,
        corr_identical_sets_diagonal,
        corr_shape,
        dense_delta_identity,
        dense_all_ones_interior,
        center_pivot_zero,
        center_pivot_one_sided_identity,
        decoder_zero_weights,
        decoder_shape,
        one_hot_flow,
        uniform_flow_targets_centroid,
        zero_flow_keeps_points,
        constant_flow_offsets_points,
        bbox_two_points,
        bbox_single_point,
        min_distance_345,
        min_distance_duplicates,
        small_object_gate_fires,
        large_object_gate_quiet,
        gate_is_strict,
        crop_center_offset,
        crop_clamps_at_corner,
        scale_reaches_separation,
        scale_respects_margin,
        kbc_direct_branch,
        kbc_resize_branch,
        gates_off_single_pass,
        source_gate_composition,
        gt_flow_single_pair,
        gt_flow_identity,
        aepe_exact,
        aepe_345,
        pck_exact,
        pck_hand_case,
        gradient_stationary_at_exact_match,
        gradient_scales_with_loss,
        zero_lr_keeps_weights,
        more_steps_never_worse,
        tensorfile_round_trip,
        tensorfile_bad_magic,
        extractor_deterministic,
        extractor_shapes,
        evaluate_exact_predictions,
        inference_output_deterministic,
    ]
}

/// Runs every check; a panic inside a check counts as a failure.
pub fn run_selftest() -> Vec<CheckResult> {
    all_checks()
        .iter()
        .map(|c| {
            std::panic::catch_unwind(|| c.run()).unwrap_or_else(|_| CheckResult {
                name: c.name,
                passed: false,
                detail: Some("panicked".into()),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_check_passes() {
        let results = run_selftest();
        let failed: Vec<_> = results.iter().filter(|r| !r.passed).collect();
        assert!(failed.is_empty(), "{failed:#?}");
    }

    #[test]
    fn names_are_unique() {
        let mut names: Vec<_> = all_checks().iter().map(|c| c.name).collect();
        let n = names.len();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), n);
    }
}
