use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use kbcnet::conv4d::{center_pivot_conv4d, CenterPivotKernel};
use kbcnet::correlation::{build_corr4d, cosine_correlation, Corr4D};
use kbcnet::csfa::{cross_attention_block, csfa_forward, AttentionWeights, CsfaWeights};
use kbcnet::decoder::{decoder_forward, DecoderWeights};
use kbcnet::extract::{toy_extract, ToyExtractor};
use kbcnet::flow::FlowMap;
use kbcnet::kbc::{
    get_bounding_box, kbc_preprocess, min_pairwise_distance, resize_for_kbc, KbcBranch, KbcConfig,
    KeypointSet,
};
use kbcnet::metrics::aepe_loss;
use kbcnet::pipeline::{run_inference, InferenceConfig, KbcMode, Model, PairInput};
use kbcnet::tensor::{bilinear_resize, conv2d_same, group_norm};
use kbcnet::Tensor;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::uniform(shape, -1.0, 1.0, &mut rng(seed)).unwrap()
}

fn points_strategy() -> impl Strategy<Value = Vec<[f64; 2]>> {
    (
        0.0f64..255.0,
        0.0f64..255.0,
        1.0f64..120.0,
        proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 2..10),
    )
        .prop_map(|(cx, cy, spread, offsets)| {
            offsets
                .into_iter()
                .map(|(u, v)| {
                    [
                        (cx + spread * u).clamp(0.0, 255.0),
                        (cy + spread * v).clamp(0.0, 255.0),
                    ]
                })
                .collect()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv2d_same_is_linear(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let x = uniform(&[3, 7, 6], seed);
        let y = uniform(&[3, 7, 6], seed ^ 1);
        let k = uniform(&[2, 3, 3, 3], seed ^ 2);
        let zero = Tensor::zeros(&[2]).unwrap();
        let mix = x.zip_map(&y, |p, q| a * p + b * q).unwrap();
        let lhs = conv2d_same(&mix, &k, &zero).unwrap();
        let cx = conv2d_same(&x, &k, &zero).unwrap();
        let cy = conv2d_same(&y, &k, &zero).unwrap();
        let rhs = cx.zip_map(&cy, |p, q| a * p + b * q).unwrap();
        prop_assert!(lhs.max_rel_diff(&rhs) < 1e-5);
    }

    #[test]
    fn resizing_a_constant_field_keeps_it_constant(
        v in -2.0f64..2.0, h in 1usize..12, w in 1usize..12, oh in 1usize..30, ow in 1usize..30,
    ) {
        let out = bilinear_resize(&Tensor::full(&[2, h, w], v).unwrap(), oh, ow).unwrap();
        prop_assert!(out.data().iter().all(|&x| (x - v).abs() < 1e-12));
    }

    #[test]
    fn group_norm_ignores_per_group_offsets(seed in any::<u64>(), shift in proptest::collection::vec(-20.0f64..20.0, 4)) {
        let x = uniform(&[8, 5, 5], seed);
        let gamma = uniform(&[8], seed ^ 3);
        let beta = uniform(&[8], seed ^ 4);
        let plane = 25;
        let mut shifted = x.clone();
        for (i, v) in shifted.data_mut().iter_mut().enumerate() {
            *v += shift[(i / plane) / 2];
        }
        let a = group_norm(&x, 4, &gamma, &beta, 1e-5).unwrap();
        let b = group_norm(&shifted, 4, &gamma, &beta, 1e-5).unwrap();
        prop_assert!(a.max_abs_diff(&b) < 1e-4);
    }

    #[test]
    fn zero_attention_is_identity_on_the_query(seed in any::<u64>(), nq in 1usize..9, nk in 1usize..9) {
        let q = uniform(&[nq, 6], seed);
        let kv = uniform(&[nk, 6], seed ^ 5);
        let out = cross_attention_block(&q, &kv, &AttentionWeights::zeros(6).unwrap()).unwrap();
        prop_assert_eq!(out, q);
    }

    #[test]
    fn attention_treats_keys_as_a_set(seed in any::<u64>(), nk in 2usize..9) {
        let q = uniform(&[5, 8], seed);
        let kv = uniform(&[nk, 8], seed ^ 6);
        let w = AttentionWeights::seeded(8, 1.0, &mut rng(seed ^ 7)).unwrap();
        let mut rows: Vec<&[f64]> = kv.data().chunks(8).collect();
        rows.rotate_left(1);
        rows.swap(0, nk - 1);
        let permuted = Tensor::new(&[nk, 8], rows.concat()).unwrap();
        let a = cross_attention_block(&q, &kv, &w).unwrap();
        let b = cross_attention_block(&q, &permuted, &w).unwrap();
        prop_assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn csfa_shapes_depend_only_on_sizes(seed in any::<u64>(), rows in 2usize..4, cols in 2usize..4) {
        let img = Tensor::<f64>::uniform(&[3, 32 * rows, 32 * cols], 0.0, 1.0, &mut rng(seed)).unwrap();
        let flat = Tensor::<f64>::full(&[3, 32 * rows, 32 * cols], 0.3).unwrap();
        let w = CsfaWeights::seeded(4, seed, 0.5).unwrap();
        let a = csfa_forward(&toy_extract(&img, 4, 1).unwrap(), &w).unwrap();
        let b = csfa_forward(&toy_extract(&flat, 4, 1).unwrap(), &w).unwrap();
        for (fa, fb) in a.features.iter().zip(&b.features) {
            prop_assert_eq!(fa.shape(), fb.shape());
            prop_assert_eq!(fa.shape(), &[4 * rows * cols, 8][..]);
        }
    }

    #[test]
    fn correlation_transpose_swaps_images(seed in any::<u64>()) {
        let w = CsfaWeights::seeded(4, seed, 0.5).unwrap();
        let img = |s| Tensor::<f64>::uniform(&[3, 64, 96], 0.0, 1.0, &mut rng(s)).unwrap();
        let a = csfa_forward(&toy_extract(&img(seed), 4, 2).unwrap(), &w).unwrap();
        let b = csfa_forward(&toy_extract(&img(seed ^ 8), 4, 2).unwrap(), &w).unwrap();
        let ab = build_corr4d(&a, &b, (4, 6, 4, 6)).unwrap();
        let ba = build_corr4d(&b, &a, (4, 6, 4, 6)).unwrap();
        prop_assert_eq!(ab.transpose_source_target(), ba);
    }

    #[test]
    fn cosine_rows_ignore_token_scale(seed in any::<u64>(), token in 0usize..6, factor in 1e-3f64..1e3) {
        let src = uniform(&[6, 10], seed);
        let trg = uniform(&[9, 10], seed ^ 9);
        let mut scaled = src.clone();
        scaled.data_mut()[token * 10..(token + 1) * 10].iter_mut().for_each(|v| *v *= factor);
        let a = cosine_correlation(&src, &trg).unwrap();
        let b = cosine_correlation(&scaled, &trg).unwrap();
        prop_assert!(a.max_abs_diff(&b) < 1e-5);
        prop_assert!(a.data().iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn center_pivot_halves_add_up(seed in any::<u64>()) {
        let m = Corr4D::new(uniform(&[1, 2, 4, 3, 5, 4], seed)).unwrap();
        let ks = uniform(&[3, 2, 3, 3], seed ^ 10);
        let kt = uniform(&[3, 2, 3, 3], seed ^ 11);
        let zk = Tensor::zeros(&[3, 2, 3, 3]).unwrap();
        let zb = Tensor::zeros(&[3]).unwrap();
        let conv = |a: &Tensor<f64>, b: &Tensor<f64>| {
            center_pivot_conv4d(&m, &CenterPivotKernel::new(a.clone(), b.clone(), zb.clone()).unwrap())
                .unwrap()
                .into_values()
        };
        let sum = conv(&ks, &zk).zip_map(&conv(&zk, &kt), |p, q| p + q).unwrap();
        prop_assert!(sum.max_abs_diff(&conv(&ks, &kt)) < 1e-12);
    }

    #[test]
    fn decoder_output_ignores_thread_count(seed in any::<u64>()) {
        let m = Corr4D::new(uniform(&[2, 6, 3, 3, 3, 3], seed).cast::<f32>()).unwrap();
        let w = DecoderWeights::seeded(seed).unwrap();
        let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let many = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = single.install(|| decoder_forward(&m, &w).unwrap());
        let b = many.install(|| decoder_forward(&m, &w).unwrap());
        prop_assert_eq!(a, b);
    }

    #[test]
    fn aepe_is_zero_only_for_agreeing_flows(seed in any::<u64>(), bump in 1e-6f64..5.0, cell in 0usize..12) {
        let gt = FlowMap::dense(uniform(&[2, 3, 4], seed)).unwrap();
        prop_assert_eq!(aepe_loss(&gt, &gt).unwrap(), 0.0);
        let mut v = uniform(&[2, 3, 4], seed);
        v.data_mut()[cell] += bump;
        let off = aepe_loss(&FlowMap::dense(v).unwrap(), &gt).unwrap();
        prop_assert!(off > 0.0);
    }

    #[test]
    fn kbc_keeps_keypoints_inside_and_invertible(pts in points_strategy(), out in 64usize..=256) {
        let p = KeypointSet::from_points(pts);
        // The crop never shrinks the image and offsets round to whole pixels,
        // so containment needs a keypoint box at most `out - 2` pixels wide.
        let bbox = get_bounding_box(&p).unwrap();
        let limit = out as f64 - 2.0;
        prop_assume!(bbox.width() <= limit && bbox.height() <= limit);
        let window = -0.5..=out as f64 - 0.5;
        let img = Tensor::<f32>::zeros(&[1, 256, 256]).unwrap();
        let o = kbc_preprocess(&img, &p, out, out, &KbcConfig::default()).unwrap();
        prop_assert_eq!(o.image.shape(), &[1, out, out][..]);
        let back = o.transform.inverse_set(&o.keypoints);
        for (q, (b, a)) in o.keypoints.points.iter().zip(back.points.iter().zip(&p.points)) {
            prop_assert!(window.contains(&q[0]) && window.contains(&q[1]), "{q:?}");
            prop_assert!((b[0] - a[0]).hypot(b[1] - a[1]) < 1e-6);
        }
        if o.branch == KbcBranch::ResizeThenCrop {
            prop_assert!(o.transform.scale >= 1.0);
        }
    }

    #[test]
    fn enlargement_scales_the_minimum_distance(pts in points_strategy()) {
        let p = KeypointSet::from_points(pts);
        let d = min_pairwise_distance(&p);
        prop_assume!(d > 0.5);
        let img = Tensor::<f32>::zeros(&[1, 256, 256]).unwrap();
        let (_, scaled, s) = resize_for_kbc(&img, &p, d, 256, 256, &KbcConfig::default()).unwrap();
        prop_assert!(s >= 1.0);
        prop_assert!((min_pairwise_distance(&scaled) - s * d).abs() < 1e-9 * s * d.max(1.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn zero_threshold_reduces_to_the_baseline(seed in any::<u64>(), mode in 0usize..4) {
        let img = |s| Tensor::<f32>::uniform(&[3, 64, 64], 0.0, 1.0, &mut rng(s)).unwrap();
        let (src, trg) = (img(seed), img(seed ^ 12));
        let pts = KeypointSet::from_points(vec![[20.0, 20.0], [24.0, 22.0], [30.0, 31.0]]);
        let ex = ToyExtractor::<f32>::new(4, seed).unwrap();
        let model = Model::untrained(4, seed ^ 13, 0.5, 0.05).unwrap();
        let pair = PairInput { src_id: "s", src: &src, trg_id: "t", trg: &trg, src_points: &pts };
        let run = |mode, threshold| {
            run_inference(&ex, &model, &pair, &InferenceConfig { mode, threshold, kbc: KbcConfig::default() }).unwrap()
        };
        let gated = run(KbcMode::ALL[mode], 0.0);
        let baseline = run(KbcMode::Off, 0.8);
        prop_assert!(!gated.src_transform.applied && !gated.trg_transform.applied);
        prop_assert_eq!(gated.predictions, baseline.predictions);
    }
}
