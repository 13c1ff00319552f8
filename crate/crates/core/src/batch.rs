//! Inference over many annotated pairs.

use rayon::prelude::*;

use crate::annotation::{PairAnnotation, PredictionRecord};
use crate::error::{Error, Result};
use crate::pipeline::{run_inference, FeatureProvider, InferenceConfig, Model, PairInput};
use crate::tensor::Tensor;

fn check_extent(id: &str, img: &Tensor<f32>, size: [usize; 2]) -> Result<()> {
    if img.rank() != 3 || img.dim(0) != 3 || img.dim(2) != size[0] || img.dim(1) != size[1] {
        return Err(Error::Config(format!(
            "image {id} has shape {:?}, annotation says 3x{}x{}",
            img.shape(),
            size[1],
            size[0]
        )));
    }
    Ok(())
}

/// Predicts every pair in parallel. Records come back sorted by pair id,
/// and when several pairs fail the error of the first one in that order is
/// returned, so the result does not depend on scheduling.
pub fn predict_pairs<F>(
    provider: &dyn FeatureProvider,
    model: &Model,
    pairs: &[PairAnnotation],
    load_image: F,
    cfg: &InferenceConfig,
) -> Result<Vec<PredictionRecord>>
where
    F: Fn(&str) -> Result<Tensor<f32>> + Sync,
{
    let mut order: Vec<&PairAnnotation> = pairs.iter().collect();
    order.sort_by(|a, b| a.pair_id.cmp(&b.pair_id));
    let results: Vec<Result<PredictionRecord>> = order
        .par_iter()
        .map(|ann| {
            let src = load_image(&ann.src_id)?;
            let trg = load_image(&ann.trg_id)?;
            check_extent(&ann.src_id, &src, ann.src_size)?;
            check_extent(&ann.trg_id, &trg, ann.trg_size)?;
            let src_points = ann.src_set();
            let pair = PairInput {
                src_id: &ann.src_id,
                src: &src,
                trg_id: &ann.trg_id,
                trg: &trg,
                src_points: &src_points,
            };
            let out = run_inference(provider, model, &pair, cfg)?;
            Ok(PredictionRecord {
                pair_id: ann.pair_id.clone(),
                mode: cfg.mode,
                keypoints: out.crop_predictions.points,
                valid: out.crop_predictions.valid,
                src_transform: out.src_transform,
                trg_transform: out.trg_transform,
            })
        })
        .collect();
    results.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotation::evaluate_predictions;
    use crate::extract::ToyExtractor;
    use crate::kbc::KbcConfig;
    use crate::pipeline::KbcMode;
    use crate::synthetic::{small_object_pair, SmallObjectConfig};
    use std::collections::HashMap;

    #[test]
    fn records_are_sorted_and_back_project() {
        let cfg = SmallObjectConfig::default();
        let pairs: Vec<_> = (0..3)
            .rev()
            .map(|i| small_object_pair(&cfg, i).unwrap())
            .collect();
        let images: HashMap<String, Tensor<f32>> = pairs
            .iter()
            .flat_map(|p| {
                [
                    (p.src_id.clone(), p.src_image.clone()),
                    (p.trg_id.clone(), p.trg_image.clone()),
                ]
            })
            .collect();
        let anns: Vec<_> = pairs.iter().map(|p| p.annotation()).collect();
        let ex = ToyExtractor::<f32>::new(4, 0).unwrap();
        let model = Model::untrained(4, 1, 0.5, 0.05).unwrap();
        let load = |id: &str| {
            images
                .get(id)
                .cloned()
                .ok_or_else(|| Error::Config(format!("no image {id}")))
        };
        let icfg = InferenceConfig {
            mode: KbcMode::Both,
            threshold: 0.8,
            kbc: KbcConfig::default(),
        };
        let recs = predict_pairs(&ex, &model, &anns, load, &icfg).unwrap();
        let ids: Vec<_> = recs.iter().map(|r| r.pair_id.as_str()).collect();
        assert_eq!(ids, ["syn0000", "syn0001", "syn0002"]);
        assert!(recs.iter().all(|r| r.trg_transform.applied));
        let (lines, _) = evaluate_predictions(&anns, &recs, &[0.1]).unwrap();
        assert_eq!(lines.len(), 3);

        let missing = |_: &str| -> Result<Tensor<f32>> { Err(Error::Config("gone".into())) };
        assert!(predict_pairs(&ex, &model, &anns, missing, &icfg).is_err());
    }
}
