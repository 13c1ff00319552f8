//! Two-pass inference with optional keypoint bounding-box-centered
//! cropping of the source and/or target image.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::correlation::{build_corr4d_with, Normalization};
use crate::csfa::{csfa_forward, CsfaWeights, FeaturePyramid};
use crate::decoder::{decoder_forward, DecoderWeights};
use crate::error::{Error, Result};
use crate::extract::ToyExtractor;
use crate::flow::{flow_from_correlation, keypoints_from_flow};
use crate::kbc::{contains_small_object, kbc_preprocess, KbcConfig, KbcTransform, KeypointSet};
use crate::tensor::Tensor;
use crate::tensorfile::{load_bundle, read_tensor, save_bundle, write_tensor};

/// An image as seen by a feature provider: its dataset id, pixels, and the
/// transform that produced those pixels from the original.
#[derive(Clone, Copy, Debug)]
pub struct ImageView<'a> {
    pub id: &'a str,
    pub image: &'a Tensor<f32>,
    pub transform: &'a KbcTransform,
}

/// Source of backbone features. Implementations must tolerate concurrent
/// calls.
pub trait FeatureProvider: Send + Sync {
    fn features(&self, view: &ImageView<'_>) -> Result<FeaturePyramid<f32>>;
}

impl FeatureProvider for ToyExtractor<f32> {
    fn features(&self, view: &ImageView<'_>) -> Result<FeaturePyramid<f32>> {
        self.extract(view.image)
    }
}

/// Reads pre-extracted pyramids from `<root>/<key>/{f1,f2,f3}.kbct`, where
/// the key combines the image id and the transform digest.
#[derive(Clone, Debug)]
pub struct FeatureCache {
    root: PathBuf,
}

impl FeatureCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn key(id: &str, transform: &KbcTransform) -> String {
        format!("{id}-{}", transform.digest())
    }

    fn dir(&self, id: &str, transform: &KbcTransform) -> Result<PathBuf> {
        if id.is_empty() || id.contains(['/', '\\']) || id.starts_with('.') {
            return Err(Error::Config(format!("invalid image id {id:?}")));
        }
        Ok(self.root.join(Self::key(id, transform)))
    }

    pub fn store(
        &self,
        id: &str,
        transform: &KbcTransform,
        pyr: &FeaturePyramid<f32>,
    ) -> Result<()> {
        let dir = self.dir(id, transform)?;
        std::fs::create_dir_all(&dir)?;
        for (name, t) in [("f1", &pyr.f1), ("f2", &pyr.f2), ("f3", &pyr.f3)] {
            write_tensor(dir.join(format!("{name}.kbct")), t)?;
        }
        Ok(())
    }
}

impl FeatureProvider for FeatureCache {
    fn features(&self, view: &ImageView<'_>) -> Result<FeaturePyramid<f32>> {
        let dir = self.dir(view.id, view.transform)?;
        let load = |name: &str| -> Result<Tensor<f32>> {
            Ok(read_tensor(dir.join(format!("{name}.kbct")))?.exact()?)
        };
        FeaturePyramid::new(
            load("f1")?,
            load("f2")?,
            load("f3")?,
            view.image.dim(1),
            view.image.dim(2),
        )
    }
}

/// Network weights plus readout settings.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub csfa: CsfaWeights<f32>,
    pub decoder: DecoderWeights<f32>,
    pub normalization: Normalization,
    pub temperature: f64,
    pub stride: usize,
}

impl Model {
    pub fn new(csfa: CsfaWeights<f32>, decoder: DecoderWeights<f32>, temperature: f64) -> Self {
        Self {
            csfa,
            decoder,
            normalization: Normalization::PerToken,
            temperature,
            stride: 16,
        }
    }

    /// Seeded CSFA with the hand-set pass-through decoder; the training-free
    /// configuration used with toy features.
    pub fn untrained(
        base_channels: usize,
        seed: u64,
        block_gain: f64,
        temperature: f64,
    ) -> Result<Self> {
        Ok(Self::new(
            CsfaWeights::seeded(base_channels, seed, block_gain)?,
            DecoderWeights::pass_through(3.0)?,
            temperature,
        ))
    }

    pub fn named_params(&self) -> Vec<(String, Tensor<f32>)> {
        let mut out = self.csfa.named_params();
        out.extend(self.decoder.named_params());
        out
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        save_bundle(dir, &self.named_params())
    }

    /// Loads weights written by [`Model::save`]; `f64` entries are rounded.
    pub fn load(dir: impl AsRef<Path>, base_channels: usize, temperature: f64) -> Result<Self> {
        let bundle = load_bundle(dir)?;
        let get = |n: &str| bundle.get(n).map(|t| t.to::<f32>());
        Ok(Self::new(
            CsfaWeights::from_named(base_channels, get)?,
            DecoderWeights::from_named(get)?,
            temperature,
        ))
    }

    /// One network pass from features to predicted target keypoints.
    pub fn predict(
        &self,
        src: &FeaturePyramid<f32>,
        trg: &FeaturePyramid<f32>,
        src_points: &KeypointSet,
    ) -> Result<KeypointSet> {
        let a = csfa_forward(src, &self.csfa).map_err(|e| e.at_stage("csfa"))?;
        let b = csfa_forward(trg, &self.csfa).map_err(|e| e.at_stage("csfa"))?;
        let dims = (a.grid.0, a.grid.1, b.grid.0, b.grid.1);
        let corr = build_corr4d_with(&a, &b, dims, self.normalization)
            .map_err(|e| e.at_stage("correlation"))?;
        let refined = decoder_forward(&corr, &self.decoder).map_err(|e| e.at_stage("decoder"))?;
        let flow =
            flow_from_correlation(&refined, self.temperature).map_err(|e| e.at_stage("flow"))?;
        Ok(keypoints_from_flow(
            &flow[0],
            src_points,
            self.stride as f64,
        ))
    }
}

/// Anything that maps source keypoints to target predictions for a pair of
/// images.
pub trait Matcher: Sync {
    fn predict(
        &self,
        src: &ImageView<'_>,
        trg: &ImageView<'_>,
        src_points: &KeypointSet,
    ) -> Result<KeypointSet>;
}

/// Features from a provider, matching from a model.
pub struct NetworkMatcher<'a> {
    pub provider: &'a dyn FeatureProvider,
    pub model: &'a Model,
}

impl Matcher for NetworkMatcher<'_> {
    fn predict(
        &self,
        src: &ImageView<'_>,
        trg: &ImageView<'_>,
        src_points: &KeypointSet,
    ) -> Result<KeypointSet> {
        let fs = self
            .provider
            .features(src)
            .map_err(|e| e.at_stage("features"))?;
        let ft = self
            .provider
            .features(trg)
            .map_err(|e| e.at_stage("features"))?;
        self.model.predict(&fs, &ft, src_points)
    }
}

/// Which images may be cropped.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum KbcMode {
    #[default]
    #[serde(rename = "off")]
    Off,
    #[serde(rename = "src")]
    Source,
    #[serde(rename = "trg")]
    Target,
    #[serde(rename = "src+trg")]
    Both,
}

impl KbcMode {
    pub const ALL: [KbcMode; 4] = [
        KbcMode::Off,
        KbcMode::Source,
        KbcMode::Target,
        KbcMode::Both,
    ];

    pub fn source(self) -> bool {
        matches!(self, KbcMode::Source | KbcMode::Both)
    }

    pub fn target(self) -> bool {
        matches!(self, KbcMode::Target | KbcMode::Both)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            KbcMode::Off => "off",
            KbcMode::Source => "src",
            KbcMode::Target => "trg",
            KbcMode::Both => "src+trg",
        }
    }
}

impl fmt::Display for KbcMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for KbcMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        KbcMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown KBC mode {s:?}; expected off, src, trg or src+trg"
                ))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InferenceConfig {
    pub mode: KbcMode,
    /// Keypoint box ratio below which an image counts as a small object.
    pub threshold: f64,
    pub kbc: KbcConfig,
}

/// Original-frame predictions plus everything needed to audit them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceOutput {
    /// Predicted target keypoints in original target coordinates.
    pub predictions: KeypointSet,
    /// Predictions in the frame the network saw.
    pub crop_predictions: KeypointSet,
    pub src_transform: KbcTransform,
    pub trg_transform: KbcTransform,
    pub passes: usize,
}

/// Source image and keypoints for one query.
#[derive(Clone, Copy, Debug)]
pub struct PairInput<'a> {
    pub src_id: &'a str,
    pub src: &'a Tensor<f32>,
    pub trg_id: &'a str,
    pub trg: &'a Tensor<f32>,
    pub src_points: &'a KeypointSet,
}

fn extents(img: &Tensor<f32>) -> Result<(usize, usize)> {
    crate::error::check_rank("run_inference.image", 3, img.rank())?;
    Ok((img.dim(2), img.dim(1)))
}

fn gate(points: &KeypointSet, w: usize, h: usize, threshold: f64) -> Result<bool> {
    if points.valid_count() == 0 {
        return Ok(false);
    }
    contains_small_object(points, w as f64, h as f64, threshold)
}

/// Crops the source when its keypoints span a small object, predicts,
/// then crops the target around the predicted keypoints when those span a
/// small object and predicts again. Predictions are mapped back to the
/// original target frame.
pub fn run_inference_with(
    matcher: &dyn Matcher,
    pair: &PairInput<'_>,
    cfg: &InferenceConfig,
) -> Result<InferenceOutput> {
    let (sw, sh) = extents(pair.src)?;
    let (tw, th) = extents(pair.trg)?;
    let identity = KbcTransform::identity();

    let mut src_img = pair.src.clone();
    let mut src_pts = pair.src_points.clone();
    let mut src_t = identity;
    if cfg.mode.source()
        && gate(pair.src_points, sw, sh, cfg.threshold).map_err(|e| e.at_stage("kbc"))?
    {
        let out = kbc_preprocess(pair.src, pair.src_points, sw, sh, &cfg.kbc)
            .map_err(|e| e.at_stage("kbc"))?;
        src_img = out.image;
        src_pts = out.keypoints;
        src_t = out.transform;
    }
    let src_view = ImageView {
        id: pair.src_id,
        image: &src_img,
        transform: &src_t,
    };
    let trg_view = ImageView {
        id: pair.trg_id,
        image: pair.trg,
        transform: &identity,
    };
    let first = matcher.predict(&src_view, &trg_view, &src_pts)?;

    if cfg.mode.target() && gate(&first, tw, th, cfg.threshold).map_err(|e| e.at_stage("kbc"))? {
        let out =
            kbc_preprocess(pair.trg, &first, tw, th, &cfg.kbc).map_err(|e| e.at_stage("kbc"))?;
        let crop_view = ImageView {
            id: pair.trg_id,
            image: &out.image,
            transform: &out.transform,
        };
        let second = matcher.predict(&src_view, &crop_view, &src_pts)?;
        return Ok(InferenceOutput {
            predictions: out.transform.inverse_set(&second),
            crop_predictions: second,
            src_transform: src_t,
            trg_transform: out.transform,
            passes: 2,
        });
    }
    Ok(InferenceOutput {
        predictions: first.clone(),
        crop_predictions: first,
        src_transform: src_t,
        trg_transform: identity,
        passes: 1,
    })
}

pub fn run_inference(
    provider: &dyn FeatureProvider,
    model: &Model,
    pair: &PairInput<'_>,
    cfg: &InferenceConfig,
) -> Result<InferenceOutput> {
    run_inference_with(&NetworkMatcher { provider, model }, pair, cfg)
}
