use thiserror::Error;

use crate::tensorfile::FormatError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch on axis `{axis}`: expected {expected}, found {found}")]
    Shape {
        op: &'static str,
        axis: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("{op}: expected rank {expected}, found rank {found}")]
    Rank {
        op: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("keypoint set has no valid points")]
    EmptyKeypoints,

    #[error("keypoint count mismatch: {left} vs {right}")]
    KeypointCount { left: usize, right: usize },

    #[error("crop window {crop_w}x{crop_h} does not fit in image {img_w}x{img_h}")]
    CropTooLarge {
        crop_w: usize,
        crop_h: usize,
        img_w: usize,
        img_h: usize,
    },

    #[error("training diverged at step {step}")]
    Diverged { step: usize, trace: Vec<f64> },

    #[error("pipeline stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable machine-readable code for the error kind.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "E_SHAPE",
            Error::Rank { .. } => "E_RANK",
            Error::Config(_) => "E_CONFIG",
            Error::EmptyKeypoints => "E_EMPTY_KEYPOINTS",
            Error::KeypointCount { .. } => "E_KEYPOINT_COUNT",
            Error::CropTooLarge { .. } => "E_CROP",
            Error::Diverged { .. } => "E_DIVERGED",
            Error::Stage { source, .. } => source.code(),
            Error::Parse { .. } => "E_PARSE",
            Error::Format(f) => f.code(),
            Error::Io(_) => "E_IO",
        }
    }

    /// Outermost pipeline stage the error was raised in, if any.
    pub fn stage(&self) -> Option<&'static str> {
        match self {
            Error::Stage { stage, .. } => Some(stage),
            _ => None,
        }
    }

    pub(crate) fn at_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub(crate) fn check_axis(
    op: &'static str,
    axis: &'static str,
    expected: usize,
    found: usize,
) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::Shape {
            op,
            axis,
            expected,
            found,
        })
    }
}

pub(crate) fn check_rank(op: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::Rank {
            op,
            expected,
            found,
        })
    }
}
