//! Black-box detection of classifier errors and novel inputs from how stable
//! a classifier's scores stay under natural image transformations.
//!
//! The pipeline: [`imageops`] renders each input under a fixed set of
//! transforms, a [`blackbox`] classifier scores every view, [`score_io`]
//! stores the scores, [`representation`] turns them into jointly sorted
//! feature vectors, and a [`detector`] learns to flag errors. [`divergence`]
//! offers single-transform threshold detectors, [`metrics`] evaluates them and
//! [`novelty`] runs the out-of-domain and held-out-class experiments.

pub mod blackbox;
pub mod detector;
pub mod divergence;
pub mod evaluation;
pub mod imageops;
pub mod metrics;
pub mod novelty;
pub mod representation;
pub mod score_io;

pub use blackbox::{BlackBoxClassifier, BlackBoxError, ErrorLabelRule, LabeledImage};
pub use detector::{DetectorConfig, DetectorError, DetectorModel, LabeledFeatures};
pub use imageops::{AugmentationConfig, ImageError, ImageTensor, TransformId};
pub use score_io::{ScoreIoError, ScoreTable, SplitManifest};

/// Any error raised by the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    BlackBox(#[from] BlackBoxError),
    #[error(transparent)]
    Scores(#[from] ScoreIoError),
    #[error(transparent)]
    Representation(#[from] representation::RepresentationError),
    #[error(transparent)]
    Divergence(#[from] divergence::DivergenceError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Metrics(#[from] metrics::MetricsError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
