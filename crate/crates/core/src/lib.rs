//! Anomaly-aware multiple instance learning.
//!
//! Bags of instance feature vectors are classified by pooling instance
//! embeddings with weights that mix a learned attention score and a
//! Mahalanobis anomaly score measured against a Gaussian mixture fitted on
//! control (negative) instances. Training anneals from a single-instance
//! classifier loss to the bag-level loss.

pub mod anomaly;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod gmm;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod report;
pub mod tensor;
pub mod training;

pub use anomaly::{AnomalyGradient, AnomalyReference};
pub use data::{Bag, Dataset, GeneratorConfig, Instance, Preset, CONTROL_LABEL};
pub use error::{Error, ErrorClass, Result};
pub use gmm::{em_fit, EmConfig, GmmParams};
pub use metrics::{EvalReport, MeanStd, ScoreHistogram};
pub use model::{Checkpoint, ModelConfig, ModelParams, Variant};
pub use report::{holdout, HoldoutReport, ScoreReport};
pub use tensor::Tensor2;
pub use training::{cross_validate, cross_validate_many, train, CvReport, EpochRecord, TrainConfig};
