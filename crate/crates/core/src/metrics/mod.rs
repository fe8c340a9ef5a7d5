//! Measurement: inner-loop convergence (FOSC), feature dependence (MIC), density
//! estimates, ROC analysis, the prediction-pair detector, robust accuracy and
//! prediction correlations.

mod detector;
mod eval;
mod fosc;
mod kde;
mod mic;
mod roc;
mod stats;

pub use detector::{evaluate_detector, train_detector, DetectionReport, DetectionScore, Detector, DetectorConfig, DetectorInput};
pub use eval::{accuracy, attacked_logits, prediction_correlations, predictor_logits, robust_accuracy, Correlations};
pub use fosc::{fosc, fosc_by_steps};
pub use kde::{kde, trapezoid, Kde};
pub use mic::{mic, mic_features, MIC_MIN_SAMPLES};
pub use roc::{roc, RocCurve, RocPoint};
pub use stats::{cosine, mann_whitney_greater, median, MannWhitney};
