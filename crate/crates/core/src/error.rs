use alloc::string::String;
use thiserror::Error;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// Two tensors disagree along a named axis.
    #[error("{op}: dimension mismatch on axis `{axis}`: expected {expected}, got {actual}")]
    Dimension {
        op: &'static str,
        axis: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    Shape {
        op: &'static str,
        shape: alloc::vec::Vec<usize>,
        reason: &'static str,
    },
    #[error("non-finite value {value} at flat index {index}")]
    NonFinite { index: usize, value: f32 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0}: empty input")]
    Empty(&'static str),
    #[error("tile set contains no fire tiles")]
    NoFireTiles,
    #[error("only {fire_groups} fire-bearing groups for k = {k} folds; lower k")]
    TooFewFireGroups { fire_groups: usize, k: usize },
    #[error("class {class} absent from training pixels")]
    ClassAbsent { class: u8 },
    #[error("{op} refused: holdout data must not be sampled or augmented")]
    HoldoutViolation { op: &'static str },
    #[error("unknown day `{0}`")]
    UnknownDay(String),
    #[error("mask label {label} at pixel {index} is not one of 0, 1, 2")]
    InvalidLabel { index: usize, label: u8 },
    #[error("validation fold {fold} has no fire pixels; sensitivity undefined")]
    UndefinedSensitivity { fold: usize },
    #[error("fire-rate calibration failed: achieved {achieved:.6}, target {target:.6}")]
    Calibration { achieved: f64, target: f64 },
}
