//! Curvature matching for group-fair tabular classifiers.
//!
//! A small reverse-mode autodiff engine drives an MLP with a utility head and
//! an adversary head. Training adds a penalty that aligns the distributions of
//! per-sample loss curvature across the two sensitive groups.

pub mod autodiff;
pub mod curvature;
pub mod data;
pub mod fairness;
pub mod harness;
pub mod mmd;
pub mod nn;
pub mod seed;
pub mod train;
pub mod verify;

pub use autodiff::{AutodiffError, ParamVector, Segment, Tape, Tensor, Var};
pub use curvature::{CurvatureError, CurvatureSample};
pub use data::{
    DataError, EncodedDataset, FeatureSchema, Preprocessor, RawTable, ShiftKind, ShiftSpec, SynthData, SynthSpec,
};
pub use fairness::{FairnessError, SetMetrics};
pub use harness::{DataSource, EvalSetSpec, ExperimentSpec, HarnessError, MetricsReport, SweepGrid, SweepTable};
pub use mmd::{KernelSpec, MmdError};
pub use nn::{Activation, FairModel, MlpSpec, NnError};
pub use train::{EvalMetrics, LossBreakdown, Method, ModelConfig, TrainConfig, TrainError};
pub use verify::SuiteReport;
