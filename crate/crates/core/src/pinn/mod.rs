//! Physics-informed training: model-based overlap estimates, fusion, and the
//! training and evaluation loops for all three variants.

pub mod checks;
pub mod eval;
pub mod fusion;
pub mod model_based;
pub mod train;

pub use fusion::{fuse, pinn_loss, select_overlap, FusionRecord, PinnObjective};
pub use model_based::{estimate_overlap, generate_with_estimates, overlap_plan, run_model_based_for_dataset, BranchFilter, ModelBasedEstimates, OverlapPlan};
pub use train::{build_model, predict_samples, train, train_with_observer, EpochRecord, FusionContext, StepInfo, TrainConfig, TrainHistory};
pub use eval::{evaluate, median, ChannelMse, ComparisonRow, ComparisonTable, EvalReport};
pub use checks::{gradient_suite, SuiteCase};
