//! Training, evaluation, prediction, ablation and gradient-check drivers.

pub mod ablate;
pub mod checkpoint;
pub mod eval;
pub mod gradcheck;
pub mod predict;
pub mod train;

pub use ablate::{ablate, AblationReport, AblationRow};
pub use checkpoint::Checkpoint;
pub use eval::{evaluate, DepthPredictor, ModelPredictor};
pub use gradcheck::{gradcheck_block, parse_op_kind, BlockCheck, ParamCheck, BLOCKS};
pub use predict::{predict_to_dir, PredictOutputs};
pub use train::{stack_batch, TrainLog, Trainer};
