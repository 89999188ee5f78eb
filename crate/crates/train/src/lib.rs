//! Training protocol: study-level splits, branch-routed segmentation
//! training, femur map regression and best-checkpoint selection.

pub mod config;
pub mod data;
pub mod error;
pub mod split;
pub mod trainer;

pub use config::TrainConfig;
pub use data::{femur_samples, model_input, seg_samples, FemurSample, SegSample, StudySource};
pub use error::{Result, TrainError};
pub use split::{make_split, SplitPlan};
pub use trainer::{
    finetune_seg, pretrain_seg, read_log, score_femur, score_seg, train_femur, LogRecord, RunOptions, SegScores,
    TrainOutcome,
};
