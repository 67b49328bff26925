//! Three-stage training: optimizer, schedules, stage runner, checkpoints.

mod checkpoint;
mod dataset;
mod eval;
mod metrics;
mod optim;
mod pipeline;
mod schedule;
mod stage;
mod trainer;

pub use checkpoint::{
    optim_record, param_records, Checkpoint, CheckpointMeta, MaskRecord, OptimRecord, ParamRecord,
    CKPT_MAGIC,
};
pub use dataset::{load_scene, Dataset};
pub use eval::{argmax_rows, EvalReport};
pub use metrics::{metrics_csv, MetricsRow, METRICS_MAGIC};
pub use optim::{clip_grad_norm, AdamW, AdamWConfig, ADAM_EPS};
pub use pipeline::{
    checkpoint_of, checkpoint_scene, eval_checkpoint, final_eval, prepare, restore_trainer, run, CheckpointEval, RunReport,
    StageSummary, REPORT_FORMAT,
};
pub use schedule::lr_schedule;
pub use stage::{stage_configs, Recipe, ScheduleKind, StageConfig};
pub use trainer::{
    evaluate, predict, stream, CsFrontEnd, EvalMask, Inputs, Plan, StageState, StepOutcome, Stream,
    Trainer,
};
