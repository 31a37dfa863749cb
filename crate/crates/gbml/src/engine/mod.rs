//! Meta-learning engine: inner-loop adaptation, meta-gradients, the
//! trajectory penalty with its reference/target construction, the outer
//! optimization driver, label-free pretraining, evaluation, and checkpoints.

pub mod checkpoint;
pub mod eval;
pub mod inner;
pub mod meta;
pub mod optimizer;
pub mod outer;
pub mod pretrain;
pub mod shot;

pub use eval::{episode_accuracy, evaluate, evaluate_on_episodes, EvalReport};
pub use inner::{
    apply_update_values, inner_adapt, inner_adapt_tracked, support_loss, support_loss_value,
    InnerConfig, Trajectory, ValueUpdate, GRADIENT_NORM_BOUND,
};
pub use meta::{meta_grad_fomaml, meta_grad_maml};
pub use optimizer::{AdamConfig, AdamState};
pub use outer::{
    outer_step, run_task, BaseAlgorithm, BestSnapshot, MetaState, OuterConfig, OuterStepReport,
    TaskOutcome,
};
pub use pretrain::{pretrain_shot_p, PretrainConfig, PretrainEpochReport, ProjectorInput};
pub use shot::{
    build_reference_and_target, shot_loss, RefTargetPair, ShotConfig, ShotMetric, ShotVariant,
};
