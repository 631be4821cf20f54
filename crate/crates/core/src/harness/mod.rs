//! Training, evaluation, ablation and rendering.

pub mod ablate;
pub mod checkpoint;
pub mod evaluate;
pub mod loss;
pub mod optim;
pub mod render;
pub mod train;

pub use ablate::{ablate, AblationGrid, AblationRow};
pub use checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint};
pub use evaluate::{evaluate, predict_labels, thread_count, EvaluationReport};
pub use loss::{loss, loss_and_grad, LossWeights};
pub use optim::Adam;
pub use render::{overlay, plot_trajectories};
pub use train::{
    train, DataSource, EpochRecord, PhantomSource, TrainConfig, TrainOutcome, TrajectoryLog, TrajectoryRow,
};
