//! The sparse autoencoder: forward pass, loss, analytic gradients, Adam with
//! the unit-norm decoder constraint, and single-SAE training.

mod adam;
mod checkpoint;
mod model;
mod train;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader, CheckpointMeta, Section, CHECKPOINT_FORMAT};
pub use model::{
    normalize_columns, project_columns_to_tangent, topk_support, Activation, Forward, LossParts, SaeGrads, SaeParams,
    JUMPRELU_BANDWIDTH, JUMPRELU_THETA_INIT,
};
pub(crate) use train::train_with_transform;
pub use train::{batch_explained_variance, train_sae, TrainConfig, TrainLog, TrainLogRow};
