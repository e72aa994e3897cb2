//! Adversarial training loop, optimizer, schedule and embedder pre-training.

pub mod adam;
pub mod config;
pub mod pretrain;
pub mod run;
pub mod step;

pub use adam::Adam;
pub use config::{default_decay_epochs, lr_at, Ablation, Mode, TrainConfig, ABLATION_NAMES};
pub use pretrain::{
    load_embedder, pretrain_embedder, save_embedder, EmbedderReport, EmbedderTrainConfig,
    EMBEDDER_FIRST_IDENTITY, MIN_HELDOUT_ACCURACY, MIN_UNSEEN_RANK1, UNSEEN_IDENTITIES,
};
pub use run::{
    checkpoint_path, companion_views, epoch_batches, eval_slice, from_checkpoint, generate_views,
    to_checkpoint, train, EpochSummary, LoadedRun, TrainOutcome, TrainState, METRICS_FILE,
    TIMING_FILE,
};
pub use step::{
    discriminator_gradients, train_step, BatchItem, Networks, Optimizers, StepContext, StepReport,
};
