pub mod checkpoint;
pub mod config;
pub mod forward;
pub mod gradcheck;
pub mod optim;
pub mod params;
pub mod tape;
pub mod train;

pub use checkpoint::{read_header, Checkpoint, CheckpointHeader};
pub use config::{DecaySchedule, MixerKind, ModelConfig};
pub use forward::{forward_lm, latent_usage, loss_and_grads, Pass, TokenBatch};
pub use gradcheck::{gradcheck_config, gradient_check};
pub use optim::AdamW;
pub use params::{build_model, ParameterStore};
pub use tape::{Gradients, Tape, Var};
pub use train::{train, MetricRow, TrainMetrics, TrainOptions, Trainer};
