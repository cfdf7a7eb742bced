//! Toy-hand datasets, bridge training, translation, evaluation and file
//! formats.

pub mod codec;
pub mod eval;
pub mod hand;
pub mod persist;
pub mod train;

pub use codec::LatentCodec;
pub use eval::{annotate_all, diversity, eval_alignment, report, translate, AlignmentReport, TranslateOptions};
pub use hand::{annotate, fibonacci_sphere, gen_dataset, Dataset, ToyHandSpec};
pub use train::{init_checkpoint, train, train_latent, Checkpoint, CheckpointMeta, LossRecord, RunConfig, TrainOutput};
