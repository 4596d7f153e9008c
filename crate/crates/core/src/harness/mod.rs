//! Synthetic data, training, evaluation, benchmarking and checkpointing.

pub mod bench;
pub mod checkpoint;
pub mod data;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod synth;
pub mod train;

pub use checkpoint::Checkpoint;
pub use data::TrackData;
pub use eval::{evaluate_model, track, EvalReport, Tracker};
pub use model::{Ablation, FrameInput, MambaTrack, ModelConfig, TrackerState};
pub use synth::{synth_sequence, Motion, Sequence, SynthConfig};
pub use train::{train, TrainConfig, Trained};
