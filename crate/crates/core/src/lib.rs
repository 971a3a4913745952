//! Multi-view fusion transformer for sensor-based human activity recognition.
//!
//! Raw sensor windows are turned into three views (raw samples, DFT magnitude
//! spectra, per-channel summary statistics), embedded per view, encoded by
//! three transformer stacks that exchange information through a fusion
//! attention, and read out by a decoder whose three streams are summed into
//! one class distribution.

pub mod attention;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod embedding;
pub mod error;
pub mod mask;
pub mod model;
pub mod optim;
pub mod params;
pub mod report;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod views;

pub use autograd::{Gradients, Tape, Var};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{FusionMode, ModelConfig, ModelKind};
pub use embedding::{Batch, EmbeddedViews};
pub use error::{MvftError, Result};
pub use mask::{View, ViewMask};
pub use model::MvftModel;
pub use optim::{adam_step, AdamState};
pub use params::{Binder, ParamStore};
pub use rng::SeededRng;
pub use tensor::Tensor;
pub use train::{evaluate, fit, train_epoch, EpochRecord, FitOutcome, Metrics, TrainConfig};
pub use views::{SensorWindow, ViewBundle};
