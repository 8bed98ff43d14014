//! MAC reasoning networks for multi-turn visual dialog, with context-aware
//! attention over past control states and memory carried across turns.
//!
//! The crate is self-contained: [`tensor`] provides the autodiff engine,
//! [`scenegen`] a synthetic dialog dataset with exact answers, and the model
//! modules ([`encoder`], [`maccell`], [`cam`]) are trained by [`trainer`] and
//! scored by [`eval`].

pub mod cam;
pub mod encoder;
pub mod eval;
pub mod maccell;
pub mod model;
pub mod scenegen;
pub mod tensor;
pub mod trainer;

mod error;

pub use cam::{AttentionRecord, DialogState, TurnOutput};
pub use error::{Error, Result};
pub use eval::{BreakdownReport, TurnAttentionSummary};
pub use model::{Flags, ModelConfig, ModelParams};
pub use scenegen::{Dataset, DialogRecord, DialogTurn, GenConfig, SceneGraph};
pub use tensor::{Real, Tape, Tensor, Var};
pub use trainer::{Checkpoint, TrainConfig};
