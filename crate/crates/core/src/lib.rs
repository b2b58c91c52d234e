pub mod attention;
pub mod config;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod gradsuite;
pub mod io;
pub mod mae;
pub mod optim;
pub mod posenc;
pub mod ppo;
pub mod sampler;
pub mod synth;
pub mod tensor;
pub mod tokenizer;
pub mod trainer;
pub mod viz;

pub use config::TrainConfig;
pub use error::{Result, TatsError};
pub use optim::{adamw_step, AdamW, ParamStore};
pub use tensor::{DiffTensor, OpKind, Tape, Var};
