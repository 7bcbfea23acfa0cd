//! Minimal f64 neural-network toolkit: dense matrices, a reverse-mode tape,
//! named parameter storage and ADAM. Small enough to audit, precise enough
//! for finite-difference gradient verification.

mod layers;
mod matrix;
mod params;
mod tape;

pub use layers::{BiLstm, LstmDirection, TransformerLayer};
pub use matrix::Matrix;
pub use params::{
    init_weight, keyed_rng, next_standard_normal, seeded_normal, Adam, Binder, ParamStore,
};
pub use tape::{Gradients, Tape, Var};
