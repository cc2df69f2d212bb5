//! Minimal reverse-mode autodiff and neural-network building blocks used by
//! the latent model and outcome heads.

pub mod nn;
pub mod tape;

pub use nn::{he_init, Adam, Mlp, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
