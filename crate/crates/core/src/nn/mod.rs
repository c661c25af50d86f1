//! Dense-network engine: matrices, client models, losses, optimizer,
//! checkpoints and finite-difference gradient checks.

pub mod checkpoint;
pub mod gradcheck;
pub mod loss;
pub mod matrix;
pub mod model;
pub mod optim;

pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use loss::{argmax, cross_entropy_grad, log_softmax, max_prob, softmax, softmax_rows};
pub use matrix::Matrix;
pub use model::{Activation, Architecture, Backbone, ClientModel, Dense, Forward, ModelGrads};
pub use optim::{cosine_lr, sgd_step, OptState};
