//! Nonlinear state-space identification with a subspace encoder.
//!
//! Models consist of three feedforward networks: an encoder that estimates
//! the state from a window of past inputs and outputs, a state transition
//! and an output map. They are trained on a truncated prediction loss over
//! many short, overlapping sections of the data, each initialised by the
//! encoder.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! at the crate root fix it to `f64`, which is what the training pipeline
//! and the command-line tool use.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod autodiff;
pub mod baselines;
pub mod data;
pub mod error;
pub mod loss;
pub mod matrix;
pub mod model;
pub mod nets;
pub mod optim;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub use analysis::{g_of_d, kstep_nrms, nrms, overlap_variance_mc, KStepProfile, OverlapVariance};
pub use baselines::{compare_report, free_run_score, run_variant, Variant, VariantResult};
pub use data::{generate_sim_system, load_csv, paper_splits, save_csv, slice_splits, SimSystemConfig, SimVariant, Splits};
pub use loss::{encoder_loss, encoder_loss_grad, full_prediction_loss, valid_starts, BatchSampler, IndexSet};
pub use model::{load_model, save_model, ModelConfig, NoiseStructure, Normalization, SimulationMode, StateInit};
pub use nets::{Activation, MlpSpec};
pub use optim::{fit_normalization, train, train_with, AdamConfig, TrainConfig, TrainHooks, TrainReport, ValidationMetric};

pub type Matrix = matrix::Matrix<f64>;
pub type Tape = autodiff::Tape<f64>;
pub type Mlp = nets::Mlp<f64>;
pub type MlpParams = nets::MlpParams<f64>;
pub type IoDataset = data::IoDataset<f64>;
pub type SubnetModel = model::SubnetModel<f64>;
pub type Matrix32 = matrix::Matrix<f32>;
pub type IoDataset32 = data::IoDataset<f32>;
pub type SubnetModel32 = model::SubnetModel<f32>;
