//! Forecasting with an orchestra of jointly trained base predictors.
//!
//! A set of LSTM base predictors each forecast the next `P` steps from a
//! context window. A neural conductor, made of a dilated-convolution
//! representation module and a linear meta learner, scores every predictor
//! per series and time step; the forecast is the softmax-weighted sum of the
//! predictors' outputs. All parts train end to end on an L1 objective, with
//! optional contrastive pre-training of the representation module.

pub mod analysis;
pub mod base_predictor;
pub mod checkpoint;
pub mod conductor;
pub mod data;
pub mod ensemble;
pub mod eval;
pub mod nn;
pub mod pretrain;
pub mod train;
