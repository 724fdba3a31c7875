//! Trainable predictors, penalized objectives and training loops.

mod net;
mod objective;
mod train;

pub use net::{LinearClassifier, Link, MlpClassifier, Model, TwoMomentRegressor};
pub use objective::{gradient, objective, BaseLoss, ObjectiveSpec, ObjectiveValue, Penalty};
pub use train::{trace_csv, train, Hyper, OptimizerKind, TraceRow, TrainedModel};

pub use crate::landscape::two_bit_population_penalties;
