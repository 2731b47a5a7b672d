//! Mediation analysis for case-control samples with a binary mediator and a
//! binary outcome.

pub mod correction;
pub mod data;
pub mod design;
pub mod formula;
pub mod linalg;
pub mod logistic;
pub mod effects;
pub mod fit;
pub mod mest;
pub mod mle;
pub mod optim;
pub mod weighting;
pub mod sim;
