//! Multimodal credit-default modelling with climate risk indices.

pub mod autodiff;
pub mod calendar;
pub mod climate;
pub mod encoders;
pub mod explain;
pub mod features;
pub mod loans;
pub mod metrics;
pub mod panel;
pub mod rng;
pub mod synth;
pub mod trainer;
