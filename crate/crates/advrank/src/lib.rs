pub mod attack;
pub mod data;
pub mod defense;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod tensor;
