pub mod benchmarks;
pub mod chaos;
pub mod error;
pub mod experiment;
pub mod market;
pub mod metrics;
pub mod optimizer;
pub mod par;
pub mod strategy;
