//! Integer-grid autotuning of workload parameters (thread counts, batch size,
//! runtime environment knobs) with Bayesian optimization, a genetic algorithm
//! and Nelder-Mead simplex search.

pub mod analysis;
pub mod bayes;
pub mod engine;
pub mod genetic;
pub mod gp;
pub mod harness;
pub mod history;
pub mod neldermead;
pub mod space;
pub mod study;
pub mod tuner;

pub use engine::{Engine, EngineError};
pub use harness::Evaluator;
pub use history::{Evaluation, History, Status};
pub use space::{Binding, Configuration, ParameterSpec, SearchSpace};
pub use tuner::{tune, TuneOutcome};
