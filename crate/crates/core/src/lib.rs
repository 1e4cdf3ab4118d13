//! Structure-aware evolutionary optimization of component-structured medical prompts.

pub mod assessment;
pub mod fixtures;
pub mod genome;
pub mod parallel;
pub mod representation;
pub mod verification;
pub mod evolution;
pub mod runtime;
