pub mod disco;
pub mod engine;
pub mod featurize;
pub mod geometry;
pub mod model;
pub mod rng;
pub mod scenegen;
pub mod tensor;
