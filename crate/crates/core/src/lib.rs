pub mod case;
pub mod eval;
pub mod metadata;
pub mod model;
pub mod pipeline;
pub mod tensor;
pub mod synthgen;
pub mod text;
pub mod training;

pub use case::{read_cases, write_cases, Case, Splits};
