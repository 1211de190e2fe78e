pub mod cli;
pub mod data;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod objectives;
pub mod selection;
pub mod tensor;
pub mod trainer;
