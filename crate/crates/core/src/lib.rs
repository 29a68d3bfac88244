pub mod alloc;
pub mod attention;
pub mod augment;
pub mod config;
pub mod dataset;
pub mod error;
pub mod frontend;
pub mod lambda;
pub mod model;
pub mod scaling;
pub mod tensor;
pub mod train;
