mod basic;
mod conv;
mod sample;

pub use basic::argmax;
pub use conv::laplacian_values;
