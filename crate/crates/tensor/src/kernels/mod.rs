pub mod conv;
pub(crate) mod norm;
pub mod pool;
