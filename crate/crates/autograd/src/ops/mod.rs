mod conv;
mod elementwise;
mod linalg;
mod pool;
mod shape;

pub use conv::ConvSpec;
