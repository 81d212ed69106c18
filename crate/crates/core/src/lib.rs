pub mod baselines;
pub mod experiments;
pub mod linalg;
pub mod models;
pub mod qp;
pub mod rng;
pub mod sep;
pub mod trainer;
