pub mod entropy;
pub mod estimate;
pub mod follmer;
pub mod laplace;
pub mod measure;
pub mod pathsim;
pub mod rng;
pub mod frames;
pub mod config;
pub mod report;
