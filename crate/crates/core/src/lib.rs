pub mod autodiff;
pub mod config;
pub mod data_io;
pub mod distillation;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod gradcheck;
pub mod masking;
pub mod network;
pub mod params;
pub mod tensor;
pub mod tensorfile;
pub mod trainer;
