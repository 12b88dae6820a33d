pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corruption;
pub mod data;
pub mod encoder;
pub mod error;
pub mod finetune;
pub mod imageio;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod patch_embed;
pub mod pretrain;
pub mod rng;
pub mod schedule;
pub mod tensor;
