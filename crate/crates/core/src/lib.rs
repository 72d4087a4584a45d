pub mod ast;
pub mod checkpoint;
pub mod numerics;
pub mod pretrain;
pub mod baselines;
pub mod network;
pub mod gradcheck;
pub mod trainer;
pub mod datagen;
pub mod analysis;
