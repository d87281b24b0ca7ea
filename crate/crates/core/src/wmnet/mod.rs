//! Toy watermarking pipelines: profiles, noise layers, networks, training
//! and checkpoints.

mod checkpoint;
mod nets;
mod noise;
mod pipeline;
mod profile;
mod train;

pub use checkpoint::{
    load_decoder, load_pipeline, save_decoder, save_pipeline, CHECKPOINT_VERSION,
};
pub use nets::{
    watermark_input, ArchConfig, Decoder, Discriminator, Encoder, Pyramid, DEFAULT_PYRAMID_SEED,
};
pub use noise::{apply_noise, noise_graph, resize_map, NoiseKind, NoiseSpec, SeedPolicy};
pub use pipeline::{
    build_pipeline, check_watermark, decode_bits, decoder_estimates, DifferentiableDecoder,
    Pipeline, WatermarkEstimate,
};
pub use profile::{screen_shoot_noise, TechniqueProfile, WatermarkSpec};
pub use train::{
    eval_watermarks, evaluate_pipeline, train_pipeline, training_loss, EpochRecord, LossWeights,
    TrainConfig, TrainHistory,
};
