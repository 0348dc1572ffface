//! Small seeded networks and inputs for tests, demos, and golden runs.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    encode_inputs, predict_queries, Activation, Conv3d, Dense, Layer, PipelineConfig, PipelineInputs, WeightBundle,
};
use crate::error::Result;
use crate::grids::FeatureMap2D;
use crate::mesh::{primitives::icosphere, sample_surface};
use crate::surface::{build_query_grid, IsoGridSpec};
use crate::tensor::Tensor;

pub const LOCAL_CHANNELS: usize = 8;
pub const LOCAL_SIZE: usize = 32;
pub const GLOBAL_IMG: usize = 16;
pub const GLOBAL_PTS: usize = 16;
pub const PYRAMID_CHANNELS: [usize; 3] = [4, 8, 8];
pub const COARSE_POINTS: usize = 1000;

fn rng(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ salt)
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, a: f32) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(-a..a)).collect()
}

fn dense(rng: &mut ChaCha8Rng, input: usize, output: usize, act: Activation) -> Layer {
    let a = (6.0 / (input + output) as f32).sqrt();
    let w = uniform(rng, input * output, a);
    let b = uniform(rng, output, 0.1);
    Layer::Dense(Dense::new(input, output, w, b, act).expect("consistent sizes"))
}

fn conv(rng: &mut ChaCha8Rng, i: usize, o: usize, stride: usize, act: Activation) -> Layer {
    let a = (6.0 / ((i + o) * 27) as f32).sqrt();
    let w = uniform(rng, o * i * 27, a);
    let b = uniform(rng, o, 0.1);
    Layer::Conv3d(Conv3d::new(i, o, 3, stride, 1, w, b, act).expect("consistent sizes"))
}

/// Two same-resolution 3³ convolutions ending in a sigmoid.
pub fn gamma_bundle(seed: u64) -> WeightBundle {
    let mut r = rng(seed, 1);
    let layers = vec![conv(&mut r, 1, 4, 1, Activation::Relu), conv(&mut r, 4, 1, 1, Activation::Sigmoid)];
    WeightBundle::new(layers, vec![], None).expect("valid fixture")
}

/// Three stride-2 stages, each tapped.
pub fn xi_bundle(seed: u64) -> WeightBundle {
    let mut r = rng(seed, 2);
    let [a, b, c] = PYRAMID_CHANNELS;
    let layers = vec![
        conv(&mut r, 1, a, 2, Activation::Relu),
        conv(&mut r, a, b, 2, Activation::Relu),
        conv(&mut r, b, c, 2, Activation::LeakyRelu),
    ];
    WeightBundle::new(layers, vec![0, 1, 2], None).expect("valid fixture")
}

/// Query MLP with the global features fused after the third layer.
pub fn theta_bundle(seed: u64, global: usize) -> WeightBundle {
    let mut r = rng(seed, 3);
    let layers = vec![
        dense(&mut r, 3, 16, Activation::Relu),
        dense(&mut r, 16, 16, Activation::Relu),
        dense(&mut r, 16, 16, Activation::Relu),
        Layer::FuseConcat { port: "global".into() },
        dense(&mut r, 16 + global, 16, Activation::Tanh),
        dense(&mut r, 16, 2, Activation::None),
    ];
    WeightBundle::new(layers, vec![], None).expect("valid fixture")
}

pub fn psi_bundle(seed: u64, input: usize) -> WeightBundle {
    let mut r = rng(seed, 4);
    let layers = vec![
        dense(&mut r, input, 32, Activation::Relu),
        dense(&mut r, 32, 16, Activation::LeakyRelu),
        dense(&mut r, 16, 1, Activation::None),
    ];
    WeightBundle::new(layers, vec![], None).expect("valid fixture")
}

/// Random inputs and bundles with a coarse cloud sampled from a sphere of radius 0.3.
pub fn pipeline_inputs(seed: u64) -> PipelineInputs {
    let sphere = icosphere(0.3, 2);
    let coarse = sample_surface(&sphere, COARSE_POINTS, seed).expect("sphere has area");
    let mut r = rng(seed, 5);
    let n_local = LOCAL_CHANNELS * LOCAL_SIZE * LOCAL_SIZE;
    let local_data: Vec<f32> = (0..n_local).map(|_| r.random_range(0.0..1.0)).collect();
    let local = FeatureMap2D::new(LOCAL_CHANNELS, LOCAL_SIZE, LOCAL_SIZE, local_data).expect("sized");
    let z_img = Tensor::new(vec![GLOBAL_IMG], uniform(&mut r, GLOBAL_IMG, 1.0)).expect("sized");
    let z_pts = Tensor::new(vec![GLOBAL_PTS], uniform(&mut r, GLOBAL_PTS, 1.0)).expect("sized");
    let f_c = 7 * PYRAMID_CHANNELS.iter().sum::<usize>();
    PipelineInputs {
        coarse,
        local,
        z_img,
        z_pts,
        gamma: gamma_bundle(seed),
        xi: xi_bundle(seed),
        theta: theta_bundle(seed, GLOBAL_IMG + GLOBAL_PTS),
        psi: psi_bundle(seed, f_c + LOCAL_CHANNELS),
    }
}

/// Like [`pipeline_inputs`], with the predictor's output bias shifted so the
/// median prediction over an 8³ probe lattice is zero under `cfg`. The level set
/// is then guaranteed to cut through the grid.
pub fn calibrated_inputs(seed: u64, cfg: &PipelineConfig) -> Result<PipelineInputs> {
    let mut inputs = pipeline_inputs(seed);
    let enc = encode_inputs(&inputs, cfg)?;
    let probe = build_query_grid(&IsoGridSpec {
        resolution: [8; 3],
        ..cfg.grid
    })?;
    let mut values = predict_queries(&inputs, &enc, &probe, cfg.neighbor_offset())?;
    values.sort_by(f32::total_cmp);
    let median = values[values.len() / 2];
    let mut layers = inputs.psi.layers().to_vec();
    if let Some(Layer::Dense(last)) = layers.last_mut() {
        last.bias[0] -= median;
    }
    inputs.psi = WeightBundle::new(layers, vec![], None)?;
    Ok(inputs)
}

/// Writes `inputs` in the on-disk layout read by [`PipelineInputs::load`].
pub fn write_pipeline_dirs(inputs: &PipelineInputs, inputs_dir: &Path, bundles_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(inputs_dir)?;
    std::fs::create_dir_all(bundles_dir)?;
    inputs.save(inputs_dir, bundles_dir)
}
