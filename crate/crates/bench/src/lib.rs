//! Shared fixtures for the criterion benches.

use slicefield::geometry::{gen_sphere_mesh, manufactured_field, MeshBatch};
use slicefield::model::{ModelConfig, ModelParams};
use slicefield::physattn::{HeadParams, Mode};
use slicefield::{Matrix, Real, Rng};

/// One head with random weights on `N × C` Gaussian features.
pub fn head_fixture<T: Real>(n: usize, channels: usize, slices: usize, seed: u64) -> (Matrix<T>, HeadParams<T>) {
    let mut rng = Rng::seed(seed);
    let p = HeadParams::<f64>::init(channels, slices, &mut rng).cast();
    (rng.normal_matrix(n, channels), p)
}

pub fn bench_model() -> ModelConfig {
    ModelConfig {
        layers: 2,
        heads: 4,
        channels: 32,
        slices: 16,
        in_dim: 3,
        out_dim: 1,
        ffn_hidden: 64,
        mode: Mode::Fast,
        tile_size: 1024,
    }
}

/// Sphere mesh with targets and freshly initialized parameters.
pub fn model_fixture(n: usize, seed: u64) -> (ModelConfig, ModelParams, MeshBatch) {
    let cfg = bench_model();
    let mut rng = Rng::seed(seed);
    let mut mesh = gen_sphere_mesh(n, &mut rng).expect("sphere mesh");
    mesh.targets = Some(manufactured_field(&mesh.coords).expect("manufactured field"));
    let params = ModelParams::init(&cfg, 3, &mut rng).expect("model init");
    (cfg, params, mesh)
}
