//! Unit-sphere meshes and smooth analytic fields on them.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Rng};

use super::MeshBatch;

/// Golden angle in radians, the azimuthal step of the Fibonacci lattice.
const GOLDEN_ANGLE: f64 = 2.399_963_229_728_653;

fn on_sphere(points: Vec<[f64; 3]>) -> MeshBatch {
    let n = points.len();
    let coords = Matrix::from_fn(n, 3, |i, j| points[i][j]);
    let normals = Matrix::from_fn(n, 3, |i, j| {
        let p = points[i];
        p[j] / (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()
    });
    MeshBatch {
        normals: Some(normals),
        areas: Some(vec![4.0 * PI / n as f64; n]),
        ..MeshBatch::new(coords)
    }
}

/// Fibonacci-lattice points on the unit sphere with outward normals and equal
/// areas `4π/n`. The lattice is rotated about the z axis by a random angle
/// drawn from `rng`, so different seeds give congruent but distinct meshes.
pub fn gen_sphere_mesh(n_points: usize, rng: &mut Rng) -> Result<MeshBatch> {
    if n_points < 4 {
        return Err(Error::invalid("a sphere mesh needs at least 4 points"));
    }
    let phase = rng.uniform(0.0, 2.0 * PI);
    let n = n_points as f64;
    let points = (0..n_points)
        .map(|i| {
            let z = 1.0 - (2.0 * i as f64 + 1.0) / n;
            let r = (1.0 - z * z).sqrt();
            let phi = phase + GOLDEN_ANGLE * i as f64;
            [r * phi.cos(), r * phi.sin(), z]
        })
        .collect();
    Ok(on_sphere(points))
}

/// `n` independent area-uniform points on the unit sphere. Each carries the
/// Monte-Carlo weight `4π/n`.
pub fn sample_sphere(n: usize, rng: &mut Rng) -> Result<MeshBatch> {
    if n == 0 {
        return Err(Error::invalid("sample size must be at least 1"));
    }
    let points = (0..n)
        .map(|_| loop {
            let v = [rng.normal(), rng.normal(), rng.normal()];
            let len = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            if len > 1e-12 {
                break [v[0] / len, v[1] / len, v[2] / len];
            }
        })
        .collect();
    Ok(on_sphere(points))
}

/// `p(x, y, z) = sin(3x)·cos(2y) + z²`.
pub fn pressure_at(x: f64, y: f64, z: f64) -> f64 {
    (3.0 * x).sin() * (2.0 * y).cos() + z * z
}

/// The manufactured pressure as an `N × 1` target column.
pub fn manufactured_field(coords: &Matrix) -> Result<Matrix> {
    if coords.cols() != 3 {
        return Err(Error::invalid("manufactured field needs 3 coordinate columns"));
    }
    Ok(Matrix::from_fn(coords.rows(), 1, |i, _| {
        let r = coords.row(i);
        pressure_at(r[0], r[1], r[2])
    }))
}

/// Tangential shear: `g = (cos 2y, sin 2z, x)` with its normal component
/// removed, `τ = g − (g·n) n`.
pub fn tangential_shear(coords: &Matrix, normals: &Matrix) -> Result<Matrix> {
    if coords.cols() != 3 || normals.shape() != coords.shape() {
        return Err(Error::Shape {
            op: "tangential shear",
            left: coords.shape(),
            right: normals.shape(),
        });
    }
    let mut out = Matrix::zeros(coords.rows(), 3);
    for i in 0..coords.rows() {
        let (c, n) = (coords.row(i), normals.row(i));
        let g = [(2.0 * c[1]).cos(), (2.0 * c[2]).sin(), c[0]];
        let gn = g[0] * n[0] + g[1] * n[1] + g[2] * n[2];
        for j in 0..3 {
            out[(i, j)] = g[j] - gn * n[j];
        }
    }
    Ok(out)
}
