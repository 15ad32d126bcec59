//! Surface force integration and its convergence under point sampling.
//!
//! The force on a closed surface is approximated by the point sum
//! `F ≈ Σ_i [−(p_i − p∞) n_i + τ_i] ΔS_i`. With random sampling on a
//! two-dimensional surface the error decays like `N_s^{−1/2}`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Rng};

use super::sphere::{gen_sphere_mesh, manufactured_field, sample_sphere};
use super::MeshBatch;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowConstants {
    pub p_inf: f64,
    pub rho_inf: f64,
    pub v_inf: f64,
    pub a_ref: f64,
    pub drag_dir: [f64; 3],
    pub lift_dir: [f64; 3],
}

impl Default for FlowConstants {
    fn default() -> Self {
        Self {
            p_inf: 0.0,
            rho_inf: 1.0,
            v_inf: 1.0,
            a_ref: 1.0,
            drag_dir: [1.0, 0.0, 0.0],
            lift_dir: [0.0, 0.0, 1.0],
        }
    }
}

impl FlowConstants {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho_inf > 0.0 && self.v_inf > 0.0 && self.a_ref > 0.0) {
            return Err(Error::invalid("rho_inf, v_inf and a_ref must be positive"));
        }
        for d in [self.drag_dir, self.lift_dir] {
            let len = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            if (len - 1.0).abs() > 1e-9 {
                return Err(Error::invalid("direction vectors must be unit length"));
            }
        }
        Ok(())
    }

    /// `½ ρ∞ v∞² A`.
    pub fn dynamic_scale(&self) -> f64 {
        0.5 * self.rho_inf * self.v_inf * self.v_inf * self.a_ref
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Force {
    pub force: [f64; 3],
    pub cd: f64,
    pub cl: f64,
}

/// Compensated (Neumaier) running sum, so equal-weight quadrature of a
/// constant is exact to rounding of the final value.
#[derive(Clone, Copy, Default)]
struct Sum {
    total: f64,
    carry: f64,
}

impl Sum {
    fn add(&mut self, v: f64) {
        let t = self.total + v;
        if self.total.abs() >= v.abs() {
            self.carry += (self.total - t) + v;
        } else {
            self.carry += (v - t) + self.total;
        }
        self.total = t;
    }

    fn value(self) -> f64 {
        self.total + self.carry
    }
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Integrated force and its drag/lift coefficients. `pressure` holds one
/// value per point; `shear`, when given, is `N × 3`.
pub fn integrate_force(mesh: &MeshBatch, pressure: &[f64], shear: Option<&Matrix>, fc: &FlowConstants) -> Result<Force> {
    fc.validate()?;
    let normals = mesh.normals.as_ref().ok_or_else(|| Error::invalid("force integration needs normals"))?;
    let areas = mesh.areas.as_ref().ok_or_else(|| Error::invalid("force integration needs areas"))?;
    if pressure.len() != mesh.len() {
        return Err(Error::invalid("pressure length differs from point count"));
    }
    if let Some(t) = shear {
        if t.shape() != (mesh.len(), 3) {
            return Err(Error::Shape {
                op: "shear field",
                left: (mesh.len(), 3),
                right: t.shape(),
            });
        }
    }
    let mut acc = [Sum::default(); 3];
    for i in 0..mesh.len() {
        let n = normals.row(i);
        let dp = pressure[i] - fc.p_inf;
        for j in 0..3 {
            let tau = shear.map_or(0.0, |t| t[(i, j)]);
            acc[j].add((-dp * n[j] + tau) * areas[i]);
        }
    }
    let f = acc.map(Sum::value);
    let q = fc.dynamic_scale();
    Ok(Force {
        force: f,
        cd: dot(f, fc.drag_dir) / q,
        cl: dot(f, fc.lift_dir) / q,
    })
}

/// `Σ_i p_i ΔS_i`.
pub fn integrate_scalar(mesh: &MeshBatch, values: &[f64]) -> Result<f64> {
    let areas = mesh.areas.as_ref().ok_or_else(|| Error::invalid("surface integral needs areas"))?;
    if values.len() != areas.len() {
        return Err(Error::invalid("value count differs from point count"));
    }
    let mut acc = Sum::default();
    for (v, a) in values.iter().zip(areas) {
        acc.add(v * a);
    }
    Ok(acc.value())
}

/// High-resolution values used as ground truth for the sphere benchmarks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceIntegrals {
    pub n_points: usize,
    pub force: [f64; 3],
    pub cd: f64,
    pub cl: f64,
    pub pressure_integral: f64,
}

impl ReferenceIntegrals {
    /// Quadrature of the manufactured pressure (no shear) on an `n`-point
    /// Fibonacci sphere.
    pub fn sphere(n_points: usize, fc: &FlowConstants) -> Result<Self> {
        let mesh = gen_sphere_mesh(n_points, &mut Rng::seed(0))?;
        let p = manufactured_field(&mesh.coords)?.into_data();
        let f = integrate_force(&mesh, &p, None, fc)?;
        Ok(Self {
            n_points,
            force: f.force,
            cd: f.cd,
            cl: f.cl,
            pressure_integral: integrate_scalar(&mesh, &p)?,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Error statistics of one sampled quantity across sample sizes.
#[derive(Clone, Debug, PartialEq)]
pub struct Convergence {
    pub sizes: Vec<usize>,
    /// Root-mean-square absolute error over seeds, per size.
    pub errors: Vec<f64>,
    /// Least-squares slope of `log error` against `log N_s`. `None` if fewer
    /// than two sizes have nonzero error.
    pub slope: Option<f64>,
}

/// Least-squares slope of `log y` on `log x`, skipping zero `y`.
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = xs
        .iter()
        .zip(ys)
        .filter(|(_, &y)| y > 0.0)
        .map(|(&x, &y)| (x.ln(), y.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Estimates `quantity` on `seeds` independent area-uniform samples of the
/// unit sphere at each size, measuring absolute error against `reference`.
/// Errors below `1e-13·max(1, |reference|)` count as exact and are excluded
/// from the slope fit.
pub fn quadrature_convergence(
    sizes: &[usize],
    seeds: usize,
    base_seed: u64,
    reference: f64,
    quantity: impl Fn(&MeshBatch) -> Result<f64>,
) -> Result<Convergence> {
    if sizes.len() < 3 {
        return Err(Error::invalid("convergence needs at least 3 sample sizes"));
    }
    if seeds == 0 {
        return Err(Error::invalid("convergence needs at least one seed"));
    }
    let floor = 1e-13 * reference.abs().max(1.0);
    let mut errors = Vec::with_capacity(sizes.len());
    for (k, &n) in sizes.iter().enumerate() {
        let mut sq = 0.0;
        for s in 0..seeds {
            let mut rng = Rng::seed(base_seed ^ ((k as u64) << 32) ^ s as u64);
            let mesh = sample_sphere(n, &mut rng)?;
            let e = quantity(&mesh)? - reference;
            sq += e * e;
        }
        let rms = (sq / seeds as f64).sqrt();
        errors.push(if rms <= floor { 0.0 } else { rms });
    }
    let xs: Vec<f64> = sizes.iter().map(|&n| n as f64).collect();
    Ok(Convergence {
        sizes: sizes.to_vec(),
        slope: log_log_slope(&xs, &errors),
        errors,
    })
}

/// `C_d` of the manufactured pressure on `mesh` with no shear.
pub fn manufactured_cd(mesh: &MeshBatch, fc: &FlowConstants) -> Result<f64> {
    let p = manufactured_field(&mesh.coords)?.into_data();
    Ok(integrate_force(mesh, &p, None, fc)?.cd)
}
