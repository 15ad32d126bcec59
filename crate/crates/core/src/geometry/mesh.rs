use std::ops::Range;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// A sampled geometry: per-point coordinates and optional attributes.
#[derive(Clone, Debug, PartialEq)]
pub struct MeshBatch {
    pub coords: Matrix,
    /// Extra per-point inputs; `N × 0` when absent.
    pub features: Matrix,
    /// Outward unit normals, `N × 3`.
    pub normals: Option<Matrix>,
    /// Quadrature weights `ΔS_i`.
    pub areas: Option<Vec<f64>>,
    pub targets: Option<Matrix>,
    /// Row indices into the mesh this batch was drawn from.
    pub indices: Option<Vec<usize>>,
}

impl MeshBatch {
    pub fn new(coords: Matrix) -> Self {
        let n = coords.rows();
        Self {
            coords,
            features: Matrix::zeros(n, 0),
            normals: None,
            areas: None,
            targets: None,
            indices: None,
        }
    }

    pub fn with_targets(mut self, targets: Matrix) -> Self {
        self.targets = Some(targets);
        self
    }

    pub fn with_features(mut self, features: Matrix) -> Self {
        self.features = features;
        self
    }

    pub fn len(&self) -> usize {
        self.coords.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Coordinate columns followed by feature columns.
    pub fn input_dim(&self) -> usize {
        self.coords.cols() + self.features.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        let rows_ok = |m: &Matrix, what: &'static str| -> Result<()> {
            if m.rows() != n {
                return Err(Error::Shape {
                    op: what,
                    left: self.coords.shape(),
                    right: m.shape(),
                });
            }
            Ok(())
        };
        rows_ok(&self.features, "mesh features")?;
        if let Some(t) = &self.targets {
            rows_ok(t, "mesh targets")?;
        }
        if let Some(nm) = &self.normals {
            rows_ok(nm, "mesh normals")?;
            if nm.cols() != 3 {
                return Err(Error::invalid("normals must have 3 columns"));
            }
            for (i, r) in nm.row_iter().enumerate() {
                let len = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt();
                if (len - 1.0).abs() > 1e-9 {
                    return Err(Error::invalid(format!("normal {i} has length {len}")));
                }
            }
        }
        if let Some(a) = &self.areas {
            if a.len() != n {
                return Err(Error::invalid("area count differs from point count"));
            }
            if let Some(i) = a.iter().position(|&v| v.is_nan() || v <= 0.0) {
                return Err(Error::invalid(format!("area {i} is not positive")));
            }
        }
        if let Some(idx) = &self.indices {
            if idx.len() != n {
                return Err(Error::invalid("index count differs from point count"));
            }
        }
        Ok(())
    }

    /// Rows `idx` with all attributes. Records the original indices.
    pub fn select(&self, idx: &[usize]) -> Self {
        let origin = match &self.indices {
            Some(orig) => idx.iter().map(|&i| orig[i]).collect(),
            None => idx.to_vec(),
        };
        Self {
            coords: self.coords.select_rows(idx),
            features: self.features.select_rows(idx),
            normals: self.normals.as_ref().map(|m| m.select_rows(idx)),
            areas: self.areas.as_ref().map(|a| idx.iter().map(|&i| a[i]).collect()),
            targets: self.targets.as_ref().map(|m| m.select_rows(idx)),
            indices: Some(origin),
        }
    }

    pub fn slice(&self, range: Range<usize>) -> Self {
        Self {
            coords: self.coords.row_range(range.clone()),
            features: self.features.row_range(range.clone()),
            normals: self.normals.as_ref().map(|m| m.row_range(range.clone())),
            areas: self.areas.as_ref().map(|a| a[range.clone()].to_vec()),
            targets: self.targets.as_ref().map(|m| m.row_range(range.clone())),
            indices: self.indices.as_ref().map(|v| v[range].to_vec()),
        }
    }

    /// Concatenates batches that carry the same set of attributes.
    pub fn concat(parts: &[MeshBatch]) -> Result<Self> {
        if parts.is_empty() {
            return Err(Error::invalid("nothing to concatenate"));
        }
        let stack = |f: &dyn Fn(&MeshBatch) -> Option<Matrix>| -> Result<Option<Matrix>> {
            let mats: Option<Vec<Matrix>> = parts.iter().map(f).collect();
            mats.map(|m| Matrix::vstack(&m)).transpose()
        };
        let out = Self {
            coords: Matrix::vstack(&parts.iter().map(|p| p.coords.clone()).collect::<Vec<_>>())?,
            features: Matrix::vstack(&parts.iter().map(|p| p.features.clone()).collect::<Vec<_>>())?,
            normals: stack(&|p| p.normals.clone())?,
            areas: {
                let vs: Option<Vec<&Vec<f64>>> = parts.iter().map(|p| p.areas.as_ref()).collect();
                vs.map(|v| v.into_iter().flatten().copied().collect())
            },
            targets: stack(&|p| p.targets.clone())?,
            indices: {
                let vs: Option<Vec<&Vec<usize>>> = parts.iter().map(|p| p.indices.as_ref()).collect();
                vs.map(|v| v.into_iter().flatten().copied().collect())
            },
        };
        Ok(out)
    }
}
