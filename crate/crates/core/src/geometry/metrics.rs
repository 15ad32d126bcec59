//! Field and coefficient error metrics.

use crate::error::{Error, Result};
use crate::linalg::Matrix;

fn same_shape(pred: &Matrix, truth: &Matrix) -> Result<()> {
    if pred.shape() != truth.shape() {
        return Err(Error::Shape {
            op: "metrics",
            left: pred.shape(),
            right: truth.shape(),
        });
    }
    Ok(())
}

/// `‖ŷ − y‖₂ / ‖y‖₂` jointly over all columns.
pub fn rel_l2(pred: &Matrix, truth: &Matrix) -> Result<f64> {
    same_shape(pred, truth)?;
    let den = truth.frobenius_norm();
    if den == 0.0 {
        return Err(Error::DegenerateTarget);
    }
    let num: f64 = pred
        .data()
        .iter()
        .zip(truth.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    Ok(num / den)
}

/// `1 − Σ(y − ŷ)² / Σ(y − ȳ)²`. `None` when the truth is constant or has
/// fewer than two samples.
pub fn r2(pred: &[f64], truth: &[f64]) -> Result<Option<f64>> {
    if pred.len() != truth.len() {
        return Err(Error::invalid("r2 series lengths differ"));
    }
    if truth.len() < 2 {
        return Ok(None);
    }
    let mean = truth.iter().sum::<f64>() / truth.len() as f64;
    let ss_tot: f64 = truth.iter().map(|y| (y - mean) * (y - mean)).sum();
    if ss_tot == 0.0 {
        return Ok(None);
    }
    let ss_res: f64 = pred.iter().zip(truth).map(|(p, y)| (y - p) * (y - p)).sum();
    Ok(Some(1.0 - ss_res / ss_tot))
}

/// `(1/M) Σ|y − ŷ|`.
pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() || truth.is_empty() {
        return Err(Error::invalid("mae needs two non-empty series of equal length"));
    }
    Ok(pred.iter().zip(truth).map(|(p, y)| (y - p).abs()).sum::<f64>() / truth.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub rel_l2: f64,
    /// Per column; `None` where undefined.
    pub r2: Vec<Option<f64>>,
    pub mae: Vec<f64>,
}

fn column(m: &Matrix, j: usize) -> Vec<f64> {
    m.row_iter().map(|r| r[j]).collect()
}

/// All three metrics, treating each column as one scalar series.
pub fn metrics(pred: &Matrix, truth: &Matrix) -> Result<Metrics> {
    let rel = rel_l2(pred, truth)?;
    let mut r2s = Vec::with_capacity(truth.cols());
    let mut maes = Vec::with_capacity(truth.cols());
    for j in 0..truth.cols() {
        let (p, t) = (column(pred, j), column(truth, j));
        r2s.push(r2(&p, &t)?);
        maes.push(mae(&p, &t)?);
    }
    Ok(Metrics {
        rel_l2: rel,
        r2: r2s,
        mae: maes,
    })
}
