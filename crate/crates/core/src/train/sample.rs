use rand::seq::index;

use crate::error::{Error, Result};
use crate::geometry::MeshBatch;
use crate::linalg::Rng;

/// `n` points drawn uniformly without replacement, in random order, with
/// all attributes and their original indices.
pub fn amortized_sample(mesh: &MeshBatch, n: usize, rng: &mut Rng) -> Result<MeshBatch> {
    if n == 0 || n > mesh.len() {
        return Err(Error::invalid(format!(
            "subset size {n} outside 1..={}",
            mesh.len()
        )));
    }
    let idx = index::sample(rng.inner(), mesh.len(), n).into_vec();
    Ok(mesh.select(&idx))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;

    fn line_mesh(n: usize) -> MeshBatch {
        MeshBatch::new(Matrix::from_fn(n, 1, |i, _| i as f64))
    }

    #[test]
    fn full_size_is_permutation() {
        let s = amortized_sample(&line_mesh(50), 50, &mut Rng::seed(1)).unwrap();
        let mut idx = s.indices.clone().unwrap();
        idx.sort_unstable();
        assert_eq!(idx, (0..50).collect::<Vec<_>>());
        for (i, &k) in s.indices.as_ref().unwrap().iter().enumerate() {
            assert_eq!(s.coords[(i, 0)], k as f64);
        }
    }

    #[test]
    fn seeded_draws_repeat() {
        let m = line_mesh(100);
        let a = amortized_sample(&m, 10, &mut Rng::seed(7)).unwrap();
        let b = amortized_sample(&m, 10, &mut Rng::seed(7)).unwrap();
        assert_eq!(a.indices, b.indices);
    }

    #[test]
    fn oversized_subset_rejected() {
        assert!(amortized_sample(&line_mesh(5), 6, &mut Rng::seed(0)).is_err());
        assert!(amortized_sample(&line_mesh(5), 0, &mut Rng::seed(0)).is_err());
    }

    #[test]
    fn inclusion_frequency_is_n_over_total() {
        let m = line_mesh(100);
        let mut rng = Rng::seed(3);
        let mut hits = [0u32; 100];
        let draws = 10_000;
        for _ in 0..draws {
            for &i in amortized_sample(&m, 10, &mut rng).unwrap().indices.as_ref().unwrap() {
                hits[i] += 1;
            }
        }
        for h in hits {
            let f = h as f64 / draws as f64;
            assert!((f - 0.1).abs() <= 0.01, "frequency {f}");
        }
    }

    #[test]
    fn subset_squared_error_is_unbiased() {
        // Fixed linear predictor ŷ = 0.5·x against y = x²; the mean squared
        // error over a subset estimates the full-mesh value.
        let n = 200;
        let m = line_mesh(n);
        let err = |x: f64| (0.5 * x - x * x / n as f64).powi(2);
        let full: f64 = (0..n).map(|i| err(i as f64)).sum::<f64>() / n as f64;
        let mut rng = Rng::seed(4);
        let draws = 1000;
        let vals: Vec<f64> = (0..draws)
            .map(|_| {
                let s = amortized_sample(&m, 20, &mut rng).unwrap();
                s.coords.data().iter().map(|&x| err(x)).sum::<f64>() / 20.0
            })
            .collect();
        let mean = vals.iter().sum::<f64>() / draws as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (draws - 1) as f64;
        let se = (var / draws as f64).sqrt();
        assert!((mean - full).abs() <= 3.0 * se, "mean {mean} full {full} se {se}");
    }
}
