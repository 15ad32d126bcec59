//! Randomized agreement check between the three execution paths.

use super::{physattn_fast, physattn_original, physattn_tiled, HeadParams};
use crate::error::Result;
use crate::linalg::{rel_diff, Rng};

/// Relative differences of the fast and tiled paths against the original.
#[derive(Clone, Debug, PartialEq)]
pub struct EquivalenceTrial {
    pub n: usize,
    pub seed: u64,
    pub fast: f64,
    /// `(tile_size, difference)` for each tile size tried.
    pub tiled: Vec<(usize, f64)>,
}

impl EquivalenceTrial {
    pub fn worst(&self) -> f64 {
        self.tiled.iter().map(|t| t.1).fold(self.fast, f64::max)
    }
}

/// Tile sizes `{N, N/4, N/8, 7}`, each at least 1.
pub fn default_tile_sizes(n: usize) -> Vec<usize> {
    vec![n, (n / 4).max(1), (n / 8).max(1), 7]
}

/// One head with random parameters on `N × C` Gaussian input.
pub fn equivalence_trial(n: usize, channels: usize, slices: usize, seed: u64) -> Result<EquivalenceTrial> {
    let mut rng = Rng::seed(seed);
    let p = HeadParams::init(channels, slices, &mut rng);
    let x = rng.normal_matrix(n, channels);
    let reference = physattn_original(&x, &p)?;
    let fast = rel_diff(&physattn_fast(&x, &p)?, &reference);
    let tiled = default_tile_sizes(n)
        .into_iter()
        .map(|t| Ok((t, rel_diff(&physattn_tiled(&x, &p, t)?, &reference))))
        .collect::<Result<_>>()?;
    Ok(EquivalenceTrial { n, seed, fast, tiled })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trial_agrees() {
        let t = equivalence_trial(100, 8, 4, 3).unwrap();
        assert_eq!(t.tiled.len(), 4);
        assert!(t.worst() <= 1e-10, "{t:?}");
    }
}
