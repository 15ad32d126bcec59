//! Tile loop for the fast path.
//!
//! First sweep: per tile, `w_t = Softmax(Linear2(x_t))` and its
//! `(w_tᵀ x_t, colsum w_t)` contribution are folded into a
//! [`SliceAccumulator`]. The states are then finalized once. Second sweep:
//! `w_t` is recomputed and `w_t · s'_out` written to the tile's output rows.
//! No tile's weights outlive its iteration.

use std::ops::Range;

use rayon::prelude::*;

use crate::counters::OpCounter;
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Real};

use super::slice::{emit, project_out, project_states, slice_weights};
use super::{check_input, states_attention_counted, HeadParams, PhysicalStates, SliceAccumulator};

/// Index ranges of `ceil(n / tile)` tiles; the last may be short.
pub fn tile_ranges(n: usize, tile: usize) -> Vec<Range<usize>> {
    assert!(tile > 0, "tile size must be positive");
    (0..n).step_by(tile).map(|a| a..(a + tile).min(n)).collect()
}

fn effective_tile(n: usize, tile_size: usize) -> Result<usize> {
    if tile_size == 0 {
        return Err(Error::invalid("tile_size must be at least 1"));
    }
    Ok(tile_size.min(n))
}

/// A tile's row range, emitted rows and local counts.
type TileOutput<T> = (Range<usize>, Matrix<T>, OpCounter);

/// First sweep only: the accumulated `(s_raw, d)` over all tiles.
pub fn accumulate_tiles<T: Real>(
    x: &Matrix<T>,
    p: &HeadParams<T>,
    tile_size: usize,
    parallel: bool,
    ctr: &mut OpCounter,
) -> Result<SliceAccumulator<T>> {
    check_input(x, p)?;
    let tile = effective_tile(x.rows(), tile_size)?;
    let ranges = tile_ranges(x.rows(), tile);
    let mut acc = SliceAccumulator::new(p.slices(), p.channels());
    if parallel {
        let parts: Vec<Result<(SliceAccumulator<T>, OpCounter)>> = ranges
            .into_par_iter()
            .map(|r| {
                let mut local = OpCounter::new();
                let xt = x.row_range(r);
                let wt = slice_weights(&xt, p, &mut local)?;
                Ok((SliceAccumulator::tile_contribution(&wt, &xt, &mut local)?, local))
            })
            .collect();
        for part in parts {
            let (contribution, local) = part?;
            acc.add(&contribution);
            ctr.merge(&local);
        }
    } else {
        for r in ranges {
            let xt = x.row_range(r);
            let wt = slice_weights(&xt, p, ctr)?;
            acc.add_tile(&wt, &xt, ctr)?;
        }
    }
    Ok(acc)
}

/// Second sweep: recompute each tile's weights and emit `w_t · s'_out`.
pub(crate) fn emit_tiles<T: Real>(
    x: &Matrix<T>,
    p: &HeadParams<T>,
    s_out: &Matrix<T>,
    tile: usize,
    parallel: bool,
    ctr: &mut OpCounter,
) -> Result<Matrix<T>> {
    let ranges = tile_ranges(x.rows(), tile);
    let mut out = Matrix::zeros(x.rows(), s_out.cols());
    if parallel {
        let parts: Vec<Result<TileOutput<T>>> = ranges
            .into_par_iter()
            .map(|r| {
                let mut local = OpCounter::new();
                let xt = x.row_range(r.clone());
                let wt = slice_weights(&xt, p, &mut local)?;
                Ok((r, emit(&wt, s_out, &mut local)?, local))
            })
            .collect();
        for part in parts {
            let (r, yt, local) = part?;
            out.data_mut()[r.start * s_out.cols()..r.end * s_out.cols()].copy_from_slice(yt.data());
            ctr.merge(&local);
        }
    } else {
        for r in ranges {
            let xt = x.row_range(r.clone());
            let wt = slice_weights(&xt, p, ctr)?;
            let yt = emit(&wt, s_out, ctr)?;
            out.data_mut()[r.start * s_out.cols()..r.end * s_out.cols()].copy_from_slice(yt.data());
        }
    }
    Ok(out)
}

/// `s'_out = Linear3(Attention(Linear1(s_raw · d⁻¹)))` from accumulated totals.
pub fn finalize_states<T: Real>(
    acc: &SliceAccumulator<T>,
    p: &HeadParams<T>,
    ctr: &mut OpCounter,
) -> Result<Matrix<T>> {
    let s = PhysicalStates(project_states(acc, p, ctr)?);
    let s_prime = states_attention_counted(&s, p, ctr)?;
    project_out(&s_prime.0, p, ctr)
}

/// Deslice against precomputed `s'_out`: `Softmax(Linear2(x)) · s'_out`,
/// one tile at a time. Rows are independent of each other.
pub fn deslice_cached<T: Real>(
    x: &Matrix<T>,
    p: &HeadParams<T>,
    s_out: &Matrix<T>,
    tile_size: usize,
    ctr: &mut OpCounter,
) -> Result<Matrix<T>> {
    if x.rows() == 0 {
        return Ok(Matrix::zeros(0, s_out.cols()));
    }
    let tile = effective_tile(x.rows(), tile_size)?;
    emit_tiles(x, p, s_out, tile, false, ctr)
}

pub fn physattn_tiled_counted<T: Real>(
    x: &Matrix<T>,
    p: &HeadParams<T>,
    tile_size: usize,
    parallel: bool,
    ctr: &mut OpCounter,
) -> Result<Matrix<T>> {
    check_input(x, p)?;
    let tile = effective_tile(x.rows(), tile_size)?;
    let acc = accumulate_tiles(x, p, tile, parallel, ctr)?;
    let s_out = finalize_states(&acc, p, ctr)?;
    emit_tiles(x, p, &s_out, tile, parallel, ctr)
}

/// Tiled fast-path Physics-Attention. `tile_size` larger than the point count
/// is treated as one tile.
pub fn physattn_tiled<T: Real>(x: &Matrix<T>, p: &HeadParams<T>, tile_size: usize) -> Result<Matrix<T>> {
    physattn_tiled_counted(x, p, tile_size, false, &mut OpCounter::new())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{rel_diff, Rng};
    use crate::physattn::{physattn_fast, slice_fast};

    fn setup(n: usize, seed: u64) -> (Matrix, HeadParams) {
        let mut rng = Rng::seed(seed);
        (rng.uniform_matrix(n, 6, -1.0, 1.0), HeadParams::init(6, 5, &mut rng))
    }

    #[test]
    fn ranges_cover_with_short_tail() {
        let r = tile_ranges(10, 4);
        assert_eq!(r, vec![0..4, 4..8, 8..10]);
        assert_eq!(tile_ranges(3, 7), vec![0..3]);
    }

    #[test]
    fn single_tile_is_bit_identical() {
        let (x, p) = setup(200, 1);
        assert_eq!(physattn_tiled(&x, &p, 200).unwrap(), physattn_fast(&x, &p).unwrap());
    }

    #[test]
    fn tile_sizes_agree() {
        let (x, p) = setup(1000, 2);
        let reference = physattn_fast(&x, &p).unwrap();
        for tile in [1000, 250, 125, 7] {
            let y = physattn_tiled(&x, &p, tile).unwrap();
            assert!(rel_diff(&y, &reference) <= 1e-10, "tile {tile}");
        }
    }

    #[test]
    fn accumulated_mass_matches_monolithic() {
        let (x, p) = setup(1000, 3);
        let (_, w) = slice_fast(&x, &p).unwrap();
        let acc = accumulate_tiles(&x, &p, 7, false, &mut OpCounter::new()).unwrap();
        assert_eq!(acc.tiles_seen, 143);
        for (a, b) in acc.d.iter().zip(w.mass()) {
            assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn peak_weight_buffer_is_one_tile() {
        let (x, p) = setup(1000, 4);
        let mut ctr = OpCounter::new();
        physattn_tiled_counted(&x, &p, 125, false, &mut ctr).unwrap();
        let w = ctr.peak_transient("w").unwrap();
        assert_eq!((w.rows, w.cols), (125, 5));
    }

    #[test]
    fn parallel_matches_sequential() {
        let (x, p) = setup(999, 5);
        let seq = physattn_tiled(&x, &p, 64).unwrap();
        let par = physattn_tiled_counted(&x, &p, 64, true, &mut OpCounter::new()).unwrap();
        assert!(rel_diff(&par, &seq) <= 1e-8);
    }

    #[test]
    fn rejects_zero_tile() {
        let (x, p) = setup(10, 6);
        assert!(physattn_tiled(&x, &p, 0).is_err());
    }
}
