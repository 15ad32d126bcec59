//! Physics-Attention: soft assignment of mesh points to a small set of
//! learned slices, self-attention among the slice states, and redistribution
//! back to the points.
//!
//! Three interchangeable execution paths are provided per head:
//!
//! * [`Mode::Original`] projects every point with Linear1 before slicing and
//!   applies Linear3 after deslicing. Both projections cost `O(N C²)`.
//! * [`Mode::Fast`] slices the raw features (`s_raw = wᵀx`), normalizes, and
//!   only then applies Linear1 to the `M` states; Linear3 is likewise moved to
//!   the state side. Only three stages touch all `N` points.
//! * [`Mode::Tiled`] is the fast path with the points processed in tiles of
//!   `tile_size`. Per-tile `(s_raw, d)` contributions are summed into a
//!   [`SliceAccumulator`], and slice weights are recomputed per tile when
//!   emitting the output, so at most `tile_size × M` weights exist at once.
//!
//! Linear1 is applied after normalization (`Linear1(s_raw · d⁻¹)`), which is
//! exactly the original slice even when Linear1 has a bias. Deslicing with a
//! row-stochastic `w` passes the Linear3 bias through unchanged, so
//! `w · Linear3(s')` equals `Linear3(w · s')` as well.

mod check;
mod heads;
mod slice;
mod states;
mod tiled;

use serde::{Deserialize, Serialize};

use crate::counters::{OpCounter, Stage};
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Real, Rng};

pub use check::{default_tile_sizes, equivalence_trial, EquivalenceTrial};
pub use heads::{multihead_physattn, multihead_physattn_counted};
pub use slice::{
    deslice_fast, deslice_original, physattn_fast, physattn_fast_counted, physattn_original,
    physattn_original_counted, slice_fast, slice_fast_literal, slice_original, slice_weights,
};
pub use states::{states_attention, states_attention_counted};
pub use tiled::{
    accumulate_tiles, deslice_cached, finalize_states, physattn_tiled, physattn_tiled_counted,
    tile_ranges,
};

/// Smallest admissible slice mass `d_jj`.
pub const MIN_SLICE_MASS: f64 = 1e-30;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Original,
    #[default]
    Fast,
    Tiled,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "original" => Ok(Mode::Original),
            "fast" => Ok(Mode::Fast),
            "tiled" => Ok(Mode::Tiled),
            other => Err(Error::invalid(format!("unknown attention mode `{other}`"))),
        }
    }
}

/// How a Physics-Attention layer is executed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnOptions {
    pub mode: Mode,
    /// Points per tile in [`Mode::Tiled`]; ignored otherwise.
    pub tile_size: usize,
    /// Process tiles on the rayon pool. Tile contributions are still reduced
    /// in index order, so results match the sequential path bit for bit.
    pub parallel: bool,
}

impl AttnOptions {
    pub fn new(mode: Mode, tile_size: usize) -> Self {
        Self {
            mode,
            tile_size,
            parallel: false,
        }
    }

    pub fn original() -> Self {
        Self::new(Mode::Original, 0)
    }

    pub fn fast() -> Self {
        Self::new(Mode::Fast, 0)
    }

    pub fn tiled(tile_size: usize) -> Self {
        Self::new(Mode::Tiled, tile_size)
    }
}

/// Weights of one attention head. All linear maps are stored in×out and
/// applied as `x · W + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams<T = f64> {
    pub w1: Matrix<T>,
    pub b1: Vec<T>,
    pub w2: Matrix<T>,
    pub b2: Vec<T>,
    pub w3: Matrix<T>,
    pub b3: Vec<T>,
    pub wq: Matrix<T>,
    pub wk: Matrix<T>,
    pub wv: Matrix<T>,
    pub wo: Matrix<T>,
}

impl<T: Real> HeadParams<T> {
    /// Uniform `±1/√fan_in` initialization.
    pub fn init(channels: usize, slices: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (channels as f64).sqrt();
        let mut mat = |cols: usize| rng.uniform_matrix::<T>(channels, cols, -bound, bound);
        let (w1, w2, w3) = (mat(channels), mat(slices), mat(channels));
        let (wq, wk, wv, wo) = (mat(channels), mat(channels), mat(channels), mat(channels));
        let mut vec = |len: usize| rng.uniform_matrix::<T>(1, len, -bound, bound).into_data();
        let (b1, b2, b3) = (vec(channels), vec(slices), vec(channels));
        Self {
            w1,
            b1,
            w2,
            b2,
            w3,
            b3,
            wq,
            wk,
            wv,
            wo,
        }
    }

    pub fn zeros(channels: usize, slices: usize) -> Self {
        let sq = || Matrix::zeros(channels, channels);
        Self {
            w1: sq(),
            b1: vec![T::zero(); channels],
            w2: Matrix::zeros(channels, slices),
            b2: vec![T::zero(); slices],
            w3: sq(),
            b3: vec![T::zero(); channels],
            wq: sq(),
            wk: sq(),
            wv: sq(),
            wo: sq(),
        }
    }

    /// Per-head channel count `C_h`.
    pub fn channels(&self) -> usize {
        self.w1.rows()
    }

    /// Slice count `M`.
    pub fn slices(&self) -> usize {
        self.w2.cols()
    }

    pub fn without_biases(mut self) -> Self {
        self.b1.iter_mut().for_each(|b| *b = T::zero());
        self.b2.iter_mut().for_each(|b| *b = T::zero());
        self.b3.iter_mut().for_each(|b| *b = T::zero());
        self
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        let m = self.slices();
        let square = [&self.w1, &self.w3, &self.wq, &self.wk, &self.wv, &self.wo];
        for w in square {
            if w.shape() != (c, c) {
                return Err(Error::Shape {
                    op: "head params",
                    left: (c, c),
                    right: w.shape(),
                });
            }
        }
        if self.w2.rows() != c || self.b1.len() != c || self.b3.len() != c || self.b2.len() != m {
            return Err(Error::Shape {
                op: "head params",
                left: (c, m),
                right: self.w2.shape(),
            });
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> HeadParams<U> {
        let v = |b: &[T]| b.iter().map(|x| U::from_f64_lossy(x.to_f64().unwrap())).collect();
        HeadParams {
            w1: self.w1.cast(),
            b1: v(&self.b1),
            w2: self.w2.cast(),
            b2: v(&self.b2),
            w3: self.w3.cast(),
            b3: v(&self.b3),
            wq: self.wq.cast(),
            wk: self.wk.cast(),
            wv: self.wv.cast(),
            wo: self.wo.cast(),
        }
    }
}

/// Row-stochastic `N × M` soft assignment of points to slices.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceWeights<T = f64>(pub Matrix<T>);

impl<T: Real> SliceWeights<T> {
    pub fn values(&self) -> &Matrix<T> {
        &self.0
    }

    /// Column sums, i.e. the diagonal of the normalization matrix `d`.
    pub fn mass(&self) -> Vec<T> {
        self.0.col_sums()
    }
}

/// `M × C_h` slice states.
#[derive(Clone, Debug, PartialEq)]
pub struct PhysicalStates<T = f64>(pub Matrix<T>);

impl<T: Real> PhysicalStates<T> {
    pub fn values(&self) -> &Matrix<T> {
        &self.0
    }
}

/// Running `(s_raw, d)` totals over tiles or chunks.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceAccumulator<T = f64> {
    pub s_raw: Matrix<T>,
    pub d: Vec<T>,
    pub tiles_seen: usize,
}

impl<T: Real> SliceAccumulator<T> {
    pub fn new(slices: usize, channels: usize) -> Self {
        Self {
            s_raw: Matrix::zeros(slices, channels),
            d: vec![T::zero(); slices],
            tiles_seen: 0,
        }
    }

    /// Contribution `(wᵀx, colsum(w))` of one tile.
    pub fn tile_contribution(w: &Matrix<T>, x: &Matrix<T>, ctr: &mut OpCounter) -> Result<Self> {
        ctr.matmul(Stage::Slice, w.rows(), w.cols(), x.cols());
        Ok(Self {
            s_raw: crate::linalg::matmul_tn(w, x)?,
            d: w.col_sums(),
            tiles_seen: 1,
        })
    }

    pub fn add(&mut self, other: &SliceAccumulator<T>) {
        self.s_raw.add_assign(&other.s_raw);
        for (a, &b) in self.d.iter_mut().zip(&other.d) {
            *a += b;
        }
        self.tiles_seen += other.tiles_seen;
    }

    pub fn add_tile(&mut self, w: &Matrix<T>, x: &Matrix<T>, ctr: &mut OpCounter) -> Result<()> {
        let part = Self::tile_contribution(w, x, ctr)?;
        self.add(&part);
        Ok(())
    }

    /// `s_raw · d⁻¹`.
    pub fn normalized(&self) -> Result<Matrix<T>> {
        let inv = inverse_mass(&self.d)?;
        Ok(self.s_raw.scale_rows(&inv))
    }
}

pub(crate) fn inverse_mass<T: Real>(d: &[T]) -> Result<Vec<T>> {
    let floor = T::from_f64_lossy(MIN_SLICE_MASS);
    d.iter()
        .enumerate()
        .map(|(j, &v)| {
            if v.is_finite() && v >= floor {
                Ok(v.recip())
            } else {
                Err(Error::DegenerateSlice {
                    slice: j,
                    value: v.to_f64().unwrap_or(f64::NAN),
                })
            }
        })
        .collect()
}

pub(crate) fn check_input<T: Real>(x: &Matrix<T>, p: &HeadParams<T>) -> Result<()> {
    if x.rows() == 0 {
        return Err(Error::invalid("physics attention needs at least one point"));
    }
    if x.cols() != p.channels() {
        return Err(Error::Shape {
            op: "physattn input",
            left: x.shape(),
            right: p.w1.shape(),
        });
    }
    Ok(())
}
