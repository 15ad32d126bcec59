use crate::counters::{OpCounter, Stage};
use crate::error::Result;
use crate::linalg::{affine, matmul, matmul_tn, softmax_rows, Matrix, Real};

use super::{
    check_input, inverse_mass, states_attention_counted, HeadParams, PhysicalStates,
    SliceAccumulator, SliceWeights,
};

/// `Softmax(Linear2(x))`.
pub fn slice_weights<T: Real>(
    x: &Matrix<T>,
    p: &HeadParams<T>,
    ctr: &mut OpCounter,
) -> Result<Matrix<T>> {
    ctr.matmul(Stage::Linear2, x.rows(), x.cols(), p.slices());
    ctr.softmax(Stage::Linear2, x.rows() * p.slices());
    ctr.transient("w", x.rows(), p.slices());
    softmax_rows(&affine(x, &p.w2, &p.b2)?)
}

pub(crate) fn slice_original_counted<T: Real>(
    x: &Matrix<T>,
    p: &HeadParams<T>,
    ctr: &mut OpCounter,
) -> Result<(PhysicalStates<T>, SliceWeights<T>)> {
    check_input(x, p)?;
    let (n, c) = x.shape();
    ctr.matmul(Stage::Linear1, n, c, c);
    ctr.transient("x_proj", n, c);
    let x_proj = affine(x, &p.w1, &p.b1)?;
    let w = slice_weights(x, p, ctr)?;
    let inv = inverse_mass(&w.col_sums())?;
    // (w d⁻¹)ᵀ x_proj, column scaling applied to w itself
    let mut wn = w.clone();
    for i in 0..n {
        for (v, &s) in wn.row_mut(i).iter_mut().zip(&inv) {
            *v *= s;
        }
    }
    ctr.matmul(Stage::Slice, n, p.slices(), c);
    let s = matmul_tn(&wn, &x_proj)?;
    Ok((PhysicalStates(s), SliceWeights(w)))
}

/// Slice as written originally: project all points, then take the
/// mass-normalized weighted sum.
pub fn slice_original<T: Real>(
    x: &Matrix<T>,
    p: &HeadParams<T>,
) -> Result<(PhysicalStates<T>, SliceWeights<T>)> {
    slice_original_counted(x, p, &mut OpCounter::new())
}

pub(crate) fn slice_fast_counted<T: Real>(
    x: &Matrix<T>,
    p: &HeadParams<T>,
    ctr: &mut OpCounter,
) -> Result<(PhysicalStates<T>, SliceWeights<T>)> {
    check_input(x, p)?;
    let w = slice_weights(x, p, ctr)?;
    let mut acc = SliceAccumulator::new(p.slices(), p.channels());
    acc.add_tile(&w, x, ctr)?;
    let s = project_states(&acc, p, ctr)?;
    Ok((PhysicalStates(s), SliceWeights(w)))
}

/// Slice through the raw features: `Linear1(wᵀx · d⁻¹)`. Never forms the
/// projected `N × C` features.
pub fn slice_fast<T: Real>(
    x: &Matrix<T>,
    p: &HeadParams<T>,
) -> Result<(PhysicalStates<T>, SliceWeights<T>)> {
    slice_fast_counted(x, p, &mut OpCounter::new())
}

/// `Linear1(wᵀx) · d⁻¹`, normalizing after the projection. Equal to
/// [`slice_original`] only when Linear1 has no bias.
pub fn slice_fast_literal<T: Real>(x: &Matrix<T>, p: &HeadParams<T>) -> Result<PhysicalStates<T>> {
    check_input(x, p)?;
    let mut ctr = OpCounter::new();
    let w = slice_weights(x, p, &mut ctr)?;
    let inv = inverse_mass(&w.col_sums())?;
    let s_raw = matmul_tn(&w, x)?;
    let projected = affine(&s_raw, &p.w1, &p.b1)?;
    Ok(PhysicalStates(projected.scale_rows(&inv)))
}

/// `Linear1(s_raw · d⁻¹)` from accumulated totals.
pub(crate) fn project_states<T: Real>(
    acc: &SliceAccumulator<T>,
    p: &HeadParams<T>,
    ctr: &mut OpCounter,
) -> Result<Matrix<T>> {
    let normalized = acc.normalized()?;
    ctr.matmul(Stage::Linear1, normalized.rows(), normalized.cols(), p.channels());
    affine(&normalized, &p.w1, &p.b1)
}

pub(crate) fn deslice_original_counted<T: Real>(
    s_prime: &PhysicalStates<T>,
    w: &SliceWeights<T>,
    p: &HeadParams<T>,
    ctr: &mut OpCounter,
) -> Result<Matrix<T>> {
    let (n, m) = w.0.shape();
    let c = s_prime.0.cols();
    ctr.matmul(Stage::Deslice, n, m, c);
    ctr.transient("ws", n, c);
    let z = matmul(&w.0, &s_prime.0)?;
    ctr.matmul(Stage::Linear3, n, c, c);
    affine(&z, &p.w3, &p.b3)
}

/// `Linear3(w · s')`.
pub fn deslice_original<T: Real>(
    s_prime: &PhysicalStates<T>,
    w: &SliceWeights<T>,
    p: &HeadParams<T>,
) -> Result<Matrix<T>> {
    deslice_original_counted(s_prime, w, p, &mut OpCounter::new())
}

/// `Linear3(s')` on the state side.
pub(crate) fn project_out<T: Real>(
    s_prime: &Matrix<T>,
    p: &HeadParams<T>,
    ctr: &mut OpCounter,
) -> Result<Matrix<T>> {
    ctr.matmul(Stage::Linear3, s_prime.rows(), s_prime.cols(), p.channels());
    affine(s_prime, &p.w3, &p.b3)
}

/// `w · s'_out`.
pub(crate) fn emit<T: Real>(w: &Matrix<T>, s_out: &Matrix<T>, ctr: &mut OpCounter) -> Result<Matrix<T>> {
    ctr.matmul(Stage::Deslice, w.rows(), w.cols(), s_out.cols());
    matmul(w, s_out)
}

/// `w · Linear3(s')`. Requires row-stochastic `w` to match [`deslice_original`].
pub fn deslice_fast<T: Real>(
    s_prime: &PhysicalStates<T>,
    w: &SliceWeights<T>,
    p: &HeadParams<T>,
) -> Result<Matrix<T>> {
    let mut ctr = OpCounter::new();
    let s_out = project_out(&s_prime.0, p, &mut ctr)?;
    emit(&w.0, &s_out, &mut ctr)
}

pub fn physattn_original_counted<T: Real>(
    x: &Matrix<T>,
    p: &HeadParams<T>,
    ctr: &mut OpCounter,
) -> Result<Matrix<T>> {
    let (s, w) = slice_original_counted(x, p, ctr)?;
    let s_prime = states_attention_counted(&s, p, ctr)?;
    deslice_original_counted(&s_prime, &w, p, ctr)
}

/// Single-head Physics-Attention, original ordering.
pub fn physattn_original<T: Real>(x: &Matrix<T>, p: &HeadParams<T>) -> Result<Matrix<T>> {
    physattn_original_counted(x, p, &mut OpCounter::new())
}

pub fn physattn_fast_counted<T: Real>(
    x: &Matrix<T>,
    p: &HeadParams<T>,
    ctr: &mut OpCounter,
) -> Result<Matrix<T>> {
    let (s, w) = slice_fast_counted(x, p, ctr)?;
    let s_prime = states_attention_counted(&s, p, ctr)?;
    let s_out = project_out(&s_prime.0, p, ctr)?;
    emit(&w.0, &s_out, ctr)
}

/// Single-head Physics-Attention, reordered so that Linear1 and Linear3 act
/// on the `M` states.
pub fn physattn_fast<T: Real>(x: &Matrix<T>, p: &HeadParams<T>) -> Result<Matrix<T>> {
    physattn_fast_counted(x, p, &mut OpCounter::new())
}
