use crate::counters::OpCounter;
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Real};

use super::{
    physattn_fast_counted, physattn_original_counted, physattn_tiled_counted, AttnOptions, HeadParams,
    Mode,
};

/// Splits the `C` channels into `H = heads.len()` contiguous blocks, runs the
/// selected path per head and concatenates the results.
pub fn multihead_physattn_counted<T: Real>(
    x: &Matrix<T>,
    heads: &[HeadParams<T>],
    opts: AttnOptions,
    ctr: &mut OpCounter,
) -> Result<Matrix<T>> {
    let h = heads.len();
    if h == 0 || !x.cols().is_multiple_of(h) {
        return Err(Error::invalid(format!(
            "{} channels cannot be split into {} heads",
            x.cols(),
            h
        )));
    }
    let ch = x.cols() / h;
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for (i, p) in heads.iter().enumerate() {
        let xh = x.col_block(i * ch, ch);
        let yh = match opts.mode {
            Mode::Original => physattn_original_counted(&xh, p, ctr)?,
            Mode::Fast => physattn_fast_counted(&xh, p, ctr)?,
            Mode::Tiled => physattn_tiled_counted(&xh, p, opts.tile_size, opts.parallel, ctr)?,
        };
        out.set_col_block(i * ch, &yh);
    }
    Ok(out)
}

pub fn multihead_physattn<T: Real>(
    x: &Matrix<T>,
    heads: &[HeadParams<T>],
    opts: AttnOptions,
) -> Result<Matrix<T>> {
    multihead_physattn_counted(x, heads, opts, &mut OpCounter::new())
}
