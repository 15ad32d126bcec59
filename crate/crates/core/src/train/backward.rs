//! Reverse-mode gradients of the relative L2 loss for the fixed network.
//!
//! The forward sweep records a tape per layer; the backward sweep walks it in
//! reverse. For one fast-path head with input `a`, slice weights `w`, raw
//! states `s_raw = wᵀa`, masses `d` and output `y = w · s'_out`:
//!
//! ```text
//! ds'_out = wᵀ dy
//! ds_raw  = d⁻¹ · ds_norm          dd_j = −Σ_c ds_norm[j,c] · s_norm[j,c] / d_j
//! dw      = dy s'_outᵀ + a ds_rawᵀ + 1 ddᵀ
//! dz      = w ⊙ (dw − rowsum(dw ⊙ w))
//! da      = w ds_raw + dz W2ᵀ
//! ```
//!
//! Every term in `dw` is row-local, so the tiled path computes it one tile at
//! a time. With checkpointing the tile weights are recomputed in two sweeps
//! (first to accumulate `ds'_out`, then for `dw`) and never kept.

use std::ops::Range;

use crate::counters::OpCounter;
use crate::error::{Error, Result};
use crate::geometry::MeshBatch;
use crate::linalg::{affine, gelu, gelu_grad, matmul, matmul_nt, matmul_tn, softmax_rows, Matrix};
use crate::model::{embed_input, Block, Linear, ModelConfig, ModelParams, Norm, LN_EPS};
use crate::physattn::{inverse_mass, slice_weights, tile_ranges, AttnOptions, HeadParams, Mode, SliceAccumulator};

use super::GradStore;

/// Attention path and tile checkpointing used when differentiating.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BackwardOptions {
    pub attn: AttnOptions,
    /// Tiled mode only: recompute tile weights in backward instead of
    /// keeping them.
    pub checkpoint: bool,
}

impl BackwardOptions {
    pub fn new(attn: AttnOptions) -> Self {
        Self { attn, checkpoint: true }
    }
}

fn accumulate(dst: &mut Matrix, src: &Matrix) {
    dst.add_assign(src);
}

fn accumulate_vec(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

/// `gW += xᵀ dy`, `gb += colsum dy`, returns `dy Wᵀ`.
fn linear_back(x: &Matrix, w: &Matrix, dy: &Matrix, gw: &mut Matrix, gb: &mut [f64]) -> Result<Matrix> {
    accumulate(gw, &matmul_tn(x, dy)?);
    accumulate_vec(gb, &dy.col_sums());
    matmul_nt(dy, w)
}

fn gelu_back(pre: &Matrix, dg: &Matrix) -> Matrix {
    Matrix::from_fn(pre.rows(), pre.cols(), |i, j| dg[(i, j)] * gelu_grad(pre[(i, j)]))
}

/// Row-wise softmax Jacobian-vector product: `p ⊙ (dp − rowsum(dp ⊙ p))`.
fn softmax_back(p: &Matrix, dp: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(p.rows(), p.cols());
    for i in 0..p.rows() {
        let (pr, dr) = (p.row(i), dp.row(i));
        let dot: f64 = pr.iter().zip(dr).map(|(a, b)| a * b).sum();
        for (o, (a, b)) in out.row_mut(i).iter_mut().zip(pr.iter().zip(dr)) {
            *o = a * (b - dot);
        }
    }
    out
}

struct LnTape {
    xhat: Matrix,
    inv: Vec<f64>,
}

fn ln_forward(x: &Matrix, n: &Norm) -> (Matrix, LnTape) {
    let c = x.cols() as f64;
    let mut xhat = Matrix::zeros(x.rows(), x.cols());
    let mut inv = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / c;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c;
        let k = (var + LN_EPS).sqrt().recip();
        for (o, &v) in xhat.row_mut(i).iter_mut().zip(row) {
            *o = (v - mean) * k;
        }
        inv.push(k);
    }
    let y = Matrix::from_fn(x.rows(), x.cols(), |i, j| xhat[(i, j)] * n.gain[j] + n.shift[j]);
    (y, LnTape { xhat, inv })
}

fn ln_back(t: &LnTape, n: &Norm, g: &mut Norm, dy: &Matrix) -> Matrix {
    let c = dy.cols() as f64;
    let mut dx = Matrix::zeros(dy.rows(), dy.cols());
    for i in 0..dy.rows() {
        let (xh, d) = (t.xhat.row(i), dy.row(i));
        let dxh: Vec<f64> = d.iter().zip(&n.gain).map(|(a, b)| a * b).collect();
        for j in 0..d.len() {
            g.gain[j] += d[j] * xh[j];
            g.shift[j] += d[j];
        }
        let mean_d = dxh.iter().sum::<f64>() / c;
        let mean_dx = dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / c;
        for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
            *o = t.inv[i] * (dxh[j] - mean_d - xh[j] * mean_dx);
        }
    }
    dx
}

struct AttnTape {
    s: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    a: Matrix,
    z: Matrix,
}

fn attn_forward(s: Matrix, p: &HeadParams) -> Result<(Matrix, AttnTape)> {
    let scale = 1.0 / (s.cols() as f64).sqrt();
    let q = matmul(&s, &p.wq)?;
    let k = matmul(&s, &p.wk)?;
    let v = matmul(&s, &p.wv)?;
    let a = softmax_rows(&matmul_nt(&q, &k)?.scale(scale))?;
    let z = matmul(&a, &v)?;
    let out = matmul(&z, &p.wo)?;
    Ok((out, AttnTape { s, q, k, v, a, z }))
}

fn attn_back(t: &AttnTape, p: &HeadParams, g: &mut HeadParams, dout: &Matrix) -> Result<Matrix> {
    let scale = 1.0 / (t.s.cols() as f64).sqrt();
    accumulate(&mut g.wo, &matmul_tn(&t.z, dout)?);
    let dz = matmul_nt(dout, &p.wo)?;
    let da = matmul_nt(&dz, &t.v)?;
    let dv = matmul_tn(&t.a, &dz)?;
    let dsc = softmax_back(&t.a, &da).scale(scale);
    let dq = matmul(&dsc, &t.k)?;
    let dk = matmul_tn(&dsc, &t.q)?;
    accumulate(&mut g.wq, &matmul_tn(&t.s, &dq)?);
    accumulate(&mut g.wk, &matmul_tn(&t.s, &dk)?);
    accumulate(&mut g.wv, &matmul_tn(&t.s, &dv)?);
    let mut ds = matmul_nt(&dq, &p.wq)?;
    ds.add_assign(&matmul_nt(&dk, &p.wk)?);
    ds.add_assign(&matmul_nt(&dv, &p.wv)?);
    Ok(ds)
}

/// State-side tape of the reordered path.
struct StateTape {
    inv_d: Vec<f64>,
    s_norm: Matrix,
    attn: AttnTape,
    s_prime: Matrix,
    s_out: Matrix,
}

fn states_forward(acc: &SliceAccumulator, p: &HeadParams) -> Result<StateTape> {
    let inv_d = inverse_mass(&acc.d)?;
    let s_norm = acc.s_raw.scale_rows(&inv_d);
    let s = affine(&s_norm, &p.w1, &p.b1)?;
    let (s_prime, attn) = attn_forward(s, p)?;
    let s_out = affine(&s_prime, &p.w3, &p.b3)?;
    Ok(StateTape {
        inv_d,
        s_norm,
        attn,
        s_prime,
        s_out,
    })
}

/// Back through `s'_out = Linear3(Attn(Linear1(s_raw d⁻¹)))`; returns
/// `(ds_raw, dd)`.
fn states_back(t: &StateTape, p: &HeadParams, g: &mut HeadParams, ds_out: &Matrix) -> Result<(Matrix, Vec<f64>)> {
    let ds_prime = linear_back(&t.s_prime, &p.w3, ds_out, &mut g.w3, &mut g.b3)?;
    let ds = attn_back(&t.attn, p, g, &ds_prime)?;
    let ds_norm = linear_back(&t.s_norm, &p.w1, &ds, &mut g.w1, &mut g.b1)?;
    let ds_raw = ds_norm.scale_rows(&t.inv_d);
    let dd = (0..ds_norm.rows())
        .map(|j| {
            let dot: f64 = ds_norm.row(j).iter().zip(t.s_norm.row(j)).map(|(a, b)| a * b).sum();
            -dot * t.inv_d[j]
        })
        .collect();
    Ok((ds_raw, dd))
}

enum HeadTape {
    Original {
        x_proj: Matrix,
        w: Matrix,
        inv_d: Vec<f64>,
        s: Matrix,
        attn: AttnTape,
        s_prime: Matrix,
        ws: Matrix,
    },
    /// Fast and tiled paths. `w` holds per-tile weights unless checkpointed.
    Reordered {
        tiles: Vec<Range<usize>>,
        w: Option<Vec<Matrix>>,
        states: StateTape,
    },
}

fn head_forward(a: &Matrix, p: &HeadParams, opts: BackwardOptions, ctr: &mut OpCounter) -> Result<(Matrix, HeadTape)> {
    let (n, m) = (a.rows(), p.slices());
    match opts.attn.mode {
        Mode::Original => {
            let x_proj = affine(a, &p.w1, &p.b1)?;
            let w = slice_weights(a, p, ctr)?;
            let inv_d = inverse_mass(&w.col_sums())?;
            let s = matmul_tn(&w, &x_proj)?.scale_rows(&inv_d);
            let (s_prime, attn) = attn_forward(s.clone(), p)?;
            let ws = matmul(&w, &s_prime)?;
            let y = affine(&ws, &p.w3, &p.b3)?;
            for (name, rows, cols) in [("x_proj", n, a.cols()), ("w", n, m), ("ws", n, a.cols())] {
                ctr.retain(name, rows, cols);
            }
            let tape = HeadTape::Original {
                x_proj,
                w,
                inv_d,
                s,
                attn,
                s_prime,
                ws,
            };
            Ok((y, tape))
        }
        Mode::Fast | Mode::Tiled => {
            let tile = match opts.attn.mode {
                Mode::Fast => n,
                _ if opts.attn.tile_size == 0 => return Err(Error::invalid("tile_size must be at least 1")),
                _ => opts.attn.tile_size.min(n),
            };
            let keep = opts.attn.mode == Mode::Fast || !opts.checkpoint;
            let tiles = tile_ranges(n, tile);
            let mut acc = SliceAccumulator::new(m, a.cols());
            let mut kept = Vec::new();
            for r in &tiles {
                let at = a.row_range(r.clone());
                let wt = slice_weights(&at, p, ctr)?;
                acc.add_tile(&wt, &at, ctr)?;
                if keep {
                    ctr.retain("w", wt.rows(), m);
                    kept.push(wt);
                }
            }
            let states = states_forward(&acc, p)?;
            let mut y = Matrix::zeros(n, a.cols());
            for (i, r) in tiles.iter().enumerate() {
                let yt = match kept.get(i) {
                    Some(wt) => matmul(wt, &states.s_out)?,
                    None => matmul(&slice_weights(&a.row_range(r.clone()), p, ctr)?, &states.s_out)?,
                };
                y.data_mut()[r.start * a.cols()..r.end * a.cols()].copy_from_slice(yt.data());
            }
            let tape = HeadTape::Reordered {
                tiles,
                w: keep.then_some(kept),
                states,
            };
            Ok((y, tape))
        }
    }
}

fn head_back(
    a: &Matrix,
    p: &HeadParams,
    g: &mut HeadParams,
    tape: &HeadTape,
    dy: &Matrix,
    ctr: &mut OpCounter,
) -> Result<Matrix> {
    match tape {
        HeadTape::Original {
            x_proj,
            w,
            inv_d,
            s,
            attn,
            s_prime,
            ws,
        } => {
            let dws = linear_back(ws, &p.w3, dy, &mut g.w3, &mut g.b3)?;
            let ds_prime = matmul_tn(w, &dws)?;
            let mut dw = matmul_nt(&dws, s_prime)?;
            let ds = attn_back(attn, p, g, &ds_prime)?;
            let ds_raw = ds.scale_rows(inv_d);
            let dd: Vec<f64> = (0..ds.rows())
                .map(|j| -ds.row(j).iter().zip(s.row(j)).map(|(a, b)| a * b).sum::<f64>() * inv_d[j])
                .collect();
            dw.add_assign(&matmul_nt(x_proj, &ds_raw)?);
            dw.add_row_vector(&dd);
            let dx_proj = matmul(w, &ds_raw)?;
            let mut da = linear_back(a, &p.w1, &dx_proj, &mut g.w1, &mut g.b1)?;
            let dz = softmax_back(w, &dw);
            da.add_assign(&linear_back(a, &p.w2, &dz, &mut g.w2, &mut g.b2)?);
            Ok(da)
        }
        HeadTape::Reordered { tiles, w, states } => {
            let weights = |i: usize, r: &Range<usize>, ctr: &mut OpCounter| -> Result<Matrix> {
                match w {
                    Some(kept) => Ok(kept[i].clone()),
                    None => slice_weights(&a.row_range(r.clone()), p, ctr),
                }
            };
            let c = a.cols();
            let mut ds_out = Matrix::zeros(p.slices(), c);
            for (i, r) in tiles.iter().enumerate() {
                let wt = weights(i, r, ctr)?;
                ds_out.add_assign(&matmul_tn(&wt, &dy.row_range(r.clone()))?);
            }
            let (ds_raw, dd) = states_back(states, p, g, &ds_out)?;
            let mut da = Matrix::zeros(a.rows(), c);
            for (i, r) in tiles.iter().enumerate() {
                let wt = weights(i, r, ctr)?;
                let (at, dyt) = (a.row_range(r.clone()), dy.row_range(r.clone()));
                let mut dw = matmul_nt(&dyt, &states.s_out)?;
                dw.add_assign(&matmul_nt(&at, &ds_raw)?);
                dw.add_row_vector(&dd);
                let dz = softmax_back(&wt, &dw);
                let mut dat = matmul(&wt, &ds_raw)?;
                dat.add_assign(&linear_back(&at, &p.w2, &dz, &mut g.w2, &mut g.b2)?);
                da.data_mut()[r.start * c..r.end * c].copy_from_slice(dat.data());
            }
            Ok(da)
        }
    }
}

struct LayerTape {
    ln1: LnTape,
    a: Matrix,
    heads: Vec<HeadTape>,
    ln2: LnTape,
    b: Matrix,
    f1: Matrix,
    g: Matrix,
}

fn layer_forward(
    block: &Block,
    x: &mut Matrix,
    ch: usize,
    opts: BackwardOptions,
    ctr: &mut OpCounter,
) -> Result<LayerTape> {
    let n = x.rows();
    let (a, ln1) = ln_forward(x, &block.ln1);
    let mut heads = Vec::with_capacity(block.heads.len());
    for (h, hp) in block.heads.iter().enumerate() {
        let (yh, tape) = head_forward(&a.col_block(h * ch, ch), hp, opts, ctr)?;
        x.add_col_block(h * ch, &yh);
        heads.push(tape);
    }
    let (b, ln2) = ln_forward(x, &block.ln2);
    let f1 = block.ffn1.apply(&b)?;
    let g = f1.map(gelu);
    x.add_assign(&block.ffn2.apply(&g)?);
    let c = x.cols();
    for (name, cols) in [("ln1_xhat", c), ("a", c), ("ln2_xhat", c), ("b", c), ("f1", f1.cols()), ("g", g.cols())] {
        ctr.retain(name, n, cols);
    }
    Ok(LayerTape {
        ln1,
        a,
        heads,
        ln2,
        b,
        f1,
        g,
    })
}

fn lin_grad(g: &mut Linear) -> (&mut Matrix, &mut Vec<f64>) {
    (&mut g.w, &mut g.b)
}

/// Loss and exact gradients for `mesh.targets`. With the prediction equal
/// to the targets the loss is 0 and every gradient is 0.
pub fn backward_counted(
    params: &ModelParams,
    mesh: &MeshBatch,
    cfg: &ModelConfig,
    opts: BackwardOptions,
    ctr: &mut OpCounter,
) -> Result<(f64, GradStore)> {
    params.check_config(cfg)?;
    let y = mesh.targets.as_ref().ok_or_else(|| Error::invalid("backward needs targets"))?;
    if y.shape() != (mesh.len(), cfg.out_dim) {
        return Err(Error::Shape {
            op: "targets",
            left: (mesh.len(), cfg.out_dim),
            right: y.shape(),
        });
    }
    let y_norm = y.frobenius_norm();
    if y_norm == 0.0 {
        return Err(Error::DegenerateTarget);
    }
    let ch = cfg.head_channels();
    let u = embed_input(params, mesh, cfg)?;
    let h1 = params.embed1.apply(&u)?;
    let g1 = h1.map(gelu);
    let mut x = params.embed2.apply(&g1)?;
    let mut tapes = Vec::with_capacity(params.blocks.len());
    for (l, block) in params.blocks.iter().enumerate() {
        tapes.push(layer_forward(block, &mut x, ch, opts, ctr).map_err(|e| e.at_layer(l))?);
    }
    let out = params.head.apply(&x)?;
    if !out.is_finite() {
        return Err(Error::NonFinite("model output"));
    }
    let diff = out.sub(y)?;
    let diff_norm = diff.frobenius_norm();
    let loss = diff_norm / y_norm;

    let mut grads = GradStore::zeros_like(params);
    if diff_norm == 0.0 {
        return Ok((0.0, grads));
    }
    let gp = &mut grads.0;
    let dout = diff.scale(1.0 / (diff_norm * y_norm));
    let (gw, gb) = lin_grad(&mut gp.head);
    let mut dx = linear_back(&x, &params.head.w, &dout, gw, gb)?;
    for (l, (block, tape)) in params.blocks.iter().zip(&tapes).enumerate().rev() {
        let gblock = &mut gp.blocks[l];
        let mut run = || -> Result<()> {
            let (gw, gb) = lin_grad(&mut gblock.ffn2);
            let dg = linear_back(&tape.g, &block.ffn2.w, &dx, gw, gb)?;
            let df1 = gelu_back(&tape.f1, &dg);
            let (gw, gb) = lin_grad(&mut gblock.ffn1);
            let db = linear_back(&tape.b, &block.ffn1.w, &df1, gw, gb)?;
            dx.add_assign(&ln_back(&tape.ln2, &block.ln2, &mut gblock.ln2, &db));
            let mut da = Matrix::zeros(dx.rows(), dx.cols());
            for (h, hp) in block.heads.iter().enumerate() {
                let dyh = dx.col_block(h * ch, ch);
                let ah = tape.a.col_block(h * ch, ch);
                let dah = head_back(&ah, hp, &mut gblock.heads[h], &tape.heads[h], &dyh, ctr)?;
                da.set_col_block(h * ch, &dah);
            }
            dx.add_assign(&ln_back(&tape.ln1, &block.ln1, &mut gblock.ln1, &da));
            Ok(())
        };
        run().map_err(|e| e.at_layer(l))?;
    }
    let (gw, gb) = lin_grad(&mut gp.embed2);
    let dg1 = linear_back(&g1, &params.embed2.w, &dx, gw, gb)?;
    let dh1 = gelu_back(&h1, &dg1);
    accumulate(&mut gp.embed1.w, &matmul_tn(&u, &dh1)?);
    accumulate_vec(&mut gp.embed1.b, &dh1.col_sums());
    Ok((loss, grads))
}

pub fn backward(params: &ModelParams, mesh: &MeshBatch, cfg: &ModelConfig, opts: BackwardOptions) -> Result<(f64, GradStore)> {
    backward_counted(params, mesh, cfg, opts, &mut OpCounter::new())
}

/// Central finite-difference gradient of the loss under `attn`, in
/// canonical tensor order. For verification only: costs two forwards per
/// parameter.
pub fn finite_difference_grads(
    params: &ModelParams,
    mesh: &MeshBatch,
    cfg: &ModelConfig,
    attn: AttnOptions,
    h: f64,
) -> Result<GradStore> {
    let y = mesh.targets.as_ref().ok_or_else(|| Error::invalid("finite differences need targets"))?;
    let loss = |p: &ModelParams| -> Result<f64> {
        let out = crate::model::forward_with(p, mesh, cfg, attn)?;
        crate::geometry::rel_l2(&out, y)
    };
    let mut probe = params.clone();
    let mut grads = GradStore::zeros_like(params);
    let sizes: Vec<usize> = params.tensors().iter().map(|t| t.data.len()).collect();
    for (ti, &len) in sizes.iter().enumerate() {
        for k in 0..len {
            let orig = probe.tensors()[ti].data[k];
            probe.tensors_mut()[ti].data[k] = orig + h;
            let up = loss(&probe)?;
            probe.tensors_mut()[ti].data[k] = orig - h;
            let down = loss(&probe)?;
            probe.tensors_mut()[ti].data[k] = orig;
            grads.0.tensors_mut()[ti].data[k] = (up - down) / (2.0 * h);
        }
    }
    Ok(grads)
}

/// Worst per-tensor relative error `‖a − b‖ / max(‖b‖, floor)` and the
/// tensor it occurs in.
pub fn worst_relative_error(a: &GradStore, b: &GradStore, floor: f64) -> (f64, String) {
    let mut worst = (0.0, String::new());
    for (ta, tb) in a.0.tensors().iter().zip(b.0.tensors()) {
        let num: f64 = ta.data.iter().zip(tb.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        let den: f64 = tb.data.iter().map(|y| y * y).sum::<f64>().sqrt().max(floor);
        let e = num / den;
        if e > worst.0 {
            worst = (e, ta.name.clone());
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Rng;
    use crate::model::forward_with;

    fn setup() -> (ModelConfig, ModelParams, MeshBatch) {
        let cfg = ModelConfig {
            layers: 2,
            heads: 2,
            channels: 8,
            slices: 4,
            in_dim: 3,
            out_dim: 1,
            ffn_hidden: 16,
            mode: Mode::Fast,
            tile_size: 5,
        };
        let mut rng = Rng::seed(21);
        let mut params = ModelParams::init(&cfg, 3, &mut rng).unwrap();
        // Move norms off identity and sharpen state attention so every
        // tensor's gradient sits well above finite-difference noise.
        for b in &mut params.blocks {
            for v in b.ln1.gain.iter_mut().chain(&mut b.ln2.shift) {
                *v += rng.uniform(-0.3, 0.3);
            }
            for h in &mut b.heads {
                h.wq = h.wq.scale(4.0);
                h.wk = h.wk.scale(4.0);
            }
        }
        let coords = rng.uniform_matrix(32, 3, 0.0, 1.0);
        let targets = crate::geometry::manufactured_field(&coords).unwrap();
        (cfg, params, MeshBatch::new(coords).with_targets(targets))
    }

    #[test]
    fn tape_loss_matches_forward() {
        let (cfg, params, mesh) = setup();
        for attn in [AttnOptions::original(), AttnOptions::fast(), AttnOptions::tiled(5)] {
            let (loss, _) = backward(&params, &mesh, &cfg, BackwardOptions::new(attn)).unwrap();
            let out = forward_with(&params, &mesh, &cfg, attn).unwrap();
            let expect = crate::geometry::rel_l2(&out, mesh.targets.as_ref().unwrap()).unwrap();
            assert!((loss - expect).abs() <= 1e-12 * expect);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (cfg, params, mesh) = setup();
        for attn in [AttnOptions::original(), AttnOptions::fast(), AttnOptions::tiled(5)] {
            let (_, g) = backward(&params, &mesh, &cfg, BackwardOptions::new(attn)).unwrap();
            let fd = finite_difference_grads(&params, &mesh, &cfg, attn, 1e-5).unwrap();
            let (err, name) = worst_relative_error(&g, &fd, 1e-12);
            assert!(err <= 1e-5, "{:?}: {name} error {err}", attn.mode);
        }
    }

    #[test]
    fn checkpointing_is_transparent() {
        let (cfg, params, mesh) = setup();
        let attn = AttnOptions::tiled(7);
        let mut on_ctr = OpCounter::new();
        let mut off_ctr = OpCounter::new();
        let on = backward_counted(&params, &mesh, &cfg, BackwardOptions { attn, checkpoint: true }, &mut on_ctr).unwrap();
        let off = backward_counted(&params, &mesh, &cfg, BackwardOptions { attn, checkpoint: false }, &mut off_ctr).unwrap();
        assert!((on.0 - off.0).abs() <= 1e-8);
        assert!(worst_relative_error(&on.1, &off.1, 1e-12).0 <= 1e-8);
        let w_elems = |c: &OpCounter| c.retained().iter().filter(|b| b.name == "w").map(|b| b.elems()).sum::<usize>();
        assert_eq!(w_elems(&on_ctr), 0);
        assert_eq!(w_elems(&off_ctr), cfg.layers * cfg.heads * 32 * 4);
        assert_eq!(on_ctr.peak_transient("w").unwrap().rows, 7);
    }

    #[test]
    fn tiled_grads_match_untiled() {
        let (cfg, params, mesh) = setup();
        let (_, fast) = backward(&params, &mesh, &cfg, BackwardOptions::new(AttnOptions::fast())).unwrap();
        for tile in [1, 3, 32, 100] {
            let (_, tiled) = backward(&params, &mesh, &cfg, BackwardOptions::new(AttnOptions::tiled(tile))).unwrap();
            assert!(worst_relative_error(&tiled, &fast, 1e-12).0 <= 1e-8);
        }
    }

    #[test]
    fn perfect_prediction_has_zero_gradient() {
        let (cfg, params, mesh) = setup();
        let out = forward_with(&params, &mesh, &cfg, AttnOptions::fast()).unwrap();
        let exact = MeshBatch { targets: Some(out), ..mesh };
        let (loss, g) = backward(&params, &exact, &cfg, BackwardOptions::new(AttnOptions::fast())).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(g.norm(), 0.0);
    }

    #[test]
    fn zero_targets_rejected() {
        let (cfg, params, mesh) = setup();
        let zero = MeshBatch { targets: Some(Matrix::zeros(32, 1)), ..mesh };
        assert!(matches!(
            backward(&params, &zero, &cfg, BackwardOptions::new(AttnOptions::fast())),
            Err(Error::DegenerateTarget)
        ));
    }
}
