//! The full network: point embedding, a stack of pre-norm Physics-Attention
//! blocks with feed-forward sublayers, and a linear output head.
//!
//! ```text
//! x⁰ = Embed(norm(coords) ‖ features)
//! xˡ = xˡ⁻¹ + PhysAttn(LN₁(xˡ⁻¹));  xˡ = xˡ + FFN(LN₂(xˡ))
//! y  = Head(xᴸ)
//! ```

mod checkpoint;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::counters::{OpCounter, Stage};
use crate::error::{Error, Result};
use crate::geometry::MeshBatch;
use crate::linalg::{affine, gelu, layer_norm, Matrix, Rng};
use crate::physattn::{
    accumulate_tiles, deslice_cached, finalize_states, multihead_physattn_counted, slice_weights, AttnOptions, HeadParams, Mode,
};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_FORMAT_VERSION};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub channels: usize,
    pub slices: usize,
    /// Coordinate plus feature columns fed to the embedding.
    pub in_dim: usize,
    pub out_dim: usize,
    pub ffn_hidden: usize,
    pub mode: Mode,
    pub tile_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 4,
            channels: 32,
            slices: 16,
            in_dim: 3,
            out_dim: 1,
            ffn_hidden: 64,
            mode: Mode::Fast,
            tile_size: 1024,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("heads", self.heads),
            ("channels", self.channels),
            ("slices", self.slices),
            ("in_dim", self.in_dim),
            ("out_dim", self.out_dim),
            ("ffn_hidden", self.ffn_hidden),
            ("tile_size", self.tile_size),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("{name} must be at least 1")));
        }
        if !self.channels.is_multiple_of(self.heads) {
            return Err(Error::invalid(format!(
                "channels {} not divisible by heads {}",
                self.channels, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_channels(&self) -> usize {
        self.channels / self.heads
    }

    pub fn attn_options(&self) -> AttnOptions {
        AttnOptions::new(self.mode, self.tile_size)
    }

    /// Exact number of learnable scalars.
    pub fn param_count(&self) -> usize {
        let (c, ch, m, f) = (self.channels, self.head_channels(), self.slices, self.ffn_hidden);
        let embed = self.in_dim * c + c + c * c + c;
        let head = 6 * ch * ch + 2 * ch + ch * m + m;
        let block = 4 * c + self.heads * head + (c * f + f) + (f * c + c);
        let out = c * self.out_dim + self.out_dim;
        embed + self.layers * block + out
    }

    /// Architecture fields only; execution settings (mode, tiles) don't change
    /// the function a parameter set computes.
    fn architecture_bytes(&self) -> Vec<u8> {
        let arch = [
            self.layers,
            self.heads,
            self.channels,
            self.slices,
            self.in_dim,
            self.out_dim,
            self.ffn_hidden,
        ];
        arch.iter().flat_map(|v| (*v as u64).to_le_bytes()).collect()
    }
}

pub fn param_count(cfg: &ModelConfig) -> usize {
    cfg.param_count()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: Matrix,
    pub b: Vec<f64>,
}

impl Linear {
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Self {
            w: rng.uniform_matrix(fan_in, fan_out, -bound, bound),
            b: rng.uniform_matrix::<f64>(1, fan_out, -bound, bound).into_data(),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            w: Matrix::zeros(fan_in, fan_out),
            b: vec![0.0; fan_out],
        }
    }

    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        affine(x, &self.w, &self.b)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Norm {
    pub gain: Vec<f64>,
    pub shift: Vec<f64>,
}

impl Norm {
    pub fn identity(c: usize) -> Self {
        Self {
            gain: vec![1.0; c],
            shift: vec![0.0; c],
        }
    }

    pub fn zeros(c: usize) -> Self {
        Self {
            gain: vec![0.0; c],
            shift: vec![0.0; c],
        }
    }

    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        layer_norm(x, &self.gain, &self.shift, LN_EPS)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub ln1: Norm,
    pub heads: Vec<HeadParams>,
    pub ln2: Norm,
    pub ffn1: Linear,
    pub ffn2: Linear,
}

/// Fixed per-axis min-max bounds mapping coordinates into `[0, 1]`.
/// Not learned; fitted once from the training data.
#[derive(Clone, Debug, PartialEq)]
pub struct CoordNorm {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl CoordNorm {
    pub fn unit(dim: usize) -> Self {
        Self {
            lo: vec![0.0; dim],
            hi: vec![1.0; dim],
        }
    }

    pub fn fit<'a>(meshes: impl IntoIterator<Item = &'a MeshBatch>) -> Result<Self> {
        let mut lo: Vec<f64> = Vec::new();
        let mut hi: Vec<f64> = Vec::new();
        for mesh in meshes {
            if lo.is_empty() {
                lo = vec![f64::INFINITY; mesh.coords.cols()];
                hi = vec![f64::NEG_INFINITY; mesh.coords.cols()];
            }
            if mesh.coords.cols() != lo.len() {
                return Err(Error::invalid("meshes disagree on coordinate dimension"));
            }
            for row in mesh.coords.row_iter() {
                for (j, &v) in row.iter().enumerate() {
                    lo[j] = lo[j].min(v);
                    hi[j] = hi[j].max(v);
                }
            }
        }
        if lo.is_empty() || lo.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("cannot fit coordinate bounds on empty data"));
        }
        Ok(Self { lo, hi })
    }

    pub fn apply(&self, coords: &Matrix) -> Matrix {
        Matrix::from_fn(coords.rows(), coords.cols(), |i, j| {
            let span = self.hi[j] - self.lo[j];
            let span = if span > 0.0 { span } else { 1.0 };
            (coords[(i, j)] - self.lo[j]) / span
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub coord_norm: CoordNorm,
    pub embed1: Linear,
    pub embed2: Linear,
    pub blocks: Vec<Block>,
    pub head: Linear,
}

/// Borrowed view of one learnable tensor.
pub struct TensorRef<'a> {
    pub name: String,
    pub shape: (usize, usize),
    pub data: &'a [f64],
}

pub struct TensorMut<'a> {
    pub name: String,
    pub shape: (usize, usize),
    pub data: &'a mut [f64],
}

fn push_ref<'a>(out: &mut Vec<TensorRef<'a>>, name: String, shape: (usize, usize), data: &'a [f64]) {
    out.push(TensorRef { name, shape, data });
}

fn push_mut<'a>(out: &mut Vec<TensorMut<'a>>, name: String, shape: (usize, usize), data: &'a mut [f64]) {
    out.push(TensorMut { name, shape, data });
}

// One traversal order shared by the shared and mutable views; the order is
// also the checkpoint blob layout.
macro_rules! walk_tensors {
    ($params:expr, $push:ident, $iter:ident, $data:ident, [$($r:tt)*]) => {{
        let mut out = Vec::new();
        macro_rules! mat {
            ($name:expr, $m:expr) => {{
                let shape = $m.shape();
                $push(&mut out, $name, shape, $m.$data());
            }};
        }
        macro_rules! vector {
            ($name:expr, $v:expr) => {{
                let shape = (1, $v.len());
                $push(&mut out, $name, shape, $($r)* $v[..]);
            }};
        }
        let p = $params;
        mat!("embed1.w".to_string(), p.embed1.w);
        vector!("embed1.b".to_string(), p.embed1.b);
        mat!("embed2.w".to_string(), p.embed2.w);
        vector!("embed2.b".to_string(), p.embed2.b);
        for (l, b) in p.blocks.$iter().enumerate() {
            vector!(format!("blocks.{l}.ln1.gain"), b.ln1.gain);
            vector!(format!("blocks.{l}.ln1.shift"), b.ln1.shift);
            for (h, hp) in b.heads.$iter().enumerate() {
                let pre = format!("blocks.{l}.heads.{h}");
                mat!(format!("{pre}.w1"), hp.w1);
                vector!(format!("{pre}.b1"), hp.b1);
                mat!(format!("{pre}.w2"), hp.w2);
                vector!(format!("{pre}.b2"), hp.b2);
                mat!(format!("{pre}.w3"), hp.w3);
                vector!(format!("{pre}.b3"), hp.b3);
                mat!(format!("{pre}.wq"), hp.wq);
                mat!(format!("{pre}.wk"), hp.wk);
                mat!(format!("{pre}.wv"), hp.wv);
                mat!(format!("{pre}.wo"), hp.wo);
            }
            vector!(format!("blocks.{l}.ln2.gain"), b.ln2.gain);
            vector!(format!("blocks.{l}.ln2.shift"), b.ln2.shift);
            mat!(format!("blocks.{l}.ffn1.w"), b.ffn1.w);
            vector!(format!("blocks.{l}.ffn1.b"), b.ffn1.b);
            mat!(format!("blocks.{l}.ffn2.w"), b.ffn2.w);
            vector!(format!("blocks.{l}.ffn2.b"), b.ffn2.b);
        }
        mat!("head.w".to_string(), p.head.w);
        vector!("head.b".to_string(), p.head.b);
        out
    }};
}

impl ModelParams {
    /// Fresh parameters with unit coordinate bounds.
    pub fn init(cfg: &ModelConfig, coord_dim: usize, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        if coord_dim > cfg.in_dim {
            return Err(Error::invalid("coordinate dimension exceeds in_dim"));
        }
        let c = cfg.channels;
        let embed1 = Linear::init(cfg.in_dim, c, rng);
        let embed2 = Linear::init(c, c, rng);
        let blocks = (0..cfg.layers)
            .map(|_| Block {
                ln1: Norm::identity(c),
                heads: (0..cfg.heads)
                    .map(|_| HeadParams::init(cfg.head_channels(), cfg.slices, rng))
                    .collect(),
                ln2: Norm::identity(c),
                ffn1: Linear::init(c, cfg.ffn_hidden, rng),
                ffn2: Linear::init(cfg.ffn_hidden, c, rng),
            })
            .collect();
        let head = Linear::init(c, cfg.out_dim, rng);
        Ok(Self {
            coord_norm: CoordNorm::unit(coord_dim),
            embed1,
            embed2,
            blocks,
            head,
        })
    }

    /// All-zero parameters shaped for `cfg`, with unit coordinate bounds.
    pub fn zeros(cfg: &ModelConfig, coord_dim: usize) -> Result<Self> {
        Ok(Self::init(cfg, coord_dim, &mut Rng::seed(0))?.zeros_like())
    }

    /// All-zero parameters with the same shapes as `self`.
    pub fn zeros_like(&self) -> Self {
        let lin = |l: &Linear| Linear::zeros(l.w.rows(), l.w.cols());
        Self {
            coord_norm: self.coord_norm.clone(),
            embed1: lin(&self.embed1),
            embed2: lin(&self.embed2),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    ln1: Norm::zeros(b.ln1.gain.len()),
                    heads: b
                        .heads
                        .iter()
                        .map(|h| HeadParams::zeros(h.channels(), h.slices()))
                        .collect(),
                    ln2: Norm::zeros(b.ln2.gain.len()),
                    ffn1: lin(&b.ffn1),
                    ffn2: lin(&b.ffn2),
                })
                .collect(),
            head: lin(&self.head),
        }
    }

    pub fn coord_dim(&self) -> usize {
        self.coord_norm.lo.len()
    }

    /// Learnable tensors in canonical order.
    pub fn tensors(&self) -> Vec<TensorRef<'_>> {
        walk_tensors!(self, push_ref, iter, data, [&])
    }

    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        walk_tensors!(self, push_mut, iter_mut, data_mut, [&mut])
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    /// Learnable values flattened in canonical order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|t| t.data.iter().copied()).collect()
    }

    /// 64-bit digest of the architecture, coordinate bounds and all weights.
    pub fn fingerprint(&self, cfg: &ModelConfig) -> u64 {
        let mut h = Sha256::new();
        h.update(cfg.architecture_bytes());
        for v in self.coord_norm.lo.iter().chain(&self.coord_norm.hi) {
            h.update(v.to_le_bytes());
        }
        for t in self.tensors() {
            for v in t.data {
                h.update(v.to_le_bytes());
            }
        }
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("digest length"))
    }

    pub fn check_config(&self, cfg: &ModelConfig) -> Result<()> {
        cfg.validate()?;
        let ok = self.blocks.len() == cfg.layers
            && self.embed1.w.shape() == (cfg.in_dim, cfg.channels)
            && self.head.w.shape() == (cfg.channels, cfg.out_dim)
            && self.blocks.iter().all(|b| {
                b.heads.len() == cfg.heads
                    && b.ffn1.w.cols() == cfg.ffn_hidden
                    && b.heads.iter().all(|h| h.slices() == cfg.slices && h.channels() == cfg.head_channels())
            });
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("parameters do not match model configuration"))
        }
    }
}

/// Normalized coordinates followed by features.
pub fn embed_input(params: &ModelParams, mesh: &MeshBatch, cfg: &ModelConfig) -> Result<Matrix> {
    if mesh.coords.cols() != params.coord_dim() || mesh.input_dim() != cfg.in_dim {
        return Err(Error::Shape {
            op: "model input",
            left: (mesh.len(), mesh.input_dim()),
            right: (params.coord_dim(), cfg.in_dim),
        });
    }
    let coords = params.coord_norm.apply(&mesh.coords);
    if mesh.features.cols() == 0 {
        Ok(coords)
    } else {
        Matrix::hstack(&[coords, mesh.features.clone()])
    }
}

pub(crate) fn embed(params: &ModelParams, input: &Matrix, ctr: &mut OpCounter) -> Result<Matrix> {
    let c = params.embed1.w.cols();
    ctr.matmul(Stage::Embed, input.rows(), input.cols(), c);
    ctr.matmul(Stage::Embed, input.rows(), c, c);
    let h = params.embed1.apply(input)?.map(gelu);
    params.embed2.apply(&h)
}

pub(crate) fn ffn(block: &Block, x: &Matrix, ctr: &mut OpCounter) -> Result<Matrix> {
    let f = block.ffn1.w.cols();
    ctr.matmul(Stage::Ffn, x.rows(), x.cols(), f);
    ctr.matmul(Stage::Ffn, x.rows(), f, x.cols());
    let h = block.ffn1.apply(x)?.map(gelu);
    block.ffn2.apply(&h)
}

pub(crate) fn output_head(params: &ModelParams, x: &Matrix, ctr: &mut OpCounter) -> Result<Matrix> {
    ctr.matmul(Stage::Head, x.rows(), x.cols(), params.head.w.cols());
    params.head.apply(x)
}

/// Residual FFN sublayer applied in place.
pub(crate) fn ffn_sublayer(block: &Block, x: &mut Matrix, ctr: &mut OpCounter) -> Result<()> {
    let b = block.ln2.apply(x)?;
    x.add_assign(&ffn(block, &b, ctr)?);
    Ok(())
}

pub fn forward_counted(
    params: &ModelParams,
    mesh: &MeshBatch,
    cfg: &ModelConfig,
    opts: AttnOptions,
    ctr: &mut OpCounter,
) -> Result<Matrix> {
    params.check_config(cfg)?;
    let input = embed_input(params, mesh, cfg)?;
    let mut x = embed(params, &input, ctr)?;
    for (l, block) in params.blocks.iter().enumerate() {
        let run = |x: &mut Matrix, ctr: &mut OpCounter| -> Result<()> {
            let a = block.ln1.apply(x)?;
            x.add_assign(&multihead_physattn_counted(&a, &block.heads, opts, ctr)?);
            ffn_sublayer(block, x, ctr)
        };
        run(&mut x, ctr).map_err(|e| e.at_layer(l))?;
    }
    output_head(params, &x, ctr)
}

/// Full-mesh prediction using the attention mode from `cfg`.
pub fn forward(params: &ModelParams, mesh: &MeshBatch, cfg: &ModelConfig) -> Result<Matrix> {
    forward_counted(params, mesh, cfg, cfg.attn_options(), &mut OpCounter::new())
}

pub fn forward_with(params: &ModelParams, mesh: &MeshBatch, cfg: &ModelConfig, opts: AttnOptions) -> Result<Matrix> {
    forward_counted(params, mesh, cfg, opts, &mut OpCounter::new())
}

/// Monolithic fast-path forward that also returns every layer's per-head
/// post-projection states `s'_out`, indexed `[layer][head]`.
pub fn forward_with_states(
    params: &ModelParams,
    mesh: &MeshBatch,
    cfg: &ModelConfig,
) -> Result<(Matrix, Vec<Vec<Matrix>>)> {
    params.check_config(cfg)?;
    let ctr = &mut OpCounter::new();
    let n = mesh.len();
    let input = embed_input(params, mesh, cfg)?;
    let mut x = embed(params, &input, ctr)?;
    let ch = cfg.head_channels();
    let mut states = Vec::with_capacity(params.blocks.len());
    for (l, block) in params.blocks.iter().enumerate() {
        let mut run = |x: &mut Matrix| -> Result<()> {
            let a = block.ln1.apply(x)?;
            let mut layer = Vec::with_capacity(block.heads.len());
            for (h, hp) in block.heads.iter().enumerate() {
                let ah = a.col_block(h * ch, ch);
                let acc = accumulate_tiles(&ah, hp, n, false, ctr)?;
                let s_out = finalize_states(&acc, hp, ctr)?;
                x.add_col_block(h * ch, &deslice_cached(&ah, hp, &s_out, n, ctr)?);
                layer.push(s_out);
            }
            states.push(layer);
            ffn_sublayer(block, x, ctr)
        };
        run(&mut x).map_err(|e| e.at_layer(l))?;
    }
    Ok((output_head(params, &x, ctr)?, states))
}

/// Per-point slice weights of one head at one layer, `N × M`.
pub fn slice_weights_at(params: &ModelParams, mesh: &MeshBatch, cfg: &ModelConfig, layer: usize, head: usize) -> Result<Matrix> {
    params.check_config(cfg)?;
    if layer >= cfg.layers || head >= cfg.heads {
        return Err(Error::invalid(format!(
            "layer {layer} / head {head} outside {} layers × {} heads",
            cfg.layers, cfg.heads
        )));
    }
    let ctr = &mut OpCounter::new();
    let opts = cfg.attn_options();
    let mut x = embed(params, &embed_input(params, mesh, cfg)?, ctr)?;
    for block in &params.blocks[..layer] {
        let a = block.ln1.apply(&x)?;
        x.add_assign(&multihead_physattn_counted(&a, &block.heads, opts, ctr)?);
        ffn_sublayer(block, &mut x, ctr)?;
    }
    let block = &params.blocks[layer];
    let ch = cfg.head_channels();
    let a = block.ln1.apply(&x)?.col_block(head * ch, ch);
    slice_weights(&a, &block.heads[head], ctr)
}
