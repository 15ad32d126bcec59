//! Analytical time and space cost of one Physics-Attention layer stack.
//!
//! Every term is a sum of monomials over the symbols `N, M, C, T, N_t, H, L`
//! with signed exponents (per-head projections cost `C²/H`). Time is kept as
//! multiply-adds plus softmax elements so it can be compared exactly against
//! [`OpCounter`]. FLOPs count a multiply-add as 2 and a softmax element as 4
//! (exp, subtract, sum share, divide). Space is in elements, summed over
//! heads; [`memory_model`] turns buffers into bytes.

use std::fmt;

use serde::Serialize;

use crate::counters::{OpCounter, Stage};
use crate::error::{Error, Result};
use crate::physattn::Mode;

pub const FLOPS_PER_MAC: f64 = 2.0;
pub const FLOPS_PER_SOFTMAX: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum Sym {
    N,
    M,
    C,
    T,
    Nt,
    H,
    L,
}

const SYMS: [Sym; 7] = [Sym::N, Sym::M, Sym::C, Sym::T, Sym::Nt, Sym::H, Sym::L];

impl Sym {
    fn label(self) -> &'static str {
        match self {
            Sym::N => "N",
            Sym::M => "M",
            Sym::C => "C",
            Sym::T => "T",
            Sym::Nt => "N_t",
            Sym::H => "H",
            Sym::L => "L",
        }
    }
}

/// Numeric values for every symbol.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Dims {
    pub n: usize,
    pub m: usize,
    pub c: usize,
    pub h: usize,
    pub l: usize,
    /// Tile size `N_t`; the tile count is `T = ⌈N / N_t⌉`.
    pub tile: usize,
}

impl Dims {
    pub fn new(n: usize, m: usize, c: usize, h: usize) -> Self {
        Self { n, m, c, h, l: 1, tile: n }
    }

    pub fn with_tile(self, tile: usize) -> Self {
        Self { tile, ..self }
    }

    pub fn with_layers(self, l: usize) -> Self {
        Self { l, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if [self.n, self.m, self.c, self.h, self.l, self.tile].contains(&0) {
            return Err(Error::invalid("cost model dimensions must be positive"));
        }
        if !self.c.is_multiple_of(self.h) {
            return Err(Error::invalid("channels must be divisible by heads"));
        }
        Ok(())
    }

    fn value(&self, s: Sym) -> f64 {
        match s {
            Sym::N => self.n as f64,
            Sym::M => self.m as f64,
            Sym::C => self.c as f64,
            Sym::T => self.n.div_ceil(self.tile.min(self.n)) as f64,
            Sym::Nt => self.tile.min(self.n) as f64,
            Sym::H => self.h as f64,
            Sym::L => self.l as f64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Monomial {
    pub coef: f64,
    pub exps: [i32; 7],
}

impl Monomial {
    pub fn new(coef: f64, factors: &[(Sym, i32)]) -> Self {
        let mut exps = [0; 7];
        for &(s, e) in factors {
            exps[SYMS.iter().position(|&x| x == s).expect("known symbol")] += e;
        }
        Self { coef, exps }
    }

    pub fn exponent(&self, s: Sym) -> i32 {
        self.exps[SYMS.iter().position(|&x| x == s).expect("known symbol")]
    }

    pub fn eval(&self, d: &Dims) -> f64 {
        SYMS.iter()
            .zip(self.exps)
            .fold(self.coef, |acc, (&s, e)| acc * d.value(s).powi(e))
    }
}

impl fmt::Display for Monomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if self.coef != 1.0 || self.exps.iter().all(|&e| e == 0) {
            parts.push(format!("{}", self.coef));
        }
        for (s, e) in SYMS.iter().zip(self.exps) {
            match e {
                0 => {}
                1 => parts.push(s.label().to_string()),
                _ => parts.push(format!("{}^{e}", s.label())),
            }
        }
        f.write_str(&parts.join("·"))
    }
}

/// Sum of monomials.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Poly(pub Vec<Monomial>);

impl Poly {
    pub fn zero() -> Self {
        Self(Vec::new())
    }

    pub fn term(coef: f64, factors: &[(Sym, i32)]) -> Self {
        Self(vec![Monomial::new(coef, factors)])
    }

    pub fn plus(mut self, other: Poly) -> Self {
        self.0.extend(other.0);
        self
    }

    /// Multiplies every monomial by `s^e`.
    pub fn times(mut self, s: Sym, e: i32) -> Self {
        let i = SYMS.iter().position(|&x| x == s).expect("known symbol");
        for m in &mut self.0 {
            m.exps[i] += e;
        }
        self
    }

    pub fn eval(&self, d: &Dims) -> f64 {
        self.0.iter().map(|m| m.eval(d)).sum()
    }

    /// True if some monomial grows with the point count (`N` or `N_t`).
    pub fn n_dependent(&self) -> bool {
        self.0.iter().any(|m| m.exponent(Sym::N) > 0 || m.exponent(Sym::Nt) > 0)
    }
}

impl fmt::Display for Poly {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return f.write_str("0");
        }
        let parts: Vec<String> = self.0.iter().map(|m| m.to_string()).collect();
        f.write_str(&parts.join(" + "))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Original,
    Optimized,
    /// Optimized with geometry tiling: slice weights are computed twice.
    Tiled,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Original => "original",
            Variant::Optimized => "optimized",
            Variant::Tiled => "tiled",
        }
    }
}

impl From<Mode> for Variant {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Original => Variant::Original,
            Mode::Fast => Variant::Optimized,
            Mode::Tiled => Variant::Tiled,
        }
    }
}

/// One row of a cost table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostTerm {
    pub op: &'static str,
    pub stage: Stage,
    pub macs: Poly,
    pub softmax: Poly,
    pub space: Poly,
    /// Time or space grows with `N`.
    pub n_dependent: bool,
}

impl CostTerm {
    fn new(op: &'static str, stage: Stage, macs: Poly, softmax: Poly, space: Poly) -> Self {
        let n_dependent = macs.n_dependent() || softmax.n_dependent() || space.n_dependent();
        Self {
            op,
            stage,
            macs: macs.times(Sym::L, 1),
            softmax: softmax.times(Sym::L, 1),
            space: space.times(Sym::L, 1),
            n_dependent,
        }
    }

    pub fn time_poly(&self) -> Poly {
        let scaled = |p: &Poly, k: f64| Poly(p.0.iter().map(|m| Monomial { coef: m.coef * k, ..*m }).collect());
        scaled(&self.macs, FLOPS_PER_MAC).plus(scaled(&self.softmax, FLOPS_PER_SOFTMAX))
    }

    pub fn time_n_dependent(&self) -> bool {
        self.macs.n_dependent() || self.softmax.n_dependent()
    }

    pub fn space_n_dependent(&self) -> bool {
        self.space.n_dependent()
    }

    pub fn flops(&self, d: &Dims) -> f64 {
        self.time_poly().eval(d)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Totals {
    pub macs: f64,
    pub softmax_elems: f64,
    pub flops: f64,
    pub space_elems: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostReport {
    pub variant: Variant,
    pub dims: Dims,
    pub terms: Vec<CostTerm>,
    pub totals: Totals,
    pub n_related_time: usize,
    pub n_related_space: usize,
}

impl CostReport {
    pub fn stage_macs(&self, stage: Stage) -> f64 {
        self.terms
            .iter()
            .filter(|t| t.stage == stage)
            .map(|t| t.macs.eval(&self.dims))
            .sum()
    }

    pub fn stage_softmax(&self, stage: Stage) -> f64 {
        self.terms
            .iter()
            .filter(|t| t.stage == stage)
            .map(|t| t.softmax.eval(&self.dims))
            .sum()
    }

    /// Per-op CSV rows `variant,op,time_flops,space_bytes,n_dependent`
    /// (without header) at 8 bytes per element.
    pub fn csv_rows(&self) -> Vec<String> {
        self.terms
            .iter()
            .map(|t| {
                format!(
                    "{},{},{:.16e},{:.16e},{}",
                    self.variant.name(),
                    t.op,
                    t.flops(&self.dims),
                    8.0 * t.space.eval(&self.dims),
                    t.n_dependent
                )
            })
            .collect()
    }
}

use Sym::{Nt, C, H, M, N};

fn p(coef: f64, f: &[(Sym, i32)]) -> Poly {
    Poly::term(coef, f)
}

fn attention_term() -> CostTerm {
    CostTerm::new(
        "attention",
        Stage::Attention,
        p(4.0, &[(M, 1), (C, 2), (H, -1)]).plus(p(2.0, &[(M, 2), (C, 1)])),
        p(1.0, &[(H, 1), (M, 2)]),
        p(1.0, &[(H, 1), (M, 2)]).plus(p(1.0, &[(M, 1), (C, 1)])),
    )
}

fn terms(variant: Variant) -> Vec<CostTerm> {
    let z = Poly::zero;
    match variant {
        Variant::Original => vec![
            CostTerm::new("linear1", Stage::Linear1, p(1.0, &[(N, 1), (C, 2), (H, -1)]), z(), p(1.0, &[(N, 1), (C, 1)])),
            CostTerm::new(
                "softmax_linear2",
                Stage::Linear2,
                p(1.0, &[(N, 1), (C, 1), (M, 1)]),
                p(1.0, &[(H, 1), (N, 1), (M, 1)]),
                p(1.0, &[(H, 1), (N, 1), (M, 1)]),
            ),
            CostTerm::new("slice_wd_xproj", Stage::Slice, p(1.0, &[(N, 1), (M, 1), (C, 1)]), z(), p(1.0, &[(M, 1), (C, 1)])),
            attention_term(),
            CostTerm::new("deslice_w_s", Stage::Deslice, p(1.0, &[(N, 1), (M, 1), (C, 1)]), z(), p(1.0, &[(N, 1), (C, 1)])),
            CostTerm::new("linear3", Stage::Linear3, p(1.0, &[(N, 1), (C, 2), (H, -1)]), z(), p(1.0, &[(N, 1), (C, 1)])),
        ],
        Variant::Optimized => vec![
            CostTerm::new(
                "softmax_linear2",
                Stage::Linear2,
                p(1.0, &[(N, 1), (C, 1), (M, 1)]),
                p(1.0, &[(H, 1), (N, 1), (M, 1)]),
                p(1.0, &[(H, 1), (N, 1), (M, 1)]),
            ),
            CostTerm::new("slice_wt_x", Stage::Slice, p(1.0, &[(N, 1), (M, 1), (C, 1)]), z(), p(1.0, &[(M, 1), (C, 1)])),
            CostTerm::new("linear1_states", Stage::Linear1, p(1.0, &[(M, 1), (C, 2), (H, -1)]), z(), p(1.0, &[(M, 1), (C, 1)])),
            attention_term(),
            CostTerm::new("linear3_states", Stage::Linear3, p(1.0, &[(M, 1), (C, 2), (H, -1)]), z(), p(1.0, &[(M, 1), (C, 1)])),
            CostTerm::new("deslice_w_sout", Stage::Deslice, p(1.0, &[(N, 1), (M, 1), (C, 1)]), z(), p(1.0, &[(N, 1), (C, 1)])),
        ],
        Variant::Tiled => vec![
            CostTerm::new(
                "softmax_linear2_tiles",
                Stage::Linear2,
                p(2.0, &[(N, 1), (C, 1), (M, 1)]),
                p(2.0, &[(H, 1), (N, 1), (M, 1)]),
                p(1.0, &[(Nt, 1), (M, 1)]),
            ),
            CostTerm::new("slice_wt_x", Stage::Slice, p(1.0, &[(N, 1), (M, 1), (C, 1)]), z(), p(1.0, &[(M, 1), (C, 1)])),
            CostTerm::new("linear1_states", Stage::Linear1, p(1.0, &[(M, 1), (C, 2), (H, -1)]), z(), p(1.0, &[(M, 1), (C, 1)])),
            attention_term(),
            CostTerm::new("linear3_states", Stage::Linear3, p(1.0, &[(M, 1), (C, 2), (H, -1)]), z(), p(1.0, &[(M, 1), (C, 1)])),
            CostTerm::new("deslice_w_sout", Stage::Deslice, p(1.0, &[(N, 1), (M, 1), (C, 1)]), z(), p(1.0, &[(N, 1), (C, 1)])),
        ],
    }
}

/// Per-op cost table of `L` layers of `H`-head Physics-Attention.
pub fn cost_model(variant: Variant, dims: Dims) -> Result<CostReport> {
    dims.validate()?;
    let terms = terms(variant);
    let sum = |f: &dyn Fn(&CostTerm) -> f64| terms.iter().map(f).sum::<f64>();
    let totals = Totals {
        macs: sum(&|t| t.macs.eval(&dims)),
        softmax_elems: sum(&|t| t.softmax.eval(&dims)),
        flops: sum(&|t| t.flops(&dims)),
        space_elems: sum(&|t| t.space.eval(&dims)),
    };
    Ok(CostReport {
        variant,
        dims,
        n_related_time: terms.iter().filter(|t| t.time_n_dependent()).count(),
        n_related_space: terms.iter().filter(|t| t.space_n_dependent()).count(),
        terms,
        totals,
    })
}

/// `FLOPs(optimized) / FLOPs(original)`.
pub fn flop_ratio(dims: Dims) -> Result<f64> {
    Ok(cost_model(Variant::Optimized, dims)?.totals.flops / cost_model(Variant::Original, dims)?.totals.flops)
}

/// Stages whose measured multiply-adds or softmax counts differ from the
/// model, as `(stage, measured, predicted)` multiply-add triples. Empty
/// means an exact match.
pub fn counter_mismatches(report: &CostReport, ctr: &OpCounter) -> Vec<(Stage, u64, f64)> {
    let stages = [
        Stage::Linear1,
        Stage::Linear2,
        Stage::Slice,
        Stage::Attention,
        Stage::Deslice,
        Stage::Linear3,
    ];
    stages
        .into_iter()
        .filter(|&s| {
            ctr.macs(s) as f64 != report.stage_macs(s) || ctr.softmax_elems(s) as f64 != report.stage_softmax(s)
        })
        .map(|s| (s, ctr.macs(s), report.stage_macs(s)))
        .collect()
}

/// How a modeled buffer scales.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Scaling {
    /// Grows with the full point count `N`.
    Points,
    /// Grows with the tile size `N_t` only.
    Tile,
    /// Independent of the point count.
    Fixed,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Buffer {
    pub name: &'static str,
    pub elems: f64,
    pub bytes: f64,
    /// Kept for the backward pass (as opposed to short-lived).
    pub retained: bool,
    pub scaling: Scaling,
    /// Holds slice weights (an `N × M` or `N_t × M` quantity).
    pub slice_weights: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MemoryReport {
    pub buffers: Vec<Buffer>,
    /// Retained bytes plus the largest transient working set.
    pub peak_bytes: f64,
}

impl MemoryReport {
    pub fn buffer(&self, name: &str) -> Option<&Buffer> {
        self.buffers.iter().find(|b| b.name == name)
    }

    /// True if some retained buffer holds `N × M` slice weights.
    pub fn retains_point_slice_weights(&self) -> bool {
        self.buffers
            .iter()
            .any(|b| b.retained && b.slice_weights && b.scaling == Scaling::Points)
    }
}

/// Modeled activation memory of `L` layers at `bytes_per_elem` bytes.
///
/// Training without tiling keeps every layer's per-head weights `w`, and
/// (original variant) the projected features, for the backward pass. Tiled
/// training with checkpointing keeps only each layer's input and the
/// `M × C` state-side tensors; slice weights exist one tile at a time and
/// are recomputed during backward. Inference keeps nothing across layers.
pub fn memory_model(variant: Variant, dims: Dims, training: bool, bytes_per_elem: usize) -> Result<MemoryReport> {
    dims.validate()?;
    let (n, m, c, h, l) = (dims.n as f64, dims.m as f64, dims.c as f64, dims.h as f64, dims.l as f64);
    let nt = dims.value(Sym::Nt);
    let ch = c / h;
    let b = bytes_per_elem as f64;
    let layers = if training { l } else { 1.0 };
    let mut buffers = Vec::new();
    let mut push = |name, elems: f64, retained, scaling, slice_weights| {
        buffers.push(Buffer {
            name,
            elems,
            bytes: elems * b,
            retained,
            scaling,
            slice_weights,
        })
    };
    let activations = if training { 2.0 * n * c * l } else { 2.0 * n * c };
    push("layer_activations", activations, training, Scaling::Points, false);
    push("states", layers * h * (2.0 * m * ch + m * m), training, Scaling::Fixed, false);
    match variant {
        Variant::Original => {
            push("w", layers * h * n * m, training, Scaling::Points, true);
            push("x_proj", layers * n * c, training, Scaling::Points, false);
            push("w_s", layers * n * c, training, Scaling::Points, false);
        }
        Variant::Optimized => {
            push("w", layers * h * n * m, training, Scaling::Points, true);
        }
        Variant::Tiled => {
            push("w", nt * m, false, Scaling::Tile, true);
            push("tile_io", 2.0 * nt * ch, false, Scaling::Tile, false);
        }
    }
    let retained: f64 = buffers.iter().filter(|x| x.retained).map(|x| x.bytes).sum();
    let transient: f64 = buffers.iter().filter(|x| !x.retained).map(|x| x.bytes).sum();
    Ok(MemoryReport {
        buffers,
        peak_bytes: retained + transient,
    })
}
