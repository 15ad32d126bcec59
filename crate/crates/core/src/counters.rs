//! Per-invocation operation counters.
//!
//! Kernels report every matrix product as multiply-adds against a [`Stage`],
//! every softmax by element count, and every intermediate buffer by shape.
//! The cost model in [`crate::complexity`] predicts the same quantities.

use std::collections::BTreeMap;
use std::fmt;

use serde::Serialize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum Stage {
    Linear1,
    Linear2,
    Slice,
    Attention,
    Deslice,
    Linear3,
    Embed,
    Ffn,
    Head,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Linear1 => "linear1",
            Stage::Linear2 => "linear2_softmax",
            Stage::Slice => "slice",
            Stage::Attention => "attention",
            Stage::Deslice => "deslice",
            Stage::Linear3 => "linear3",
            Stage::Embed => "embed",
            Stage::Ffn => "ffn",
            Stage::Head => "head",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Named intermediate buffer, tracked by shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct BufferShape {
    pub name: &'static str,
    pub rows: usize,
    pub cols: usize,
}

impl BufferShape {
    pub fn elems(&self) -> usize {
        self.rows * self.cols
    }
}

#[derive(Clone, Debug, Default)]
pub struct OpCounter {
    macs: BTreeMap<Stage, u64>,
    softmax: BTreeMap<Stage, u64>,
    transient: BTreeMap<&'static str, BufferShape>,
    retained: Vec<BufferShape>,
}

impl OpCounter {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records a P×Q by Q×R product.
    #[inline]
    pub fn matmul(&mut self, stage: Stage, p: usize, q: usize, r: usize) {
        *self.macs.entry(stage).or_default() += (p * q * r) as u64;
    }

    #[inline]
    pub fn softmax(&mut self, stage: Stage, elems: usize) {
        *self.softmax.entry(stage).or_default() += elems as u64;
    }

    /// Notes a short-lived buffer; keeps the largest shape seen per name.
    pub fn transient(&mut self, name: &'static str, rows: usize, cols: usize) {
        let shape = BufferShape { name, rows, cols };
        self.transient
            .entry(name)
            .and_modify(|s| {
                if shape.elems() > s.elems() {
                    *s = shape;
                }
            })
            .or_insert(shape);
    }

    /// Notes a buffer kept alive for the backward pass.
    pub fn retain(&mut self, name: &'static str, rows: usize, cols: usize) {
        self.retained.push(BufferShape { name, rows, cols });
    }

    pub fn macs(&self, stage: Stage) -> u64 {
        self.macs.get(&stage).copied().unwrap_or(0)
    }

    pub fn total_macs(&self) -> u64 {
        self.macs.values().sum()
    }

    pub fn softmax_elems(&self, stage: Stage) -> u64 {
        self.softmax.get(&stage).copied().unwrap_or(0)
    }

    pub fn total_softmax_elems(&self) -> u64 {
        self.softmax.values().sum()
    }

    pub fn stages(&self) -> impl Iterator<Item = (Stage, u64)> + '_ {
        self.macs.iter().map(|(&s, &m)| (s, m))
    }

    pub fn peak_transient(&self, name: &str) -> Option<BufferShape> {
        self.transient.get(name).copied()
    }

    pub fn retained(&self) -> &[BufferShape] {
        &self.retained
    }

    pub fn retained_elems(&self) -> usize {
        self.retained.iter().map(BufferShape::elems).sum()
    }

    pub fn merge(&mut self, other: &OpCounter) {
        for (&s, &m) in &other.macs {
            *self.macs.entry(s).or_default() += m;
        }
        for (&s, &m) in &other.softmax {
            *self.softmax.entry(s).or_default() += m;
        }
        for shape in other.transient.values() {
            self.transient(shape.name, shape.rows, shape.cols);
        }
        self.retained.extend_from_slice(&other.retained);
    }
}
