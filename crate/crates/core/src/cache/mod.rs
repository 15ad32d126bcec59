//! Decoupled inference: build per-layer slice states from a mesh of any size
//! in chunks, then decode arbitrary query points against them.
//!
//! A layer's states depend on every point's features at that layer, and
//! those features depend on the states of all earlier layers. Construction
//! therefore proceeds one layer at a time:
//!
//! 1. accumulate `(s_raw, d)` for layer `l` over all chunks,
//! 2. finalize `s'_out` for every head of layer `l`,
//! 3. advance every chunk through layer `l` using the finished states.
//!
//! [`CacheStrategy::Carry`] keeps each chunk's hidden features between
//! layers (one embed and one pass per layer per chunk, `O(N·C)` memory).
//! [`CacheStrategy::Recompute`] keeps nothing per chunk and re-streams the
//! source for each layer, replaying earlier layers against the cache
//! (`O(K·L²)` chunk passes, memory bounded by one chunk). Both perform the
//! same arithmetic in the same order and give bit-identical caches.
//!
//! Decoding replaces every attention sublayer with
//! `Softmax(Linear2(x)) · s'_out`, which only involves the query point
//! itself, so query rows are independent of one another.

mod file;

use std::ops::Range;

use rayon::prelude::*;

use crate::counters::OpCounter;
use crate::error::{Error, Result};
use crate::geometry::MeshBatch;
use crate::linalg::Matrix;
use crate::model::{embed, embed_input, ffn_sublayer, output_head, ModelConfig, ModelParams};
use crate::physattn::{accumulate_tiles, deslice_cached, finalize_states, SliceAccumulator};

pub use file::{load_cache, save_cache, CACHE_FORMAT_VERSION};

/// Partition of `0..n` into consecutive chunks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChunkPlan {
    pub chunk_size: usize,
    pub ranges: Vec<Range<usize>>,
}

impl ChunkPlan {
    /// `chunk_size` larger than `n` gives a single chunk.
    pub fn new(n: usize, chunk_size: usize) -> Result<Self> {
        if chunk_size == 0 {
            return Err(Error::invalid("chunk_size must be at least 1"));
        }
        let ranges = (0..n).step_by(chunk_size).map(|a| a..(a + chunk_size).min(n)).collect();
        Ok(Self { chunk_size, ranges })
    }

    pub fn len(&self) -> usize {
        self.ranges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }

    pub fn chunks<'a>(&'a self, mesh: &'a MeshBatch) -> impl Iterator<Item = Result<MeshBatch>> + 'a {
        self.ranges.iter().map(move |r| Ok(mesh.slice(r.clone())))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CacheStrategy {
    #[default]
    Carry,
    Recompute,
}

/// Per-layer, per-head `s'_out` plus the parameter fingerprint.
#[derive(Clone, Debug, PartialEq)]
pub struct StateCache {
    pub heads: usize,
    pub slices: usize,
    pub head_channels: usize,
    pub fingerprint: u64,
    /// `states[l][h]` is `M × C_h`.
    pub states: Vec<Vec<Matrix>>,
    /// Accumulated `(s_raw, d)` behind each state. Present after a build,
    /// empty after loading from disk.
    pub totals: Vec<Vec<SliceAccumulator>>,
    /// Points aggregated into the cache.
    pub source_points: usize,
}

impl StateCache {
    pub fn layers(&self) -> usize {
        self.states.len()
    }

    /// Rejects use with parameters other than those the cache was built from.
    pub fn check(&self, params: &ModelParams, cfg: &ModelConfig) -> Result<()> {
        let found = params.fingerprint(cfg);
        if found != self.fingerprint {
            return Err(Error::FingerprintMismatch {
                expected: self.fingerprint,
                found,
            });
        }
        if self.layers() != cfg.layers || self.heads != cfg.heads || self.slices != cfg.slices {
            return Err(Error::invalid("cache shape does not match model configuration"));
        }
        Ok(())
    }
}

/// Runs one block on `x` with attention against finished states.
fn apply_cached_layer(
    params: &ModelParams,
    cfg: &ModelConfig,
    l: usize,
    states: &[Matrix],
    x: &mut Matrix,
    ctr: &mut OpCounter,
) -> Result<()> {
    let block = &params.blocks[l];
    let ch = cfg.head_channels();
    let a = block.ln1.apply(x)?;
    for (h, hp) in block.heads.iter().enumerate() {
        let yh = deslice_cached(&a.col_block(h * ch, ch), hp, &states[h], cfg.tile_size, ctr)?;
        x.add_col_block(h * ch, &yh);
    }
    ffn_sublayer(block, x, ctr)
}

fn embed_chunk(params: &ModelParams, cfg: &ModelConfig, chunk: &MeshBatch, ctr: &mut OpCounter) -> Result<Matrix> {
    embed(params, &embed_input(params, chunk, cfg)?, ctr)
}

/// Adds the layer-`l` contributions of hidden features `x` into `acc`.
fn accumulate_layer(
    params: &ModelParams,
    cfg: &ModelConfig,
    l: usize,
    x: &Matrix,
    acc: &mut [SliceAccumulator],
    ctr: &mut OpCounter,
) -> Result<()> {
    let block = &params.blocks[l];
    let ch = cfg.head_channels();
    let a = block.ln1.apply(x)?;
    for (h, hp) in block.heads.iter().enumerate() {
        let part = accumulate_tiles(&a.col_block(h * ch, ch), hp, x.rows(), false, ctr)?;
        acc[h].add(&part);
    }
    Ok(())
}

fn finalize_layer(
    params: &ModelParams,
    l: usize,
    acc: &[SliceAccumulator],
    ctr: &mut OpCounter,
) -> Result<Vec<Matrix>> {
    params.blocks[l]
        .heads
        .iter()
        .zip(acc)
        .map(|(hp, a)| finalize_states(a, hp, ctr))
        .collect()
}

fn empty_totals(cfg: &ModelConfig) -> Vec<SliceAccumulator> {
    (0..cfg.heads)
        .map(|_| SliceAccumulator::new(cfg.slices, cfg.head_channels()))
        .collect()
}

fn new_cache(params: &ModelParams, cfg: &ModelConfig) -> StateCache {
    StateCache {
        heads: cfg.heads,
        slices: cfg.slices,
        head_channels: cfg.head_channels(),
        fingerprint: params.fingerprint(cfg),
        states: Vec::with_capacity(cfg.layers),
        totals: Vec::with_capacity(cfg.layers),
        source_points: 0,
    }
}

/// Builds the cache from chunks, keeping each chunk's hidden features.
pub fn build_cache<I>(params: &ModelParams, cfg: &ModelConfig, chunks: I) -> Result<StateCache>
where
    I: IntoIterator<Item = Result<MeshBatch>>,
{
    build_cache_counted(params, cfg, chunks, &mut OpCounter::new())
}

pub fn build_cache_counted<I>(params: &ModelParams, cfg: &ModelConfig, chunks: I, ctr: &mut OpCounter) -> Result<StateCache>
where
    I: IntoIterator<Item = Result<MeshBatch>>,
{
    params.check_config(cfg)?;
    let mut xs = Vec::new();
    let mut cache = new_cache(params, cfg);
    for (k, chunk) in chunks.into_iter().enumerate() {
        let run = || -> Result<Matrix> { embed_chunk(params, cfg, &chunk?, ctr) };
        let x = run().map_err(|e| Error::Chunk {
            chunk: k,
            source: Box::new(e),
        })?;
        cache.source_points += x.rows();
        if x.rows() > 0 {
            xs.push(x);
        }
    }
    if xs.is_empty() {
        return Err(Error::invalid("cannot build a cache from an empty mesh stream"));
    }
    for l in 0..cfg.layers {
        let mut run = || -> Result<()> {
            let mut acc = empty_totals(cfg);
            for x in &xs {
                accumulate_layer(params, cfg, l, x, &mut acc, ctr)?;
            }
            let states = finalize_layer(params, l, &acc, ctr)?;
            for x in &mut xs {
                apply_cached_layer(params, cfg, l, &states, x, ctr)?;
            }
            cache.states.push(states);
            cache.totals.push(acc);
            Ok(())
        };
        run().map_err(|e| e.at_layer(l))?;
    }
    Ok(cache)
}

/// Builds the cache holding at most one chunk at a time. `source` is
/// called once per layer and must yield the same chunks every time.
pub fn build_cache_recompute<F, I>(params: &ModelParams, cfg: &ModelConfig, mut source: F) -> Result<StateCache>
where
    F: FnMut() -> Result<I>,
    I: IntoIterator<Item = Result<MeshBatch>>,
{
    params.check_config(cfg)?;
    let ctr = &mut OpCounter::new();
    let mut cache = new_cache(params, cfg);
    let mut seen_points = None;
    for l in 0..cfg.layers {
        let mut acc = empty_totals(cfg);
        let mut points = 0;
        for (k, chunk) in source()?.into_iter().enumerate() {
            let run = || -> Result<()> {
                let chunk = chunk?;
                if chunk.is_empty() {
                    return Ok(());
                }
                let mut x = embed_chunk(params, cfg, &chunk, ctr)?;
                for (j, states) in cache.states.iter().enumerate() {
                    apply_cached_layer(params, cfg, j, states, &mut x, ctr)?;
                }
                points += x.rows();
                accumulate_layer(params, cfg, l, &x, &mut acc, ctr)
            };
            run().map_err(|e| Error::Chunk {
                chunk: k,
                source: Box::new(e),
            })?;
        }
        if points == 0 {
            return Err(Error::invalid("cannot build a cache from an empty mesh stream"));
        }
        if seen_points.is_some_and(|p| p != points) {
            return Err(Error::invalid("mesh source changed between layers"));
        }
        seen_points = Some(points);
        cache.states.push(finalize_layer(params, l, &acc, ctr).map_err(|e| e.at_layer(l))?);
        cache.totals.push(acc);
    }
    if cfg.layers == 0 {
        for chunk in source()? {
            cache.source_points += chunk?.len();
        }
    } else {
        cache.source_points = seen_points.unwrap_or(0);
    }
    Ok(cache)
}

/// Cache over `mesh` split into chunks of `chunk_size`.
pub fn build_cache_chunked(
    params: &ModelParams,
    cfg: &ModelConfig,
    mesh: &MeshBatch,
    chunk_size: usize,
    strategy: CacheStrategy,
) -> Result<StateCache> {
    let plan = ChunkPlan::new(mesh.len(), chunk_size)?;
    match strategy {
        CacheStrategy::Carry => build_cache(params, cfg, plan.chunks(mesh)),
        CacheStrategy::Recompute => build_cache_recompute(params, cfg, || Ok(plan.chunks(mesh))),
    }
}

pub fn decode_points_counted(
    cache: &StateCache,
    params: &ModelParams,
    cfg: &ModelConfig,
    query: &MeshBatch,
    ctr: &mut OpCounter,
) -> Result<Matrix> {
    cache.check(params, cfg)?;
    if query.is_empty() {
        return Ok(Matrix::zeros(0, cfg.out_dim));
    }
    let mut x = embed_chunk(params, cfg, query, ctr)?;
    for (l, states) in cache.states.iter().enumerate() {
        apply_cached_layer(params, cfg, l, states, &mut x, ctr).map_err(|e| e.at_layer(l))?;
    }
    output_head(params, &x, ctr)
}

/// Predictions at the query points.
pub fn decode_points(cache: &StateCache, params: &ModelParams, cfg: &ModelConfig, query: &MeshBatch) -> Result<Matrix> {
    decode_points_counted(cache, params, cfg, query, &mut OpCounter::new())
}

/// As [`decode_points`], with blocks of `block` rows decoded on the rayon
/// pool. Rows do not interact, so the result is bit-identical.
pub fn decode_points_parallel(
    cache: &StateCache,
    params: &ModelParams,
    cfg: &ModelConfig,
    query: &MeshBatch,
    block: usize,
) -> Result<Matrix> {
    cache.check(params, cfg)?;
    let plan = ChunkPlan::new(query.len(), block)?;
    let parts: Vec<Matrix> = plan
        .ranges
        .par_iter()
        .map(|r| decode_points(cache, params, cfg, &query.slice(r.clone())))
        .collect::<Result<_>>()?;
    if parts.is_empty() {
        return Ok(Matrix::zeros(0, cfg.out_dim));
    }
    Matrix::vstack(&parts)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecodeSummary {
    pub points: usize,
    pub chunks: usize,
}

/// Rows per parallel work item in [`decode_stream`].
pub const PARALLEL_DECODE_BLOCK: usize = 256;

/// Decodes query chunks one at a time and hands each `(chunk, prediction)`
/// to `sink`. Failures are reported with the chunk index. With `parallel`
/// each chunk is split across the rayon pool; output is unchanged.
pub fn decode_stream<I, S>(
    cache: &StateCache,
    params: &ModelParams,
    cfg: &ModelConfig,
    queries: I,
    parallel: bool,
    mut sink: S,
) -> Result<DecodeSummary>
where
    I: IntoIterator<Item = Result<MeshBatch>>,
    S: FnMut(&MeshBatch, &Matrix) -> Result<()>,
{
    cache.check(params, cfg)?;
    let mut summary = DecodeSummary { points: 0, chunks: 0 };
    for (k, q) in queries.into_iter().enumerate() {
        let run = || -> Result<usize> {
            let q = q?;
            let y = if parallel {
                decode_points_parallel(cache, params, cfg, &q, PARALLEL_DECODE_BLOCK)?
            } else {
                decode_points(cache, params, cfg, &q)?
            };
            sink(&q, &y)?;
            Ok(q.len())
        };
        summary.points += run().map_err(|e| Error::Chunk {
            chunk: k,
            source: Box::new(e),
        })?;
        summary.chunks += 1;
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{rel_diff, Rng};
    use crate::model::{forward, forward_with_states};
    use crate::physattn::Mode;

    fn setup(n: usize, layers: usize) -> (ModelConfig, ModelParams, MeshBatch) {
        let cfg = ModelConfig {
            layers,
            heads: 2,
            channels: 8,
            slices: 4,
            in_dim: 3,
            out_dim: 1,
            ffn_hidden: 16,
            mode: Mode::Fast,
            tile_size: 50,
        };
        let mut rng = Rng::seed(31);
        let params = ModelParams::init(&cfg, 3, &mut rng).unwrap();
        (cfg, params, MeshBatch::new(rng.uniform_matrix(n, 3, -1.0, 1.0)))
    }

    #[test]
    fn plan_partitions_points() {
        let p = ChunkPlan::new(10, 4).unwrap();
        assert_eq!(p.ranges, vec![0..4, 4..8, 8..10]);
        assert_eq!(ChunkPlan::new(5, 9).unwrap().len(), 1);
        assert!(ChunkPlan::new(5, 0).is_err());
    }

    #[test]
    fn single_chunk_matches_monolithic_states() {
        let (cfg, params, mesh) = setup(300, 2);
        let cache = build_cache_chunked(&params, &cfg, &mesh, 300, CacheStrategy::Carry).unwrap();
        let (_, states) = forward_with_states(&params, &mesh, &cfg).unwrap();
        for (a, b) in cache.states.iter().flatten().zip(states.iter().flatten()) {
            assert!(rel_diff(a, b) <= 1e-12);
        }
    }

    #[test]
    fn chunk_sizes_agree() {
        let (cfg, params, mesh) = setup(999, 2);
        let reference = build_cache_chunked(&params, &cfg, &mesh, 999, CacheStrategy::Carry).unwrap();
        for size in [333, 100, 7] {
            let c = build_cache_chunked(&params, &cfg, &mesh, size, CacheStrategy::Carry).unwrap();
            for (a, b) in c.states.iter().flatten().zip(reference.states.iter().flatten()) {
                assert!(rel_diff(a, b) <= 1e-9, "chunk {size}");
            }
        }
    }

    #[test]
    fn strategies_are_bit_identical() {
        let (cfg, params, mesh) = setup(250, 3);
        let a = build_cache_chunked(&params, &cfg, &mesh, 60, CacheStrategy::Carry).unwrap();
        let b = build_cache_chunked(&params, &cfg, &mesh, 60, CacheStrategy::Recompute).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn chunk_order_only_reassociates() {
        let (cfg, params, mesh) = setup(500, 2);
        let plan = ChunkPlan::new(500, 70).unwrap();
        let fwd = build_cache(&params, &cfg, plan.chunks(&mesh)).unwrap();
        let rev = build_cache(&params, &cfg, plan.ranges.iter().rev().map(|r| Ok(mesh.slice(r.clone())))).unwrap();
        for (a, b) in fwd.totals.iter().flatten().zip(rev.totals.iter().flatten()) {
            assert!(rel_diff(&a.s_raw, &b.s_raw) <= 1e-9);
            for (x, y) in a.d.iter().zip(&b.d) {
                assert!((x - y).abs() <= 1e-9 * x.abs());
            }
        }
    }

    #[test]
    fn decode_reproduces_forward() {
        let (cfg, params, mesh) = setup(400, 2);
        let cache = build_cache_chunked(&params, &cfg, &mesh, 57, CacheStrategy::Carry).unwrap();
        let y = decode_points(&cache, &params, &cfg, &mesh).unwrap();
        assert!(rel_diff(&y, &forward(&params, &mesh, &cfg).unwrap()) <= 1e-9);
        let par = decode_points_parallel(&cache, &params, &cfg, &mesh, 33).unwrap();
        assert_eq!(par, y);
    }

    #[test]
    fn points_decode_independently() {
        let (cfg, params, mesh) = setup(120, 2);
        let cache = build_cache_chunked(&params, &cfg, &mesh, 120, CacheStrategy::Carry).unwrap();
        let full = decode_points(&cache, &params, &cfg, &mesh).unwrap();
        let one = decode_points(&cache, &params, &cfg, &mesh.slice(17..18)).unwrap();
        assert_eq!(one.row(0), full.row(17));
        let mut moved = mesh.clone();
        moved.coords[(3, 0)] += 0.25;
        let again = decode_points(&cache, &params, &cfg, &moved).unwrap();
        assert_eq!(again.row(17), full.row(17));
        assert_ne!(again.row(3), full.row(3));
    }

    #[test]
    fn decode_cost_ignores_source_size() {
        let (cfg, params, mesh) = setup(1000, 2);
        let query = mesh.slice(0..50);
        let mut costs = Vec::new();
        for n in [100, 1000] {
            let cache = build_cache_chunked(&params, &cfg, &mesh.slice(0..n), 64, CacheStrategy::Carry).unwrap();
            let mut ctr = OpCounter::new();
            decode_points_counted(&cache, &params, &cfg, &query, &mut ctr).unwrap();
            costs.push((ctr.total_macs(), ctr.total_softmax_elems()));
        }
        assert_eq!(costs[0], costs[1]);
    }

    #[test]
    fn stream_matches_one_shot() {
        let (cfg, params, mesh) = setup(200, 2);
        let cache = build_cache_chunked(&params, &cfg, &mesh, 200, CacheStrategy::Carry).unwrap();
        let whole = decode_points(&cache, &params, &cfg, &mesh).unwrap();
        for (chunks, parallel) in [(1, false), (10, false), (10, true)] {
            let plan = ChunkPlan::new(200, 200 / chunks).unwrap();
            let mut parts = Vec::new();
            let summary = decode_stream(&cache, &params, &cfg, plan.chunks(&mesh), parallel, |_, y| {
                parts.push(y.clone());
                Ok(())
            })
            .unwrap();
            assert_eq!(summary, DecodeSummary { points: 200, chunks });
            assert_eq!(Matrix::vstack(&parts).unwrap(), whole);
        }
    }

    #[test]
    fn mismatched_fingerprint_rejected() {
        let (cfg, params, mesh) = setup(50, 1);
        let cache = build_cache_chunked(&params, &cfg, &mesh, 50, CacheStrategy::Carry).unwrap();
        let mut other = params.clone();
        other.head.b[0] += 1e-9;
        assert!(matches!(
            decode_points(&cache, &other, &cfg, &mesh),
            Err(Error::FingerprintMismatch { .. })
        ));
    }

    #[test]
    fn empty_inputs() {
        let (cfg, params, mesh) = setup(20, 1);
        assert!(build_cache(&params, &cfg, std::iter::empty()).is_err());
        let cache = build_cache_chunked(&params, &cfg, &mesh, 20, CacheStrategy::Carry).unwrap();
        let y = decode_points(&cache, &params, &cfg, &mesh.slice(0..0)).unwrap();
        assert_eq!(y.shape(), (0, 1));
    }
}
