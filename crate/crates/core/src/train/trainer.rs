//! Subset-sampled training: each step draws `n` points from one mesh,
//! differentiates the relative L2 loss on them and takes an AdamW step.
//! Validation decodes every point of the held-out meshes through the
//! state cache, so validation meshes may be far larger than `n`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{amortized_sample, backward, clip_grad_norm, AdamW, AdamWConfig, BackwardOptions, CosineSchedule};
use crate::cache::{build_cache_chunked, decode_points, CacheStrategy};
use crate::error::{Error, Result};
use crate::geometry::{rel_l2, MeshBatch};
use crate::linalg::Rng;
use crate::model::{CoordNorm, ModelConfig, ModelParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub subset_size: usize,
    pub seed: u64,
    pub grad_clip: f64,
    /// Validate every this many epochs; the last epoch always validates.
    pub val_every: usize,
    /// Chunk size for cache construction during validation.
    pub val_chunk_size: usize,
    /// Recompute tile weights in backward instead of keeping them.
    pub checkpoint: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            lr: 1e-3,
            min_lr: 1e-6,
            warmup_frac: 0.05,
            weight_decay: 0.05,
            subset_size: 2048,
            seed: 0,
            grad_clip: 1.0,
            val_every: 10,
            val_chunk_size: 4096,
            checkpoint: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("lr must be finite and non-negative"));
        }
        if self.subset_size == 0 {
            return Err(Error::invalid("subset_size must be at least 1"));
        }
        if self.val_chunk_size == 0 || self.val_every == 0 {
            return Err(Error::invalid("val_every and val_chunk_size must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return Err(Error::invalid("warmup_frac must lie in [0, 1]"));
        }
        if self.grad_clip.is_nan() || self.grad_clip <= 0.0 {
            return Err(Error::invalid("grad_clip must be positive"));
        }
        Ok(())
    }
}

/// One row of the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Steps completed at the end of this epoch.
    pub step: usize,
    pub lr: f64,
    /// Mean subset loss over the epoch's steps.
    pub train_loss: f64,
    pub val_rel_l2: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<EpochRecord>,
}

impl TrainOutcome {
    pub fn final_val(&self) -> Option<f64> {
        self.log.iter().rev().find_map(|r| r.val_rel_l2)
    }

    /// `epoch,step,lr,train_loss,val_rel_l2` with 17 significant digits;
    /// epochs without validation leave the last column empty.
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("epoch,step,lr,train_loss,val_rel_l2\n");
        for r in &self.log {
            let val = r.val_rel_l2.map(|v| format!("{v:.16e}")).unwrap_or_default();
            writeln!(out, "{},{},{:.16e},{:.16e},{val}", r.epoch, r.step, r.lr, r.train_loss).expect("string write");
        }
        out
    }

    pub fn write_metrics(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.metrics_csv())?;
        Ok(())
    }
}

/// Fresh parameters whose coordinate bounds are fitted on `meshes`.
pub fn init_for_dataset(cfg: &ModelConfig, meshes: &[MeshBatch], seed: u64) -> Result<ModelParams> {
    let norm = CoordNorm::fit(meshes)?;
    let mut params = ModelParams::init(cfg, norm.lo.len(), &mut Rng::seed(seed))?;
    params.coord_norm = norm;
    Ok(params)
}

/// Mean full-mesh relative L2 over `meshes`, decoded through the cache.
pub fn evaluate(params: &ModelParams, cfg: &ModelConfig, meshes: &[MeshBatch], chunk_size: usize) -> Result<f64> {
    if meshes.is_empty() {
        return Err(Error::invalid("no meshes to evaluate"));
    }
    let mut total = 0.0;
    for mesh in meshes {
        let targets = mesh
            .targets
            .as_ref()
            .ok_or_else(|| Error::invalid("evaluation mesh has no targets"))?;
        let cache = build_cache_chunked(params, cfg, mesh, chunk_size, CacheStrategy::Carry)?;
        total += rel_l2(&decode_points(&cache, params, cfg, mesh)?, targets)?;
    }
    Ok(total / meshes.len() as f64)
}

/// Trains `params` for `tcfg.epochs` epochs, one step per training mesh
/// per epoch, with a fresh subset on every step. `val` falls back to the
/// training meshes when empty.
pub fn train(
    mut params: ModelParams,
    cfg: &ModelConfig,
    train_set: &[MeshBatch],
    val: &[MeshBatch],
    tcfg: &TrainConfig,
) -> Result<TrainOutcome> {
    tcfg.validate()?;
    params.check_config(cfg)?;
    if train_set.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    for mesh in train_set {
        if tcfg.subset_size > mesh.len() {
            return Err(Error::invalid(format!(
                "subset size {} exceeds a training mesh of {} points",
                tcfg.subset_size,
                mesh.len()
            )));
        }
    }
    let val = if val.is_empty() { train_set } else { val };
    let total_steps = tcfg.epochs * train_set.len();
    let schedule = CosineSchedule::new(tcfg.lr, tcfg.min_lr, tcfg.warmup_frac, total_steps);
    let mut opt = AdamW::new(
        AdamWConfig {
            weight_decay: tcfg.weight_decay,
            ..AdamWConfig::default()
        },
        params.num_params(),
    );
    let opts = BackwardOptions {
        attn: cfg.attn_options(),
        checkpoint: tcfg.checkpoint,
    };
    let mut rng = Rng::seed(tcfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = Vec::with_capacity(tcfg.epochs);
    let mut step = 0;
    for epoch in 0..tcfg.epochs {
        order.shuffle(rng.inner());
        let mut loss_sum = 0.0;
        let mut lr = schedule.lr(step);
        for &m in &order {
            let subset = amortized_sample(&train_set[m], tcfg.subset_size, &mut rng)?;
            let (loss, mut grads) = backward(&params, &subset, cfg, opts)?;
            if !loss.is_finite() || !grads.is_finite() {
                return Err(Error::Divergence { step, loss });
            }
            clip_grad_norm(&mut grads, tcfg.grad_clip);
            lr = schedule.lr(step);
            opt.update(&mut params, &grads, lr);
            loss_sum += loss;
            step += 1;
        }
        let val_rel_l2 = if (epoch + 1) % tcfg.val_every == 0 || epoch + 1 == tcfg.epochs {
            Some(evaluate(&params, cfg, val, tcfg.val_chunk_size)?)
        } else {
            None
        };
        log.push(EpochRecord {
            epoch,
            step,
            lr,
            train_loss: loss_sum / train_set.len() as f64,
            val_rel_l2,
        });
    }
    Ok(TrainOutcome { params, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::manufactured_field;
    use crate::physattn::Mode;

    fn small() -> (ModelConfig, Vec<MeshBatch>) {
        let cfg = ModelConfig {
            layers: 1,
            heads: 2,
            channels: 8,
            slices: 4,
            in_dim: 3,
            out_dim: 1,
            ffn_hidden: 16,
            mode: Mode::Tiled,
            tile_size: 16,
        };
        let mut rng = Rng::seed(2);
        let coords = rng.uniform_matrix(120, 3, -1.0, 1.0);
        let targets = manufactured_field(&coords).unwrap();
        (cfg, vec![MeshBatch::new(coords).with_targets(targets)])
    }

    fn tcfg(lr: f64) -> TrainConfig {
        TrainConfig {
            epochs: 6,
            lr,
            min_lr: 0.0,
            subset_size: 40,
            val_every: 3,
            val_chunk_size: 50,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let (cfg, data) = small();
        let params = init_for_dataset(&cfg, &data, 5).unwrap();
        let out = train(params.clone(), &cfg, &data, &[], &tcfg(0.0)).unwrap();
        assert_eq!(out.params, params);
    }

    #[test]
    fn deterministic_and_logged() {
        let (cfg, data) = small();
        let params = init_for_dataset(&cfg, &data, 5).unwrap();
        let a = train(params.clone(), &cfg, &data, &[], &tcfg(3e-3)).unwrap();
        let b = train(params, &cfg, &data, &[], &tcfg(3e-3)).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.metrics_csv(), b.metrics_csv());
        assert_eq!(a.log.len(), 6);
        let validated: Vec<_> = a.log.iter().map(|r| r.val_rel_l2.is_some()).collect();
        assert_eq!(validated, [false, false, true, false, false, true]);
        assert!(a.metrics_csv().lines().nth(1).unwrap().ends_with(','));
    }

    #[test]
    fn oversized_subset_rejected() {
        let (cfg, data) = small();
        let params = init_for_dataset(&cfg, &data, 5).unwrap();
        let t = TrainConfig {
            subset_size: 121,
            ..tcfg(1e-3)
        };
        assert!(train(params, &cfg, &data, &[], &t).is_err());
    }

    #[test]
    fn nan_loss_aborts_with_step() {
        let (cfg, mut data) = small();
        let params = init_for_dataset(&cfg, &data, 5).unwrap();
        data[0].targets.as_mut().unwrap()[(7, 0)] = f64::NAN;
        let t = TrainConfig {
            subset_size: 120,
            ..tcfg(1e-3)
        };
        assert!(matches!(train(params, &cfg, &data, &[], &t), Err(Error::Divergence { step: 0, .. })));
    }
}
