//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL
//! line each and exits non-zero if any fails.
//!
//! The smoke-training criterion produces the trained model that the
//! cache-fidelity half of the quadrature criterion decodes with.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use slicefield::cache::{build_cache_chunked, decode_points, CacheStrategy};
use slicefield::complexity::{counter_mismatches, cost_model, flop_ratio, memory_model, Dims, Variant};
use slicefield::counters::OpCounter;
use slicefield::geometry::quadrature::manufactured_cd;
use slicefield::geometry::{
    gen_sphere_mesh, manufactured_field, mae, quadrature_convergence, r2, rel_l2, FlowConstants, MeshBatch,
    ReferenceIntegrals,
};
use slicefield::linalg::rel_diff;
use slicefield::model::{forward, forward_with, ModelConfig, ModelParams};
use slicefield::physattn::{equivalence_trial, multihead_physattn_counted, AttnOptions, HeadParams, Mode};
use slicefield::train::{
    amortized_sample, backward, backward_counted, evaluate, finite_difference_grads, init_for_dataset, train,
    worst_relative_error, BackwardOptions, TrainConfig, TrainOutcome,
};
use slicefield::{Matrix, Rng};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn model_cfg(layers: usize, heads: usize, channels: usize, slices: usize, mode: Mode) -> ModelConfig {
    ModelConfig {
        layers,
        heads,
        channels,
        slices,
        in_dim: 3,
        out_dim: 1,
        ffn_hidden: 2 * channels,
        mode,
        tile_size: 64,
    }
}

fn random_mesh(n: usize, rng: &mut Rng) -> MeshBatch {
    let coords: Matrix = rng.uniform_matrix(n, 3, -1.0, 1.0);
    let targets = manufactured_field(&coords).unwrap();
    MeshBatch::new(coords).with_targets(targets)
}

fn equivalence() -> Outcome {
    let mut worst_head = (0.0f64, String::new());
    for seed in 0..100u64 {
        for n in [97, 512, 2048] {
            let t = equivalence_trial(n, 16, 8, seed).map_err(|e| e.to_string())?;
            if t.worst().is_nan() || t.worst() > worst_head.0 {
                worst_head = (t.worst(), format!("n={n} seed={seed}"));
            }
        }
    }
    let mut worst_stack = 0.0f64;
    for seed in 0..5 {
        let mut rng = Rng::seed(1000 + seed);
        let cfg = model_cfg(3, 4, 32, 16, Mode::Original);
        let params = ModelParams::init(&cfg, 3, &mut rng).unwrap();
        let mesh = random_mesh(2048, &mut rng);
        let reference = forward(&params, &mesh, &cfg).unwrap();
        for opts in [AttnOptions::fast(), AttnOptions::tiled(2048 / 8), AttnOptions::tiled(7)] {
            let y = forward_with(&params, &mesh, &cfg, opts).unwrap();
            worst_stack = worst_stack.max(rel_diff(&y, &reference));
        }
    }
    check(
        worst_head.0 <= 1e-10 && worst_stack <= 1e-9,
        format!(
            "per-head worst {:.3e} ({}) over 300 trials, full stack worst {worst_stack:.3e}",
            worst_head.0, worst_head.1
        ),
    )
}

fn complexity_tables() -> Outcome {
    let d = Dims::new(4096, 32, 128, 8);
    let orig = cost_model(Variant::Original, d).map_err(|e| e.to_string())?;
    let opt = cost_model(Variant::Optimized, d).map_err(|e| e.to_string())?;
    let counts = [orig.n_related_time, orig.n_related_space, opt.n_related_time, opt.n_related_space];
    if counts != [5, 4, 3, 2] {
        return Err(format!("N-related term counts {counts:?}, expected [5, 4, 3, 2]"));
    }
    let mut rng = Rng::seed(77);
    let mut checked = 0;
    for k in 0..20 {
        let h = [1, 2, 4][k % 3];
        let c = h * [4, 8][k % 2];
        let m = [2, 4, 8, 16, 32][k % 5];
        let n = [37, 100, 256, 500, 1000, 2000, 64][k % 7];
        let tile = [1, 7, 33, 128, n][k % 5].min(n);
        let dims = Dims::new(n, m, c, h).with_tile(tile);
        let x: Matrix = rng.uniform_matrix(n, c, -1.0, 1.0);
        let heads: Vec<HeadParams> = (0..h).map(|_| HeadParams::init(c / h, m, &mut rng)).collect();
        for (variant, mode) in [
            (Variant::Original, Mode::Original),
            (Variant::Optimized, Mode::Fast),
            (Variant::Tiled, Mode::Tiled),
        ] {
            let mut ctr = OpCounter::new();
            multihead_physattn_counted(&x, &heads, AttnOptions::new(mode, tile), &mut ctr).map_err(|e| e.to_string())?;
            let report = cost_model(variant, dims).map_err(|e| e.to_string())?;
            let bad = counter_mismatches(&report, &ctr);
            if !bad.is_empty() || ctr.total_macs() as f64 != report.totals.macs {
                return Err(format!("{} at {dims:?}: mismatched stages {bad:?}", variant.name()));
            }
            checked += 1;
        }
    }
    Ok(format!("term counts 5/4 vs 3/2; counters exact on {checked} variant-configs (20 configs)"))
}

fn flop_reduction() -> Outcome {
    let r = flop_ratio(Dims::new(1_000_000, 64, 256, 8)).map_err(|e| e.to_string())?;
    check(r <= 0.85, format!("optimized/original FLOPs = {r:.4} at N=1e6, C=256, M=64, H=8"))
}

fn tiling_memory() -> Outcome {
    let mut last = f64::INFINITY;
    let mut peaks = Vec::new();
    for tile in [800_000, 200_000, 100_000, 20_000, 10_000, 5_000] {
        let r = memory_model(Variant::Tiled, Dims::new(800_000, 64, 256, 8).with_tile(tile), true, 8)
            .map_err(|e| e.to_string())?;
        if r.peak_bytes > last {
            return Err(format!("peak rises at tile {tile}: {:.4e} > {last:.4e}", r.peak_bytes));
        }
        if r.retains_point_slice_weights() {
            return Err(format!("model retains N×M weights at tile {tile}"));
        }
        last = r.peak_bytes;
        peaks.push(r.peak_bytes / 1e9);
    }
    let (n, m) = (512, 4);
    let mut rng = Rng::seed(5);
    let cfg = model_cfg(2, 2, 8, m, Mode::Tiled);
    let params = ModelParams::init(&cfg, 3, &mut rng).unwrap();
    let mesh = random_mesh(n, &mut rng);
    let full_w = |checkpoint: bool| -> Result<usize, String> {
        let mut ctr = OpCounter::new();
        let opts = BackwardOptions {
            attn: AttnOptions::tiled(64),
            checkpoint,
        };
        backward_counted(&params, &mesh, &cfg, opts, &mut ctr).map_err(|e| e.to_string())?;
        Ok(ctr.retained().iter().filter(|b| b.name == "w").map(|b| b.elems()).sum::<usize>())
    };
    let on = full_w(true)?;
    let off = full_w(false)?;
    check(
        on == 0 && off == cfg.layers * cfg.heads * n * m,
        format!(
            "modeled peak GB {peaks:.3?}; retained slice-weight elements: {on} with checkpointing, {off} (L·H·N·M) without"
        ),
    )
}

fn decoupled_inference() -> Outcome {
    let n = 4096;
    let mut rng = Rng::seed(9);
    let cfg = model_cfg(4, 4, 32, 16, Mode::Fast);
    let params = ModelParams::init(&cfg, 3, &mut rng).unwrap();
    let mesh = random_mesh(n, &mut rng);
    let reference = forward(&params, &mesh, &cfg).unwrap();
    let original = forward_with(&params, &mesh, &cfg, AttnOptions::original()).unwrap();
    let mut worst = 0.0f64;
    for chunk in [n, n / 3, n / 7] {
        let cache = build_cache_chunked(&params, &cfg, &mesh, chunk, CacheStrategy::Carry).map_err(|e| e.to_string())?;
        let y = decode_points(&cache, &params, &cfg, &mesh).map_err(|e| e.to_string())?;
        worst = worst.max(rel_diff(&y, &reference)).max(rel_diff(&y, &original));
    }
    check(worst <= 1e-9, format!("worst decode vs monolithic {worst:.3e} at N=4096, L=4, chunks N, N/3, N/7"))
}

fn gradient_setup() -> (ModelConfig, ModelParams, MeshBatch) {
    let cfg = model_cfg(2, 2, 8, 4, Mode::Fast);
    let mut rng = Rng::seed(21);
    let mut params = ModelParams::init(&cfg, 3, &mut rng).unwrap();
    // Norms off identity and sharper state attention: every tensor then
    // has a gradient far above the finite-difference noise floor.
    for b in &mut params.blocks {
        for v in b.ln1.gain.iter_mut().chain(&mut b.ln2.shift) {
            *v += rng.uniform(-0.3, 0.3);
        }
        for h in &mut b.heads {
            h.wq = h.wq.scale(4.0);
            h.wk = h.wk.scale(4.0);
        }
    }
    let coords: Matrix = rng.uniform_matrix(32, 3, 0.0, 1.0);
    let targets = manufactured_field(&coords).unwrap();
    (cfg, params, MeshBatch::new(coords).with_targets(targets))
}

fn gradients() -> Outcome {
    let (cfg, params, mesh) = gradient_setup();
    let mut report = Vec::new();
    let mut ok = true;
    for attn in [AttnOptions::original(), AttnOptions::fast(), AttnOptions::tiled(5)] {
        let (_, g) = backward(&params, &mesh, &cfg, BackwardOptions::new(attn)).map_err(|e| e.to_string())?;
        let fd = finite_difference_grads(&params, &mesh, &cfg, attn, 1e-5).map_err(|e| e.to_string())?;
        let (err, name) = worst_relative_error(&g, &fd, 1e-12);
        ok &= err <= 1e-5;
        report.push(format!("{:?} {err:.2e} ({name})", attn.mode));
    }
    let attn = AttnOptions::tiled(7);
    let on = backward(&params, &mesh, &cfg, BackwardOptions { attn, checkpoint: true }).map_err(|e| e.to_string())?;
    let off = backward(&params, &mesh, &cfg, BackwardOptions { attn, checkpoint: false }).map_err(|e| e.to_string())?;
    let ck = worst_relative_error(&on.1, &off.1, 1e-12).0.max((on.0 - off.0).abs());
    ok &= ck <= 1e-8;
    check(ok, format!("FD worst: {}; checkpoint on/off {ck:.2e}", report.join(", ")))
}

fn smoke_setup() -> (ModelConfig, MeshBatch, TrainConfig) {
    let cfg = model_cfg(2, 4, 32, 16, Mode::Fast);
    let mut mesh = gen_sphere_mesh(20_000, &mut Rng::seed(7)).unwrap();
    mesh.targets = Some(manufactured_field(&mesh.coords).unwrap());
    let tcfg = TrainConfig {
        epochs: 200,
        lr: 1e-2,
        subset_size: 2048,
        seed: 11,
        val_every: 50,
        val_chunk_size: 4096,
        ..TrainConfig::default()
    };
    (cfg, mesh, tcfg)
}

fn smoke_training(trained: &mut Option<(ModelConfig, TrainOutcome, MeshBatch)>) -> Outcome {
    let (cfg, mesh, tcfg) = smoke_setup();
    let data = vec![mesh];
    let init = init_for_dataset(&cfg, &data, 1).map_err(|e| e.to_string())?;
    let untrained = evaluate(&init, &cfg, &data, tcfg.val_chunk_size).map_err(|e| e.to_string())?;
    let a = train(init.clone(), &cfg, &data, &[], &tcfg).map_err(|e| e.to_string())?;
    let b = train(init, &cfg, &data, &[], &tcfg).map_err(|e| e.to_string())?;
    let last = a.final_val().ok_or("no validation recorded")?;
    let reproducible = a.params == b.params && a.metrics_csv() == b.metrics_csv();
    let detail = format!(
        "full-mesh rel L2 {untrained:.4} -> {last:.4} ({:.1}x), reproducible: {reproducible}",
        untrained / last
    );
    let ok = last <= 0.2 && untrained / last >= 10.0 && reproducible;
    *trained = Some((cfg, a, data.into_iter().next().unwrap()));
    check(ok, detail)
}

fn quadrature_and_fidelity(trained: &Option<(ModelConfig, TrainOutcome, MeshBatch)>) -> Outcome {
    let fc = FlowConstants::default();
    let reference = ReferenceIntegrals::sphere(1_000_000, &fc).map_err(|e| e.to_string())?;
    let conv = quadrature_convergence(&[100, 1_000, 10_000], 32, 0xC0FFEE, reference.cd, |m| manufactured_cd(m, &fc))
        .map_err(|e| e.to_string())?;
    let slope = conv.slope.ok_or("no slope")?;
    let slope_ok = (-0.7..=-0.3).contains(&slope);

    let (cfg, outcome, mesh) = trained.as_ref().ok_or("smoke training did not produce a model")?;
    let params = &outcome.params;
    let truth = mesh.targets.as_ref().unwrap();
    let mut rng = Rng::seed(2024);
    let mut errors = Vec::new();
    for frac in [0.01, 0.05, 0.2, 0.5, 1.0] {
        let n = (frac * mesh.len() as f64).round() as usize;
        let draws = if n == mesh.len() { 1 } else { 4 };
        let mut total = 0.0;
        for _ in 0..draws {
            let subset = amortized_sample(mesh, n, &mut rng).map_err(|e| e.to_string())?;
            let cache = build_cache_chunked(params, cfg, &subset, 4096, CacheStrategy::Carry).map_err(|e| e.to_string())?;
            let y = decode_points(&cache, params, cfg, mesh).map_err(|e| e.to_string())?;
            total += rel_l2(&y, truth).map_err(|e| e.to_string())?;
        }
        errors.push(total / draws as f64);
    }
    let steps = errors.windows(2).filter(|w| w[1] <= w[0]).count();
    check(
        slope_ok && steps >= 3,
        format!(
            "Cd error slope {slope:.3} (errors {}); cache fidelity {:.4?} non-increasing in {steps}/4 steps",
            conv.errors.iter().map(|e| format!("{e:.3e}")).collect::<Vec<_>>().join(", "),
            errors
        ),
    )
}

fn metric_identities() -> Outcome {
    let truth: Matrix = Rng::seed(3).uniform_matrix(50, 1, -2.0, 2.0);
    let t = truth.data();
    let mean = t.iter().sum::<f64>() / t.len() as f64;
    let zero = Matrix::zeros(50, 1);
    let mean_pred = vec![mean; t.len()];
    let e = |r: slicefield::Result<f64>| r.map_err(|e| e.to_string());
    let perfect = (e(rel_l2(&truth, &truth))?, r2(t, t).map_err(|e| e.to_string())?, e(mae(t, t))?);
    let zero_l2 = e(rel_l2(&zero, &truth))?;
    let mean_r2 = r2(&mean_pred, t).map_err(|e| e.to_string())?;
    check(
        perfect.0 == 0.0
            && perfect.1 == Some(1.0)
            && perfect.2 == 0.0
            && (zero_l2 - 1.0).abs() <= 1e-15
            && mean_r2.is_some_and(|v| v.abs() <= 1e-15),
        format!("perfect {perfect:?}, zero rel L2 {zero_l2}, mean R2 {mean_r2:?}"),
    )
}

fn main() -> ExitCode {
    let mut trained = None;
    let mut failures = 0;
    let mut run = |id: usize, name: &str, budget_secs: u64, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let result = f();
        let elapsed = start.elapsed();
        let budget = Duration::from_secs(budget_secs);
        let (status, detail) = match result {
            Ok(d) if elapsed <= budget => ("PASS", d),
            Ok(d) => ("FAIL", format!("{d}; exceeded {budget_secs}s budget")),
            Err(d) => ("FAIL", d),
        };
        if status == "FAIL" {
            failures += 1;
        }
        println!("criterion {id} {name}: {status} [{:.1}s] {detail}", elapsed.as_secs_f64());
    };
    run(1, "execution-path equivalence", 120, &mut equivalence);
    run(2, "complexity tables and counters", 60, &mut complexity_tables);
    run(3, "FLOP reduction", 5, &mut flop_reduction);
    run(4, "tiling memory model", 60, &mut tiling_memory);
    run(5, "decoupled inference", 120, &mut decoupled_inference);
    run(6, "gradient correctness", 300, &mut gradients);
    run(7, "amortized-training smoke test", 1800, &mut || smoke_training(&mut trained));
    run(8, "quadrature convergence and cache fidelity", 300, &mut || quadrature_and_fidelity(&trained));
    run(9, "metric identities", 5, &mut metric_identities);
    println!("acceptance: {} of 9 criteria passed", 9 - failures);
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
