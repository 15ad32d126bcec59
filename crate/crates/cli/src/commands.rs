//! Subcommand implementations.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use slicefield::cache::{build_cache, build_cache_recompute, decode_stream, load_cache, save_cache};
use slicefield::complexity::{cost_model, flop_ratio, Dims, Variant};
use slicefield::geometry::io::{format_real, open_mesh, read_mesh_file, write_mesh_file};
use slicefield::geometry::{gen_sphere_mesh, integrate_force, manufactured_field, metrics, sample_sphere, MeshBatch, ReferenceIntegrals};
use slicefield::model::{forward, load_checkpoint, save_checkpoint, slice_weights_at, ModelConfig, ModelParams};
use slicefield::physattn::{equivalence_trial, physattn_fast, physattn_original, physattn_tiled, HeadParams, Mode};
use slicefield::train::{amortized_sample, init_for_dataset, train};
use slicefield::{Matrix, Real, Rng};

use crate::config::{Overrides, Precision, RunConfig};
use crate::{BadInput, Command, VerificationFailed};

/// Per-head tolerance of the execution-path check.
const EQUIVALENCE_TOL: f64 = 1e-10;

pub fn run(command: Command, o: &Overrides) -> Result<()> {
    let mut cfg = RunConfig::resolve(o)?;
    if let Some(parent) = o.out.as_deref().and_then(Path::parent) {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
    }
    match command {
        Command::Train { train, val } => cmd_train(&mut cfg, o, train, val),
        Command::Infer { checkpoint, mesh } => cmd_infer(&mut cfg, o, &checkpoint, &mesh),
        Command::Cache { checkpoint, mesh, recompute } => cmd_cache(&mut cfg, o, &checkpoint, &mesh, recompute),
        Command::Decode { checkpoint, cache, mesh } => cmd_decode(&mut cfg, o, &checkpoint, &cache, &mesh),
        Command::CheckEquivalence {
            seeds,
            sizes,
            channels,
            slices,
        } => cmd_check(&cfg, o, seeds, &sizes, channels, slices),
        Command::Flops { points } => cmd_flops(&cfg, o, points),
        Command::Bench { sizes, repeats } => cmd_bench(&cfg, o, &sizes, repeats),
        Command::Integrate { mesh, pred } => cmd_integrate(&cfg, o, &mesh, &pred),
        Command::SampleSubset { mesh, size } => cmd_sample(&cfg, o, &mesh, size),
        Command::ExportSlices {
            checkpoint,
            mesh,
            layer,
            head,
        } => cmd_export_slices(&mut cfg, o, &checkpoint, &mesh, layer, head),
        Command::GenMesh {
            points,
            random,
            reference_points,
        } => cmd_gen_mesh(&cfg, o, points, random, reference_points),
    }
}

fn require_out(o: &Overrides) -> Result<&Path> {
    o.out
        .as_deref()
        .ok_or_else(|| BadInput("--out is required for this command".into()).into())
}

fn require_file(path: &Path) -> Result<()> {
    if !path.is_file() {
        return Err(BadInput(format!("no such file: {}", path.display())).into());
    }
    Ok(())
}

/// Loads a checkpoint and makes its model the resolved model, keeping
/// execution flags from the command line.
fn load_model(cfg: &mut RunConfig, o: &Overrides, path: &Path) -> Result<ModelParams> {
    require_file(path)?;
    let (model, params) = load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    cfg.model = model;
    cfg.apply(o);
    cfg.model.validate()?;
    Ok(params)
}

fn load_mesh(path: &Path) -> Result<MeshBatch> {
    require_file(path)?;
    read_mesh_file(path).with_context(|| format!("reading mesh {}", path.display()))
}

fn write_rows(out: &Path, header: &str, m: &Matrix) -> Result<()> {
    let mut w = BufWriter::new(File::create(out).with_context(|| format!("creating {}", out.display()))?);
    writeln!(w, "{header}")?;
    write_matrix_rows(&mut w, m)?;
    w.flush()?;
    Ok(())
}

fn write_matrix_rows(w: &mut impl Write, m: &Matrix) -> Result<()> {
    for row in m.row_iter() {
        let line: Vec<String> = row.iter().map(|&v| format_real(v)).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    Ok(())
}

fn prediction_header(k: usize) -> String {
    (1..=k).map(|j| format!("y{j}")).collect::<Vec<_>>().join(",")
}

/// Reads a prediction CSV written by `infer` or `decode`.
fn read_predictions(path: &Path) -> Result<Matrix> {
    require_file(path)?;
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let width = lines
        .next()
        .ok_or_else(|| BadInput(format!("{}: empty prediction file", path.display())))?
        .split(',')
        .count();
    let mut data = Vec::new();
    for (i, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != width {
            return Err(BadInput(format!("{}: line {} has {} fields, expected {width}", path.display(), i + 2, fields.len())).into());
        }
        for f in fields {
            data.push(
                f.trim()
                    .parse::<f64>()
                    .map_err(|_| BadInput(format!("{}: line {}: bad number `{f}`", path.display(), i + 2)))?,
            );
        }
    }
    Ok(Matrix::from_vec(data.len() / width, width, data)?)
}

fn cmd_train(cfg: &mut RunConfig, o: &Overrides, train_paths: Vec<PathBuf>, val_paths: Vec<PathBuf>) -> Result<()> {
    cfg.require_f64("train")?;
    if !train_paths.is_empty() {
        cfg.data.train = train_paths;
    }
    if !val_paths.is_empty() {
        cfg.data.val = val_paths;
    }
    let out = require_out(o)?;
    if cfg.data.train.is_empty() {
        return Err(BadInput("no training meshes given (--train or data.train)".into()).into());
    }
    let train_set = cfg.data.train.iter().map(|p| load_mesh(p)).collect::<Result<Vec<_>>>()?;
    let val_set = cfg.data.val.iter().map(|p| load_mesh(p)).collect::<Result<Vec<_>>>()?;
    let first = &train_set[0];
    let targets = first
        .targets
        .as_ref()
        .ok_or_else(|| BadInput("training mesh has no target columns".into()))?;
    cfg.model.in_dim = first.input_dim();
    cfg.model.out_dim = targets.cols();
    cfg.train.val_chunk_size = cfg.chunk_size;
    let params = init_for_dataset(&cfg.model, &train_set, cfg.seed)?;
    cfg.write_into(out)?;
    let outcome = train(params, &cfg.model, &train_set, &val_set, &cfg.train)?;
    save_checkpoint(&outcome.params, &cfg.model, out.join("checkpoint.json"))?;
    outcome.write_metrics(out.join("metrics.csv"))?;
    if let Some(last) = outcome.log.last() {
        println!("final_train_loss,{}", format_real(last.train_loss));
    }
    if let Some(v) = outcome.final_val() {
        println!("final_val_rel_l2,{}", format_real(v));
    }
    Ok(())
}

fn cmd_infer(cfg: &mut RunConfig, o: &Overrides, checkpoint: &Path, mesh: &Path) -> Result<()> {
    cfg.require_f64("infer")?;
    let params = load_model(cfg, o, checkpoint)?;
    let out = require_out(o)?;
    let mesh = load_mesh(mesh)?;
    let mut model = cfg.model.clone();
    if cfg.parallel && model.mode == Mode::Tiled {
        model.tile_size = model.tile_size.max(1);
    }
    let y = forward(&params, &mesh, &model)?;
    write_rows(out, &prediction_header(cfg.model.out_dim), &y)?;
    cfg.write_beside(out)
}

fn cmd_cache(cfg: &mut RunConfig, o: &Overrides, checkpoint: &Path, mesh: &Path, recompute: bool) -> Result<()> {
    cfg.require_f64("cache")?;
    let params = load_model(cfg, o, checkpoint)?;
    let out = require_out(o)?;
    require_file(mesh)?;
    if cfg.chunk_size == 0 {
        return Err(BadInput("--chunk-size must be at least 1".into()).into());
    }
    let chunk = cfg.chunk_size;
    let cache = if recompute {
        build_cache_recompute(&params, &cfg.model, || Ok(open_mesh(mesh)?.chunks(chunk)))?
    } else {
        build_cache(&params, &cfg.model, open_mesh(mesh)?.chunks(chunk))?
    };
    save_cache(&cache, out)?;
    cfg.write_beside(out)?;
    println!("source_points,{}", cache.source_points);
    println!("chunks,{}", cache.source_points.div_ceil(chunk));
    Ok(())
}

fn cmd_decode(cfg: &mut RunConfig, o: &Overrides, checkpoint: &Path, cache: &Path, mesh: &Path) -> Result<()> {
    cfg.require_f64("decode")?;
    let params = load_model(cfg, o, checkpoint)?;
    let out = require_out(o)?;
    require_file(cache)?;
    require_file(mesh)?;
    if cfg.chunk_size == 0 {
        return Err(BadInput("--chunk-size must be at least 1".into()).into());
    }
    let cache = load_cache(cache)?;
    cache.check(&params, &cfg.model)?;
    let mut w = BufWriter::new(File::create(out).with_context(|| format!("creating {}", out.display()))?);
    writeln!(w, "{}", prediction_header(cfg.model.out_dim))?;
    let queries = open_mesh(mesh)?.chunks(cfg.chunk_size);
    let mut io_err = None;
    let summary = decode_stream(&cache, &params, &cfg.model, queries, cfg.parallel, |_, y| {
        if let Err(e) = write_matrix_rows(&mut w, y) {
            io_err = Some(e);
            return Err(slicefield::Error::Io(std::io::Error::other("write failed")));
        }
        Ok(())
    });
    if let Some(e) = io_err {
        return Err(e);
    }
    let summary = summary?;
    w.flush()?;
    cfg.write_beside(out)?;
    println!("points,{}", summary.points);
    println!("chunks,{}", summary.chunks);
    Ok(())
}

fn cmd_check(cfg: &RunConfig, o: &Overrides, seeds: u64, sizes: &[usize], channels: usize, slices: usize) -> Result<()> {
    cfg.require_f64("check-equivalence")?;
    if sizes.contains(&0) || seeds == 0 {
        return Err(BadInput("sizes and seed count must be positive".into()).into());
    }
    let mut csv = String::from("n,seed,path,tile_size,rel_diff\n");
    let mut worst: (f64, String) = (0.0, String::new());
    for &n in sizes {
        for k in 0..seeds {
            let seed = cfg.seed.wrapping_add(k);
            let t = equivalence_trial(n, channels, slices, seed)?;
            csv.push_str(&format!("{n},{seed},fast,,{}\n", format_real(t.fast)));
            let mut note = |diff: f64, what: String| {
                if diff > worst.0 || diff.is_nan() {
                    worst = (diff, what);
                }
            };
            note(t.fast, format!("fast n={n} seed={seed}"));
            for &(tile, d) in &t.tiled {
                csv.push_str(&format!("{n},{seed},tiled,{tile},{}\n", format_real(d)));
                note(d, format!("tiled n={n} tile={tile} seed={seed}"));
            }
        }
    }
    if let Some(out) = &o.out {
        fs::write(out, &csv)?;
        cfg.write_beside(out)?;
    }
    println!("worst_rel_diff,{},{}", format_real(worst.0), worst.1);
    if worst.0.is_nan() || worst.0 > EQUIVALENCE_TOL {
        return Err(VerificationFailed(format!(
            "execution paths disagree: {} at {} exceeds {EQUIVALENCE_TOL:e}",
            format_real(worst.0),
            worst.1
        ))
        .into());
    }
    Ok(())
}

fn dims_for(model: &ModelConfig, points: usize) -> Dims {
    Dims::new(points, model.slices, model.channels, model.heads)
        .with_layers(model.layers)
        .with_tile(model.tile_size.min(points))
}

fn cmd_flops(cfg: &RunConfig, o: &Overrides, points: usize) -> Result<()> {
    let dims = dims_for(&cfg.model, points);
    let mut csv = String::from("variant,op,time_flops,space_bytes,n_dependent\n");
    let mut summary = Vec::new();
    for v in [Variant::Original, Variant::Optimized, Variant::Tiled] {
        let r = cost_model(v, dims)?;
        for row in r.csv_rows() {
            csv.push_str(&row);
            csv.push('\n');
        }
        summary.push(format!(
            "{}: n_related_time={} n_related_space={} total_flops={}",
            v.name(),
            r.n_related_time,
            r.n_related_space,
            format_real(r.totals.flops)
        ));
    }
    summary.push(format!("flop_ratio_optimized_over_original={}", format_real(flop_ratio(dims)?)));
    match &o.out {
        Some(out) => {
            fs::write(out, csv)?;
            cfg.write_beside(out)?;
            summary.iter().for_each(|s| println!("{s}"));
        }
        None => {
            print!("{csv}");
            summary.iter().for_each(|s| eprintln!("{s}"));
        }
    }
    Ok(())
}

fn median_seconds(repeats: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats.max(1) {
        let t = Instant::now();
        f()?;
        times.push(t.elapsed().as_secs_f64());
    }
    times.sort_by(f64::total_cmp);
    Ok(times[times.len() / 2])
}

fn bench_rows<T: Real>(n: usize, ch: usize, m: usize, tile: usize, repeats: usize, seed: u64, precision: &str) -> Result<Vec<String>> {
    let mut rng = Rng::seed(seed);
    let p: HeadParams<T> = HeadParams::<f64>::init(ch, m, &mut rng).cast();
    let x: Matrix<T> = rng.normal_matrix(n, ch);
    let tile = tile.min(n).max(1);
    let mut rows = Vec::new();
    let mut row = |mode: &str, tile: &str, secs: f64| rows.push(format!("{mode},{precision},{n},{ch},{m},{tile},{}", format_real(secs)));
    row("original", "", median_seconds(repeats, || Ok(physattn_original(&x, &p).map(drop)?))?);
    row("fast", "", median_seconds(repeats, || Ok(physattn_fast(&x, &p).map(drop)?))?);
    row(
        "tiled",
        &tile.to_string(),
        median_seconds(repeats, || Ok(physattn_tiled(&x, &p, tile).map(drop)?))?,
    );
    Ok(rows)
}

fn cmd_bench(cfg: &RunConfig, o: &Overrides, sizes: &[usize], repeats: usize) -> Result<()> {
    if sizes.contains(&0) {
        return Err(BadInput("sizes must be positive".into()).into());
    }
    let m = &cfg.model;
    let mut csv = String::from("mode,precision,n,head_channels,slices,tile_size,median_seconds\n");
    for &n in sizes {
        let rows = match cfg.precision {
            Precision::F64 => bench_rows::<f64>(n, m.head_channels(), m.slices, m.tile_size, repeats, cfg.seed, "f64")?,
            Precision::F32 => bench_rows::<f32>(n, m.head_channels(), m.slices, m.tile_size, repeats, cfg.seed, "f32")?,
        };
        for r in rows {
            csv.push_str(&r);
            csv.push('\n');
        }
    }
    match &o.out {
        Some(out) => {
            fs::write(out, csv)?;
            cfg.write_beside(out)?;
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn cmd_integrate(cfg: &RunConfig, o: &Overrides, mesh: &Path, pred: &Path) -> Result<()> {
    cfg.flow.validate()?;
    let mesh = load_mesh(mesh)?;
    let pred = read_predictions(pred)?;
    let truth = mesh
        .targets
        .as_ref()
        .ok_or_else(|| BadInput("mesh has no target columns".into()))?;
    if pred.rows() != mesh.len() {
        return Err(BadInput(format!("{} predictions for {} mesh points", pred.rows(), mesh.len())).into());
    }
    let p_pred = pred.col_block(0, 1).into_data();
    let p_true = truth.col_block(0, 1).into_data();
    let f_pred = integrate_force(&mesh, &p_pred, None, &cfg.flow)?;
    let f_true = integrate_force(&mesh, &p_true, None, &cfg.flow)?;
    let field = metrics(&pred.col_block(0, 1), &truth.col_block(0, 1))?;
    let r2 = field.r2[0].map(format_real).unwrap_or_else(|| "undefined".into());
    let report = format!(
        "quantity,value\ncd_pred,{}\ncd_true,{}\ncl_pred,{}\ncl_true,{}\ncd_abs_err,{}\ncl_abs_err,{}\nfield_rel_l2,{}\nfield_r2,{r2}\nfield_mae,{}\n",
        format_real(f_pred.cd),
        format_real(f_true.cd),
        format_real(f_pred.cl),
        format_real(f_true.cl),
        format_real((f_pred.cd - f_true.cd).abs()),
        format_real((f_pred.cl - f_true.cl).abs()),
        format_real(field.rel_l2),
        format_real(field.mae[0]),
    );
    match &o.out {
        Some(out) => {
            fs::write(out, &report)?;
            cfg.write_beside(out)?;
        }
        None => print!("{report}"),
    }
    Ok(())
}

fn cmd_sample(cfg: &RunConfig, o: &Overrides, mesh: &Path, size: usize) -> Result<()> {
    let out = require_out(o)?;
    let mesh = load_mesh(mesh)?;
    let subset = amortized_sample(&mesh, size, &mut Rng::seed(cfg.seed))?;
    write_mesh_file(out, &subset)?;
    let mut idx = String::from("index\n");
    for i in subset.indices.iter().flatten() {
        idx.push_str(&format!("{i}\n"));
    }
    fs::write(out.with_extension("indices.csv"), idx)?;
    cfg.write_beside(out)
}

fn cmd_export_slices(cfg: &mut RunConfig, o: &Overrides, checkpoint: &Path, mesh: &Path, layer: usize, head: usize) -> Result<()> {
    cfg.require_f64("export-slices")?;
    let params = load_model(cfg, o, checkpoint)?;
    let out = require_out(o)?;
    let mesh = load_mesh(mesh)?;
    let w = slice_weights_at(&params, &mesh, &cfg.model, layer, head)?;
    let header = (1..=w.cols()).map(|j| format!("w{j}")).collect::<Vec<_>>().join(",");
    write_rows(out, &header, &w)?;
    cfg.write_beside(out)
}

fn cmd_gen_mesh(cfg: &RunConfig, o: &Overrides, points: usize, random: bool, reference_points: usize) -> Result<()> {
    let out = require_out(o)?;
    cfg.flow.validate()?;
    let mut rng = Rng::seed(cfg.seed);
    let mut mesh = if random {
        sample_sphere(points, &mut rng)?
    } else {
        gen_sphere_mesh(points, &mut rng)?
    };
    mesh.targets = Some(manufactured_field(&mesh.coords)?);
    write_mesh_file(out, &mesh)?;
    ReferenceIntegrals::sphere(reference_points, &cfg.flow)?.save(out.with_extension("reference.json"))?;
    cfg.write_beside(out)
}
