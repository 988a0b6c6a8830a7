use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use densekit::config::{
    apply_overrides, default_config_text, parse_run_config, spec_to_config_string, DataConfig,
    RunConfig,
};
use densekit::cost;
use densekit::data::Dataset;
use densekit::element::Element;
use densekit::error::{Error, Result};
use densekit::exec::{lower, BlockDims, Network, Strategy};
use densekit::gradcheck::{check_gradients, FdConfig};
use densekit::graph::{build, Connectivity, StemKind};
use densekit::heatmap::feature_reuse_heatmap;
use densekit::plan::{audit_peak, execute_with_plan, plan, report, MemoryReport, PlanMode};
use densekit::sweep::{expand, run_sweep, sweep_csv};
use densekit::tensor::{Shape, Tensor};
use densekit::train::{
    import_state, load_checkpoint, metrics_csv_row, save_checkpoint, train, METRICS_CSV_HEADER,
};

use crate::CommonArgs;

fn load_config(common: &CommonArgs) -> Result<RunConfig> {
    let text = match &common.spec {
        Some(path) => std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?,
        None => default_config_text().to_string(),
    };
    let text = apply_overrides(&text, &common.overrides)?;
    let mut cfg = parse_run_config(&text)?;
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn out_dir(common: &CommonArgs) -> Result<PathBuf> {
    let dir = common
        .out
        .clone()
        .or_else(|| std::env::var_os("DENSEKIT_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("densekit-out"));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write_text(dir: &Path, name: &str, text: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    std::fs::write(&path, text)?;
    Ok(path)
}

/// All wall-clock facts live here, keeping the data outputs reproducible.
fn write_manifest(dir: &Path, command: &str, started: Instant, seed: u64) -> Result<()> {
    let now = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0);
    let manifest = serde_json::json!({
        "command": command,
        "seed": seed,
        "finished_unix_ms": now,
        "duration_ms": started.elapsed().as_secs_f64() * 1e3,
    });
    write_text(dir, "run_manifest.json", &serde_json::to_string_pretty(&manifest).unwrap())?;
    Ok(())
}

// ---------------------------------------------------------------- describe

pub fn describe(common: CommonArgs, input_shape: Option<usize>) -> Result<ExitCode> {
    let cfg = load_config(&common)?;
    let hw = input_shape.unwrap_or(cfg.image_size);
    let rep = cost::describe(&cfg.network, (hw, hw))?;
    let graph = build(&cfg.network)?;
    let audited = cost::params_from_graph(&graph);
    if rep.params != audited {
        return Err(Error::config(format!(
            "internal: closed-form parameter count {} disagrees with graph audit {}",
            rep.params, audited
        )));
    }

    let dir = out_dir(&common)?;
    write_text(&dir, "report.json", &serde_json::to_string_pretty(&rep).unwrap())?;
    write_text(&dir, "layers.csv", &rep.csv())?;
    write_text(&dir, "spec.cfg", &spec_to_config_string(&cfg.network, hw))?;

    println!(
        "depth {}  params {} ({:.3}M)  macs {} ({:.3}G)  flops {} (2 per MAC)  edges {}",
        rep.depth,
        rep.params,
        rep.params as f64 / 1e6,
        rep.macs,
        rep.macs as f64 / 1e9,
        rep.flops,
        rep.edges
    );
    println!("graph audit: params match exactly ({audited})");
    Ok(ExitCode::SUCCESS)
}

// ----------------------------------------------------------------- memplan

fn parse_strategies(s: &str) -> Result<Vec<Strategy>> {
    if s == "all" {
        return Ok(vec![Strategy::Naive, Strategy::Shared, Strategy::SharedRecompute]);
    }
    s.split(',').map(str::trim).filter(|x| !x.is_empty()).map(Strategy::parse).collect()
}

#[allow(clippy::too_many_arguments)]
pub fn memplan(
    common: CommonArgs,
    strategies: String,
    depths: Option<String>,
    batch: usize,
    hw: Option<usize>,
    elem_bytes: usize,
    measure: bool,
) -> Result<ExitCode> {
    let started = Instant::now();
    let cfg = load_config(&common)?;
    if !matches!(cfg.network.connectivity, Connectivity::Dense) {
        return Err(Error::config(
            "memplan supports dense-pattern blocks only (unsupported connectivity)",
        ));
    }
    let strategies = parse_strategies(&strategies)?;

    // Either synthetic single blocks of the requested depths, or the actual
    // blocks of the configured network.
    let mut dims_list: Vec<BlockDims> = Vec::new();
    match depths {
        Some(list) => {
            let extent = hw.unwrap_or(32);
            for part in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                let m: usize = part
                    .parse()
                    .map_err(|_| Error::config(format!("depths: '{part}' is not an integer")))?;
                let k = cfg.network.growth.base();
                dims_list.push(BlockDims {
                    m,
                    k,
                    k0: 2 * k,
                    mult: cfg.network.bottleneck_mult,
                    h: extent,
                    w: extent,
                    batch,
                });
            }
        }
        None => {
            let graph = build(&cfg.network)?;
            let (mut bh, mut bw) = match cfg.network.stem {
                StemKind::Cifar => (cfg.image_size, cfg.image_size),
                StemKind::ImageNet => {
                    let c = (cfg.image_size - 1) / 2 + 1;
                    ((c - 1) / 2 + 1, (c - 1) / 2 + 1)
                }
            };
            if let Some(e) = hw {
                bh = e;
                bw = e;
            }
            for block in &graph.blocks {
                dims_list.push(BlockDims {
                    m: block.layers.len(),
                    k: block.growth,
                    k0: block.in_channels,
                    mult: cfg.network.bottleneck_mult,
                    h: bh,
                    w: bw,
                    batch,
                });
                bh = (bh - 2) / 2 + 1;
                bw = (bw - 2) / 2 + 1;
            }
        }
    }

    let mut rows = vec![MemoryReport::CSV_HEADER.to_string()];
    for dims in &dims_list {
        for &strategy in &strategies {
            let mut rep = report(strategy, dims, elem_bytes)?;
            if measure {
                let p = plan(strategy, dims, PlanMode::Training, elem_bytes)?;
                let input = zero_input(dims);
                let t0 = Instant::now();
                execute_with_plan::<f32>(&p, &input, cfg.train.seed)?;
                rep.wall_ms = Some(t0.elapsed().as_secs_f64() * 1e3);
            } else {
                // Verify even when not timing.
                audit_peak(&plan(strategy, dims, PlanMode::Training, elem_bytes)?)?;
            }
            println!(
                "{} M={} fwd {} train_peak {} copies {:?}",
                strategy.name(),
                dims.m,
                rep.feature_bytes_forward,
                rep.feature_bytes_training_peak,
                rep.copy_counts
            );
            rows.push(rep.csv_row());
        }
    }
    let dir = out_dir(&common)?;
    write_text(&dir, "memplan.csv", &(rows.join("\n") + "\n"))?;
    write_manifest(&dir, "memplan", started, cfg.train.seed)?;
    Ok(ExitCode::SUCCESS)
}

fn zero_input(dims: &BlockDims) -> Tensor<f32> {
    let mut t = Tensor::zeros(Shape::new(dims.batch, dims.k0, dims.h, dims.w));
    // Mildly structured input so the executed pass is not all zeros.
    for (i, v) in t.data.iter_mut().enumerate() {
        *v = ((i % 17) as f32 - 8.0) / 8.0;
    }
    t
}

// ------------------------------------------------------------------- train

fn build_datasets<E: Element>(data: &DataConfig) -> Result<(Dataset<E>, Dataset<E>)> {
    let mut set: Dataset<E> = match data.source.as_str() {
        "blobs" => Dataset::separable_blobs(
            data.per_class,
            data.image_channels,
            data.image_size,
            data.image_size,
            1,
        ),
        "shapes" => Dataset::textured_shapes(
            data.per_class,
            data.image_channels,
            data.image_size,
            data.image_size,
            1,
        ),
        path => Dataset::read_binary(Path::new(path))?,
    };
    if data.normalize {
        set.normalize()?;
    }
    Ok(set.split_every(data.eval_every.max(2)))
}

fn check_spec_matches_data<E: Element>(cfg: &RunConfig, set: &Dataset<E>) -> Result<()> {
    if cfg.network.classes != set.classes {
        return Err(Error::config(format!(
            "network.classes = {} but the dataset has {} classes",
            cfg.network.classes, set.classes
        )));
    }
    if cfg.network.image_channels != set.images.shape.c {
        return Err(Error::config(format!(
            "network.image_channels = {} but the dataset has {}",
            cfg.network.image_channels, set.images.shape.c
        )));
    }
    Ok(())
}

/// Dropout is applied after each convolution only when augmentation is off
/// and the network section did not set its own rate.
fn effective_spec(cfg: &RunConfig) -> densekit::graph::NetworkSpec {
    let mut spec = cfg.network.clone();
    if !cfg.train.augment && spec.dropout == 0.0 {
        spec.dropout = cfg.train.dropout;
    }
    spec
}

fn run_train<E: Element>(common: &CommonArgs, cfg: &RunConfig, strategy: Strategy) -> Result<()> {
    let started = Instant::now();
    let spec = effective_spec(cfg);
    let graph = build(&spec)?;
    let (train_set, eval_set) = build_datasets::<E>(&cfg.data)?;
    check_spec_matches_data(cfg, &train_set)?;
    let hw = train_set.images.shape.h;
    let outcome = train(&graph, &train_set, &eval_set, &cfg.train, strategy, (hw, hw))?;

    let dir = out_dir(common)?;
    let mut csv = String::from(METRICS_CSV_HEADER);
    csv.push('\n');
    for m in &outcome.metrics {
        csv.push_str(&metrics_csv_row(m));
        csv.push('\n');
    }
    write_text(&dir, "metrics.csv", &csv)?;
    save_checkpoint(&outcome.network, &dir.join("model.dkcp"))?;
    write_text(&dir, "spec.cfg", &spec_to_config_string(&spec, hw))?;
    write_manifest(&dir, "train", started, cfg.train.seed)?;

    if let Some(last) = outcome.metrics.last() {
        println!(
            "trained {} epochs ({} mode, {} strategy): train_err {:.4} eval_err {:.4}",
            outcome.metrics.len(),
            E::MODE_NAME,
            strategy.name(),
            last.train_err,
            last.eval_err
        );
    }
    println!("wrote {}", dir.join("metrics.csv").display());
    Ok(())
}

pub fn train_cmd(common: CommonArgs, strategy: String, mode: String) -> Result<ExitCode> {
    let cfg = load_config(&common)?;
    let strategy = Strategy::parse(&strategy)?;
    match mode.as_str() {
        "f32" => run_train::<f32>(&common, &cfg, strategy)?,
        "f64" => run_train::<f64>(&common, &cfg, strategy)?,
        other => return Err(Error::usage(format!("mode '{other}' (f32 | f64)"))),
    }
    Ok(ExitCode::SUCCESS)
}

// ------------------------------------------------------------------- sweep

fn run_sweep_mode<E: Element>(
    common: &CommonArgs,
    cfg: &RunConfig,
    strategy: Strategy,
) -> Result<()> {
    let started = Instant::now();
    let sweep_cfg = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| Error::config("config has no [sweep] section"))?;
    let points = expand(&effective_spec(cfg), sweep_cfg)?;
    let (train_set, eval_set) = build_datasets::<E>(&cfg.data)?;
    check_spec_matches_data(cfg, &train_set)?;
    let hw = train_set.images.shape.h;
    let rows = run_sweep(&points, &train_set, &eval_set, &cfg.train, strategy, (hw, hw))?;
    let dir = out_dir(common)?;
    write_text(&dir, "sweep.csv", &sweep_csv(&rows))?;
    write_manifest(&dir, "sweep", started, cfg.train.seed)?;
    println!("swept {} configurations -> {}", rows.len(), dir.join("sweep.csv").display());
    for r in &rows {
        println!("  {}: params {} macs {} err {:.4}", r.config, r.params, r.macs, r.final_eval_err);
    }
    Ok(())
}

pub fn sweep_cmd(common: CommonArgs, strategy: String, mode: String) -> Result<ExitCode> {
    let cfg = load_config(&common)?;
    let strategy = Strategy::parse(&strategy)?;
    match mode.as_str() {
        "f32" => run_sweep_mode::<f32>(&common, &cfg, strategy)?,
        "f64" => run_sweep_mode::<f64>(&common, &cfg, strategy)?,
        other => return Err(Error::usage(format!("mode '{other}' (f32 | f64)"))),
    }
    Ok(ExitCode::SUCCESS)
}

// ----------------------------------------------------------------- heatmap

fn run_heatmap<E: Element>(common: &CommonArgs, cfg: &RunConfig, ckpt: &Path) -> Result<()> {
    let spec = effective_spec(cfg);
    let graph = build(&spec)?;
    let mut net: Network<E> = lower(&graph, Strategy::Reference, 1, (cfg.image_size, cfg.image_size), 0)?;
    let state = load_checkpoint::<E>(ckpt)?;
    import_state(&mut net, &state)?;
    let rep = feature_reuse_heatmap(&net)?;
    let dir = out_dir(common)?;
    write_text(&dir, "heatmap.csv", &rep.csv())?;
    println!(
        "heatmap over {} blocks -> {}",
        rep.blocks.len(),
        dir.join("heatmap.csv").display()
    );
    Ok(())
}

pub fn heatmap_cmd(common: CommonArgs, checkpoint: PathBuf, mode: String) -> Result<ExitCode> {
    let cfg = load_config(&common)?;
    match mode.as_str() {
        "f32" => run_heatmap::<f32>(&common, &cfg, &checkpoint)?,
        "f64" => run_heatmap::<f64>(&common, &cfg, &checkpoint)?,
        other => return Err(Error::usage(format!("mode '{other}' (f32 | f64)"))),
    }
    Ok(ExitCode::SUCCESS)
}

// --------------------------------------------------------------- gradcheck

const GRADCHECK_PARAM_LIMIT: u64 = 200_000;

pub fn gradcheck_cmd(common: CommonArgs, samples: usize, corrupt: bool) -> Result<ExitCode> {
    if samples == 0 {
        return Err(Error::usage("--samples must be at least 1"));
    }
    let cfg = load_config(&common)?;
    let spec = cfg.network.clone();
    let params = cost::count_params(&spec)?;
    if params > GRADCHECK_PARAM_LIMIT {
        return Err(Error::config(format!(
            "gradcheck refuses specs above {GRADCHECK_PARAM_LIMIT} parameters (this one has {params})"
        )));
    }
    let graph = build(&spec)?;
    let hw = cfg.data.image_size.min(16);
    let mut net: Network<f64> = lower(&graph, Strategy::Reference, 2, (hw, hw), cfg.train.seed)?;
    densekit::train::init_weights(&mut net, cfg.train.seed);

    // A deterministic input/label pair seeds the loss.
    let mut s = cfg.train.seed | 1;
    let shape = Shape::new(2, spec.image_channels, hw, hw);
    let images = Tensor::from_vec(
        shape,
        (0..shape.numel())
            .map(|_| {
                s ^= s << 13;
                s ^= s >> 7;
                s ^= s << 17;
                (s >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
            })
            .collect(),
    )
    .unwrap();
    let labels = vec![0usize, 1 % spec.classes];
    net.forward_train(&images, &labels)?;

    let wrt: Vec<_> = net.params.iter().map(|(_, id)| *id).collect();
    let per_tensor = samples.div_ceil(wrt.len()).max(1);
    let fd = FdConfig {
        samples_per_tensor: per_tensor,
        seed: cfg.train.seed,
        corrupt: corrupt.then_some(1e-2),
        ..FdConfig::default()
    };
    let loss = net.loss_id;
    let report = check_gradients(&mut net.tape, loss, &wrt, &fd)?;
    println!(
        "checked {} coordinates over {} tensors: max rel err {:.3e}",
        report.checked,
        wrt.len(),
        report.max_rel_err
    );
    if report.passed() {
        println!("PASS (tolerance {:.1e})", fd.rel_tol);
        Ok(ExitCode::SUCCESS)
    } else {
        for f in report.failures.iter().take(8) {
            let name = net
                .params
                .iter()
                .find(|(_, id)| *id == f.node)
                .map(|(n, _)| n.as_str())
                .unwrap_or("?");
            println!(
                "FAIL {name}[{}]: analytic {:.6e} vs numeric {:.6e} (rel {:.3e})",
                f.coord, f.analytic, f.numeric, f.rel_err
            );
        }
        Ok(ExitCode::from(1))
    }
}
