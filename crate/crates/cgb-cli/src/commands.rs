//! Argument surface, run resolution, manifests and the seven subcommands.
//!
//! Every run resolves to a `Config` (file, then flag overrides), creates its
//! artifact directory, and writes `run_manifest.txt` plus a canonical
//! `config.cfg` copy before doing any work, so interrupted runs still
//! document themselves and any finished run can be re-executed bit-exactly
//! from the manifest's `command` line.

use cgb::bottleneck::{render_adaptive_heatmaps, write_landmarks_csv, write_pgm, LandmarkSet};
use cgb::config::{Config, ConfigError, SigmaMode};
use cgb::correspondence::{
    build_knn_graph, extract_representations, gcn_confidence, kmeans_baseline,
    write_cluster_model, CorrespondenceError, LandmarkRep,
};
use cgb::eval::{ced_curve, cluster_quality, evaluate_checkpoint, CheckpointMetrics, EvalError};
use cgb::pipeline::{
    checkpoint_sigmas, detect, gradcheck_battery, load_checkpoint, train_default_gcn, train_loop,
    DetectGraph, PipelineError,
};
use cgb::seeds;
use cgb::synthdata::{generate_dataset, load_dataset, SynthError};
use clap::{Parser, Subcommand};
use sha2::{Digest, Sha256};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Bottleneck(#[from] cgb::bottleneck::BottleneckError),
    #[error(transparent)]
    Correspondence(#[from] CorrespondenceError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Parser)]
#[command(name = "cgb", version, about = "Consistency-guided bottleneck laboratory")]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Subcommand)]
pub enum Cmd {
    /// Generate a synthetic dataset (PPM images, ground-truth CSV)
    GenData {
        /// Number of images
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Dataset directory
        #[arg(long, default_value = "data")]
        out: PathBuf,
    },
    /// Train detector and reconstructor per a run config
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override the config's master seed
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config's output directory
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the config's sigma mode
        #[arg(long, value_parser = ["adaptive", "fixed", "random"])]
        sigma_mode: Option<String>,
    },
    /// Score a checkpoint: NME both ways, stability, PSNR/SSIM, CED
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Evaluate on at most this many images
        #[arg(long)]
        n: Option<usize>,
    },
    /// Cluster landmark representations from a checkpoint
    Cluster {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_parser = ["knn-gcn", "kmeans"], default_value = "knn-gcn")]
        method: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Pool representations from at most this many images
        #[arg(long)]
        n: Option<usize>,
    },
    /// Render one image's landmark heatmaps (PGM) and landmark CSV
    Render {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset image index to render
        #[arg(long, default_value_t = 0)]
        n: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every autodiff op plus the composed graph
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "grad-check")]
        out: PathBuf,
    },
    /// Sweep one hyperparameter grid, one train+eval per setting
    Ablate {
        #[arg(long, value_parser = ["kappa", "sigma_mode", "sigma_range", "ps_update"])]
        grid: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Worker-thread cap from `CGB_THREADS` (0 or unset: all cores).
pub fn init_threads() -> Result<(), String> {
    let Ok(raw) = std::env::var("CGB_THREADS") else { return Ok(()) };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| format!("CGB_THREADS must be a non-negative integer, got {raw:?}"))?;
    if n == 0 {
        return Ok(());
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| format!("thread pool: {e}"))
}

/// Where a runtime failure's diagnostic should land.
#[derive(Default)]
pub struct RunCtx {
    pub out_dir: Option<PathBuf>,
}

pub fn write_diagnostic(ctx: &RunCtx, err: &CliError) {
    let dir = ctx.out_dir.clone().unwrap_or_else(|| PathBuf::from("."));
    let argv: Vec<String> = std::env::args().collect();
    let text = format!("command: {}\nerror: {err}\ndebug: {err:?}\n", argv.join(" "));
    let _ = fs::create_dir_all(&dir);
    let _ = fs::write(dir.join("cgb-error.txt"), text);
}

pub fn dispatch(cmd: Cmd, ctx: &mut RunCtx) -> Result<(), CliError> {
    match cmd {
        Cmd::GenData { n, seed, out } => run_gen_data(n, seed, &out, ctx),
        Cmd::Train { config, seed, out, sigma_mode } => {
            run_train(config.as_deref(), seed, out.as_deref(), sigma_mode.as_deref(), ctx)
        }
        Cmd::Eval { ckpt, config, seed, out, n } => {
            run_eval(&ckpt, config.as_deref(), seed, out.as_deref(), n, ctx)
        }
        Cmd::Cluster { ckpt, method, config, seed, out, n } => {
            run_cluster(&ckpt, &method, config.as_deref(), seed, out.as_deref(), n, ctx)
        }
        Cmd::Render { ckpt, config, n, out } => {
            run_render(&ckpt, config.as_deref(), n, out.as_deref(), ctx)
        }
        Cmd::GradCheck { seed, out } => run_grad_check(seed, &out, ctx),
        Cmd::Ablate { grid, config, seed, out } => {
            run_ablate(&grid, config.as_deref(), seed, out.as_deref(), ctx)
        }
    }
}

// ---- run resolution and manifests ----

struct Resolved {
    cfg: Config,
    /// Absolute artifact directory, created.
    out: PathBuf,
}

/// Config file, then flag overrides; the artifact directory is `--out`, or
/// the config's out_dir (plus a per-command subdirectory so eval, cluster and
/// render runs never clobber the training artifacts they sit next to).
fn resolve(
    config: Option<&Path>,
    seed: Option<u64>,
    out: Option<&Path>,
    sigma_mode: Option<&str>,
    sub: Option<&str>,
) -> Result<Resolved, CliError> {
    let mut cfg = match config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(m) = sigma_mode {
        cfg.sigma_mode =
            SigmaMode::parse(m).ok_or_else(|| CliError::Invalid(format!("sigma mode {m:?}")))?;
    }
    let out_dir = match (out, sub) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(sub)) => cfg.out_dir.join(sub),
        (None, None) => cfg.out_dir.clone(),
    };
    fs::create_dir_all(&out_dir)?;
    let out = fs::canonicalize(&out_dir)?;
    cfg.out_dir = out.clone();
    // a copied config must reproduce the run from any working directory
    if cfg.data_dir.is_relative() {
        cfg.data_dir = std::env::current_dir()?.join(&cfg.data_dir);
    }
    Ok(Resolved { cfg, out })
}

const VERSION: &str = env!("CARGO_PKG_VERSION");

fn sha256_hex(text: &str) -> String {
    let mut h = Sha256::new();
    h.update(text.as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// `run_manifest.txt` plus, when a config participates, its canonical copy
/// as `config.cfg`. The `command` line re-executes the run; outputs other
/// than the spec-mandated wall-clock log column are bit-identical.
fn write_manifest(dir: &Path, command: &str, seed: u64, cfg: Option<&Config>) -> Result<(), CliError> {
    let hash = match cfg {
        Some(c) => {
            let canon = c.canonical();
            fs::write(dir.join("config.cfg"), &canon)?;
            sha256_hex(&canon)
        }
        None => "-".to_string(),
    };
    let text = format!(
        "command = {command}\nseed = {seed}\nconfig_sha256 = {hash}\nversion = cgb {VERSION}\n"
    );
    fs::write(dir.join("run_manifest.txt"), text)?;
    Ok(())
}

fn abs_path(p: &Path) -> Result<PathBuf, CliError> {
    Ok(fs::canonicalize(p)?)
}

// ---- subcommands ----

fn run_gen_data(n: usize, seed: u64, out: &Path, ctx: &mut RunCtx) -> Result<(), CliError> {
    fs::create_dir_all(out)?;
    let out = abs_path(out)?;
    ctx.out_dir = Some(out.clone());
    let command = format!("gen-data --n {n} --seed {seed} --out {}", out.display());
    write_manifest(&out, &command, seed, None)?;
    generate_dataset(n, seed, &out)?;
    println!("wrote {n} images to {}", out.display());
    Ok(())
}

fn run_train(
    config: Option<&Path>,
    seed: Option<u64>,
    out: Option<&Path>,
    sigma_mode: Option<&str>,
    ctx: &mut RunCtx,
) -> Result<(), CliError> {
    let r = resolve(config, seed, out, sigma_mode, None)?;
    ctx.out_dir = Some(r.out.clone());
    let command = format!("train --config {}", r.out.join("config.cfg").display());
    write_manifest(&r.out, &command, r.cfg.seed, Some(&r.cfg))?;
    let dataset = load_dataset(&r.cfg.data_dir)?;
    let outcome = train_loop(&r.cfg, &dataset)?;
    println!(
        "trained {} epochs; log {}, checkpoint {}",
        r.cfg.epochs,
        outcome.log_path.display(),
        outcome.final_ckpt.display()
    );
    Ok(())
}

/// Metric rows in the shared `metric,split,value,seed` shape.
fn write_metric_csv(
    path: &Path,
    rows: &[(&str, &str, f64)],
    seed: u64,
) -> Result<(), CliError> {
    let mut f = BufWriter::new(File::create(path)?);
    writeln!(f, "metric,split,value,seed")?;
    for (metric, split, value) in rows {
        writeln!(f, "{metric},{split},{value},{seed}")?;
    }
    f.flush()?;
    Ok(())
}

fn metric_rows(m: &CheckpointMetrics) -> Vec<(&'static str, &'static str, f64)> {
    vec![
        ("forward_nme", "test", m.forward_nme),
        ("backward_nme", "test", m.backward_nme),
        ("stability_mean", "test", m.stability_mean),
        ("psnr", "test", m.psnr),
        ("ssim", "test", m.ssim),
    ]
}

fn run_eval(
    ckpt_path: &Path,
    config: Option<&Path>,
    seed: Option<u64>,
    out: Option<&Path>,
    limit: Option<usize>,
    ctx: &mut RunCtx,
) -> Result<(), CliError> {
    let r = resolve(config, seed, out, None, Some("eval"))?;
    ctx.out_dir = Some(r.out.clone());
    let ckpt_abs = abs_path(ckpt_path)?;
    let mut command = format!(
        "eval --ckpt {} --config {}",
        ckpt_abs.display(),
        r.out.join("config.cfg").display()
    );
    if let Some(n) = limit {
        command.push_str(&format!(" --n {n}"));
    }
    write_manifest(&r.out, &command, r.cfg.seed, Some(&r.cfg))?;

    let ckpt = load_checkpoint(&ckpt_abs)?;
    let dataset = load_dataset(&r.cfg.data_dir)?;
    let metrics = evaluate_checkpoint(&ckpt, &dataset, limit, r.cfg.seed)?;

    write_metric_csv(&r.out.join("metrics.csv"), &metric_rows(&metrics), r.cfg.seed)?;
    let curve = ced_curve(&metrics.per_image_nme)?;
    let mut f = BufWriter::new(File::create(r.out.join("ced.csv"))?);
    writeln!(f, "threshold,fraction")?;
    for (thr, frac) in curve {
        writeln!(f, "{thr},{frac}")?;
    }
    f.flush()?;
    for (metric, split, value) in metric_rows(&metrics) {
        println!("{metric} ({split}) = {value}");
    }
    Ok(())
}

const KMEANS_ITERS: usize = 50;

fn run_cluster(
    ckpt_path: &Path,
    method: &str,
    config: Option<&Path>,
    seed: Option<u64>,
    out: Option<&Path>,
    limit: Option<usize>,
    ctx: &mut RunCtx,
) -> Result<(), CliError> {
    let r = resolve(config, seed, out, None, Some("cluster"))?;
    ctx.out_dir = Some(r.out.clone());
    let ckpt_abs = abs_path(ckpt_path)?;
    let mut command = format!(
        "cluster --ckpt {} --method {method} --config {}",
        ckpt_abs.display(),
        r.out.join("config.cfg").display()
    );
    if let Some(n) = limit {
        command.push_str(&format!(" --n {n}"));
    }
    write_manifest(&r.out, &command, r.cfg.seed, Some(&r.cfg))?;

    let ckpt = load_checkpoint(&ckpt_abs)?;
    let dataset = load_dataset(&r.cfg.data_dir)?;
    let n = limit.map_or(dataset.images.len(), |l| l.min(dataset.images.len()));
    let mut dg = DetectGraph::new(&ckpt.det)?;
    let mut reps: Vec<LandmarkRep> = Vec::with_capacity(n * ckpt.k);
    for (img, &id) in dataset.images[..n].iter().zip(&dataset.ids[..n]) {
        let o = dg.run(img)?;
        reps.extend(extract_representations(&o.features, ckpt.net.d, &o.prob, id)?);
    }

    let (model, vectors): (_, Vec<Vec<f64>>) = match method {
        "knn-gcn" => {
            let graph = build_knn_graph(reps, r.cfg.kappa)?;
            let params = train_default_gcn(r.cfg.seed, ckpt.net.d, r.cfg.kappa)?;
            let conf = gcn_confidence(&graph, &params)?;
            let model = cgb::correspondence::extract_clusters(&graph, &conf);
            let vectors = graph.vertices.into_iter().map(|v| v.vec).collect();
            (model, vectors)
        }
        "kmeans" => {
            let mut rng = seeds::stream(r.cfg.seed, seeds::KMEANS);
            let model = kmeans_baseline(&reps, 4 * ckpt.k, KMEANS_ITERS, &mut rng)?;
            (model, reps.into_iter().map(|v| v.vec).collect())
        }
        other => return Err(CliError::Invalid(format!("method {other:?}"))),
    };
    let quality = cluster_quality(&vectors, &model.assignment)?;
    write_cluster_model(&model, &r.out.join("clusters.ckpt"), &r.out.join("assignment.csv"))?;
    write_metric_csv(
        &r.out.join("quality.csv"),
        &[
            ("silhouette", "all", quality.silhouette),
            ("calinski_harabasz", "all", quality.calinski_harabasz),
            ("num_clusters", "all", model.t as f64),
        ],
        r.cfg.seed,
    )?;
    println!(
        "{method}: T = {}, silhouette = {}, CH = {}",
        model.t, quality.silhouette, quality.calinski_harabasz
    );
    Ok(())
}

fn run_render(
    ckpt_path: &Path,
    config: Option<&Path>,
    index: usize,
    out: Option<&Path>,
    ctx: &mut RunCtx,
) -> Result<(), CliError> {
    let r = resolve(config, None, out, None, Some("render"))?;
    ctx.out_dir = Some(r.out.clone());
    let ckpt_abs = abs_path(ckpt_path)?;
    let command = format!(
        "render --ckpt {} --config {} --n {index}",
        ckpt_abs.display(),
        r.out.join("config.cfg").display()
    );
    write_manifest(&r.out, &command, r.cfg.seed, Some(&r.cfg))?;

    let ckpt = load_checkpoint(&ckpt_abs)?;
    let dataset = load_dataset(&r.cfg.data_dir)?;
    if index >= dataset.images.len() {
        return Err(CliError::Invalid(format!(
            "image index {index} out of range for {} images",
            dataset.images.len()
        )));
    }
    let o = detect(&dataset.images[index], &ckpt.det)?;
    let sigmas = checkpoint_sigmas(&ckpt)?;
    let consistency: Vec<Option<f64>> = match &ckpt.consistency {
        Some(v) => v.iter().copied().map(Some).collect(),
        None => vec![None; ckpt.k],
    };
    let hm = ckpt.net.hm();
    let on_lattice =
        LandmarkSet { coords: o.coords_hm, sigma: sigmas.clone(), consistency: consistency.clone() };
    let stack = render_adaptive_heatmaps(&on_lattice, hm, hm)?;
    for lm in 0..ckpt.k {
        write_pgm(stack.map(lm), hm, hm, &r.out.join(format!("heatmap_{lm:02}.pgm")))?;
    }
    // the CSV reports image-pixel coordinates
    let in_pixels = LandmarkSet { coords: o.coords_img, sigma: sigmas, consistency };
    write_landmarks_csv(&in_pixels, &r.out.join("landmarks.csv"))?;
    println!("rendered {} heatmaps for image {index} to {}", ckpt.k, r.out.display());
    Ok(())
}

fn run_grad_check(seed: u64, out: &Path, ctx: &mut RunCtx) -> Result<(), CliError> {
    fs::create_dir_all(out)?;
    let out = abs_path(out)?;
    ctx.out_dir = Some(out.clone());
    let command = format!("grad-check --seed {seed} --out {}", out.display());
    write_manifest(&out, &command, seed, None)?;

    let battery = gradcheck_battery(seed)?;
    let mut f = BufWriter::new(File::create(out.join("gradcheck.csv"))?);
    writeln!(f, "op,max_rel_err,checked,excluded,pass")?;
    for (name, rep) in &battery {
        writeln!(f, "{name},{},{},{},{}", rep.max_rel_err, rep.checked, rep.excluded, rep.pass)?;
        println!(
            "{name}: max rel err {:.3e} over {} coordinates{}",
            rep.max_rel_err,
            rep.checked,
            if rep.pass { "" } else { "  FAIL" }
        );
    }
    f.flush()?;
    let failed: Vec<&str> =
        battery.iter().filter(|(_, r)| !r.pass).map(|(n, _)| n.as_str()).collect();
    if !failed.is_empty() {
        return Err(CliError::Invalid(format!("gradient check failed: {}", failed.join(", "))));
    }
    Ok(())
}

fn ablate_settings(grid: &str, base: &Config) -> Vec<(String, Config)> {
    match grid {
        "kappa" => [40usize, 80, 120]
            .iter()
            .map(|&v| (v.to_string(), Config { kappa: v, ..base.clone() }))
            .collect(),
        "sigma_mode" => [SigmaMode::Adaptive, SigmaMode::Fixed, SigmaMode::Random]
            .iter()
            .map(|&m| (m.to_string(), Config { sigma_mode: m, ..base.clone() }))
            .collect(),
        "sigma_range" => [(0.2, 5.0), (0.2, 10.0)]
            .iter()
            .map(|&(lo, hi)| {
                (format!("{lo}-{hi}"), Config { sigma_min: lo, sigma_max: hi, ..base.clone() })
            })
            .collect(),
        "ps_update" => [5usize, 10, 20, 40]
            .iter()
            .map(|&v| (v.to_string(), Config { ps_update: v, ..base.clone() }))
            .collect(),
        other => unreachable!("clap restricts --grid, got {other:?}"),
    }
}

fn run_ablate(
    grid: &str,
    config: Option<&Path>,
    seed: Option<u64>,
    out: Option<&Path>,
    ctx: &mut RunCtx,
) -> Result<(), CliError> {
    let r = resolve(config, seed, out, None, Some("ablate"))?;
    ctx.out_dir = Some(r.out.clone());
    let command =
        format!("ablate --grid {grid} --config {}", r.out.join("config.cfg").display());
    write_manifest(&r.out, &command, r.cfg.seed, Some(&r.cfg))?;

    let dataset = load_dataset(&r.cfg.data_dir)?;
    let mut rows = Vec::new();
    for (label, sub_cfg) in ablate_settings(grid, &r.cfg) {
        let mut sub_cfg = sub_cfg;
        sub_cfg.out_dir = r.out.join(format!("{grid}_{label}"));
        fs::create_dir_all(&sub_cfg.out_dir)?;
        fs::write(sub_cfg.out_dir.join("config.cfg"), sub_cfg.canonical())?;
        let outcome = train_loop(&sub_cfg, &dataset)?;
        let ckpt = load_checkpoint(&outcome.final_ckpt)?;
        // the base seed keeps eval transforms common across settings
        let m = evaluate_checkpoint(&ckpt, &dataset, None, r.cfg.seed)?;
        println!(
            "{grid} = {label}: forward {}, backward {}",
            m.forward_nme, m.backward_nme
        );
        rows.push((label, m));
    }
    let mut f = BufWriter::new(File::create(r.out.join("ablate.csv"))?);
    writeln!(f, "setting,value,forward_nme,backward_nme,stability_mean,psnr,ssim,seed")?;
    for (label, m) in &rows {
        writeln!(
            f,
            "{grid},{label},{},{},{},{},{},{}",
            m.forward_nme, m.backward_nme, m.stability_mean, m.psnr, m.ssim, r.cfg.seed
        )?;
    }
    f.flush()?;
    println!("{} settings into {}", rows.len(), r.out.join("ablate.csv").display());
    Ok(())
}
