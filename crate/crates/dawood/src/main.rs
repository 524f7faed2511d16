use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use dawood::data_model::{load_manifest, load_rgb, DatasetManifest, Domain};
use dawood::error::Error;
use dawood::features::compute_channels;
use dawood::forest::{read_model, write_model};
use dawood::eval::{self, ScoreMode, SweepRow};
use dawood::infer;
use dawood::plot;
use dawood::synthgen;
use dawood::train::{self, SplitObjective};
use dawood::{Result, RunConfig};

/// Domain-adaptive random-forest pixel classifier for body-part labelling.
#[derive(Parser)]
#[command(name = "dawood", version, disable_help_subcommand = true)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic source/target/test dataset with a manifest.
    Gen(GenArgs),
    /// Train a forest on a manifest's source and target entries.
    Train(TrainArgs),
    /// Classify test images into per-part overlay PNGs.
    Classify(ClassifyArgs),
    /// Score a trained model on the test entries.
    Eval(EvalArgs),
    /// Train and score one forest per alpha; emit report, models, and plots.
    Sweep(SweepArgs),
    /// Recompute per-level diagnostics of a trained model.
    Diag(DiagArgs),
}

/// Tunables shared by training-capable commands. Precedence: flag, then
/// config file, then the DAWOOD_SEED environment variable (seed only), then
/// built-in defaults.
#[derive(Args)]
struct ConfigArgs {
    /// Flat key=value config file; '#' starts a comment.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Trees per forest.
    #[arg(long)]
    trees: Option<u32>,
    /// Split levels per tree.
    #[arg(long)]
    depth: Option<u32>,
    /// Candidate split shapes per node.
    #[arg(long)]
    candidates: Option<u32>,
    /// Thresholds proposed per shape.
    #[arg(long)]
    thresholds: Option<u32>,
    /// Reservoir size per node and domain.
    #[arg(long)]
    samples: Option<u32>,
    /// Gradient orientation bins.
    #[arg(long)]
    orient_bins: Option<u32>,
    /// Spatial histogram grid side.
    #[arg(long)]
    grid: Option<u32>,
    /// Offset rectangle range.
    #[arg(long)]
    rho: Option<f64>,
    /// Minimum synthetic pixels to keep splitting a node.
    #[arg(long)]
    min_syn: Option<u32>,
    /// Entropy weight in the split objective (0 = spatial only, 1 = entropy only).
    #[arg(long)]
    alpha: Option<f64>,
    /// Location prior grid side.
    #[arg(long)]
    prior_grid: Option<u32>,
    /// Training pixel stride.
    #[arg(long)]
    stride: Option<u32>,
    /// Base RNG seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long)]
    workers: Option<u32>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Ok(s) = std::env::var("DAWOOD_SEED") {
            cfg.seed = s.trim().parse().map_err(|_| {
                Error::Config(format!("DAWOOD_SEED is not a valid seed: {s:?}"))
            })?;
        }
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
            println!("config file: {}", path.display());
        }
        macro_rules! overlay {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field { cfg.$field = v; })*
            };
        }
        overlay!(
            trees, depth, candidates, thresholds, samples, orient_bins, grid, rho, min_syn,
            alpha, prior_grid, stride, seed, workers
        );
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct GenArgs {
    /// Output directory for images, label maps, and the manifest.
    #[arg(long)]
    out: PathBuf,
    /// Source (fully labelled) image count.
    #[arg(long, default_value_t = 112)]
    source: u32,
    /// Target (bounding-box only) image count.
    #[arg(long, default_value_t = 112)]
    target: u32,
    /// Test (joint-annotated) image count.
    #[arg(long, default_value_t = 77)]
    test: u32,
    /// Base RNG seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Canvas side in pixels.
    #[arg(long, default_value_t = synthgen::DEFAULT_CANVAS)]
    canvas: u32,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset manifest (JSON lines).
    #[arg(long)]
    data: PathBuf,
    /// Output model file.
    #[arg(long)]
    out: PathBuf,
    /// Diagnostics CSV path (default: model path with .diag.csv).
    #[arg(long)]
    diag_out: Option<PathBuf>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct ClassifyArgs {
    /// Trained model file.
    #[arg(long)]
    model: PathBuf,
    /// Dataset manifest; its test entries are classified.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for overlays.
    #[arg(long)]
    out: PathBuf,
    /// Modulate posteriors by the stored location prior.
    #[arg(long)]
    prior: bool,
    /// Also write raw posterior planes next to each overlay.
    #[arg(long)]
    dump_posterior: bool,
    /// Worker threads (0 = all cores).
    #[arg(long, default_value_t = 0)]
    workers: u32,
}

#[derive(Args)]
struct EvalArgs {
    /// Trained model file.
    #[arg(long)]
    model: PathBuf,
    /// Dataset manifest with test entries.
    #[arg(long)]
    data: PathBuf,
    /// Training diagnostics CSV; fills the e_leaf column.
    #[arg(long)]
    diag: Option<PathBuf>,
    /// Write the one-row report CSV here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (0 = all cores).
    #[arg(long, default_value_t = 0)]
    workers: u32,
}

#[derive(Args)]
struct SweepArgs {
    /// Dataset manifest.
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated alpha values, one forest each.
    #[arg(long, value_delimiter = ',', required = true)]
    alphas: Vec<f64>,
    /// Output directory for the report, models, diagnostics, and plot.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct DiagArgs {
    /// Trained model file.
    #[arg(long)]
    model: PathBuf,
    /// Dataset manifest with source and target entries.
    #[arg(long)]
    data: PathBuf,
    /// Diagnostics CSV output path.
    #[arg(long)]
    out: PathBuf,
    /// Optional SVG plot of the recomputed series.
    #[arg(long)]
    svg: Option<PathBuf>,
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Gen(args) => cmd_gen(args),
        Cmd::Train(args) => cmd_train(args),
        Cmd::Classify(args) => cmd_classify(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::Sweep(args) => cmd_sweep(args),
        Cmd::Diag(args) => cmd_diag(args),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var("DAWOOD_SEED") {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("DAWOOD_SEED is not a valid seed: {s:?}"))),
        Err(_) => Ok(None),
    }
}

fn load_manifest_checked(path: &Path) -> Result<DatasetManifest> {
    let manifest = load_manifest(path)?;
    if manifest.entries.is_empty() {
        return Err(Error::InvalidInput(format!(
            "{}: manifest has no entries",
            path.display()
        )));
    }
    Ok(manifest)
}

fn thread_pool(workers: u32) -> Result<rayon::ThreadPool> {
    let n = if workers == 0 {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    } else {
        workers as usize
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map_err(|e| Error::Internal(format!("thread pool: {e}")))
}

fn cmd_gen(args: GenArgs) -> Result<()> {
    let seed = match args.seed {
        Some(s) => s,
        None => env_seed()?.unwrap_or(1),
    };
    let manifest_path = synthgen::generate(
        &args.out,
        args.source as usize,
        args.target as usize,
        args.test as usize,
        seed,
        args.canvas,
    )?;
    let manifest = load_manifest(&manifest_path)?;
    println!(
        "wrote {} ({} entries, canvas {})",
        manifest_path.display(),
        manifest.entries.len(),
        args.canvas
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let config = args.cfg.resolve()?;
    let manifest = load_manifest_checked(&args.data)?;
    let objective = SplitObjective::Mixed { alpha: config.alpha };
    let out = train::train_forest(&manifest, objective, &config)?;
    write_model(&args.out, &out.forest)?;
    let diag_path = args
        .diag_out
        .unwrap_or_else(|| args.out.with_extension("diag.csv"));
    train::write_diag_csv(&diag_path, &out.diagnostics)?;
    println!(
        "model: {} ({} trees, {} leaves); diagnostics: {}",
        args.out.display(),
        out.forest.trees.len(),
        out.forest.trees.iter().map(|t| t.leaf_count()).sum::<usize>(),
        diag_path.display()
    );
    Ok(())
}

fn cmd_classify(args: ClassifyArgs) -> Result<()> {
    let forest = read_model(&args.model)?;
    let manifest = load_manifest_checked(&args.data)?;
    let entries: Vec<_> = manifest.entries_in(Domain::Test).collect();
    if entries.is_empty() {
        return Err(Error::InvalidInput("manifest has no test entries".into()));
    }
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;

    let pool = thread_pool(args.workers)?;
    pool.install(|| {
        entries.par_iter().try_for_each(|(idx, entry)| {
            let img = load_rgb(&entry.image)?;
            let ch = compute_channels(&img, &entry.bbox, forest.config.orient_bins as usize)?;
            let mut pm = infer::posterior(&forest, &ch, &entry.bbox);
            if args.prior {
                pm = infer::modulate(&pm, &forest.prior);
            }
            let pixels = infer::extract_pixels(&pm, &forest.phi);
            let stem = entry
                .image
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| format!("entry_{idx}"));
            let overlay = infer::render_overlay(&img, &pixels);
            let overlay_path = args.out.join(format!("{stem}_overlay.png"));
            overlay
                .save(&overlay_path)
                .map_err(|e| Error::image(&overlay_path, e))?;
            if args.dump_posterior {
                infer::write_posterior_dump(&args.out.join(format!("{stem}_posterior.bin")), &pm)?;
            }
            Ok(())
        })
    })?;
    println!(
        "wrote {} overlay(s) to {}{}",
        entries.len(),
        args.out.display(),
        if args.dump_posterior { " with posterior dumps" } else { "" }
    );
    Ok(())
}

fn print_row(row: &SweepRow) {
    println!(
        "alpha={:.3} p={:.4} p_prior={:.4} p_prior_only={:.4} e_leaf={:.6} runtime_s={:.3}",
        row.alpha, row.p, row.p_prior, row.p_prior_only, row.e_leaf, row.runtime_s
    );
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let start = Instant::now();
    let forest = read_model(&args.model)?;
    let manifest = load_manifest_checked(&args.data)?;
    let e_leaf = match &args.diag {
        Some(path) => train::leaf_entropy(&train::read_diag_csv(path)?),
        None => -1.0,
    };
    let pool = thread_pool(args.workers)?;
    let scores = pool.install(|| {
        eval::evaluate_modes(
            &forest,
            &manifest,
            &[ScoreMode::Plain, ScoreMode::Modulated, ScoreMode::PriorOnly],
        )
    })?;
    let row = SweepRow {
        alpha: forest.config.alpha,
        e_leaf,
        p: scores[0].p,
        p_prior: scores[1].p,
        p_prior_only: scores[2].p,
        runtime_s: start.elapsed().as_secs_f64(),
    };
    print_row(&row);
    if let Some(out) = &args.out {
        eval::write_report_csv(out, &[row])?;
        println!("report: {}", out.display());
    }
    Ok(())
}

fn alpha_tag(alpha: f64) -> String {
    format!("{alpha}").replace('.', "_")
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let config = args.cfg.resolve()?;
    let manifest = load_manifest_checked(&args.data)?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;

    let entries = eval::sweep(&manifest, &args.alphas, &config)?;
    let rows: Vec<SweepRow> = entries.iter().map(|e| e.row.clone()).collect();
    eval::write_report_csv(&args.out.join("report.csv"), &rows)?;

    let mut per_alpha = Vec::new();
    for entry in &entries {
        let tag = alpha_tag(entry.row.alpha);
        write_model(&args.out.join(format!("model_alpha{tag}.dawf")), &entry.forest)?;
        train::write_diag_csv(
            &args.out.join(format!("diag_alpha{tag}.csv")),
            &entry.diagnostics,
        )?;
        per_alpha.push((entry.row.alpha, entry.diagnostics.clone()));
        print_row(&entry.row);
    }
    plot::write_svg(
        &args.out.join("diagnostics.svg"),
        &plot::diagnostics_svg(&per_alpha),
    )?;
    println!("sweep artifacts in {}", args.out.display());
    Ok(())
}

fn cmd_diag(args: DiagArgs) -> Result<()> {
    let forest = read_model(&args.model)?;
    let manifest = load_manifest_checked(&args.data)?;
    let rows = train::recompute_diagnostics(&forest, &manifest)?;
    train::write_diag_csv(&args.out, &rows)?;
    println!("diagnostics: {} ({} rows)", args.out.display(), rows.len());
    if let Some(svg) = &args.svg {
        let series = vec![(forest.config.alpha, rows)];
        plot::write_svg(svg, &plot::diagnostics_svg(&series))?;
        println!("plot: {}", svg.display());
    }
    Ok(())
}
