use anyhow::{anyhow, Context};
use arloss::io::{
    fmt_f64, format_loss_report, parse_csv_column, parse_matrix_csv, read_pgm, read_score_grid, render_heatmap,
    write_matrix_csv, write_pgm, write_trace_csv, PGM_IGNORE_ID,
};
use arloss::toy::{
    affinity_snapshots, gen_scene, grouping, optimize_logits, Phase, ScenePattern, SceneSpec, TrainConfig, REFERENCE_LR,
};
use arloss::verify::{
    check_gradient, gradcheck_losses, ols_trend_test, random_instance, GradCheckReport, FD_STEP, GRAD_REL_TOL,
};
use arloss::*;
use clap::{Args, Parser, Subcommand, ValueEnum};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "arloss", version, about = "Affinity regression loss toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Label affinity of a PGM label map, written as CSV plus a PPM heat map.
    Affinity(AffinityArgs),
    /// Cross-entropy, AR and total loss of a score grid against a label map.
    Loss(LossArgs),
    /// Finite-difference check of the analytic gradients on a random instance.
    Gradcheck(GradcheckArgs),
    /// Gradient descent on free logits for a synthetic or given label map.
    TrainToy(TrainArgs),
    /// Renders an affinity matrix CSV as a PPM heat map.
    Heatmap(HeatmapArgs),
    /// OLS trend test on one column of a CSV file.
    Trend(TrendArgs),
}

#[derive(Args)]
struct LabelOpts {
    /// Comma-separated sampling grid sizes.
    #[arg(long, default_value = "12,6")]
    scales: ScaleSet,
    /// Gray value treated as ignore.
    #[arg(long, default_value_t = PGM_IGNORE_ID)]
    ignore_id: u32,
    /// Treat every gray value as a class.
    #[arg(long, conflicts_with = "ignore_id")]
    no_ignore: bool,
}

impl LabelOpts {
    fn ignore(&self) -> Option<u32> {
        (!self.no_ignore).then_some(self.ignore_id)
    }

    fn read_labels(&self, path: &Path) -> anyhow::Result<LabelMap> {
        let l = read_pgm(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(l.with_ignore(self.ignore()))
    }
}

#[derive(Args)]
struct AffinityArgs {
    /// Label map (PGM, P2 or P5).
    labels: PathBuf,
    #[command(flatten)]
    opts: LabelOpts,
    /// CSV output path.
    #[arg(long)]
    out: PathBuf,
    /// Heat-map path; defaults to the CSV path with a .ppm extension.
    #[arg(long)]
    heatmap: Option<PathBuf>,
}

#[derive(Args)]
struct LossArgs {
    /// Score grid (ARSG binary file).
    scores: PathBuf,
    /// Label map (PGM).
    labels: PathBuf,
    #[command(flatten)]
    opts: LabelOpts,
    #[arg(long, default_value_t = losses::DEFAULT_LAMBDA)]
    lambda: f64,
    /// Also write the report to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 3)]
    channels: usize,
    #[arg(long, default_value_t = 8)]
    height: usize,
    #[arg(long, default_value_t = 8)]
    width: usize,
    #[arg(long, default_value = "4,2")]
    scales: ScaleSet,
    #[arg(long, default_value_t = losses::DEFAULT_LAMBDA)]
    lambda: f64,
    /// Mark every tenth pixel as ignored.
    #[arg(long)]
    with_ignore: bool,
    #[arg(long, default_value_t = FD_STEP)]
    step: f64,
    #[arg(long, default_value_t = GRAD_REL_TOL)]
    tolerance: f64,
}

#[derive(Args)]
struct TrainArgs {
    /// Train on this label map instead of a generated scene.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long, default_value_t = 24)]
    height: usize,
    #[arg(long, default_value_t = 24)]
    width: usize,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    /// stripes, rectangles or voronoi.
    #[arg(long, default_value = "rectangles")]
    pattern: ScenePattern,
    #[arg(long, default_value_t = 0.0)]
    ignore_fraction: f64,
    /// Seed of the scene; defaults to --seed.
    #[arg(long)]
    scene_seed: Option<u64>,
    /// Seed of the logit initialisation.
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Total steps, warm-up included.
    #[arg(long, default_value_t = 1000)]
    steps: usize,
    #[arg(long, default_value_t = 300)]
    warmup: usize,
    #[arg(long, default_value_t = REFERENCE_LR)]
    lr: f64,
    #[arg(long, default_value_t = losses::DEFAULT_LAMBDA)]
    lambda: f64,
    #[arg(long, default_value = "8,4")]
    scales: ScaleSet,
    #[arg(long, default_value_t = 0.01)]
    init_std: f64,
    /// Floating-point precision of the optimisation.
    #[arg(long, value_enum, default_value = "f64")]
    precision: Precision,
    /// Ignore id for --labels.
    #[arg(long, default_value_t = PGM_IGNORE_ID)]
    ignore_id: u32,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Args)]
struct HeatmapArgs {
    /// Matrix CSV as written by `affinity`.
    matrix: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrendArgs {
    /// CSV with a header row, or a bare column of numbers.
    input: PathBuf,
    #[arg(long, default_value = "ar_loss")]
    column: String,
    /// Drop this many leading values, e.g. the warm-up part of a trace.
    #[arg(long, default_value_t = 0)]
    skip: usize,
}

/// A failure that maps to exit status 2.
#[derive(Debug)]
struct NumericalFailure(String);

impl std::fmt::Display for NumericalFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericalFailure {}

fn numerical(msg: impl Into<String>) -> anyhow::Error {
    NumericalFailure(msg.into()).into()
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn heatmap<T: Scalar>(a: &AffinityMatrix<T>, path: &Path) -> anyhow::Result<()> {
    render_heatmap(a, path).with_context(|| format!("writing {}", path.display()))
}

fn cmd_affinity(args: AffinityArgs) -> anyhow::Result<()> {
    let labels = args.opts.read_labels(&args.labels)?;
    let v = pool_label(&labels, &args.opts.scales)?;
    let m = label_affinity::<f64>(&v, labels.ignore_id())?;
    let mut out = create(&args.out)?;
    write_matrix_csv(&m, &mut out)?;
    out.flush()?;
    let ppm = args.heatmap.unwrap_or_else(|| args.out.with_extension("ppm"));
    heatmap(&m, &ppm)?;
    if m.valid_count() == 0 {
        eprintln!("warning: every sampled pixel is ignored; the matrix is fully masked");
    }
    println!("len={}", m.len());
    println!("valid_pairs={}", m.valid_count());
    Ok(())
}

fn cmd_loss(args: LossArgs) -> anyhow::Result<()> {
    let scores = read_score_grid(&args.scores).with_context(|| format!("reading {}", args.scores.display()))?;
    let labels = args.opts.read_labels(&args.labels)?;
    let weights = LossWeights::new(args.lambda)?;
    let ce = ce_loss(&scores, &labels)?;
    let ar = ar_loss(&scores, &labels, &args.opts.scales)?;
    let total = total_loss(&scores, &labels, &args.opts.scales, weights)?;
    let report = format_loss_report(
        ce.loss,
        ar.loss,
        total.loss,
        total.valid_pixels.unwrap_or(0),
        total.valid_pairs.unwrap_or(0),
    );
    print!("{report}");
    if let Some(path) = &args.out {
        std::fs::write(path, &report).with_context(|| format!("writing {}", path.display()))?;
    }
    if ce.degenerate {
        eprintln!("warning: every pixel is ignored");
    }
    if ar.degenerate {
        eprintln!("warning: every affinity pair is masked");
    }
    Ok(())
}

fn print_report(name: &str, r: &GradCheckReport) {
    let (c, row, col) = r.worst_coordinate;
    println!("{name}.max_abs_err={}", fmt_f64(r.max_abs_err));
    println!("{name}.max_rel_err={}", fmt_f64(r.max_rel_err));
    println!("{name}.worst={c},{row},{col}");
    println!("{name}.passed={}", r.passed);
}

fn cmd_gradcheck(args: GradcheckArgs) -> anyhow::Result<()> {
    if args.step.is_nan() || args.step <= 0.0 {
        return Err(anyhow!("--step must be positive"));
    }
    let inst = random_instance(args.seed, args.channels, args.height, args.width, &args.scales, args.with_ignore)?;
    let weights = LossWeights::new(args.lambda)?;
    let x = &inst.logits;

    let ones = ScoreMap::new(args.channels, args.height, args.width, vec![1.0; x.data().len()])?;
    let sum = check_gradient(|y| Ok(y.data().iter().sum()), x, &ones, args.step, args.tolerance)?;
    let quad = check_gradient(
        |y| Ok(0.5 * y.data().iter().map(|v| v * v).sum::<f64>()),
        x,
        x,
        args.step,
        args.tolerance,
    )?;
    let mut reports = vec![("sum", sum), ("quadratic", quad)];
    reports.extend(gradcheck_losses(&inst, weights, args.step, args.tolerance)?);

    println!("tolerance={}", fmt_f64(args.tolerance));
    for (name, r) in &reports {
        print_report(name, r);
    }
    let failed: Vec<&str> = reports.iter().filter(|(_, r)| !r.passed).map(|(n, _)| *n).collect();
    println!("passed={}", failed.is_empty());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(numerical(format!("gradient check failed for {}", failed.join(", "))))
    }
}

fn cmd_train(args: TrainArgs) -> anyhow::Result<()> {
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let labels = match &args.labels {
        Some(path) => read_pgm(path)
            .with_context(|| format!("reading {}", path.display()))?
            .with_ignore(Some(args.ignore_id)),
        None => gen_scene(&SceneSpec {
            height: args.height,
            width: args.width,
            num_classes: args.classes,
            pattern: args.pattern,
            seed: args.scene_seed.unwrap_or(args.seed),
            ignore_fraction: args.ignore_fraction,
        })?,
    };
    let trace_path = args.out.join("trace.csv");
    if args.steps == 0 {
        let mut out = create(&trace_path)?;
        write_trace_csv(&[], &mut out)?;
        out.flush()?;
        println!("steps=0");
        return Ok(());
    }
    let cfg = TrainConfig {
        steps: args.steps,
        lr: args.lr,
        lambda: args.lambda,
        scales: args.scales,
        init_std: args.init_std,
        seed: args.seed,
        warmup_ce_steps: args.warmup,
    };
    match args.precision {
        Precision::F32 => train_and_report::<f32>(&labels, &cfg, &args.out),
        Precision::F64 => train_and_report::<f64>(&labels, &cfg, &args.out),
    }
}

fn train_and_report<T: Scalar>(labels: &LabelMap, cfg: &TrainConfig, dir: &Path) -> anyhow::Result<()> {
    let trace_path = dir.join("trace.csv");
    let trace = optimize_logits::<T>(labels, cfg)?;
    let mut out = create(&trace_path)?;
    write_trace_csv(&trace.records, &mut out)?;
    out.flush()?;
    if let Some(msg) = &trace.divergence {
        return Err(numerical(format!("training diverged at {msg}; partial trace in {}", trace_path.display())));
    }

    write_pgm(&dir.join("prediction.pgm"), &trace.final_logits.argmax())?;
    let [m, warm, last] = affinity_snapshots(labels, &trace, &cfg.scales)?;
    heatmap(&m, &dir.join("label_affinity.ppm"))?;
    heatmap(&warm, &dir.join("affinity_warmup.ppm"))?;
    heatmap(&last, &dir.join("affinity_final.ppm"))?;

    let end = trace.records.last().expect("steps > 0 and no divergence");
    println!("steps={}", end.step);
    println!("ce_loss={}", fmt_f64(end.ce_loss));
    println!("ar_loss={}", fmt_f64(end.ar_loss));
    println!("pixel_accuracy={}", fmt_f64(end.pixel_accuracy));
    println!("miou={}", fmt_f64(end.miou));
    if let Some(start) = trace.records.iter().find(|r| r.step == cfg.warmup_ce_steps) {
        println!("warmup_ar_loss={}", fmt_f64(start.ar_loss));
        println!("warmup_pixel_accuracy={}", fmt_f64(start.pixel_accuracy));
    }
    let g = grouping(&last, &m)?;
    println!("same_label_affinity={}", fmt_f64(g.same_mean));
    println!("diff_label_affinity={}", fmt_f64(g.diff_mean));
    let main = trace.ar_series(Phase::Main);
    if main.len() >= 3 {
        let t = ols_trend_test(&main)?;
        println!("trend_slope={}", fmt_f64(t.slope));
        println!("trend_p_value={}", fmt_f64(t.p_value));
    }
    Ok(())
}

fn cmd_heatmap(args: HeatmapArgs) -> anyhow::Result<()> {
    let text = std::fs::read_to_string(&args.matrix).with_context(|| format!("reading {}", args.matrix.display()))?;
    let m = parse_matrix_csv(&text)?;
    heatmap(&m, &args.out)?;
    println!("len={}", m.len());
    Ok(())
}

fn cmd_trend(args: TrendArgs) -> anyhow::Result<()> {
    let text = std::fs::read_to_string(&args.input).with_context(|| format!("reading {}", args.input.display()))?;
    let series = parse_csv_column(&text, &args.column)?;
    let series = series.get(args.skip..).unwrap_or_default();
    let r = ols_trend_test(series)?;
    println!("n={}", r.n);
    println!("intercept={}", fmt_f64(r.intercept));
    println!("slope={}", fmt_f64(r.slope));
    println!("slope_stderr={}", fmt_f64(r.slope_stderr));
    println!("t_value={}", fmt_f64(r.t_value));
    println!("p_value={}", fmt_f64(r.p_value));
    if let Some(d) = r.degenerate {
        println!("degenerate={d:?}");
    }
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<NumericalFailure>().is_some() {
        return 2;
    }
    match e.downcast_ref::<Error>() {
        Some(Error::NonFinite { .. } | Error::Degenerate(_)) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Affinity(a) => cmd_affinity(a),
        Command::Loss(a) => cmd_loss(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::TrainToy(a) => cmd_train(a),
        Command::Heatmap(a) => cmd_heatmap(a),
        Command::Trend(a) => cmd_trend(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
