//! `dhog`: descriptor extraction, reconstruction, alignment, metrics and
//! gradient checks from the command line.
//!
//! Exit codes: 0 success, 2 I/O or file-format error, 3 configuration
//! error, 4 optimizer divergence, 5 gradient check failure.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use dhog::align::{self, AlignOptions, AlignmentProblem, Pose2D, PoseParam};
use dhog::io::{self, write_atomic};
use dhog::metrics::{self, MetricReport};
use dhog::preimage::{self, Init, Method, OptimizerConfig, ReconstructionProblem, Schedule};
use dhog::verify::{self, CheckOptions, CheckTarget};
use dhog::{Error, HogConfig, HogDescriptor, Image, NormStyle};

#[derive(Parser, Debug)]
#[command(name = "dhog", version, about = "Differentiable HOG toolkit")]
struct Cli {
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads for independent tasks; 0 uses every core.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Progress messages on stderr.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the descriptor of an image as a GHOG file.
    Extract(ExtractArgs),
    /// Reconstruct an image from descriptor files.
    Invert(InvertArgs),
    /// Estimate the pose of a template relative to a patch.
    Align(AlignArgs),
    /// Compare backward-pass gradients with central differences.
    Gradcheck(GradcheckArgs),
    /// Cross-correlation, mutual information and SSIM of image pairs.
    Metrics(MetricsArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum ModeArg {
    Unsigned,
    Signed,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum NormArg {
    Paper,
    Squared,
}

#[derive(Args, Debug, Clone)]
struct HogArgs {
    #[arg(long, default_value_t = 8)]
    cell: usize,
    /// Orientation bins; 9 unsigned or 18 signed when omitted.
    #[arg(long)]
    bins: Option<usize>,
    #[arg(long, value_enum, default_value_t = ModeArg::Unsigned)]
    mode: ModeArg,
    #[arg(long)]
    no_normalize: bool,
    #[arg(long, value_enum, default_value_t = NormArg::Paper)]
    norm_style: NormArg,
    #[arg(long, default_value_t = 1e-4)]
    epsilon: f64,
}

impl HogArgs {
    fn config(&self) -> Result<HogConfig, Error> {
        let base = match self.mode {
            ModeArg::Unsigned => HogConfig::default(),
            ModeArg::Signed => HogConfig::signed(),
        };
        let cfg = HogConfig {
            cell: self.cell,
            bins: self.bins.unwrap_or(base.bins),
            orientation: base.orientation,
            epsilon: self.epsilon,
            normalize: !self.no_normalize,
            norm_style: match self.norm_style {
                NormArg::Paper => NormStyle::Paper,
                NormArg::Squared => NormStyle::Squared,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct ExtractArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[command(flatten)]
    hog: HogArgs,
    /// Also write the per-scale descriptors used by the multi-scale-more
    /// schedule, as `<output stem>.s<S>.ghog`.
    #[arg(long)]
    per_scale: bool,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum ScheduleArg {
    Single,
    Multi,
    MultiMore,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum OptArg {
    Momentum,
    Dogleg,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum InitArg {
    Gray,
    Noise,
}

#[derive(Args, Debug)]
struct InvertArgs {
    /// Descriptor file; for multi-more a comma-separated list covering
    /// every scale (the scale is read from the cell size).
    #[arg(long, value_delimiter = ',', required = true)]
    target: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = ScheduleArg::Single)]
    schedule: ScheduleArg,
    /// Smoothness weight.
    #[arg(long, default_value_t = 1e2)]
    xi: f64,
    /// Decay the smoothness weight linearly to zero over each stage.
    #[arg(long)]
    xi_decay: bool,
    #[arg(long, value_enum, default_value_t = OptArg::Momentum)]
    opt: OptArg,
    #[arg(long, value_enum, default_value_t = InitArg::Gray)]
    init: InitArg,
    /// Iteration cap per stage.
    #[arg(long, default_value_t = 300)]
    iters: usize,
    #[arg(long, default_value_t = 1e-3)]
    step: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    #[arg(long)]
    output: PathBuf,
    /// E trace as CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AlignArgs {
    #[arg(long)]
    template: PathBuf,
    #[arg(long)]
    target_patch: PathBuf,
    #[arg(long, default_value_t = 8)]
    restarts: usize,
    /// Evaluate S and its derivative along one parameter instead of optimizing.
    #[arg(long)]
    sweep: Option<String>,
    #[arg(long, default_value_t = -180.0, allow_hyphen_values = true)]
    sweep_min: f64,
    #[arg(long, default_value_t = 180.0, allow_hyphen_values = true)]
    sweep_max: f64,
    #[arg(long, default_value_t = 1.0)]
    sweep_step: f64,
    /// Initial pose `tx,ty,r,sigma` the restarts are spread around.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    init_pose: Option<Vec<f64>>,
    #[arg(long, default_value_t = 150)]
    iters: usize,
    #[arg(long, default_value_t = 12.0)]
    step: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    /// Iterations on (tx, ty, r) per block.
    #[arg(long, default_value_t = 10)]
    pose_block: usize,
    /// Iterations on sigma after every pose block.
    #[arg(long, default_value_t = 5)]
    scale_block: usize,
    #[command(flatten)]
    hog: HogArgs,
    /// Pose JSON, or the sweep CSV with --sweep.
    #[arg(long)]
    output: PathBuf,
    /// Per-restart traces as CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq)]
enum WhatArg {
    Primitives,
    Hog,
    Objective,
    Pose,
    All,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, value_enum, default_value_t = WhatArg::All)]
    what: WhatArg,
    #[arg(long, default_value_t = 3)]
    trials: usize,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    /// Coordinates probed per instance.
    #[arg(long, default_value_t = 64)]
    coords: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Scales analytic gradients by 1.01 to exercise the failure path.
    #[arg(long, hide = true)]
    inject_fault: bool,
    /// Report as CSV.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq)]
enum FormatArg {
    Csv,
    Json,
}

#[derive(Args, Debug)]
struct MetricsArgs {
    #[arg(long, requires = "b", conflicts_with = "suite")]
    a: Option<PathBuf>,
    #[arg(long, requires = "a")]
    b: Option<PathBuf>,
    /// Two directories whose files are paired by name.
    #[arg(long, num_args = 2, value_names = ["DIR_A", "DIR_B"])]
    suite: Option<Vec<PathBuf>>,
    #[arg(long, value_enum, default_value_t = FormatArg::Csv)]
    format: FormatArg,
    #[arg(long, default_value_t = metrics::DEFAULT_MI_BINS)]
    mi_bins: usize,
    /// Defaults to stdout.
    #[arg(long)]
    output: Option<PathBuf>,
}

/// A failure mapped onto the exit-code contract.
#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io(_)
            | Error::Unsupported(_)
            | Error::Corrupt(_)
            | Error::BadMagic(_)
            | Error::VersionMismatch(_)
            | Error::Truncated { .. } => 2,
            Error::Diverged { .. } | Error::AllRestartsDiverged(_) => 4,
            _ => 3,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn config_error(msg: impl Into<String>) -> Failure {
    Failure {
        code: 3,
        message: msg.into(),
    }
}

type CliResult<T> = Result<T, Failure>;

/// Prefixes the failure message with the path involved.
fn at<T>(path: &Path, r: Result<T, Error>) -> CliResult<T> {
    r.map_err(|e| {
        let mut f = Failure::from(e);
        f.message = format!("{}: {}", path.display(), f.message);
        f
    })
}

struct Ctx {
    seed: u64,
    threads: usize,
    verbose: u8,
}

impl Ctx {
    fn note(&self, msg: impl AsRef<str>) {
        if self.verbose > 0 {
            eprintln!("{}", msg.as_ref());
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 3 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let ctx = Ctx {
        seed: cli.seed,
        threads: cli.threads,
        verbose: cli.verbose,
    };
    let result = match cli.command {
        Command::Extract(a) => cmd_extract(&ctx, a),
        Command::Invert(a) => cmd_invert(&ctx, a),
        Command::Align(a) => cmd_align(&ctx, a),
        Command::Gradcheck(a) => cmd_gradcheck(&ctx, a),
        Command::Metrics(a) => cmd_metrics(&ctx, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

/// Center-crops so both extents are multiples of `cell`.
fn crop_to_cells(img: Image, cell: usize, ctx: &Ctx) -> CliResult<Image> {
    let (w, h) = (img.width() / cell * cell, img.height() / cell * cell);
    if w == 0 || h == 0 {
        return Err(config_error(format!(
            "image {}x{} is smaller than one {cell}-pixel cell",
            img.width(),
            img.height()
        )));
    }
    if (w, h) == (img.width(), img.height()) {
        return Ok(img);
    }
    eprintln!(
        "warning: cropping {}x{} to {w}x{h} to fit {cell}-pixel cells",
        img.width(),
        img.height()
    );
    ctx.note("crop is centered");
    Ok(img.crop_center(w, h)?)
}

fn per_scale_path(output: &Path, scale: u32) -> PathBuf {
    let stem = output.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let ext = output.extension().map(|e| e.to_string_lossy().into_owned()).unwrap_or_else(|| "ghog".into());
    output.with_file_name(format!("{stem}.s{scale}.{ext}"))
}

fn cmd_extract(ctx: &Ctx, a: ExtractArgs) -> CliResult<()> {
    let cfg = a.hog.config()?;
    let img = crop_to_cells(at(&a.input, io::load_image(&a.input))?, cfg.cell, ctx)?;
    let desc = dhog::hog::extract(&img, &cfg)?;
    let targets = if a.per_scale {
        Some(preimage::per_scale_targets(&img, &cfg)?)
    } else {
        None
    };
    at(&a.output, io::write_descriptor(&desc, &a.output))?;
    if let Some(targets) = targets {
        for (scale, d) in targets.iter().filter(|(s, _)| **s != 1) {
            let path = per_scale_path(&a.output, *scale);
            at(&path, io::write_descriptor(d, &path))?;
            ctx.note(format!("wrote {}", path.display()));
        }
    }
    let (r, c, b) = desc.dims();
    ctx.note(format!("wrote {} ({r}x{c}x{b})", a.output.display()));
    Ok(())
}

/// Keys descriptor files by scale `s = (c₁ / c)²`, where `c₁` is the
/// largest cell size among them.
fn targets_by_scale(paths: &[PathBuf]) -> CliResult<BTreeMap<u32, HogDescriptor>> {
    let descs: Vec<HogDescriptor> = paths.iter().map(|p| at(p, io::read_descriptor(p))).collect::<Result<_, _>>()?;
    let full = descs.iter().map(|d| d.config.cell).max().expect("clap requires a target");
    let mut out = BTreeMap::new();
    for d in descs {
        if full % d.config.cell != 0 {
            return Err(config_error(format!(
                "cell size {} does not divide the full-resolution cell size {full}",
                d.config.cell
            )));
        }
        let f = (full / d.config.cell) as u32;
        if out.insert(f * f, d).is_some() {
            return Err(config_error(format!("two targets for scale s = {}", f * f)));
        }
    }
    Ok(out)
}

fn cmd_invert(ctx: &Ctx, a: InvertArgs) -> CliResult<()> {
    let opt = OptimizerConfig {
        method: match a.opt {
            OptArg::Momentum => Method::MomentumGd,
            OptArg::Dogleg => Method::Dogleg,
        },
        step: a.step,
        momentum: a.momentum,
        max_iters: a.iters,
        tol: a.tol,
        xi_decay: a.xi_decay,
        ..OptimizerConfig::default()
    };
    opt.validate()?;
    if !(a.xi >= 0.0) {
        return Err(config_error("--xi must be non-negative"));
    }
    let schedule = match a.schedule {
        ScheduleArg::Single => Schedule::Single,
        ScheduleArg::Multi => Schedule::MultiScale,
        ScheduleArg::MultiMore => Schedule::MultiScaleMore,
    };
    if schedule != Schedule::MultiScaleMore && a.target.len() != 1 {
        return Err(config_error("only multi-more accepts several targets"));
    }
    let targets = targets_by_scale(&a.target)?;
    let config = targets
        .get(&1)
        .ok_or_else(|| config_error("missing full-resolution target"))?
        .config;
    let problem = ReconstructionProblem {
        targets,
        config,
        xi: a.xi,
        schedule,
        init: match a.init {
            InitArg::Gray => Init::MidGray,
            InitArg::Noise => Init::Noise { seed: ctx.seed },
        },
    };
    let result = preimage::reconstruct(&problem, &opt)?;
    if let Some(last) = result.trace.last() {
        ctx.note(format!("final E {:.6} after {} evaluations", last.e, result.trace.len()));
    }
    at(&a.output, io::save_image(&result.image, &a.output))?;
    if let Some(path) = &a.trace {
        let mut csv = String::from("iteration,stage,E,feature,smoothness\n");
        for r in &result.trace {
            writeln!(csv, "{},{},{:e},{:e},{:e}", r.iteration, r.stage, r.e, r.feature, r.smoothness).unwrap();
        }
        at(path, write_atomic(path, csv.as_bytes()))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct PoseJson {
    tx: f64,
    ty: f64,
    r: f64,
    sigma: f64,
    #[serde(rename = "S")]
    s: f64,
    restart: usize,
}

fn cmd_align(ctx: &Ctx, a: AlignArgs) -> CliResult<()> {
    let cfg = a.hog.config()?;
    let opts = AlignOptions {
        step: a.step,
        momentum: a.momentum,
        max_iters: a.iters,
        pose_block: a.pose_block,
        scale_block: a.scale_block,
        threads: ctx.threads,
        ..AlignOptions::default()
    };
    opts.validate()?;
    let param: Option<PoseParam> = a.sweep.as_deref().map(str::parse).transpose()?;
    if param.is_some() && !(a.sweep_step > 0.0 && a.sweep_max >= a.sweep_min) {
        return Err(config_error("sweep range must be non-empty with a positive step"));
    }
    let seed_pose = match &a.init_pose {
        None => Pose2D::IDENTITY,
        Some(v) if v.len() == 4 => Pose2D::new(v[0], v[1], v[2], v[3]),
        Some(_) => return Err(config_error("--init-pose takes four values tx,ty,r,sigma")),
    };
    let template = at(&a.template, io::load_image(&a.template))?.to_gray();
    let patch = at(&a.target_patch, io::load_image(&a.target_patch))?.to_gray();
    if patch.width() % cfg.cell != 0 || patch.height() % cfg.cell != 0 {
        return Err(config_error(format!(
            "patch {}x{} is not divisible by the cell size {}",
            patch.width(),
            patch.height(),
            cfg.cell
        )));
    }
    let mut problem = AlignmentProblem::new(&template, &patch, cfg, a.restarts)?;
    problem.seed_pose = seed_pose;

    if let Some(param) = param {
        let n = ((a.sweep_max - a.sweep_min) / a.sweep_step + 1e-9).floor() as usize + 1;
        let grid: Vec<f64> = (0..n).map(|k| a.sweep_min + k as f64 * a.sweep_step).collect();
        let rows = align::sweep(&problem, param, seed_pose, &grid, ctx.threads)?;
        let mut csv = String::from("value,S,dSdparam\n");
        for r in rows {
            writeln!(csv, "{},{:e},{:e}", r.value, r.s, r.ds).unwrap();
        }
        at(&a.output, write_atomic(&a.output, csv.as_bytes()))?;
        return Ok(());
    }

    let est = align::estimate_pose(&problem, &opts)?;
    let json = PoseJson {
        tx: est.pose.tx,
        ty: est.pose.ty,
        r: est.pose.r,
        sigma: est.pose.sigma,
        s: est.s,
        restart: est.restart,
    };
    ctx.note(format!("best restart {} with S = {:.6}", est.restart, est.s));
    let mut text = serde_json::to_string_pretty(&json).map_err(|e| config_error(e.to_string()))?;
    text.push('\n');
    if let Some(path) = &a.trace {
        let mut csv = String::from("restart,iteration,S,tx,ty,r,sigma,diverged\n");
        for (k, r) in est.restarts.iter().enumerate() {
            for row in &r.trace {
                let p = row.pose;
                writeln!(
                    csv,
                    "{k},{},{:e},{:e},{:e},{:e},{:e},{}",
                    row.iteration, row.s, p.tx, p.ty, p.r, p.sigma, r.diverged as u8
                )
                .unwrap();
            }
        }
        at(path, write_atomic(path, csv.as_bytes()))?;
    }
    at(&a.output, write_atomic(&a.output, text.as_bytes()))?;
    Ok(())
}

fn cmd_gradcheck(ctx: &Ctx, a: GradcheckArgs) -> CliResult<()> {
    let opts = CheckOptions {
        trials: a.trials,
        step: a.step,
        coords: a.coords,
        seed: ctx.seed,
        analytic_scale: if a.inject_fault { 1.01 } else { 1.0 },
        size: a.size,
    };
    if !(opts.step > 0.0) {
        return Err(config_error("--step must be positive"));
    }
    let targets: Vec<CheckTarget> = match a.what {
        WhatArg::Primitives => vec![CheckTarget::Primitives],
        WhatArg::Hog => vec![CheckTarget::Hog],
        WhatArg::Objective => vec![CheckTarget::Objective],
        WhatArg::Pose => vec![CheckTarget::Pose],
        WhatArg::All => CheckTarget::ALL.to_vec(),
    };
    let mut csv = String::from("name,max_rel_error,checked,excluded,pass\n");
    let mut failed = 0;
    for t in targets {
        for r in verify::run(t, &opts)? {
            let ok = r.passes();
            failed += usize::from(!ok);
            println!(
                "{:<6} {:<28} max_rel_error {:.3e}  checked {:>3}  excluded {:>3}",
                if ok { "PASS" } else { "FAIL" },
                r.name,
                r.report.max_rel_error,
                r.report.checked,
                r.report.excluded
            );
            writeln!(
                csv,
                "{},{:e},{},{},{}",
                r.name, r.report.max_rel_error, r.report.checked, r.report.excluded, ok as u8
            )
            .unwrap();
        }
    }
    if let Some(path) = &a.output {
        at(path, write_atomic(path, csv.as_bytes()))?;
    }
    if failed > 0 {
        return Err(Failure {
            code: 5,
            message: format!("{failed} gradient check(s) above {:e}", verify::GRADCHECK_TOL),
        });
    }
    Ok(())
}

#[derive(Serialize)]
struct MetricsRow {
    name: String,
    cross_correlation: f64,
    cross_correlation_raw: f64,
    mutual_information: f64,
    ssim: f64,
}

impl MetricsRow {
    fn new(name: String, m: &MetricReport) -> Self {
        MetricsRow {
            name,
            cross_correlation: m.cross_correlation,
            cross_correlation_raw: m.cross_correlation_raw,
            mutual_information: m.mutual_information,
            ssim: m.ssim,
        }
    }
}

fn image_files(dir: &Path) -> CliResult<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in at(dir, std::fs::read_dir(dir).map_err(Error::from))? {
        let path = entry.map_err(Error::from)?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if matches!(ext.as_deref(), Some("png" | "pgm" | "ppm")) {
            let name = path.file_name().unwrap().to_string_lossy().into_owned();
            out.insert(name, path);
        }
    }
    Ok(out)
}

fn cmd_metrics(ctx: &Ctx, a: MetricsArgs) -> CliResult<()> {
    if a.mi_bins < 2 {
        return Err(config_error("--mi-bins must be at least 2"));
    }
    let pairs: Vec<(String, PathBuf, PathBuf)> = match (&a.a, &a.b, &a.suite) {
        (Some(x), Some(y), None) => vec![(x.file_name().unwrap_or_default().to_string_lossy().into_owned(), x.clone(), y.clone())],
        (None, None, Some(dirs)) => {
            let (left, right) = (image_files(&dirs[0])?, image_files(&dirs[1])?);
            let pairs: Vec<_> = left
                .into_iter()
                .filter_map(|(name, p)| right.get(&name).map(|q| (name, p, q.clone())))
                .collect();
            if pairs.is_empty() {
                return Err(config_error("no file names common to both suite directories"));
            }
            pairs
        }
        _ => return Err(config_error("give either --a and --b or --suite DIR_A DIR_B")),
    };
    let reports: Vec<MetricReport> = dhog::parallel::map(&pairs, ctx.threads, |(_, p, q)| {
        let x = at(p, io::load_image(p))?;
        let y = at(q, io::load_image(q))?;
        Ok(metrics::evaluate(&x, &y, a.mi_bins)?)
    })
    .into_iter()
    .collect::<CliResult<_>>()?;

    let mut rows: Vec<MetricsRow> = pairs
        .iter()
        .zip(&reports)
        .map(|((name, ..), m)| MetricsRow::new(name.clone(), m))
        .collect();
    if a.suite.is_some() {
        let mean = MetricReport::mean(&reports).expect("at least one pair");
        rows.push(MetricsRow::new("mean".into(), &mean));
    }
    let text = match a.format {
        FormatArg::Csv => {
            let mut csv = String::from("name,cross_correlation,cross_correlation_raw,mutual_information,ssim\n");
            for r in &rows {
                writeln!(
                    csv,
                    "{},{:e},{:e},{:e},{:e}",
                    r.name, r.cross_correlation, r.cross_correlation_raw, r.mutual_information, r.ssim
                )
                .unwrap();
            }
            csv
        }
        FormatArg::Json => {
            let mut s = serde_json::to_string_pretty(&rows).map_err(|e| config_error(e.to_string()))?;
            s.push('\n');
            s
        }
    };
    match &a.output {
        Some(path) => at(path, write_atomic(path, text.as_bytes()))?,
        None => print!("{text}"),
    }
    Ok(())
}
