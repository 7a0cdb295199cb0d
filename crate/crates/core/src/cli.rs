//! Command-line front end.
//!
//! Every command validates its inputs before touching the filesystem or the
//! device. Failures print a single `error: ...` line to stderr and exit
//! nonzero. `LPS_DEVICE` must be unset or `cpu`; `LPS_SEED` overrides every
//! seed flag.

use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::archspec::{initial_spec, NetworkSpec, Preset};
use crate::costmodel::{
    block_cost, calibrate_profile, count_flops, estimate_latency, flops_efficiency, measure_latency,
};
use crate::evaluation::{
    evaluate_miou, synth_shapes, train, Dataset, DirectoryDataset, TrainConfig,
};
use crate::expander::{
    expand, surrogate_oracle, Evaluator, LookupEvaluator, Memoized, SearchOptions, TrainingEvaluator,
    TRAJECTORY_HEADER,
};
use crate::netcore::{checkpoint, interaction_for, BlockKind, BlockModule, InteractionKind, NetworkInstance, MIN_INPUT};
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Parser)]
#[command(name = "lpsnet", version, about = "Multi-path segmentation networks and latency-aware expansion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Show a network descriptor.
    Spec(SpecArgs),
    /// Count FLOPs and parameters.
    Flops(FlopsArgs),
    /// Time whole-network forward passes.
    Bench(BenchArgs),
    /// Train a network and save a checkpoint.
    Train(TrainArgs),
    /// Compute mIoU of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Run the greedy expansion search.
    Expand(ExpandArgs),
    /// Turn a trajectory into latency/accuracy plot data.
    ExportTrajectory(ExportArgs),
    /// List the S, M and L presets.
    Presets(PresetsArgs),
    /// Compare FLOPs-efficiency of block kinds on one feature map.
    BlockStudy(BlockStudyArgs),
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
struct SpecSource {
    /// Spec document (JSON).
    #[arg(long)]
    file: Option<PathBuf>,
    /// `S`, `M`, `L` or `n0`.
    #[arg(long)]
    preset: Option<String>,
}

impl SpecSource {
    fn load(&self) -> Result<NetworkSpec> {
        match (&self.file, &self.preset) {
            (Some(path), _) => read_spec(path),
            (None, Some(name)) => named_spec(name),
            (None, None) => bail!("one of --file or --preset is required"),
        }
    }
}

fn named_spec(name: &str) -> Result<NetworkSpec> {
    if name.eq_ignore_ascii_case("n0") {
        return Ok(initial_spec());
    }
    Ok(name.parse::<Preset>()?.spec())
}

fn read_spec(path: &Path) -> Result<NetworkSpec> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    NetworkSpec::parse(&text).with_context(|| format!("parsing {}", path.display()))
}

#[derive(Debug, Args)]
struct NetArgs {
    #[arg(long, default_value = "conv3x3")]
    block: BlockKind,
    /// Interaction kind, or `auto` for bilateral-b on multi-path specs and none otherwise.
    #[arg(long, default_value = "auto")]
    interaction: String,
    #[arg(long, default_value_t = 19)]
    classes: usize,
}

impl NetArgs {
    fn interaction(&self, spec: &NetworkSpec) -> Result<InteractionKind> {
        resolve_interaction(&self.interaction, spec)
    }
}

fn resolve_interaction(text: &str, spec: &NetworkSpec) -> Result<InteractionKind> {
    if text == "auto" {
        return Ok(interaction_for(spec, InteractionKind::BilateralB));
    }
    text.parse().map_err(anyhow::Error::msg)
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SpecFormat {
    Summary,
    Raw,
    Compact,
}

#[derive(Debug, Args)]
struct SpecArgs {
    #[command(flatten)]
    source: SpecSource,
    #[arg(long, value_enum, default_value = "summary")]
    format: SpecFormat,
}

#[derive(Debug, Args)]
struct FlopsArgs {
    #[command(flatten)]
    source: SpecSource,
    #[command(flatten)]
    net: NetArgs,
    /// Input resolution `HxW`.
    #[arg(long, default_value = "1024x2048", value_parser = parse_res)]
    res: (usize, usize),
    /// Write the per-layer table here.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[command(flatten)]
    source: SpecSource,
    #[command(flatten)]
    net: NetArgs,
    #[arg(long, default_value = "512x1024", value_parser = parse_res)]
    res: (usize, usize),
    #[arg(long, default_value_t = 10)]
    warmup: usize,
    #[arg(long, default_value_t = 50)]
    runs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Calibrate a per-layer device profile from standalone layer timings and save it here.
    #[arg(long)]
    profile_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Dataset root with `images/{split}` and `labels/{split}` PNGs.
    #[arg(long, conflicts_with = "synth")]
    data: Option<PathBuf>,
    /// Generate this many synthetic samples (80% train, 20% val) instead.
    #[arg(long)]
    synth: Option<usize>,
    /// Class count of the dataset, background included.
    #[arg(long = "data-classes", default_value_t = 4)]
    data_classes: usize,
    /// Height and width of synthetic samples.
    #[arg(long = "synth-size", default_value = "192x192", value_parser = parse_res)]
    synth_size: (usize, usize),
    #[arg(long = "data-seed", default_value_t = 1)]
    data_seed: u64,
}

impl DataArgs {
    fn splits(&self) -> Result<(Box<dyn Dataset>, Box<dyn Dataset>)> {
        match (&self.data, self.synth) {
            (Some(root), _) => Ok((
                Box::new(DirectoryDataset::open(root, "train", self.data_classes)?),
                Box::new(DirectoryDataset::open(root, "val", self.data_classes)?),
            )),
            (None, Some(n)) => {
                let d = synth_shapes(n, self.data_classes, self.synth_size, seed_or(self.data_seed))?;
                Ok((Box::new(d.train), Box::new(d.val)))
            }
            (None, None) => bail!("one of --data or --synth is required"),
        }
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    source: SpecSource,
    #[arg(long, default_value = "conv3x3")]
    block: BlockKind,
    #[arg(long, default_value = "auto")]
    interaction: String,
    /// Training recipe (JSON with `TrainConfig` field names); defaults apply otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    /// Output directory for `model.ckpt`, `loss.csv` and `metrics.txt`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Write per-class IoU here.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ExpandArgs {
    /// `n0`, a preset name, or a spec file.
    #[arg(long, default_value = "n0")]
    origin: String,
    #[arg(long)]
    steps: usize,
    /// `surrogate`, `train`, or `lookup:FILE`.
    #[arg(long, default_value = "surrogate")]
    evaluator: String,
    /// Results directory; evaluations are cached in `evaluations.csv` so reruns resume.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Training recipe for `--evaluator train`.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    /// Timing resolution for `--evaluator train`.
    #[arg(long = "lat-res", default_value = "256x512", value_parser = parse_res)]
    lat_res: (usize, usize),
}

#[derive(Debug, Args)]
struct ExportArgs {
    /// Directory written by `expand`.
    #[arg(long)]
    dir: PathBuf,
    /// Output CSV; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PresetsArgs {
    #[arg(long, default_value = "1024x2048", value_parser = parse_res)]
    res: (usize, usize),
}

#[derive(Debug, Args)]
struct BlockStudyArgs {
    /// Feature map `CxHxW`.
    #[arg(long, default_value = "32x128x128")]
    shape: String,
    /// `all` or a comma-separated list of block kinds.
    #[arg(long, default_value = "all")]
    blocks: String,
    #[arg(long, default_value_t = 10)]
    warmup: usize,
    #[arg(long, default_value_t = 50)]
    runs: usize,
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn parse_res(text: &str) -> Result<(usize, usize), String> {
    let (h, w) = text
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got `{text}`"))?;
    let num = |s: &str| s.trim().parse::<usize>().map_err(|_| format!("bad extent `{s}` in `{text}`"));
    Ok((num(h)?, num(w)?))
}

fn parse_shape(text: &str) -> Result<(usize, usize, usize)> {
    let parts: Vec<&str> = text.split(['x', 'X']).collect();
    ensure!(parts.len() == 3, "expected CxHxW, got `{text}`");
    let n = |s: &str| s.trim().parse::<usize>().with_context(|| format!("bad extent `{s}` in `{text}`"));
    let (c, h, w) = (n(parts[0])?, n(parts[1])?, n(parts[2])?);
    ensure!(c > 0 && h > 0 && w > 0, "shape `{text}` has a zero extent");
    Ok((c, h, w))
}

fn parse_blocks(text: &str) -> Result<Vec<BlockKind>> {
    if text.trim() == "all" {
        return Ok(BlockKind::ALL.to_vec());
    }
    text.split(',')
        .map(|s| s.trim().parse::<BlockKind>().map_err(anyhow::Error::msg))
        .collect()
}

fn check_min_res((h, w): (usize, usize)) -> Result<()> {
    ensure!(
        h >= MIN_INPUT && w >= MIN_INPUT,
        "resolution {h}x{w} is below the {MIN_INPUT}x{MIN_INPUT} minimum"
    );
    Ok(())
}

/// `LPS_SEED` if set, else `seed`.
fn seed_or(seed: u64) -> u64 {
    std::env::var("LPS_SEED").ok().and_then(|s| s.trim().parse().ok()).unwrap_or(seed)
}

fn check_env() -> Result<()> {
    if let Ok(s) = std::env::var("LPS_SEED") {
        ensure!(s.trim().parse::<u64>().is_ok(), "LPS_SEED must be a non-negative integer, got `{s}`");
    }
    match std::env::var("LPS_DEVICE") {
        Ok(d) if !d.eq_ignore_ascii_case("cpu") => bail!("LPS_DEVICE `{d}` is not available (only `cpu` is supported)"),
        _ => Ok(()),
    }
}

/// Exclusive advisory lock serializing timing runs across processes.
fn device_lock() -> Result<File> {
    let path = std::env::temp_dir().join("lpsnet-device.lock");
    let file = File::options()
        .create(true)
        .truncate(false)
        .write(true)
        .open(&path)
        .with_context(|| format!("opening lock file {}", path.display()))?;
    match file.try_lock() {
        Ok(()) => {}
        Err(std::fs::TryLockError::WouldBlock) => {
            eprintln!("waiting for device lock {}", path.display());
            file.lock().with_context(|| format!("locking {}", path.display()))?;
        }
        Err(std::fs::TryLockError::Error(e)) => {
            return Err(e).with_context(|| format!("locking {}", path.display()));
        }
    }
    Ok(file)
}

/// Parses `std::env::args`, runs the command and returns the exit status.
pub fn main() -> i32 {
    run_with(std::env::args_os())
}

/// [`main`] over explicit arguments (the first is the program name).
pub fn run_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            let text = e.to_string();
            let message: Vec<&str> = text
                .lines()
                .map(str::trim)
                .take_while(|l| !l.starts_with("Usage:") && !l.starts_with("For more information"))
                .filter(|l| !l.is_empty())
                .collect();
            eprintln!("{}", message.join(" "));
            return 2;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            let message = format!("{e:#}").replace(['\n', '\r'], " ");
            eprintln!("error: {message}");
            1
        }
    }
}

fn run(command: Command) -> Result<()> {
    check_env()?;
    let mut out = io::stdout().lock();
    match command {
        Command::Spec(a) => cmd_spec(a, &mut out),
        Command::Flops(a) => cmd_flops(a, &mut out),
        Command::Bench(a) => cmd_bench(a, &mut out),
        Command::Train(a) => cmd_train(a, &mut out),
        Command::Eval(a) => cmd_eval(a, &mut out),
        Command::Expand(a) => cmd_expand(a, &mut out),
        Command::ExportTrajectory(a) => cmd_export(a, &mut out),
        Command::Presets(a) => cmd_presets(a, &mut out),
        Command::BlockStudy(a) => cmd_block_study(a, &mut out),
    }
}

fn cmd_spec(a: SpecArgs, out: &mut impl Write) -> Result<()> {
    let spec = a.source.load()?;
    match a.format {
        SpecFormat::Raw => writeln!(out, "{}", spec.serialize())?,
        SpecFormat::Compact => writeln!(out, "{}", spec.to_compact())?,
        SpecFormat::Summary => {
            let list = |v: &[u32]| v.iter().map(u32::to_string).collect::<Vec<_>>().join(" ");
            let ratios: Vec<String> = spec.ratios.iter().map(|r| r.to_string()).collect();
            writeln!(out, "depths: {}", list(&spec.depths))?;
            writeln!(out, "widths: {}", list(&spec.widths))?;
            writeln!(out, "ratios: {}", ratios.join(" "))?;
            writeln!(out, "paths: {}", spec.num_paths())?;
            let violations = spec.validate();
            if violations.is_empty() {
                writeln!(out, "valid: yes")?;
            } else {
                let v: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
                writeln!(out, "valid: no ({})", v.join("; "))?;
            }
        }
    }
    Ok(())
}

fn cmd_flops(a: FlopsArgs, out: &mut impl Write) -> Result<()> {
    check_min_res(a.res)?;
    let spec = a.source.load()?;
    let report = count_flops(&spec, a.net.block, a.net.interaction(&spec)?, a.net.classes, a.res)?;
    writeln!(out, "resolution: {}x{}", a.res.0, a.res.1)?;
    writeln!(out, "flops: {}", report.total_flops)?;
    writeln!(out, "gflops: {:.3}", report.total_flops as f64 / 1e9)?;
    writeln!(out, "params: {}", report.total_params)?;
    writeln!(out, "layers: {}", report.per_layer.len())?;
    if let Some(path) = a.csv {
        let f = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        report.write_csv(f)?;
    }
    Ok(())
}

fn cmd_bench(a: BenchArgs, out: &mut impl Write) -> Result<()> {
    check_min_res(a.res)?;
    ensure!(a.runs >= 1, "--runs must be at least 1");
    let spec = a.source.load()?;
    let kind = a.net.interaction(&spec)?;
    let net = NetworkInstance::<f32>::build(&spec, a.net.block, kind, a.net.classes, seed_or(a.seed))?;
    let report = count_flops(&spec, a.net.block, kind, a.net.classes, a.res)?;
    let x = Tensor::full(Shape::new(1, 3, a.res.0, a.res.1), 0.5f32);
    let _lock = device_lock()?;
    let m = measure_latency(|| net.forward(&x).map(drop), a.warmup, a.runs)?;
    writeln!(out, "device: {}", m.device_label)?;
    writeln!(out, "resolution: {}x{}", a.res.0, a.res.1)?;
    writeln!(out, "runs: {} (warmup {})", m.measure_runs, m.warmup_runs)?;
    writeln!(out, "median_ms: {:.3}", m.median_ms)?;
    writeln!(out, "flops: {}", report.total_flops)?;
    writeln!(out, "mflops_per_ms: {:.1}", flops_efficiency(report.total_flops, m.median_ms)?)?;
    if let Some(path) = a.profile_out {
        let profile = calibrate_profile(&report, a.warmup.min(3), a.runs.clamp(1, 9))?;
        writeln!(out, "estimated_ms: {:.3}", estimate_latency(&report, &profile)?)?;
        profile.save(&path).with_context(|| format!("writing {}", path.display()))?;
        writeln!(out, "profile: {}", path.display())?;
    }
    Ok(())
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    cfg.seed = seed_or(cfg.seed);
    Ok(cfg)
}

fn cmd_train(a: TrainArgs, out: &mut impl Write) -> Result<()> {
    let spec = a.source.load()?;
    let cfg = load_config(a.config.as_deref())?;
    let kind = resolve_interaction(&a.interaction, &spec)?;
    let (train_set, val_set) = a.data.splits()?;
    let net = NetworkInstance::<f32>::build(&spec, a.block, kind, train_set.num_classes(), cfg.seed)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let (net, history) = train(net, train_set.as_ref(), &cfg)?;
    history.save_csv(a.out.join("loss.csv"))?;
    checkpoint::save(&net, a.out.join("model.ckpt"))?;
    let (miou, _) = evaluate_miou(&net, val_set.as_ref())?;
    let final_loss = history.losses.last().copied().unwrap_or(f64::NAN);
    std::fs::write(
        a.out.join("metrics.txt"),
        format!("iterations: {}\nfinal_loss: {final_loss}\nval_miou: {miou}\n", cfg.total_iters),
    )?;
    writeln!(out, "iterations: {}", cfg.total_iters)?;
    writeln!(out, "final_loss: {final_loss:.4}")?;
    writeln!(out, "val_miou: {miou:.4}")?;
    writeln!(out, "checkpoint: {}", a.out.join("model.ckpt").display())?;
    Ok(())
}

fn cmd_eval(a: EvalArgs, out: &mut impl Write) -> Result<()> {
    let net = checkpoint::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let (_, val_set) = a.data.splits()?;
    ensure!(
        val_set.num_classes() == net.num_classes(),
        "dataset has {} classes but the checkpoint predicts {}",
        val_set.num_classes(),
        net.num_classes()
    );
    let (miou, per_class) = evaluate_miou(&net, val_set.as_ref())?;
    writeln!(out, "samples: {}", val_set.len())?;
    writeln!(out, "miou: {miou:.4}")?;
    for (c, iou) in per_class.iter().enumerate() {
        match iou {
            Some(v) => writeln!(out, "class {c}: {v:.4}")?,
            None => writeln!(out, "class {c}: absent")?,
        }
    }
    if let Some(path) = a.csv {
        let mut w = csv::Writer::from_path(&path).with_context(|| format!("creating {}", path.display()))?;
        w.write_record(["class", "iou"])?;
        for (c, iou) in per_class.iter().enumerate() {
            w.write_record([c.to_string(), iou.map_or(String::new(), |v| v.to_string())])?;
        }
        w.flush()?;
    }
    Ok(())
}

fn cmd_expand(a: ExpandArgs, out: &mut impl Write) -> Result<()> {
    ensure!(a.steps >= 1, "--steps must be at least 1");
    let origin = if Path::new(&a.origin).is_file() {
        read_spec(Path::new(&a.origin))?
    } else {
        named_spec(&a.origin).with_context(|| format!("--origin `{}` is neither a file nor a preset", a.origin))?
    };
    let opts = SearchOptions::default();
    let log = a.out.join("evaluations.csv");
    if let Some(file) = a.evaluator.strip_prefix("lookup:") {
        let lookup = LookupEvaluator::from_csv(file).with_context(|| format!("loading lookup table {file}"))?;
        std::fs::create_dir_all(&a.out)?;
        return run_expansion(&origin, a.steps, Memoized::persistent(lookup, log)?, opts, &a.out, out);
    }
    match a.evaluator.as_str() {
        "surrogate" => {
            std::fs::create_dir_all(&a.out)?;
            let eval = Memoized::persistent(surrogate_oracle(seed_or(a.seed)), log)?;
            run_expansion(&origin, a.steps, eval, opts, &a.out, out)
        }
        "train" => {
            let config = load_config(a.config.as_deref())?;
            check_min_res(a.lat_res)?;
            let (train_set, val_set) = a.data.splits()?;
            std::fs::create_dir_all(&a.out)?;
            let trainer = TrainingEvaluator {
                train_set: train_set.as_ref(),
                val_set: val_set.as_ref(),
                config,
                block_kind: BlockKind::Conv3x3,
                interaction_kind: InteractionKind::BilateralB,
                latency_res: a.lat_res,
                warmup_runs: 10,
                measure_runs: 50,
            };
            let _lock = device_lock()?;
            run_expansion(&origin, a.steps, Memoized::persistent(trainer, log)?, opts, &a.out, out)
        }
        other => bail!("unknown evaluator `{other}` (expected surrogate, train or lookup:FILE)"),
    }
}

fn run_expansion<E: Evaluator>(
    origin: &NetworkSpec,
    steps: usize,
    mut eval: Memoized<E>,
    opts: SearchOptions,
    dir: &Path,
    out: &mut impl Write,
) -> Result<()> {
    let cached = eval.cached();
    let traj = expand(origin, steps, &mut eval, opts)?;
    traj.write_dir(dir)?;
    for s in &traj.steps {
        writeln!(
            out,
            "step {:>2}: op {} ({}) k={} perf={:.2} lat={:.4} ms  {}",
            s.index,
            s.op.index(),
            s.op.dimension(),
            s.k,
            s.perf_pct,
            s.lat_ms,
            s.spec
        )?;
    }
    if let Some(reason) = &traj.stopped {
        writeln!(out, "stopped early: {reason}")?;
    }
    writeln!(out, "evaluations: {} new, {} reused from cache", eval.inner_calls, cached)?;
    writeln!(out, "results: {}", dir.display())?;
    Ok(())
}

fn cmd_export(a: ExportArgs, out: &mut impl Write) -> Result<()> {
    let path = a.dir.join("trajectory.csv");
    let mut rd = csv::Reader::from_path(&path).with_context(|| format!("reading {}", path.display()))?;
    let header = rd.headers()?.clone();
    ensure!(
        header.iter().eq(TRAJECTORY_HEADER.iter().copied()),
        "{} does not have the trajectory header",
        path.display()
    );
    let col = |name: &str| header.iter().position(|h| h == name).expect("checked header");
    let (step, dim, perf, lat) = (col("step"), col("dimension"), col("perf_pct"), col("lat_ms"));
    let sink: Box<dyn Write> = match &a.out {
        Some(p) => Box::new(File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(&mut *out),
    };
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["step", "dimension", "lat_ms", "perf_pct"])?;
    for row in rd.records() {
        let row = row?;
        for (i, name) in [(lat, "lat_ms"), (perf, "perf_pct")] {
            row[i]
                .parse::<f64>()
                .with_context(|| format!("bad {name} `{}` in {}", &row[i], path.display()))?;
        }
        w.write_record([&row[step], &row[dim], &row[lat], &row[perf]])?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_presets(a: PresetsArgs, out: &mut impl Write) -> Result<()> {
    check_min_res(a.res)?;
    writeln!(out, "name,spec,gflops,params")?;
    for p in Preset::ALL {
        let spec = p.spec();
        let report = count_flops(&spec, BlockKind::Conv3x3, InteractionKind::BilateralB, 19, a.res)?;
        writeln!(
            out,
            "{p},\"{spec}\",{:.3},{}",
            report.total_flops as f64 / 1e9,
            report.total_params
        )?;
    }
    Ok(())
}

fn cmd_block_study(a: BlockStudyArgs, out: &mut impl Write) -> Result<()> {
    let (c, h, w) = parse_shape(&a.shape)?;
    let kinds = parse_blocks(&a.blocks)?;
    ensure!(a.runs >= 1, "--runs must be at least 1");
    let _lock = device_lock()?;
    let sink: Box<dyn Write> = match &a.csv {
        Some(p) => Box::new(File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(&mut *out),
    };
    let mut table = csv::Writer::from_writer(sink);
    table.write_record(["block", "flops", "params", "median_ms", "mflops_per_ms", "error"])?;
    for kind in kinds {
        let row = study_row(kind, (c, h, w), a.warmup, a.runs);
        let record = match row {
            Ok((flops, params, ms, eff)) => [
                kind.to_string(),
                flops.to_string(),
                params.to_string(),
                format!("{ms:.4}"),
                format!("{eff:.1}"),
                String::new(),
            ],
            Err(e) => {
                let msg = format!("{e:#}").replace(['\n', '\r'], " ");
                [kind.to_string(), String::new(), String::new(), String::new(), String::new(), msg]
            }
        };
        table.write_record(&record)?;
        table.flush()?;
    }
    Ok(())
}

/// `(flops, params, median ms, MFLOPs/ms)` of one block kind.
pub fn study_row(
    kind: BlockKind,
    (c, h, w): (usize, usize, usize),
    warmup: usize,
    runs: usize,
) -> Result<(u64, u64, f64, f64)> {
    let report = block_cost(kind, (c, h, w))?;
    let module = BlockModule::<f32>::new(kind, c, seed_or(0))?;
    let x = Tensor::full(Shape::new(1, c, h, w), 0.5f32);
    let m = measure_latency(|| module.forward(&x).map(drop), warmup, runs)?;
    let eff = flops_efficiency(report.total_flops, m.median_ms)?;
    Ok((report.total_flops, report.total_params, m.median_ms, eff))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolution_and_shape_parsing() {
        assert_eq!(parse_res("1024x2048"), Ok((1024, 2048)));
        assert!(parse_res("1024").is_err());
        assert_eq!(parse_shape("32x128x128").unwrap(), (32, 128, 128));
        assert!(parse_shape("32x128").is_err());
        assert!(parse_shape("0x8x8").is_err());
    }

    #[test]
    fn block_lists() {
        assert_eq!(parse_blocks("all").unwrap().len(), 7);
        assert_eq!(parse_blocks("conv3x3, sepconv3x3").unwrap(), vec![BlockKind::Conv3x3, BlockKind::SepConv3x3]);
        assert!(parse_blocks("conv3x3,bogus").is_err());
    }

    #[test]
    fn named_specs() {
        assert_eq!(named_spec("n0").unwrap(), initial_spec());
        assert_eq!(named_spec("M").unwrap(), Preset::M.spec());
        assert!(named_spec("XL").is_err());
    }

    #[test]
    fn usage_errors_exit_nonzero() {
        assert_eq!(run_with(["lpsnet", "flops", "--preset", "S", "--res", "63x63"]), 1);
        assert_eq!(run_with(["lpsnet", "block-study", "--blocks", "bogus"]), 1);
        assert_eq!(run_with(["lpsnet", "nope"]), 2);
        assert_eq!(run_with(["lpsnet", "spec", "--preset", "S"]), 0);
    }
}
