//! `evaflow` command-line front end.
//!
//! Every subcommand writes exactly one run manifest (`key=value` lines):
//! next to its primary output as `<output>.manifest.txt` (`infer` uses
//! `<out-dir>/manifest.txt`), at `--manifest` when given, or on stderr when
//! the command has no output file.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use evaflow::events::{load_events, save_events, us_to_seconds, EventFormat, EventWindow, SensorGeometry};
use evaflow::flow::{load_flow, save_flow, FlowField};
use evaflow::metrics::{
    integrate_trajectory, AngularConvention, EvalReport, FlowSequence, OutlierConvention, METRICS_HEADER,
};
use evaflow::mocomp::evaluate_warp;
use evaflow::network::train::TrainingSample;
use evaflow::network::{self, KeyValues, Model, ModelConfig, ModelParams, NetworkError, TrainConfig};
use evaflow::representation::{
    assemble_grid, build_unified_voxel_grid, build_voxel_grid, load_grid, save_grid, BinSpec, Grid, StreamingBinner,
};
use evaflow::simulate::{generate_events_with, ground_truth_flow, MotionModel, ScenePattern, SimOptions};

pub mod render;

pub use render::render_flow_image;

/// Failure classes, each with its own exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

/// Wraps a library error with the path it concerns.
fn data_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

fn flow_err(path: &Path, e: evaflow::flow::FlowError) -> CliError {
    match e {
        evaflow::flow::FlowError::NonFinite(_) => CliError::Numeric(format!("{}: {e}", path.display())),
        e => data_err(path, e),
    }
}

fn net_err(path: &Path, e: NetworkError) -> CliError {
    match e {
        NetworkError::Divergence { .. } => CliError::Numeric(e.to_string()),
        NetworkError::Config(_) => CliError::Usage(format!("{}: {e}", path.display())),
        e => data_err(path, e),
    }
}

#[derive(Debug, Parser)]
#[command(name = "evaflow", version, about = "Anytime event-camera optical flow toolkit")]
pub struct Cli {
    /// Where to write the run manifest (default: next to the primary output).
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize events (and optionally ground-truth flow) from a moving scene.
    Simulate(SimulateArgs),
    /// Bin events into a voxel grid.
    Voxelize(VoxelizeArgs),
    /// Bin events through the incremental bin-by-bin builder.
    Stream(StreamArgs),
    /// Motion-compensate events with a flow field.
    Mocomp(MocompArgs),
    /// Score a predicted flow against ground truth.
    Eval(EvalArgs),
    /// Train the flow network on grid/flow pairs.
    Train(TrainArgs),
    /// Run the flow network over a grid.
    Infer(InferArgs),
    /// Integrate point trajectories through a flow sequence.
    Trajectory(TrajectoryArgs),
    /// Collect metrics rows into one table.
    Report(ReportArgs),
    /// Render a flow field as a color-wheel image.
    Render(RenderArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MotionKind {
    Const,
    Arc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PatternKind {
    Random,
    Lattice,
    Ring,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, value_enum)]
    pub motion: MotionKind,
    /// px/s for `const`, rad/s for `arc`.
    #[arg(long)]
    pub speed: f64,
    /// Direction of constant motion in degrees (image axes, y down).
    #[arg(long, default_value_t = 0.0)]
    pub angle: f64,
    /// Arc center; defaults to the frame center.
    #[arg(long)]
    pub cx: Option<f64>,
    #[arg(long)]
    pub cy: Option<f64>,
    /// Window length in seconds.
    #[arg(long, default_value_t = 0.1)]
    pub duration: f64,
    /// Events per pixel of travel per scene point.
    #[arg(long, default_value_t = 2.0)]
    pub rate: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub width: u32,
    #[arg(long, default_value_t = 64)]
    pub height: u32,
    #[arg(long, value_enum, default_value_t = PatternKind::Random)]
    pub pattern: PatternKind,
    /// Scene points for the random pattern.
    #[arg(long, default_value_t = 50)]
    pub points: usize,
    /// Background noise in events per second per pixel.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    /// Event file; `.txt`/`.csv` selects the text format, anything else EVT1.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the ground-truth flow over the window.
    #[arg(long)]
    pub gt_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GridKindArg {
    Uvg,
    Vg,
}

#[derive(Debug, Args)]
pub struct BinArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub bins: usize,
    /// Bin spacing in seconds; defaults to the window span over `bins - 1`.
    #[arg(long)]
    pub tau: Option<f64>,
    /// Center of bin 0 in seconds; defaults to the window start.
    #[arg(long)]
    pub t0: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct VoxelizeArgs {
    #[command(flatten)]
    pub bin: BinArgs,
    #[arg(long, value_enum, default_value_t = GridKindArg::Uvg)]
    pub kind: GridKindArg,
}

#[derive(Debug, Args)]
pub struct StreamArgs {
    #[command(flatten)]
    pub bin: BinArgs,
}

#[derive(Debug, Args)]
pub struct MocompArgs {
    #[arg(long)]
    pub events: PathBuf,
    #[arg(long)]
    pub flow: PathBuf,
    /// Reference time in seconds; defaults to the window start.
    #[arg(long)]
    pub tref: Option<f64>,
    /// Writes `<prefix>.pgm` and `<prefix>.txt`.
    #[arg(long)]
    pub out_prefix: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AeConventionArg {
    #[value(name = "3d")]
    ThreeD,
    #[value(name = "2d")]
    TwoD,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OutlierArg {
    /// Above 3 px and above 5% of the ground-truth magnitude.
    Relative,
    /// Above 3 px.
    Absolute,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long, value_enum, default_value_t = AeConventionArg::ThreeD)]
    pub ae_convention: AeConventionArg,
    #[arg(long, value_enum, default_value_t = OutlierArg::Relative)]
    pub outliers: OutlierArg,
    /// Metrics CSV (header plus one row); always echoed to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory of `<name>.evgr` grids with matching `<name>.evaf` targets.
    #[arg(long)]
    pub data_dir: PathBuf,
    /// `key=value` model and training settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub out_params: PathBuf,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub grid: PathBuf,
    #[arg(long)]
    pub params: PathBuf,
    /// Model settings; widths are read from the parameter file otherwise.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrajectoryArgs {
    /// Directory of `flow_NNNN.evaf` files sharing one anchor time.
    #[arg(long)]
    pub flows_dir: PathBuf,
    /// `x,y;x,y;...` or a file with one `x,y` per line.
    #[arg(long)]
    pub seeds: String,
    /// Anchor time of the sequence in seconds.
    #[arg(long, default_value_t = 0.0)]
    pub t0: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Directory of metrics CSV files.
    #[arg(long)]
    pub dir: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub flow: PathBuf,
    /// Magnitude mapped to full saturation; defaults to the field maximum.
    #[arg(long)]
    pub max_flow: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Reproducibility record of one invocation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub config: Vec<(String, String)>,
    pub inputs: Vec<(String, PathBuf)>,
    pub outputs: Vec<(String, PathBuf)>,
    /// Wall-clock milliseconds per stage; excluded from reproducibility checks.
    pub timings: Vec<(String, f64)>,
}

impl RunManifest {
    fn new(command: &str) -> Self {
        RunManifest { command: command.into(), ..Default::default() }
    }

    fn set(&mut self, key: &str, value: impl ToString) {
        self.config.push((key.into(), value.to_string()));
    }

    fn input(&mut self, key: &str, path: &Path) {
        self.inputs.push((key.into(), path.to_path_buf()));
    }

    fn output(&mut self, key: &str, path: &Path) {
        self.outputs.push((key.into(), path.to_path_buf()));
    }

    fn time(&mut self, stage: &str, start: Instant) {
        self.timings.push((stage.into(), start.elapsed().as_secs_f64() * 1e3));
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "command={}", self.command);
        let _ = writeln!(s, "version={}", env!("CARGO_PKG_VERSION"));
        for (k, v) in &self.config {
            let _ = writeln!(s, "config.{k}={v}");
        }
        for (k, p) in &self.inputs {
            let _ = writeln!(s, "input.{k}={}", p.display());
        }
        for (k, p) in &self.outputs {
            let _ = writeln!(s, "output.{k}={}", p.display());
        }
        for (k, ms) in &self.timings {
            let _ = writeln!(s, "timing.{k}_ms={ms:.3}");
        }
        s
    }

    /// Manifest text without wall-clock lines.
    pub fn stable_text(text: &str) -> String {
        text.lines().filter(|l| !l.starts_with("timing.")).map(|l| format!("{l}\n")).collect()
    }
}

fn manifest_beside(output: &Path) -> PathBuf {
    let mut s = output.as_os_str().to_owned();
    s.push(".manifest.txt");
    PathBuf::from(s)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| data_err(path, e))
}

fn read_kv(path: &Path) -> Result<KeyValues> {
    let text = fs::read_to_string(path).map_err(|e| data_err(path, e))?;
    KeyValues::parse(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn usage_if(cond: bool, msg: impl Into<String>) -> Result<()> {
    if cond {
        Err(CliError::Usage(msg.into()))
    } else {
        Ok(())
    }
}

/// Runs one invocation and returns its exit code. Errors go to stderr.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Dispatches a parsed command line.
pub fn execute(cli: &Cli) -> Result<()> {
    let (manifest, primary) = match &cli.command {
        Command::Simulate(a) => simulate(a)?,
        Command::Voxelize(a) => voxelize(a)?,
        Command::Stream(a) => stream(a)?,
        Command::Mocomp(a) => mocomp(a)?,
        Command::Eval(a) => eval(a)?,
        Command::Train(a) => train(a)?,
        Command::Infer(a) => infer(a)?,
        Command::Trajectory(a) => trajectory(a)?,
        Command::Report(a) => report(a)?,
        Command::Render(a) => render_cmd(a)?,
    };
    let text = manifest.to_text();
    match cli.manifest.clone().or(primary) {
        Some(path) => write_file(&path, text.as_bytes()),
        None => {
            eprint!("{text}");
            Ok(())
        }
    }
}

/// The manifest and where it goes by default (`None` for stderr).
type Outcome = (RunManifest, Option<PathBuf>);

fn simulate(a: &SimulateArgs) -> Result<Outcome> {
    let start = Instant::now();
    let mut m = RunManifest::new("simulate");
    usage_if(!(a.speed.is_finite()), "--speed must be finite")?;
    let geometry = SensorGeometry::new(a.width, a.height).map_err(|e| CliError::Usage(format!("--width/--height: {e}")))?;
    let (w, h) = (a.width as f64, a.height as f64);
    let motion = match a.motion {
        MotionKind::Const => {
            let r = a.angle.to_radians();
            MotionModel::ConstantVelocity { vx: a.speed * r.cos(), vy: a.speed * r.sin() }
        }
        MotionKind::Arc => MotionModel::CircularArc {
            cx: a.cx.unwrap_or((w - 1.0) / 2.0),
            cy: a.cy.unwrap_or((h - 1.0) / 2.0),
            omega: a.speed,
        },
    };
    let margin = 2.0;
    let pattern = match a.pattern {
        PatternKind::Random => ScenePattern::random_points(geometry, a.points, margin, a.seed),
        PatternKind::Lattice => ScenePattern::corner_lattice(geometry, 8.0, margin),
        PatternKind::Ring => ScenePattern::ring(geometry, (w - 1.0) / 2.0, (h - 1.0) / 2.0, w.min(h) / 4.0, 1.0),
    }
    .map_err(|e| CliError::Usage(format!("--pattern: {e}")))?;
    let opts = SimOptions { noise_rate: a.noise, seed: a.seed, ..SimOptions::default() };
    let window = generate_events_with(&pattern, &motion, a.duration, a.rate, &opts)
        .map_err(|e| CliError::Usage(format!("simulate: {e}")))?;
    save_events(&a.out, &window, EventFormat::from_path(&a.out)).map_err(|e| data_err(&a.out, e))?;
    for (k, v) in evaflow::simulate::describe_motion(&motion) {
        m.set(&format!("motion.{k}"), v);
    }
    m.set("pattern", format!("{:?}", a.pattern).to_lowercase());
    m.set("points", pattern.points.len());
    m.set("duration", a.duration);
    m.set("rate", a.rate);
    m.set("noise", a.noise);
    m.set("seed", a.seed);
    m.set("geometry", geometry);
    m.set("events", window.len());
    m.output("events", &a.out);
    if let Some(gt) = &a.gt_out {
        let flow = ground_truth_flow(&motion, 0.0, a.duration, geometry).map_err(|e| CliError::Usage(e.to_string()))?;
        save_flow(gt, &flow).map_err(|e| data_err(gt, e))?;
        m.output("gt", gt);
    }
    m.time("total", start);
    Ok((m, Some(manifest_beside(&a.out))))
}

fn load_window(path: &Path) -> Result<EventWindow> {
    load_events(path, EventFormat::from_path(path)).map_err(|e| data_err(path, e))
}

fn uvg_spec(a: &BinArgs, window: &EventWindow) -> Result<BinSpec> {
    usage_if(a.bins < 2, "--bins must be at least 2")?;
    let t0 = a.t0.unwrap_or_else(|| us_to_seconds(window.t_start()));
    let span = us_to_seconds(window.t_end()) - t0;
    let tau = match a.tau {
        Some(t) => t,
        None => span / (a.bins - 1) as f64,
    };
    BinSpec::new(a.bins, tau, t0, window.geometry()).map_err(|e| CliError::Usage(format!("--tau/--bins: {e}")))
}

fn grid_manifest(m: &mut RunManifest, grid: &Grid) {
    m.set("kind", format!("{:?}", grid.kind));
    m.set("bins", grid.bins());
    m.set("tau", grid.spec.tau);
    m.set("t0", grid.spec.t0);
    m.set("geometry", grid.geometry());
}

fn voxelize(a: &VoxelizeArgs) -> Result<Outcome> {
    let start = Instant::now();
    let mut m = RunManifest::new("voxelize");
    let window = load_window(&a.bin.input)?;
    m.time("load", start);
    let t = Instant::now();
    let grid = match a.kind {
        GridKindArg::Uvg => build_unified_voxel_grid(&window, &uvg_spec(&a.bin, &window)?),
        GridKindArg::Vg => {
            usage_if(a.bin.tau.is_some() || a.bin.t0.is_some(), "--tau/--t0 apply only to --kind uvg")?;
            build_voxel_grid(&window, a.bin.bins)
        }
    }
    .map_err(|e| data_err(&a.bin.input, e))?;
    m.time("build", t);
    save_grid(&a.bin.out, &grid).map_err(|e| data_err(&a.bin.out, e))?;
    grid_manifest(&mut m, &grid);
    m.set("events", window.len());
    m.input("events", &a.bin.input);
    m.output("grid", &a.bin.out);
    m.time("total", start);
    Ok((m, Some(manifest_beside(&a.bin.out))))
}

fn stream(a: &StreamArgs) -> Result<Outcome> {
    let start = Instant::now();
    let mut m = RunManifest::new("stream");
    let window = load_window(&a.bin.input)?;
    let spec = uvg_spec(&a.bin, &window)?;
    let t = Instant::now();
    let mut binner = StreamingBinner::new(spec);
    let mut emitted = Vec::with_capacity(spec.bins);
    // Record after how many events each bin became available.
    let mut emitted_at = Vec::with_capacity(spec.bins);
    for (i, e) in window.events().iter().enumerate() {
        for b in binner.push(e).map_err(|e| data_err(&a.bin.input, e))? {
            emitted_at.push(format!("{}@{}", b.index, i));
            emitted.push(b);
        }
    }
    for b in binner.finish().map_err(|e| data_err(&a.bin.input, e))? {
        emitted_at.push(format!("{}@end", b.index));
        emitted.push(b);
    }
    let grid = assemble_grid(spec, &emitted).map_err(|e| data_err(&a.bin.input, e))?;
    m.time("build", t);
    save_grid(&a.bin.out, &grid).map_err(|e| data_err(&a.bin.out, e))?;
    grid_manifest(&mut m, &grid);
    m.set("events", window.len());
    m.set("emitted", emitted_at.join(" "));
    m.input("events", &a.bin.input);
    m.output("grid", &a.bin.out);
    m.time("total", start);
    Ok((m, Some(manifest_beside(&a.bin.out))))
}

fn with_suffix(prefix: &Path, ext: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(ext);
    PathBuf::from(s)
}

fn mocomp(a: &MocompArgs) -> Result<Outcome> {
    let start = Instant::now();
    let mut m = RunManifest::new("mocomp");
    let window = load_window(&a.events)?;
    let flow = load_flow(&a.flow).map_err(|e| flow_err(&a.flow, e))?;
    let t_ref = a.tref.unwrap_or_else(|| us_to_seconds(window.t_start()));
    let ev = evaluate_warp(&window, &flow, t_ref).map_err(|e| data_err(&a.flow, e))?;
    let pgm = with_suffix(&a.out_prefix, ".pgm");
    let txt = with_suffix(&a.out_prefix, ".txt");
    let mut img = Vec::new();
    ev.compensated.write_pgm(&mut img).map_err(|e| data_err(&pgm, e))?;
    write_file(&pgm, &img)?;
    let fmt = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |v| format!("{v:.9}"));
    let stats = format!(
        "t_ref={t_ref}\nevents={}\nevents_kept={}\nvar_raw={:.9}\nvar_compensated={:.9}\nfwl={}\nrfwl={}\n",
        ev.compensated.n_total,
        ev.compensated.n_in,
        ev.var_raw,
        ev.var_compensated,
        fmt(ev.fwl),
        fmt(ev.rfwl)
    );
    write_file(&txt, stats.as_bytes())?;
    m.set("t_ref", t_ref);
    m.input("events", &a.events);
    m.input("flow", &a.flow);
    m.output("frame", &pgm);
    m.output("stats", &txt);
    m.time("total", start);
    Ok((m, Some(manifest_beside(&txt))))
}

fn eval(a: &EvalArgs) -> Result<Outcome> {
    let start = Instant::now();
    let mut m = RunManifest::new("eval");
    let pred = load_flow(&a.pred).map_err(|e| flow_err(&a.pred, e))?;
    let gt = load_flow(&a.gt).map_err(|e| flow_err(&a.gt, e))?;
    if !pred.is_finite() {
        return Err(CliError::Numeric(format!("{}: non-finite flow", a.pred.display())));
    }
    let ae = match a.ae_convention {
        AeConventionArg::ThreeD => AngularConvention::Homogeneous3d,
        AeConventionArg::TwoD => AngularConvention::Planar2d,
    };
    let outliers = match a.outliers {
        OutlierArg::Relative => OutlierConvention::AbsoluteAndRelative,
        OutlierArg::Absolute => OutlierConvention::AbsoluteOnly,
    };
    let r = EvalReport::compute(&pred, &gt, ae, outliers).map_err(|e| data_err(&a.pred, e))?;
    let table = format!("{METRICS_HEADER}\n{}\n", r.to_row());
    print!("{table}");
    m.set("ae_convention", format!("{ae:?}"));
    m.set("outliers", format!("{outliers:?}"));
    m.input("pred", &a.pred);
    m.input("gt", &a.gt);
    if let Some(out) = &a.out {
        write_file(out, table.as_bytes())?;
        m.output("metrics", out);
    }
    m.time("total", start);
    Ok((m, a.out.as_deref().map(manifest_beside)))
}

/// `(grid, target)` pairs from `<stem>.evgr` + `<stem>.evaf`, sorted by name.
fn load_dataset(dir: &Path) -> Result<Vec<TrainingSample>> {
    let mut grids: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| data_err(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "evgr"))
        .collect();
    grids.sort();
    if grids.is_empty() {
        return Err(data_err(dir, "no .evgr files"));
    }
    grids
        .iter()
        .map(|g| {
            let target_path = g.with_extension("evaf");
            let grid = load_grid(g).map_err(|e| data_err(g, e))?;
            let target = load_flow(&target_path).map_err(|e| flow_err(&target_path, e))?;
            if target.geometry() != grid.geometry() {
                return Err(data_err(&target_path, format!("is {}, grid is {}", target.geometry(), grid.geometry())));
            }
            Ok(TrainingSample { grid, target })
        })
        .collect()
}

fn train(a: &TrainArgs) -> Result<Outcome> {
    let start = Instant::now();
    let mut m = RunManifest::new("train");
    let samples = load_dataset(&a.data_dir)?;
    let mut kv = match &a.config {
        Some(p) => read_kv(p)?,
        None => KeyValues::default(),
    };
    let g = samples[0].grid.geometry();
    for (key, value) in [("bins", samples[0].grid.bins()), ("height", g.height as usize), ("width", g.width as usize)] {
        if kv.get(key).is_none() {
            kv.set(key, value);
        }
    }
    kv.set("seed", a.seed);
    if let Some(n) = a.iterations {
        kv.set("iterations", n);
    }
    let cfg_path = a.config.clone().unwrap_or_default();
    let model_cfg = ModelConfig::from_kv(&kv).map_err(|e| net_err(&cfg_path, e))?;
    let train_cfg = TrainConfig::from_kv(&kv).map_err(|e| net_err(&cfg_path, e))?;
    for s in &samples {
        if s.grid.bins() != model_cfg.bins || s.grid.geometry() != model_cfg.geometry() {
            return Err(data_err(&a.data_dir, "samples disagree with the model geometry/bins"));
        }
    }
    let mut model = Model::init(model_cfg.clone(), a.seed).map_err(|e| net_err(&cfg_path, e))?;
    let t = Instant::now();
    let report = network::train(&mut model, &samples, &train_cfg, |_, _| {}).map_err(|e| net_err(&a.data_dir, e))?;
    m.time("train", t);
    model.params.save(&a.out_params).map_err(|e| data_err(&a.out_params, e))?;
    let loss_path = with_suffix(&a.out_params, ".loss.csv");
    let mut curve = String::from("iteration,loss\n");
    for (i, l) in report.losses.iter().enumerate() {
        let _ = writeln!(curve, "{i},{l:.9}");
    }
    write_file(&loss_path, curve.as_bytes())?;
    let cfg_out = with_suffix(&a.out_params, ".config.txt");
    let mut resolved = KeyValues::default();
    model_cfg.write_kv(&mut resolved);
    train_cfg.write_kv(&mut resolved);
    write_file(&cfg_out, resolved.to_text().as_bytes())?;
    for line in resolved.to_text().lines() {
        if let Some((k, v)) = line.split_once('=') {
            m.set(k, v);
        }
    }
    m.set("samples", samples.len());
    m.set("parameters", model.params.count());
    m.set("final_loss", report.losses.last().map_or(f64::NAN, |l| *l));
    m.input("data_dir", &a.data_dir);
    if let Some(c) = &a.config {
        m.input("config", c);
    }
    m.output("params", &a.out_params);
    m.output("loss_curve", &loss_path);
    m.output("config", &cfg_out);
    m.time("total", start);
    Ok((m, Some(manifest_beside(&a.out_params))))
}

fn infer(a: &InferArgs) -> Result<Outcome> {
    let start = Instant::now();
    let mut m = RunManifest::new("infer");
    let grid = load_grid(&a.grid).map_err(|e| data_err(&a.grid, e))?;
    let params = ModelParams::load(&a.params).map_err(|e| data_err(&a.params, e))?;
    let g = grid.geometry();
    let config = match &a.config {
        Some(p) => {
            let mut kv = read_kv(p)?;
            kv.set("bins", grid.bins());
            kv.set("height", g.height);
            kv.set("width", g.width);
            ModelConfig::from_kv(&kv).map_err(|e| net_err(p, e))?
        }
        None => ModelConfig::from_params(&params, grid.bins(), g.height as usize, g.width as usize)
            .map_err(|e| data_err(&a.params, e))?,
    };
    let model = Model::new(config.clone(), params).map_err(|e| data_err(&a.params, e))?;
    let t = Instant::now();
    let seq = model.forward(&grid).map_err(|e| data_err(&a.grid, e))?;
    m.time("forward", t);
    if seq.flows.iter().any(|f| !f.is_finite()) {
        return Err(CliError::Numeric("network produced non-finite flow".into()));
    }
    fs::create_dir_all(&a.out_dir).map_err(|e| data_err(&a.out_dir, e))?;
    for (k, f) in seq.flows.iter().enumerate() {
        let p = a.out_dir.join(format!("flow_{:04}.evaf", k + 1));
        save_flow(&p, f).map_err(|e| data_err(&p, e))?;
    }
    let mut kv = KeyValues::default();
    config.write_kv(&mut kv);
    for line in kv.to_text().lines() {
        if let Some((k, v)) = line.split_once('=') {
            m.set(k, v);
        }
    }
    m.set("t0", seq.t0);
    m.set("tau", seq.tau);
    m.set("outputs", seq.len());
    m.input("grid", &a.grid);
    m.input("params", &a.params);
    m.output("flows", &a.out_dir);
    m.time("total", start);
    Ok((m, Some(a.out_dir.join("manifest.txt"))))
}

fn parse_seeds(spec: &str) -> Result<Vec<(f64, f64)>> {
    let text = if Path::new(spec).is_file() {
        fs::read_to_string(spec).map_err(|e| data_err(Path::new(spec), e))?
    } else {
        spec.replace(';', "\n")
    };
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            let (x, y) = l.split_once(',').ok_or_else(|| CliError::Usage(format!("--seeds: expected x,y, found {l:?}")))?;
            let p = |s: &str| s.trim().parse::<f64>().map_err(|e| CliError::Usage(format!("--seeds: {s:?}: {e}")));
            Ok((p(x)?, p(y)?))
        })
        .collect()
}

fn load_flow_dir(dir: &Path) -> Result<Vec<FlowField>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| data_err(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|e| e == "evaf")
                && p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("flow_"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(data_err(dir, "no flow_*.evaf files"));
    }
    paths.iter().map(|p| load_flow(p).map_err(|e| flow_err(p, e))).collect()
}

fn trajectory(a: &TrajectoryArgs) -> Result<Outcome> {
    let start = Instant::now();
    let mut m = RunManifest::new("trajectory");
    let seeds = parse_seeds(&a.seeds)?;
    usage_if(seeds.is_empty(), "--seeds: no seeds given")?;
    let flows = load_flow_dir(&a.flows_dir)?;
    let tau = flows[0].duration();
    let seq = FlowSequence::new(flows, a.t0, tau).map_err(|e| data_err(&a.flows_dir, e))?;
    let tracks = integrate_trajectory(&seq, &seeds);
    let mut csv = String::from("seed,j,t,x,y,out_of_bounds\n");
    for (s, track) in tracks.iter().enumerate() {
        let _ = writeln!(csv, "{s},0,{},{},{},{}", a.t0, seeds[s].0, seeds[s].1, track[0].out_of_bounds);
        for p in track {
            let t = a.t0 + seq.flows[p.j - 1].duration();
            let _ = writeln!(csv, "{s},{},{t},{:.6},{:.6},{}", p.j, p.x, p.y, p.out_of_bounds);
        }
    }
    write_file(&a.out, csv.as_bytes())?;
    m.set("seeds", seeds.len());
    m.set("steps", seq.len());
    m.set("t0", a.t0);
    m.input("flows_dir", &a.flows_dir);
    m.output("trajectories", &a.out);
    m.time("total", start);
    Ok((m, Some(manifest_beside(&a.out))))
}

fn report(a: &ReportArgs) -> Result<Outcome> {
    let start = Instant::now();
    let mut m = RunManifest::new("report");
    let mut files: Vec<PathBuf> = fs::read_dir(&a.dir)
        .map_err(|e| data_err(&a.dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .collect();
    files.sort();
    let mut table = format!("source,{METRICS_HEADER}\n");
    let mut rows = Vec::new();
    for f in &files {
        let text = fs::read_to_string(f).map_err(|e| data_err(f, e))?;
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(METRICS_HEADER) {
            continue;
        }
        for (n, line) in lines.filter(|l| !l.trim().is_empty()).enumerate() {
            let r = EvalReport::parse_row(line).ok_or_else(|| data_err(f, format!("bad metrics row {}", n + 2)))?;
            let name = f.file_name().unwrap_or_default().to_string_lossy();
            let _ = writeln!(table, "{name},{}", r.to_row());
            rows.push(r);
        }
    }
    if rows.is_empty() {
        return Err(data_err(&a.dir, "no metrics rows found"));
    }
    if let Some(mean) = EvalReport::merge(&rows) {
        let _ = writeln!(table, "mean,{}", mean.to_row());
    }
    match &a.out {
        Some(out) => {
            write_file(out, table.as_bytes())?;
            m.output("table", out);
        }
        None => {
            let _ = std::io::stdout().write_all(table.as_bytes());
        }
    }
    m.set("rows", rows.len());
    m.input("dir", &a.dir);
    m.time("total", start);
    Ok((m, a.out.as_deref().map(manifest_beside)))
}

fn render_cmd(a: &RenderArgs) -> Result<Outcome> {
    let start = Instant::now();
    let mut m = RunManifest::new("render");
    let flow = load_flow(&a.flow).map_err(|e| flow_err(&a.flow, e))?;
    if !flow.is_finite() {
        return Err(CliError::Numeric(format!("{}: non-finite flow", a.flow.display())));
    }
    let used = render_flow_image(&flow, a.max_flow, &a.out).map_err(|e| data_err(&a.out, e))?;
    m.set("max_flow", used);
    m.input("flow", &a.flow);
    m.output("image", &a.out);
    m.time("total", start);
    Ok((m, Some(manifest_beside(&a.out))))
}
