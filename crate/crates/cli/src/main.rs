//! `cop`: group prompting from the command line.
//!
//! Every flag can also be set through a `COP_`-prefixed environment variable;
//! `--config` files use the same JSON schema as the run directories' own
//! `config.json`. Flags win over the environment, which wins over the file.

use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use cop_core::fpr::{SelectionStrategy, Termination};
use cop_core::hsg::GatingVariant;
use cop_core::labels::LabelMap;
use cop_core::metrics::{aji_with, dice, simulate_clicks, AjiMatching, ClickMode};
use cop_core::tensor::ImagePoint;
use cop_harness::dataset::{self, DatasetSpec, SceneFiles};
use cop_harness::decoders::DecoderSpec;
use cop_harness::eval::{propagate, EvalOptions};
use cop_harness::extract::ExtractCommand;
use cop_harness::run::{run_ablation_matrix, run_evaluation, AblationConfig, RunConfig};
use cop_harness::synth::{generate, suite_spec, write_scene, SceneSpec};
use cop_service::ServiceConfig;
use serde::{Deserialize, Serialize};

#[derive(Parser, Debug)]
#[command(name = "cop", version, about = "Expand one click per cell type into prompts for every instance")]
struct Cli {
    /// More logging on stderr (-v info, -vv debug). RUST_LOG overrides.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic scenes with known cell types.
    Synth(SynthArgs),
    /// Propagate clicks on one image.
    Propagate(PropagateArgs),
    /// Evaluate a dataset or synthetic suite.
    Evaluate(EvaluateArgs),
    /// Run an ablation matrix.
    Ablate(AblateArgs),
    /// Start the HTTP service.
    Serve(ServeArgs),
    /// Run an external encoder to produce feature files for an image.
    Extract(ExtractArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, env = "COP_OUT")]
    out: PathBuf,
    #[arg(long, env = "COP_SCENES", default_value_t = 1)]
    scenes: usize,
    /// Scene spec JSON; the flags below override it.
    #[arg(long, env = "COP_SCENE_SPEC")]
    spec: Option<PathBuf>,
    #[arg(long, env = "COP_SEED")]
    seed: Option<u64>,
    #[arg(long, env = "COP_CELLS")]
    cells: Option<usize>,
    #[arg(long, env = "COP_TYPES")]
    types: Option<usize>,
    /// High grid size as `ROWSxCOLS` or a single number.
    #[arg(long, env = "COP_GRID")]
    grid: Option<String>,
    #[arg(long, env = "COP_CHANNELS")]
    channels: Option<usize>,
    #[arg(long, env = "COP_CONFOUND")]
    confound: Option<f64>,
    #[arg(long, env = "COP_NOISE")]
    noise: Option<f64>,
}

#[derive(Args, Debug, Default)]
struct SceneSpecArgs {
    /// Scene spec JSON for synthetic datasets.
    #[arg(long, env = "COP_SCENE_SPEC")]
    scene_spec: Option<PathBuf>,
    /// Base seed of synthetic scenes.
    #[arg(long, env = "COP_SCENE_SEED")]
    scene_seed: Option<u64>,
}

#[derive(Args, Debug, Default)]
struct DatasetArgs {
    /// Directory of `<stem>.fh.npy`/`<stem>.fl.npy`/`<stem>.gt.png` scenes.
    #[arg(long, env = "COP_DATASET", conflicts_with = "synthetic")]
    dataset: Option<PathBuf>,
    /// Number of synthetic scenes to generate and evaluate.
    #[arg(long, env = "COP_SYNTHETIC")]
    synthetic: Option<usize>,
    #[command(flatten)]
    spec: SceneSpecArgs,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DecoderKind {
    Reference,
    GroundTruth,
    Command,
}

#[derive(Args, Debug, Default)]
struct OptionArgs {
    #[arg(long, env = "COP_MAX_ITERATIONS")]
    max_iterations: Option<usize>,
    #[arg(long, env = "COP_DEDUP_RADIUS")]
    dedup_radius: Option<f64>,
    /// farthest, closest or midpoint.
    #[arg(long, env = "COP_SELECTION")]
    selection: Option<SelectionStrategy>,
    /// product, high_only or low_only.
    #[arg(long, env = "COP_GATING")]
    gating: Option<GatingVariant>,
    /// first_stagnation or exhaustive.
    #[arg(long, env = "COP_TERMINATION")]
    termination: Option<Termination>,
    /// per_type or per_instance.
    #[arg(long, env = "COP_CLICK_MODE")]
    click_mode: Option<ClickMode>,
    #[arg(long, env = "COP_CLICK_SEED")]
    click_seed: Option<u64>,
    /// exclusive or reusable.
    #[arg(long, env = "COP_AJI_MATCHING")]
    aji_matching: Option<AjiMatching>,
    #[arg(long, env = "COP_NMS_IOU")]
    nms_iou: Option<f64>,
    #[arg(long, env = "COP_DECODER", value_enum)]
    decoder: Option<DecoderKind>,
    /// Program and arguments for `--decoder command`, split on whitespace.
    #[arg(long, env = "COP_DECODER_COMMAND")]
    decoder_command: Option<String>,
}

impl OptionArgs {
    fn apply(&self, o: &mut EvalOptions) -> Result<()> {
        if let Some(v) = self.max_iterations {
            o.chain.max_iterations = v;
        }
        if let Some(v) = self.dedup_radius {
            o.chain.dedup_radius = v;
        }
        if let Some(v) = self.selection {
            o.chain.selection = v;
        }
        if let Some(v) = self.gating {
            o.chain.gating = v;
        }
        if let Some(v) = self.termination {
            o.chain.termination = v;
        }
        if let Some(v) = self.click_mode {
            o.click_mode = v;
        }
        if let Some(v) = self.click_seed {
            o.click_seed = v;
        }
        if let Some(v) = self.aji_matching {
            o.aji_matching = v;
        }
        if let Some(v) = self.nms_iou {
            o.nms_iou = v;
        }
        match (self.decoder, &self.decoder_command) {
            (Some(DecoderKind::Reference), _) => o.decoder = DecoderSpec::default(),
            (Some(DecoderKind::GroundTruth), _) => o.decoder = DecoderSpec::GroundTruth,
            (Some(DecoderKind::Command), None) => bail!("--decoder command needs --decoder-command"),
            (Some(DecoderKind::Command), Some(line)) | (None, Some(line)) => {
                let cmd = ExtractCommand::parse(line)?;
                o.decoder = DecoderSpec::Command {
                    program: cmd.program,
                    args: cmd.args,
                };
            }
            (None, None) => {}
        }
        o.chain.validate()?;
        Ok(())
    }
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Run config JSON (dataset, options, output_dir).
    #[arg(long, env = "COP_CONFIG")]
    config: Option<PathBuf>,
    #[arg(long, env = "COP_OUT")]
    out: Option<PathBuf>,
    #[command(flatten)]
    dataset: DatasetArgs,
    #[command(flatten)]
    options: OptionArgs,
}

#[derive(Args, Debug)]
struct AblateArgs {
    /// Ablation config JSON (a run config plus `axes`).
    #[arg(long, env = "COP_CONFIG")]
    config: Option<PathBuf>,
    #[arg(long, env = "COP_OUT")]
    out: Option<PathBuf>,
    #[command(flatten)]
    dataset: DatasetArgs,
    #[command(flatten)]
    options: OptionArgs,
    /// Values of max_iterations to sweep, comma separated.
    #[arg(long, env = "COP_AXIS_MAX_ITERATIONS", value_delimiter = ',')]
    axis_max_iterations: Vec<usize>,
    #[arg(long, env = "COP_AXIS_TERMINATION", value_delimiter = ',')]
    axis_termination: Vec<Termination>,
    #[arg(long, env = "COP_AXIS_SELECTION", value_delimiter = ',')]
    axis_selection: Vec<SelectionStrategy>,
    #[arg(long, env = "COP_AXIS_GATING", value_delimiter = ',')]
    axis_gating: Vec<GatingVariant>,
    /// Click seeds to sweep, comma separated.
    #[arg(long, env = "COP_AXIS_SEEDS", value_delimiter = ',', conflicts_with = "seed_count")]
    axis_seeds: Vec<u64>,
    /// Sweep click seeds 0..N.
    #[arg(long, env = "COP_SEED_COUNT")]
    seed_count: Option<u64>,
}

#[derive(Args, Debug)]
struct PropagateArgs {
    #[arg(long, env = "COP_FH")]
    fh: PathBuf,
    #[arg(long, env = "COP_FL")]
    fl: PathBuf,
    /// Ground truth (PNG or npy); enables simulated clicks and metrics.
    #[arg(long, env = "COP_GT")]
    gt: Option<PathBuf>,
    #[arg(long, env = "COP_TYPES")]
    types: Option<PathBuf>,
    /// A click as `x,y,type`; repeatable.
    #[arg(long = "click", value_parser = parse_click)]
    clicks: Vec<ClickSpec>,
    /// JSON file with `[{"x":..,"y":..,"type_id":..}, ...]`.
    #[arg(long, env = "COP_CLICKS")]
    clicks_file: Option<PathBuf>,
    /// Simulate clicks from the ground truth instead.
    #[arg(long, env = "COP_SIMULATE")]
    simulate: Option<ClickMode>,
    #[arg(long, env = "COP_OUT")]
    out: Option<PathBuf>,
    #[command(flatten)]
    options: OptionArgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
struct ClickSpec {
    x: i64,
    y: i64,
    type_id: u32,
}

fn parse_click(s: &str) -> Result<ClickSpec, String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let [x, y, t] = parts.as_slice() else {
        return Err(format!("expected `x,y,type`, got `{s}`"));
    };
    let num = |v: &str| v.parse::<i64>().map_err(|_| format!("`{v}` is not an integer"));
    Ok(ClickSpec {
        x: num(x)?,
        y: num(y)?,
        type_id: t.parse().map_err(|_| format!("`{t}` is not a cell type id"))?,
    })
}

#[derive(Args, Debug)]
struct ServeArgs {
    #[arg(long, env = "COP_ADDR", default_value = "127.0.0.1:8080")]
    addr: SocketAddr,
    /// Service config JSON; the flags below override it.
    #[arg(long, env = "COP_CONFIG")]
    config: Option<PathBuf>,
    #[arg(long, env = "COP_MAX_SESSIONS")]
    max_sessions: Option<usize>,
    #[arg(long, env = "COP_MAX_UPLOAD_MB")]
    max_upload_mb: Option<usize>,
    /// Encoder command for image-only uploads, with `{image}`, `{fh}`, `{fl}`.
    #[arg(long, env = "COP_EXTRACT")]
    extract: Option<String>,
    #[command(flatten)]
    options: OptionArgs,
}

#[derive(Args, Debug)]
struct ExtractArgs {
    /// Encoder command with `{image}`, `{fh}` and `{fl}` placeholders.
    #[arg(long, env = "COP_EXTRACT")]
    command: String,
    #[arg(long)]
    image: PathBuf,
    #[arg(long, env = "COP_OUT")]
    out: PathBuf,
    /// File stem; defaults to the image's.
    #[arg(long)]
    stem: Option<String>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn print_json(value: &impl Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn parse_grid(s: &str) -> Result<(usize, usize)> {
    let parse = |v: &str| v.trim().parse::<usize>().with_context(|| format!("bad grid size `{s}`"));
    match s.split_once(['x', 'X']) {
        Some((r, c)) => Ok((parse(r)?, parse(c)?)),
        None => {
            let n = parse(s)?;
            Ok((n, n))
        }
    }
}

fn synth(args: SynthArgs) -> Result<()> {
    let mut spec: SceneSpec = match &args.spec {
        Some(p) => read_json(p)?,
        None => SceneSpec::default(),
    };
    if let Some(v) = args.seed {
        spec.seed = v;
    }
    if let Some(v) = args.cells {
        spec.cells = v;
    }
    if let Some(v) = args.types {
        spec.types = v;
    }
    if let Some(g) = &args.grid {
        (spec.grid_rows, spec.grid_cols) = parse_grid(g)?;
    }
    if let Some(v) = args.channels {
        spec.channels = v;
    }
    if let Some(v) = args.confound {
        spec.confound = v;
    }
    if let Some(v) = args.noise {
        spec.noise = v;
    }
    spec.validate()?;
    let mut written = Vec::new();
    for i in 0..args.scenes {
        let s = suite_spec(&spec, i);
        let scene = generate(&s)?;
        let stem = format!("synth-{:04}", s.seed);
        write_scene(&scene, &args.out, &stem)?;
        tracing::info!(%stem, cells = scene.manifest.cells.len(), "wrote scene");
        written.push(stem);
    }
    print_json(&serde_json::json!({ "out": args.out, "scenes": written }))
}

fn apply_dataset(args: &DatasetArgs, dataset: &mut DatasetSpec) -> Result<()> {
    if let Some(dir) = &args.dataset {
        *dataset = DatasetSpec::Directory { path: dir.clone() };
    }
    let wants_synthetic = args.synthetic.is_some() || args.spec.scene_spec.is_some() || args.spec.scene_seed.is_some();
    if wants_synthetic {
        let (mut scenes, mut spec) = match dataset {
            DatasetSpec::Synthetic { scenes, spec } => (*scenes, spec.clone()),
            _ if args.dataset.is_some() => bail!("--scene-spec/--scene-seed only apply to synthetic datasets"),
            _ => (100, SceneSpec::default()),
        };
        if let Some(n) = args.synthetic {
            scenes = n;
        }
        if let Some(p) = &args.spec.scene_spec {
            spec = read_json(p)?;
        }
        if let Some(seed) = args.spec.scene_seed {
            spec.seed = seed;
        }
        *dataset = DatasetSpec::Synthetic { scenes, spec };
    }
    Ok(())
}

fn evaluate(args: EvaluateArgs) -> Result<()> {
    let mut config = match &args.config {
        Some(p) => RunConfig::read(p)?,
        None => RunConfig::default(),
    };
    apply_dataset(&args.dataset, &mut config.dataset)?;
    args.options.apply(&mut config.options)?;
    if args.out.is_some() {
        config.output_dir = args.out.clone();
    }
    let out = run_evaluation(&config)?;
    print_json(&serde_json::json!({
        "scenes": out.report.scenes.len(),
        "mean": out.report.mean,
        "min_iteration_precision": out.report.min_iteration_precision,
        "output_dir": config.output_dir,
    }))
}

fn ablate(args: AblateArgs) -> Result<()> {
    let config = match &args.config {
        Some(p) => AblationConfig::read(p)?,
        None => AblationConfig::default(),
    };
    let (mut run, mut axes) = config.split();
    apply_dataset(&args.dataset, &mut run.dataset)?;
    args.options.apply(&mut run.options)?;
    if args.out.is_some() {
        run.output_dir = args.out.clone();
    }
    if !args.axis_max_iterations.is_empty() {
        axes.max_iterations = args.axis_max_iterations.clone();
    }
    if !args.axis_termination.is_empty() {
        axes.termination = args.axis_termination.clone();
    }
    if !args.axis_selection.is_empty() {
        axes.selection = args.axis_selection.clone();
    }
    if !args.axis_gating.is_empty() {
        axes.gating = args.axis_gating.clone();
    }
    if !args.axis_seeds.is_empty() {
        axes.seeds = args.axis_seeds.clone();
    }
    if let Some(n) = args.seed_count {
        axes.seeds = (0..n).collect();
    }
    let table = run_ablation_matrix(&run, &axes)?;
    print_json(&table.cells)
}

#[derive(Serialize)]
struct PropagateMetrics {
    aji: f64,
    dice: f64,
    point_precision: f64,
    point_recall: f64,
}

fn propagate_cmd(args: PropagateArgs) -> Result<()> {
    let files = SceneFiles {
        high: args.fh.clone(),
        low: args.fl.clone(),
        gt: args.gt.clone(),
        types: args.types.clone(),
        image: None,
    };
    let scene = dataset::load(&DatasetSpec::Files(files))?.remove(0);
    let mut opts = EvalOptions::default();
    args.options.apply(&mut opts)?;

    let mut clicks: Vec<ClickSpec> = args.clicks.clone();
    if let Some(p) = &args.clicks_file {
        clicks.extend(read_json::<Vec<ClickSpec>>(p)?);
    }
    let mut points = Vec::with_capacity(clicks.len());
    for c in &clicks {
        points.push((ImagePoint::try_from_signed(c.x, c.y)?, c.type_id));
    }
    if let Some(mode) = args.simulate {
        let gt = scene.gt.as_ref().context("--simulate needs --gt")?;
        points.extend(
            simulate_clicks(gt, mode, opts.click_seed)?
                .into_iter()
                .map(|c| (c.point, c.cell_type)),
        );
    }
    if points.is_empty() {
        bail!("no clicks given (use --click, --clicks-file or --simulate)");
    }

    let p = propagate(&scene, &points, &opts)?;
    let metrics = match &scene.gt {
        Some(gt) => {
            let scores: Vec<_> = p.types.iter().filter_map(|t| t.score.as_ref()).collect();
            let tp: usize = scores.iter().map(|s| s.true_positives).sum();
            let n: usize = scores.iter().map(|s| s.points).sum();
            let inst: usize = scores.iter().map(|s| s.instances).sum();
            Some(PropagateMetrics {
                aji: aji_with(gt, &p.label_map, opts.aji_matching)?,
                dice: dice(gt, &p.label_map)?,
                point_precision: if n == 0 { 1.0 } else { tp as f64 / n as f64 },
                point_recall: if inst == 0 { 0.0 } else { tp as f64 / inst as f64 },
            })
        }
        None => None,
    };
    if let Some(dir) = &args.out {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        fs::write(dir.join("points.json"), serde_json::to_string_pretty(&p.types)? + "\n")?;
        write_label_map(&p.label_map, &dir.join("pred.png"))?;
    }
    print_json(&serde_json::json!({
        "clicks": points.len(),
        "types": p.types.iter().map(|t| serde_json::json!({
            "type_id": t.cell_type,
            "points": t.reliable.len(),
            "probes": t.traces.iter().map(|tr| tr.probes()).sum::<usize>(),
        })).collect::<Vec<_>>(),
        "masks": p.kept.len(),
        "decode_failures": p.decode_failures.len(),
        "metrics": metrics,
    }))
}

fn write_label_map(map: &LabelMap, path: &Path) -> Result<()> {
    map.write_png(path).with_context(|| format!("writing {}", path.display()))
}

async fn serve(args: ServeArgs) -> Result<()> {
    let mut config: ServiceConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => ServiceConfig::default(),
    };
    if let Some(v) = args.max_sessions {
        config.max_sessions = v;
    }
    if let Some(mb) = args.max_upload_mb {
        config.max_upload_bytes = mb << 20;
    }
    if let Some(line) = &args.extract {
        config.extract = Some(ExtractCommand::parse(line)?);
    }
    let mut opts = EvalOptions {
        chain: config.chain,
        nms_iou: config.nms_iou,
        ..EvalOptions::default()
    };
    args.options.apply(&mut opts)?;
    config.chain = opts.chain;
    config.nms_iou = opts.nms_iou;
    cop_service::serve(args.addr, config).await?;
    Ok(())
}

fn extract(args: ExtractArgs) -> Result<()> {
    let cmd = ExtractCommand::parse(&args.command)?;
    let stem = match &args.stem {
        Some(s) => s.clone(),
        None => args
            .image
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .context("image path has no file name")?,
    };
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let (pair, fh, fl) = cmd.run(&args.image, &args.out, &stem)?;
    print_json(&serde_json::json!({
        "fh": fh,
        "fl": fl,
        "grid": [pair.rows(), pair.cols()],
        "channels": pair.high().channels(),
    }))
}

fn init_logging(verbose: u8) {
    use tracing_subscriber::EnvFilter;
    let default = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let filter = EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new(default));
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .init();
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    init_logging(cli.verbose);
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Propagate(a) => propagate_cmd(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Ablate(a) => ablate(a),
        Command::Serve(a) => tokio::runtime::Runtime::new()?.block_on(serve(a)),
        Command::Extract(a) => extract(a),
    }
}
