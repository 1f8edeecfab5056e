use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use lms_core::accounting::CostReport;
use lms_core::gradcheck::{block_suite, model_check, primitive_suite, FdOptions, MODEL_TOL, PRIMITIVE_TOL};
use lms_core::io::{load_volume, load_weights, save_volume, save_weights};
use lms_core::phantom::{generate_phantoms, PhantomSpec};
use lms_core::train::{TrainConfig, Trainer};
use lms_core::{HeadMode, InitScheme, LightMedSeg, ModelConfig};

#[derive(Parser, Debug)]
#[command(name = "lightmedseg", version, about = "Lightweight 3D segmentation network: costs, checks, training and inference")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the per-module parameter, MAC, FLOP and activation table.
    Summary(CostArgs),
    /// Emit the cost report as JSON.
    Flops(CostArgs),
    /// Segment an RV3D volume and write argmax labels as a single-channel RV3D.
    Predict(PredictArgs),
    /// Run finite-difference gradient checks in double precision.
    Gradcheck(GradcheckArgs),
    /// Train on synthetic phantoms.
    TrainToy(TrainArgs),
    /// Initialize weights and write them as LMSW.
    ExportWeights(ExportArgs),
    /// Validate an LMSW file against a model and list its entries.
    ImportWeights(ImportArgs),
    /// Write synthetic phantom volumes and labels as RV3D files.
    PhantomGen(PhantomArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Preset {
    Brats,
    Toy,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Mode {
    HeadRestores,
    StagesRestore,
}

impl From<Mode> for HeadMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::HeadRestores => HeadMode::HeadRestores,
            Mode::StagesRestore => HeadMode::StagesRestore,
        }
    }
}

#[derive(Args, Debug)]
struct ModelArgs {
    /// Model configuration as JSON; overrides --preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in configuration used when --config is absent.
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// Which component restores full resolution.
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    /// Number of anatomical anchors.
    #[arg(long)]
    anchors: Option<usize>,
    #[arg(long)]
    no_lspm: bool,
    #[arg(long)]
    no_anchors: bool,
    #[arg(long)]
    no_router: bool,
    #[arg(long)]
    no_ghost: bool,
}

impl ModelArgs {
    fn resolve(&self, default: Preset) -> Result<ModelConfig> {
        let mut cfg = match &self.config {
            Some(path) => ModelConfig::load(path).with_context(|| format!("loading config {}", path.display()))?,
            None => match self.preset.unwrap_or(default) {
                Preset::Brats => ModelConfig::brats(),
                Preset::Toy => ModelConfig::toy(),
            },
        };
        if let Some(m) = self.mode {
            cfg.head_mode = m.into();
        }
        if let Some(k) = self.anchors {
            cfg.anchors = k;
        }
        let ab = &mut cfg.ablations;
        ab.no_lspm |= self.no_lspm;
        ab.no_anchors |= self.no_anchors;
        ab.no_router |= self.no_router;
        ab.no_ghost |= self.no_ghost;
        cfg.validate()?;
        Ok(cfg)
    }

    fn model(&self, default: Preset) -> Result<LightMedSeg> {
        Ok(LightMedSeg::new(self.resolve(default)?)?)
    }
}

#[derive(Args, Debug)]
struct CostArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Cubic input extent.
    #[arg(long, default_value_t = 128)]
    size: usize,
    /// Bytes per activation element.
    #[arg(long, default_value_t = 4)]
    precision: usize,
    /// Write the report to a file instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    weights: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Cubic extent of the full-model check, rounded up to a multiple of 16.
    #[arg(long, default_value_t = 8)]
    size: usize,
    /// Entries probed per tensor in the full-model check.
    #[arg(long, default_value_t = 4)]
    probes: usize,
    /// Only run the full-model check.
    #[arg(long)]
    model_only: bool,
    /// Write the reports as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Training configuration as JSON; flags below override it.
    #[arg(long)]
    train_config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Cubic phantom extent.
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 20)]
    phantoms: usize,
    /// Stop at a window end once mean foreground Dice reaches this.
    #[arg(long)]
    target_dice: Option<f64>,
    /// Trained weights (LMSW).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-epoch log as JSON.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Use the perturbed initialization (nonzero gates and offsets).
    #[arg(long)]
    perturbed: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ImportArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    weights: PathBuf,
    /// Re-export the validated weights.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PhantomArgs {
    /// Phantom specification as JSON; --size and --seed are ignored when set.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    count: usize,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

fn write_output(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn cost_report(a: &CostArgs) -> Result<CostReport> {
    let model = a.model.model(Preset::Brats)?;
    let c = model.config.in_channels;
    Ok(CostReport::analyze(&model, [1, c, a.size, a.size, a.size], a.precision)?)
}

fn summary(a: &CostArgs) -> Result<()> {
    write_output(a.out.as_deref(), &cost_report(a)?.to_text())
}

fn flops(a: &CostArgs) -> Result<()> {
    let r = cost_report(a)?;
    write_output(a.out.as_deref(), &(r.to_json()? + "\n"))?;
    if a.out.is_some() {
        println!(
            "{:.3} GFLOPs (mac=2flop), {:.3} GFLOPs (mac=1flop), {} params",
            r.total_flops_mac2 as f64 / 1e9,
            r.total_flops_mac1 as f64 / 1e9,
            r.total_params
        );
    }
    Ok(())
}

fn predict(a: &PredictArgs) -> Result<()> {
    let model = a.model.model(Preset::Brats)?;
    let store = load_weights(&a.weights).with_context(|| format!("reading weights {}", a.weights.display()))?;
    model.check_store(&store)?;
    let vol = load_volume(&a.input).with_context(|| format!("reading volume {}", a.input.display()))?;
    let mut shape = vec![1];
    shape.extend_from_slice(vol.shape());
    let x = vol.reshape(shape)?;
    model.config.check_input(x.shape())?;
    let t = Instant::now();
    let labels = model.predict(&store, &x)?;
    let [_, d, h, w] = labels.dims();
    save_volume(&a.out, &labels.to_tensor::<f32>())?;
    let counts = labels.counts();
    println!("wrote {} ({d}x{h}x{w}) in {:.2?}; voxels per class {counts:?}", a.out.display(), t.elapsed());
    Ok(())
}

fn gradcheck(a: &GradcheckArgs) -> Result<bool> {
    let config = a.model.resolve(Preset::Toy)?;
    let mut reports = Vec::new();
    if !a.model_only {
        reports.extend(primitive_suite(FdOptions::new(PRIMITIVE_TOL, a.seed))?);
        reports.extend(block_suite(FdOptions::new(PRIMITIVE_TOL, a.seed))?);
    }
    let mut o = FdOptions::new(MODEL_TOL, a.seed);
    o.probes = a.probes;
    reports.push(model_check(a.size, config, o)?);
    for r in &reports {
        println!("{}", r.summary());
    }
    let failed = reports.iter().filter(|r| !r.passed()).count();
    println!("{} of {} checks passed", reports.len() - failed, reports.len());
    if let Some(p) = &a.out {
        std::fs::write(p, serde_json::to_string_pretty(&reports)?)?;
    }
    Ok(failed == 0)
}

fn train_toy(a: &TrainArgs) -> Result<()> {
    let model = a.model.model(Preset::Toy)?;
    let mut cfg = match &a.train_config {
        Some(p) => serde_json::from_str::<TrainConfig>(&std::fs::read_to_string(p)?)
            .with_context(|| format!("parsing {}", p.display()))?,
        None => TrainConfig::default(),
    };
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if a.target_dice.is_some() {
        cfg.target_dice = a.target_dice;
    }
    cfg.validate()?;
    let mut spec = PhantomSpec::single(a.size, cfg.seed);
    spec.num_classes = model.config.num_classes;
    if spec.num_classes > 2 {
        warn!("phantoms only paint class 1; classes 2..{} stay empty", spec.num_classes);
    }
    let data = generate_phantoms(&spec, a.phantoms)?;
    let store = model.init_params::<f32>(InitScheme::Standard, cfg.seed)?;
    info!("training {} params on {} phantoms at {}^3 for up to {} epochs", model.param_count()?, a.phantoms, a.size, cfg.epochs);
    let t = Instant::now();
    let mut trainer = Trainer::new(&model, store, cfg)?;
    let log = trainer.train(&data)?;
    for e in &log.epochs {
        let dice = e.dice.map(|d| format!(" dice {d:.4}")).unwrap_or_default();
        println!(
            "epoch {:>3} lr {:.3e} loss {:.4} (dice {:.4} ce {:.4} boundary {:.4}){dice}",
            e.epoch, e.lr, e.loss.total, e.loss.dice, e.loss.ce, e.loss.boundary
        );
    }
    match log.final_dice {
        Some(d) => println!("final foreground dice {d:.4} after {} epochs in {:.1?}", log.epochs.len(), t.elapsed()),
        None => println!("finished {} epochs in {:.1?}", log.epochs.len(), t.elapsed()),
    }
    if let Some(p) = &a.out {
        save_weights(p, &trainer.store)?;
    }
    if let Some(p) = &a.log {
        std::fs::write(p, serde_json::to_string_pretty(&log)?)?;
    }
    Ok(())
}

fn export_weights(a: &ExportArgs) -> Result<()> {
    let model = a.model.model(Preset::Brats)?;
    let scheme = if a.perturbed { InitScheme::Perturbed } else { InitScheme::Standard };
    let store = model.init_params::<f32>(scheme, a.seed)?;
    save_weights(&a.out, &store)?;
    println!("wrote {} tensors ({} values) to {}", store.len(), model.param_count()?, a.out.display());
    Ok(())
}

fn import_weights(a: &ImportArgs) -> Result<()> {
    let model = a.model.model(Preset::Brats)?;
    let store = load_weights(&a.weights).with_context(|| format!("reading weights {}", a.weights.display()))?;
    model.check_store(&store)?;
    let mut total = 0;
    for p in store.iter() {
        total += p.value.numel();
        println!("{:<48} {:?}", p.name, p.value.shape());
    }
    println!("{} tensors, {total} values match the model", store.len());
    if let Some(p) = &a.out {
        save_weights(p, &store)?;
    }
    Ok(())
}

fn phantom_gen(a: &PhantomArgs) -> Result<()> {
    let spec = match &a.spec {
        Some(p) => serde_json::from_str::<PhantomSpec>(&std::fs::read_to_string(p)?)
            .with_context(|| format!("parsing {}", p.display()))?,
        None => PhantomSpec::single(a.size, a.seed),
    };
    let phantoms = generate_phantoms(&spec, a.count)?;
    std::fs::create_dir_all(&a.out)?;
    for (i, p) in phantoms.iter().enumerate() {
        save_volume(a.out.join(format!("phantom_{i:03}_image.rv3d")), &p.volume)?;
        save_volume(a.out.join(format!("phantom_{i:03}_labels.rv3d")), &p.labels.to_tensor::<f32>())?;
    }
    println!("wrote {} phantoms to {}", phantoms.len(), a.out.display());
    Ok(())
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("LMS_THREADS") else {
        return Ok(());
    };
    let n: usize = v.trim().parse().with_context(|| format!("LMS_THREADS={v} is not a thread count"))?;
    if n == 0 {
        bail!("LMS_THREADS must be positive");
    }
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    configure_threads()?;
    match &cli.command {
        Command::Summary(a) => summary(a)?,
        Command::Flops(a) => flops(a)?,
        Command::Predict(a) => predict(a)?,
        Command::Gradcheck(a) => return gradcheck(a),
        Command::TrainToy(a) => train_toy(a)?,
        Command::ExportWeights(a) => export_weights(a)?,
        Command::ImportWeights(a) => import_weights(a)?,
        Command::PhantomGen(a) => phantom_gen(a)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if e.use_stderr() => {
            let _ = e.print();
            return ExitCode::from(1);
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: gradient check failed");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
