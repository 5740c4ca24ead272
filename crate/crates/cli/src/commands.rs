use std::path::PathBuf;

use clap::{Args, Subcommand, ValueEnum};
use prenet_core::data::{
    generate_clean_image, load_image, save_image, scan_dataset, synthesize_pair, ImagePair,
    PairNaming, RainParams,
};
use prenet_core::loss::{psnr, ssim_value, LossSpec, SsimSettings};
use prenet_core::net::{
    self, load_checkpoint, CellKind, InputMode, NetworkConfig, OutputMode, ParameterSet,
};
use prenet_core::train::{train, TrainConfig};
use prenet_core::{Error, Result, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Subcommand)]
pub enum Command {
    /// Print the parameter count and per-component breakdown of a network.
    Params(ParamsArgs),
    /// Remove rain from an image with a trained model.
    Derain(DerainArgs),
    /// Evaluate a model over a paired dataset (PSNR/SSIM per image).
    Eval(EvalArgs),
    /// Train a network on a paired dataset.
    Train(TrainArgs),
    /// Generate a synthetic rain dataset.
    Synth(SynthArgs),
}

impl Command {
    pub fn run(&self) -> Result<()> {
        match self {
            Command::Params(a) => run_params(a),
            Command::Derain(a) => run_derain(a),
            Command::Eval(a) => run_eval(a),
            Command::Train(a) => run_train(a),
            Command::Synth(a) => run_synth(a),
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Arch {
    Prn,
    Prenet,
    #[value(name = "prn-r")]
    PrnR,
    #[value(name = "prenet-r")]
    PrenetR,
}

impl Arch {
    fn config(self) -> NetworkConfig {
        match self {
            Arch::Prn => NetworkConfig::prn(),
            Arch::Prenet => NetworkConfig::prenet(),
            Arch::PrnR => NetworkConfig::prn_r(),
            Arch::PrenetR => NetworkConfig::prenet_r(),
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum CellArg {
    None,
    Lstm,
    Gru,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum InputModeArg {
    #[value(name = "concat-y")]
    ConcatY,
    #[value(name = "x-only")]
    XOnly,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum OutputModeArg {
    Residual,
    Direct,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum NamingArg {
    /// rain/X pairs with norain/X
    Same,
    /// rain/rain-X pairs with norain/norain-X
    Prefixed,
}

impl NamingArg {
    fn naming(self) -> PairNaming {
        match self {
            NamingArg::Same => PairNaming::Same,
            NamingArg::Prefixed => PairNaming::Prefixed,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum LossArg {
    Mse,
    /// negative SSIM on the final stage
    Ssim,
    /// per-stage negative SSIM (recursive supervision)
    #[value(name = "rec-ssim")]
    RecSsim,
}

/// Shared network-shape flags.
#[derive(Args, Debug)]
struct NetFlags {
    /// Architecture preset.
    #[arg(long, value_enum, default_value = "prenet")]
    arch: Arch,
    /// Recurrent cell override (the preset picks lstm or none).
    #[arg(long, value_enum)]
    cell: Option<CellArg>,
    /// Stage count T (weight-shared recursion depth).
    #[arg(long)]
    stages: Option<usize>,
    /// Feature channels.
    #[arg(long)]
    channels: Option<usize>,
    /// ResBlock applications per stage.
    #[arg(long)]
    resblock_count: Option<usize>,
    /// Stage input: current estimate concatenated with the rainy image, or
    /// the estimate alone.
    #[arg(long, value_enum)]
    input_mode: Option<InputModeArg>,
    /// Head output: residual added to the input, or the image directly.
    #[arg(long, value_enum)]
    output_mode: Option<OutputModeArg>,
}

impl NetFlags {
    fn config(&self) -> NetworkConfig {
        let mut cfg = self.arch.config();
        if let Some(c) = self.cell {
            cfg.recurrent_cell = match c {
                CellArg::None => CellKind::None,
                CellArg::Lstm => CellKind::Lstm,
                CellArg::Gru => CellKind::Gru,
            };
        }
        if let Some(t) = self.stages {
            cfg.stages_t = t;
        }
        if let Some(c) = self.channels {
            cfg.channels = c;
        }
        if let Some(r) = self.resblock_count {
            cfg.resblock_count = r;
        }
        if let Some(m) = self.input_mode {
            cfg.input_mode = match m {
                InputModeArg::ConcatY => InputMode::ConcatY,
                InputModeArg::XOnly => InputMode::XOnly,
            };
        }
        if let Some(m) = self.output_mode {
            cfg.output_mode = match m {
                OutputModeArg::Residual => OutputMode::Residual,
                OutputModeArg::Direct => OutputMode::Direct,
            };
        }
        cfg
    }
}

// ── params ───────────────────────────────────────────────────────────

#[derive(Args, Debug)]
pub struct ParamsArgs {
    #[command(flatten)]
    net: NetFlags,
}

fn run_params(args: &ParamsArgs) -> Result<()> {
    let cfg = args.net.config();
    cfg.validate()?;
    // The breakdown deliberately omits the stage count: parameters are
    // shared across stages, so T never changes these numbers.
    let params = ParameterSet::<f32>::zeros(&cfg)?;
    for (name, count) in params.component_counts() {
        println!("{name}\t{count}");
    }
    let total = net::count_parameters(&cfg);
    debug_assert_eq!(total, params.total_parameters());
    println!("total\t{total}");
    Ok(())
}

// ── derain ───────────────────────────────────────────────────────────

#[derive(Args, Debug)]
pub struct DerainArgs {
    /// Trained checkpoint (.prnc).
    #[arg(long)]
    model: PathBuf,
    /// Rainy input image (8-bit RGB PNG).
    #[arg(long)]
    input: PathBuf,
    /// Output path for the derained image.
    #[arg(long)]
    output: PathBuf,
    /// Truncate inference after this stage (1..=T).
    #[arg(long)]
    stop_at_stage: Option<usize>,
    /// Also write every stage estimate x^1..x^T into this directory.
    #[arg(long)]
    dump_stages: Option<PathBuf>,
}

fn run_derain(args: &DerainArgs) -> Result<()> {
    let (params, cfg) = load_checkpoint(&args.model).map_err(|e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(
            io.kind(),
            format!("{}: {io}", args.model.display()),
        )),
        other => other,
    })?;
    if let Some(t) = args.stop_at_stage {
        if t < 1 || t > cfg.stages_t {
            return Err(Error::Config(format!(
                "--stop-at-stage {t} outside 1..={}",
                cfg.stages_t
            )));
        }
    }
    let rainy: Tensor<f32> = load_image(&args.input)?;

    // Dumping wants the full trace; the final output honors the truncation
    // either way (the truncated run is a bitwise prefix of the full one).
    let run_to = if args.dump_stages.is_some() {
        None
    } else {
        args.stop_at_stage
    };
    let trace = net::forward(&params, &cfg, &rainy, run_to)?;

    if let Some(dir) = &args.dump_stages {
        std::fs::create_dir_all(dir)?;
        for (i, estimate) in trace.estimates.iter().enumerate() {
            save_image(estimate, &dir.join(format!("stage_{}.png", i + 1)))?;
        }
    }
    let pick = args.stop_at_stage.unwrap_or(trace.estimates.len());
    save_image(&trace.estimates[pick - 1], &args.output)?;
    eprintln!(
        "derained {} -> {} ({} stage(s))",
        args.input.display(),
        args.output.display(),
        pick
    );
    Ok(())
}

// ── eval ─────────────────────────────────────────────────────────────

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Trained checkpoint (.prnc).
    #[arg(long)]
    model: PathBuf,
    /// Dataset root containing rain/ and norain/.
    #[arg(long)]
    data: PathBuf,
    /// Filename pairing scheme.
    #[arg(long, value_enum, default_value = "same")]
    naming: NamingArg,
    /// Fail on orphan files or dimension mismatches.
    #[arg(long)]
    strict: bool,
}

fn run_eval(args: &EvalArgs) -> Result<()> {
    let (params, cfg) = load_checkpoint(&args.model)?;
    let (dataset, report) = scan_dataset(&args.data, args.naming.naming(), args.strict)?;
    if !report.is_clean() {
        eprintln!("warning: dataset problems ignored (non-strict): {report:?}");
    }
    if dataset.is_empty() {
        return Err(Error::Config(format!(
            "dataset {} has no usable pairs",
            args.data.display()
        )));
    }
    let settings = SsimSettings::default();
    let mut psnr_sum = 0.0;
    let mut ssim_sum = 0.0;
    for entry in &dataset.pairs {
        let rainy: Tensor<f32> = load_image(&entry.rain)?;
        let clean: Tensor<f32> = load_image(&entry.norain)?;
        let trace = net::forward(&params, &cfg, &rainy, None)?;
        let derained = trace.final_estimate().clamped(0.0, 1.0);
        let p = psnr(&derained, &clean)?;
        let s = ssim_value(&derained, &clean, &settings)?;
        psnr_sum += p;
        ssim_sum += s;
        println!("{}\t{p}\t{s}", entry.name);
    }
    let n = dataset.len() as f64;
    println!("mean\t{}\t{}", psnr_sum / n, ssim_sum / n);
    Ok(())
}

// ── train ────────────────────────────────────────────────────────────

fn parse_usize_list(s: &str) -> Result<Vec<usize>> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|e| Error::Config(format!("bad integer list `{s}`: {e}")))
        })
        .collect()
}

fn parse_f64_list(s: &str) -> Result<Vec<f64>> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|e| Error::Config(format!("bad number list `{s}`: {e}")))
        })
        .collect()
}

fn parse_range(s: &str) -> std::result::Result<(f64, f64), String> {
    let (lo, hi) = s
        .split_once(',')
        .ok_or_else(|| format!("expected `lo,hi`, got `{s}`"))?;
    Ok((
        lo.trim().parse().map_err(|e| format!("{e}"))?,
        hi.trim().parse().map_err(|e| format!("{e}"))?,
    ))
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    net: NetFlags,
    /// Dataset root containing rain/ and norain/.
    #[arg(long, default_value = "data")]
    data: PathBuf,
    /// Output directory for checkpoints and the metrics log.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Training objective.
    #[arg(long, value_enum, default_value = "ssim")]
    loss: LossArg,
    /// Comma-separated stage weights for --loss rec-ssim (defaults to 0.5
    /// per intermediate stage and 1.5 for the final one).
    #[arg(long)]
    lambdas: Option<String>,
    /// Square patch size.
    #[arg(long, default_value_t = 100)]
    patch: usize,
    /// Batch size.
    #[arg(long, default_value_t = 18)]
    batch: usize,
    /// Training epochs.
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    /// Initial learning rate.
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Comma-separated epochs at which the learning rate decays (empty
    /// string disables decay).
    #[arg(long, default_value = "30,50,80")]
    milestones: String,
    /// Multiplicative decay applied at each milestone.
    #[arg(long, default_value_t = 0.2)]
    decay: f64,
    /// Seed for initialization and batch sampling.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Scheduled checkpoint interval in epochs (0 disables).
    #[arg(long, default_value_t = 10)]
    checkpoint_every: usize,
    /// Leading pairs evaluated after each epoch (0 disables).
    #[arg(long, default_value_t = 2)]
    val_pairs: usize,
    /// Resume from a checkpoint carrying trainer state.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Filename pairing scheme.
    #[arg(long, value_enum, default_value = "same")]
    naming: NamingArg,
    /// Fail on dataset problems or undersized images.
    #[arg(long)]
    strict: bool,
}

fn run_train(args: &TrainArgs) -> Result<()> {
    let net_cfg = args.net.config();
    let loss_spec = match args.loss {
        LossArg::Mse => LossSpec::Mse,
        LossArg::Ssim => LossSpec::NegSsim,
        LossArg::RecSsim => LossSpec::RecNegSsim {
            lambdas: match &args.lambdas {
                Some(list) => parse_f64_list(list)?,
                None => LossSpec::published_lambdas(net_cfg.stages_t),
            },
        },
    };
    let train_cfg = TrainConfig {
        patch_size: args.patch,
        batch_size: args.batch,
        epochs: args.epochs,
        lr_initial: args.lr,
        lr_milestones: parse_usize_list(&args.milestones)?,
        lr_decay: args.decay,
        seed: args.seed,
        checkpoint_every: args.checkpoint_every,
        val_pairs: args.val_pairs,
        strict_patches: args.strict,
        ..TrainConfig::default()
    };

    // Startup banner (stderr) echoing the effective configuration.
    eprintln!("prenet train");
    eprintln!(
        "  net: cell={} resblocks={} x{} channels={} stages={} input={} output={}",
        net_cfg.recurrent_cell.as_str(),
        net_cfg.resblock_mode.as_str(),
        net_cfg.resblock_count,
        net_cfg.channels,
        net_cfg.stages_t,
        net_cfg.input_mode.as_str(),
        net_cfg.output_mode.as_str(),
    );
    eprintln!("  loss: {}", loss_spec.name());
    if let LossSpec::RecNegSsim { lambdas } = &loss_spec {
        eprintln!("  lambdas: {lambdas:?}");
    }
    eprintln!(
        "  patch: {}  batch: {}  epochs: {}",
        train_cfg.patch_size, train_cfg.batch_size, train_cfg.epochs
    );
    eprintln!(
        "  lr: {}  milestones: {}  decay: {}",
        train_cfg.lr_initial,
        train_cfg
            .lr_milestones
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(","),
        train_cfg.lr_decay
    );
    eprintln!(
        "  adam: beta1={} beta2={} eps={}",
        train_cfg.adam_beta1, train_cfg.adam_beta2, train_cfg.adam_eps
    );
    eprintln!(
        "  seed: {}  checkpoint-every: {}  val-pairs: {}",
        train_cfg.seed, train_cfg.checkpoint_every, train_cfg.val_pairs
    );
    eprintln!("  data: {}  out: {}", args.data.display(), args.out.display());

    // With zero epochs only the initialization checkpoint is produced; no
    // dataset is touched.
    let dataset: Vec<ImagePair<f32>> = if args.epochs == 0 {
        Vec::new()
    } else {
        let (manifest, report) = scan_dataset(&args.data, args.naming.naming(), args.strict)?;
        if !report.is_clean() {
            eprintln!("warning: dataset problems ignored (non-strict): {report:?}");
        }
        eprintln!("  pairs: {}", manifest.len());
        manifest.load()?
    };

    let outcome = train(
        &net_cfg,
        &train_cfg,
        &loss_spec,
        &dataset,
        &args.out,
        args.resume.as_deref(),
    )?;
    if let (Some(first), Some(last)) = (outcome.first_loss, outcome.last_loss) {
        eprintln!("loss: {first} -> {last}");
    }
    println!("{}", outcome.final_checkpoint.display());
    Ok(())
}

// ── synth ────────────────────────────────────────────────────────────

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Output dataset root (rain/ and norain/ are created inside).
    #[arg(long)]
    out: PathBuf,
    /// Number of pairs to generate.
    #[arg(long, default_value_t = 8)]
    count: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    /// Streaks per image (0 gives rainy == clean).
    #[arg(long, default_value_t = 60)]
    streaks: usize,
    /// Streak angle range in degrees from vertical, as `lo,hi`.
    #[arg(long, value_parser = parse_range, default_value = "-20,20")]
    angle: (f64, f64),
    /// Streak length range in pixels, as `lo,hi`.
    #[arg(long, value_parser = parse_range, default_value = "8,20")]
    length: (f64, f64),
    /// Streak width range in pixels, as `lo,hi`.
    #[arg(long, value_parser = parse_range, default_value = "1,2")]
    width_px: (f64, f64),
    /// Streak intensity range in (0, 0.8], as `lo,hi`.
    #[arg(long, value_parser = parse_range, default_value = "0.1,0.4")]
    intensity: (f64, f64),
    /// Gaussian blur sigma applied to the rain layer.
    #[arg(long, default_value_t = 0.5)]
    blur: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Rain existing clean images instead of generating procedural ones.
    #[arg(long)]
    clean_dir: Option<PathBuf>,
}

fn run_synth(args: &SynthArgs) -> Result<()> {
    if args.count == 0 {
        return Err(Error::Config("--count must be positive".into()));
    }
    let rain_dir = args.out.join("rain");
    let norain_dir = args.out.join("norain");
    std::fs::create_dir_all(&rain_dir)?;
    std::fs::create_dir_all(&norain_dir)?;

    let clean_sources: Option<Vec<PathBuf>> = match &args.clean_dir {
        None => None,
        Some(dir) => {
            let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
                .filter_map(|e| e.ok())
                .filter(|e| e.file_type().map(|t| t.is_file()).unwrap_or(false))
                .map(|e| e.path())
                .collect();
            files.sort();
            if files.is_empty() {
                return Err(Error::Config(format!(
                    "--clean-dir {} holds no files",
                    dir.display()
                )));
            }
            Some(files)
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    for i in 0..args.count {
        let clean: Tensor<f32> = match &clean_sources {
            None => generate_clean_image(args.width, args.height, &mut rng),
            Some(files) => load_image(&files[i % files.len()])?,
        };
        let params = RainParams {
            streak_count: args.streaks,
            angle_deg: args.angle,
            length_px: args.length,
            width_px: args.width_px,
            intensity: args.intensity,
            blur_sigma: args.blur,
            seed: args.seed.wrapping_add(i as u64),
        };
        let (rainy, clean) = synthesize_pair(&clean, &params)?;
        let name = format!("{i:03}.png");
        save_image(&rainy, &rain_dir.join(&name))?;
        save_image(&clean, &norain_dir.join(&name))?;
    }

    // Scanning what was just written doubles as a consistency check.
    let (manifest, _) = scan_dataset(&args.out, PairNaming::Same, true)?;
    std::fs::write(args.out.join("manifest.tsv"), manifest.to_tsv())?;
    eprintln!(
        "wrote {} pairs under {}",
        manifest.len(),
        args.out.display()
    );
    Ok(())
}
