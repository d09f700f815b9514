//! Command-line front end: `train`, `eval`, `predict`, `synth` and `decompose`.

use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};

use cfss_core::cspmg::COMPONENT_ORDER;
use cfss_core::data::{
    load_dataset, load_mask, lowlight_transform, synth_dataset, write_dataset, CrackDataset, LowLightParams, Split,
};
use cfss_core::engine::{evaluate, load_checkpoint, parse_kv, save_checkpoint, TrainConfig, Trainer};
use cfss_core::imageio::{read_rgb, write_bytes_atomic, write_gray, write_mask, write_rgb};
use cfss_core::model::PreparedEpisode;
use cfss_core::primitives::bilinear_resize;
use cfss_core::retinex::{decompose, default_sigma};
use cfss_core::types::{BinaryMask, Branch, Episode, ImageTensor, Sample};
use clap::{Args, Parser, Subcommand};
use log::info;

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "CFSS_SEED";

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Resolution images are brought to when nothing else is configured.
pub const DEFAULT_SIZE: (usize, usize) = (128, 128);

#[derive(Parser, Debug)]
#[command(name = "cfss", version, about = "Few-shot low-light crack segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Episodic training; writes a checkpoint and a JSON-lines loss log
    #[command(after_help = CONFIG_HELP)]
    Train(TrainArgs),
    /// Mean mIoU over seeded episodes; prints one JSON line
    Eval(EvalArgs),
    /// Segments query images given annotated support images
    Predict(PredictArgs),
    /// Writes a synthetic crack dataset (images/ and masks/)
    Synth(SynthArgs),
    /// Splits an image into reflectance and illumination
    Decompose(DecomposeArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// key=value config file
    #[arg(long)]
    pub config: PathBuf,
    /// Training dataset root; overrides `data.train`
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Checkpoint path; overrides `checkpoint`
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Loss log path; overrides `loss_log`
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Checkpoint written by `train`
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset root with images/ and masks/
    #[arg(long)]
    pub data: PathBuf,
    /// Support images per episode
    #[arg(long, default_value_t = 1)]
    pub shots: usize,
    /// Number of seeded episodes
    #[arg(long, default_value_t = 50)]
    pub episodes: usize,
    /// Episode seed; defaults to $CFSS_SEED, then 0
    #[arg(long)]
    pub seed: Option<u64>,
    /// Image height and width used for evaluation
    #[arg(long, num_args = 2, value_names = ["H", "W"])]
    pub size: Option<Vec<usize>>,
    /// Also write the full report (with per-episode IoU) as JSON here
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    /// Checkpoint written by `train`
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Support image; repeat once per shot
    #[arg(long = "support-image", required = true)]
    pub support_images: Vec<PathBuf>,
    /// Support mask; repeat once per shot, in the same order
    #[arg(long = "support-mask", required = true)]
    pub support_masks: Vec<PathBuf>,
    /// Query image; repeat for several queries
    #[arg(long = "query", required = true)]
    pub queries: Vec<PathBuf>,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    /// Working resolution; outputs are written at this size
    #[arg(long, num_args = 2, value_names = ["H", "W"])]
    pub size: Option<Vec<usize>>,
    /// Also write the fused prior and its four components
    #[arg(long)]
    pub dump_prior: bool,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Number of image/mask pairs
    #[arg(long)]
    pub count: usize,
    /// Image height and width, each at least 64
    #[arg(long, num_args = 2, value_names = ["H", "W"], required = true)]
    pub size: Vec<usize>,
    /// Generator seed; defaults to $CFSS_SEED, then 0
    #[arg(long)]
    pub seed: Option<u64>,
    /// Low-light degradation as gamma,scale,noise_sigma
    #[arg(long, value_name = "G,S,SIGMA")]
    pub lowlight: Option<String>,
    /// Output dataset root
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct DecomposeArgs {
    /// Input RGB image
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Reflectance PNG to write
    #[arg(long)]
    pub out_reflectance: PathBuf,
    /// Illumination PNG to write
    #[arg(long)]
    pub out_illumination: PathBuf,
    /// Blur sigma in pixels; scales with image size by default
    #[arg(long)]
    pub sigma: Option<f32>,
}

const CONFIG_HELP: &str = "\
Config file: one key=value per line, '#' starts a comment, unknown keys are rejected.
  iterations               training iterations (6000)
  batch_episodes           episodes per step (4)
  lr0                      initial learning rate (0.001)
  lr_decay_every           iterations between decays (2000)
  lr_decay_factor          decay multiplier (0.1)
  shots                    support images per episode (1)
  seed                     run seed (0); $CFSS_SEED overrides it
  toggle.cspmg             prior mask generation (true)
  toggle.msfe              feature enhancement (true)
  toggle.pfm               prototype fusion (true)
  toggle.ssp               self-support refinement (true)
  lambda1                  segmentation loss weight (0.1)
  lambda2                  prior loss weight (0.5)
  lambda3                  self-support loss weight (0.6)
  backbone                 tiny | residual50-like | residual101-like (tiny)
  backbone.block_channels  five comma-separated block widths
  backbone.mid_channels    mid-level fused width
  backbone.dilate_late_blocks  keep blocks 4-5 at stride 8 (true)
  data.train               training dataset root
  data.test                test dataset root
  image.height             working height (128)
  image.width              working width (128)
  lowlight                 darken training images on load (false)
  lowlight.gamma           gamma exponent (2.0)
  lowlight.scale           brightness scale (0.5)
  lowlight.noise_sigma     Gaussian noise sigma (0.01)
  lowlight.seed            noise seed (0)
  checkpoint               checkpoint path (cfss.ckpt)
  loss_log                 loss log path (<checkpoint>.log.jsonl)";

/// Failure of a command, split by exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(cfss_core::Error),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<cfss_core::Error> for CliError {
    fn from(e: cfss_core::Error) -> Self {
        CliError::Runtime(e)
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Contents of a training config file.
#[derive(Clone, Debug, PartialEq)]
pub struct CliConfig {
    pub train: TrainConfig,
    pub data_train: Option<PathBuf>,
    pub data_test: Option<PathBuf>,
    pub image_size: (usize, usize),
    /// Degradation applied to training images on load.
    pub lowlight: Option<LowLightParams>,
    pub checkpoint: PathBuf,
    pub loss_log: Option<PathBuf>,
}

impl Default for CliConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            data_train: None,
            data_test: None,
            image_size: DEFAULT_SIZE,
            lowlight: None,
            checkpoint: PathBuf::from("cfss.ckpt"),
            loss_log: None,
        }
    }
}

/// Keys handled by the CLI itself, next to [`TrainConfig::KEYS`].
pub const CLI_KEYS: [&str; 11] = [
    "data.train",
    "data.test",
    "image.height",
    "image.width",
    "lowlight",
    "lowlight.gamma",
    "lowlight.scale",
    "lowlight.noise_sigma",
    "lowlight.seed",
    "checkpoint",
    "loss_log",
];

fn parse_num<V: std::str::FromStr>(key: &str, value: &str) -> cfss_core::Result<V> {
    value
        .parse()
        .map_err(|_| cfss_core::Error::Config(format!("bad value '{value}' for key '{key}'")))
}

impl CliConfig {
    pub fn parse(text: &str) -> cfss_core::Result<Self> {
        let mut cfg = CliConfig::default();
        let mut lowlight_on = false;
        let mut ll = LowLightParams::default();
        let mut train_pairs = Vec::new();
        for (key, value) in parse_kv(text)? {
            let v = value.as_str();
            match key.as_str() {
                "data.train" => cfg.data_train = Some(PathBuf::from(v)),
                "data.test" => cfg.data_test = Some(PathBuf::from(v)),
                "image.height" => cfg.image_size.0 = parse_num(&key, v)?,
                "image.width" => cfg.image_size.1 = parse_num(&key, v)?,
                "lowlight" => {
                    lowlight_on = match v {
                        "true" | "1" | "on" => true,
                        "false" | "0" | "off" => false,
                        _ => {
                            return Err(cfss_core::Error::Config(format!(
                                "bad boolean '{v}' for key 'lowlight'"
                            )))
                        }
                    }
                }
                "lowlight.gamma" => ll.gamma = parse_num(&key, v)?,
                "lowlight.scale" => ll.scale = parse_num(&key, v)?,
                "lowlight.noise_sigma" => ll.noise_sigma = parse_num(&key, v)?,
                "lowlight.seed" => ll.seed = parse_num(&key, v)?,
                "checkpoint" => cfg.checkpoint = PathBuf::from(v),
                "loss_log" => cfg.loss_log = Some(PathBuf::from(v)),
                k if TrainConfig::knows(k) => train_pairs.push((key.clone(), value.clone())),
                k => return Err(cfss_core::Error::Config(format!("unknown key '{k}'"))),
            }
        }
        cfg.train
            .apply_pairs(train_pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
        cfg.train.validate()?;
        if cfg.image_size.0 == 0 || cfg.image_size.1 == 0 {
            return Err(cfss_core::Error::Config("image size must be positive".into()));
        }
        if lowlight_on {
            ll.validate()?;
            cfg.lowlight = Some(ll);
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
    }
}

/// `$CFSS_SEED` when set; a malformed value is a usage error.
pub fn env_seed() -> CliResult<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| usage(format!("{SEED_ENV}='{v}' is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn size_arg(size: &Option<Vec<usize>>) -> CliResult<(usize, usize)> {
    match size.as_deref() {
        None => Ok(DEFAULT_SIZE),
        Some(&[h, w]) if h > 0 && w > 0 => Ok((h, w)),
        Some(s) => Err(usage(format!("--size needs two positive integers, got {s:?}"))),
    }
}

fn parse_lowlight(spec: &str, seed: u64) -> CliResult<LowLightParams> {
    let parts: Vec<&str> = spec.split(',').map(str::trim).collect();
    let nums: Vec<f32> = match parts.iter().map(|p| p.parse()).collect::<Result<_, _>>() {
        Ok(v) => v,
        Err(_) => return Err(usage(format!("--lowlight '{spec}' is not three numbers"))),
    };
    let [gamma, scale, noise_sigma] = nums[..] else {
        return Err(usage(format!("--lowlight takes gamma,scale,noise_sigma; got '{spec}'")));
    };
    let p = LowLightParams {
        gamma,
        scale,
        noise_sigma,
        seed,
    };
    p.validate().map_err(|e| usage(e.to_string()))?;
    Ok(p)
}

fn darken(dataset: &mut CrackDataset, p: &LowLightParams) -> cfss_core::Result<()> {
    for (i, item) in dataset.items.iter_mut().enumerate() {
        let params = LowLightParams {
            seed: p.seed.wrapping_add(i as u64),
            ..*p
        };
        item.sample.image = lowlight_transform(&item.sample.image, &params)?;
    }
    Ok(())
}

fn train(args: TrainArgs) -> CliResult<()> {
    let mut cfg = CliConfig::load(&args.config)?;
    if let Some(seed) = env_seed()? {
        cfg.train.seed = seed;
    }
    let data = args
        .data
        .or(cfg.data_train.clone())
        .ok_or_else(|| usage("no training data: pass --data or set data.train"))?;
    let checkpoint = args.checkpoint.unwrap_or(cfg.checkpoint.clone());
    let log_path = args.log.or(cfg.loss_log.clone()).unwrap_or_else(|| {
        let mut p = checkpoint.clone().into_os_string();
        p.push(".log.jsonl");
        PathBuf::from(p)
    });

    let mut dataset = load_dataset(&data, cfg.image_size, Split::Train)?;
    if let Some(p) = &cfg.lowlight {
        darken(&mut dataset, p)?;
    }
    info!(
        "training on {} images at {}x{}, digest {}",
        dataset.len(),
        cfg.image_size.0,
        cfg.image_size.1,
        cfg.train.digest()
    );
    let mut trainer = Trainer::new(cfg.train.clone())?;
    let mut log = String::new();
    let reports = trainer.train(&dataset, |r| {
        log.push_str(&serde_json::to_string(r).expect("step report serialises"));
        log.push('\n');
    })?;
    save_checkpoint(&trainer.network.store, &trainer.config, &checkpoint)?;
    write_bytes_atomic(&log_path, log.as_bytes())?;
    if let Some(last) = reports.last() {
        println!(
            "trained {} iterations, final loss {:.4}; checkpoint {}",
            reports.len(),
            last.total,
            checkpoint.display()
        );
    }
    Ok(())
}

fn eval(args: EvalArgs) -> CliResult<()> {
    let seed = match args.seed {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    };
    let size = size_arg(&args.size)?;
    if args.shots == 0 {
        return Err(usage("--shots must be at least 1"));
    }
    let (network, cfg) = load_checkpoint(&args.checkpoint)?;
    let dataset = load_dataset(&args.data, size, Split::Test)?;
    let report = evaluate(&network, &cfg, &dataset, args.shots, args.episodes, seed)?;
    if let Some(out) = &args.out {
        let full = serde_json::to_string_pretty(&report).expect("report serialises");
        write_bytes_atomic(out, full.as_bytes())?;
    }
    println!("{}", report.json_line());
    Ok(())
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "query".into())
}

fn load_resized(path: &Path, (h, w): (usize, usize)) -> cfss_core::Result<ImageTensor> {
    let img = read_rgb(path)?;
    if (img.height(), img.width()) == (h, w) {
        Ok(img)
    } else {
        img.resize(h, w)
    }
}

fn branch_name(b: Branch) -> &'static str {
    match b {
        Branch::Rgb => "rgb",
        Branch::Ref => "ref",
    }
}

fn predict(args: PredictArgs) -> CliResult<()> {
    if args.support_images.len() != args.support_masks.len() {
        return Err(usage(format!(
            "{} support images but {} support masks",
            args.support_images.len(),
            args.support_masks.len()
        )));
    }
    let size = size_arg(&args.size)?;
    let (network, cfg) = load_checkpoint(&args.checkpoint)?;
    let mut support = Vec::with_capacity(args.support_images.len());
    for (img, mask) in args.support_images.iter().zip(&args.support_masks) {
        support.push(Sample::new(load_resized(img, size)?, load_mask(mask, size)?)?);
    }
    for query in &args.queries {
        let stem = file_stem(query);
        let q = Sample::new(load_resized(query, size)?, BinaryMask::filled(size.0, size.1, false))?;
        let episode = Episode::new(support.clone(), q)?;
        let prepared = PreparedEpisode::with_default_retinex(&episode)?;
        let p = network.predict(&prepared, cfg.toggles)?;
        write_gray(&args.out.join(format!("{stem}_fg.png")), &p.foreground())?;
        write_mask(&args.out.join(format!("{stem}_mask.png")), &p.mask())?;
        if args.dump_prior {
            let prior = bilinear_resize(&p.prior, size.0, size.1)?;
            write_gray(&args.out.join(format!("{stem}_prior.png")), &prior)?;
            if let Some(components) = &p.prior_components {
                for (c, (qa, sb)) in components.iter().zip(COMPONENT_ORDER) {
                    let up = bilinear_resize(c, size.0, size.1)?;
                    let name = format!("{stem}_prior_{}_{}.png", branch_name(qa), branch_name(sb));
                    write_gray(&args.out.join(name), &up)?;
                }
            }
        }
        info!("wrote predictions for {stem}");
    }
    Ok(())
}

fn synth(args: SynthArgs) -> CliResult<()> {
    let seed = match args.seed {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    };
    let size = match args.size[..] {
        [h, w] => (h, w),
        _ => return Err(usage("--size takes H W")),
    };
    if args.count == 0 {
        return Err(usage("--count must be at least 1"));
    }
    let lowlight = args.lowlight.as_deref().map(|s| parse_lowlight(s, seed)).transpose()?;
    let items = synth_dataset(args.count, size, seed, lowlight)?;
    write_dataset(&args.out, &items)?;
    println!("wrote {} samples to {}", items.len(), args.out.display());
    Ok(())
}

fn decompose_cmd(args: DecomposeArgs) -> CliResult<()> {
    let img = read_rgb(&args.input)?;
    let sigma = args.sigma.unwrap_or_else(|| default_sigma(img.height(), img.width()));
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(usage(format!("--sigma must be non-negative, got {sigma}")));
    }
    let d = decompose(&img, sigma)?;
    write_rgb(&args.out_reflectance, &d.reflectance)?;
    write_gray(&args.out_illumination, &d.illumination)?;
    Ok(())
}

pub fn execute(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Predict(a) => predict(a),
        Command::Synth(a) => synth(a),
        Command::Decompose(a) => decompose_cmd(a),
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("cfss: {e}");
            e.exit_code()
        }
    }
}
