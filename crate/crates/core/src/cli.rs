use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{self, Dtype};
use crate::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::io::{export_scene, load_scene, write_png, RunConfig, SyntheticConfig};
use crate::renderer::render_image;
use crate::scene::{make_synthetic, SyntheticScene};
use crate::superres::{sr_train, ExternalRefiner, IdentityRefiner, OracleRefiner, Refiner};
use crate::trainer::{evaluate, mean_psnr, train, NoopObserver, RunOptions, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "trinerflet", version, about = "Wavelet triplane radiance fields")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Fit a model to a posed image set.
    Train(TrainArgs),
    /// Render every frame of a split with a trained model.
    Render(RenderArgs),
    /// Train a high-resolution model from low-resolution views.
    Superres(SuperresArgs),
    /// Print PSNR and SSIM per frame as CSV.
    Eval(EvalArgs),
    /// Write the synthetic sphere scene to disk.
    Synth(SynthArgs),
    /// Print the expanded training configuration.
    Preset {
        name: String,
    },
}

#[derive(Args, Debug)]
pub struct SceneArgs {
    /// `transforms.json` or a directory of manifests.
    #[arg(long, conflicts_with = "synthetic")]
    pub data: Option<PathBuf>,
    /// Use the built-in synthetic scene (settings from the config's [synthetic] table).
    #[arg(long)]
    pub synthetic: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub scene: SceneArgs,
    #[arg(long, value_parser = ["small", "base-light", "base", "large", "micro"])]
    pub preset: Option<String>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub scene: SceneArgs,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Wavelet depth to render at (defaults to the full model).
    #[arg(long)]
    pub depth: Option<usize>,
    /// Resolution multiplier relative to the dataset cameras.
    #[arg(long, default_value_t = 1)]
    pub scale: usize,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub scene: SceneArgs,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub samples: Option<usize>,
    /// Score linear images instead of sRGB-encoded ones.
    #[arg(long)]
    pub linear: bool,
}

#[derive(Args, Debug)]
pub struct SuperresArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[command(flatten)]
    pub scene: SceneArgs,
    /// `oracle`, `identity`, or `external:<command or http url>`.
    #[arg(long, default_value = "oracle")]
    pub refiner: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub views: Option<usize>,
    #[arg(long)]
    pub resolution: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Parses `argv` (including the program name) and runs the command.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    path.map_or(Ok(RunConfig::default()), RunConfig::load)
}

fn synthetic_settings(rc: &RunConfig) -> SyntheticConfig {
    rc.synthetic.clone().unwrap_or_default()
}

fn scene_from(args: &SceneArgs, rc: &RunConfig) -> Result<(Dataset, Option<SyntheticScene>)> {
    match (&args.data, args.synthetic) {
        (Some(p), _) => Ok((load_scene(p)?, None)),
        (None, true) => {
            let s = synthetic_settings(rc);
            let (ds, scene) = make_synthetic(s.spec, s.views, s.resolution, s.seed)?;
            Ok((ds, Some(scene)))
        }
        (None, false) => Err(Error::Config("pass --data <path> or --synthetic".into())),
    }
}

fn parse_split(s: &str) -> Result<Split> {
    s.parse()
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Render(a) => cmd_render(a),
        Command::Superres(a) => cmd_superres(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Preset { name } => {
            let cfg = RunConfig::default().train_config(Some(&name))?;
            print!("{}", toml::to_string(&cfg).map_err(|e| Error::Config(e.to_string()))?);
            Ok(())
        }
    }
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let rc = load_config(a.config.as_deref())?;
    let mut cfg = rc.train_config(a.preset.as_deref())?;
    if let Some(s) = a.steps {
        cfg.total_steps = s;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let (ds, _) = scene_from(&a.scene, &rc)?;
    std::fs::create_dir_all(&a.out)?;
    std::fs::write(
        a.out.join("config.toml"),
        toml::to_string(&cfg).map_err(|e| Error::Config(e.to_string()))?,
    )?;
    let run = RunOptions {
        metrics_csv: Some(a.out.join("metrics.csv")),
        checkpoint_dir: Some(a.out.clone()),
    };
    let outcome = train(&cfg, &ds, &mut NoopObserver, &run)?;
    let scores = evaluate(&outcome.model, &ds, Split::Test, &cfg.eval_options(), cfg.psnr_srgb)?;
    if !scores.is_empty() {
        println!("test psnr {:.3}", mean_psnr(&scores));
    }
    Ok(())
}

fn render_options(cfg: &TrainConfig, samples: Option<usize>) -> crate::renderer::RenderOptions {
    let mut o = cfg.eval_options();
    if let Some(s) = samples {
        o.samples_per_ray = s;
    }
    o
}

fn cmd_render(a: RenderArgs) -> Result<()> {
    let rc = load_config(a.config.as_deref())?;
    let cfg = rc.train_config(None)?;
    let model = checkpoint::load(&a.checkpoint)?;
    let (ds, _) = scene_from(&a.scene, &rc)?;
    let split = parse_split(&a.split)?;
    let depth = a.depth.unwrap_or(model.depth());
    let opts = render_options(&cfg, a.samples);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for f in ds.split(split) {
        let cam = f.camera.scaled(a.scale as f64);
        let img = render_image(&model, &cam, depth, &opts, &mut rng)?;
        write_png(&a.out.join(format!("r_{:03}.png", f.id)), &img)?;
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let rc = load_config(a.config.as_deref())?;
    let cfg = rc.train_config(None)?;
    let model = checkpoint::load(&a.checkpoint)?;
    let (ds, _) = scene_from(&a.scene, &rc)?;
    let scores = evaluate(&model, &ds, parse_split(&a.split)?, &render_options(&cfg, a.samples), !a.linear)?;
    let mut w = csv::Writer::from_writer(std::io::stdout());
    for s in &scores {
        w.serialize(s).map_err(|e| Error::Io(e.into()))?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_superres(a: SuperresArgs) -> Result<()> {
    let rc = RunConfig::load(&a.config)?;
    let cfg = rc.train_config(None)?;
    let sr = rc.sr.unwrap_or_default();
    let (ds, scene) = scene_from(&a.scene, &rc)?;
    let mut refiner: Box<dyn Refiner> = match a.refiner.as_str() {
        "oracle" => {
            let scene = scene.ok_or_else(|| Error::Config("the oracle refiner needs --synthetic".into()))?;
            Box::new(OracleRefiner::for_dataset(scene, &ds, sr.scale))
        }
        "identity" => Box::new(IdentityRefiner),
        other => match other.strip_prefix("external:") {
            Some(endpoint) => Box::new(ExternalRefiner::connect(endpoint)?),
            None => return Err(Error::Config(format!("unknown refiner {other:?}"))),
        },
    };
    let outcome = sr_train(&sr, &cfg, &ds, refiner.as_mut())?;
    std::fs::create_dir_all(&a.out)?;
    checkpoint::save(&outcome.model, &a.out.join("sr.trnl"), Dtype::F32)?;
    let mut w = csv::Writer::from_path(a.out.join("sr_metrics.csv")).map_err(|e| Error::Io(e.into()))?;
    for row in &outcome.log {
        w.serialize(row).map_err(|e| Error::Io(e.into()))?;
    }
    w.flush()?;
    println!("refiner calls {} failures {}", outcome.refine_calls, outcome.refine_failures);
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let rc = load_config(a.config.as_deref())?;
    let mut s = synthetic_settings(&rc);
    if let Some(v) = a.views {
        s.views = v;
    }
    if let Some(r) = a.resolution {
        s.resolution = r;
    }
    if let Some(seed) = a.seed {
        s.seed = seed;
    }
    let (ds, _) = make_synthetic(s.spec, s.views, s.resolution, s.seed)?;
    export_scene(&ds, &a.out)
}
