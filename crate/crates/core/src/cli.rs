//! `evo-depth` command line.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::{RunConfig, CONFIG_FILE_NAME};
use crate::env::{render, scene_from_seed, write_dataset, EnvError, Perturbation, Split};
use crate::error::{Error, Result};
use crate::eval::{evaluate, validation_mse, ModelPolicy, ScriptedPolicy, ZeroPolicy};
use crate::experiment::{ablation_csv, run_ablation, train_model, AblationAxis};
use crate::export::export_attention;
use crate::model::EvoDepth;
use crate::nn::ParamStore;
use crate::train::{run_pipeline, Checkpoint, PipelineOptions, TrainData};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "evo-depth",
    version,
    about = "Train and evaluate depth-enhanced action policies on a synthetic reach task"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run configuration (`key=value` with [model], [training], [data]).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the global seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum PolicyKind {
    Model,
    Expert,
    Zero,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a demonstration dataset file.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long, default_value_t = 1000)]
        size: usize,
    },
    /// Run the staged training pipeline.
    Train {
        #[command(flatten)]
        common: Common,
        /// Number of stages (1, 2 or 3) sharing the configured step budget.
        #[arg(long)]
        stages: Option<usize>,
        /// Skip the first K stages, continuing from `stage{K}.ckpt` in --out.
        #[arg(long, default_value_t = 0)]
        resume_after: usize,
    },
    /// Closed-loop evaluation on held-out scenes.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "model")]
        policy: PolicyKind,
        #[arg(long)]
        scenes: Option<usize>,
        /// Disturbances to evaluate; bare `--perturb` runs all four.
        #[arg(long, num_args = 0.., value_delimiter = ',')]
        perturb: Option<Vec<String>>,
    },
    /// Train and score the variants along one axis over several seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        axis: String,
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        #[arg(long)]
        scenes: Option<usize>,
    },
    /// Write IDEM attention maps for one scene as PGM images.
    ExportAttention {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

/// Config from `--config`, else `config.txt` next to `checkpoint`, else
/// defaults; `--seed` overrides the global seed.
fn resolve_config(common: &Common, checkpoint: Option<&Path>) -> Result<RunConfig> {
    let beside = checkpoint
        .and_then(Path::parent)
        .map(|d| d.join(CONFIG_FILE_NAME))
        .filter(|p| p.exists());
    let mut cfg = match common.config.as_deref().map(Path::to_path_buf).or(beside) {
        Some(p) => RunConfig::load(&p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn load_model(cfg: &RunConfig, checkpoint: &Path) -> Result<(EvoDepth, ParamStore)> {
    let (model, mut store) = EvoDepth::new(cfg.model.clone(), cfg.seed)?;
    Checkpoint::load(checkpoint)?.restore_params(&mut store)?;
    Ok((model, store))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(Error::io(format!("creating {}", dir.display())))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(Error::io(format!("writing {}", path.display())))
}

fn gen_data(common: &Common, split: &str, size: usize) -> Result<()> {
    let split: Split = split.parse()?;
    let cfg = resolve_config(common, None)?;
    if size == 0 {
        return Err(Error::Config("--size must be at least 1".into()));
    }
    let seed = common.seed.unwrap_or(cfg.data.seed);
    let path = common
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}.evds", split.name())));
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    let demos = crate::env::generate_dataset(seed, size, split, &cfg.env())?;
    write_dataset(&path, &demos)?;
    println!("{} {}", path.display(), demos.len());
    Ok(())
}

fn train(common: &Common, stages: Option<usize>, resume_after: usize) -> Result<()> {
    let mut cfg = resolve_config(common, None)?;
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    if let Some(n) = stages {
        cfg = cfg.with_stage_count(n)?;
    }
    cfg.validate()?;
    create_dir(&cfg.out_dir)?;
    cfg.write(&cfg.out_dir.join(CONFIG_FILE_NAME))?;
    let (train, _) = cfg.datasets()?;
    let report = if resume_after == 0 {
        train_model(&cfg, &train, Some(&cfg.out_dir))?.2
    } else {
        let (model, mut store) = EvoDepth::new(cfg.model.clone(), cfg.seed)?;
        let data = TrainData::new(&train, cfg.model.vlb.patch_size)?.with_mirroring(cfg.data.mirror);
        let opts = PipelineOptions {
            optim: cfg.optim.clone(),
            seed: cfg.seed,
            out_dir: Some(cfg.out_dir.clone()),
            resume_after,
        };
        run_pipeline(&model, &mut store, &cfg.stages, &data, &opts)?
    };
    if let (Some(first), Some(last)) = (report.metrics.first(), report.metrics.last()) {
        println!(
            "loss {:.6} -> {:.6} over {} steps",
            first.loss,
            last.loss,
            report.metrics.len()
        );
    }
    for p in &report.checkpoints {
        println!("{}", p.display());
    }
    Ok(())
}

fn parse_perturb(raw: &Option<Vec<String>>) -> Result<Vec<Perturbation>> {
    match raw {
        None => Ok(Vec::new()),
        Some(v) if v.is_empty() => Ok(Perturbation::ALL.to_vec()),
        Some(v) => v.iter().map(|s| Ok(s.parse::<Perturbation>()?)).collect(),
    }
}

fn eval(
    common: &Common,
    checkpoint: Option<&Path>,
    policy: PolicyKind,
    scenes: Option<usize>,
    perturb: &Option<Vec<String>>,
) -> Result<()> {
    let kinds = parse_perturb(perturb)?;
    let cfg = resolve_config(common, checkpoint)?;
    cfg.validate()?;
    let env = cfg.env();
    let k = scenes.unwrap_or(cfg.data.eval_scenes);
    if k == 0 {
        return Err(Error::Config("--scenes must be at least 1".into()));
    }
    let report = match policy {
        PolicyKind::Model => {
            let ckpt =
                checkpoint.ok_or_else(|| Error::Config("--checkpoint is required for the model policy".into()))?;
            let (model, store) = load_model(&cfg, ckpt)?;
            let mut p = ModelPolicy::new(&model, &store, cfg.seed);
            let mut report = evaluate(&mut p, &env, k, cfg.data.seed, &kinds)?;
            let (_, val) = cfg.datasets()?;
            report.val_mse = Some(validation_mse(&model, &store, &val, cfg.seed)?);
            report
        }
        PolicyKind::Expert => evaluate(&mut ScriptedPolicy::new(env.horizon), &env, k, cfg.data.seed, &kinds)?,
        PolicyKind::Zero => evaluate(
            &mut ZeroPolicy {
                horizon: env.horizon,
                action_dim: crate::env::ACTION_DIM,
            },
            &env,
            k,
            cfg.data.seed,
            &kinds,
        )?,
    };
    let text = report.to_text();
    print!("{text}");
    if let Some(out) = &common.out {
        create_dir(out)?;
        write_file(&out.join("report.txt"), &text)?;
    }
    Ok(())
}

fn ablate(common: &Common, axis: &str, seeds: usize, scenes: Option<usize>) -> Result<()> {
    let axis: AblationAxis = axis.parse()?;
    let mut cfg = resolve_config(common, None)?;
    if let Some(k) = scenes {
        cfg.data.eval_scenes = k;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    create_dir(&cfg.out_dir)?;
    cfg.write(&cfg.out_dir.join(CONFIG_FILE_NAME))?;
    let rows = run_ablation(&cfg, axis, seeds, Some(&cfg.out_dir), |variant, o| {
        eprintln!(
            "{variant} seed {}: val_mse {:.6e} success {:.4}",
            o.seed, o.val_mse, o.success_rate
        );
    })?;
    let csv = ablation_csv(&rows);
    print!("{csv}");
    write_file(&cfg.out_dir.join(format!("ablation_{axis}.csv")), &csv)
}

fn export(common: &Common, checkpoint: &Path) -> Result<()> {
    let cfg = resolve_config(common, Some(checkpoint))?;
    cfg.validate()?;
    let (model, store) = load_model(&cfg, checkpoint)?;
    let env = cfg.env();
    let scene = scene_from_seed(cfg.seed, &env)?;
    let views = render(&scene, env.image_size, env.square).into_vec();
    let out = common.out.clone().unwrap_or_else(|| PathBuf::from("attention"));
    let files = export_attention(&model, &store, &views, &out)?;
    println!("{} files in {}", files.len(), out.display());
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData { common, split, size } => gen_data(common, split, *size),
        Command::Train {
            common,
            stages,
            resume_after,
        } => train(common, *stages, *resume_after),
        Command::Eval {
            common,
            checkpoint,
            policy,
            scenes,
            perturb,
        } => eval(common, checkpoint.as_deref(), *policy, *scenes, perturb),
        Command::Ablate {
            common,
            axis,
            seeds,
            scenes,
        } => ablate(common, axis, *seeds, *scenes),
        Command::ExportAttention { common, checkpoint } => export(common, checkpoint),
    }
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => EXIT_USAGE,
        Error::Env(EnvError::UnknownSplit(_) | EnvError::UnknownPerturbation(_) | EnvError::ObjectCount(_)) => {
            EXIT_USAGE
        }
        _ => EXIT_RUNTIME,
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
