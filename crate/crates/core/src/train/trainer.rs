//! Staged training with freeze masks and checkpoint handoff.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::env::{Demonstration, Mirror};
use crate::error::{Error, Result};
use crate::model::{Batch, EvoDepth, Sample};
use crate::nn::{Forward, ModuleKind, ModuleSet, ParamStore};
use crate::train::checkpoint::Checkpoint;
use crate::train::optim::{clip_grad_norm, AdamW, OptimConfig};
use crate::train::schedule::lr_at;
use crate::util::derive_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum StageName {
    InitialAlignment,
    SpatialAlignment,
    Joint,
}

impl StageName {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::InitialAlignment => "initial_alignment",
            Self::SpatialAlignment => "spatial_alignment",
            Self::Joint => "joint",
        }
    }
}

impl fmt::Display for StageName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StageName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Self::InitialAlignment, Self::SpatialAlignment, Self::Joint]
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageConfig {
    pub name: StageName,
    pub steps: usize,
    pub trainable: ModuleSet,
}

impl StageConfig {
    pub fn new(name: StageName, steps: usize, trainable: &[ModuleKind]) -> Self {
        Self {
            name,
            steps,
            trainable: ModuleSet::of(trainable),
        }
    }

    /// SEM + expert, then IDEM as well, then everything.
    pub fn progressive(steps: [usize; 3]) -> Vec<Self> {
        use ModuleKind::*;
        vec![
            Self::new(StageName::InitialAlignment, steps[0], &[Sem, Expert]),
            Self::new(StageName::SpatialAlignment, steps[1], &[Idem, Sem, Expert]),
            Self::new(StageName::Joint, steps[2], &[Vlb, Idem, Sem, Expert]),
        ]
    }

    /// SEM + expert, then everything.
    pub fn two_stage(steps: [usize; 2]) -> Vec<Self> {
        use ModuleKind::*;
        vec![
            Self::new(StageName::InitialAlignment, steps[0], &[Sem, Expert]),
            Self::new(StageName::Joint, steps[1], &[Vlb, Idem, Sem, Expert]),
        ]
    }

    /// Everything trainable from the first step.
    pub fn one_stage(steps: usize) -> Vec<Self> {
        vec![Self::new(StageName::Joint, steps, &ModuleKind::ALL)]
    }

    /// Ablation variant with `count` stages sharing the budget of the
    /// three-stage `steps`.
    pub fn variant(count: usize, steps: [usize; 3]) -> Result<Vec<Self>> {
        match count {
            1 => Ok(Self::one_stage(steps.iter().sum())),
            2 => Ok(Self::two_stage([steps[0], steps[1] + steps[2]])),
            3 => Ok(Self::progressive(steps)),
            n => Err(Error::Config(format!("stage count must be 1, 2 or 3, got {n}"))),
        }
    }
}

pub const DESK_STAGE_STEPS: [usize; 3] = [500, 1000, 3000];
pub const FULL_STAGE_STEPS: [usize; 3] = [5_000, 10_000, 120_000];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricRecord {
    pub step: usize,
    pub stage: usize,
    pub loss: f32,
    pub lr: f64,
    pub grad_norm: f64,
}

pub const METRICS_HEADER: &str = "step,stage,loss,lr,grad_norm";

pub fn write_metrics(path: &Path, records: &[MetricRecord]) -> Result<()> {
    let ctx = || format!("writing metrics {}", path.display());
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{:e},{}\n",
            r.step, r.stage, r.loss, r.lr, r.grad_norm
        ));
    }
    let mut f = fs::File::create(path).map_err(Error::io(ctx()))?;
    f.write_all(out.as_bytes()).map_err(Error::io(ctx()))
}

/// Training samples with patch pixels precomputed. With mirroring on,
/// each drawn sample is reflected along a random subset of the axes.
pub struct TrainData {
    pub samples: Vec<Sample>,
    demos: Vec<Demonstration>,
    patch: usize,
    pub mirror: bool,
}

impl TrainData {
    pub fn new(demos: &[Demonstration], patch: usize) -> Result<Self> {
        if demos.is_empty() {
            return Err(Error::Invalid("training set is empty".into()));
        }
        let samples = demos
            .iter()
            .map(|d| Sample::from_demonstration(d, patch))
            .collect::<Result<_>>()?;
        Ok(Self {
            samples,
            demos: demos.to_vec(),
            patch,
            mirror: false,
        })
    }

    pub fn with_mirroring(mut self, on: bool) -> Self {
        self.mirror = on;
        self
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sample indices for one step. Each epoch is a fresh shuffle keyed by
    /// `(seed, stage, epoch)`; the stream wraps around when exhausted.
    pub fn batch_indices(&self, seed: u64, stage: usize, step: usize, batch_size: usize) -> Vec<usize> {
        let n = self.samples.len();
        let mut cached: Option<(usize, Vec<usize>)> = None;
        (step * batch_size..(step + 1) * batch_size)
            .map(|i| {
                let (epoch, pos) = (i / n, i % n);
                if cached.as_ref().map_or(true, |(e, _)| *e != epoch) {
                    let mut perm: Vec<usize> = (0..n).collect();
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xda7a, stage as u64, epoch as u64]));
                    perm.shuffle(&mut rng);
                    cached = Some((epoch, perm));
                }
                cached.as_ref().expect("filled above").1[pos]
            })
            .collect()
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let picked: Vec<&Sample> = indices.iter().map(|&i| &self.samples[i]).collect();
        Batch::from_samples(&picked)
    }

    /// The batch for one step, a pure function of `(seed, stage, step)`.
    pub fn step_batch(&self, seed: u64, stage: usize, step: usize, batch_size: usize) -> Result<Batch> {
        let indices = self.batch_indices(seed, stage, step, batch_size);
        if !self.mirror {
            return self.batch(&indices);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x4d1, stage as u64, step as u64]));
        let samples = indices
            .iter()
            .map(|&i| {
                let m = Mirror::from_bits(rng.gen::<u8>());
                Sample::from_demonstration(&m.demonstration(&self.demos[i]), self.patch)
            })
            .collect::<Result<Vec<_>>>()?;
        Batch::from_samples(&samples.iter().collect::<Vec<_>>())
    }
}

/// Everything a stage needs besides the model itself.
pub struct StageRun<'a> {
    pub stage: &'a StageConfig,
    /// 1-based position in the pipeline.
    pub index: usize,
    /// Global step of this stage's first step.
    pub step_offset: usize,
    pub optim: &'a OptimConfig,
    pub seed: u64,
}

/// Forward and loss for one step without updating anything.
pub fn step_loss(
    model: &EvoDepth,
    store: &ParamStore,
    data: &TrainData,
    trainable: ModuleSet,
    run: &StageRun<'_>,
    step: usize,
) -> Result<(f32, Vec<(crate::nn::ParamId, crate::autodiff::Tensor)>)> {
    let batch = data.step_batch(run.seed, run.index, step, run.optim.batch_size)?;
    let base = derive_seed(run.seed, &[run.index as u64, step as u64]);
    let mut f = Forward::new(
        store,
        trainable,
        Some(ChaCha8Rng::seed_from_u64(derive_seed(base, &[1]))),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(base, &[2]));
    let loss = model.loss(&mut f, &batch, &mut rng)?;
    let value = f.tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::Diverged {
            stage: format!("{} ({})", run.index, run.stage.name),
            step,
            detail: format!("loss is {value}"),
        });
    }
    let grads = f.tape.backward(loss)?;
    Ok((value, f.param_grads(&grads)))
}

/// Runs one stage in place. Only modules in both the stage's trainable set
/// and the model are updated; optimizer state is created for them alone.
pub fn run_stage(
    model: &EvoDepth,
    store: &mut ParamStore,
    data: &TrainData,
    run: &StageRun<'_>,
    log: &mut Vec<MetricRecord>,
) -> Result<AdamW> {
    let trainable = run.stage.trainable.intersect(model.cfg.modules());
    let steps = run.stage.steps;
    let mut opt = AdamW::new(store, trainable, run.optim);
    for step in 0..steps {
        let lr = lr_at(step, run.optim.warmup_steps, steps, run.optim.peak_lr)?;
        let (loss, mut grads) = step_loss(model, store, data, trainable, run, step)?;
        let grad_norm = clip_grad_norm(&mut grads, run.optim.clip_norm, store).map_err(|e| Error::Diverged {
            stage: format!("{} ({})", run.index, run.stage.name),
            step,
            detail: e.to_string(),
        })?;
        opt.update(store, &grads, lr)?;
        log.push(MetricRecord {
            step: run.step_offset + step,
            stage: run.index,
            loss,
            lr,
            grad_norm,
        });
    }
    Ok(opt)
}

pub fn checkpoint_path(dir: &Path, stage: usize) -> PathBuf {
    dir.join(format!("stage{stage}.ckpt"))
}

#[derive(Clone, Debug)]
pub struct PipelineOptions {
    pub optim: OptimConfig,
    pub seed: u64,
    /// Where stage checkpoints and `metrics.csv` go. Without it the
    /// handoff stays in memory.
    pub out_dir: Option<PathBuf>,
    /// Number of leading stages already completed; their last checkpoint
    /// must be in `out_dir`.
    pub resume_after: usize,
}

#[derive(Clone, Debug, Default)]
pub struct PipelineReport {
    pub metrics: Vec<MetricRecord>,
    pub checkpoints: Vec<PathBuf>,
}

pub fn validate_stages(stages: &[StageConfig], optim: &OptimConfig) -> Result<()> {
    if stages.is_empty() {
        return Err(Error::Config("at least one stage is required".into()));
    }
    for (i, s) in stages.iter().enumerate() {
        if s.steps <= optim.warmup_steps {
            return Err(Error::Config(format!(
                "stage {} ({}) has {} steps, not above warmup_steps={}",
                i + 1,
                s.name,
                s.steps,
                optim.warmup_steps
            )));
        }
        if s.trainable == ModuleSet::EMPTY {
            return Err(Error::Config(format!("stage {} trains nothing", i + 1)));
        }
    }
    Ok(())
}

/// Runs `stages` in order. With an output directory each stage after the
/// first starts from the checkpoint the previous stage wrote.
pub fn run_pipeline(
    model: &EvoDepth,
    store: &mut ParamStore,
    stages: &[StageConfig],
    data: &TrainData,
    opts: &PipelineOptions,
) -> Result<PipelineReport> {
    opts.optim.validate()?;
    validate_stages(stages, &opts.optim)?;
    let mut report = PipelineReport::default();
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir).map_err(Error::io(format!("creating {}", dir.display())))?;
    }
    let mut offset: usize = stages[..opts.resume_after.min(stages.len())]
        .iter()
        .map(|s| s.steps)
        .sum();
    for (i, stage) in stages.iter().enumerate().skip(opts.resume_after) {
        let index = i + 1;
        if i > 0 {
            if let Some(dir) = &opts.out_dir {
                Checkpoint::load(&checkpoint_path(dir, i))?.restore_params(store)?;
            }
        }
        let run = StageRun {
            stage,
            index,
            step_offset: offset,
            optim: &opts.optim,
            seed: opts.seed,
        };
        let opt = run_stage(model, store, data, &run, &mut report.metrics)?;
        offset += stage.steps;
        if let Some(dir) = &opts.out_dir {
            let path = checkpoint_path(dir, index);
            Checkpoint::from_store(store, Some(&opt)).save(&path)?;
            report.checkpoints.push(path);
        }
    }
    if let Some(dir) = &opts.out_dir {
        write_metrics(&dir.join("metrics.csv"), &report.metrics)?;
    }
    Ok(report)
}
