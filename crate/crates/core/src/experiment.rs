//! Training runs and multi-seed ablations driven by a [`RunConfig`].

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::config::RunConfig;
use crate::env::{Demonstration, Vocab};
use crate::error::{Error, Result};
use crate::eval::{eval_scenes, success_rate, validation_mse, ModelPolicy};
use crate::model::EvoDepth;
use crate::nn::ParamStore;
use crate::sem::FusionStrategy;
use crate::train::{run_pipeline, PipelineOptions, PipelineReport, TrainData};

/// Builds the model from `cfg.seed` and runs every stage on `train`.
pub fn train_model(
    cfg: &RunConfig,
    train: &[Demonstration],
    out_dir: Option<&Path>,
) -> Result<(EvoDepth, ParamStore, PipelineReport)> {
    cfg.validate()?;
    let (model, mut store) = EvoDepth::new(cfg.model.clone(), cfg.seed)?;
    let data = TrainData::new(train, cfg.model.vlb.patch_size)?.with_mirroring(cfg.data.mirror);
    let opts = PipelineOptions {
        optim: cfg.optim.clone(),
        seed: cfg.seed,
        out_dir: out_dir.map(Path::to_path_buf),
        resume_after: 0,
    };
    let report = run_pipeline(&model, &mut store, &cfg.stages, &data, &opts)?;
    Ok((model, store, report))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RunOutcome {
    pub seed: u64,
    pub val_mse: f64,
    pub success_rate: f64,
}

/// Validation MSE on `val` and closed-loop success on `cfg.data.eval_scenes`
/// held-out scenes.
pub fn score(cfg: &RunConfig, model: &EvoDepth, store: &ParamStore, val: &[Demonstration]) -> Result<RunOutcome> {
    let env = cfg.env();
    let val_mse = validation_mse(model, store, val, cfg.seed)?;
    let scenes = eval_scenes(cfg.data.seed, cfg.data.eval_scenes, &env)?;
    let mut policy = ModelPolicy::new(model, store, cfg.seed);
    let success_rate = success_rate(&mut policy, &scenes, &env, &Vocab::default())?;
    Ok(RunOutcome {
        seed: cfg.seed,
        val_mse,
        success_rate,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    Idem,
    Stages,
    Fusion,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 3] = [Self::Idem, Self::Stages, Self::Fusion];

    pub fn name(self) -> &'static str {
        match self {
            Self::Idem => "idem",
            Self::Stages => "stages",
            Self::Fusion => "fusion",
        }
    }
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation axis `{s}` (idem, stages, fusion)")))
    }
}

#[derive(Clone, Debug)]
pub struct Variant {
    pub label: String,
    pub config: RunConfig,
}

/// The configurations compared along `axis`, each derived from `base`.
pub fn variants(base: &RunConfig, axis: AblationAxis) -> Result<Vec<Variant>> {
    let v = |label: &str, config: RunConfig| Variant {
        label: label.to_string(),
        config,
    };
    let out = match axis {
        AblationAxis::Idem => {
            let mut without = base.clone();
            without.model = without.model.without_idem();
            vec![v("with", base.clone()), v("without", without)]
        }
        AblationAxis::Stages => (1..=3)
            .map(|n| Ok(v(&n.to_string(), base.clone().with_stage_count(n)?)))
            .collect::<Result<_>>()?,
        AblationAxis::Fusion => FusionStrategy::ALL
            .into_iter()
            .map(|s| {
                let mut c = base.clone();
                c.model = c.model.with_fusion(s);
                v(&s.to_string(), c)
            })
            .collect(),
    };
    for variant in &out {
        variant.config.validate()?;
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub variant: String,
    pub runs: Vec<RunOutcome>,
}

/// Median, min and max. The median of an even count is the mean of the
/// middle pair.
pub fn summary(values: &[f64]) -> (f64, f64, f64) {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return (f64::NAN, f64::NAN, f64::NAN);
    }
    let median = if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    };
    (median, v[0], v[n - 1])
}

impl AblationRow {
    pub fn val_mse(&self) -> (f64, f64, f64) {
        summary(&self.runs.iter().map(|r| r.val_mse).collect::<Vec<_>>())
    }

    pub fn success(&self) -> (f64, f64, f64) {
        summary(&self.runs.iter().map(|r| r.success_rate).collect::<Vec<_>>())
    }
}

pub const ABLATION_HEADER: &str =
    "variant,val_mse_median,val_mse_min,val_mse_max,success_median,success_min,success_max,seeds";

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = format!("{ABLATION_HEADER}\n");
    for r in rows {
        let (m, lo, hi) = r.val_mse();
        let (sm, slo, shi) = r.success();
        let seeds: Vec<String> = r.runs.iter().map(|o| o.seed.to_string()).collect();
        out.push_str(&format!(
            "{},{m:.6e},{lo:.6e},{hi:.6e},{sm:.4},{slo:.4},{shi:.4},{}\n",
            r.variant,
            seeds.join(";")
        ));
    }
    out
}

/// Trains every variant of `axis` for `seeds` consecutive seeds starting at
/// `base.seed`. Seed `s` drives both the model and the generated data, so
/// the variants of one seed see the same demonstrations. With `out_dir`
/// each run keeps its checkpoints under `<variant>/seed<s>`.
pub fn run_ablation(
    base: &RunConfig,
    axis: AblationAxis,
    seeds: usize,
    out_dir: Option<&Path>,
    progress: impl FnMut(&str, &RunOutcome),
) -> Result<Vec<AblationRow>> {
    run_variants(base, &variants(base, axis)?, seeds, out_dir, progress)
}

/// [`run_ablation`] over an explicit variant list. Data for seed offset
/// `i` comes from `base.data` with its seed shifted by `i`.
pub fn run_variants(
    base: &RunConfig,
    vars: &[Variant],
    seeds: usize,
    out_dir: Option<&Path>,
    mut progress: impl FnMut(&str, &RunOutcome),
) -> Result<Vec<AblationRow>> {
    if seeds == 0 {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let mut rows: Vec<AblationRow> = vars
        .iter()
        .map(|v| AblationRow {
            variant: v.label.clone(),
            runs: Vec::new(),
        })
        .collect();
    for i in 0..seeds as u64 {
        let mut data_cfg = base.clone();
        data_cfg.data.seed = base.data.seed + i;
        let (train, val) = data_cfg.datasets()?;
        for (v, row) in vars.iter().zip(&mut rows) {
            let mut cfg = v.config.clone();
            cfg.seed = base.seed + i;
            cfg.data.seed = base.data.seed + i;
            let dir = out_dir.map(|d| d.join(&v.label).join(format!("seed{}", cfg.seed)));
            if let Some(d) = &dir {
                std::fs::create_dir_all(d).map_err(Error::io(format!("creating {}", d.display())))?;
                cfg.write(&d.join(crate::config::CONFIG_FILE_NAME))?;
            }
            let (model, store, _) = train_model(&cfg, &train, dir.as_deref())?;
            let outcome = score(&cfg, &model, &store, &val)?;
            progress(&v.label, &outcome);
            row.runs.push(outcome);
        }
    }
    Ok(rows)
}
