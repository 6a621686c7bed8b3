//! Sectioned `key=value` run configuration.
//!
//! ```text
//! seed=0
//! out_dir=runs/desk
//!
//! [model]
//! enable_idem=true
//! fusion=sem
//! idem.num_layers=4
//!
//! [training]
//! peak_lr=0.001
//! warmup_steps=50
//! stage1=initial_alignment 500 SEM+EXPERT
//!
//! [data]
//! train_size=1000
//! ```
//!
//! Missing keys keep their defaults. Stage lines replace the default stage
//! list as a whole and must be numbered from 1 without gaps.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::env::{generate_dataset, read_dataset, Demonstration, EnvConfig, Split};
use crate::error::{Error, Result};
use crate::model::{parse_fusion, FusionName, ModelConfig};
use crate::nn::ModuleSet;
use crate::train::{OptimConfig, StageConfig, StageName, DESK_STAGE_STEPS};

pub const CONFIG_FILE_NAME: &str = "config.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    /// Dataset files; when absent the split is generated in memory from
    /// `seed`.
    pub train_path: Option<PathBuf>,
    pub val_path: Option<PathBuf>,
    pub seed: u64,
    pub train_size: usize,
    pub val_size: usize,
    pub num_objects: usize,
    pub eval_scenes: usize,
    /// Reflect training samples along random axes.
    pub mirror: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_path: None,
            val_path: None,
            seed: 0,
            train_size: 1000,
            val_size: 200,
            num_objects: 3,
            eval_scenes: 100,
            mirror: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub stages: Vec<StageConfig>,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut model = ModelConfig::default();
        model.vlb.vocab_size = crate::env::Vocab::default().size();
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            model,
            optim: OptimConfig::default(),
            stages: StageConfig::progressive(DESK_STAGE_STEPS),
            data: DataConfig::default(),
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Section {
    Top,
    Model,
    Training,
    Data,
}

impl Section {
    fn header(self) -> &'static str {
        match self {
            Section::Top => "",
            Section::Model => "[model]",
            Section::Training => "[training]",
            Section::Data => "[data]",
        }
    }
}

fn value<T: FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| Error::Config(format!("invalid value `{raw}` for `{key}`")))
}

fn bool_value(key: &str, raw: &str) -> Result<bool> {
    match raw {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("`{key}` expects true or false, got `{raw}`"))),
    }
}

fn list_value(key: &str, raw: &str) -> Result<Vec<f32>> {
    raw.split(',').map(|p| value(key, p.trim())).collect()
}

fn join(v: &[f32]) -> String {
    v.iter().map(f32::to_string).collect::<Vec<_>>().join(",")
}

fn parse_stage(key: &str, raw: &str) -> Result<StageConfig> {
    let parts: Vec<&str> = raw.split_whitespace().collect();
    let [name, steps, modules] = parts[..] else {
        return Err(Error::Config(format!(
            "`{key}` expects `<name> <steps> <MODULE+MODULE>`, got `{raw}`"
        )));
    };
    let name: StageName = name.parse()?;
    let trainable: ModuleSet = modules.parse().map_err(|e| Error::Config(format!("`{key}`: {e}")))?;
    Ok(StageConfig {
        name,
        steps: value(key, steps)?,
        trainable,
    })
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut section = Section::Top;
        let mut seen = BTreeMap::new();
        let mut stages = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if line.starts_with('[') {
                section = match line {
                    "[model]" => Section::Model,
                    "[training]" => Section::Training,
                    "[data]" => Section::Data,
                    other => return Err(Error::Config(format!("line {}: unknown section {other}", lineno + 1))),
                };
                continue;
            }
            let Some((key, raw)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected key=value", lineno + 1)));
            };
            let (key, raw) = (key.trim(), raw.trim());
            if seen.insert((section.header(), key.to_string()), ()).is_some() {
                return Err(Error::Config(format!("duplicate key `{key}` in {}", section.header())));
            }
            let handled = match section {
                Section::Top => cfg.set_top(key, raw)?,
                Section::Model => cfg.set_model(key, raw)?,
                Section::Training => match key.strip_prefix("stage").and_then(|n| n.parse::<usize>().ok()) {
                    Some(n) => {
                        stages.insert(n, parse_stage(key, raw)?);
                        true
                    }
                    None => cfg.set_training(key, raw)?,
                },
                Section::Data => cfg.set_data(key, raw)?,
            };
            if !handled {
                let where_ = if section == Section::Top {
                    "top level"
                } else {
                    section.header()
                };
                return Err(Error::Config(format!("unknown key `{key}` at {where_}")));
            }
        }
        if !stages.is_empty() {
            if stages.keys().copied().ne(1..=stages.len()) {
                return Err(Error::Config(
                    "stage keys must be stage1, stage2, ... without gaps".into(),
                ));
            }
            cfg.stages = stages.into_values().collect();
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::io(format!("reading {}", path.display())))?;
        Self::parse(&text)
    }

    fn set_top(&mut self, key: &str, raw: &str) -> Result<bool> {
        match key {
            "seed" => self.seed = value(key, raw)?,
            "out_dir" => self.out_dir = PathBuf::from(raw),
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn set_model(&mut self, key: &str, raw: &str) -> Result<bool> {
        let m = &mut self.model;
        match key {
            "enable_idem" => m.enable_idem = bool_value(key, raw)?,
            "fusion" => m.fusion = parse_fusion(raw)?,
            "action_shift" => m.action_shift = list_value(key, raw)?,
            "action_scale" => m.action_scale = list_value(key, raw)?,
            "idem.num_layers" => m.idem.num_layers = value(key, raw)?,
            "idem.boundary" => m.idem.boundary = value(key, raw)?,
            "idem.patch_size" => m.idem.patch_size = value(key, raw)?,
            "idem.token_dim" => m.idem.token_dim = value(key, raw)?,
            "idem.num_heads" => m.idem.num_heads = value(key, raw)?,
            "idem.num_views" => m.idem.num_views = value(key, raw)?,
            "idem.image_size" => m.idem.image_size = value(key, raw)?,
            "idem.cross_first" => m.idem.cross_first = bool_value(key, raw)?,
            "vlb.vision_layers" => m.vlb.vision_layers = value(key, raw)?,
            "vlb.language_layers_total" => m.vlb.language_layers_total = value(key, raw)?,
            "vlb.language_layers_kept" => m.vlb.language_layers_kept = value(key, raw)?,
            "vlb.hidden_dim" => m.vlb.hidden_dim = value(key, raw)?,
            "vlb.num_heads" => m.vlb.num_heads = value(key, raw)?,
            "vlb.vocab_size" => m.vlb.vocab_size = value(key, raw)?,
            "vlb.max_text_len" => m.vlb.max_text_len = value(key, raw)?,
            "vlb.patch_size" => m.vlb.patch_size = value(key, raw)?,
            "vlb.num_views" => m.vlb.num_views = value(key, raw)?,
            "vlb.image_size" => m.vlb.image_size = value(key, raw)?,
            "expert.chunk_size" => m.expert.horizon = value(key, raw)?,
            "expert.action_dim" => m.expert.action_dim = value(key, raw)?,
            "expert.state_dim" => m.expert.state_dim = value(key, raw)?,
            "expert.cond_dim" => m.expert.cond_dim = value(key, raw)?,
            "expert.hidden_dim" => m.expert.hidden_dim = value(key, raw)?,
            "expert.num_layers" => m.expert.num_layers = value(key, raw)?,
            "expert.num_heads" => m.expert.num_heads = value(key, raw)?,
            "expert.dropout" => m.expert.dropout = value(key, raw)?,
            "expert.denoise_steps" => m.expert.denoise_steps = value(key, raw)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn set_training(&mut self, key: &str, raw: &str) -> Result<bool> {
        let o = &mut self.optim;
        match key {
            "peak_lr" => o.peak_lr = value(key, raw)?,
            "weight_decay" => o.weight_decay = value(key, raw)?,
            "warmup_steps" => o.warmup_steps = value(key, raw)?,
            "clip_norm" => o.clip_norm = value(key, raw)?,
            "batch_size" => o.batch_size = value(key, raw)?,
            "beta1" => o.beta1 = value(key, raw)?,
            "beta2" => o.beta2 = value(key, raw)?,
            "eps" => o.eps = value(key, raw)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn set_data(&mut self, key: &str, raw: &str) -> Result<bool> {
        let d = &mut self.data;
        match key {
            "train_path" => d.train_path = Some(PathBuf::from(raw)),
            "val_path" => d.val_path = Some(PathBuf::from(raw)),
            "seed" => d.seed = value(key, raw)?,
            "train_size" => d.train_size = value(key, raw)?,
            "val_size" => d.val_size = value(key, raw)?,
            "num_objects" => d.num_objects = value(key, raw)?,
            "eval_scenes" => d.eval_scenes = value(key, raw)?,
            "mirror" => d.mirror = bool_value(key, raw)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn env(&self) -> EnvConfig {
        EnvConfig {
            image_size: self.model.vlb.image_size,
            num_objects: self.data.num_objects,
            horizon: self.model.expert.horizon,
            ..EnvConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optim.validate()?;
        // stages train the intersection with the modules the model has
        let present = self.model.modules();
        for (i, st) in self.stages.iter().enumerate() {
            if st.trainable.intersect(present) == ModuleSet::EMPTY {
                return Err(Error::Config(format!(
                    "stage {} trains {}, none of which the model contains",
                    i + 1,
                    st.trainable
                )));
            }
        }
        crate::train::validate_stages(&self.stages, &self.optim)?;
        let d = &self.data;
        for path in d.train_path.iter().chain(&d.val_path) {
            if !path.exists() {
                return Err(Error::Config(format!("dataset {} does not exist", path.display())));
            }
        }
        if d.train_size == 0 || d.val_size == 0 || d.eval_scenes == 0 {
            return Err(Error::Config("dataset sizes and eval_scenes must be positive".into()));
        }
        if d.num_objects == 0 {
            return Err(Error::Config("num_objects must be positive".into()));
        }
        let vocab = crate::env::Vocab::default().size();
        if self.model.vlb.vocab_size < vocab {
            return Err(Error::Config(format!(
                "vlb.vocab_size {} is smaller than the instruction vocabulary ({vocab})",
                self.model.vlb.vocab_size
            )));
        }
        if self.model.expert.action_dim != crate::env::ACTION_DIM
            || self.model.expert.state_dim != crate::env::STATE_DIM
        {
            return Err(Error::Config(format!(
                "expert action/state dims must be {}/{}",
                crate::env::ACTION_DIM,
                crate::env::STATE_DIM
            )));
        }
        Ok(())
    }

    /// Replaces the stage list with the `count`-stage variant that spends
    /// the same total number of steps.
    pub fn with_stage_count(mut self, count: usize) -> Result<Self> {
        if self.stages.len() == count {
            return Ok(self);
        }
        let steps: [usize; 3] = match self.stages.as_slice() {
            [a, b, c] => [a.steps, b.steps, c.steps],
            _ => {
                return Err(Error::Config(format!(
                    "--stages {count} needs a three-stage base config, found {} stages",
                    self.stages.len()
                )))
            }
        };
        self.stages = StageConfig::variant(count, steps)?;
        Ok(self)
    }

    /// Training and validation demonstrations: read from the configured
    /// files, otherwise generated from `data.seed`.
    pub fn datasets(&self) -> Result<(Vec<Demonstration>, Vec<Demonstration>)> {
        let env = self.env();
        let d = &self.data;
        let load = |path: &Option<PathBuf>, size, split| -> Result<Vec<Demonstration>> {
            match path {
                Some(p) => Ok(read_dataset(p)?),
                None => Ok(generate_dataset(d.seed, size, split, &env)?),
            }
        };
        Ok((
            load(&d.train_path, d.train_size, Split::Train)?,
            load(&d.val_path, d.val_size, Split::Val)?,
        ))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_string()).map_err(Error::io(format!("writing {}", path.display())))
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = &self.model;
        let o = &self.optim;
        let d = &self.data;
        let mut s = String::new();
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "out_dir={}", self.out_dir.display());
        let _ = writeln!(s, "\n[model]");
        let _ = writeln!(s, "enable_idem={}", m.enable_idem);
        let _ = writeln!(s, "fusion={}", FusionName(m.fusion));
        let _ = writeln!(s, "action_shift={}", join(&m.action_shift));
        let _ = writeln!(s, "action_scale={}", join(&m.action_scale));
        let i = &m.idem;
        let _ = writeln!(s, "idem.num_layers={}", i.num_layers);
        let _ = writeln!(s, "idem.boundary={}", i.boundary);
        let _ = writeln!(s, "idem.patch_size={}", i.patch_size);
        let _ = writeln!(s, "idem.token_dim={}", i.token_dim);
        let _ = writeln!(s, "idem.num_heads={}", i.num_heads);
        let _ = writeln!(s, "idem.num_views={}", i.num_views);
        let _ = writeln!(s, "idem.image_size={}", i.image_size);
        let _ = writeln!(s, "idem.cross_first={}", i.cross_first);
        let v = &m.vlb;
        let _ = writeln!(s, "vlb.vision_layers={}", v.vision_layers);
        let _ = writeln!(s, "vlb.language_layers_total={}", v.language_layers_total);
        let _ = writeln!(s, "vlb.language_layers_kept={}", v.language_layers_kept);
        let _ = writeln!(s, "vlb.hidden_dim={}", v.hidden_dim);
        let _ = writeln!(s, "vlb.num_heads={}", v.num_heads);
        let _ = writeln!(s, "vlb.vocab_size={}", v.vocab_size);
        let _ = writeln!(s, "vlb.max_text_len={}", v.max_text_len);
        let _ = writeln!(s, "vlb.patch_size={}", v.patch_size);
        let _ = writeln!(s, "vlb.num_views={}", v.num_views);
        let _ = writeln!(s, "vlb.image_size={}", v.image_size);
        let e = &m.expert;
        let _ = writeln!(s, "expert.chunk_size={}", e.horizon);
        let _ = writeln!(s, "expert.action_dim={}", e.action_dim);
        let _ = writeln!(s, "expert.state_dim={}", e.state_dim);
        let _ = writeln!(s, "expert.cond_dim={}", e.cond_dim);
        let _ = writeln!(s, "expert.hidden_dim={}", e.hidden_dim);
        let _ = writeln!(s, "expert.num_layers={}", e.num_layers);
        let _ = writeln!(s, "expert.num_heads={}", e.num_heads);
        let _ = writeln!(s, "expert.dropout={}", e.dropout);
        let _ = writeln!(s, "expert.denoise_steps={}", e.denoise_steps);
        let _ = writeln!(s, "\n[training]");
        let _ = writeln!(s, "peak_lr={}", o.peak_lr);
        let _ = writeln!(s, "weight_decay={}", o.weight_decay);
        let _ = writeln!(s, "warmup_steps={}", o.warmup_steps);
        let _ = writeln!(s, "clip_norm={}", o.clip_norm);
        let _ = writeln!(s, "batch_size={}", o.batch_size);
        let _ = writeln!(s, "beta1={}", o.beta1);
        let _ = writeln!(s, "beta2={}", o.beta2);
        let _ = writeln!(s, "eps={}", o.eps);
        for (i, st) in self.stages.iter().enumerate() {
            let _ = writeln!(s, "stage{}={} {} {}", i + 1, st.name.as_str(), st.steps, st.trainable);
        }
        let _ = writeln!(s, "\n[data]");
        if let Some(p) = &d.train_path {
            let _ = writeln!(s, "train_path={}", p.display());
        }
        if let Some(p) = &d.val_path {
            let _ = writeln!(s, "val_path={}", p.display());
        }
        let _ = writeln!(s, "seed={}", d.seed);
        let _ = writeln!(s, "train_size={}", d.train_size);
        let _ = writeln!(s, "val_size={}", d.val_size);
        let _ = writeln!(s, "num_objects={}", d.num_objects);
        let _ = writeln!(s, "eval_scenes={}", d.eval_scenes);
        let _ = writeln!(s, "mirror={}", d.mirror);
        f.write_str(&s)
    }
}
