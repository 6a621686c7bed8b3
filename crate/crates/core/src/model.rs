//! The full policy: backbone, optional depth encoder and fusion, action head.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tensor, Var};
use crate::env::{Demonstration, MultiViewObservation};
use crate::error::{Error, Result};
use crate::expert::{ActionExpert, ExpertConfig, ExpertContext};
use crate::idem::{patch_pixels, IdemConfig, IdemEncoder};
use crate::nn::{Forward, ModuleKind, ModuleSet, ParamStore};
use crate::sem::{Fusion, FusionStrategy};
use crate::util::derive_seed;
use crate::vlb::{VlBackbone, VlbConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub idem: IdemConfig,
    pub vlb: VlbConfig,
    pub expert: ExpertConfig,
    pub enable_idem: bool,
    /// `None` only when the depth encoder is disabled.
    pub fusion: Option<FusionStrategy>,
    /// Per-dimension affine map into the space the expert works in:
    /// `(a − shift) · scale`.
    pub action_shift: Vec<f32>,
    pub action_scale: Vec<f32>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            idem: IdemConfig::default(),
            vlb: VlbConfig::default(),
            expert: ExpertConfig::default(),
            enable_idem: true,
            fusion: Some(FusionStrategy::Sem),
            action_shift: vec![0.0, 0.0, 0.0, 0.5],
            action_scale: vec![8.0, 8.0, 8.0, 2.0],
        }
    }
}

/// Displays a fusion choice, `none` when absent.
pub struct FusionName(pub Option<FusionStrategy>);

impl fmt::Display for FusionName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            Some(s) => write!(f, "{s}"),
            None => f.write_str("none"),
        }
    }
}

pub fn parse_fusion(s: &str) -> Result<Option<FusionStrategy>> {
    if s == "none" {
        Ok(None)
    } else {
        s.parse().map(Some)
    }
}

impl ModelConfig {
    pub fn without_idem(mut self) -> Self {
        self.enable_idem = false;
        self.fusion = None;
        self
    }

    pub fn with_fusion(mut self, fusion: FusionStrategy) -> Self {
        self.enable_idem = true;
        self.fusion = Some(fusion);
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.vlb.validate()?;
        self.expert.validate()?;
        match (self.enable_idem, self.fusion) {
            (false, Some(s)) => {
                return Err(Error::Config(format!("fusion `{s}` requires enable_idem=true")));
            }
            (true, None) => return Err(Error::Config("enable_idem=true needs a fusion strategy".into())),
            _ => {}
        }
        if self.enable_idem {
            self.idem.validate()?;
            let (i, v) = (&self.idem, &self.vlb);
            if i.patch_size != v.patch_size || i.image_size != v.image_size || i.num_views != v.num_views {
                return Err(Error::Config(
                    "idem and vlb must agree on patch_size, image_size and num_views".into(),
                ));
            }
        }
        let da = self.expert.action_dim;
        if self.action_shift.len() != da || self.action_scale.len() != da {
            return Err(Error::Config(format!(
                "action_shift and action_scale need {da} entries"
            )));
        }
        if self.action_scale.iter().any(|s| !(s.is_finite() && *s != 0.0))
            || self.action_shift.iter().any(|s| !s.is_finite())
        {
            return Err(Error::Config("action_scale must be finite and non-zero".into()));
        }
        if self.expert.cond_dim != self.vlb.hidden_dim {
            return Err(Error::Config(format!(
                "expert cond_dim {} must equal vlb hidden_dim {}",
                self.expert.cond_dim, self.vlb.hidden_dim
            )));
        }
        Ok(())
    }

    /// Modules that exist under this configuration.
    pub fn modules(&self) -> ModuleSet {
        let mut m = ModuleSet::of(&[ModuleKind::Vlb, ModuleKind::Expert]);
        if self.enable_idem {
            m.insert(ModuleKind::Idem);
            m.insert(ModuleKind::Sem);
        }
        m
    }
}

/// Model inputs for a batch of observations, stacked sample by sample.
#[derive(Clone, Debug)]
pub struct Batch {
    pub size: usize,
    /// `[B·N·P × patch²·3]`.
    pub pixels: Tensor,
    pub instructions: Vec<Vec<u32>>,
    /// `[B × state_dim]`.
    pub states: Tensor,
    /// `[B·H × action_dim]` when supervised.
    pub actions: Option<Tensor>,
}

/// Per-sample pieces of a [`Batch`], precomputed once per dataset.
#[derive(Clone, Debug)]
pub struct Sample {
    pub pixels: Tensor,
    pub instruction: Vec<u32>,
    pub state: Vec<f32>,
    pub actions: Option<Tensor>,
}

impl Sample {
    pub fn from_observation(obs: &MultiViewObservation, patch: usize) -> Result<Self> {
        Ok(Self {
            pixels: patch_pixels(&obs.views, patch)?,
            instruction: obs.instruction.token_ids.clone(),
            state: obs.state.clone(),
            actions: None,
        })
    }

    pub fn from_demonstration(demo: &Demonstration, patch: usize) -> Result<Self> {
        let mut s = Self::from_observation(&demo.observation, patch)?;
        s.actions = Some(demo.actions.clone());
        Ok(s)
    }
}

fn stack_rows(parts: &[&Tensor]) -> Result<Tensor> {
    let cols = parts[0].shape()[1];
    let mut data = Vec::new();
    let mut rows = 0;
    for p in parts {
        if p.rank() != 2 || p.shape()[1] != cols {
            return Err(Error::Invalid(format!(
                "cannot stack {:?} under width {cols}",
                p.shape()
            )));
        }
        rows += p.shape()[0];
        data.extend_from_slice(p.data());
    }
    Ok(Tensor::new(vec![rows, cols], data)?)
}

impl Batch {
    pub fn from_samples(samples: &[&Sample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        let pixels: Vec<&Tensor> = samples.iter().map(|s| &s.pixels).collect();
        let sd = samples[0].state.len();
        if sd == 0 || samples.iter().any(|s| s.state.len() != sd) {
            return Err(Error::Invalid("states in a batch must share a non-zero width".into()));
        }
        let states: Vec<f32> = samples.iter().flat_map(|s| s.state.iter().copied()).collect();
        let actions = if samples.iter().all(|s| s.actions.is_some()) {
            let a: Vec<&Tensor> = samples.iter().filter_map(|s| s.actions.as_ref()).collect();
            Some(stack_rows(&a)?)
        } else {
            None
        };
        Ok(Self {
            size: samples.len(),
            pixels: stack_rows(&pixels)?,
            instructions: samples.iter().map(|s| s.instruction.clone()).collect(),
            states: Tensor::new(vec![samples.len(), sd], states)?,
            actions,
        })
    }

    pub fn from_demonstrations(demos: &[Demonstration], patch: usize) -> Result<Self> {
        let samples = demos
            .iter()
            .map(|d| Sample::from_demonstration(d, patch))
            .collect::<Result<Vec<_>>>()?;
        Self::from_samples(&samples.iter().collect::<Vec<_>>())
    }

    pub fn from_observations(obs: &[&MultiViewObservation], patch: usize) -> Result<Self> {
        let samples = obs
            .iter()
            .map(|o| Sample::from_observation(o, patch))
            .collect::<Result<Vec<_>>>()?;
        Self::from_samples(&samples.iter().collect::<Vec<_>>())
    }
}

#[derive(Clone, Debug)]
pub struct EvoDepth {
    pub cfg: ModelConfig,
    pub vlb: VlBackbone,
    pub idem: Option<IdemEncoder>,
    pub fusion: Option<Fusion>,
    pub expert: ActionExpert,
}

impl EvoDepth {
    /// Builds the model and its parameters. Each module draws from its own
    /// stream derived from `seed`, so shared modules start identical across
    /// variants.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let stream = |k: ModuleKind| ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x1417, k as u64]));
        let vlb = VlBackbone::new(cfg.vlb.clone(), &mut store, &mut stream(ModuleKind::Vlb))?;
        let (idem, fusion) = match cfg.fusion {
            Some(strategy) => {
                let idem = IdemEncoder::new(cfg.idem.clone(), &mut store, &mut stream(ModuleKind::Idem))?;
                let fusion = Fusion::new(
                    strategy,
                    cfg.idem.token_dim,
                    cfg.vlb.hidden_dim,
                    cfg.vlb.num_heads,
                    &mut store,
                    &mut stream(ModuleKind::Sem),
                );
                (Some(idem), Some(fusion))
            }
            None => (None, None),
        };
        let expert = ActionExpert::new(cfg.expert.clone(), &mut store, &mut stream(ModuleKind::Expert))?;
        Ok((
            Self {
                cfg,
                vlb,
                idem,
                fusion,
                expert,
            },
            store,
        ))
    }

    pub fn patch_size(&self) -> usize {
        self.cfg.vlb.patch_size
    }

    /// Fused conditioning tokens `Ẑ`, `[B·T × hidden]`.
    pub fn enhanced_tokens(&self, f: &mut Forward<'_>, batch: &Batch) -> Result<Var> {
        let pixels = f.tape.constant(batch.pixels.clone());
        let ids: Vec<&[u32]> = batch.instructions.iter().map(Vec::as_slice).collect();
        let z = self.vlb.encode_pixels(f, pixels, &ids)?.tokens;
        match (&self.idem, &self.fusion) {
            (Some(idem), Some(fusion)) => {
                let tokens = idem.patchify_pixels(f, pixels, batch.size)?;
                let (depth, _) = idem.run(f, &tokens)?;
                fusion.fuse(f, z, depth.features, batch.size)
            }
            _ => Ok(z),
        }
    }

    pub fn context(&self, f: &mut Forward<'_>, batch: &Batch) -> Result<ExpertContext> {
        let cond = self.enhanced_tokens(f, batch)?;
        let states = f.tape.constant(batch.states.clone());
        self.expert.prepare_context(f, cond, states, batch.size)
    }

    /// Actions in the expert's working space.
    pub fn normalize_actions(&self, actions: &Tensor) -> Tensor {
        self.map_actions(actions, |x, shift, scale| (x - shift) * scale)
    }

    pub fn denormalize_actions(&self, actions: &Tensor) -> Tensor {
        self.map_actions(actions, |x, shift, scale| x / scale + shift)
    }

    fn map_actions(&self, actions: &Tensor, op: impl Fn(f32, f32, f32) -> f32) -> Tensor {
        let (shift, scale) = (&self.cfg.action_shift, &self.cfg.action_scale);
        let d = shift.len();
        let mut out = actions.clone();
        for (i, x) in out.data_mut().iter_mut().enumerate() {
            *x = op(*x, shift[i % d], scale[i % d]);
        }
        out
    }

    /// Flow-matching loss on a supervised batch.
    pub fn loss<R: Rng + ?Sized>(&self, f: &mut Forward<'_>, batch: &Batch, rng: &mut R) -> Result<Var> {
        let actions = batch
            .actions
            .as_ref()
            .ok_or_else(|| Error::Invalid("loss needs a batch with action chunks".into()))?;
        let ctx = self.context(f, batch)?;
        self.expert.loss(f, &ctx, &self.normalize_actions(actions), rng)
    }

    /// Sampled action chunks `[B·H × action_dim]` in evaluation mode.
    pub fn sample<R: Rng + ?Sized>(&self, store: &ParamStore, batch: &Batch, rng: &mut R) -> Result<Tensor> {
        let mut f = Forward::eval(store);
        let ctx = self.context(&mut f, batch)?;
        Ok(self.denormalize_actions(&self.expert.sample(&mut f, &ctx, rng)?))
    }

    /// One chunk for a single observation.
    pub fn act<R: Rng + ?Sized>(&self, store: &ParamStore, obs: &MultiViewObservation, rng: &mut R) -> Result<Tensor> {
        let batch = Batch::from_observations(&[obs], self.patch_size())?;
        self.sample(store, &batch, rng)
    }
}
