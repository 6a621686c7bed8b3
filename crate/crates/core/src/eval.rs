//! Validation error, closed-loop success rates and perturbation sweeps.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::env::{
    perturb, rollout, scene_from_seed, scene_seed, scripted_expert, Demonstration, EnvConfig, MultiViewObservation,
    Perturbation, SceneSpec, Split, Vocab,
};
use crate::error::{Error, Result};
use crate::model::{Batch, EvoDepth, Sample};
use crate::nn::ParamStore;
use crate::util::derive_seed;

/// Chunks evaluated per forward pass.
const EVAL_BATCH: usize = 32;

/// Anything that maps an observation to an action chunk.
pub trait Policy {
    fn act(&mut self, obs: &MultiViewObservation) -> Result<Tensor>;

    /// Called before each episode with the scene about to be played.
    fn reset(&mut self, _scene: &SceneSpec) {}
}

/// The trained model with a dedicated noise stream.
pub struct ModelPolicy<'a> {
    pub model: &'a EvoDepth,
    pub store: &'a ParamStore,
    pub rng: ChaCha8Rng,
}

impl<'a> ModelPolicy<'a> {
    pub fn new(model: &'a EvoDepth, store: &'a ParamStore, seed: u64) -> Self {
        Self {
            model,
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl Policy for ModelPolicy<'_> {
    fn act(&mut self, obs: &MultiViewObservation) -> Result<Tensor> {
        self.model.act(self.store, obs, &mut self.rng)
    }
}

/// The scripted expert, given privileged access to the target.
pub struct ScriptedPolicy {
    pub horizon: usize,
    target: [f32; 3],
}

impl ScriptedPolicy {
    pub fn new(horizon: usize) -> Self {
        Self {
            horizon,
            target: [0.0; 3],
        }
    }
}

impl Policy for ScriptedPolicy {
    fn act(&mut self, obs: &MultiViewObservation) -> Result<Tensor> {
        let s = &obs.state;
        Ok(scripted_expert([s[0], s[1], s[2]], self.target, self.horizon))
    }

    fn reset(&mut self, scene: &SceneSpec) {
        self.target = scene.target_position();
    }
}

/// Emits all-zero chunks.
pub struct ZeroPolicy {
    pub horizon: usize,
    pub action_dim: usize,
}

impl Policy for ZeroPolicy {
    fn act(&mut self, _obs: &MultiViewObservation) -> Result<Tensor> {
        Ok(Tensor::zeros(&[self.horizon, self.action_dim]))
    }
}

/// `k` held-out scenes drawn from the test split of `seed`.
pub fn eval_scenes(seed: u64, k: usize, env: &EnvConfig) -> Result<Vec<SceneSpec>> {
    (0..k)
        .map(|i| Ok(scene_from_seed(scene_seed(seed, Split::Test, i as u32), env)?))
        .collect()
}

/// Applies `kind` to every scene with a per-scene stream.
pub fn perturb_scenes(scenes: &[SceneSpec], kind: Perturbation, seed: u64, env: &EnvConfig) -> Vec<SceneSpec> {
    scenes
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x9e7, kind as u64, i as u64]));
            perturb(s, kind, &mut rng, env.min_separation)
        })
        .collect()
}

/// Episode budget: three chunks.
pub fn max_steps(env: &EnvConfig) -> usize {
    3 * env.horizon
}

pub fn success_rate<P: Policy>(policy: &mut P, scenes: &[SceneSpec], env: &EnvConfig, vocab: &Vocab) -> Result<f64> {
    if scenes.is_empty() {
        return Err(Error::Invalid("no evaluation scenes".into()));
    }
    let mut wins = 0usize;
    for scene in scenes {
        policy.reset(scene);
        let r = rollout(|o| policy.act(o), scene, env, vocab, max_steps(env))?;
        wins += usize::from(r.success);
    }
    Ok(wins as f64 / scenes.len() as f64)
}

/// Mean squared error between sampled and demonstrated chunks. The noise
/// for demonstration `i` comes from a stream keyed by `(seed, i)`.
pub fn validation_mse(model: &EvoDepth, store: &ParamStore, demos: &[Demonstration], seed: u64) -> Result<f64> {
    if demos.is_empty() {
        return Err(Error::Invalid("validation set is empty".into()));
    }
    let samples = demos
        .iter()
        .map(|d| Sample::from_demonstration(d, model.patch_size()))
        .collect::<Result<Vec<_>>>()?;
    let (mut sq, mut n) = (0f64, 0usize);
    for (c, chunk) in samples.chunks(EVAL_BATCH).enumerate() {
        let batch = Batch::from_samples(&chunk.iter().collect::<Vec<_>>())?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x3a1, c as u64]));
        let pred = model.sample(store, &batch, &mut rng)?;
        let truth = batch.actions.as_ref().expect("demonstrations carry actions");
        for (p, t) in pred.data().iter().zip(truth.data()) {
            let d = *p as f64 - *t as f64;
            sq += d * d;
        }
        n += truth.numel();
    }
    Ok(sq / n as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub scenes: usize,
    pub seed: u64,
    pub success_rate: f64,
    pub val_mse: Option<f64>,
    pub perturbations: Vec<(Perturbation, f64)>,
}

impl EvalReport {
    /// `key=value` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "scenes={}", self.scenes);
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "success_rate={:.4}", self.success_rate);
        if let Some(m) = self.val_mse {
            let _ = writeln!(s, "val_mse={m:.6e}");
        }
        for (k, r) in &self.perturbations {
            let _ = writeln!(s, "success_rate.{}={r:.4}", k.name());
        }
        s
    }
}

/// Success on `scenes` held-out scenes plus one rate per requested
/// perturbation.
pub fn evaluate<P: Policy>(
    policy: &mut P,
    env: &EnvConfig,
    scenes: usize,
    seed: u64,
    kinds: &[Perturbation],
) -> Result<EvalReport> {
    let vocab = Vocab::default();
    let base = eval_scenes(seed, scenes, env)?;
    let success_rate = success_rate(policy, &base, env, &vocab)?;
    let perturbations = kinds
        .iter()
        .map(|&k| {
            let scenes = perturb_scenes(&base, k, seed, env);
            Ok((k, self::success_rate(policy, &scenes, env, &vocab)?))
        })
        .collect::<Result<_>>()?;
    Ok(EvalReport {
        scenes,
        seed,
        success_rate,
        val_mse: None,
        perturbations,
    })
}
