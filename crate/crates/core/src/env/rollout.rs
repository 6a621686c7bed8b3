use crate::autodiff::Tensor;

use super::instruction::{instruction_for, Instruction, Vocab};
use super::render::{render, Image};
use super::scene::{distance, SceneSpec};
use super::EnvConfig;

/// What the policy sees at one timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiViewObservation {
    /// Front view then top view.
    pub views: Vec<Image>,
    pub instruction: Instruction,
    /// `(x, y, z, gripper)`.
    pub state: Vec<f32>,
}

pub fn observe(scene: &SceneSpec, gripper: f32, cfg: &EnvConfig, vocab: &Vocab) -> MultiViewObservation {
    let e = scene.effector;
    MultiViewObservation {
        views: render(scene, cfg.image_size, cfg.square).into_vec(),
        instruction: instruction_for(scene, vocab),
        state: vec![e[0], e[1], e[2], gripper],
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutResult {
    /// Effector positions, starting with the initial one.
    pub trajectory: Vec<[f32; 3]>,
    pub success: bool,
    pub steps: usize,
}

/// Executes predicted chunks closed-loop, re-rendering after every chunk.
/// Succeeds once the effector is within `cfg.success_radius` of the target.
pub fn rollout<E>(
    mut policy: impl FnMut(&MultiViewObservation) -> Result<Tensor, E>,
    scene: &SceneSpec,
    cfg: &EnvConfig,
    vocab: &Vocab,
    max_steps: usize,
) -> Result<RolloutResult, E> {
    let mut scene = scene.clone();
    let target = scene.target_position();
    let mut gripper = 0.0f32;
    let mut trajectory = vec![scene.effector];
    let mut steps = 0;
    let reached = |p: [f32; 3]| distance(p, target) <= cfg.success_radius;
    if reached(scene.effector) {
        return Ok(RolloutResult {
            trajectory,
            success: true,
            steps,
        });
    }
    while steps < max_steps {
        let obs = observe(&scene, gripper, cfg, vocab);
        let chunk = policy(&obs)?;
        let cols = chunk.shape().last().copied().unwrap_or(0);
        for row in chunk.data().chunks(cols.max(1)) {
            if steps >= max_steps {
                break;
            }
            for axis in 0..3.min(row.len()) {
                let d = if row[axis].is_finite() { row[axis] } else { 0.0 };
                scene.effector[axis] = (scene.effector[axis] + d).clamp(0.0, 1.0);
            }
            if let Some(&g) = row.get(3) {
                gripper = if g.is_finite() { g.clamp(0.0, 1.0) } else { gripper };
            }
            steps += 1;
            trajectory.push(scene.effector);
            if reached(scene.effector) {
                return Ok(RolloutResult {
                    trajectory,
                    success: true,
                    steps,
                });
            }
        }
    }
    Ok(RolloutResult {
        trajectory,
        success: false,
        steps,
    })
}
