//! Two-camera reach task whose target depth is only recoverable by
//! combining both views.
//!
//! The front camera sees `(x, z)`, the top camera sees `(x, y)`. Each object
//! is a small colored square; the effector is a white square drawn last.

mod dataset;
mod expert;
mod instruction;
mod mirror;
mod perturb;
mod render;
mod rollout;
mod scene;

use thiserror::Error;

use crate::autodiff::TensorError;

pub use dataset::{
    decode_dataset, encode_dataset, generate_dataset, make_demonstration, read_dataset, scene_from_seed, scene_seed,
    write_dataset, Demonstration, Split, DATASET_MAGIC, DATASET_VERSION,
};
pub use expert::scripted_expert;
pub use instruction::{instruction_for, Instruction, Vocab};
pub use mirror::{flip_image, Mirror};
pub use perturb::{perturb, Perturbation};
pub use render::{render, Image, RenderedViews};
pub use rollout::{observe, rollout, MultiViewObservation, RolloutResult};
pub use scene::{distance, sample_scene, Object, SceneSpec, DISTRACTOR_COLOR, PALETTE};

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("could not place {objects} objects with separation {separation} after {attempts} attempts")]
    RejectionBudget {
        objects: usize,
        separation: f32,
        attempts: usize,
    },
    #[error("object count {0} outside 1..={max}", max = PALETTE.len())]
    ObjectCount(usize),
    #[error("unknown perturbation `{0}` (expected background, distractor, horizontal or height)")]
    UnknownPerturbation(String),
    #[error("unknown split `{0}` (expected train, val or test)")]
    UnknownSplit(String),
    #[error("malformed dataset: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Environment constants.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvConfig {
    pub image_size: usize,
    /// Side of each rendered square in pixels.
    pub square: usize,
    pub num_objects: usize,
    pub horizon: usize,
    pub success_radius: f32,
    pub min_separation: f32,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            square: 3,
            num_objects: 3,
            horizon: 8,
            success_radius: 0.05,
            min_separation: 0.08,
        }
    }
}

/// Action rows are `(dx, dy, dz, gripper)`; the state is
/// `(x, y, z, gripper)`.
pub const ACTION_DIM: usize = 4;
pub const STATE_DIM: usize = 4;
