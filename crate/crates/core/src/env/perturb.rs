use std::fmt;
use std::str::FromStr;

use rand::Rng;

use super::scene::{place, Object, SceneSpec, DISTRACTOR_INDEX};
use super::EnvError;

pub(crate) const PERTURBED_BACKGROUND: [u8; 3] = [90, 90, 90];
const SHIFT: f32 = 0.1;

/// Test-time disturbances.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Perturbation {
    Background,
    Distractor,
    Horizontal,
    Height,
}

impl Perturbation {
    pub const ALL: [Perturbation; 4] = [Self::Background, Self::Distractor, Self::Horizontal, Self::Height];

    pub fn name(self) -> &'static str {
        match self {
            Self::Background => "background",
            Self::Distractor => "distractor",
            Self::Horizontal => "horizontal",
            Self::Height => "height",
        }
    }
}

impl fmt::Display for Perturbation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Perturbation {
    type Err = EnvError;

    fn from_str(s: &str) -> Result<Self, EnvError> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| EnvError::UnknownPerturbation(s.to_string()))
    }
}

fn shift<R: Rng + ?Sized>(v: &mut f32, rng: &mut R) {
    let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
    *v = (*v + sign * SHIFT).clamp(0.0, 1.0);
}

/// Applies one disturbance. The instruction is unaffected by construction:
/// the target keeps its color and index.
pub fn perturb<R: Rng + ?Sized>(scene: &SceneSpec, kind: Perturbation, rng: &mut R, min_separation: f32) -> SceneSpec {
    let mut s = scene.clone();
    match kind {
        Perturbation::Background => s.background = PERTURBED_BACKGROUND,
        Perturbation::Distractor => {
            let taken: Vec<_> = s.objects.iter().map(|o| o.position).collect();
            let position = place(rng, &taken, min_separation)
                .unwrap_or_else(|| [rng.gen::<f32>(), rng.gen::<f32>(), rng.gen::<f32>()]);
            s.objects.push(Object {
                position,
                color: DISTRACTOR_INDEX,
            });
        }
        Perturbation::Horizontal => {
            let axis = rng.gen_range(0..2);
            shift(&mut s.objects[s.target].position[axis], rng);
        }
        Perturbation::Height => shift(&mut s.objects[s.target].position[2], rng),
    }
    s
}
