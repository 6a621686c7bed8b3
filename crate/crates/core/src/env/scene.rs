use rand::Rng;

use super::EnvError;

/// Target colors, named in instructions.
pub const PALETTE: [(&str, [u8; 3]); 5] = [
    ("red", [230, 40, 40]),
    ("green", [40, 200, 60]),
    ("blue", [50, 90, 240]),
    ("yellow", [240, 220, 40]),
    ("orange", [250, 140, 20]),
];

/// Held-out color used only by the distractor perturbation.
pub const DISTRACTOR_COLOR: [u8; 3] = [160, 60, 200];
pub(crate) const DISTRACTOR_INDEX: usize = PALETTE.len();
pub(crate) const EFFECTOR_COLOR: [u8; 3] = [255, 255, 255];
pub(crate) const DEFAULT_BACKGROUND: [u8; 3] = [0, 0, 0];

const REJECTION_ATTEMPTS: usize = 1000;

#[derive(Clone, Debug, PartialEq)]
pub struct Object {
    pub position: [f32; 3],
    /// Index into [`PALETTE`]; `PALETTE.len()` marks the distractor color.
    pub color: usize,
}

impl Object {
    pub fn rgb(&self) -> [u8; 3] {
        PALETTE.get(self.color).map_or(DISTRACTOR_COLOR, |c| c.1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub objects: Vec<Object>,
    pub target: usize,
    pub effector: [f32; 3],
    pub background: [u8; 3],
}

impl SceneSpec {
    pub fn target_position(&self) -> [f32; 3] {
        self.objects[self.target].position
    }

    pub fn target_color_name(&self) -> &'static str {
        PALETTE[self.objects[self.target].color].0
    }
}

pub fn distance(a: [f32; 3], b: [f32; 3]) -> f32 {
    a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f32>().sqrt()
}

/// Places a point in the unit cube at least `separation` from every point
/// of `taken`.
pub(crate) fn place<R: Rng + ?Sized>(rng: &mut R, taken: &[[f32; 3]], separation: f32) -> Option<[f32; 3]> {
    (0..REJECTION_ATTEMPTS).find_map(|_| {
        let p = [rng.gen::<f32>(), rng.gen::<f32>(), rng.gen::<f32>()];
        taken.iter().all(|&q| distance(p, q) >= separation).then_some(p)
    })
}

/// Samples objects with distinct palette colors, a uniformly random target
/// and a random effector start.
pub fn sample_scene<R: Rng + ?Sized>(rng: &mut R, num_objects: usize, separation: f32) -> Result<SceneSpec, EnvError> {
    if num_objects == 0 || num_objects > PALETTE.len() {
        return Err(EnvError::ObjectCount(num_objects));
    }
    let mut colors: Vec<usize> = (0..PALETTE.len()).collect();
    for i in 0..num_objects {
        let j = rng.gen_range(i..colors.len());
        colors.swap(i, j);
    }
    let mut positions = Vec::with_capacity(num_objects);
    for _ in 0..num_objects {
        let p = place(rng, &positions, separation).ok_or(EnvError::RejectionBudget {
            objects: num_objects,
            separation,
            attempts: REJECTION_ATTEMPTS,
        })?;
        positions.push(p);
    }
    let objects = positions
        .into_iter()
        .zip(colors)
        .map(|(position, color)| Object { position, color })
        .collect();
    let target = rng.gen_range(0..num_objects);
    let effector = [rng.gen::<f32>(), rng.gen::<f32>(), rng.gen::<f32>()];
    Ok(SceneSpec {
        objects,
        target,
        effector,
        background: DEFAULT_BACKGROUND,
    })
}
