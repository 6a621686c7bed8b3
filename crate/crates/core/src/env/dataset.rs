//! Demonstration generation and the `EVDS` dataset file.
//!
//! Layout (little-endian):
//!
//! ```text
//! "EVDS" | version u32 | count u32
//! per record:
//!   scene seed u64
//!   token count u16 | token ids u16...
//!   state count u16 | state f32...
//!   horizon u32 | action dim u32 | actions f32...
//!   2 × (height u16 | width u16 | RGB bytes)
//! ```

use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;

use super::expert::scripted_expert;
use super::instruction::{Instruction, Vocab};
use super::render::Image;
use super::rollout::{observe, MultiViewObservation};
use super::scene::{sample_scene, SceneSpec};
use super::{EnvConfig, EnvError};

pub const DATASET_MAGIC: &[u8; 4] = b"EVDS";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn id(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = EnvError;

    fn from_str(s: &str) -> Result<Self, EnvError> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(EnvError::UnknownSplit(other.to_string())),
        }
    }
}

/// Scene seed for record `index` of `split`. The split occupies the top two
/// bits, so seed ranges of different splits never intersect.
pub fn scene_seed(seed: u64, split: Split, index: u32) -> u64 {
    (split.id() << 62) | ((seed & 0x3FFF_FFFF) << 32) | u64::from(index)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Demonstration {
    pub scene_seed: u64,
    pub observation: MultiViewObservation,
    /// `[horizon × ACTION_DIM]` position deltas plus gripper.
    pub actions: Tensor,
}

impl Demonstration {
    pub fn scene(&self, cfg: &EnvConfig) -> Result<SceneSpec, EnvError> {
        scene_from_seed(self.scene_seed, cfg)
    }
}

pub fn scene_from_seed(scene_seed: u64, cfg: &EnvConfig) -> Result<SceneSpec, EnvError> {
    let mut rng = ChaCha8Rng::seed_from_u64(scene_seed);
    sample_scene(&mut rng, cfg.num_objects, cfg.min_separation)
}

pub fn make_demonstration(scene_seed: u64, cfg: &EnvConfig, vocab: &Vocab) -> Result<Demonstration, EnvError> {
    let scene = scene_from_seed(scene_seed, cfg)?;
    let observation = observe(&scene, 0.0, cfg, vocab);
    let actions = scripted_expert(scene.effector, scene.target_position(), cfg.horizon);
    Ok(Demonstration {
        scene_seed,
        observation,
        actions,
    })
}

pub fn generate_dataset(seed: u64, size: usize, split: Split, cfg: &EnvConfig) -> Result<Vec<Demonstration>, EnvError> {
    if size == 0 {
        return Err(EnvError::Format("dataset size must be at least 1".into()));
    }
    let vocab = Vocab::default();
    (0..size)
        .map(|i| {
            let index = u32::try_from(i).map_err(|_| EnvError::Format("dataset too large".into()))?;
            make_demonstration(scene_seed(seed, split, index), cfg, &vocab)
        })
        .collect()
}

fn u16_len(n: usize, what: &str) -> Result<u16, EnvError> {
    u16::try_from(n).map_err(|_| EnvError::Format(format!("{what} {n} exceeds u16")))
}

pub fn encode_dataset(demos: &[Demonstration]) -> Result<Vec<u8>, EnvError> {
    let mut out = Vec::new();
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    let count = u32::try_from(demos.len()).map_err(|_| EnvError::Format("too many records".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for d in demos {
        out.extend_from_slice(&d.scene_seed.to_le_bytes());
        let ids = &d.observation.instruction.token_ids;
        out.extend_from_slice(&u16_len(ids.len(), "token count")?.to_le_bytes());
        for &id in ids {
            out.extend_from_slice(&u16_len(id as usize, "token id")?.to_le_bytes());
        }
        let st = &d.observation.state;
        out.extend_from_slice(&u16_len(st.len(), "state size")?.to_le_bytes());
        for v in st {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let [h, a] = match d.actions.shape() {
            [h, a] => [*h, *a],
            s => return Err(EnvError::Format(format!("action chunk must be 2-D, got {s:?}"))),
        };
        out.extend_from_slice(&(h as u32).to_le_bytes());
        out.extend_from_slice(&(a as u32).to_le_bytes());
        for v in d.actions.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        if d.observation.views.len() != 2 {
            return Err(EnvError::Format(format!(
                "expected 2 views, got {}",
                d.observation.views.len()
            )));
        }
        for img in &d.observation.views {
            out.extend_from_slice(&u16_len(img.height, "image height")?.to_le_bytes());
            out.extend_from_slice(&u16_len(img.width, "image width")?.to_le_bytes());
            out.extend_from_slice(&img.data);
        }
    }
    Ok(out)
}

pub fn write_dataset(path: &Path, demos: &[Demonstration]) -> Result<(), EnvError> {
    fs::write(path, encode_dataset(demos)?)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], EnvError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| EnvError::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, EnvError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, EnvError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, EnvError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, EnvError> {
        Ok(self
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Vec<Demonstration>, EnvError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != DATASET_MAGIC {
        return Err(EnvError::Format("bad magic".into()));
    }
    let version = r.u32()?;
    if version != DATASET_VERSION {
        return Err(EnvError::Format(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let vocab_size = Vocab::default().size();
    let mut demos = Vec::with_capacity(count);
    for _ in 0..count {
        let scene_seed = r.u64()?;
        let n = r.u16()? as usize;
        let token_ids = (0..n).map(|_| r.u16().map(u32::from)).collect::<Result<Vec<_>, _>>()?;
        let n = r.u16()? as usize;
        let state = r.f32s(n)?;
        let (h, a) = (r.u32()? as usize, r.u32()? as usize);
        let actions = Tensor::new(vec![h, a], r.f32s(h * a)?)?;
        let mut views = Vec::with_capacity(2);
        for _ in 0..2 {
            let (height, width) = (r.u16()? as usize, r.u16()? as usize);
            let data = r.take(height * width * 3)?.to_vec();
            views.push(Image { height, width, data });
        }
        let instruction = Instruction { token_ids, vocab_size };
        instruction.validate()?;
        demos.push(Demonstration {
            scene_seed,
            observation: MultiViewObservation {
                views,
                instruction,
                state,
            },
            actions,
        });
    }
    if r.pos != bytes.len() {
        return Err(EnvError::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(demos)
}

pub fn read_dataset(path: &Path) -> Result<Vec<Demonstration>, EnvError> {
    decode_dataset(&fs::read(path)?)
}
