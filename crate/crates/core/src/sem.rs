//! Injecting implicit depth features into vision-language tokens.
//!
//! The spatial enhancement module projects depth tokens into the hidden
//! width, mean-pools them into one descriptor, and predicts a channel-wise
//! scale and shift applied to every token:
//!
//! ```text
//! g = mean_tokens(P·D)      (γ − 1, β) = head(g)      Ẑ = γ ⊙ Z + β
//! ```
//!
//! The head's last layer starts at zero, so a fresh module returns `Z`
//! unchanged. Concatenation and cross-attention are kept as alternative
//! strategies behind the same [`Fusion::fuse`] call.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{concat_tokens, Attention, Forward, Init, Linear, ModuleKind, ParamStore, Scope};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FusionStrategy {
    Sem,
    Concat,
    CrossAttention,
}

impl FusionStrategy {
    pub const ALL: [FusionStrategy; 3] = [Self::Sem, Self::Concat, Self::CrossAttention];

    pub fn name(self) -> &'static str {
        match self {
            Self::Sem => "sem",
            Self::Concat => "concat",
            Self::CrossAttention => "crossattention",
        }
    }
}

impl fmt::Display for FusionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown fusion `{s}` (expected sem, concat or crossattention)")))
    }
}

/// Channel-wise modulation for each sample, `[B × hidden]` each.
pub struct ModulationParams {
    pub gamma: Var,
    pub beta: Var,
}

fn rows_per_sample(f: &Forward<'_>, x: Var, batch: usize, what: &str) -> Result<usize> {
    let rows = f.tape.shape(x)[0];
    if batch == 0 || rows % batch != 0 || rows / batch == 0 {
        return Err(Error::Invalid(format!(
            "{what}: {rows} rows cannot form {batch} non-empty samples"
        )));
    }
    Ok(rows / batch)
}

/// Per-sample token mean, `[B·T × C]` → `[B × C]`.
pub fn pool(f: &mut Forward<'_>, projected: Var, batch: usize) -> Result<Var> {
    let t = rows_per_sample(f, projected, batch, "pool")?;
    let c = f.tape.shape(projected)[1];
    let x = f.tape.reshape(projected, &[batch, t, c])?;
    Ok(f.tape.mean(x, 1)?)
}

/// `γ ⊙ z + β` row by row, with `γ`, `β` broadcast over each sample's
/// tokens.
pub fn apply_film(f: &mut Forward<'_>, z: Var, m: &ModulationParams, batch: usize) -> Result<Var> {
    let t = rows_per_sample(f, z, batch, "apply_film")?;
    let gamma = f.tape.repeat_rows(m.gamma, t)?;
    let beta = f.tape.repeat_rows(m.beta, t)?;
    let scaled = f.tape.mul(z, gamma)?;
    Ok(f.tape.add(scaled, beta)?)
}

#[derive(Clone, Debug)]
pub struct SpatialEnhancement {
    pub project: Linear,
    pub head_fc1: Linear,
    pub head_fc2: Linear,
    pub hidden: usize,
}

impl SpatialEnhancement {
    pub fn new<R: Rng>(token_dim: usize, hidden: usize, store: &mut ParamStore, rng: &mut R) -> Self {
        let mut s = Scope::new(store, rng, ModuleKind::Sem, "sem");
        Self {
            project: Linear::new(&mut s, "project", token_dim, hidden),
            head_fc1: Linear::new(&mut s, "head_fc1", hidden, hidden),
            head_fc2: Linear::with_init(&mut s, "head_fc2", hidden, 2 * hidden, Init::Zeros),
            hidden,
        }
    }

    pub fn project_depth(&self, f: &mut Forward<'_>, depth: Var) -> Result<Var> {
        Ok(self.project.forward(f, depth)?)
    }

    /// Raw head output `[B × 2·hidden]` for descriptors `g`.
    pub fn head(&self, f: &mut Forward<'_>, g: Var) -> Result<Var> {
        let h = self.head_fc1.forward(f, g)?;
        let h = f.tape.gelu(h);
        Ok(self.head_fc2.forward(f, h)?)
    }

    pub fn modulation(&self, f: &mut Forward<'_>, g: Var) -> Result<ModulationParams> {
        let out = self.head(f, g)?;
        let delta = f.tape.narrow(out, 1, 0, self.hidden)?;
        let beta = f.tape.narrow(out, 1, self.hidden, self.hidden)?;
        let gamma = f.tape.add_scalar(delta, 1.0);
        Ok(ModulationParams { gamma, beta })
    }

    pub fn fuse(&self, f: &mut Forward<'_>, z: Var, depth: Var, batch: usize) -> Result<Var> {
        let projected = self.project_depth(f, depth)?;
        let g = pool(f, projected, batch)?;
        let m = self.modulation(f, g)?;
        apply_film(f, z, &m, batch)
    }
}

#[derive(Clone, Debug)]
pub struct ConcatFusion {
    pub project: Linear,
}

impl ConcatFusion {
    pub fn new<R: Rng>(token_dim: usize, hidden: usize, store: &mut ParamStore, rng: &mut R) -> Self {
        let mut s = Scope::new(store, rng, ModuleKind::Sem, "sem");
        Self {
            project: Linear::new(&mut s, "project", token_dim, hidden),
        }
    }

    /// Appends the projected depth tokens after each sample's `Z` tokens.
    pub fn fuse(&self, f: &mut Forward<'_>, z: Var, depth: Var, batch: usize) -> Result<Var> {
        rows_per_sample(f, depth, batch, "concat fusion")?;
        let p = self.project.forward(f, depth)?;
        Ok(concat_tokens(f, z, p, batch)?)
    }
}

#[derive(Clone, Debug)]
pub struct CrossAttentionFusion {
    pub project: Linear,
    pub attn: Attention,
}

impl CrossAttentionFusion {
    pub fn new<R: Rng>(token_dim: usize, hidden: usize, heads: usize, store: &mut ParamStore, rng: &mut R) -> Self {
        let mut s = Scope::new(store, rng, ModuleKind::Sem, "sem");
        Self {
            project: Linear::new(&mut s, "project", token_dim, hidden),
            attn: Attention::with_output_init(&mut s, "cross", hidden, hidden, heads, Init::Zeros),
        }
    }

    /// `Z + Attn(Q = Z, K = V = projected depth)`.
    pub fn fuse(&self, f: &mut Forward<'_>, z: Var, depth: Var, batch: usize) -> Result<Var> {
        let p = self.project.forward(f, depth)?;
        let a = self.attn.forward(f, z, p, batch, None)?;
        Ok(f.tape.add(z, a.out)?)
    }
}

#[derive(Clone, Debug)]
pub enum Fusion {
    Sem(SpatialEnhancement),
    Concat(ConcatFusion),
    CrossAttention(CrossAttentionFusion),
}

impl Fusion {
    pub fn new<R: Rng>(
        strategy: FusionStrategy,
        token_dim: usize,
        hidden: usize,
        heads: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Self {
        match strategy {
            FusionStrategy::Sem => Self::Sem(SpatialEnhancement::new(token_dim, hidden, store, rng)),
            FusionStrategy::Concat => Self::Concat(ConcatFusion::new(token_dim, hidden, store, rng)),
            FusionStrategy::CrossAttention => {
                Self::CrossAttention(CrossAttentionFusion::new(token_dim, hidden, heads, store, rng))
            }
        }
    }

    pub fn strategy(&self) -> FusionStrategy {
        match self {
            Self::Sem(_) => FusionStrategy::Sem,
            Self::Concat(_) => FusionStrategy::Concat,
            Self::CrossAttention(_) => FusionStrategy::CrossAttention,
        }
    }

    /// Fuses `z` (`[B·Tz × hidden]`) with depth tokens (`[B·Td × token_dim]`).
    pub fn fuse(&self, f: &mut Forward<'_>, z: Var, depth: Var, batch: usize) -> Result<Var> {
        match self {
            Self::Sem(m) => m.fuse(f, z, depth, batch),
            Self::Concat(m) => m.fuse(f, z, depth, batch),
            Self::CrossAttention(m) => m.fuse(f, z, depth, batch),
        }
    }
}
