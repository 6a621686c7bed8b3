//! Named parameters, freeze masks and the layers shared by every module.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Result, Tape, Tensor, TensorError, Var};

pub const LN_EPS: f32 = 1e-5;
pub const INIT_STD: f32 = 0.02;

/// The four trainable components of the policy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModuleKind {
    Vlb,
    Idem,
    Sem,
    Expert,
}

impl ModuleKind {
    pub const ALL: [ModuleKind; 4] = [Self::Vlb, Self::Idem, Self::Sem, Self::Expert];

    pub fn name(self) -> &'static str {
        match self {
            Self::Vlb => "VLB",
            Self::Idem => "IDEM",
            Self::Sem => "SEM",
            Self::Expert => "EXPERT",
        }
    }

    fn bit(self) -> u8 {
        1 << (self as u8)
    }
}

impl fmt::Display for ModuleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModuleKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim().to_ascii_uppercase().as_str() {
            "VLB" | "VLM" => Ok(Self::Vlb),
            "IDEM" => Ok(Self::Idem),
            "SEM" => Ok(Self::Sem),
            "EXPERT" | "ACTION_EXPERT" => Ok(Self::Expert),
            other => Err(format!("unknown module `{other}`")),
        }
    }
}

/// Set of modules, used as a freeze mask.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct ModuleSet(u8);

impl ModuleSet {
    pub const EMPTY: ModuleSet = ModuleSet(0);

    pub fn all() -> Self {
        Self::of(&ModuleKind::ALL)
    }

    pub fn of(kinds: &[ModuleKind]) -> Self {
        Self(kinds.iter().fold(0, |acc, k| acc | k.bit()))
    }

    pub fn contains(self, kind: ModuleKind) -> bool {
        self.0 & kind.bit() != 0
    }

    pub fn insert(&mut self, kind: ModuleKind) {
        self.0 |= kind.bit();
    }

    pub fn intersect(self, other: ModuleSet) -> ModuleSet {
        ModuleSet(self.0 & other.0)
    }

    pub fn iter(self) -> impl Iterator<Item = ModuleKind> {
        ModuleKind::ALL.into_iter().filter(move |k| self.contains(*k))
    }
}

impl fmt::Display for ModuleSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<_> = self.iter().map(ModuleKind::name).collect();
        f.write_str(&names.join("+"))
    }
}

impl FromStr for ModuleSet {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let mut set = ModuleSet::EMPTY;
        for part in s.split(['+', ',']).filter(|p| !p.trim().is_empty()) {
            set.insert(part.parse()?);
        }
        Ok(set)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }

    pub(crate) fn from_index(i: usize) -> Self {
        Self(i)
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub module: ModuleKind,
    pub value: Tensor,
    /// Whether weight decay applies.
    pub decay: bool,
}

/// Owns every parameter tensor of a model, addressable by id or name.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, module: ModuleKind, value: Tensor, decay: bool) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter `{name}`");
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            module,
            value,
            decay,
        });
        id
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn num_scalars(&self, module: Option<ModuleKind>) -> usize {
        self.params
            .iter()
            .filter(|p| module.map_or(true, |m| p.module == m))
            .map(|p| p.value.numel())
            .sum()
    }

    /// FNV-1a over the raw bits of every parameter of `module`.
    pub fn checksum(&self, module: ModuleKind) -> u64 {
        let mut h = crate::util::Fnv64::new();
        for p in self.params.iter().filter(|p| p.module == module) {
            h.write(p.name.as_bytes());
            for v in p.value.data() {
                h.write(&v.to_bits().to_le_bytes());
            }
        }
        h.finish()
    }

    /// Copies every parameter whose name also exists in `other` with the
    /// same shape. Returns how many were copied.
    pub fn copy_matching(&mut self, other: &ParamStore) -> usize {
        let mut n = 0;
        for p in &mut self.params {
            if let Some(id) = other.find(&p.name) {
                let src = &other.get(id).value;
                if src.shape() == p.value.shape() {
                    p.value = src.clone();
                    n += 1;
                }
            }
        }
        n
    }
}

/// One forward evaluation: a tape plus the parameter bindings and dropout
/// stream used while building it.
pub struct Forward<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    trainable: ModuleSet,
    bound: Vec<Option<Var>>,
    rng: Option<ChaCha8Rng>,
}

impl<'a> Forward<'a> {
    /// Evaluation mode: no parameter requires gradients, dropout disabled.
    pub fn eval(store: &'a ParamStore) -> Self {
        Self::new(store, ModuleSet::EMPTY, None)
    }

    /// Training mode: parameters of `trainable` modules require gradients;
    /// dropout draws from `rng` when present.
    pub fn new(store: &'a ParamStore, trainable: ModuleSet, rng: Option<ChaCha8Rng>) -> Self {
        Self {
            tape: Tape::new(),
            store,
            trainable,
            bound: vec![None; store.len()],
            rng,
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn training(&self) -> bool {
        self.rng.is_some()
    }

    /// The tape handle for a parameter, created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let p = self.store.get(id);
        let grad = self.trainable.contains(p.module);
        let v = self.tape.leaf(p.value.clone().with_grad(grad));
        self.bound[id.0] = Some(v);
        v
    }

    pub fn dropout(&mut self, x: Var, rate: f32) -> Result<Var> {
        self.tape.dropout(x, rate, self.rng.as_mut())
    }

    /// Gradients of every trainable parameter. Parameters that were never
    /// bound, or not reached by the loss, get zeros.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(ParamId, Tensor)> {
        self.store
            .iter()
            .filter(|(_, p)| self.trainable.contains(p.module))
            .map(|(id, p)| {
                let g = match self.bound[id.0] {
                    Some(v) => grads.wrt(v),
                    None => Tensor::zeros(p.value.shape()),
                };
                (id, g)
            })
            .collect()
    }
}

/// Parameter initializers used across the model.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    TruncNormal(f32),
    Zeros,
}

impl Init {
    fn make(self, shape: &[usize], rng: &mut impl Rng) -> Tensor {
        match self {
            Init::TruncNormal(std) => Tensor::trunc_normal(shape, std, rng),
            Init::Zeros => Tensor::zeros(shape),
        }
    }
}

/// Builder that prefixes parameter names and tags them with a module.
pub struct Scope<'s, R: Rng> {
    pub store: &'s mut ParamStore,
    pub rng: &'s mut R,
    pub module: ModuleKind,
    pub prefix: String,
}

impl<'s, R: Rng> Scope<'s, R> {
    pub fn new(store: &'s mut ParamStore, rng: &'s mut R, module: ModuleKind, prefix: &str) -> Self {
        Self {
            store,
            rng,
            module,
            prefix: prefix.to_string(),
        }
    }

    pub fn sub(&mut self, name: &str) -> Scope<'_, R> {
        Scope {
            store: self.store,
            rng: self.rng,
            module: self.module,
            prefix: format!("{}.{name}", self.prefix),
        }
    }

    pub fn tensor(&mut self, name: &str, shape: &[usize], init: Init, decay: bool) -> ParamId {
        let t = init.make(shape, self.rng);
        self.store.add(format!("{}.{name}", self.prefix), self.module, t, decay)
    }

    /// Adds a parameter with a precomputed initial value.
    pub fn table(&mut self, name: &str, value: Tensor, decay: bool) -> ParamId {
        self.store
            .add(format!("{}.{name}", self.prefix), self.module, value, decay)
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.store.add(
            format!("{}.{name}", self.prefix),
            self.module,
            Tensor::ones(shape),
            false,
        )
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(s: &mut Scope<'_, R>, name: &str, in_dim: usize, out_dim: usize) -> Self {
        Self::with_init(s, name, in_dim, out_dim, Init::TruncNormal(INIT_STD))
    }

    pub fn with_init<R: Rng>(s: &mut Scope<'_, R>, name: &str, in_dim: usize, out_dim: usize, init: Init) -> Self {
        let mut s = s.sub(name);
        Self {
            weight: s.tensor("weight", &[in_dim, out_dim], init, true),
            bias: s.tensor("bias", &[out_dim], Init::Zeros, false),
            in_dim,
            out_dim,
        }
    }

    /// `x·W + b` for `x` of shape `[rows × in_dim]`.
    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let (w, b) = (f.param(self.weight), f.param(self.bias));
        let y = f.tape.matmul(x, w)?;
        f.tape.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<R: Rng>(s: &mut Scope<'_, R>, name: &str, dim: usize) -> Self {
        let mut s = s.sub(name);
        Self {
            gain: s.ones("gain", &[dim]),
            bias: s.tensor("bias", &[dim], Init::Zeros, false),
        }
    }

    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let (g, b) = (f.param(self.gain), f.param(self.bias));
        f.tape.layernorm(x, g, b, LN_EPS)
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<R: Rng>(s: &mut Scope<'_, R>, name: &str, dim: usize, hidden: usize) -> Self {
        let mut s = s.sub(name);
        Self {
            fc1: Linear::new(&mut s, "fc1", dim, hidden),
            fc2: Linear::new(&mut s, "fc2", hidden, dim),
        }
    }

    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(f, x)?;
        let h = f.tape.gelu(h);
        self.fc2.forward(f, h)
    }
}

/// Multi-head attention with separate query / key / value / output maps.
/// Self-attention passes the same tensor as queries and context.
#[derive(Clone, Debug)]
pub struct Attention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

/// Output of an attention layer with the handle of its weight node.
pub struct AttentionOut {
    pub out: Var,
    pub core: Var,
}

impl Attention {
    pub fn new<R: Rng>(s: &mut Scope<'_, R>, name: &str, dim: usize, ctx_dim: usize, heads: usize) -> Self {
        Self::with_output_init(s, name, dim, ctx_dim, heads, Init::TruncNormal(INIT_STD))
    }

    pub fn with_output_init<R: Rng>(
        s: &mut Scope<'_, R>,
        name: &str,
        dim: usize,
        ctx_dim: usize,
        heads: usize,
        out_init: Init,
    ) -> Self {
        assert!(dim % heads == 0, "dim {dim} not divisible by {heads} heads");
        let mut s = s.sub(name);
        Self {
            wq: Linear::new(&mut s, "wq", dim, dim),
            wk: Linear::new(&mut s, "wk", ctx_dim, dim),
            wv: Linear::new(&mut s, "wv", ctx_dim, dim),
            wo: Linear::with_init(&mut s, "wo", dim, dim, out_init),
            heads,
        }
    }

    pub fn forward(
        &self,
        f: &mut Forward<'_>,
        x: Var,
        ctx: Var,
        batch: usize,
        mask: Option<&Tensor>,
    ) -> Result<AttentionOut> {
        let q = self.wq.forward(f, x)?;
        let (k, v) = self.project_context(f, ctx)?;
        self.attend(f, q, k, v, batch, mask)
    }

    pub fn project_context(&self, f: &mut Forward<'_>, ctx: Var) -> Result<(Var, Var)> {
        Ok((self.wk.forward(f, ctx)?, self.wv.forward(f, ctx)?))
    }

    /// Attention from queries `x` onto already-projected keys and values.
    pub fn forward_cached(&self, f: &mut Forward<'_>, x: Var, kv: (Var, Var), batch: usize) -> Result<AttentionOut> {
        let q = self.wq.forward(f, x)?;
        self.attend(f, q, kv.0, kv.1, batch, None)
    }

    fn attend(
        &self,
        f: &mut Forward<'_>,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        mask: Option<&Tensor>,
    ) -> Result<AttentionOut> {
        let core = f.tape.attention(q, k, v, batch, self.heads, mask)?;
        let out = self.wo.forward(f, core)?;
        Ok(AttentionOut { out, core })
    }
}

/// Pre-norm transformer encoder block.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl EncoderBlock {
    pub fn new<R: Rng>(s: &mut Scope<'_, R>, name: &str, dim: usize, heads: usize) -> Self {
        let mut s = s.sub(name);
        Self {
            ln1: LayerNorm::new(&mut s, "ln1", dim),
            attn: Attention::new(&mut s, "attn", dim, dim, heads),
            ln2: LayerNorm::new(&mut s, "ln2", dim),
            mlp: Mlp::new(&mut s, "mlp", dim, 4 * dim),
        }
    }

    /// Returns the block output and the attention-weight node.
    pub fn forward(&self, f: &mut Forward<'_>, x: Var, batch: usize, mask: Option<&Tensor>) -> Result<(Var, Var)> {
        let h = self.ln1.forward(f, x)?;
        let a = self.attn.forward(f, h, h, batch, mask)?;
        let x = f.tape.add(x, a.out)?;
        let h = self.ln2.forward(f, x)?;
        let h = self.mlp.forward(f, h)?;
        Ok((f.tape.add(x, h)?, a.core))
    }
}

/// Concatenates two batched token sequences sample by sample:
/// `[B·Ta × C]`, `[B·Tb × C]` → `[B·(Ta+Tb) × C]`.
pub fn concat_tokens(f: &mut Forward<'_>, a: Var, b: Var, batch: usize) -> Result<Var> {
    let (sa, sb) = (f.tape.shape(a).to_vec(), f.tape.shape(b).to_vec());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] || sa[0] % batch != 0 || sb[0] % batch != 0 {
        return Err(TensorError::ShapeMismatch {
            op: "concat_tokens",
            lhs: sa,
            rhs: sb,
        });
    }
    let c = sa[1];
    let a3 = f.tape.reshape(a, &[batch, sa[0] / batch, c])?;
    let b3 = f.tape.reshape(b, &[batch, sb[0] / batch, c])?;
    let cat = f.tape.concat(&[a3, b3], 1)?;
    f.tape.reshape(cat, &[sa[0] + sb[0], c])
}
