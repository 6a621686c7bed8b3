//! Conditional flow-matching action head.
//!
//! The expert is a small transformer over the `H` rows of an action chunk.
//! Each row is embedded linearly, shifted by a learned position, a
//! sinusoidal embedding of the flow time `τ` and the projected robot state,
//! then refined by self-attention, cross-attention to the fused
//! vision-language tokens, and an MLP. A linear read-out gives the velocity.
//!
//! Training regresses the velocity onto `A − ε` at `A^τ = τA + (1 − τ)ε`;
//! sampling integrates the learned field with forward Euler from noise.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Tensor, TensorError, Var};
use crate::error::{Error, Result};
use crate::nn::{Attention, Forward, Init, LayerNorm, Linear, Mlp, ModuleKind, ParamId, ParamStore, Scope, INIT_STD};

pub const TAU_EMBED_DIM: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct ExpertConfig {
    pub horizon: usize,
    pub action_dim: usize,
    pub state_dim: usize,
    /// Width of the conditioning tokens.
    pub cond_dim: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub dropout: f32,
    pub denoise_steps: usize,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self {
            horizon: 8,
            action_dim: 4,
            state_dim: 4,
            cond_dim: 32,
            hidden_dim: 64,
            num_layers: 4,
            num_heads: 4,
            dropout: 0.2,
            denoise_steps: 10,
        }
    }
}

impl ExpertConfig {
    /// Large-scale preset with the 8-layer head and 50-step, 24-dim chunks.
    pub fn full_scale() -> Self {
        Self {
            horizon: 50,
            action_dim: 24,
            state_dim: 24,
            cond_dim: 2048,
            hidden_dim: 1024,
            num_layers: 8,
            num_heads: 16,
            dropout: 0.2,
            denoise_steps: 10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("expert: {m}")));
        if self.horizon == 0 || self.action_dim == 0 || self.state_dim == 0 || self.cond_dim == 0 {
            return bad("horizon, action_dim, state_dim and cond_dim must be positive");
        }
        if self.hidden_dim == 0 || self.num_heads == 0 || self.hidden_dim % self.num_heads != 0 {
            return bad("hidden_dim must be a positive multiple of num_heads");
        }
        if self.num_layers == 0 {
            return bad("num_layers must be at least 1");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if self.denoise_steps == 0 {
            return bad("denoise_steps must be at least 1");
        }
        Ok(())
    }
}

/// Interpolated chunk(s) with the noise and flow times that produced them.
/// `taus` has one entry per chunk; chunks are stacked along rows.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowSample {
    pub taus: Vec<f32>,
    pub epsilon: Tensor,
    pub noisy: Tensor,
}

fn check_pair(op: &'static str, a: &Tensor, eps: &Tensor) -> Result<()> {
    if a.shape() != eps.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: eps.shape().to_vec(),
        }
        .into());
    }
    Ok(())
}

/// `τA + (1 − τ)ε` for a single chunk.
pub fn interpolate(a: &Tensor, eps: &Tensor, tau: f32) -> Result<FlowSample> {
    interpolate_batch(a, eps, &[tau])
}

/// Per-chunk interpolation for `taus.len()` chunks stacked along rows.
pub fn interpolate_batch(a: &Tensor, eps: &Tensor, taus: &[f32]) -> Result<FlowSample> {
    check_pair("interpolate", a, eps)?;
    if taus.is_empty() || a.rank() != 2 || a.shape()[0] % taus.len() != 0 {
        return Err(Error::Invalid(format!(
            "interpolate: {:?} rows do not split into {} chunks",
            a.shape(),
            taus.len()
        )));
    }
    if let Some(t) = taus.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::Invalid(format!("interpolate: tau {t} outside [0, 1]")));
    }
    let per = a.numel() / taus.len();
    let data = a
        .data()
        .iter()
        .zip(eps.data())
        .enumerate()
        .map(|(i, (&x, &e))| {
            let t = taus[i / per];
            t * x + (1.0 - t) * e
        })
        .collect();
    Ok(FlowSample {
        taus: taus.to_vec(),
        epsilon: eps.clone(),
        noisy: Tensor::new(a.shape().to_vec(), data)?,
    })
}

/// The constant velocity `A − ε` of the linear path.
pub fn target_flow(a: &Tensor, eps: &Tensor) -> Result<Tensor> {
    check_pair("target_flow", a, eps)?;
    let data = a.data().iter().zip(eps.data()).map(|(x, e)| x - e).collect();
    Ok(Tensor::new(a.shape().to_vec(), data)?)
}

/// Sinusoidal features of the flow time, `[taus.len() × 16]`.
pub fn tau_embedding(taus: &[f32]) -> Result<Tensor> {
    let half = TAU_EMBED_DIM / 2;
    let mut data = Vec::with_capacity(taus.len() * TAU_EMBED_DIM);
    for &t in taus {
        let x = 100.0 * t as f64;
        let freqs = (0..half).map(|i| 10000f64.powf(-(i as f64) / half as f64));
        let (sin, cos): (Vec<f32>, Vec<f32>) = freqs.map(|w| ((x * w).sin() as f32, (x * w).cos() as f32)).unzip();
        data.extend(sin);
        data.extend(cos);
    }
    Ok(Tensor::new(vec![taus.len(), TAU_EMBED_DIM], data)?)
}

pub fn standard_normal<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("positive shape")
}

#[derive(Clone, Debug)]
pub struct ExpertBlock {
    pub ln1: LayerNorm,
    pub self_attn: Attention,
    pub ln2: LayerNorm,
    pub cross_attn: Attention,
    pub ln3: LayerNorm,
    pub mlp: Mlp,
}

/// Per-call conditioning: projected state rows and cached cross-attention
/// keys/values for every layer.
pub struct ExpertContext {
    pub batch: usize,
    state_rows: Var,
    kv: Vec<(Var, Var)>,
}

#[derive(Clone, Debug)]
pub struct ActionExpert {
    pub cfg: ExpertConfig,
    pub action_in: Linear,
    pub tau_proj: Linear,
    pub state_proj: Linear,
    pub pos: ParamId,
    pub cond_proj: Linear,
    pub blocks: Vec<ExpertBlock>,
    pub ln_f: LayerNorm,
    pub readout: Linear,
}

impl ActionExpert {
    pub fn new<R: Rng>(cfg: ExpertConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let h = cfg.hidden_dim;
        let mut s = Scope::new(store, rng, ModuleKind::Expert, "expert");
        let action_in = Linear::new(&mut s, "action_in", cfg.action_dim, h);
        let tau_proj = Linear::new(&mut s, "tau_proj", TAU_EMBED_DIM, h);
        let state_proj = Linear::new(&mut s, "state_proj", cfg.state_dim, h);
        let pos = s.tensor("pos", &[cfg.horizon, h], Init::TruncNormal(INIT_STD), false);
        let cond_proj = Linear::new(&mut s, "cond_proj", cfg.cond_dim, h);
        let blocks = (0..cfg.num_layers)
            .map(|l| {
                let mut b = s.sub(&format!("block{l}"));
                ExpertBlock {
                    ln1: LayerNorm::new(&mut b, "ln1", h),
                    self_attn: Attention::new(&mut b, "self_attn", h, h, cfg.num_heads),
                    ln2: LayerNorm::new(&mut b, "ln2", h),
                    cross_attn: Attention::new(&mut b, "cross_attn", h, h, cfg.num_heads),
                    ln3: LayerNorm::new(&mut b, "ln3", h),
                    mlp: Mlp::new(&mut b, "mlp", h, 4 * h),
                }
            })
            .collect();
        let ln_f = LayerNorm::new(&mut s, "ln_f", h);
        let readout = Linear::new(&mut s, "readout", h, cfg.action_dim);
        Ok(Self {
            cfg,
            action_in,
            tau_proj,
            state_proj,
            pos,
            cond_proj,
            blocks,
            ln_f,
            readout,
        })
    }

    /// Projects the conditioning tokens `[B·T × cond_dim]` and states
    /// `[B × state_dim]` once for any number of velocity evaluations.
    pub fn prepare_context(&self, f: &mut Forward<'_>, cond: Var, state: Var, batch: usize) -> Result<ExpertContext> {
        let (cs, ss) = (f.tape.shape(cond).to_vec(), f.tape.shape(state).to_vec());
        if batch == 0 || cs.len() != 2 || cs[1] != self.cfg.cond_dim || cs[0] % batch != 0 {
            return Err(Error::Invalid(format!(
                "expert: conditioning {cs:?} does not match batch {batch} × width {}",
                self.cfg.cond_dim
            )));
        }
        if ss != [batch, self.cfg.state_dim] {
            return Err(Error::Invalid(format!(
                "expert: state {ss:?}, expected [{batch}, {}]",
                self.cfg.state_dim
            )));
        }
        let c = self.cond_proj.forward(f, cond)?;
        let kv = self
            .blocks
            .iter()
            .map(|b| b.cross_attn.project_context(f, c))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let st = self.state_proj.forward(f, state)?;
        let state_rows = f.tape.repeat_rows(st, self.cfg.horizon)?;
        Ok(ExpertContext { batch, state_rows, kv })
    }

    /// Final normalized features before the read-out, `[B·H × hidden]`.
    pub fn trunk(&self, f: &mut Forward<'_>, ctx: &ExpertContext, noisy: Var, taus: &[f32]) -> Result<Var> {
        let (b, hz) = (ctx.batch, self.cfg.horizon);
        if taus.len() != b {
            return Err(Error::Invalid(format!(
                "expert: {} flow times for batch {b}",
                taus.len()
            )));
        }
        let ns = f.tape.shape(noisy);
        if ns != [b * hz, self.cfg.action_dim] {
            return Err(Error::Invalid(format!(
                "expert: noisy chunk {ns:?}, expected [{}, {}]",
                b * hz,
                self.cfg.action_dim
            )));
        }
        let x = self.action_in.forward(f, noisy)?;
        let pos = f.param(self.pos);
        let pos = f.tape.tile_rows(pos, b)?;
        let temb = f.tape.constant(tau_embedding(taus)?);
        let temb = self.tau_proj.forward(f, temb)?;
        let temb = f.tape.repeat_rows(temb, hz)?;
        let mut x = f.tape.add(x, pos)?;
        x = f.tape.add(x, temb)?;
        x = f.tape.add(x, ctx.state_rows)?;
        let rate = self.cfg.dropout;
        for (blk, &kv) in self.blocks.iter().zip(&ctx.kv) {
            let h = blk.ln1.forward(f, x)?;
            let a = blk.self_attn.forward(f, h, h, b, None)?;
            let a = f.dropout(a.out, rate)?;
            x = f.tape.add(x, a)?;
            let h = blk.ln2.forward(f, x)?;
            let a = blk.cross_attn.forward_cached(f, h, kv, b)?;
            let a = f.dropout(a.out, rate)?;
            x = f.tape.add(x, a)?;
            let h = blk.ln3.forward(f, x)?;
            let h = blk.mlp.forward(f, h)?;
            let h = f.dropout(h, rate)?;
            x = f.tape.add(x, h)?;
        }
        Ok(self.ln_f.forward(f, x)?)
    }

    /// Velocity `v(A^τ, Ẑ, s)` for a batch of chunks, `[B·H × D_a]`.
    pub fn predict_velocity(&self, f: &mut Forward<'_>, ctx: &ExpertContext, noisy: Var, taus: &[f32]) -> Result<Var> {
        let h = self.trunk(f, ctx, noisy, taus)?;
        Ok(self.readout.forward(f, h)?)
    }

    /// Flow-matching loss against ground-truth chunks `[B·H × D_a]`.
    pub fn loss<R: Rng + ?Sized>(
        &self,
        f: &mut Forward<'_>,
        ctx: &ExpertContext,
        actions: &Tensor,
        rng: &mut R,
    ) -> Result<Var> {
        flow_matching_loss(f, actions, ctx.batch, rng, |f, noisy, taus| {
            self.predict_velocity(f, ctx, noisy, taus)
        })
    }

    /// Euler integration from fresh noise; returns `[B·H × D_a]`.
    pub fn sample<R: Rng + ?Sized>(&self, f: &mut Forward<'_>, ctx: &ExpertContext, rng: &mut R) -> Result<Tensor> {
        let eps = standard_normal(&[ctx.batch * self.cfg.horizon, self.cfg.action_dim], rng);
        self.sample_from(f, ctx, eps, self.cfg.denoise_steps)
    }

    pub fn sample_from(&self, f: &mut Forward<'_>, ctx: &ExpertContext, eps: Tensor, steps: usize) -> Result<Tensor> {
        let b = ctx.batch;
        euler_sample(eps, steps, |a, tau| {
            let noisy = f.tape.constant(a.clone());
            let v = self.predict_velocity(f, ctx, noisy, &vec![tau; b])?;
            Ok(f.tape.value(v).clone())
        })
    }
}

/// Samples `ε ~ N(0, I)` and `τ ~ U[0, 1)` per chunk and returns the mean
/// squared error between `velocity(A^τ, τ)` and `A − ε`.
pub fn flow_matching_loss<R, V>(
    f: &mut Forward<'_>,
    actions: &Tensor,
    batch: usize,
    rng: &mut R,
    mut velocity: V,
) -> Result<Var>
where
    R: Rng + ?Sized,
    V: FnMut(&mut Forward<'_>, Var, &[f32]) -> Result<Var>,
{
    if batch == 0 || actions.numel() == 0 {
        return Err(Error::Invalid("flow matching loss on an empty batch".into()));
    }
    let eps = standard_normal(actions.shape(), rng);
    let taus: Vec<f32> = (0..batch).map(|_| rng.gen::<f32>()).collect();
    let sample = interpolate_batch(actions, &eps, &taus)?;
    let target = target_flow(actions, &eps)?;
    let noisy = f.tape.constant(sample.noisy);
    let v = velocity(f, noisy, &taus)?;
    let target = f.tape.constant(target);
    let d = f.tape.sub(v, target)?;
    let sq = f.tape.mul(d, d)?;
    Ok(f.tape.mean_all(sq))
}

/// Forward Euler with `τ_k = k/steps`. The displacement is accumulated in
/// f64 and added to the starting noise once per step.
pub fn euler_sample<V>(eps: Tensor, steps: usize, mut velocity: V) -> Result<Tensor>
where
    V: FnMut(&Tensor, f32) -> Result<Tensor>,
{
    if steps == 0 {
        return Err(Error::Config("denoise_steps must be at least 1".into()));
    }
    let n = steps as f64;
    // velocity sum, divided by n once so a constant field lands on ε + c exactly
    let mut total = vec![0f64; eps.numel()];
    let mut a = eps.clone();
    for k in 0..steps {
        let tau = (k as f64 / n) as f32;
        let v = velocity(&a, tau)?;
        check_pair("euler_sample", &a, &v)?;
        for (t, &vi) in total.iter_mut().zip(v.data()) {
            *t += f64::from(vi);
        }
        for ((ai, &e), &t) in a.data_mut().iter_mut().zip(eps.data()).zip(&total) {
            *ai = (f64::from(e) + t / n) as f32;
        }
    }
    Ok(a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> ExpertConfig {
        ExpertConfig {
            horizon: 3,
            action_dim: 2,
            state_dim: 2,
            cond_dim: 6,
            hidden_dim: 8,
            num_layers: 2,
            num_heads: 2,
            dropout: 0.2,
            denoise_steps: 4,
        }
    }

    #[test]
    fn interpolation_hand_cases() {
        let a = Tensor::from_rows(&[&[2.0]]);
        let e = Tensor::from_rows(&[&[0.0]]);
        assert_eq!(interpolate(&a, &e, 0.5).unwrap().noisy.data(), &[1.0]);
        assert_eq!(interpolate(&a, &e, 1.0).unwrap().noisy, a);
        assert_eq!(interpolate(&a, &e, 0.0).unwrap().noisy, e);
        assert!(interpolate(&a, &e, 1.5).is_err());
        assert!(interpolate(&a, &Tensor::zeros(&[1, 2]), 0.5).is_err());
        let a = Tensor::from_rows(&[&[3.0]]);
        let e = Tensor::from_rows(&[&[1.0]]);
        assert_eq!(target_flow(&a, &e).unwrap().data(), &[2.0]);
        assert!(target_flow(&a, &a).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batched_interpolation_uses_per_chunk_tau() {
        let a = Tensor::from_rows(&[&[1.0], &[1.0], &[1.0], &[1.0]]);
        let e = Tensor::zeros(&[4, 1]);
        let s = interpolate_batch(&a, &e, &[0.25, 0.75]).unwrap();
        assert_eq!(s.noisy.data(), &[0.25, 0.25, 0.75, 0.75]);
        assert!(interpolate_batch(&a, &e, &[0.1, 0.2, 0.3]).is_err());
    }

    #[test]
    fn tau_embedding_hand_values() {
        let e = tau_embedding(&[0.0, 0.5]).unwrap();
        assert!(tau_embedding(&[]).is_err());
        assert_eq!(e.shape(), &[2, 16]);
        assert!(e.data()[..8].iter().all(|&v| v == 0.0));
        assert!(e.data()[8..16].iter().all(|&v| v == 1.0));
        assert!((e.data()[16] - (50f64).sin() as f32).abs() < 1e-6);
    }

    #[test]
    fn euler_on_constant_field_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let eps = standard_normal(&[5, 3], &mut rng);
        let c = Tensor::uniform(&[5, 3], -2.0, 2.0, &mut rng);
        let expect: Vec<f32> = eps.data().iter().zip(c.data()).map(|(e, c)| e + c).collect();
        for steps in 1..=40 {
            let out = euler_sample(eps.clone(), steps, |_, _| Ok(c.clone())).unwrap();
            assert_eq!(out.data(), &expect[..], "steps {steps}");
        }
        assert!(euler_sample(eps, 0, |_, _| Ok(c.clone())).is_err());
    }

    #[test]
    fn euler_visits_uniform_times() {
        let mut seen = Vec::new();
        euler_sample(Tensor::zeros(&[1, 1]), 4, |a, t| {
            seen.push(t);
            Ok(Tensor::zeros(a.shape()))
        })
        .unwrap();
        assert_eq!(seen, vec![0.0, 0.25, 0.5, 0.75]);
    }

    fn setup(seed: u64) -> (ActionExpert, ParamStore, ChaCha8Rng) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = ActionExpert::new(small_cfg(), &mut store, &mut rng).unwrap();
        (e, store, rng)
    }

    #[test]
    fn velocity_shape_and_eval_determinism() {
        let (e, store, mut rng) = setup(5);
        let cond = Tensor::uniform(&[2 * 4, 6], -1.0, 1.0, &mut rng);
        let state = Tensor::uniform(&[2, 2], -1.0, 1.0, &mut rng);
        let noisy = Tensor::uniform(&[6, 2], -1.0, 1.0, &mut rng);
        let run = || {
            let mut f = Forward::eval(&store);
            let c = f.tape.constant(cond.clone());
            let s = f.tape.constant(state.clone());
            let ctx = e.prepare_context(&mut f, c, s, 2).unwrap();
            let n = f.tape.constant(noisy.clone());
            let v = e.predict_velocity(&mut f, &ctx, n, &[0.1, 0.9]).unwrap();
            f.tape.value(v).clone()
        };
        let a = run();
        assert_eq!(a.shape(), &[6, 2]);
        assert_eq!(a, run());
    }

    #[test]
    fn shape_errors_are_reported() {
        let (e, store, _) = setup(6);
        let mut f = Forward::eval(&store);
        let c = f.tape.constant(Tensor::zeros(&[4, 5]));
        let s = f.tape.constant(Tensor::zeros(&[1, 2]));
        assert!(e.prepare_context(&mut f, c, s, 1).is_err());
        let c = f.tape.constant(Tensor::zeros(&[4, 6]));
        let ctx = e.prepare_context(&mut f, c, s, 1).unwrap();
        let n = f.tape.constant(Tensor::zeros(&[2, 2]));
        assert!(e.predict_velocity(&mut f, &ctx, n, &[0.0]).is_err());
        let n = f.tape.constant(Tensor::zeros(&[3, 2]));
        assert!(e.predict_velocity(&mut f, &ctx, n, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn loss_is_zero_for_an_oracle_velocity() {
        let store = ParamStore::new();
        let mut f = Forward::eval(&store);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let actions = Tensor::uniform(&[6, 2], -1.0, 1.0, &mut rng);
        let loss = flow_matching_loss(&mut f, &actions, 2, &mut rng, |f, noisy, taus| {
            // recover ε from A^τ and return A − ε
            let n = f.tape.value(noisy).clone();
            let data = n
                .data()
                .iter()
                .zip(actions.data())
                .enumerate()
                .map(|(i, (&x, &a))| {
                    let t = taus[i / 6] as f64;
                    let e = (x as f64 - t * a as f64) / (1.0 - t);
                    (a as f64 - e) as f32
                })
                .collect();
            Ok(f.tape.constant(Tensor::new(n.shape().to_vec(), data).unwrap()))
        })
        .unwrap();
        assert!(f.tape.value(loss).item() < 1e-8);
        let mut f = Forward::eval(&store);
        assert!(flow_matching_loss(&mut f, &actions, 0, &mut rng, |_, n, _| Ok(n)).is_err());
    }

    #[test]
    fn sampling_is_seed_deterministic_and_dropout_is_off_in_eval() {
        let (e, store, mut rng) = setup(8);
        let cond = Tensor::uniform(&[4, 6], -1.0, 1.0, &mut rng);
        let run = |seed: u64| {
            let mut f = Forward::eval(&store);
            let c = f.tape.constant(cond.clone());
            let s = f.tape.constant(Tensor::zeros(&[1, 2]));
            let ctx = e.prepare_context(&mut f, c, s, 1).unwrap();
            e.sample(&mut f, &ctx, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
        };
        assert_eq!(run(1), run(1));
        assert_ne!(run(1), run(2));
    }
}
