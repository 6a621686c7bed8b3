use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::nn::{ModuleSet, ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            peak_lr: 1e-3,
            weight_decay: 1e-3,
            warmup_steps: 50,
            clip_norm: 1.0,
            batch_size: 16,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimConfig {
    /// Large-scale preset.
    pub fn full_scale() -> Self {
        Self {
            peak_lr: 1e-5,
            warmup_steps: 1000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("peak_lr", self.peak_lr),
            ("clip_norm", self.clip_norm),
            ("eps", self.eps),
        ];
        if let Some((k, v)) = positive.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Config(format!("{k} must be positive, got {v}")));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Global L2 norm of `grads`, then rescales them to `clip_norm` when the
/// norm exceeds it. Returns the pre-clip norm.
pub fn clip_grad_norm(grads: &mut [(ParamId, Tensor)], clip_norm: f64, store: &ParamStore) -> Result<f64> {
    let mut sq = 0f64;
    for (id, g) in grads.iter() {
        if !g.all_finite() {
            return Err(Error::Invalid(format!(
                "non-finite gradient for parameter `{}`",
                store.get(*id).name
            )));
        }
        sq += g.data().iter().map(|&x| x as f64 * x as f64).sum::<f64>();
    }
    let norm = sq.sqrt();
    if norm > clip_norm {
        let s = (clip_norm / norm) as f32;
        for (_, g) in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    Ok(norm)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
}

/// AdamW with decoupled weight decay. Moments exist only for parameters of
/// the trainable modules it was created with.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    moments: Vec<Option<Moments>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, trainable: ModuleSet, cfg: &OptimConfig) -> Self {
        let moments = store
            .iter()
            .map(|(_, p)| {
                trainable.contains(p.module).then(|| Moments {
                    m: Tensor::zeros(p.value.shape()),
                    v: Tensor::zeros(p.value.shape()),
                })
            })
            .collect();
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            step: 0,
            moments,
        }
    }

    pub fn moments(&self, id: ParamId) -> Option<&Moments> {
        self.moments.get(id.index()).and_then(Option::as_ref)
    }

    pub fn moments_mut(&mut self, id: ParamId) -> Option<&mut Moments> {
        self.moments.get_mut(id.index()).and_then(Option::as_mut)
    }

    pub fn num_tracked(&self) -> usize {
        self.moments.iter().flatten().count()
    }

    pub fn tracked(&self) -> impl Iterator<Item = (ParamId, &Moments)> {
        self.moments
            .iter()
            .enumerate()
            .filter_map(|(i, m)| m.as_ref().map(|m| (ParamId::from_index(i), m)))
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)], lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        for (id, g) in grads {
            let decay = store.get(*id).decay;
            let name = store.get(*id).name.clone();
            let mo = self
                .moments
                .get_mut(id.index())
                .and_then(Option::as_mut)
                .ok_or_else(|| Error::Invalid(format!("no optimizer state for frozen parameter `{name}`")))?;
            let p = store.value_mut(*id);
            if p.shape() != g.shape() {
                return Err(Error::Invalid(format!(
                    "gradient shape {:?} does not match parameter `{name}` {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            let wd = if decay { self.weight_decay } else { 0.0 };
            let (m, v) = (mo.m.data_mut(), mo.v.data_mut());
            for (i, (pi, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gi = gi as f64;
                let mi = b1 * m[i] as f64 + (1.0 - b1) * gi;
                let vi = b2 * v[i] as f64 + (1.0 - b2) * gi * gi;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let upd = (mi / c1) / ((vi / c2).sqrt() + self.eps) + wd * *pi as f64;
                *pi = (*pi as f64 - lr * upd) as f32;
            }
        }
        Ok(())
    }
}
