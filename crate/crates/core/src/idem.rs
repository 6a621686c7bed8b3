//! Implicit depth encoder: a plain transformer over the patch tokens of all
//! views whose attention scope is scheduled by layer.
//!
//! Layers `l < boundary` attend only within their own view. From the
//! boundary on, layers alternate between global (all views) and
//! within-view attention, starting with a global layer unless
//! `cross_first` is cleared.

use rand::Rng;

use crate::autodiff::{Tensor, Var, MASK_BLOCKED};
use crate::env::Image;
use crate::error::{Error, Result};
use crate::nn::{EncoderBlock, Forward, Linear, ModuleKind, ParamId, ParamStore, Scope};

#[derive(Clone, Debug, PartialEq)]
pub struct IdemConfig {
    pub num_layers: usize,
    /// First layer allowed to exchange information across views.
    pub boundary: usize,
    pub patch_size: usize,
    pub token_dim: usize,
    pub num_heads: usize,
    pub num_views: usize,
    pub image_size: usize,
    pub cross_first: bool,
}

impl Default for IdemConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            boundary: 2,
            patch_size: 8,
            token_dim: 32,
            num_heads: 2,
            num_views: 2,
            image_size: 32,
            cross_first: true,
        }
    }
}

impl IdemConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.boundary == 0 || self.boundary > self.num_layers {
            return Err(Error::Config(format!(
                "idem boundary {} must lie in 1..={}",
                self.boundary, self.num_layers
            )));
        }
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image side {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.num_heads == 0 || self.token_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "idem token_dim {} not divisible by {} heads",
                self.token_dim, self.num_heads
            )));
        }
        if self.num_views == 0 {
            return Err(Error::Config("idem needs at least one view".into()));
        }
        Ok(())
    }

    pub fn patches_per_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn patches_per_view(&self) -> usize {
        self.patches_per_side() * self.patches_per_side()
    }

    pub fn tokens(&self) -> usize {
        self.num_views * self.patches_per_view()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionScope {
    WithinView,
    Global,
}

pub fn layer_scope(layer: usize, cfg: &IdemConfig) -> AttentionScope {
    if layer < cfg.boundary {
        return AttentionScope::WithinView;
    }
    let cross_turn = (layer - cfg.boundary) % 2 == 0;
    if cross_turn == cfg.cross_first {
        AttentionScope::Global
    } else {
        AttentionScope::WithinView
    }
}

/// Additive attention mask over tokens tagged with `view_ids`.
pub fn attention_mask(scope: AttentionScope, view_ids: &[usize]) -> Tensor {
    let t = view_ids.len();
    let mut data = vec![0.0; t * t];
    if scope == AttentionScope::WithinView {
        for i in 0..t {
            for j in 0..t {
                if view_ids[i] != view_ids[j] {
                    data[i * t + j] = MASK_BLOCKED;
                }
            }
        }
    }
    Tensor::new(vec![t, t], data).expect("square mask")
}

pub fn attention_mask_for_layer(layer: usize, view_ids: &[usize], cfg: &IdemConfig) -> Tensor {
    attention_mask(layer_scope(layer, cfg), view_ids)
}

/// View id and `(row, col)` grid position of every token of one sample.
pub fn token_layout(num_views: usize, per_side: usize) -> (Vec<usize>, Vec<(usize, usize)>) {
    let mut ids = Vec::new();
    let mut pos = Vec::new();
    for v in 0..num_views {
        for r in 0..per_side {
            for c in 0..per_side {
                ids.push(v);
                pos.push((r, c));
            }
        }
    }
    (ids, pos)
}

/// Initial positional table `[N·P × dim]`: two channels encode the view
/// as a point on a half circle, the rest hold sine/cosine features of the
/// patch row and column at geometric frequencies. Channels left over when
/// `dim − 2` is not a multiple of 4 are zero.
pub fn sincos_position_table(num_views: usize, per_side: usize, dim: usize) -> Tensor {
    let (views, cells) = token_layout(num_views, per_side);
    let groups = dim.saturating_sub(2) / 4;
    let mut data = vec![0f32; views.len() * dim];
    for (t, (&v, &(r, c))) in views.iter().zip(&cells).enumerate() {
        let row = &mut data[t * dim..(t + 1) * dim];
        if dim >= 2 {
            let angle = std::f64::consts::PI * v as f64 / num_views as f64;
            row[0] = angle.sin() as f32;
            row[1] = angle.cos() as f32;
        }
        for k in 0..groups {
            let w = 100f64.powf(-(k as f64) / groups as f64);
            let (fr, fc) = (r as f64 * w, c as f64 * w);
            row[2 + 4 * k] = fr.sin() as f32;
            row[3 + 4 * k] = fr.cos() as f32;
            row[4 + 4 * k] = fc.sin() as f32;
            row[5 + 4 * k] = fc.cos() as f32;
        }
    }
    Tensor::new(vec![views.len(), dim], data).expect("non-empty layout")
}

/// Non-overlapping `patch × patch` tiles of every view, flattened
/// row-major with interleaved RGB and scaled to `[0, 1]`.
/// Output is `[N·P × patch²·3]`, views in order.
pub fn patch_pixels(views: &[Image], patch: usize) -> Result<Tensor> {
    let first = views.first().ok_or_else(|| Error::Invalid("no views".into()))?;
    let (h, w) = (first.height, first.width);
    if views.iter().any(|v| v.height != h || v.width != w) {
        return Err(Error::Invalid("views differ in size".into()));
    }
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Invalid(format!(
            "{h}×{w} image not divisible into {patch}-pixel patches"
        )));
    }
    let (ph, pw) = (h / patch, w / patch);
    let dim = patch * patch * 3;
    let mut data = Vec::with_capacity(views.len() * ph * pw * dim);
    for img in views {
        for pr in 0..ph {
            for pc in 0..pw {
                for r in 0..patch {
                    let start = ((pr * patch + r) * w + pc * patch) * 3;
                    data.extend(img.data[start..start + patch * 3].iter().map(|&b| f32::from(b) / 255.0));
                }
            }
        }
    }
    Ok(Tensor::new(vec![views.len() * ph * pw, dim], data)?)
}

/// Stacks the patch pixels of a batch of samples.
pub fn batch_patch_pixels(batch: &[&[Image]], patch: usize) -> Result<Tensor> {
    let mut rows = 0;
    let mut data = Vec::new();
    let mut dim = 0;
    for views in batch {
        let t = patch_pixels(views, patch)?;
        rows += t.shape()[0];
        dim = t.shape()[1];
        data.extend_from_slice(t.data());
    }
    if rows == 0 {
        return Err(Error::Invalid("empty batch".into()));
    }
    Ok(Tensor::new(vec![rows, dim], data)?)
}

/// Projected patch tokens for a batch; `view_ids` / `positions` describe
/// one sample and repeat for every sample.
pub struct ViewPatchTokens {
    pub tokens: Var,
    pub batch: usize,
    pub view_ids: Vec<usize>,
    pub positions: Vec<(usize, usize)>,
}

pub struct DepthFeatures {
    /// `[B·N·P × token_dim]`.
    pub features: Var,
}

/// Softmax weights of one layer for a single sample.
#[derive(Clone, Debug)]
pub struct LayerAttention {
    pub layer: usize,
    pub scope: AttentionScope,
    pub heads: usize,
    pub tokens: usize,
    pub num_views: usize,
    pub per_side: usize,
    /// `[heads × tokens × tokens]`.
    pub weights: Vec<f32>,
}

impl LayerAttention {
    pub fn row(&self, head: usize, query: usize) -> &[f32] {
        let start = (head * self.tokens + query) * self.tokens;
        &self.weights[start..start + self.tokens]
    }

    /// One query's weights on the keys of `view`, as a patch grid.
    pub fn grid(&self, head: usize, query: usize, view: usize) -> Vec<Vec<f32>> {
        let p = self.per_side * self.per_side;
        let row = &self.row(head, query)[view * p..(view + 1) * p];
        row.chunks(self.per_side).map(<[f32]>::to_vec).collect()
    }

    /// Mean attention received by each patch of `key_view` from the queries
    /// of `query_view` (all views when `None`), as a row-major grid.
    pub fn received(&self, head: usize, key_view: usize, query_view: Option<usize>) -> Vec<f32> {
        let p = self.per_side * self.per_side;
        let queries: Vec<usize> = match query_view {
            Some(v) => (v * p..(v + 1) * p).collect(),
            None => (0..self.tokens).collect(),
        };
        let mut out = vec![0.0f32; p];
        for &q in &queries {
            let row = &self.row(head, q)[key_view * p..(key_view + 1) * p];
            for (o, &w) in out.iter_mut().zip(row) {
                *o += w;
            }
        }
        out.iter_mut().for_each(|o| *o /= queries.len() as f32);
        out
    }
}

#[derive(Clone, Debug)]
pub struct IdemEncoder {
    pub cfg: IdemConfig,
    pub patch_proj: Linear,
    /// `[N·P × token_dim]`, indexed jointly by view and patch position.
    pub pos_embed: ParamId,
    pub blocks: Vec<EncoderBlock>,
    view_ids: Vec<usize>,
    positions: Vec<(usize, usize)>,
    masks: Vec<Tensor>,
}

impl IdemEncoder {
    pub fn new<R: Rng>(cfg: IdemConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut s = Scope::new(store, rng, ModuleKind::Idem, "idem");
        let patch_dim = cfg.patch_size * cfg.patch_size * 3;
        let patch_proj = Linear::new(&mut s, "patch_proj", patch_dim, cfg.token_dim);
        let pos_embed = s.table(
            "pos_embed",
            sincos_position_table(cfg.num_views, cfg.patches_per_side(), cfg.token_dim),
            false,
        );
        let blocks = (0..cfg.num_layers)
            .map(|l| EncoderBlock::new(&mut s, &format!("block{l}"), cfg.token_dim, cfg.num_heads))
            .collect();
        let (view_ids, positions) = token_layout(cfg.num_views, cfg.patches_per_side());
        let masks = (0..cfg.num_layers)
            .map(|l| attention_mask_for_layer(l, &view_ids, &cfg))
            .collect();
        Ok(Self {
            cfg,
            patch_proj,
            pos_embed,
            blocks,
            view_ids,
            positions,
            masks,
        })
    }

    pub fn view_ids(&self) -> &[usize] {
        &self.view_ids
    }

    fn check_views(&self, views: &[&[Image]]) -> Result<()> {
        for v in views {
            if v.len() != self.cfg.num_views {
                return Err(Error::Invalid(format!(
                    "expected {} views, got {}",
                    self.cfg.num_views,
                    v.len()
                )));
            }
            if v.iter()
                .any(|i| i.height != self.cfg.image_size || i.width != self.cfg.image_size)
            {
                return Err(Error::Invalid(format!(
                    "idem expects {0}×{0} views",
                    self.cfg.image_size
                )));
            }
        }
        Ok(())
    }

    /// Linear patch embedding plus positional table, from precomputed pixels.
    pub fn patchify_pixels(&self, f: &mut Forward<'_>, pixels: Var, batch: usize) -> Result<ViewPatchTokens> {
        let x = self.patch_proj.forward(f, pixels)?;
        let pos = f.param(self.pos_embed);
        let pos = f.tape.tile_rows(pos, batch)?;
        let tokens = f.tape.add(x, pos)?;
        Ok(ViewPatchTokens {
            tokens,
            batch,
            view_ids: self.view_ids.clone(),
            positions: self.positions.clone(),
        })
    }

    pub fn patchify(&self, f: &mut Forward<'_>, views: &[&[Image]]) -> Result<ViewPatchTokens> {
        self.check_views(views)?;
        let pixels = f.tape.constant(batch_patch_pixels(views, self.cfg.patch_size)?);
        self.patchify_pixels(f, pixels, views.len())
    }

    /// Runs every block; returns the final tokens and each layer's
    /// attention-weight node.
    pub fn run(&self, f: &mut Forward<'_>, tokens: &ViewPatchTokens) -> Result<(DepthFeatures, Vec<Var>)> {
        let mut x = tokens.tokens;
        let mut cores = Vec::with_capacity(self.blocks.len());
        for (block, mask) in self.blocks.iter().zip(&self.masks) {
            let (y, core) = block.forward(f, x, tokens.batch, Some(mask))?;
            x = y;
            cores.push(core);
        }
        Ok((DepthFeatures { features: x }, cores))
    }

    pub fn encode(&self, f: &mut Forward<'_>, views: &[&[Image]]) -> Result<DepthFeatures> {
        let tokens = self.patchify(f, views)?;
        Ok(self.run(f, &tokens)?.0)
    }

    /// Per-layer softmax weights for one observation.
    pub fn attention_maps(&self, store: &ParamStore, views: &[Image]) -> Result<Vec<LayerAttention>> {
        let mut f = Forward::eval(store);
        let tokens = self.patchify(&mut f, &[views])?;
        let (_, cores) = self.run(&mut f, &tokens)?;
        cores
            .iter()
            .enumerate()
            .map(|(layer, &core)| {
                let (w, [b, heads, tq, tk]) = f
                    .tape
                    .attention_weights(core)
                    .ok_or_else(|| Error::Invalid("missing attention weights".into()))?;
                debug_assert_eq!((b, tq), (1, tk));
                Ok(LayerAttention {
                    layer,
                    scope: layer_scope(layer, &self.cfg),
                    heads,
                    tokens: tq,
                    num_views: self.cfg.num_views,
                    per_side: self.cfg.patches_per_side(),
                    weights: w.to_vec(),
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(views: usize, layers: usize, boundary: usize) -> IdemConfig {
        IdemConfig {
            num_layers: layers,
            boundary,
            patch_size: 8,
            token_dim: 16,
            num_heads: 2,
            num_views: views,
            image_size: 16,
            cross_first: true,
        }
    }

    fn random_image(rng: &mut ChaCha8Rng, side: usize) -> Image {
        Image {
            height: side,
            width: side,
            data: (0..side * side * 3).map(|_| rng.gen()).collect(),
        }
    }

    #[test]
    fn token_count_for_two_views() {
        let c = cfg(2, 2, 1);
        assert_eq!(c.tokens(), 8);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let views = vec![random_image(&mut rng, 16), random_image(&mut rng, 16)];
        assert_eq!(patch_pixels(&views, 8).unwrap().shape(), &[8, 192]);
    }

    #[test]
    fn patch_ordering_matches_enumeration() {
        let side = 16;
        let img = Image {
            height: side,
            width: side,
            data: (0..side * side * 3).map(|i| (i % 251) as u8).collect(),
        };
        let px = patch_pixels(std::slice::from_ref(&img), 8).unwrap();
        // enumerate pixels rows 0..8 × cols 0..8 for patch (0,0), and
        // rows 0..8 × cols 8..16 for patch (0,1)
        for (patch, col0) in [(0usize, 0usize), (1, 8)] {
            let mut want = Vec::new();
            for r in 0..8 {
                for c in col0..col0 + 8 {
                    for ch in 0..3 {
                        want.push(f32::from(img.data[(r * side + c) * 3 + ch]) / 255.0);
                    }
                }
            }
            assert_eq!(px.row(patch), want.as_slice());
        }
    }

    #[test]
    fn mismatched_views_rejected() {
        let a = Image::filled(16, 16, [0; 3]);
        let b = Image::filled(8, 8, [0; 3]);
        assert!(patch_pixels(&[a.clone(), b], 8).is_err());
        assert!(patch_pixels(&[Image::filled(12, 12, [0; 3])], 8).is_err());
        assert!(IdemConfig {
            boundary: 5,
            ..IdemConfig::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn mask_before_boundary_is_block_diagonal() {
        let c = IdemConfig {
            num_views: 2,
            boundary: 2,
            ..IdemConfig::default()
        };
        let ids = [0, 0, 1, 1];
        let m = attention_mask_for_layer(0, &ids, &c);
        let mut allowed = Vec::new();
        for i in 0..4 {
            for j in 0..4 {
                if m.at(&[i, j]) == 0.0 {
                    allowed.push((i, j));
                }
            }
        }
        let want = vec![(0, 0), (0, 1), (1, 0), (1, 1), (2, 2), (2, 3), (3, 2), (3, 3)];
        assert_eq!(allowed, want);
        // first layer at the boundary is global, then within, then global
        assert!(attention_mask_for_layer(2, &ids, &c).data().iter().all(|&v| v == 0.0));
        assert_eq!(layer_scope(3, &c), AttentionScope::WithinView);
        assert_eq!(layer_scope(4, &c), AttentionScope::Global);
        let flipped = IdemConfig {
            cross_first: false,
            ..c
        };
        assert_eq!(layer_scope(2, &flipped), AttentionScope::WithinView);
        assert_eq!(layer_scope(3, &flipped), AttentionScope::Global);
    }

    #[test]
    fn single_view_mask_always_open() {
        let c = cfg(1, 4, 2);
        let ids = [0, 0, 0];
        for l in 0..4 {
            assert!(attention_mask_for_layer(l, &ids, &c).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn encode_preserves_shape_and_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let c = cfg(2, 3, 1);
        let enc = IdemEncoder::new(c.clone(), &mut store, &mut rng).unwrap();
        let views = vec![random_image(&mut rng, 16), random_image(&mut rng, 16)];
        let run = || {
            let mut f = Forward::eval(&store);
            let d = enc.encode(&mut f, &[&views]).unwrap();
            f.tape.value(d.features).clone()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.shape(), &[8, 16]);
        assert_eq!(a, b);
    }

    #[test]
    fn sincos_table_separates_views_and_cells() {
        let t = sincos_position_table(2, 4, 18);
        assert_eq!(t.shape(), &[32, 18]);
        let row = |i: usize| &t.data()[i * 18..(i + 1) * 18];
        // same cell in both views differs only in the view channels
        assert_eq!(&row(5)[2..], &row(21)[2..]);
        assert_ne!(&row(5)[..2], &row(21)[..2]);
        for i in 0..32 {
            for j in 0..i {
                assert!(row(i) != row(j), "tokens {i} and {j} collide");
            }
        }
        // cell (0,0) has zero phase everywhere
        assert_eq!(&row(0)[2..6], &[0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn no_cross_layers_means_view_permutation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let c = cfg(2, 3, 3);
        let enc = IdemEncoder::new(c.clone(), &mut store, &mut rng).unwrap();
        // share one positional table between the two views
        let p = c.patches_per_view();
        let pos = store.value_mut(enc.pos_embed);
        let d = pos.shape()[1];
        let (first, second) = pos.data_mut().split_at_mut(p * d);
        second.copy_from_slice(first);

        let a = random_image(&mut rng, 16);
        let b = random_image(&mut rng, 16);
        let out = |views: Vec<Image>| {
            let mut f = Forward::eval(&store);
            let d = enc.encode(&mut f, &[&views]).unwrap();
            f.tape.value(d.features).clone()
        };
        let ab = out(vec![a.clone(), b.clone()]);
        let ba = out(vec![b, a]);
        assert_eq!(&ab.data()[..p * d], &ba.data()[p * d..]);
        assert_eq!(&ab.data()[p * d..], &ba.data()[..p * d]);
    }

    #[test]
    fn attention_maps_respect_schedule_and_reshape() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let c = cfg(2, 4, 2);
        let enc = IdemEncoder::new(c.clone(), &mut store, &mut rng).unwrap();
        let views = vec![random_image(&mut rng, 16), random_image(&mut rng, 16)];
        let maps = enc.attention_maps(&store, &views).unwrap();
        assert_eq!(maps.len(), 4);
        let p = c.patches_per_view();
        for m in &maps {
            for h in 0..m.heads {
                for q in 0..m.tokens {
                    let row = m.row(h, q);
                    let s: f64 = row.iter().map(|&v| f64::from(v)).sum();
                    assert!((s - 1.0).abs() < 1e-6);
                    let qv = q / p;
                    if m.layer < c.boundary {
                        for (k, &w) in row.iter().enumerate() {
                            if k / p != qv {
                                assert!(w < 1e-12);
                            }
                        }
                    }
                    for v in 0..2 {
                        let flat: Vec<f32> = m.grid(h, q, v).concat();
                        assert_eq!(flat.as_slice(), &row[v * p..(v + 1) * p]);
                    }
                }
                if m.layer < c.boundary {
                    assert!(m.received(h, 1, Some(0)).iter().all(|&w| w == 0.0));
                }
            }
        }
    }
}
