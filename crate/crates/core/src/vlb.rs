//! Small vision-language backbone standing in for a pretrained VLM.
//!
//! Views go through a patch embedding and a few within-view encoder layers,
//! are projected into the language width, and are followed by the embedded
//! instruction. Only the first `language_layers_kept` language layers are
//! retained.

use rand::Rng;

use crate::autodiff::Tensor;
use crate::autodiff::Var;
use crate::env::Image;
use crate::error::{Error, Result};
use crate::idem::{attention_mask, batch_patch_pixels, sincos_position_table, token_layout, AttentionScope};
use crate::nn::{concat_tokens, EncoderBlock, Forward, Init, Linear, ModuleKind, ParamId, ParamStore, Scope, INIT_STD};

#[derive(Clone, Debug, PartialEq)]
pub struct VlbConfig {
    pub vision_layers: usize,
    pub language_layers_total: usize,
    pub language_layers_kept: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub vocab_size: usize,
    pub max_text_len: usize,
    pub patch_size: usize,
    pub num_views: usize,
    pub image_size: usize,
}

impl Default for VlbConfig {
    fn default() -> Self {
        Self {
            vision_layers: 2,
            language_layers_total: 4,
            language_layers_kept: 2,
            hidden_dim: 32,
            num_heads: 2,
            vocab_size: 16,
            max_text_len: 8,
            patch_size: 8,
            num_views: 2,
            image_size: 32,
        }
    }
}

impl VlbConfig {
    pub fn validate(&self) -> Result<()> {
        if self.language_layers_kept == 0 || self.language_layers_kept > self.language_layers_total {
            return Err(Error::Config(format!(
                "kept language layers {} must lie in 1..={}",
                self.language_layers_kept, self.language_layers_total
            )));
        }
        if self.num_heads == 0 || self.hidden_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "vlb hidden_dim {} not divisible by {} heads",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image side {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.vocab_size == 0 || self.max_text_len == 0 || self.num_views == 0 {
            return Err(Error::Config(
                "vlb vocab, text length and views must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn visual_tokens(&self) -> usize {
        let side = self.image_size / self.patch_size;
        self.num_views * side * side
    }
}

pub struct VLTokens {
    /// `[B·(N·P + text_len) × hidden_dim]`, visual tokens first.
    pub tokens: Var,
    pub tokens_per_sample: usize,
}

#[derive(Clone, Debug)]
pub struct VlBackbone {
    pub cfg: VlbConfig,
    pub patch_proj: Linear,
    pub vis_pos: ParamId,
    pub vision_blocks: Vec<EncoderBlock>,
    pub projector: Linear,
    pub text_embed: ParamId,
    pub text_pos: ParamId,
    pub language_blocks: Vec<EncoderBlock>,
    vision_mask: Tensor,
}

impl VlBackbone {
    /// Initializes the full language stack from `rng`, then keeps only the
    /// first `language_layers_kept` layers, so a truncated backbone shares
    /// its prefix with the untruncated one built from the same stream.
    pub fn new<R: Rng>(cfg: VlbConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut s = Scope::new(store, rng, ModuleKind::Vlb, "vlb");
        let h = cfg.hidden_dim;
        let patch_proj = Linear::new(&mut s, "patch_proj", cfg.patch_size * cfg.patch_size * 3, h);
        let side = cfg.image_size / cfg.patch_size;
        let vis_pos = s.table("vis_pos", sincos_position_table(cfg.num_views, side, h), false);
        let vision_blocks = (0..cfg.vision_layers)
            .map(|l| EncoderBlock::new(&mut s, &format!("vision{l}"), h, cfg.num_heads))
            .collect();
        let projector = Linear::new(&mut s, "projector", h, h);
        let text_embed = s.tensor("text_embed", &[cfg.vocab_size, h], Init::TruncNormal(INIT_STD), false);
        let text_pos = s.tensor("text_pos", &[cfg.max_text_len, h], Init::TruncNormal(INIT_STD), false);
        let mut language_blocks = Vec::with_capacity(cfg.language_layers_kept);
        let mut discarded = ParamStore::new();
        for l in 0..cfg.language_layers_total {
            let name = format!("lang{l}");
            if l < cfg.language_layers_kept {
                language_blocks.push(EncoderBlock::new(&mut s, &name, h, cfg.num_heads));
            } else {
                let mut scratch = Scope::new(&mut discarded, &mut *s.rng, ModuleKind::Vlb, "vlb");
                EncoderBlock::new(&mut scratch, &name, h, cfg.num_heads);
            }
        }
        let (view_ids, _) = token_layout(cfg.num_views, side);
        let vision_mask = attention_mask(AttentionScope::WithinView, &view_ids);
        Ok(Self {
            cfg,
            patch_proj,
            vis_pos,
            vision_blocks,
            projector,
            text_embed,
            text_pos,
            language_blocks,
            vision_mask,
        })
    }

    /// Per-view visual tokens projected into the language width,
    /// `[B·N·P × hidden]`.
    pub fn encode_views_pixels(&self, f: &mut Forward<'_>, pixels: Var, batch: usize) -> Result<Var> {
        let x = self.patch_proj.forward(f, pixels)?;
        let pos = f.param(self.vis_pos);
        let pos = f.tape.tile_rows(pos, batch)?;
        let mut x = f.tape.add(x, pos)?;
        for block in &self.vision_blocks {
            x = block.forward(f, x, batch, Some(&self.vision_mask))?.0;
        }
        Ok(self.projector.forward(f, x)?)
    }

    pub fn encode_views(&self, f: &mut Forward<'_>, views: &[&[Image]]) -> Result<Var> {
        let pixels = f.tape.constant(batch_patch_pixels(views, self.cfg.patch_size)?);
        self.encode_views_pixels(f, pixels, views.len())
    }

    fn embed_text(&self, f: &mut Forward<'_>, instructions: &[&[u32]]) -> Result<(Var, usize)> {
        let len = instructions.first().map_or(0, |i| i.len());
        if len == 0 || instructions.iter().any(|i| i.len() != len) {
            return Err(Error::Invalid(
                "instructions in a batch must share a non-zero length".into(),
            ));
        }
        if len > self.cfg.max_text_len {
            return Err(Error::Invalid(format!(
                "instruction length {len} exceeds {}",
                self.cfg.max_text_len
            )));
        }
        let ids: Vec<usize> = instructions
            .iter()
            .flat_map(|i| i.iter().map(|&t| t as usize))
            .collect();
        if let Some(&bad) = ids.iter().find(|&&t| t >= self.cfg.vocab_size) {
            return Err(Error::Invalid(format!(
                "token id {bad} out of range for vocabulary of {}",
                self.cfg.vocab_size
            )));
        }
        let table = f.param(self.text_embed);
        let emb = f.tape.embedding(table, &ids)?;
        let pos = f.param(self.text_pos);
        let pos = f.tape.narrow(pos, 0, 0, len)?;
        let pos = f.tape.tile_rows(pos, instructions.len())?;
        Ok((f.tape.add(emb, pos)?, len))
    }

    /// Input to the language stack followed by the output of every kept
    /// language layer.
    pub fn hidden_states_pixels(
        &self,
        f: &mut Forward<'_>,
        pixels: Var,
        instructions: &[&[u32]],
    ) -> Result<(Vec<Var>, usize)> {
        let batch = instructions.len();
        let visual = self.encode_views_pixels(f, pixels, batch)?;
        let (text, len) = self.embed_text(f, instructions)?;
        let mut x = concat_tokens(f, visual, text, batch)?;
        let mut states = vec![x];
        for block in &self.language_blocks {
            x = block.forward(f, x, batch, None)?.0;
            states.push(x);
        }
        Ok((states, self.cfg.visual_tokens() + len))
    }

    pub fn encode_pixels(&self, f: &mut Forward<'_>, pixels: Var, instructions: &[&[u32]]) -> Result<VLTokens> {
        let (states, per) = self.hidden_states_pixels(f, pixels, instructions)?;
        Ok(VLTokens {
            tokens: *states.last().expect("at least the input state"),
            tokens_per_sample: per,
        })
    }

    pub fn encode(&self, f: &mut Forward<'_>, views: &[&[Image]], instructions: &[&[u32]]) -> Result<VLTokens> {
        if views.len() != instructions.len() {
            return Err(Error::Invalid("views and instructions differ in batch size".into()));
        }
        let pixels = f.tape.constant(batch_patch_pixels(views, self.cfg.patch_size)?);
        self.encode_pixels(f, pixels, instructions)
    }
}
