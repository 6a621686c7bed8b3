//! Writes the depth encoder's attention maps as PGM images.
//!
//! ```text
//! cargo run --example attention_export -- /tmp/attention
//! ```

use std::path::PathBuf;

use evo_depth::env::{render, scene_from_seed, EnvConfig};
use evo_depth::export::export_attention;
use evo_depth::model::{EvoDepth, ModelConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "attention".into()));
    let env = EnvConfig::default();
    let views = render(&scene_from_seed(0, &env)?, env.image_size, env.square).into_vec();
    let (model, store) = EvoDepth::new(ModelConfig::default(), 0)?;
    let files = export_attention(&model, &store, &views, &out)?;
    println!("wrote {} maps to {}", files.len(), out.display());
    Ok(())
}
