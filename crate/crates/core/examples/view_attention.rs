//! Within-view and cross-view attention in the depth encoder.
//!
//! Prints how much attention each view's queries pay to the other view, per
//! layer. Layers before the boundary print exactly zero.

use evo_depth::env::{render, scene_from_seed, EnvConfig};
use evo_depth::idem::{layer_scope, IdemConfig, IdemEncoder};
use evo_depth::nn::ParamStore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let env = EnvConfig::default();
    let views = render(&scene_from_seed(3, &env)?, env.image_size, env.square).into_vec();
    let cfg = IdemConfig::default();
    let mut store = ParamStore::new();
    let enc = IdemEncoder::new(cfg.clone(), &mut store, &mut ChaCha8Rng::seed_from_u64(1))?;

    for m in enc.attention_maps(&store, &views)? {
        let mut cross = 0.0f32;
        for h in 0..m.heads {
            cross += m.received(h, 1, Some(0)).iter().sum::<f32>();
            cross += m.received(h, 0, Some(1)).iter().sum::<f32>();
        }
        let per_query = cross / (m.heads * m.tokens) as f32;
        println!(
            "layer {} ({:?}): mean cross-view weight per query {per_query:.4}",
            m.layer,
            layer_scope(m.layer, &cfg)
        );
    }
    Ok(())
}
