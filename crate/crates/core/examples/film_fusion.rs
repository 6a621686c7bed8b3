//! Depth features modulating vision-language tokens.
//!
//! A freshly built fusion module leaves the tokens untouched. After nudging
//! the modulation head the tokens move.

use evo_depth::autodiff::Tensor;
use evo_depth::nn::{Forward, ParamStore};
use evo_depth::sem::SpatialEnhancement;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn max_shift(
    store: &ParamStore,
    sem: &SpatialEnhancement,
    z: &Tensor,
    d: &Tensor,
) -> Result<f32, Box<dyn std::error::Error>> {
    let mut f = Forward::eval(store);
    let (zv, dv) = (f.tape.constant(z.clone()), f.tape.constant(d.clone()));
    let fused = sem.fuse(&mut f, zv, dv, 2)?;
    Ok(f.tape
        .value(fused)
        .data()
        .iter()
        .zip(z.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f32::max))
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::new();
    let sem = SpatialEnhancement::new(32, 32, &mut store, &mut rng);
    // two samples: 6 language tokens and 32 depth tokens each
    let z = Tensor::randn(&[12, 32], 1.0, &mut rng);
    let d = Tensor::randn(&[64, 32], 1.0, &mut rng);
    println!("at init:   max |Ẑ − Z| = {:.1e}", max_shift(&store, &sem, &z, &d)?);

    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        for v in store.value_mut(id).data_mut() {
            *v += 0.05;
        }
    }
    println!("perturbed: max |Ẑ − Z| = {:.3}", max_shift(&store, &sem, &z, &d)?);
    Ok(())
}
