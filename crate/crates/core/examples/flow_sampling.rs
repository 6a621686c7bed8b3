//! The linear noise-to-action path and Euler integration.
//!
//! With the exact velocity of the path, ten Euler steps carry Gaussian noise
//! onto the target chunk.

use evo_depth::autodiff::Tensor;
use evo_depth::expert::{euler_sample, interpolate, standard_normal, target_flow};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let actions = Tensor::uniform(&[8, 4], -1.0, 1.0, &mut rng);
    let eps = standard_normal(actions.shape(), &mut rng);
    for tau in [0.0, 0.25, 0.5, 1.0] {
        let s = interpolate(&actions, &eps, tau)?;
        let gap: f64 = s
            .noisy
            .data()
            .iter()
            .zip(actions.data())
            .map(|(a, b)| f64::from(a - b).powi(2))
            .sum();
        println!("tau {tau:.2}: squared distance to the chunk {gap:.3}");
    }
    let flow = target_flow(&actions, &eps)?;
    let out = euler_sample(eps.clone(), 10, |_, _| Ok(flow.clone()))?;
    let err = out
        .data()
        .iter()
        .zip(actions.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f32::max);
    println!("euler with the true flow, 10 steps: max error {err:.2e}");
    Ok(())
}
