//! Success rates under each scene perturbation.
//!
//! The scripted expert reads the true target so it is unaffected; an
//! untrained model shows the baseline.

use evo_depth::env::{EnvConfig, Perturbation};
use evo_depth::eval::{evaluate, ModelPolicy, ScriptedPolicy};
use evo_depth::model::{EvoDepth, ModelConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let env = EnvConfig::default();
    let expert = evaluate(&mut ScriptedPolicy::new(env.horizon), &env, 50, 0, &Perturbation::ALL)?;
    print!("scripted expert\n{}", expert.to_text());

    let (model, store) = EvoDepth::new(ModelConfig::default(), 0)?;
    let untrained = evaluate(
        &mut ModelPolicy::new(&model, &store, 0),
        &env,
        20,
        0,
        &Perturbation::ALL,
    )?;
    print!("untrained model\n{}", untrained.to_text());
    Ok(())
}
