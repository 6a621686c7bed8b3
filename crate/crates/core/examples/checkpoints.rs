//! Saving a model with its optimizer state and restoring it into a fresh one.

use evo_depth::env::{generate_dataset, EnvConfig, Split};
use evo_depth::model::{Batch, EvoDepth, ModelConfig};
use evo_depth::train::{run_stage, Checkpoint, OptimConfig, StageConfig, StageRun, TrainData};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let demos = generate_dataset(1, 32, Split::Train, &EnvConfig::default())?;
    let (model, mut store) = EvoDepth::new(ModelConfig::default(), 1)?;
    let data = TrainData::new(&demos, model.patch_size())?;
    let optim = OptimConfig {
        warmup_steps: 5,
        batch_size: 4,
        ..OptimConfig::default()
    };
    let stages = StageConfig::progressive([20, 20, 20]);
    let run = StageRun {
        stage: &stages[0],
        index: 1,
        step_offset: 0,
        optim: &optim,
        seed: 1,
    };
    let opt = run_stage(&model, &mut store, &data, &run, &mut Vec::new())?;

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("stage1.ckpt");
    Checkpoint::from_store(&store, Some(&opt)).save(&path)?;
    println!("{} bytes, {} tensors", std::fs::metadata(&path)?.len(), store.len());

    let (_, mut fresh) = EvoDepth::new(ModelConfig::default(), 99)?;
    let ckpt = Checkpoint::load(&path)?;
    ckpt.restore_params(&mut fresh)?;
    let restored = ckpt.restore_optimizer(&fresh, stages[0].trainable, &optim)?;
    println!("optimizer restored: {}", restored.map_or(0, |o| o.num_tracked()));

    let batch = Batch::from_demonstrations(&demos[..2], model.patch_size())?;
    let a = model.sample(&store, &batch, &mut ChaCha8Rng::seed_from_u64(5))?;
    let b = model.sample(&fresh, &batch, &mut ChaCha8Rng::seed_from_u64(5))?;
    println!("samples identical: {}", a == b);
    Ok(())
}
