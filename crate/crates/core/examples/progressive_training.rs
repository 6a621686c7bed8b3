//! Three-stage training on a small dataset, with a checkpoint per stage.
//!
//! ```text
//! cargo run --release --example progressive_training -- /tmp/run
//! ```

use std::path::PathBuf;

use evo_depth::config::RunConfig;
use evo_depth::eval::validation_mse;
use evo_depth::experiment::train_model;
use evo_depth::nn::ModuleKind;
use evo_depth::train::{checkpoint_path, StageConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "run".into()));
    std::fs::create_dir_all(&out)?;
    let mut cfg = RunConfig::default();
    cfg.data.train_size = 200;
    cfg.data.val_size = 50;
    cfg.stages = StageConfig::progressive([40, 80, 120]);
    for s in &cfg.stages {
        let trained: Vec<_> = s.trainable.iter().map(ModuleKind::name).collect();
        println!(
            "{:>6}: {:>4} steps, trains {}",
            s.name.as_str(),
            s.steps,
            trained.join("+")
        );
    }

    let (train, val) = cfg.datasets()?;
    let (model, store, report) = train_model(&cfg, &train, Some(&out))?;
    for stage in 1..=3 {
        let losses: Vec<f32> = report
            .metrics
            .iter()
            .filter(|m| m.stage == stage)
            .map(|m| m.loss)
            .collect();
        let tail = &losses[losses.len().saturating_sub(20)..];
        println!(
            "stage {stage}: first loss {:.4}, mean of last 20 {:.4}, saved {}",
            losses[0],
            tail.iter().sum::<f32>() / tail.len() as f32,
            checkpoint_path(&out, stage).display()
        );
    }
    println!(
        "validation action MSE {:.4e}",
        validation_mse(&model, &store, &val, cfg.seed)?
    );
    Ok(())
}
