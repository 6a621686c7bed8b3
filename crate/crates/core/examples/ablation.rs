//! A small fusion ablation: the same data and seeds through each fusion
//! strategy.
//!
//! ```text
//! cargo run --release --example ablation
//! ```

use evo_depth::config::RunConfig;
use evo_depth::experiment::{ablation_csv, run_ablation, AblationAxis};
use evo_depth::train::StageConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut cfg = RunConfig::default();
    cfg.data.train_size = 100;
    cfg.data.val_size = 20;
    cfg.data.eval_scenes = 10;
    cfg.stages = StageConfig::progressive([20, 40, 60]);
    let rows = run_ablation(&cfg, AblationAxis::Fusion, 2, None, |label, o| {
        println!("{label:>15} seed {}: val_mse {:.4e}", o.seed, o.val_mse);
    })?;
    print!("{}", ablation_csv(&rows));
    Ok(())
}
