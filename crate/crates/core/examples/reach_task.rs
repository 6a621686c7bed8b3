//! The synthetic two-camera reach task.
//!
//! Renders one scene to PPM files, shows the instruction, and rolls out the
//! scripted expert.
//!
//! ```text
//! cargo run --example reach_task -- /tmp/scene
//! ```

use std::path::PathBuf;

use evo_depth::env::{instruction_for, render, rollout, scene_from_seed, scripted_expert, EnvConfig, Image, Vocab};

fn ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "scene".into()));
    std::fs::create_dir_all(&dir)?;
    let env = EnvConfig::default();
    let vocab = Vocab::default();
    let scene = scene_from_seed(42, &env)?;
    let instruction = instruction_for(&scene, &vocab);
    println!("instruction: {}", vocab.detokenize(&instruction.token_ids));
    println!("effector {:?} -> target {:?}", scene.effector, scene.target_position());

    for (i, view) in render(&scene, env.image_size, env.square).into_vec().iter().enumerate() {
        let path = dir.join(format!("view{i}.ppm"));
        std::fs::write(&path, ppm(view))?;
        println!("wrote {}", path.display());
    }

    let result = rollout(
        |obs| {
            Ok::<_, std::convert::Infallible>(scripted_expert(
                [obs.state[0], obs.state[1], obs.state[2]],
                scene.target_position(),
                env.horizon,
            ))
        },
        &scene,
        &env,
        &vocab,
        4 * env.horizon,
    )?;
    println!("expert: success {} after {} steps", result.success, result.steps);
    Ok(())
}
