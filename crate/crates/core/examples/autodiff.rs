//! Builds a two-layer network on a tape and reads back its gradients.
//!
//! ```text
//! cargo run --example autodiff
//! ```

use evo_depth::autodiff::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::uniform(&[4, 3], -1.0, 1.0, &mut rng));
    let w1 = tape.leaf(Tensor::randn(&[3, 8], 0.5, &mut rng).with_grad(true));
    let w2 = tape.leaf(Tensor::randn(&[8, 2], 0.5, &mut rng).with_grad(true));

    let h = tape.matmul(x, w1)?;
    let h = tape.gelu(h);
    let y = tape.matmul(h, w2)?;
    let p = tape.softmax(y, 1)?;
    let sq = tape.mul(p, y)?;
    let loss = tape.mean_all(sq);

    let grads = tape.backward(loss)?;
    println!("loss = {}", tape.value(loss).item());
    println!("recorded {} nodes", tape.len());
    println!("|dL/dw1| = {:.3e}", grads.wrt(w1).l2_norm());
    println!("|dL/dw2| = {:.3e}", grads.wrt(w2).l2_norm());
    Ok(())
}
