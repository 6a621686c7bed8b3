use crate::autodiff::Tensor;

use super::ACTION_DIM;

/// Straight line from `start` to `target` in `horizon` equal position steps;
/// the gripper channel closes on the final step.
pub fn scripted_expert(start: [f32; 3], target: [f32; 3], horizon: usize) -> Tensor {
    assert!(horizon >= 1, "horizon must be at least 1");
    let mut data = Vec::with_capacity(horizon * ACTION_DIM);
    let point = |k: usize, axis: usize| start[axis] + (target[axis] - start[axis]) * (k as f32 / horizon as f32);
    for k in 0..horizon {
        for axis in 0..3 {
            let delta = if k + 1 == horizon {
                target[axis] - point(k, axis)
            } else {
                point(k + 1, axis) - point(k, axis)
            };
            data.push(delta);
        }
        data.push(if k + 1 == horizon { 1.0 } else { 0.0 });
    }
    Tensor::new(vec![horizon, ACTION_DIM], data).expect("action chunk shape")
}
