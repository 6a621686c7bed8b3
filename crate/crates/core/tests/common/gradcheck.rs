//! Analytic gradients against central differences of independent f64
//! reference implementations, shared by the gradient and acceptance tests.

use evo_depth::autodiff::{Tape, Tensor, Var, MASK_BLOCKED};
use evo_depth::env::{generate_dataset, EnvConfig, Split};
use evo_depth::expert::{flow_matching_loss, standard_normal};
use evo_depth::model::{Batch, EvoDepth, ModelConfig};
use evo_depth::nn::{Forward, ModuleKind, ModuleSet, ParamStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-3;
pub const INSTANCES: usize = 20;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, -2.0, 2.0, rng).with_grad(true)
}

fn to_f64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| f64::from(v)).collect()
}

/// Relative error `‖g − fd‖ / ‖fd‖` of the tape gradient of
/// `Σ w ⊙ build(inputs)` over all inputs, with `oracle` as the f64 forward.
fn grad_error(
    inputs: &[Tensor],
    build: impl Fn(&mut Tape, &[Var]) -> Var,
    oracle: impl Fn(&[Vec<f64>]) -> Vec<f64>,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars);
    let out_shape = tape.shape(out).to_vec();
    let w = Tensor::uniform(&out_shape, -1.0, 1.0, rng);
    let wv = tape.constant(w.clone());
    let prod = tape.mul(out, wv).unwrap();
    let loss = tape.sum(prod);
    let grads = tape.backward(loss).unwrap();

    let w64 = to_f64(&w);
    let base: Vec<Vec<f64>> = inputs.iter().map(to_f64).collect();
    let reference = oracle(&base);
    let forward = tape.value(out).data();
    assert_eq!(reference.len(), forward.len(), "oracle output length");
    for (r, f) in reference.iter().zip(forward) {
        assert!(
            (r - f64::from(*f)).abs() <= 1e-4 * (1.0 + r.abs()),
            "forward {f} vs oracle {r}"
        );
    }
    let objective = |xs: &[Vec<f64>]| -> f64 { oracle(xs).iter().zip(&w64).map(|(o, w)| o * w).sum() };

    let (mut diff, mut norm) = (0.0f64, 0.0f64);
    for (i, v) in vars.iter().enumerate() {
        let g = grads.wrt(*v);
        for j in 0..base[i].len() {
            let mut xs = base.clone();
            xs[i][j] += STEP;
            let up = objective(&xs);
            xs[i][j] -= 2.0 * STEP;
            let down = objective(&xs);
            let fd = (up - down) / (2.0 * STEP);
            diff += (f64::from(g.data()[j]) - fd).powi(2);
            norm += fd * fd;
        }
    }
    diff.sqrt() / norm.sqrt().max(1e-12)
}

pub type Case = fn(&mut ChaCha8Rng) -> f64;

/// Worst relative error over [`INSTANCES`] random instances.
pub fn worst_error(name: &str, case: Case) -> f64 {
    let seed = name
        .bytes()
        .fold(0x9a5u64, |h, b| h.wrapping_mul(31).wrapping_add(u64::from(b)));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..INSTANCES).map(|_| case(&mut rng)).fold(0.0, f64::max)
}

/// Every differentiable tape operation with its random-instance generator.
pub const OPS: &[(&str, Case)] = &[
    ("matmul", matmul_case),
    ("add", add_case),
    ("sub", sub_case),
    ("mul", mul_case),
    ("add_row", add_row_case),
    ("scale", scale_case),
    ("add_scalar", add_scalar_case),
    ("gelu", gelu_case),
    ("dropout", dropout_case),
    ("layernorm", layernorm_case),
    ("softmax", softmax_case),
    ("attention", attention_case),
    ("mean", mean_case),
    ("sum", sum_case),
    ("mean_all", mean_all_case),
    ("concat", concat_case),
    ("narrow", narrow_case),
    ("reshape", reshape_case),
    ("transpose", transpose_case),
    ("embedding", embedding_case),
    ("repeat_rows", repeat_rows_case),
    ("tile_rows", tile_rows_case),
];

fn dims(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(1..=4)).collect()
}

fn oracle_softmax(x: &[f64], outer: usize, dim: usize, inner: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |d: usize| o * dim * inner + d * inner + i;
            let m = (0..dim).map(|d| x[idx(d)]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..dim).map(|d| (x[idx(d)] - m).exp()).sum();
            for d in 0..dim {
                out[idx(d)] = (x[idx(d)] - m).exp() / z;
            }
        }
    }
    out
}

fn gelu64(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

fn matmul_case(rng: &mut ChaCha8Rng) -> f64 {
    let d = dims(rng, 3);
    let (m, k, n) = (d[0], d[1], d[2]);
    grad_error(
        &[random(&[m, k], rng), random(&[k, n], rng)],
        |t, v| t.matmul(v[0], v[1]).unwrap(),
        |x| {
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    out[i * n + j] = (0..k).map(|p| x[0][i * k + p] * x[1][p * n + j]).sum();
                }
            }
            out
        },
        rng,
    )
}

fn binary(rng: &mut ChaCha8Rng, build: fn(&mut Tape, Var, Var) -> Var, f: fn(f64, f64) -> f64) -> f64 {
    let shape = dims(rng, 2);
    grad_error(
        &[random(&shape, rng), random(&shape, rng)],
        |t, v| build(t, v[0], v[1]),
        |x| x[0].iter().zip(&x[1]).map(|(a, b)| f(*a, *b)).collect(),
        rng,
    )
}

fn add_case(rng: &mut ChaCha8Rng) -> f64 {
    binary(rng, |t, a, b| t.add(a, b).unwrap(), |a, b| a + b)
}

fn sub_case(rng: &mut ChaCha8Rng) -> f64 {
    binary(rng, |t, a, b| t.sub(a, b).unwrap(), |a, b| a - b)
}

fn mul_case(rng: &mut ChaCha8Rng) -> f64 {
    binary(rng, |t, a, b| t.mul(a, b).unwrap(), |a, b| a * b)
}

fn add_row_case(rng: &mut ChaCha8Rng) -> f64 {
    let d = dims(rng, 2);
    let (r, c) = (d[0], d[1]);
    grad_error(
        &[random(&[r, c], rng), random(&[c], rng)],
        |t, v| t.add_row(v[0], v[1]).unwrap(),
        |x| (0..r * c).map(|i| x[0][i] + x[1][i % c]).collect(),
        rng,
    )
}

fn scale_case(rng: &mut ChaCha8Rng) -> f64 {
    let s: f32 = rng.gen_range(-3.0..3.0);
    grad_error(
        &[random(&dims(rng, 2), rng)],
        |t, v| t.scale(v[0], s),
        |x| x[0].iter().map(|v| v * f64::from(s)).collect(),
        rng,
    )
}

fn add_scalar_case(rng: &mut ChaCha8Rng) -> f64 {
    let c: f32 = rng.gen_range(-3.0..3.0);
    grad_error(
        &[random(&dims(rng, 2), rng)],
        |t, v| t.add_scalar(v[0], c),
        |x| x[0].iter().map(|v| v + f64::from(c)).collect(),
        rng,
    )
}

fn gelu_case(rng: &mut ChaCha8Rng) -> f64 {
    grad_error(
        &[random(&dims(rng, 2), rng)],
        |t, v| t.gelu(v[0]),
        |x| x[0].iter().map(|&v| gelu64(v)).collect(),
        rng,
    )
}

fn dropout_case(rng: &mut ChaCha8Rng) -> f64 {
    let shape = dims(rng, 2);
    let n: usize = shape.iter().product();
    let rate = 0.3f32;
    let seed: u64 = rng.gen();
    // replay the mask stream independently
    let mut replay = ChaCha8Rng::seed_from_u64(seed);
    let keep = 1.0 - rate;
    let mask: Vec<f64> = (0..n)
        .map(|_| {
            if replay.gen::<f32>() < keep {
                1.0 / f64::from(keep)
            } else {
                0.0
            }
        })
        .collect();
    grad_error(
        &[random(&shape, rng)],
        |t, v| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            t.dropout(v[0], rate, Some(&mut r)).unwrap()
        },
        |x| x[0].iter().zip(&mask).map(|(v, m)| v * m).collect(),
        rng,
    )
}

fn layernorm_case(rng: &mut ChaCha8Rng) -> f64 {
    let r = rng.gen_range(1..=4);
    let c = rng.gen_range(2..=6);
    let eps = 1e-5f32;
    grad_error(
        &[random(&[r, c], rng), random(&[c], rng), random(&[c], rng)],
        |t, v| t.layernorm(v[0], v[1], v[2], eps).unwrap(),
        |x| {
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                let row = &x[0][i * c..(i + 1) * c];
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
                let inv = 1.0 / (var + f64::from(eps)).sqrt();
                for j in 0..c {
                    out[i * c + j] = (row[j] - mean) * inv * x[1][j] + x[2][j];
                }
            }
            out
        },
        rng,
    )
}

fn softmax_case(rng: &mut ChaCha8Rng) -> f64 {
    let shape = dims(rng, 3);
    let axis = rng.gen_range(0..3);
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    grad_error(
        &[random(&shape, rng)],
        |t, v| t.softmax(v[0], axis).unwrap(),
        |x| oracle_softmax(&x[0], outer, shape[axis], inner),
        rng,
    )
}

#[allow(clippy::too_many_arguments)]
fn oracle_attention(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    batch: usize,
    heads: usize,
    tq: usize,
    tk: usize,
    d: usize,
    mask: Option<&[f64]>,
) -> Vec<f64> {
    let dh = d / heads;
    let mut out = vec![0.0; batch * tq * d];
    for b in 0..batch {
        for h in 0..heads {
            for i in 0..tq {
                let scores: Vec<f64> = (0..tk)
                    .map(|j| {
                        let dot: f64 = (0..dh)
                            .map(|c| q[(b * tq + i) * d + h * dh + c] * k[(b * tk + j) * d + h * dh + c])
                            .sum();
                        dot / (dh as f64).sqrt() + mask.map_or(0.0, |m| m[i * tk + j])
                    })
                    .collect();
                let p = oracle_softmax(&scores, 1, tk, 1);
                for c in 0..dh {
                    out[(b * tq + i) * d + h * dh + c] = (0..tk).map(|j| p[j] * v[(b * tk + j) * d + h * dh + c]).sum();
                }
            }
        }
    }
    out
}

fn attention_case(rng: &mut ChaCha8Rng) -> f64 {
    let batch = rng.gen_range(1..=2);
    let heads = rng.gen_range(1..=2);
    let dh = rng.gen_range(1..=3);
    let (tq, tk, d) = (rng.gen_range(1..=4), rng.gen_range(1..=4), heads * dh);
    let mask = rng.gen_bool(0.5).then(|| {
        let mut m = vec![0.0f32; tq * tk];
        for i in 0..tq {
            let open = rng.gen_range(0..tk);
            for j in 0..tk {
                if j != open && rng.gen_bool(0.4) {
                    m[i * tk + j] = MASK_BLOCKED;
                }
            }
        }
        Tensor::new(vec![tq, tk], m).unwrap()
    });
    let mask64 = mask.as_ref().map(to_f64);
    grad_error(
        &[
            random(&[batch * tq, d], rng),
            random(&[batch * tk, d], rng),
            random(&[batch * tk, d], rng),
        ],
        |t, v| t.attention(v[0], v[1], v[2], batch, heads, mask.as_ref()).unwrap(),
        |x| oracle_attention(&x[0], &x[1], &x[2], batch, heads, tq, tk, d, mask64.as_deref()),
        rng,
    )
}

fn mean_case(rng: &mut ChaCha8Rng) -> f64 {
    let shape = dims(rng, 3);
    let axis = rng.gen_range(0..3);
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let dim = shape[axis];
    grad_error(
        &[random(&shape, rng)],
        |t, v| t.mean(v[0], axis).unwrap(),
        |x| {
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for i in 0..inner {
                    out[o * inner + i] =
                        (0..dim).map(|d| x[0][o * dim * inner + d * inner + i]).sum::<f64>() / dim as f64;
                }
            }
            out
        },
        rng,
    )
}

fn sum_case(rng: &mut ChaCha8Rng) -> f64 {
    grad_error(
        &[random(&dims(rng, 2), rng)],
        |t, v| t.sum(v[0]),
        |x| vec![x[0].iter().sum()],
        rng,
    )
}

fn mean_all_case(rng: &mut ChaCha8Rng) -> f64 {
    grad_error(
        &[random(&dims(rng, 2), rng)],
        |t, v| t.mean_all(v[0]),
        |x| vec![x[0].iter().sum::<f64>() / x[0].len() as f64],
        rng,
    )
}

fn concat_case(rng: &mut ChaCha8Rng) -> f64 {
    let axis = rng.gen_range(0..2);
    let parts = rng.gen_range(2..=3);
    let base = dims(rng, 2);
    let shapes: Vec<Vec<usize>> = (0..parts)
        .map(|_| {
            let mut s = base.clone();
            s[axis] = rng.gen_range(1..=3);
            s
        })
        .collect();
    let inputs: Vec<Tensor> = shapes.iter().map(|s| random(s, rng)).collect();
    let shapes2 = shapes.clone();
    grad_error(
        &inputs,
        |t, v| t.concat(v, axis).unwrap(),
        move |x| {
            let mut out = Vec::new();
            if axis == 0 {
                x.iter().for_each(|p| out.extend_from_slice(p));
            } else {
                for r in 0..base[0] {
                    for (p, s) in x.iter().zip(&shapes2) {
                        out.extend_from_slice(&p[r * s[1]..(r + 1) * s[1]]);
                    }
                }
            }
            out
        },
        rng,
    )
}

fn narrow_case(rng: &mut ChaCha8Rng) -> f64 {
    let shape = vec![rng.gen_range(2..=5), rng.gen_range(2..=5)];
    let axis = rng.gen_range(0..2);
    let start = rng.gen_range(0..shape[axis] - 1);
    let len = rng.gen_range(1..=shape[axis] - start);
    grad_error(
        &[random(&shape, rng)],
        |t, v| t.narrow(v[0], axis, start, len).unwrap(),
        |x| {
            let mut out = Vec::new();
            for r in 0..shape[0] {
                for c in 0..shape[1] {
                    let i = if axis == 0 { r } else { c };
                    if (start..start + len).contains(&i) {
                        out.push(x[0][r * shape[1] + c]);
                    }
                }
            }
            out
        },
        rng,
    )
}

fn reshape_case(rng: &mut ChaCha8Rng) -> f64 {
    let d = dims(rng, 2);
    grad_error(
        &[random(&[d[0], d[1]], rng)],
        |t, v| {
            let r = t.reshape(v[0], &[d[1], d[0]]).unwrap();
            // make the new layout matter downstream
            t.gelu(r)
        },
        |x| x[0].iter().map(|&v| gelu64(v)).collect(),
        rng,
    )
}

fn transpose_case(rng: &mut ChaCha8Rng) -> f64 {
    let d = dims(rng, 2);
    let (r, c) = (d[0], d[1]);
    grad_error(
        &[random(&[r, c], rng)],
        |t, v| t.transpose(v[0]).unwrap(),
        |x| {
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = x[0][i * c + j];
                }
            }
            out
        },
        rng,
    )
}

fn embedding_case(rng: &mut ChaCha8Rng) -> f64 {
    let (rows, d) = (rng.gen_range(2..=6), rng.gen_range(1..=4));
    let ids: Vec<usize> = (0..rng.gen_range(1..=6)).map(|_| rng.gen_range(0..rows)).collect();
    grad_error(
        &[random(&[rows, d], rng)],
        |t, v| t.embedding(v[0], &ids).unwrap(),
        |x| ids.iter().flat_map(|&i| x[0][i * d..(i + 1) * d].to_vec()).collect(),
        rng,
    )
}

fn repeat_rows_case(rng: &mut ChaCha8Rng) -> f64 {
    let d = dims(rng, 3);
    let (r, c, times) = (d[0], d[1], d[2]);
    grad_error(
        &[random(&[r, c], rng)],
        |t, v| t.repeat_rows(v[0], times).unwrap(),
        |x| {
            (0..r)
                .flat_map(|i| {
                    std::iter::repeat(x[0][i * c..(i + 1) * c].to_vec())
                        .take(times)
                        .flatten()
                })
                .collect()
        },
        rng,
    )
}

fn tile_rows_case(rng: &mut ChaCha8Rng) -> f64 {
    let d = dims(rng, 3);
    let times = d[2];
    grad_error(
        &[random(&[d[0], d[1]], rng)],
        |t, v| t.tile_rows(v[0], times).unwrap(),
        |x| std::iter::repeat(x[0].clone()).take(times).flatten().collect(),
        rng,
    )
}

/// Flow-matching loss of the full model on a fixed batch with fixed noise
/// and no dropout. The tape's scalar is differentiated; the value used for
/// differencing is re-accumulated in f64 from the velocity rows, so it is
/// not limited by the resolution of one f32 scalar.
fn composite_loss(
    model: &EvoDepth,
    store: &ParamStore,
    batch: &Batch,
    noise_seed: u64,
    grads: bool,
) -> (f64, Vec<(usize, Tensor)>) {
    let trainable = if grads { ModuleSet::all() } else { ModuleSet::EMPTY };
    let mut f = Forward::new(store, trainable, None);
    let ctx = model.context(&mut f, batch).unwrap();
    let actions = model.normalize_actions(batch.actions.as_ref().unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let eps = standard_normal(actions.shape(), &mut rng.clone());
    let mut velocity = None;
    let loss = flow_matching_loss(&mut f, &actions, batch.size, &mut rng, |f, noisy, taus| {
        let v = model.expert.predict_velocity(f, &ctx, noisy, taus)?;
        velocity = Some(v);
        Ok(v)
    })
    .unwrap();
    let v = f.tape.value(velocity.unwrap()).data();
    let value = v
        .iter()
        .zip(actions.data().iter().zip(eps.data()))
        .map(|(&v, (&a, &e))| (f64::from(v) - (f64::from(a) - f64::from(e))).powi(2))
        .sum::<f64>()
        / v.len() as f64;
    let g = if grads {
        let gr = f.tape.backward(loss).unwrap();
        f.param_grads(&gr).into_iter().map(|(id, t)| (id.index(), t)).collect()
    } else {
        Vec::new()
    };
    (value, g)
}

/// Depth encoder, fusion and expert jointly: four scalars per instance, the
/// largest-gradient entry of IDEM, SEM, the expert and the backbone.
/// Returns the worst relative error and where it occurred.
pub fn composite_worst() -> (f64, String) {
    let env = EnvConfig::default();
    let mut worst = (0.0f64, String::new());
    for instance in 0..INSTANCES as u64 {
        let mut cfg = ModelConfig::default();
        cfg.expert.dropout = 0.0;
        let (model, mut store) = EvoDepth::new(cfg, instance).unwrap();
        // move the fusion module far from its identity init so the depth
        // path carries signal
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + instance);
        let ids: Vec<_> = store
            .iter()
            .filter(|(_, p)| p.module == ModuleKind::Sem)
            .map(|(id, _)| id)
            .collect();
        for id in ids {
            for v in store.value_mut(id).data_mut() {
                *v = rng.gen_range(-0.5..0.5);
            }
        }
        let demos = generate_dataset(instance, 2, Split::Train, &env).unwrap();
        let batch = Batch::from_demonstrations(&demos, model.patch_size()).unwrap();
        let (_, grads) = composite_loss(&model, &store, &batch, instance, true);
        for module in [ModuleKind::Idem, ModuleKind::Sem, ModuleKind::Expert, ModuleKind::Vlb] {
            let (pid, k, g) = grads
                .iter()
                .filter(|(i, _)| store.iter().nth(*i).unwrap().1.module == module)
                .flat_map(|(i, t)| t.data().iter().enumerate().map(move |(k, &g)| (*i, k, g)))
                .max_by(|a, b| a.2.abs().total_cmp(&b.2.abs()))
                .unwrap();
            let id = store.iter().nth(pid).unwrap().0;
            let orig = store.get(id).value.data()[k];
            let eval_at = |store: &mut ParamStore, x: f64| {
                store.value_mut(id).data_mut()[k] = x as f32;
                composite_loss(&model, store, &batch, instance, false).0
            };
            let up = eval_at(&mut store, f64::from(orig) + STEP);
            let down = eval_at(&mut store, f64::from(orig) - STEP);
            store.value_mut(id).data_mut()[k] = orig;
            // the perturbed values are what the tape actually saw
            let span = f64::from((f64::from(orig) + STEP) as f32) - f64::from((f64::from(orig) - STEP) as f32);
            let fd = (up - down) / span;
            let rel = (fd - f64::from(g)).abs() / fd.abs().max(f64::from(g).abs());
            if rel >= worst.0 {
                worst = (
                    rel,
                    format!("instance {instance} {module}: analytic {g:.6e} vs fd {fd:.6e}"),
                );
            }
        }
    }
    worst
}
