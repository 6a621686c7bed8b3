use evo_depth::autodiff::{Tape, Tensor, MASK_BLOCKED};
use evo_depth::config::RunConfig;
use evo_depth::env::{
    decode_dataset, encode_dataset, generate_dataset, render, sample_scene, scripted_expert, EnvConfig, Image, Mirror,
    Object, SceneSpec, Split, Vocab, PALETTE,
};
use evo_depth::eval::{success_rate, ScriptedPolicy};
use evo_depth::expert::{interpolate, target_flow};
use evo_depth::idem::{attention_mask_for_layer, token_layout, IdemConfig, IdemEncoder};
use evo_depth::model::{Batch, EvoDepth, ModelConfig};
use evo_depth::nn::{Forward, ModuleSet, ParamStore};
use evo_depth::sem::{apply_film, pool, ModulationParams};
use evo_depth::train::{lr_at, StageConfig};
use evo_depth::vlb::{VlBackbone, VlbConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tensor(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, -2.0, 2.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn random_views(n: usize, size: usize, seed: u64) -> Vec<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| Image {
            height: size,
            width: size,
            data: (0..size * size * 3).map(|_| rng.gen()).collect(),
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..6, cols in 1usize..9, seed in any::<u64>()) {
        let mut tape = Tape::new();
        let x = tape.leaf(tensor(&[rows, cols], seed));
        let y = tape.softmax(x, 1).unwrap();
        for r in 0..rows {
            let s: f64 = tape.value(y).row(r).iter().map(|&v| f64::from(v)).sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn masked_keys_get_no_weight(t in 2usize..7, d in 1usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mask = vec![0.0f32; t * t];
        for (i, row) in mask.chunks_mut(t).enumerate() {
            for (j, m) in row.iter_mut().enumerate() {
                if j != i && rng.gen_bool(0.5) {
                    *m = MASK_BLOCKED;
                }
            }
        }
        let mask = Tensor::new(vec![t, t], mask).unwrap();
        let mut tape = Tape::new();
        let q = tape.leaf(tensor(&[t, d], seed ^ 1));
        let k = tape.leaf(tensor(&[t, d], seed ^ 2));
        let v = tape.leaf(tensor(&[t, d], seed ^ 3));
        let out = tape.scaled_dot_attention(q, k, v, Some(&mask)).unwrap();
        let (w, _) = tape.attention_weights(out).unwrap();
        for (wi, mi) in w.iter().zip(mask.data()) {
            if *mi != 0.0 {
                prop_assert!(*wi < 1e-12);
            }
        }
    }

    #[test]
    fn zero_rate_and_eval_dropout_are_identity(n in 1usize..40, rate in 0.0f32..0.9, seed in any::<u64>()) {
        let x = tensor(&[n, 3], seed);
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = tape.dropout(v, 0.0, Some(&mut rng)).unwrap();
        prop_assert_eq!(tape.value(y), &x);
        let z = tape.dropout(v, rate, None::<&mut ChaCha8Rng>).unwrap();
        prop_assert_eq!(tape.value(z), &x);
    }

    #[test]
    fn lr_schedule_is_continuous_and_non_negative(warmup in 0usize..200, extra in 1usize..500, peak in 1e-6f64..1e-2) {
        let total = warmup + extra;
        for step in 0..=total {
            prop_assert!(lr_at(step, warmup, total, peak).unwrap() >= 0.0);
        }
        if warmup > 0 {
            let left = peak * (warmup as f64 - 1e-9) / warmup as f64;
            prop_assert!((lr_at(warmup, warmup, total, peak).unwrap() - left).abs() < 1e-12);
        }
        prop_assert_eq!(lr_at(total, warmup, total, peak).unwrap(), 0.0);
    }

    #[test]
    fn interpolation_endpoints_and_derivative(rows in 1usize..6, cols in 1usize..5, tau in 0.0f32..1.0, seed in any::<u64>()) {
        let a = tensor(&[rows, cols], seed);
        let eps = tensor(&[rows, cols], seed ^ 7);
        let at0 = interpolate(&a, &eps, 0.0).unwrap().noisy;
        let at1 = interpolate(&a, &eps, 1.0).unwrap().noisy;
        for ((x0, x1), (ai, ei)) in at0.data().iter().zip(at1.data()).zip(a.data().iter().zip(eps.data())) {
            prop_assert!((x0 - ei).abs() < 1e-6);
            prop_assert!((x1 - ai).abs() < 1e-6);
        }
        // the path is affine in τ, so the derivative is the difference of
        // the endpoints, evaluated here in f64
        let u = target_flow(&a, &eps).unwrap();
        let mid = interpolate(&a, &eps, tau).unwrap().noisy;
        for (((m, ui), ai), ei) in mid.data().iter().zip(u.data()).zip(a.data()).zip(eps.data()) {
            prop_assert_eq!(f64::from(*ui), f64::from(*ai) - f64::from(*ei));
            let want = f64::from(*ei) + f64::from(tau) * (f64::from(*ai) - f64::from(*ei));
            prop_assert!((f64::from(*m) - want).abs() < 1e-5);
        }
    }

    #[test]
    fn film_is_affine_in_z(batch in 1usize..3, tokens in 1usize..5, a in -2.0f32..2.0, b in -2.0f32..2.0, seed in any::<u64>()) {
        let c = 4;
        let store = ParamStore::new();
        let mut f = Forward::eval(&store);
        let gamma = f.tape.leaf(tensor(&[batch, c], seed));
        let beta = f.tape.leaf(tensor(&[batch, c], seed ^ 1));
        let m = ModulationParams { gamma, beta };
        let z1 = tensor(&[batch * tokens, c], seed ^ 2);
        let z2 = tensor(&[batch * tokens, c], seed ^ 3);
        let mix: Vec<f32> = z1.data().iter().zip(z2.data()).map(|(x, y)| a * x + b * y).collect();
        let zs = [z1, z2, Tensor::new(vec![batch * tokens, c], mix).unwrap()];
        let outs: Vec<Tensor> = zs
            .iter()
            .map(|z| {
                let v = f.tape.constant(z.clone());
                let o = apply_film(&mut f, v, &m, batch).unwrap();
                f.tape.value(o).clone()
            })
            .collect();
        let beta = f.tape.value(beta).clone();
        for (i, got) in outs[2].data().iter().enumerate() {
            let bi = beta.data()[(i / c / tokens) * c + i % c];
            let want = a * outs[0].data()[i] + b * outs[1].data()[i] - (a + b - 1.0) * bi;
            prop_assert!((got - want).abs() < 1e-5, "{} vs {}", got, want);
        }
    }

    #[test]
    fn pooling_ignores_token_order(tokens in 1usize..7, seed in any::<u64>()) {
        let x = tensor(&[tokens, 3], seed);
        let mut order: Vec<usize> = (0..tokens).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..tokens).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let permuted: Vec<f32> = order.iter().flat_map(|&r| x.row(r).to_vec()).collect();
        let store = ParamStore::new();
        let mut f = Forward::eval(&store);
        let a = f.tape.constant(x.clone());
        let b = f.tape.constant(Tensor::new(vec![tokens, 3], permuted).unwrap());
        let pa = pool(&mut f, a, 1).unwrap();
        let pb = pool(&mut f, b, 1).unwrap();
        for (u, v) in f.tape.value(pa).data().iter().zip(f.tape.value(pb).data()) {
            prop_assert!((u - v).abs() < 1e-6);
        }
    }

    #[test]
    fn within_view_layers_never_cross_views(views in 2usize..4, layers in 1usize..5, seed in any::<u64>()) {
        let boundary = 1 + (seed as usize) % layers;
        let cfg = IdemConfig {
            num_layers: layers,
            boundary,
            patch_size: 4,
            token_dim: 8,
            num_heads: 2,
            num_views: views,
            image_size: 8,
            cross_first: true,
        };
        let mut store = ParamStore::new();
        let enc = IdemEncoder::new(cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let maps = enc.attention_maps(&store, &random_views(views, 8, seed)).unwrap();
        let ids = enc.view_ids();
        for m in maps.iter().filter(|m| m.layer < boundary) {
            for h in 0..m.heads {
                for q in 0..m.tokens {
                    for (k, w) in m.row(h, q).iter().enumerate() {
                        if ids[q] != ids[k] {
                            prop_assert!(*w < 1e-12);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn single_view_masks_ignore_boundary(layers in 1usize..6, per_side in 1usize..4) {
        let (ids, _) = token_layout(1, per_side);
        let masks = |boundary| {
            let cfg = IdemConfig { num_layers: layers, boundary, num_views: 1, ..IdemConfig::default() };
            (0..layers).map(|l| attention_mask_for_layer(l, &ids, &cfg)).collect::<Vec<_>>()
        };
        let first = masks(1);
        for b in 2..=layers {
            prop_assert_eq!(&masks(b), &first);
        }
    }

    #[test]
    fn truncated_backbone_is_a_prefix(kept in 1usize..3, seed in 0u64..1000) {
        let cfg = |k| VlbConfig {
            language_layers_total: 3,
            language_layers_kept: k,
            hidden_dim: 8,
            vocab_size: 9,
            image_size: 8,
            patch_size: 4,
            ..VlbConfig::default()
        };
        let views = random_views(2, 8, seed);
        let ids: Vec<u32> = vec![1, 2, 3, 4];
        let run = |k| {
            let mut store = ParamStore::new();
            let vlb = VlBackbone::new(cfg(k), &mut store, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let mut f = Forward::eval(&store);
            let px = f.tape.constant(evo_depth::idem::batch_patch_pixels(&[&views], 4).unwrap());
            let (states, _) = vlb.hidden_states_pixels(&mut f, px, &[&ids]).unwrap();
            states.iter().map(|&s| f.tape.value(s).clone()).collect::<Vec<_>>()
        };
        let short = run(kept);
        let long = run(kept + 1);
        prop_assert_eq!(short.last().unwrap(), &long[kept]);
    }

    #[test]
    fn token_shape_does_not_depend_on_instruction(a in prop::collection::vec(0u32..9, 3), b in prop::collection::vec(0u32..9, 3)) {
        let cfg = VlbConfig { vocab_size: 9, ..VlbConfig::default() };
        let mut store = ParamStore::new();
        let vlb = VlBackbone::new(cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let views = random_views(2, 32, 5);
        let mut f = Forward::eval(&store);
        let za = vlb.encode(&mut f, &[&views], &[&a]).unwrap();
        let zb = vlb.encode(&mut f, &[&views], &[&b]).unwrap();
        prop_assert_eq!(f.tape.shape(za.tokens), f.tape.shape(zb.tokens));
    }

    #[test]
    fn objects_render_at_projected_pixels(x in 0.0f32..1.0, y in 0.0f32..1.0, z in 0.0f32..1.0, color in 0usize..5) {
        let scene = SceneSpec {
            objects: vec![Object { position: [x, y, z], color }],
            target: 0,
            effector: [0.0, 0.0, 0.0],
            background: [0, 0, 0],
        };
        let size = 32;
        let px = |v: f32| (v * (size - 1) as f32 + 0.5).floor() as usize;
        // the effector square sits at (31, 0) in front and (0, 0) on top
        prop_assume!(px(x) > 2 || (px(1.0 - z) < 29 && px(y) > 2));
        let views = render(&scene, size, 3);
        prop_assert_eq!(views.front.pixel(px(1.0 - z), px(x)), PALETTE[color].1);
        prop_assert_eq!(views.top.pixel(px(y), px(x)), PALETTE[color].1);
    }

    #[test]
    fn top_view_cannot_see_height(seed in any::<u64>(), z in 0.0f32..1.0) {
        let cfg = EnvConfig::default();
        let scene = sample_scene(&mut ChaCha8Rng::seed_from_u64(seed), 1, cfg.min_separation).unwrap();
        let mut lifted = scene.clone();
        lifted.objects[0].position[2] = z;
        let (a, b) = (render(&scene, 32, 3), render(&lifted, 32, 3));
        prop_assert_eq!(a.top, b.top);
    }

    #[test]
    fn scripted_expert_always_succeeds(seed in any::<u64>(), objects in 1usize..6) {
        let cfg = EnvConfig { num_objects: objects, ..EnvConfig::default() };
        let scene = sample_scene(&mut ChaCha8Rng::seed_from_u64(seed), objects, cfg.min_separation).unwrap();
        let mut policy = ScriptedPolicy::new(cfg.horizon);
        prop_assert_eq!(success_rate(&mut policy, &[scene.clone()], &cfg, &Vocab::default()).unwrap(), 1.0);
        let chunk = scripted_expert(scene.effector, scene.target_position(), cfg.horizon);
        for axis in 0..3 {
            let total: f32 = (0..cfg.horizon).map(|t| chunk.at(&[t, axis])).sum();
            let want = scene.target_position()[axis] - scene.effector[axis];
            prop_assert!((total - want).abs() < 1e-5);
        }
    }

    #[test]
    fn reflections_are_involutions(seed in 0u64..500, bits in 0u8..8) {
        let demo = generate_dataset(seed, 1, Split::Train, &EnvConfig::default()).unwrap().remove(0);
        let m = Mirror::from_bits(bits);
        let back = m.demonstration(&m.demonstration(&demo));
        prop_assert_eq!(back.observation.views, demo.observation.views);
        prop_assert_eq!(back.actions, demo.actions);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn dataset_bytes_round_trip(seed in any::<u64>(), size in 1usize..5) {
        let cfg = EnvConfig::default();
        let demos = generate_dataset(seed, size, Split::Val, &cfg).unwrap();
        let bytes = encode_dataset(&demos).unwrap();
        prop_assert_eq!(&decode_dataset(&bytes).unwrap(), &demos);
        let again = generate_dataset(seed, size, Split::Val, &cfg).unwrap();
        prop_assert_eq!(encode_dataset(&again).unwrap(), bytes);
    }

    #[test]
    fn config_text_round_trips(s1 in 1usize..500, s2 in 1usize..500, s3 in 1usize..500, seed in any::<u64>(), mirror in any::<bool>()) {
        let mut cfg = RunConfig::default();
        cfg.seed = seed;
        cfg.stages = StageConfig::progressive([s1 + 60, s2 + 60, s3 + 60]);
        cfg.data.mirror = mirror;
        let parsed = RunConfig::parse(&cfg.to_string()).unwrap();
        prop_assert_eq!(parsed.to_string(), cfg.to_string());
        parsed.validate().unwrap();
    }

    #[test]
    fn forward_pass_is_bitwise_repeatable(seed in 0u64..1000) {
        let (model, store) = EvoDepth::new(ModelConfig::default(), seed).unwrap();
        let demos = generate_dataset(seed, 2, Split::Train, &EnvConfig::default()).unwrap();
        let batch = Batch::from_demonstrations(&demos, model.patch_size()).unwrap();
        let loss = || {
            let mut f = Forward::new(&store, ModuleSet::all(), Some(ChaCha8Rng::seed_from_u64(seed)));
            let l = model.loss(&mut f, &batch, &mut ChaCha8Rng::seed_from_u64(seed ^ 9)).unwrap();
            f.tape.value(l).item().to_bits()
        };
        prop_assert_eq!(loss(), loss());
    }
}
