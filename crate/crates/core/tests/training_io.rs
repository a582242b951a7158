use proptest::prelude::*;
use proptest::test_runner::{Config, RngSeed};
use r2n2::checkpoint;
use r2n2::config::{RunConfig, PRESETS};
use r2n2::encoder::{Encoder, EncoderConfig, Variant};
use r2n2::network::Network;
use r2n2::objective::{cross_entropy_var, VoxelGrid};
use r2n2::params::{Ctx, ParamStore};
use r2n2::recurrence::CellKind;
use r2n2::selfcheck::tiny_network;
use r2n2::tensor::Tensor;
use r2n2::training::{adam_step, evaluate, AdamConfig, AdamState, BatchSampler, LoadedSample, TrainConfig, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn samples(n: usize, seed: u64) -> Vec<LoadedSample> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| LoadedSample {
            id: format!("cuboid-{i:04}"),
            views: (0..3).map(|_| Tensor::from_fn([1, 8, 8], |_| r.gen())).collect(),
            viewpoints: (0..3).map(|_| r2n2::synth::Viewpoint::random(&mut r)).collect(),
            target: VoxelGrid::from_fn(4, |_, _, _| r.gen_bool(0.3) as u8 as f64),
        })
        .collect()
}

fn train_cfg(iterations: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 2,
        iterations,
        view_range: (1, 3),
        eval_every: 0,
        eval_views: 3,
        log_every: 1,
        adam: AdamConfig {
            learning_rate: 1e-2,
            ..AdamConfig::default()
        },
        ..TrainConfig::default()
    }
}

fn params(store: &ParamStore) -> Vec<Tensor> {
    store.iter().map(|(_, p)| (*p.value).clone()).collect()
}

#[test]
fn adam_hand_computed_steps() {
    let mut s = ParamStore::new();
    let id = s.add("theta", Tensor::scalar(0.0));
    let mut st = AdamState::new(&s);
    let cfg = AdamConfig {
        learning_rate: 0.1,
        ..AdamConfig::default()
    };
    adam_step(&mut s, &[Tensor::scalar(1.0)], &mut st, &cfg).unwrap();
    // m̂ = v̂ = 1, so the step is lr / (1 + ε).
    assert!((s.get(id).data()[0] + 0.1).abs() < 1e-6);

    // Constant gradient: bias-corrected moments stay at 1, so two steps equal one doubled step.
    let mut twice = s.clone();
    let mut st2 = st.clone();
    adam_step(&mut twice, &[Tensor::scalar(1.0)], &mut st2, &cfg).unwrap();
    let mut once = ParamStore::new();
    let oid = once.add("theta", Tensor::scalar(0.0));
    let mut st3 = AdamState::new(&once);
    adam_step(
        &mut once,
        &[Tensor::scalar(1.0)],
        &mut st3,
        &AdamConfig {
            learning_rate: 0.2,
            ..cfg
        },
    )
    .unwrap();
    assert!((twice.get(id).data()[0] - once.get(oid).data()[0]).abs() < 1e-6);
    assert_eq!(st2.step, 2);

    // A sign flip on the second step, against the longhand update.
    let mut flip = s.clone();
    let mut st4 = st.clone();
    adam_step(&mut flip, &[Tensor::scalar(-3.0)], &mut st4, &cfg).unwrap();
    let (b1, b2) = (0.9f64, 0.999f64);
    let m = (b1 * (1.0 - b1) * 1.0 + (1.0 - b1) * -3.0) / (1.0 - b1 * b1);
    let v = (b2 * (1.0 - b2) * 1.0 + (1.0 - b2) * 9.0) / (1.0 - b2 * b2);
    let want = -0.1 - 0.1 * m / (v.sqrt() + 1e-8);
    assert!(
        (flip.get(id).data()[0] - want).abs() < 1e-6,
        "{} vs {want}",
        flip.get(id).data()[0]
    );
    assert!((flip.get(id).data()[0] - twice.get(id).data()[0]).abs() > 1e-2);
}

#[test]
fn large_epsilon_approaches_scaled_momentum() {
    let mut s = ParamStore::new();
    let id = s.add("theta", Tensor::new([3], vec![0.5, -0.25, 1.0]).unwrap());
    let mut st = AdamState::new(&s);
    let cfg = AdamConfig {
        learning_rate: 1.0,
        epsilon: 1e3,
        ..AdamConfig::default()
    };
    let g = Tensor::new([3], vec![2.0, -1.0, 0.5]).unwrap();
    let before = s.get(id).clone();
    adam_step(&mut s, std::slice::from_ref(&g), &mut st, &cfg).unwrap();
    for e in 0..3 {
        let delta = s.get(id).data()[e] - before.data()[e];
        let momentum = -g.data()[e] / 1e3;
        assert!(
            (delta - momentum).abs() < 1e-2 * momentum.abs() + 1e-6,
            "{delta} vs {momentum}"
        );
    }
}

#[test]
fn batch_lengths_are_uniform() {
    let mut b = BatchSampler::new(&[5; 10], 4, (1, 5), ChaCha8Rng::seed_from_u64(3)).unwrap();
    let mut counts = [0usize; 5];
    for _ in 0..1000 {
        let batch = b.next_batch();
        assert_eq!(batch.items.len(), 4);
        counts[batch.views - 1] += 1;
    }
    for c in counts {
        assert!((c as f64 / 1000.0 - 0.2).abs() <= 0.05, "{counts:?}");
    }
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let data = samples(4, 1);
    let mut cfg = train_cfg(5);
    cfg.adam.learning_rate = 0.0;
    let mut t = Trainer::new(&tiny_network(Variant::Shallow, CellKind::Gru3d, 3), &cfg, &data).unwrap();
    let before = params(&t.store);
    t.run(&[], |_, _| Ok(())).unwrap();
    assert_eq!(params(&t.store), before);
}

#[test]
fn resumed_training_is_bit_identical() {
    let data = samples(4, 2);
    let net = tiny_network(Variant::Residual, CellKind::Lstm3d, 3);
    let mut full = Trainer::new(&net, &train_cfg(6), &data).unwrap();
    full.run(&[], |_, _| Ok(())).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("half.ckpt");
    let rc = RunConfig {
        network: net.clone(),
        train: train_cfg(3),
        ..RunConfig::default()
    };
    let mut half = Trainer::new(&net, &rc.train, &data).unwrap();
    half.run(&[], |_, _| Ok(())).unwrap();
    checkpoint::save(&path, &rc, &half.store, &half.adam).unwrap();
    let ck = checkpoint::load(&path).unwrap();
    assert_eq!(ck.config, rc);
    assert_eq!(params(&ck.store), params(&half.store));
    assert_eq!(ck.adam, half.adam);
    let mut rest = Trainer::resume(ck.net, ck.store, ck.adam, &train_cfg(6), &data).unwrap();
    rest.run(&[], |_, _| Ok(())).unwrap();
    assert_eq!(params(&rest.store), params(&full.store));
    assert_eq!(rest.adam, full.adam);
}

#[test]
fn checkpoint_roundtrip_preserves_evaluation() {
    let data = samples(3, 4);
    let net = tiny_network(Variant::Shallow, CellKind::Lstm3d, 1);
    let mut t = Trainer::new(&net, &train_cfg(2), &data).unwrap();
    t.run(&[], |_, _| Ok(())).unwrap();
    let before = evaluate(&t.net, &t.store, &data, &[1, 2, 3], 0.4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let rc = RunConfig {
        network: net,
        ..RunConfig::default()
    };
    checkpoint::save(&path, &rc, &t.store, &t.adam).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let ck = checkpoint::load(&path).unwrap();
    assert_eq!(evaluate(&ck.net, &ck.store, &data, &[1, 2, 3], 0.4).unwrap(), before);
    checkpoint::save(&path, &rc, &ck.store, &ck.adam).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);

    std::fs::write(checkpoint::sidecar(&path), "seed = 2\n").unwrap();
    assert!(checkpoint::load(&path).is_err());
}

#[test]
fn gradient_reaches_the_first_view() {
    let net_cfg = tiny_network(Variant::Shallow, CellKind::Gru3d, 3);
    for seed in 0..3 {
        let mut store = ParamStore::new();
        let net = Network::new(&net_cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let data = samples(1, seed);
        let mut ctx = Ctx::new(&store);
        let views: Vec<_> = data[0]
            .views
            .iter()
            .map(|v| ctx.tape.variable(v.clone().reshape([1, 1, 8, 8]).unwrap()))
            .collect();
        let fwd = net.forward(&mut ctx, &views).unwrap();
        let target = data[0].target.to_tensor().reshape([1, 4, 4, 4]).unwrap();
        let loss = cross_entropy_var(&mut ctx.tape, fwd.probs, &target).unwrap();
        let g = ctx.tape.backward(loss).unwrap();
        let first = g.get(views[0]).unwrap();
        assert!(first.data().iter().any(|&v| v != 0.0));
    }
}

#[test]
fn encoder_variants_agree_in_shape_and_train_every_parameter() {
    let cfg = |variant| EncoderConfig {
        variant,
        input_size: 16,
        in_channels: 1,
        channels: vec![3, 4, 4, 2],
        feature_dim: 6,
    };
    let mut shapes = Vec::new();
    for variant in [Variant::Shallow, Variant::Residual] {
        let mut store = ParamStore::new();
        let enc = Encoder::new(&cfg(variant), &mut store, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let mut hits = vec![0usize; store.len()];
        for _ in 0..4 {
            let mut ctx = Ctx::new(&store);
            let x = ctx
                .tape
                .constant(Tensor::from_fn([2, 1, 16, 16], |_| r.gen_range(-1.0..1.0)));
            let y = enc.encode(&mut ctx, x).unwrap();
            shapes.push(ctx.tape.shape(y).to_vec());
            let w = ctx.tape.constant(Tensor::from_fn([2, 6], |_| r.gen_range(-1.0..1.0)));
            let p = ctx.tape.mul(y, w).unwrap();
            let s = ctx.tape.sum(p).unwrap();
            for (n, g) in ctx.param_grads(s).unwrap().iter().enumerate() {
                hits[n] += g.data().iter().any(|&v| v != 0.0) as usize;
            }
        }
        for (n, (_, p)) in store.iter().enumerate() {
            assert!(hits[n] > 0, "{variant:?}: `{}` never receives gradient", p.name);
        }
    }
    assert!(shapes.iter().all(|s| s == &[2, 6]));
}

fn fnv(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf29ce484222325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x100000001b3)
    })
}

#[test]
fn default_digest_is_pinned() {
    let cfg = RunConfig::default();
    assert_eq!(fnv(cfg.canonical().as_bytes()), cfg.digest());
    assert_eq!(RunConfig::parse(&cfg.canonical()).unwrap().digest(), cfg.digest());
    assert_eq!(format!("{:016x}", cfg.digest()), "333bcd23656f7c87");
}

#[test]
fn mismatched_unpool_is_rejected() {
    let err = RunConfig::parse("decoder.n_vox = 32\n")
        .unwrap()
        .validate()
        .unwrap_err()
        .to_string();
    assert!(
        err.contains("unpooled 2 times gives 16³ but decoder.n_vox is 32"),
        "{err}"
    );
}

proptest! {
    #![proptest_config(Config { cases: 64, rng_seed: RngSeed::Fixed(2), failure_persistence: None, ..Config::default() })]

    #[test]
    fn config_text_is_a_fixed_point(
        preset in prop::sample::select(PRESETS.iter().map(|p| p.0).collect::<Vec<_>>()),
        seed in any::<u32>(),
        lr in 1e-5..1e-1f64,
        hidden in 1usize..64,
        views in prop::collection::vec(1usize..9, 1..4),
    ) {
        let text = format!(
            "preset = {preset}\nseed = {seed}\ntrain.learning_rate = {lr}\nrecurrence.hidden = {hidden}\neval.views = {}\n",
            views.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
        );
        let a = RunConfig::parse(&text).unwrap();
        let b = RunConfig::parse(&a.canonical()).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.canonical(), b.canonical());
        prop_assert_eq!(a.digest(), b.digest());
        prop_assert_eq!(a.train.seed, seed as u64);
        prop_assert_eq!(a.synth.seed, seed as u64);
    }
}
