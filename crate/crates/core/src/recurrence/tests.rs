use super::*;
use rand::{Rng, SeedableRng};

fn small(cell: CellKind, kernel: usize) -> RecurrenceConfig {
    RecurrenceConfig {
        cell,
        kernel,
        grid: 2,
        hidden: 3,
        feature_dim: 5,
        input_map: InputMap::Unshared,
    }
}

fn build(cfg: &RecurrenceConfig, seed: u64) -> (Recurrence, ParamStore) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rec = Recurrence::new(cfg, &mut store, &mut rng).unwrap();
    (rec, store)
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

#[test]
fn step_shapes() {
    for cell in [CellKind::Lstm3d, CellKind::Gru3d] {
        for map in [InputMap::Unshared, InputMap::Shared] {
            let cfg = RecurrenceConfig {
                input_map: map,
                ..small(cell, 3)
            };
            let (rec, store) = build(&cfg, 1);
            let mut ctx = Ctx::new(&store);
            let x = ctx.tape.constant(random(&[2, 5], 2));
            let g0 = HiddenGrid::zeros(&mut ctx.tape, &cfg, 2);
            let (g, internals) = rec.step(&mut ctx, x, &g0, &GateForcing::NONE).unwrap();
            assert_eq!(ctx.tape.shape(g.h), &[2, 3, 2, 2, 2]);
            assert_eq!(g.s.is_some(), cell == CellKind::Lstm3d);
            assert_eq!(internals.gates.len(), 2);
        }
    }
}

#[test]
fn rejects_mismatched_inputs() {
    let cfg = small(CellKind::Gru3d, 1);
    let (rec, store) = build(&cfg, 1);
    let mut ctx = Ctx::new(&store);
    let g0 = HiddenGrid::zeros(&mut ctx.tape, &cfg, 1);
    let bad_x = ctx.tape.constant(Tensor::zeros([1, 4]));
    assert!(rec.step(&mut ctx, bad_x, &g0, &GateForcing::NONE).is_err());
    let x = ctx.tape.constant(Tensor::zeros([1, 5]));
    let other = RecurrenceConfig { grid: 3, ..cfg.clone() };
    let bad_g = HiddenGrid::zeros(&mut ctx.tape, &other, 1);
    assert!(rec.step(&mut ctx, x, &bad_g, &GateForcing::NONE).is_err());
    assert!(rec.lstm3d_step(&mut ctx, x, &g0, &GateForcing::NONE).is_err());
    assert!(rec.run_sequence(&mut ctx, &[]).is_err());
}

#[test]
fn even_kernel_rejected() {
    assert!(small(CellKind::Lstm3d, 2).validate().is_err());
}

#[test]
fn lstm_has_no_output_gate() {
    let cfg = small(CellKind::Lstm3d, 3);
    let (rec, store) = build(&cfg, 3);
    let mut ctx = Ctx::new(&store);
    let feats: Vec<Var> = (0..3).map(|t| ctx.tape.constant(random(&[1, 5], 10 + t))).collect();
    let run = rec.run_sequence(&mut ctx, &feats).unwrap();
    for step in &run.steps {
        let h = ctx.tape.value(step.grid.h);
        let s = ctx.tape.value(step.grid.s.unwrap());
        assert_eq!(h, &s.map(f64::tanh));
        assert!(h.data().iter().all(|v| v.abs() < 1.0));
    }
}

#[test]
fn forced_gates_retain_state_exactly() {
    let cfg = small(CellKind::Gru3d, 3);
    let (rec, store) = build(&cfg, 4);
    let mut ctx = Ctx::new(&store);
    let x = ctx.tape.constant(random(&[1, 5], 5));
    let h = ctx.tape.constant(random(&[1, 3, 2, 2, 2], 6));
    let prev = HiddenGrid { h, s: None };
    let forcing = GateForcing {
        update: Some(0.0),
        ..GateForcing::NONE
    };
    let (next, _) = rec.gru3d_step(&mut ctx, x, &prev, &forcing).unwrap();
    assert_eq!(ctx.tape.value(next.h), ctx.tape.value(h));

    let cfg = small(CellKind::Lstm3d, 3);
    let (rec, store) = build(&cfg, 4);
    let mut ctx = Ctx::new(&store);
    let x = ctx.tape.constant(random(&[1, 5], 5));
    let h = ctx.tape.constant(random(&[1, 3, 2, 2, 2], 6));
    let s = ctx.tape.constant(random(&[1, 3, 2, 2, 2], 7));
    let prev = HiddenGrid { h, s: Some(s) };
    let forcing = GateForcing {
        forget: Some(1.0),
        input: Some(0.0),
        ..GateForcing::NONE
    };
    let (next, _) = rec.lstm3d_step(&mut ctx, x, &prev, &forcing).unwrap();
    assert_eq!(ctx.tape.value(next.s.unwrap()), ctx.tape.value(s));
    assert_eq!(ctx.tape.value(next.h), &ctx.tape.value(s).map(f64::tanh));
}

#[test]
fn zero_parameters_keep_zero_state() {
    for cell in [CellKind::Lstm3d, CellKind::Gru3d] {
        let cfg = small(cell, 3);
        let (rec, mut store) = build(&cfg, 8);
        for (id, p) in store.clone().iter() {
            store.set(id, Tensor::zeros(p.value.shape().to_vec())).unwrap();
        }
        let mut ctx = Ctx::new(&store);
        let feats: Vec<Var> = (0..4).map(|t| ctx.tape.constant(random(&[1, 5], t))).collect();
        let run = rec.run_sequence(&mut ctx, &feats).unwrap();
        assert!(ctx.tape.value(run.final_grid().h).data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn single_view_sequence_is_one_step() {
    let cfg = small(CellKind::Gru3d, 3);
    let (rec, store) = build(&cfg, 9);
    let feat = random(&[1, 5], 10);
    let mut ctx = Ctx::new(&store);
    let x = ctx.tape.constant(feat.clone());
    let run = rec.run_sequence(&mut ctx, &[x]).unwrap();
    let a = ctx.tape.value(run.final_grid().h).clone();
    let mut ctx = Ctx::new(&store);
    let x = ctx.tape.constant(feat);
    let g0 = HiddenGrid::zeros(&mut ctx.tape, &cfg, 1);
    let (g, _) = rec.step(&mut ctx, x, &g0, &GateForcing::NONE).unwrap();
    assert_eq!(&a, ctx.tape.value(g.h));
}

#[test]
fn gate_extraction() {
    let cfg = RecurrenceConfig {
        grid: 4,
        ..small(CellKind::Lstm3d, 3)
    };
    let (rec, store) = build(&cfg, 11);
    let mut ctx = Ctx::new(&store);
    let x = ctx.tape.constant(random(&[2, 5], 12));
    let run = rec.run_sequence(&mut ctx, &[x, x]).unwrap();
    let gate = run.steps[1].internals.input_like().unwrap();
    let g = extract_gate_activations(&ctx.tape, gate, 2, 1).unwrap();
    assert_eq!(g.shape(), &[4, 4, 4]);
    assert!(g.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    let full = ctx.tape.value(gate);
    assert_eq!(g.at(&[1, 2, 3]), full.at(&[1, 2, 1, 2, 3]));
    assert!(extract_gate_activations(&ctx.tape, gate, 3, 0).is_err());
    assert!(extract_gate_activations(&ctx.tape, gate, 0, 2).is_err());
}
