use proptest::prelude::*;
use proptest::test_runner::{Config, RngSeed};
use r2n2::decoder::voxel_softmax;
use r2n2::image::{decode_pgm, encode_pgm, Image};
use r2n2::objective::{
    cross_entropy_loss, cross_entropy_var, gate_mosaic, iou, mean_cross_entropy, un_mosaic, VoxelGrid,
};
use r2n2::tensor::{Tape, Tensor};
use r2n2::voxl::{decode_voxl, encode_voxl};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config(cases: u32, seed: u64) -> Config {
    Config {
        cases,
        rng_seed: RngSeed::Fixed(seed),
        failure_persistence: None,
        ..Config::default()
    }
}

fn brute_iou(p: &[f64], y: &[f64], t: f64) -> f64 {
    let mut inter = 0u32;
    let mut union = 0u32;
    for i in 0..p.len() {
        let a = p[i] > t;
        let b = y[i] == 1.0;
        if a && b {
            inter += 1;
        }
        if a || b {
            union += 1;
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

#[test]
fn iou_matches_enumeration_on_random_grids() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for trial in 0..1000 {
        let p: Vec<f64> = (0..64).map(|_| rng.gen::<f64>()).collect();
        let y: Vec<f64> = (0..64).map(|_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 }).collect();
        let mut p = p;
        if trial % 10 == 0 {
            p[0] = 0.4;
            p[1] = 0.1;
        }
        let pg = VoxelGrid::new(4, p.clone()).unwrap();
        let yg = VoxelGrid::new(4, y.clone()).unwrap();
        for t in [0.1, 0.4] {
            assert_eq!(iou(&pg, &yg, t).unwrap(), brute_iou(&p, &y, t), "trial {trial}, t {t}");
        }
    }
}

#[test]
fn cross_entropy_reference_values() {
    let p = VoxelGrid::new(2, vec![0.5; 8]).unwrap();
    let y = VoxelGrid::new(2, vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
    assert!((mean_cross_entropy(&p, &y).unwrap() - std::f64::consts::LN_2).abs() < 1e-9);
    let p = VoxelGrid::new(1, vec![0.8]).unwrap();
    let y = VoxelGrid::new(1, vec![1.0]).unwrap();
    let l = cross_entropy_loss(&p, &y).unwrap();
    assert!((l - -(0.8f64).ln()).abs() < 1e-9);
    assert!((l - 0.22314).abs() < 1e-5);
}

fn grid(extent: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    let n = extent * extent * extent;
    (
        prop::collection::vec(0.0..1.0f64, n),
        prop::collection::vec(any::<bool>(), n),
    )
        .prop_map(|(p, y)| (p, y.into_iter().map(|b| b as u8 as f64).collect()))
}

proptest! {
    #![proptest_config(config(200, 3))]

    #[test]
    fn loss_is_nonnegative_and_vanishes_on_a_match((p, y) in grid(3)) {
        let pg = VoxelGrid::new(3, p).unwrap();
        let yg = VoxelGrid::new(3, y.clone()).unwrap();
        prop_assert!(cross_entropy_loss(&pg, &yg).unwrap() >= 0.0);
        let exact = VoxelGrid::new(3, y).unwrap();
        prop_assert!(cross_entropy_loss(&exact, &yg).unwrap() < 1e-9);
    }

    #[test]
    fn iou_is_symmetric_for_boolean_grids((a, b) in grid(3).prop_map(|(p, y)| (p.iter().map(|&v| (v > 0.5) as u8 as f64).collect::<Vec<_>>(), y))) {
        let ag = VoxelGrid::new(3, a).unwrap();
        let bg = VoxelGrid::new(3, b).unwrap();
        prop_assert_eq!(iou(&ag, &bg, 0.5).unwrap(), iou(&bg, &ag, 0.5).unwrap());
    }

    #[test]
    fn adding_a_correct_voxel_never_lowers_iou((p, y) in grid(3), pick in 0usize..27) {
        let before = iou(&VoxelGrid::new(3, p.clone()).unwrap(), &VoxelGrid::new(3, y.clone()).unwrap(), 0.4).unwrap();
        let mut p2 = p;
        if y[pick] == 1.0 {
            p2[pick] = 0.9;
        }
        let after = iou(&VoxelGrid::new(3, p2).unwrap(), &VoxelGrid::new(3, y).unwrap(), 0.4).unwrap();
        prop_assert!(after >= before);
    }

    #[test]
    fn loss_gradient_wrt_logits_is_p_minus_y(logits in prop::collection::vec(-3.0..3.0f64, 16), y in prop::collection::vec(any::<bool>(), 8)) {
        let target = Tensor::new([1, 2, 2, 2], y.iter().map(|&b| b as u8 as f64).collect()).unwrap();
        let l = Tensor::new([1, 2, 2, 2, 2], logits).unwrap();
        let mut t = Tape::new();
        let lv = t.variable(l.clone());
        let p = t.softmax_channel(lv, 1).unwrap();
        let loss = cross_entropy_var(&mut t, p, &target).unwrap();
        let g = t.backward(loss).unwrap();
        let gl = g.get(lv).unwrap();
        let probs = voxel_softmax(&l).unwrap();
        for v in 0..8 {
            let want = (probs.data()[v] - target.data()[v]) / 8.0;
            prop_assert!((gl.data()[8 + v] - want).abs() < 1e-12);
            prop_assert!((gl.data()[v] + want).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_normalizes_and_equals_sigmoid_of_difference(logits in prop::collection::vec(-20.0..20.0f64, 16)) {
        let l = Tensor::new([1, 2, 2, 2, 2], logits.clone()).unwrap();
        let mut t = Tape::new();
        let lv = t.constant(l.clone());
        let occ = t.softmax_channel(lv, 1).unwrap();
        let free = t.softmax_channel(lv, 0).unwrap();
        for v in 0..8 {
            let (po, pf) = (t.value(occ).data()[v], t.value(free).data()[v]);
            prop_assert!((po + pf - 1.0).abs() < 1e-12);
            let sig = 1.0 / (1.0 + (-(logits[8 + v] - logits[v])).exp());
            prop_assert!((po - sig).abs() < 1e-12);
        }
    }

    #[test]
    fn mosaic_roundtrip_is_exact(n in 1usize..6, seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let g = Tensor::from_fn([n, n, n], |_| r.gen());
        let m = gate_mosaic(&g).unwrap();
        prop_assert_eq!(m.shape(), &[n * n, n]);
        prop_assert_eq!(m.data()[0], g.data()[0]);
        prop_assert_eq!(un_mosaic(&m).unwrap(), g);
    }

    #[test]
    fn voxel_files_roundtrip_bit_exactly((p, y) in grid(4)) {
        for values in [p, y] {
            let g = VoxelGrid::new(4, values).unwrap();
            prop_assert_eq!(decode_voxl(&encode_voxl(&g)).unwrap(), g);
        }
    }

    #[test]
    fn pgm_roundtrip_is_exact_on_8bit_levels(w in 1usize..9, h in 1usize..9, seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let img = Image::new(w, h, (0..w * h).map(|_| r.gen_range(0..=255u8) as f64 / 255.0).collect()).unwrap();
        prop_assert_eq!(decode_pgm(&encode_pgm(&img)).unwrap(), img);
    }
}
