//! Release gate: gradient checks of every tape op and of whole tiny
//! networks, cell equivalences, gate-limit invariants and recurrence
//! locality.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::decoder::DecoderConfig;
use crate::encoder::{EncoderConfig, Variant};
use crate::error::Result;
use crate::network::{Network, NetworkConfig};
use crate::objective::cross_entropy_var;
use crate::params::{gradcheck_params, Ctx, ParamStore};
use crate::recurrence::{CellKind, FlatGru, FlatLstm, GateForcing, HiddenGrid, InputMap, Recurrence, RecurrenceConfig};
use crate::tensor::{gradcheck, OpKind, ReduceOp, Tape, Tensor, Var};

pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_STEP: f64 = 1e-5;
pub const ORACLE_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Check {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }

    fn from_result(name: impl Into<String>, r: Result<(bool, String)>) -> Self {
        match r {
            Ok((p, d)) => Check::new(name, p, d),
            Err(e) => Check::new(name, false, format!("error: {e}")),
        }
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut r = rng(seed);
    Tensor::from_fn(shape.to_vec(), |_| r.gen_range(lo..hi))
}

/// Values bounded away from zero, for the leaky-ReLU kink.
fn off_zero(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng(seed);
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = r.gen_range(0.1..1.0);
        if r.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Distinct values spaced well beyond the difference step, for max-pool ties.
fn spread(shape: &[usize], seed: u64) -> Tensor {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.05 - n as f64 * 0.025).collect();
    let mut r = rng(seed);
    for i in (1..n).rev() {
        v.swap(i, r.gen_range(0..=i));
    }
    Tensor::new(shape.to_vec(), v).expect("shape matches")
}

type OpFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

fn op_cases() -> Vec<(&'static str, Vec<Tensor>, OpFn)> {
    let u = |s: &[usize], seed| uniform(s, -1.0, 1.0, seed);
    vec![
        (
            "add",
            vec![u(&[3, 4], 1), u(&[3, 4], 2)],
            Box::new(|t, v| t.add(v[0], v[1])),
        ),
        (
            "add/broadcast",
            vec![u(&[2, 3, 4], 3), u(&[4], 4)],
            Box::new(|t, v| t.add(v[0], v[1])),
        ),
        (
            "sub",
            vec![u(&[3, 4], 5), u(&[4], 6)],
            Box::new(|t, v| t.sub(v[0], v[1])),
        ),
        (
            "mul",
            vec![u(&[3, 4], 7), u(&[3, 4], 8)],
            Box::new(|t, v| t.mul(v[0], v[1])),
        ),
        (
            "mul/broadcast",
            vec![u(&[2, 5], 9), u(&[5], 10)],
            Box::new(|t, v| t.mul(v[0], v[1])),
        ),
        (
            "sigmoid",
            vec![uniform(&[7], -3.0, 3.0, 11)],
            Box::new(|t, v| t.sigmoid(v[0])),
        ),
        (
            "tanh",
            vec![uniform(&[7], -2.0, 2.0, 12)],
            Box::new(|t, v| t.tanh(v[0])),
        ),
        (
            "leaky_relu",
            vec![off_zero(&[9], 13)],
            Box::new(|t, v| t.leaky_relu(v[0], 0.1)),
        ),
        ("log", vec![uniform(&[6], 0.2, 3.0, 14)], Box::new(|t, v| t.log(v[0]))),
        ("exp", vec![u(&[6], 15)], Box::new(|t, v| t.exp(v[0]))),
        ("scale", vec![u(&[6], 16)], Box::new(|t, v| t.scale(v[0], -1.7))),
        ("one_minus", vec![u(&[6], 17)], Box::new(|t, v| t.one_minus(v[0]))),
        (
            "matmul",
            vec![u(&[3, 4], 18), u(&[4, 5], 19)],
            Box::new(|t, v| t.matmul(v[0], v[1])),
        ),
        (
            "linear",
            vec![u(&[3, 4], 20), u(&[5, 4], 21), u(&[5], 22)],
            Box::new(|t, v| t.linear(v[0], v[1], Some(v[2]))),
        ),
        ("sum", vec![u(&[3, 4], 23)], Box::new(|t, v| t.sum(v[0]))),
        ("mean", vec![u(&[3, 4], 24)], Box::new(|t, v| t.mean(v[0]))),
        (
            "reduce/axes",
            vec![u(&[2, 3, 4], 25)],
            Box::new(|t, v| {
                let a = t.reduce(ReduceOp::Sum, v[0], &[1])?;
                t.reduce(ReduceOp::Mean, a, &[0])
            }),
        ),
        (
            "reshape",
            vec![u(&[2, 6], 26)],
            Box::new(|t, v| {
                let r = t.reshape(v[0], &[3, 4])?;
                let w = t.constant(uniform(&[4], -1.0, 1.0, 99));
                t.mul(r, w)
            }),
        ),
        (
            "expand",
            vec![u(&[2, 3], 27)],
            Box::new(|t, v| t.expand_trailing(v[0], &[2, 2])),
        ),
        (
            "conv2d",
            vec![u(&[2, 2, 5, 5], 28), u(&[3, 2, 3, 3], 29), u(&[3], 30)],
            Box::new(|t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 1)),
        ),
        (
            "conv2d/stride2",
            vec![u(&[1, 2, 6, 6], 31), u(&[2, 2, 3, 3], 32)],
            Box::new(|t, v| t.conv2d(v[0], v[1], None, 2, 1)),
        ),
        (
            "conv3d",
            vec![u(&[2, 2, 3, 3, 3], 33), u(&[2, 2, 3, 3, 3], 34), u(&[2], 35)],
            Box::new(|t, v| t.conv3d(v[0], v[1], Some(v[2]))),
        ),
        (
            "conv3d/k1",
            vec![u(&[1, 3, 2, 2, 2], 36), u(&[2, 3, 1, 1, 1], 37)],
            Box::new(|t, v| t.conv3d(v[0], v[1], None)),
        ),
        (
            "maxpool2d",
            vec![spread(&[2, 2, 4, 4], 38)],
            Box::new(|t, v| t.maxpool2d(v[0], 2)),
        ),
        (
            "unpool3d",
            vec![u(&[1, 2, 2, 2, 2], 39)],
            Box::new(|t, v| t.unpool3d(v[0], 2)),
        ),
        (
            "softmax",
            vec![uniform(&[2, 2, 2, 2, 2], -2.0, 2.0, 40)],
            Box::new(|t, v| t.softmax_channel(v[0], 1)),
        ),
    ]
}

/// Central-difference check of every differentiable tape op.
pub fn op_gradchecks(fault: Option<OpKind>) -> Vec<Check> {
    op_cases()
        .into_iter()
        .map(|(name, inputs, f)| {
            let r = gradcheck(&inputs, GRAD_STEP, fault, f).map(|rep| {
                (
                    rep.passes(GRAD_TOL),
                    format!("max relative error {:.3e}", rep.max_rel_error),
                )
            });
            Check::from_result(format!("gradcheck/{name}"), r)
        })
        .collect()
}

/// The tiny end-to-end configuration: 8×8 input, N=2, 4³ output.
pub fn tiny_network(variant: Variant, cell: CellKind, kernel: usize) -> NetworkConfig {
    NetworkConfig {
        encoder: EncoderConfig {
            variant,
            input_size: 8,
            in_channels: 1,
            channels: vec![2, 2],
            feature_dim: 4,
        },
        recurrence: RecurrenceConfig {
            cell,
            kernel,
            grid: 2,
            hidden: 2,
            feature_dim: 4,
            input_map: InputMap::Unshared,
        },
        decoder: DecoderConfig {
            variant,
            in_channels: 2,
            grid: 2,
            channels: vec![2],
            unpool_stages: 1,
            n_vox: 4,
        },
    }
}

/// Gradient of the end-of-sequence loss w.r.t. every parameter and every
/// input image of a tiny network.
pub fn network_gradcheck(cfg: &NetworkConfig, views: usize, seed: u64, fault: Option<OpKind>) -> Result<f64> {
    let mut store = ParamStore::new();
    let net = Network::new(cfg, &mut store, &mut rng(seed))?;
    let batch = 2;
    let s = cfg.encoder.input_size;
    let inputs: Vec<Tensor> = (0..views)
        .map(|t| uniform(&[batch, cfg.encoder.in_channels, s, s], 0.0, 1.0, seed + 100 + t as u64))
        .collect();
    let d = cfg.n_vox();
    let mut r = rng(seed + 7);
    let target = Tensor::from_fn([batch, d, d, d], |_| if r.gen_bool(0.4) { 1.0 } else { 0.0 });
    let report = gradcheck_params(&store, &inputs, GRAD_STEP, fault, |ctx: &mut Ctx<'_>, xs: &[Var]| {
        let fwd = net.forward(ctx, xs)?;
        cross_entropy_var(&mut ctx.tape, fwd.probs, &target)
    })?;
    Ok(report.max_rel_error)
}

pub fn network_gradchecks(fault: Option<OpKind>) -> Vec<Check> {
    let mut out = Vec::new();
    for variant in [Variant::Shallow, Variant::Residual] {
        for cell in [CellKind::Lstm3d, CellKind::Gru3d] {
            for kernel in [1, 3] {
                let cfg = tiny_network(variant, cell, kernel);
                let name = format!("gradcheck/network/{}-{}-k{kernel}", variant.name(), cell.name());
                let r = network_gradcheck(&cfg, 2, 11, fault)
                    .map(|e| (e < GRAD_TOL, format!("max relative error {e:.3e}")));
                out.push(Check::from_result(name, r));
            }
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `W x + U h + b` for one row of a flat gate, straight from the store.
fn affine(
    store: &ParamStore,
    w: crate::params::ParamId,
    u: crate::params::ParamId,
    b: crate::params::ParamId,
    x: &[f64],
    h: &[f64],
    row: usize,
) -> f64 {
    let (w, u, b) = (store.get(w).data(), store.get(u).data(), store.get(b).data());
    let mut z = b[row];
    for (c, xv) in x.iter().enumerate() {
        z += w[row * x.len() + c] * xv;
    }
    for (c, hv) in h.iter().enumerate() {
        z += u[row * h.len() + c] * hv;
    }
    z
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Flat cells on the tape against scalar loops of the same equations.
pub fn flat_oracles() -> Vec<Check> {
    let (input, hidden) = (3, 4);
    let x = uniform(&[1, input], -1.0, 1.0, 1);
    let h0 = uniform(&[1, hidden], -1.0, 1.0, 2);
    let s0 = uniform(&[1, hidden], -1.0, 1.0, 3);

    let lstm = (|| -> Result<(bool, String)> {
        let mut store = ParamStore::new();
        let cell = FlatLstm::new(&mut store, &mut rng(4), "lstm", input, hidden);
        let mut ctx = Ctx::new(&store);
        let (xv, hv, sv) = (
            ctx.tape.constant(x.clone()),
            ctx.tape.constant(h0.clone()),
            ctx.tape.constant(s0.clone()),
        );
        let (h, s) = cell.step(&mut ctx, xv, hv, sv, &GateForcing::NONE)?;
        let (mut want_h, mut want_s) = (vec![0.0; hidden], vec![0.0; hidden]);
        for r in 0..hidden {
            let g = |w: &crate::recurrence::GateWeights| affine(&store, w.w, w.u, w.b, x.data(), h0.data(), r);
            let (i, f, o) = (sigmoid(g(&cell.i)), sigmoid(g(&cell.f)), sigmoid(g(&cell.o)));
            want_s[r] = f * s0.data()[r] + i * g(&cell.s).tanh();
            want_h[r] = o * want_s[r].tanh();
        }
        let e = max_diff(ctx.tape.value(h).data(), &want_h).max(max_diff(ctx.tape.value(s).data(), &want_s));
        Ok((e <= ORACLE_TOL, format!("max abs difference {e:.3e}")))
    })();

    let gru = (|| -> Result<(bool, String)> {
        let mut store = ParamStore::new();
        let cell = FlatGru::new(&mut store, &mut rng(5), "gru", input, hidden);
        let mut ctx = Ctx::new(&store);
        let (xv, hv) = (ctx.tape.constant(x.clone()), ctx.tape.constant(h0.clone()));
        let h = cell.step(&mut ctx, xv, hv, &GateForcing::NONE)?;
        let rh: Vec<f64> = (0..hidden)
            .map(|r| sigmoid(affine(&store, cell.r.w, cell.r.u, cell.r.b, x.data(), h0.data(), r)) * h0.data()[r])
            .collect();
        let want: Vec<f64> = (0..hidden)
            .map(|r| {
                let u = sigmoid(affine(&store, cell.u.w, cell.u.u, cell.u.b, x.data(), h0.data(), r));
                let c = affine(&store, cell.h.w, cell.h.u, cell.h.b, x.data(), &rh, r).tanh();
                (1.0 - u) * h0.data()[r] + u * c
            })
            .collect();
        let e = max_diff(ctx.tape.value(h).data(), &want);
        Ok((e <= ORACLE_TOL, format!("max abs difference {e:.3e}")))
    })();
    vec![
        Check::from_result("oracle/lstm-flat", lstm),
        Check::from_result("oracle/gru-flat", gru),
    ]
}

fn grid_config(cell: CellKind, kernel: usize, grid: usize, hidden: usize, feature: usize) -> RecurrenceConfig {
    RecurrenceConfig {
        cell,
        kernel,
        grid,
        hidden,
        feature_dim: feature,
        input_map: InputMap::Unshared,
    }
}

/// A 1-cell grid with a 1×1×1 kernel against the flat cell carrying the
/// same weights (the LSTM with its output gate held at one).
pub fn grid_reduces_to_flat() -> Vec<Check> {
    let (feature, hidden) = (3, 4);
    let x = uniform(&[2, feature], -1.0, 1.0, 21);
    let h0 = uniform(&[2, hidden], -1.0, 1.0, 22);
    let s0 = uniform(&[2, hidden], -1.0, 1.0, 23);
    let mut out = Vec::new();
    for cell in [CellKind::Lstm3d, CellKind::Gru3d] {
        let r = (|| -> Result<(bool, String)> {
            let cfg = grid_config(cell, 1, 1, hidden, feature);
            let mut store = ParamStore::new();
            let rec = Recurrence::new(&cfg, &mut store, &mut rng(24))?;
            let mut flat_store = ParamStore::new();
            let copy = |fs: &mut ParamStore, dst: &crate::recurrence::GateWeights, g: usize| -> Result<()> {
                let (w, u, b) = rec.gate_params(g);
                fs.set(dst.w, store.get(w).clone())?;
                fs.set(dst.u, store.get(u).clone().reshape([hidden, hidden])?)?;
                fs.set(dst.b, store.get(b).clone())
            };
            let grid5 = |t: &Tensor| t.clone().reshape([2, hidden, 1, 1, 1]);
            let mut ctx = Ctx::new(&store);
            let xv = ctx.tape.constant(x.clone());
            let hv = ctx.tape.constant(grid5(&h0)?);
            let (got_h, got_s): (Tensor, Option<Tensor>);
            let (want_h, want_s): (Tensor, Option<Tensor>);
            match cell {
                CellKind::Lstm3d => {
                    let flat = FlatLstm::new(&mut flat_store, &mut rng(25), "flat", feature, hidden);
                    copy(&mut flat_store, &flat.f, 0)?;
                    copy(&mut flat_store, &flat.i, 1)?;
                    copy(&mut flat_store, &flat.s, 2)?;
                    let sv = ctx.tape.constant(grid5(&s0)?);
                    let (g, _) =
                        rec.lstm3d_step(&mut ctx, xv, &HiddenGrid { h: hv, s: Some(sv) }, &GateForcing::NONE)?;
                    got_h = ctx.tape.value(g.h).clone();
                    got_s = g.s.map(|s| ctx.tape.value(s).clone());
                    let mut fctx = Ctx::new(&flat_store);
                    let (a, b, c) = (
                        fctx.tape.constant(x.clone()),
                        fctx.tape.constant(h0.clone()),
                        fctx.tape.constant(s0.clone()),
                    );
                    let forcing = GateForcing {
                        output: Some(1.0),
                        ..GateForcing::NONE
                    };
                    let (h, s) = flat.step(&mut fctx, a, b, c, &forcing)?;
                    want_h = fctx.tape.value(h).clone();
                    want_s = Some(fctx.tape.value(s).clone());
                }
                CellKind::Gru3d => {
                    let flat = FlatGru::new(&mut flat_store, &mut rng(25), "flat", feature, hidden);
                    copy(&mut flat_store, &flat.u, 0)?;
                    copy(&mut flat_store, &flat.r, 1)?;
                    copy(&mut flat_store, &flat.h, 2)?;
                    let (g, _) = rec.gru3d_step(&mut ctx, xv, &HiddenGrid { h: hv, s: None }, &GateForcing::NONE)?;
                    got_h = ctx.tape.value(g.h).clone();
                    got_s = None;
                    let mut fctx = Ctx::new(&flat_store);
                    let (a, b) = (fctx.tape.constant(x.clone()), fctx.tape.constant(h0.clone()));
                    let h = flat.step(&mut fctx, a, b, &GateForcing::NONE)?;
                    want_h = fctx.tape.value(h).clone();
                    want_s = None;
                }
            }
            let mut e = max_diff(got_h.data(), want_h.data());
            if let (Some(a), Some(b)) = (&got_s, &want_s) {
                e = e.max(max_diff(a.data(), b.data()));
            }
            Ok((e <= ORACLE_TOL, format!("max abs difference {e:.3e}")))
        })();
        out.push(Check::from_result(format!("oracle/{}-n1-k1", cell.name()), r));
    }
    out
}

/// Forced gates retain state bit-exactly; the LSTM grid emits `tanh(s)`.
pub fn gate_limits() -> Vec<Check> {
    let mut out = Vec::new();
    let (feature, hidden, n) = (3, 2, 3);
    let x = uniform(&[1, feature], -1.0, 1.0, 31);
    let h0 = uniform(&[1, hidden, n, n, n], -1.0, 1.0, 32);
    let s0 = uniform(&[1, hidden, n, n, n], -1.0, 1.0, 33);

    let gru = (|| -> Result<(bool, String)> {
        let cfg = grid_config(CellKind::Gru3d, 3, n, hidden, feature);
        let mut store = ParamStore::new();
        let rec = Recurrence::new(&cfg, &mut store, &mut rng(34))?;
        let mut ctx = Ctx::new(&store);
        let (xv, hv) = (ctx.tape.constant(x.clone()), ctx.tape.constant(h0.clone()));
        let forcing = GateForcing {
            update: Some(0.0),
            ..GateForcing::NONE
        };
        let (g, _) = rec.gru3d_step(&mut ctx, xv, &HiddenGrid { h: hv, s: None }, &forcing)?;
        Ok((ctx.tape.value(g.h) == &h0, "u = 0 keeps h".into()))
    })();
    out.push(Check::from_result("gates/gru-update-zero", gru));

    let lstm = (|| -> Result<(bool, String)> {
        let cfg = grid_config(CellKind::Lstm3d, 3, n, hidden, feature);
        let mut store = ParamStore::new();
        let rec = Recurrence::new(&cfg, &mut store, &mut rng(35))?;
        let mut ctx = Ctx::new(&store);
        let (xv, hv, sv) = (
            ctx.tape.constant(x.clone()),
            ctx.tape.constant(h0.clone()),
            ctx.tape.constant(s0.clone()),
        );
        let forcing = GateForcing {
            forget: Some(1.0),
            input: Some(0.0),
            ..GateForcing::NONE
        };
        let (g, _) = rec.lstm3d_step(&mut ctx, xv, &HiddenGrid { h: hv, s: Some(sv) }, &forcing)?;
        let s = g.s.map(|s| ctx.tape.value(s).clone());
        Ok((s.as_ref() == Some(&s0), "f = 1, i = 0 keeps s".into()))
    })();
    out.push(Check::from_result("gates/lstm-retain", lstm));

    let tanh = (|| -> Result<(bool, String)> {
        let cfg = grid_config(CellKind::Lstm3d, 3, n, hidden, feature);
        let mut store = ParamStore::new();
        let rec = Recurrence::new(&cfg, &mut store, &mut rng(36))?;
        let mut ctx = Ctx::new(&store);
        let feats: Vec<Var> = (0..3)
            .map(|t| ctx.tape.constant(uniform(&[1, feature], -1.0, 1.0, 40 + t)))
            .collect();
        let run = rec.run_sequence(&mut ctx, &feats)?;
        let ok = run.steps.iter().all(|st| {
            let s = st.grid.s.map(|s| ctx.tape.value(s).map(f64::tanh));
            s.as_ref() == Some(ctx.tape.value(st.grid.h))
        });
        Ok((ok, "h == tanh(s) at every step".into()))
    })();
    out.push(Check::from_result("gates/lstm-no-output-gate", tanh));
    out
}

/// Per step, which cells of `h` move when one source cell of the initial
/// state is perturbed.
fn influence(rec: &Recurrence, store: &ParamStore, steps: usize, source: usize) -> Result<Vec<Vec<bool>>> {
    let c = rec.config();
    let (n, nh) = (c.grid, c.hidden);
    let n3 = n * n * n;
    let feats: Vec<Tensor> = (0..steps)
        .map(|t| uniform(&[1, c.feature_dim], -1.0, 1.0, 60 + t as u64))
        .collect();
    let h0 = uniform(&[1, nh, n, n, n], -1.0, 1.0, 70);
    let s0 = uniform(&[1, nh, n, n, n], -1.0, 1.0, 71);
    let run = |h: &Tensor, s: &Tensor| -> Result<Vec<Tensor>> {
        let mut ctx = Ctx::new(store);
        let mut grid = HiddenGrid {
            h: ctx.tape.constant(h.clone()),
            s: (c.cell == CellKind::Lstm3d).then(|| ctx.tape.constant(s.clone())),
        };
        let mut out = Vec::new();
        for x in &feats {
            let xv = ctx.tape.constant(x.clone());
            grid = rec.step(&mut ctx, xv, &grid, &GateForcing::NONE)?.0;
            out.push(ctx.tape.value(grid.h).clone());
        }
        Ok(out)
    };
    let base = run(&h0, &s0)?;
    let (mut h1, mut s1) = (h0.clone(), s0.clone());
    for ch in 0..nh {
        h1.data_mut()[ch * n3 + source] += 0.5;
        s1.data_mut()[ch * n3 + source] += 0.5;
    }
    let moved = run(&h1, &s1)?;
    Ok(base
        .iter()
        .zip(&moved)
        .map(|(a, b)| {
            (0..n3)
                .map(|cl| (0..nh).any(|ch| a.data()[ch * n3 + cl] != b.data()[ch * n3 + cl]))
                .collect()
        })
        .collect())
}

fn chebyshev(a: usize, b: usize, n: usize) -> usize {
    let ca = [a / (n * n), (a / n) % n, a % n];
    let cb = [b / (n * n), (b / n) % n, b % n];
    (0..3).map(|i| ca[i].abs_diff(cb[i])).max().unwrap_or(0)
}

/// Kernel 1 couples no two cells. With kernel 3 the LSTM grid reaches one
/// Chebyshev step further per time step; the GRU grid two, since its
/// candidate convolves `r ⊙ h` and `r` is itself a convolution of `h`.
pub fn locality() -> Vec<Check> {
    let mut out = Vec::new();
    let n = 4;
    for (kernel, steps) in [(1usize, 1usize), (3, 3)] {
        for cell in [CellKind::Lstm3d, CellKind::Gru3d] {
            let per_step = match (kernel, cell) {
                (1, _) => 0,
                (_, CellKind::Lstm3d) => 1,
                _ => 2,
            };
            let r = (|| -> Result<(bool, String)> {
                let mut store = ParamStore::new();
                let rec = Recurrence::new(&grid_config(cell, kernel, n, 2, 3), &mut store, &mut rng(80))?;
                let mut wrong = 0usize;
                for source in 0..n * n * n {
                    for (t, changed) in influence(&rec, &store, steps, source)?.iter().enumerate() {
                        for (target, &c) in changed.iter().enumerate() {
                            wrong += (c != (chebyshev(source, target, n) <= per_step * (t + 1))) as usize;
                        }
                    }
                }
                Ok((
                    wrong == 0,
                    format!("reach {per_step}/step over {steps} step(s), {wrong} mismatched cell pairs"),
                ))
            })();
            out.push(Check::from_result(format!("locality/{}-k{kernel}", cell.name()), r));
        }
    }
    out
}

/// Everything, in a fixed order. `fault` flips the sign of one op's
/// backward pass in every gradient check.
pub fn run_all(fault: Option<OpKind>) -> Vec<Check> {
    let mut out = op_gradchecks(fault);
    out.extend(network_gradchecks(fault));
    out.extend(flat_oracles());
    out.extend(grid_reduces_to_flat());
    out.extend(gate_limits());
    out.extend(locality());
    out
}
