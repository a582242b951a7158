//! Reference LSTM and GRU cells over plain vectors.

use rand_chacha::ChaCha8Rng;

use super::GateForcing;
use crate::error::{Error, Result};
use crate::params::{Ctx, ParamId, ParamStore};
use crate::tensor::{Tensor, Var};

/// `(W, U, b)` of one gate: `W[hidden, input]`, `U[hidden, hidden]`, `b[hidden]`.
#[derive(Clone, Copy, Debug)]
pub struct GateWeights {
    pub w: ParamId,
    pub u: ParamId,
    pub b: ParamId,
}

impl GateWeights {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, input: usize, hidden: usize) -> Self {
        GateWeights {
            w: store.add_uniform(format!("{name}.w"), &[hidden, input], input, rng),
            u: store.add_uniform(format!("{name}.u"), &[hidden, hidden], hidden, rng),
            b: store.add_uniform(format!("{name}.b"), &[hidden], hidden, rng),
        }
    }

    /// `W x + U h + b`
    fn preactivation(&self, ctx: &mut Ctx<'_>, x: Var, h: Var) -> Result<Var> {
        let (w, u, b) = (ctx.p(self.w), ctx.p(self.u), ctx.p(self.b));
        let a = ctx.tape.linear(x, w, Some(b))?;
        let r = ctx.tape.linear(h, u, None)?;
        ctx.tape.add(a, r)
    }

    fn gate(&self, ctx: &mut Ctx<'_>, x: Var, h: Var, forced: Option<f64>) -> Result<Var> {
        match forced {
            Some(v) => {
                let shape = ctx.tape.shape(h).to_vec();
                Ok(ctx.tape.constant(Tensor::full(shape, v)))
            }
            None => {
                let z = self.preactivation(ctx, x, h)?;
                ctx.tape.sigmoid(z)
            }
        }
    }
}

fn check(ctx: &Ctx<'_>, op: &'static str, input: usize, hidden: usize, x: Var, states: &[Var]) -> Result<()> {
    let xs = ctx.tape.shape(x);
    if xs.len() != 2 || xs[1] != input {
        return Err(Error::shape(op, xs, &[xs.first().copied().unwrap_or(0), input]));
    }
    let want = [xs[0], hidden];
    for &s in states {
        if ctx.tape.shape(s) != want {
            return Err(Error::shape(op, ctx.tape.shape(s), &want));
        }
    }
    Ok(())
}

/// LSTM with input, forget and output gates.
#[derive(Clone, Debug)]
pub struct FlatLstm {
    pub input: usize,
    pub hidden: usize,
    pub i: GateWeights,
    pub f: GateWeights,
    pub o: GateWeights,
    pub s: GateWeights,
}

impl FlatLstm {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, input: usize, hidden: usize) -> Self {
        FlatLstm {
            input,
            hidden,
            i: GateWeights::new(store, rng, &format!("{name}.i"), input, hidden),
            f: GateWeights::new(store, rng, &format!("{name}.f"), input, hidden),
            o: GateWeights::new(store, rng, &format!("{name}.o"), input, hidden),
            s: GateWeights::new(store, rng, &format!("{name}.s"), input, hidden),
        }
    }

    /// `x[B, input]`, `h_prev, s_prev[B, hidden]` → `(h, s)`.
    pub fn step(
        &self,
        ctx: &mut Ctx<'_>,
        x: Var,
        h_prev: Var,
        s_prev: Var,
        forcing: &GateForcing,
    ) -> Result<(Var, Var)> {
        check(ctx, "lstm_step_flat", self.input, self.hidden, x, &[h_prev, s_prev])?;
        let i = self.i.gate(ctx, x, h_prev, forcing.input)?;
        let f = self.f.gate(ctx, x, h_prev, forcing.forget)?;
        let o = self.o.gate(ctx, x, h_prev, forcing.output)?;
        let z = self.s.preactivation(ctx, x, h_prev)?;
        let candidate = ctx.tape.tanh(z)?;
        let keep = ctx.tape.mul(f, s_prev)?;
        let write = ctx.tape.mul(i, candidate)?;
        let s = ctx.tape.add(keep, write)?;
        let ts = ctx.tape.tanh(s)?;
        let h = ctx.tape.mul(o, ts)?;
        Ok((h, s))
    }
}

/// GRU with update and reset gates.
#[derive(Clone, Debug)]
pub struct FlatGru {
    pub input: usize,
    pub hidden: usize,
    pub u: GateWeights,
    pub r: GateWeights,
    pub h: GateWeights,
}

impl FlatGru {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, input: usize, hidden: usize) -> Self {
        FlatGru {
            input,
            hidden,
            u: GateWeights::new(store, rng, &format!("{name}.u"), input, hidden),
            r: GateWeights::new(store, rng, &format!("{name}.r"), input, hidden),
            h: GateWeights::new(store, rng, &format!("{name}.h"), input, hidden),
        }
    }

    pub fn step(&self, ctx: &mut Ctx<'_>, x: Var, h_prev: Var, forcing: &GateForcing) -> Result<Var> {
        check(ctx, "gru_step_flat", self.input, self.hidden, x, &[h_prev])?;
        let u = self.u.gate(ctx, x, h_prev, forcing.update)?;
        let r = self.r.gate(ctx, x, h_prev, forcing.reset)?;
        let rh = ctx.tape.mul(r, h_prev)?;
        let z = self.h.preactivation(ctx, x, rh)?;
        let candidate = ctx.tape.tanh(z)?;
        let keep_w = ctx.tape.one_minus(u)?;
        let keep = ctx.tape.mul(keep_w, h_prev)?;
        let write = ctx.tape.mul(u, candidate)?;
        ctx.tape.add(keep, write)
    }
}
