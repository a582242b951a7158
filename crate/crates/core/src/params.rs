//! Named, shared parameter storage and initialization.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{GradcheckReport, Gradients, OpKind, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Arc<Tensor>,
}

/// Parameters of a network, in registration order.
///
/// Values are stored as `f64` but always hold `f32`-representable numbers,
/// so checkpoints written as 32-bit floats restore them exactly.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

/// Round to the nearest `f32`.
pub fn quantize(x: f64) -> f64 {
    x as f32 as f64
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, mut value: Tensor) -> ParamId {
        value.data_mut().iter_mut().for_each(|v| *v = quantize(*v));
        self.params.push(Param {
            name: name.into(),
            value: Arc::new(value),
        });
        ParamId(self.params.len() - 1)
    }

    /// Uniform in `±sqrt(6 / fan_in)`.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        let t = Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-bound..bound));
        self.add(name, t)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape.to_vec()))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Replace a value, keeping its shape. Values are stored as given.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let cur = &self.params[id.0];
        if cur.value.shape() != value.shape() {
            return Err(Error::shape("param", cur.value.shape(), value.shape()));
        }
        self.params[id.0].value = Arc::new(value);
        Ok(())
    }

    /// Mutable access to raw values. Callers must keep them f32-representable.
    pub fn data_mut(&mut self, id: ParamId) -> &mut [f64] {
        Arc::make_mut(&mut self.params[id.0].value).data_mut()
    }

    pub fn count_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Record every parameter on `tape` as a gradient-tracked leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|p| tape.shared(Arc::clone(&p.value), true))
                .collect(),
        }
    }
}

/// Tape variables of a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Collect per-parameter gradients (zeros where the loss does not depend
    /// on a parameter).
    pub fn gradients(&self, store: &ParamStore, grads: &mut Gradients) -> Vec<Tensor> {
        self.vars
            .iter()
            .zip(&store.params)
            .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.value.shape().to_vec())))
            .collect()
    }
}

/// A tape together with the parameter variables bound on it.
pub struct Ctx<'a> {
    pub tape: Tape,
    pub store: &'a ParamStore,
    bound: Bound,
}

impl<'a> Ctx<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self::with_tape(store, Tape::new())
    }

    pub fn with_tape(store: &'a ParamStore, mut tape: Tape) -> Self {
        let bound = store.bind(&mut tape);
        Ctx { tape, store, bound }
    }

    pub fn p(&self, id: ParamId) -> Var {
        self.bound.var(id)
    }

    pub fn bound(&self) -> &Bound {
        &self.bound
    }

    /// Backward from `loss` and return per-parameter gradients in store order.
    pub fn param_grads(&self, loss: Var) -> Result<Vec<Tensor>> {
        let mut g = self.tape.backward(loss)?;
        Ok(self.bound.gradients(self.store, &mut g))
    }
}

/// Central-difference check of the gradients of `f` w.r.t. every parameter
/// in `store` and every tensor in `inputs`. Per-input errors list the
/// parameters first, in store order.
pub fn gradcheck_params<F>(
    store: &ParamStore,
    inputs: &[Tensor],
    h: f64,
    fault: Option<OpKind>,
    f: F,
) -> Result<GradcheckReport>
where
    F: Fn(&mut Ctx<'_>, &[Var]) -> Result<Var>,
{
    let run = |s: &ParamStore, xs: &[Tensor], track: bool| -> Result<(f64, Vec<Tensor>, Vec<Tensor>)> {
        let mut tape = Tape::new();
        if let Some(k) = fault {
            tape.inject_fault(k);
        }
        let mut ctx = Ctx::with_tape(s, tape);
        let vars: Vec<Var> = xs
            .iter()
            .map(|x| {
                if track {
                    ctx.tape.variable(x.clone())
                } else {
                    ctx.tape.constant(x.clone())
                }
            })
            .collect();
        let y = f(&mut ctx, &vars)?;
        ctx.tape.seal_fault();
        let y = crate::tensor::project_to_scalar(&mut ctx.tape, y)?;
        let value = ctx.tape.value(y).data()[0];
        if !track {
            return Ok((value, Vec::new(), Vec::new()));
        }
        let mut g = ctx.tape.backward(y)?;
        let pg = ctx.bound.gradients(s, &mut g);
        let ig = vars
            .iter()
            .zip(xs)
            .map(|(&v, x)| g.take(v).unwrap_or_else(|| Tensor::zeros(x.shape().to_vec())))
            .collect();
        Ok((value, pg, ig))
    };

    let (_, pgrads, igrads) = run(store, inputs, true)?;
    let mut probe_store = store.clone();
    let mut probe_inputs = inputs.to_vec();
    let mut per_input = Vec::new();

    let rel = |a: &[f64], n: &[f64]| {
        let d: f64 = a.iter().zip(n).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nn: f64 = n.iter().map(|x| x * x).sum::<f64>().sqrt();
        d / na.max(nn).max(1e-10)
    };

    for (k, (id, _)) in store.iter().enumerate() {
        let n = store.get(id).len();
        let mut numeric = vec![0.0; n];
        for (e, slot) in numeric.iter_mut().enumerate() {
            let x0 = store.get(id).data()[e];
            probe_store.data_mut(id)[e] = x0 + h;
            let fp = run(&probe_store, &probe_inputs, false)?.0;
            probe_store.data_mut(id)[e] = x0 - h;
            let fm = run(&probe_store, &probe_inputs, false)?.0;
            probe_store.data_mut(id)[e] = x0;
            *slot = (fp - fm) / (2.0 * h);
        }
        per_input.push(rel(pgrads[k].data(), &numeric));
    }
    for k in 0..inputs.len() {
        let mut numeric = vec![0.0; inputs[k].len()];
        for (e, slot) in numeric.iter_mut().enumerate() {
            let x0 = inputs[k].data()[e];
            probe_inputs[k].data_mut()[e] = x0 + h;
            let fp = run(&probe_store, &probe_inputs, false)?.0;
            probe_inputs[k].data_mut()[e] = x0 - h;
            let fm = run(&probe_store, &probe_inputs, false)?.0;
            probe_inputs[k].data_mut()[e] = x0;
            *slot = (fp - fm) / (2.0 * h);
        }
        per_input.push(rel(igrads[k].data(), &numeric));
    }
    Ok(GradcheckReport {
        max_rel_error: per_input.iter().copied().fold(0.0, f64::max),
        per_input,
    })
}
