use super::{OpKind, Tape, Tensor, Var};
use crate::error::Result;

/// Outcome of comparing tape gradients against central differences.
#[derive(Clone, Debug)]
pub struct GradcheckReport {
    /// Largest per-input relative error `‖a − n‖ / max(‖a‖, ‖n‖)`.
    pub max_rel_error: f64,
    pub per_input: Vec<f64>,
}

impl GradcheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Fixed projection weights used to turn non-scalar outputs into a scalar.
fn projection(n: usize) -> Tensor {
    let mut state: u64 = 0x9e37_79b9_7f4a_7c15;
    Tensor::from_fn([n], |_| {
        state = state
            .wrapping_mul(6_364_136_223_846_793_005)
            .wrapping_add(1_442_695_040_888_963_407);
        0.5 + ((state >> 11) as f64 / (1u64 << 53) as f64)
    })
}

fn scalar_output<F>(f: &F, tape: &mut Tape, vars: &[Var]) -> Result<Var>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let y = f(tape, vars)?;
    tape.seal_fault();
    project_to_scalar(tape, y)
}

/// Contract a non-scalar output with fixed weights in `[0.5, 1.5)`.
pub fn project_to_scalar(tape: &mut Tape, y: Var) -> Result<Var> {
    let n = tape.value(y).len();
    if n == 1 {
        return Ok(y);
    }
    let flat = tape.reshape(y, &[n])?;
    let r = tape.constant(projection(n));
    let weighted = tape.mul(flat, r)?;
    tape.sum(weighted)
}

/// Check the gradients of `f` at `inputs` with central differences of step
/// `h`. `fault` is forwarded to [`Tape::inject_fault`].
pub fn gradcheck<F>(inputs: &[Tensor], h: f64, fault: Option<OpKind>, f: F) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    if let Some(kind) = fault {
        tape.inject_fault(kind);
    }
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let out = scalar_output(&f, &mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let eval = |probe: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = probe.iter().map(|x| t.constant(x.clone())).collect();
        let o = scalar_output(&f, &mut t, &vs)?;
        Ok(t.value(o).data()[0])
    };

    let mut per_input = Vec::with_capacity(inputs.len());
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[k].shape().to_vec()));
        let mut diff2 = 0.0;
        let mut a2 = 0.0;
        let mut n2 = 0.0;
        for e in 0..inputs[k].len() {
            let x0 = inputs[k].data()[e];
            probe[k].data_mut()[e] = x0 + h;
            let fp = eval(&probe)?;
            probe[k].data_mut()[e] = x0 - h;
            let fm = eval(&probe)?;
            probe[k].data_mut()[e] = x0;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.data()[e];
            diff2 += (a - numeric) * (a - numeric);
            a2 += a * a;
            n2 += numeric * numeric;
        }
        let denom = a2.sqrt().max(n2.sqrt()).max(1e-10);
        per_input.push(diff2.sqrt() / denom);
    }
    let max_rel_error = per_input.iter().copied().fold(0.0, f64::max);
    Ok(GradcheckReport {
        max_rel_error,
        per_input,
    })
}
