use crate::error::{Error, Result};
use crate::params::{quantize, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moments per parameter, plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store
            .iter()
            .map(|(_, p)| Tensor::zeros(p.value.shape().to_vec()))
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of every parameter in `store`.
/// Parameters and moments are rounded to `f32` afterwards.
pub fn adam_step(store: &mut ParamStore, grads: &[Tensor], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if grads.len() != store.len() || state.m.len() != store.len() || state.v.len() != store.len() {
        return Err(Error::invalid(
            "adam_step",
            format!(
                "{} parameters, {} gradients, {} moment pairs",
                store.len(),
                grads.len(),
                state.m.len().min(state.v.len())
            ),
        ));
    }
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for (n, &id) in ids.iter().enumerate() {
        let shape = store.get(id).shape();
        for t in [&grads[n], &state.m[n], &state.v[n]] {
            if t.shape() != shape {
                return Err(Error::shape("adam_step", shape, t.shape()));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (n, &id) in ids.iter().enumerate() {
        let g = grads[n].data();
        let m = state.m[n].data_mut();
        let v = state.v[n].data_mut();
        let theta = store.data_mut(id);
        for e in 0..g.len() {
            m[e] = quantize(b1 * m[e] + (1.0 - b1) * g[e]);
            v[e] = quantize(b2 * v[e] + (1.0 - b2) * g[e] * g[e]);
            let mh = m[e] / c1;
            let vh = v[e] / c2;
            theta[e] = quantize(theta[e] - cfg.learning_rate * mh / (vh.sqrt() + cfg.epsilon));
        }
    }
    Ok(())
}
