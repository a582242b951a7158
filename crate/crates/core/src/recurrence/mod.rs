//! Recurrent fusion of encoded views.
//!
//! A grid of `N×N×N` recurrent units, each with an `N_h`-wide hidden state,
//! stored as `h[B, N_h, N, N, N]`. Every unit receives the same feature
//! vector through a learned input map, and its neighbours' previous hidden
//! states through a 3D convolution whose kernel size sets the
//! neighbourhood (1 = no neighbour connections, 3 = immediate neighbours).
//!
//! LSTM grid (no output gate):
//!
//! ```text
//! f = σ(W_f T(x) + U_f * h + b_f)
//! i = σ(W_i T(x) + U_i * h + b_i)
//! s = f ⊙ s_prev + i ⊙ tanh(W_s T(x) + U_s * h + b_s)
//! h = tanh(s)
//! ```
//!
//! GRU grid:
//!
//! ```text
//! u = σ(W_u T(x) + U_u * h + b_u)
//! r = σ(W_r T(x) + U_r * h + b_r)
//! h = (1 - u) ⊙ h_prev + u ⊙ tanh(W_h T(x) + U_h * (r ⊙ h_prev) + b_h)
//! ```

mod flat;

pub use flat::{FlatGru, FlatLstm, GateWeights};

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{Conv3dLayer, Layer};
use crate::params::{Ctx, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CellKind {
    Lstm3d,
    Gru3d,
}

impl CellKind {
    pub fn name(self) -> &'static str {
        match self {
            CellKind::Lstm3d => "lstm3d",
            CellKind::Gru3d => "gru3d",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "lstm3d" | "lstm" => Some(CellKind::Lstm3d),
            "gru3d" | "gru" => Some(CellKind::Gru3d),
            _ => None,
        }
    }
}

/// How the feature vector is mapped onto the grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputMap {
    /// One `feature_dim → N³·N_h` map per gate; each cell has its own slice.
    Unshared,
    /// One `feature_dim → N_h` map per gate, broadcast to every cell.
    Shared,
}

impl InputMap {
    pub fn name(self) -> &'static str {
        match self {
            InputMap::Unshared => "unshared",
            InputMap::Shared => "shared",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "unshared" => Some(InputMap::Unshared),
            "shared" => Some(InputMap::Shared),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecurrenceConfig {
    pub cell: CellKind,
    /// Hidden-to-hidden convolution extent (odd).
    pub kernel: usize,
    /// Grid extent `N`.
    pub grid: usize,
    /// Hidden width `N_h`.
    pub hidden: usize,
    pub feature_dim: usize,
    pub input_map: InputMap,
}

impl Default for RecurrenceConfig {
    fn default() -> Self {
        RecurrenceConfig {
            cell: CellKind::Gru3d,
            kernel: 3,
            grid: 4,
            hidden: 32,
            feature_dim: 128,
            input_map: InputMap::Unshared,
        }
    }
}

impl RecurrenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("recurrence.kernel {} must be odd", self.kernel)));
        }
        if self.grid == 0 || self.hidden == 0 || self.feature_dim == 0 {
            return Err(Error::Config(
                "recurrence grid, hidden and feature_dim must be >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.grid.pow(3)
    }

    /// Shape of `h` (and `s`) for a batch.
    pub fn state_shape(&self, batch: usize) -> [usize; 5] {
        [batch, self.hidden, self.grid, self.grid, self.grid]
    }
}

/// Recurrent state of the grid: `h[B, N_h, N, N, N]` and, for the LSTM
/// variant, the cell state `s` of the same shape.
#[derive(Clone, Copy, Debug)]
pub struct HiddenGrid {
    pub h: Var,
    pub s: Option<Var>,
}

impl HiddenGrid {
    pub fn zeros(tape: &mut Tape, cfg: &RecurrenceConfig, batch: usize) -> Self {
        let shape = cfg.state_shape(batch);
        let h = tape.constant(Tensor::zeros(shape));
        let s = (cfg.cell == CellKind::Lstm3d).then(|| tape.constant(Tensor::zeros(shape)));
        HiddenGrid { h, s }
    }
}

/// Gate values injected in place of the computed sigmoid activations.
/// Used to test the retention limits exactly.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GateForcing {
    pub forget: Option<f64>,
    pub input: Option<f64>,
    pub output: Option<f64>,
    pub update: Option<f64>,
    pub reset: Option<f64>,
}

impl GateForcing {
    pub const NONE: GateForcing = GateForcing {
        forget: None,
        input: None,
        output: None,
        update: None,
        reset: None,
    };
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateName {
    Forget,
    Input,
    Output,
    Update,
    Reset,
}

/// Gate activations recorded during one step.
#[derive(Clone, Debug, Default)]
pub struct StepInternals {
    pub gates: Vec<(GateName, Var)>,
}

impl StepInternals {
    pub fn gate(&self, name: GateName) -> Option<Var> {
        self.gates.iter().find(|(n, _)| *n == name).map(|&(_, v)| v)
    }

    /// The gate that admits new input: `i` for LSTM grids, `u` for GRU.
    pub fn input_like(&self) -> Option<Var> {
        self.gate(GateName::Input).or_else(|| self.gate(GateName::Update))
    }
}

/// One step of a sequence run.
#[derive(Clone, Debug)]
pub struct StepRecord {
    pub grid: HiddenGrid,
    pub internals: StepInternals,
}

#[derive(Clone, Debug)]
pub struct SequenceRun {
    pub steps: Vec<StepRecord>,
}

impl SequenceRun {
    pub fn final_grid(&self) -> HiddenGrid {
        self.steps.last().expect("sequence runs are nonempty").grid
    }
}

#[derive(Clone, Debug)]
struct GateParams {
    input_map: ParamId,
    recur: Conv3dLayer,
}

/// Parameters of a 3D convolutional LSTM or GRU grid.
#[derive(Clone, Debug)]
pub struct Recurrence {
    cfg: RecurrenceConfig,
    // LSTM: forget, input, cell. GRU: update, reset, candidate.
    gates: [GateParams; 3],
}

impl Recurrence {
    pub fn new(cfg: &RecurrenceConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let names: [&str; 3] = match cfg.cell {
            CellKind::Lstm3d => ["forget", "input", "cell"],
            CellKind::Gru3d => ["update", "reset", "candidate"],
        };
        let rows = match cfg.input_map {
            InputMap::Unshared => cfg.cells() * cfg.hidden,
            InputMap::Shared => cfg.hidden,
        };
        let mut make = |name: &str| -> Result<GateParams> {
            let input_map = store.add_uniform(
                format!("recurrence.{name}.w"),
                &[rows, cfg.feature_dim],
                cfg.feature_dim,
                rng,
            );
            let recur = Conv3dLayer::new(
                store,
                rng,
                &format!("recurrence.{name}.u"),
                cfg.hidden,
                cfg.hidden,
                cfg.kernel,
            )?;
            Ok(GateParams { input_map, recur })
        };
        let gates = [make(names[0])?, make(names[1])?, make(names[2])?];
        Ok(Recurrence {
            cfg: cfg.clone(),
            gates,
        })
    }

    pub fn config(&self) -> &RecurrenceConfig {
        &self.cfg
    }

    /// Parameter ids of gate `g`: (input map `W`, recurrent kernel `U`, bias `b`).
    pub fn gate_params(&self, g: usize) -> (ParamId, ParamId, ParamId) {
        let gp = &self.gates[g];
        (
            gp.input_map,
            gp.recur.weight,
            gp.recur.bias.expect("gates carry biases"),
        )
    }

    /// `W T(x)` laid out as `[B, N_h, N, N, N]`.
    fn input_term(&self, ctx: &mut Ctx<'_>, g: usize, feat: Var) -> Result<Var> {
        let w = ctx.p(self.gates[g].input_map);
        let y = ctx.tape.linear(feat, w, None)?;
        let batch = ctx.tape.shape(feat)[0];
        let n = self.cfg.grid;
        match self.cfg.input_map {
            InputMap::Unshared => ctx.tape.reshape(y, &self.cfg.state_shape(batch)),
            InputMap::Shared => ctx.tape.expand_trailing(y, &[n, n, n]),
        }
    }

    /// `W T(x) + U * h + b`
    fn preactivation(&self, ctx: &mut Ctx<'_>, g: usize, feat: Var, h: Var) -> Result<Var> {
        let a = self.input_term(ctx, g, feat)?;
        let b = self.gates[g].recur.forward(ctx, h)?;
        ctx.tape.add(a, b)
    }

    fn gate(&self, ctx: &mut Ctx<'_>, g: usize, feat: Var, h: Var, forced: Option<f64>) -> Result<Var> {
        match forced {
            Some(v) => {
                let shape = ctx.tape.shape(h).to_vec();
                Ok(ctx.tape.constant(Tensor::full(shape, v)))
            }
            None => {
                let z = self.preactivation(ctx, g, feat, h)?;
                ctx.tape.sigmoid(z)
            }
        }
    }

    fn check(&self, tape: &Tape, feat: Var, prev: &HiddenGrid) -> Result<()> {
        let fs = tape.shape(feat);
        if fs.len() != 2 || fs[1] != self.cfg.feature_dim {
            return Err(Error::shape(
                "recurrence",
                fs,
                &[fs.first().copied().unwrap_or(0), self.cfg.feature_dim],
            ));
        }
        let want = self.cfg.state_shape(fs[0]);
        let hs = tape.shape(prev.h);
        if hs != want {
            return Err(Error::shape("recurrence", hs, &want));
        }
        Ok(())
    }

    pub fn lstm3d_step(
        &self,
        ctx: &mut Ctx<'_>,
        feat: Var,
        prev: &HiddenGrid,
        forcing: &GateForcing,
    ) -> Result<(HiddenGrid, StepInternals)> {
        if self.cfg.cell != CellKind::Lstm3d {
            return Err(Error::invalid("lstm3d_step", "recurrence is configured as a GRU grid"));
        }
        self.check(&ctx.tape, feat, prev)?;
        let s_prev = prev
            .s
            .ok_or_else(|| Error::invalid("lstm3d_step", "previous grid has no cell state"))?;
        let f = self.gate(ctx, 0, feat, prev.h, forcing.forget)?;
        let i = self.gate(ctx, 1, feat, prev.h, forcing.input)?;
        let z = self.preactivation(ctx, 2, feat, prev.h)?;
        let candidate = ctx.tape.tanh(z)?;
        let keep = ctx.tape.mul(f, s_prev)?;
        let write = ctx.tape.mul(i, candidate)?;
        let s = ctx.tape.add(keep, write)?;
        let h = ctx.tape.tanh(s)?;
        Ok((
            HiddenGrid { h, s: Some(s) },
            StepInternals {
                gates: vec![(GateName::Forget, f), (GateName::Input, i)],
            },
        ))
    }

    pub fn gru3d_step(
        &self,
        ctx: &mut Ctx<'_>,
        feat: Var,
        prev: &HiddenGrid,
        forcing: &GateForcing,
    ) -> Result<(HiddenGrid, StepInternals)> {
        if self.cfg.cell != CellKind::Gru3d {
            return Err(Error::invalid("gru3d_step", "recurrence is configured as an LSTM grid"));
        }
        self.check(&ctx.tape, feat, prev)?;
        let u = self.gate(ctx, 0, feat, prev.h, forcing.update)?;
        let r = self.gate(ctx, 1, feat, prev.h, forcing.reset)?;
        let rh = ctx.tape.mul(r, prev.h)?;
        let z = self.preactivation(ctx, 2, feat, rh)?;
        let candidate = ctx.tape.tanh(z)?;
        let keep_w = ctx.tape.one_minus(u)?;
        let keep = ctx.tape.mul(keep_w, prev.h)?;
        let write = ctx.tape.mul(u, candidate)?;
        let h = ctx.tape.add(keep, write)?;
        Ok((
            HiddenGrid { h, s: None },
            StepInternals {
                gates: vec![(GateName::Update, u), (GateName::Reset, r)],
            },
        ))
    }

    pub fn step(
        &self,
        ctx: &mut Ctx<'_>,
        feat: Var,
        prev: &HiddenGrid,
        forcing: &GateForcing,
    ) -> Result<(HiddenGrid, StepInternals)> {
        match self.cfg.cell {
            CellKind::Lstm3d => self.lstm3d_step(ctx, feat, prev, forcing),
            CellKind::Gru3d => self.gru3d_step(ctx, feat, prev, forcing),
        }
    }

    /// Fold the step over `feats` starting from the zero state. Every
    /// intermediate grid is kept.
    pub fn run_sequence(&self, ctx: &mut Ctx<'_>, feats: &[Var]) -> Result<SequenceRun> {
        let first = feats
            .first()
            .ok_or_else(|| Error::invalid("run_sequence", "empty view sequence"))?;
        let batch = ctx.tape.shape(*first)[0];
        let mut grid = HiddenGrid::zeros(&mut ctx.tape, &self.cfg, batch);
        let mut steps = Vec::with_capacity(feats.len());
        for &feat in feats {
            let (next, internals) = self.step(ctx, feat, &grid, &GateForcing::NONE)?;
            grid = next;
            steps.push(StepRecord { grid, internals });
        }
        Ok(SequenceRun { steps })
    }
}

/// Channel `channel` of a recorded gate activation for batch item `item`,
/// as an `N×N×N` tensor.
pub fn extract_gate_activations(tape: &Tape, gate: Var, channel: usize, item: usize) -> Result<Tensor> {
    let v = tape.value(gate);
    let s = v.shape();
    if s.len() != 5 {
        return Err(Error::invalid(
            "extract_gate_activations",
            format!("expected a grid, got {s:?}"),
        ));
    }
    if channel >= s[1] {
        return Err(Error::invalid(
            "extract_gate_activations",
            format!("channel {channel} out of range for hidden width {}", s[1]),
        ));
    }
    if item >= s[0] {
        return Err(Error::invalid(
            "extract_gate_activations",
            format!("batch item {item} out of range"),
        ));
    }
    let cells = s[2] * s[3] * s[4];
    let start = (item * s[1] + channel) * cells;
    Tensor::new([s[2], s[3], s[4]], v.data()[start..start + cells].to_vec())
}

#[cfg(test)]
mod tests;
