//! Minibatch Adam training, evaluation and metrics logs.

mod adam;
mod batches;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use batches::{make_batches, Batch, BatchSampler};

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::hash::{fnv1a64, stream};
use crate::manifest::Manifest;
use crate::network::{Network, NetworkConfig};
use crate::objective::{cross_entropy_var, iou, mean_cross_entropy, VoxelGrid, EVAL_THRESHOLD};
use crate::params::{Ctx, ParamStore};
use crate::synth::{augment, AugmentOptions, Viewpoint};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub iterations: u64,
    pub adam: AdamConfig,
    /// Inclusive range of sequence lengths drawn per minibatch.
    pub view_range: (usize, usize),
    /// Held-out IoU cadence in iterations; 0 disables it.
    pub eval_every: u64,
    /// Sequence length used for the held-out IoU.
    pub eval_views: usize,
    /// At most this many held-out samples are scored.
    pub heldout_limit: usize,
    /// A metrics row summarizes this many iterations.
    pub log_every: u64,
    pub seed: u64,
    pub augment: AugmentOptions,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            iterations: 2000,
            adam: AdamConfig::default(),
            view_range: (1, 5),
            eval_every: 500,
            eval_views: 5,
            heldout_limit: 50,
            log_every: 10,
            seed: 1,
            augment: AugmentOptions::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.view_range;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!(
                "train view range [{lo}, {hi}] needs 1 <= min <= max"
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        if self.log_every == 0 || self.eval_views == 0 {
            return Err(Error::Config(
                "train.log_every and train.eval_views must be >= 1".into(),
            ));
        }
        let a = &self.adam;
        if !(a.learning_rate >= 0.0
            && (0.0..1.0).contains(&a.beta1)
            && (0.0..1.0).contains(&a.beta2)
            && a.epsilon > 0.0)
        {
            return Err(Error::Config("adam hyperparameters out of range".into()));
        }
        self.augment.validate()
    }
}

/// A dataset sample held in memory.
#[derive(Clone, Debug)]
pub struct LoadedSample {
    pub id: String,
    /// `[1, H, W]` images in stored order.
    pub views: Vec<Tensor>,
    pub viewpoints: Vec<Viewpoint>,
    pub target: VoxelGrid,
}

pub fn load_samples(manifest: &Manifest) -> Result<Vec<LoadedSample>> {
    manifest
        .samples
        .iter()
        .map(|s| {
            let images = manifest.load_views(s, s.views.len())?;
            Ok(LoadedSample {
                id: s.id.clone(),
                views: images.iter().map(|i| i.to_tensor()).collect(),
                viewpoints: s.views.iter().map(|v| v.viewpoint).collect(),
                target: manifest.load_target(s)?,
            })
        })
        .collect()
}

fn check_samples(cfg: &NetworkConfig, data: &[LoadedSample]) -> Result<()> {
    let want = cfg.image_shape();
    for s in data {
        if let Some(v) = s.views.iter().find(|v| v.shape() != want) {
            return Err(Error::Data(format!(
                "sample `{}` has a {:?} view but the encoder expects {:?}",
                s.id,
                v.shape(),
                want
            )));
        }
        if s.target.extent() != cfg.n_vox() {
            return Err(Error::Data(format!(
                "sample `{}` has a {}³ target but the decoder produces {}³",
                s.id,
                s.target.extent(),
                cfg.n_vox()
            )));
        }
    }
    Ok(())
}

fn stack(parts: &[&Tensor]) -> Tensor {
    let mut shape = vec![parts.len()];
    shape.extend_from_slice(parts[0].shape());
    let data = parts.iter().flat_map(|t| t.data().iter().copied()).collect();
    Tensor::new(shape, data).expect("parts share a shape")
}

fn augment_seed(seed: u64, iteration: u64, slot: usize, view: usize) -> u64 {
    let mut b = Vec::with_capacity(32);
    for x in [seed, iteration, slot as u64, view as u64] {
        b.extend_from_slice(&x.to_le_bytes());
    }
    fnv1a64(&b)
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub iteration: u64,
    pub mean_loss: f64,
    pub heldout_iou: Option<f64>,
}

pub const METRICS_HEADER: &str = "iteration,mean_loss,heldout_iou";

pub fn format_metric_row(r: &MetricRow) -> String {
    match r.heldout_iou {
        Some(i) => format!("{},{:.6},{:.6}", r.iteration, r.mean_loss, i),
        None => format!("{},{:.6},", r.iteration, r.mean_loss),
    }
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Data("metrics log lacks its header".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || Error::Data(format!("bad metrics row `{l}`"));
            if f.len() != 3 {
                return Err(bad());
            }
            Ok(MetricRow {
                iteration: f[0].parse().map_err(|_| bad())?,
                mean_loss: f[1].parse().map_err(|_| bad())?,
                heldout_iou: if f[2].is_empty() {
                    None
                } else {
                    Some(f[2].parse().map_err(|_| bad())?)
                },
            })
        })
        .collect()
}

/// Network, parameters and optimizer state being trained on `data`.
pub struct Trainer<'a> {
    pub net: Network,
    pub store: ParamStore,
    pub adam: AdamState,
    cfg: TrainConfig,
    sampler: BatchSampler,
    data: &'a [LoadedSample],
}

impl<'a> Trainer<'a> {
    /// Fresh parameters from the `init` stream of `cfg.seed`.
    pub fn new(net_cfg: &NetworkConfig, cfg: &TrainConfig, data: &'a [LoadedSample]) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = stream(cfg.seed, "init");
        let net = Network::new(net_cfg, &mut store, &mut rng)?;
        let adam = AdamState::new(&store);
        Self::resume(net, store, adam, cfg, data)
    }

    /// Continue from saved parameters and optimizer state. The batch stream
    /// is replayed up to the saved step.
    pub fn resume(
        net: Network,
        store: ParamStore,
        adam: AdamState,
        cfg: &TrainConfig,
        data: &'a [LoadedSample],
    ) -> Result<Self> {
        cfg.validate()?;
        check_samples(net.config(), data)?;
        let counts: Vec<usize> = data.iter().map(|s| s.views.len()).collect();
        let mut sampler = BatchSampler::new(&counts, cfg.batch_size, cfg.view_range, stream(cfg.seed, "batching"))?;
        sampler.skip(adam.step);
        Ok(Trainer {
            net,
            store,
            adam,
            cfg: cfg.clone(),
            sampler,
            data,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Iterations completed so far.
    pub fn iteration(&self) -> u64 {
        self.adam.step
    }

    /// Run one minibatch: forward, loss at the end of the sequence,
    /// backward and an Adam update. Returns the minibatch loss.
    pub fn step(&mut self) -> Result<f64> {
        let batch = self.sampler.next_batch();
        let iteration = self.adam.step;
        let grads = {
            let mut ctx = Ctx::new(&self.store);
            let mut views = Vec::with_capacity(batch.views);
            for t in 0..batch.views {
                let imgs: Vec<Tensor> = batch
                    .items
                    .iter()
                    .enumerate()
                    .map(|(slot, &n)| self.view(n, t, iteration, slot))
                    .collect::<Result<_>>()?;
                let refs: Vec<&Tensor> = imgs.iter().collect();
                views.push(ctx.tape.constant(stack(&refs)));
            }
            let targets: Vec<Tensor> = batch.items.iter().map(|&n| self.data[n].target.to_tensor()).collect();
            let refs: Vec<&Tensor> = targets.iter().collect();
            let fwd = self.net.forward(&mut ctx, &views)?;
            let loss = cross_entropy_var(&mut ctx.tape, fwd.probs, &stack(&refs))?;
            let value = ctx.tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::Diverged {
                    iteration: iteration + 1,
                    loss: value,
                });
            }
            (ctx.param_grads(loss)?, value)
        };
        let (grads, value) = grads;
        adam_step(&mut self.store, &grads, &mut self.adam, &self.cfg.adam)?;
        Ok(value)
    }

    fn view(&self, n: usize, t: usize, iteration: u64, slot: usize) -> Result<Tensor> {
        let v = &self.data[n].views[t];
        if self.cfg.augment.is_identity() {
            return Ok(v.clone());
        }
        let img = crate::image::Image::from_tensor(v)?;
        let seed = augment_seed(self.cfg.seed, iteration, slot, t);
        Ok(augment(&img, seed, &self.cfg.augment)?.to_tensor())
    }

    /// Train until `cfg.iterations`, calling `hook` after every logged row.
    pub fn run(
        &mut self,
        heldout: &[LoadedSample],
        mut hook: impl FnMut(&Trainer<'a>, &MetricRow) -> Result<()>,
    ) -> Result<Vec<MetricRow>> {
        let mut rows = Vec::new();
        let (mut sum, mut n) = (0.0, 0u64);
        while self.adam.step < self.cfg.iterations {
            sum += self.step()?;
            n += 1;
            let done = self.adam.step;
            let eval_due =
                self.cfg.eval_every > 0 && (done.is_multiple_of(self.cfg.eval_every) || done == self.cfg.iterations);
            if done.is_multiple_of(self.cfg.log_every) || eval_due || done == self.cfg.iterations {
                let heldout_iou = if eval_due && !heldout.is_empty() {
                    let subset = &heldout[..heldout.len().min(self.cfg.heldout_limit)];
                    let k = self.cfg.eval_views;
                    let scores = score(&self.net, &self.store, subset, k, EVAL_THRESHOLD)?;
                    Some(mean(&scores.iter().map(|s| s.0).collect::<Vec<_>>()))
                } else {
                    None
                };
                let row = MetricRow {
                    iteration: done,
                    mean_loss: sum / n as f64,
                    heldout_iou,
                };
                hook(self, &row)?;
                rows.push(row);
                (sum, n) = (0.0, 0);
            }
        }
        Ok(rows)
    }
}

/// Occupancy probabilities for the first `k` views of each sample.
pub fn predict_batch(net: &Network, store: &ParamStore, samples: &[&LoadedSample], k: usize) -> Result<Vec<VoxelGrid>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(8) {
        let mut ctx = Ctx::new(store);
        let mut views = Vec::with_capacity(k);
        for t in 0..k {
            let parts: Vec<&Tensor> = chunk
                .iter()
                .map(|s| {
                    s.views.get(t).ok_or_else(|| {
                        Error::Data(format!("sample `{}` has {} views, {k} requested", s.id, s.views.len()))
                    })
                })
                .collect::<Result<_>>()?;
            views.push(ctx.tape.constant(stack(&parts)));
        }
        let fwd = net.forward(&mut ctx, &views)?;
        let p = ctx.tape.value(fwd.probs);
        let d = net.config().n_vox();
        for b in 0..chunk.len() {
            let vol = d * d * d;
            out.push(VoxelGrid::new(d, p.data()[b * vol..(b + 1) * vol].to_vec())?);
        }
    }
    Ok(out)
}

/// Per-sample `(IoU, mean cross-entropy)` with `k` views.
fn score(net: &Network, store: &ParamStore, samples: &[LoadedSample], k: usize, t: f64) -> Result<Vec<(f64, f64)>> {
    let refs: Vec<&LoadedSample> = samples.iter().collect();
    let preds = predict_batch(net, store, &refs, k)?;
    preds
        .iter()
        .zip(samples)
        .map(|(p, s)| Ok((iou(p, &s.target, t)?, mean_cross_entropy(p, &s.target)?)))
        .collect()
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Summary for one sequence length.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub views: usize,
    pub mean_iou: f64,
    pub median_iou: f64,
    pub mean_loss: f64,
    pub median_loss: f64,
}

/// Feed the first `k` views of every sample for each `k` in `views`.
pub fn evaluate(
    net: &Network,
    store: &ParamStore,
    samples: &[LoadedSample],
    views: &[usize],
    t: f64,
) -> Result<Vec<EvalRow>> {
    if samples.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let stored = samples.iter().map(|s| s.views.len()).min().unwrap_or(0);
    if let Some(&k) = views.iter().find(|&&k| k == 0 || k > stored) {
        return Err(Error::invalid(
            "evaluate",
            format!("view count {k} outside 1..={stored} stored views"),
        ));
    }
    views
        .iter()
        .map(|&k| {
            let s = score(net, store, samples, k, t)?;
            let ious: Vec<f64> = s.iter().map(|x| x.0).collect();
            let losses: Vec<f64> = s.iter().map(|x| x.1).collect();
            Ok(EvalRow {
                views: k,
                mean_iou: mean(&ious),
                median_iou: median(&ious),
                mean_loss: mean(&losses),
                median_loss: median(&losses),
            })
        })
        .collect()
}

pub const EVAL_HEADER: &str = "views,mean_iou,median_iou,mean_loss,median_loss";

pub fn format_eval_csv(rows: &[EvalRow]) -> String {
    let mut out = format!("{EVAL_HEADER}\n");
    for r in rows {
        writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6}",
            r.views, r.mean_iou, r.median_iou, r.mean_loss, r.median_loss
        )
        .expect("writing to a string");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn metrics_csv_roundtrip() {
        let rows = vec![
            MetricRow {
                iteration: 10,
                mean_loss: 0.5,
                heldout_iou: None,
            },
            MetricRow {
                iteration: 20,
                mean_loss: 0.25,
                heldout_iou: Some(0.75),
            },
        ];
        let mut text = format!("{METRICS_HEADER}\n");
        for r in &rows {
            text.push_str(&format_metric_row(r));
            text.push('\n');
        }
        assert_eq!(parse_metrics_csv(&text).unwrap(), rows);
        assert!(parse_metrics_csv("bad\n").is_err());
    }
}
