//! Encoder, recurrence and decoder composed into one network.

use rand_chacha::ChaCha8Rng;

use crate::decoder::{voxel_softmax_var, Decoder, DecoderConfig};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::params::{Ctx, ParamStore};
use crate::recurrence::{Recurrence, RecurrenceConfig, SequenceRun};
use crate::tensor::{Tensor, Var};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct NetworkConfig {
    pub encoder: EncoderConfig,
    pub recurrence: RecurrenceConfig,
    pub decoder: DecoderConfig,
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.recurrence.validate()?;
        self.decoder.validate()?;
        if self.encoder.feature_dim != self.recurrence.feature_dim {
            return Err(Error::Config(format!(
                "encoder.feature_dim {} != recurrence.feature_dim {}",
                self.encoder.feature_dim, self.recurrence.feature_dim
            )));
        }
        if self.decoder.in_channels != self.recurrence.hidden || self.decoder.grid != self.recurrence.grid {
            return Err(Error::Config(format!(
                "decoder expects a {}-channel {}³ grid but the recurrence produces {}-channel {}³",
                self.decoder.in_channels, self.decoder.grid, self.recurrence.hidden, self.recurrence.grid
            )));
        }
        Ok(())
    }

    /// Image extent and channels the network consumes.
    pub fn image_shape(&self) -> [usize; 3] {
        let e = &self.encoder;
        [e.in_channels, e.input_size, e.input_size]
    }

    pub fn n_vox(&self) -> usize {
        self.decoder.n_vox
    }
}

/// Result of a forward pass over a view sequence.
#[derive(Clone, Debug)]
pub struct Forward {
    pub run: SequenceRun,
    /// Final-step logits `[B, 2, D, D, D]`.
    pub logits: Var,
    /// Final-step occupancy probabilities `[B, D, D, D]`.
    pub probs: Var,
}

#[derive(Clone, Debug)]
pub struct Network {
    cfg: NetworkConfig,
    pub encoder: Encoder,
    pub recurrence: Recurrence,
    pub decoder: Decoder,
}

impl Network {
    pub fn new(cfg: &NetworkConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let encoder = Encoder::new(&cfg.encoder, store, rng)?;
        let recurrence = Recurrence::new(&cfg.recurrence, store, rng)?;
        let decoder = Decoder::new(&cfg.decoder, store, rng)?;
        Ok(Network {
            cfg: cfg.clone(),
            encoder,
            recurrence,
            decoder,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    /// Encode each `views[t]` (`[B, C, H, W]`), fuse them in order and
    /// decode the final grid.
    pub fn forward(&self, ctx: &mut Ctx<'_>, views: &[Var]) -> Result<Forward> {
        let feats = views
            .iter()
            .map(|&v| self.encoder.encode(ctx, v))
            .collect::<Result<Vec<_>>>()?;
        let run = self.recurrence.run_sequence(ctx, &feats)?;
        let logits = self.decoder.decode(ctx, run.final_grid().h)?;
        let probs = voxel_softmax_var(ctx, logits)?;
        Ok(Forward { run, logits, probs })
    }

    /// Decode after every step; returns probabilities for each prefix.
    pub fn forward_per_step(&self, ctx: &mut Ctx<'_>, views: &[Var]) -> Result<(Forward, Vec<Var>)> {
        let fwd = self.forward(ctx, views)?;
        let mut probs = Vec::with_capacity(fwd.run.steps.len());
        for (t, step) in fwd.run.steps.iter().enumerate() {
            if t + 1 == fwd.run.steps.len() {
                probs.push(fwd.probs);
            } else {
                let l = self.decoder.decode(ctx, step.grid.h)?;
                probs.push(voxel_softmax_var(ctx, l)?);
            }
        }
        Ok((fwd, probs))
    }

    /// Occupancy probabilities `[D, D, D]` for a single view sequence of
    /// `[C, H, W]` images.
    pub fn predict(&self, store: &ParamStore, images: &[Tensor]) -> Result<Tensor> {
        let mut ctx = Ctx::new(store);
        let views = self.stage_views(&mut ctx, images)?;
        let fwd = self.forward(&mut ctx, &views)?;
        let p = ctx.tape.value(fwd.probs).clone();
        let d = self.cfg.n_vox();
        p.reshape([d, d, d])
    }

    /// Place `[C, H, W]` images on the tape as batch-of-one constants.
    pub fn stage_views(&self, ctx: &mut Ctx<'_>, images: &[Tensor]) -> Result<Vec<Var>> {
        let want = self.cfg.image_shape();
        images
            .iter()
            .map(|img| {
                if img.shape() != want {
                    return Err(Error::shape("network input", img.shape(), &want));
                }
                let t = img.clone().reshape([1, want[0], want[1], want[2]])?;
                Ok(ctx.tape.constant(t))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn default_config_is_consistent() {
        NetworkConfig::default().validate().unwrap();
    }

    #[test]
    fn inconsistent_widths_rejected() {
        let mut cfg = NetworkConfig::default();
        cfg.recurrence.hidden = 16;
        assert!(cfg.validate().is_err());
        let mut cfg = NetworkConfig::default();
        cfg.encoder.feature_dim = 64;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn predict_gives_probability_grid() {
        let cfg = NetworkConfig::default();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Network::new(&cfg, &mut store, &mut rng).unwrap();
        let img = Tensor::full([1, 32, 32], 0.5);
        let p = net.predict(&store, &[img.clone(), img]).unwrap();
        assert_eq!(p.shape(), &[16, 16, 16]);
        assert!(p.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(net.predict(&store, &[Tensor::zeros([1, 16, 16])]).is_err());
    }
}
