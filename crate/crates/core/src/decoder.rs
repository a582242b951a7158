//! 3D CNN mapping a hidden grid to two-channel voxel logits.
//!
//! Channel 0 holds the "free" logit, channel 1 the "occupied" logit.

use rand_chacha::ChaCha8Rng;

use crate::encoder::Variant;
use crate::error::{Error, Result};
use crate::layers::{Conv3dLayer, ConvPair, Layer, LEAKY_SLOPE};
use crate::params::{Ctx, ParamStore};
use crate::tensor::{Tensor, Var};

pub const FREE: usize = 0;
pub const OCCUPIED: usize = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub variant: Variant,
    /// Channels of the incoming hidden grid.
    pub in_channels: usize,
    /// Grid extent `N` of the incoming hidden grid.
    pub grid: usize,
    /// Width of each stage. The first `unpool_stages` stages double the
    /// resolution before convolving; later ones run at full resolution.
    pub channels: Vec<usize>,
    pub unpool_stages: usize,
    pub n_vox: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            variant: Variant::Residual,
            in_channels: 32,
            grid: 4,
            channels: vec![16, 8],
            unpool_stages: 2,
            n_vox: 16,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid << self.unpool_stages != self.n_vox {
            return Err(Error::Config(format!(
                "decoder: N * 2^unpool_stages = {} * 2^{} = {} but n_vox = {}",
                self.grid,
                self.unpool_stages,
                self.grid << self.unpool_stages,
                self.n_vox
            )));
        }
        if self.channels.len() < self.unpool_stages {
            return Err(Error::Config(format!(
                "decoder.channels has {} entries but {} unpool stages need one each",
                self.channels.len(),
                self.unpool_stages
            )));
        }
        if self.channels.contains(&0) || self.in_channels == 0 {
            return Err(Error::Config("decoder channel widths must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum Stage {
    Single(Conv3dLayer),
    Pair(ConvPair<Conv3dLayer>),
}

#[derive(Clone, Debug)]
pub struct Decoder {
    cfg: DecoderConfig,
    stages: Vec<Stage>,
    out: Conv3dLayer,
}

impl Decoder {
    pub fn new(cfg: &DecoderConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let mut stages = Vec::with_capacity(cfg.channels.len());
        let mut c_in = cfg.in_channels;
        for (i, &c) in cfg.channels.iter().enumerate() {
            let name = format!("decoder.stage{i}");
            stages.push(match cfg.variant {
                Variant::Shallow => Stage::Single(Conv3dLayer::new(store, rng, &name, c_in, c, 3)?),
                Variant::Residual => Stage::Pair(ConvPair::new_3d(store, rng, &name, c_in, c, true)?),
            });
            c_in = c;
        }
        let out = Conv3dLayer::new(store, rng, "decoder.out", c_in, 2, 3)?;
        Ok(Decoder {
            cfg: cfg.clone(),
            stages,
            out,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.cfg
    }

    /// `h[B, C, N, N, N]` → logits `[B, 2, n_vox, n_vox, n_vox]`.
    pub fn decode(&self, ctx: &mut Ctx<'_>, h: Var) -> Result<Var> {
        let s = ctx.tape.shape(h).to_vec();
        let n = self.cfg.grid;
        let want = [self.cfg.in_channels, n, n, n];
        if s.len() != 5 || s[1..] != want {
            return Err(Error::shape("decode", &s, &want));
        }
        let mut x = h;
        for (i, stage) in self.stages.iter().enumerate() {
            if i < self.cfg.unpool_stages {
                x = ctx.tape.unpool3d(x, 2)?;
            }
            x = match stage {
                Stage::Single(conv) => {
                    let y = conv.forward(ctx, x)?;
                    ctx.tape.leaky_relu(y, LEAKY_SLOPE)?
                }
                Stage::Pair(pair) => pair.forward(ctx, x)?,
            };
        }
        self.out.forward(ctx, x)
    }
}

/// Occupancy probabilities `[B, D, D, D]` from two-channel logits on the tape.
pub fn voxel_softmax_var(ctx: &mut Ctx<'_>, logits: Var) -> Result<Var> {
    let s = ctx.tape.shape(logits);
    if s.len() != 5 || s[1] != 2 {
        return Err(Error::invalid(
            "voxel_softmax",
            format!("expected [B, 2, D, D, D], got {s:?}"),
        ));
    }
    ctx.tape.softmax_channel(logits, OCCUPIED)
}

/// Occupancy probabilities `[B, D, D, D]` from two-channel logits.
pub fn voxel_softmax(logits: &Tensor) -> Result<Tensor> {
    let s = logits.shape();
    if s.len() != 5 || s[1] != 2 {
        return Err(Error::invalid(
            "voxel_softmax",
            format!("expected [B, 2, D, D, D], got {s:?}"),
        ));
    }
    let vol = s[2] * s[3] * s[4];
    let mut out = Vec::with_capacity(s[0] * vol);
    for b in 0..s[0] {
        let free = &logits.data()[(2 * b) * vol..(2 * b + 1) * vol];
        let occ = &logits.data()[(2 * b + 1) * vol..(2 * b + 2) * vol];
        out.extend(free.iter().zip(occ).map(|(&f, &o)| {
            let m = f.max(o);
            let (ef, eo) = ((f - m).exp(), (o - m).exp());
            eo / (ef + eo)
        }));
    }
    Tensor::new([s[0], s[2], s[3], s[4]], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use rand::{Rng, SeedableRng};

    fn build(cfg: &DecoderConfig) -> (Decoder, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dec = Decoder::new(cfg, &mut store, &mut rng).unwrap();
        (dec, store)
    }

    fn output_shape(cfg: &DecoderConfig) -> Vec<usize> {
        let (dec, store) = build(cfg);
        let mut ctx = Ctx::new(&store);
        let n = cfg.grid;
        let h = ctx.tape.constant(Tensor::full([1, cfg.in_channels, n, n, n], 0.3));
        let y = dec.decode(&mut ctx, h).unwrap();
        ctx.tape.shape(y).to_vec()
    }

    #[test]
    fn output_extents() {
        let cfg = DecoderConfig {
            in_channels: 4,
            channels: vec![4, 4],
            ..DecoderConfig::default()
        };
        assert_eq!(output_shape(&cfg), [1, 2, 16, 16, 16]);
        let cfg = DecoderConfig {
            variant: Variant::Shallow,
            channels: vec![2, 2, 2],
            unpool_stages: 3,
            n_vox: 32,
            ..cfg
        };
        assert_eq!(output_shape(&cfg), [1, 2, 32, 32, 32]);
    }

    #[test]
    fn validates_resolution() {
        let cfg = DecoderConfig {
            n_vox: 32,
            ..DecoderConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = DecoderConfig {
            channels: vec![4],
            ..DecoderConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn zero_parameters_give_zero_logits() {
        let cfg = DecoderConfig {
            in_channels: 3,
            grid: 2,
            channels: vec![3],
            unpool_stages: 1,
            n_vox: 4,
            ..DecoderConfig::default()
        };
        let (dec, mut store) = build(&cfg);
        for (id, p) in store.clone().iter() {
            store.set(id, Tensor::zeros(p.value.shape().to_vec())).unwrap();
        }
        let mut ctx = Ctx::new(&store);
        let h = ctx.tape.constant(Tensor::full([1, 3, 2, 2, 2], 0.7));
        let y = dec.decode(&mut ctx, h).unwrap();
        assert!(ctx.tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_wrong_grid() {
        let (dec, store) = build(&DecoderConfig::default());
        let mut ctx = Ctx::new(&store);
        let h = ctx.tape.constant(Tensor::zeros([1, 32, 2, 2, 2]));
        assert!(dec.decode(&mut ctx, h).is_err());
    }

    #[test]
    fn softmax_examples() {
        let eq = Tensor::full([1, 2, 2, 2, 2], 1.5);
        assert!(voxel_softmax(&eq).unwrap().data().iter().all(|&p| p == 0.5));
        let mut l = Tensor::zeros([1, 2, 1, 1, 1]);
        l.data_mut()[1] = 3f64.ln();
        assert!((voxel_softmax(&l).unwrap().data()[0] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_matches_tape_and_sigmoid() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let l = Tensor::from_fn([2, 2, 2, 2, 2], |_| rng.gen_range(-30.0..30.0));
        let p = voxel_softmax(&l).unwrap();
        let store = ParamStore::new();
        let mut ctx = Ctx::new(&store);
        let v = ctx.tape.constant(l.clone());
        let q = voxel_softmax_var(&mut ctx, v).unwrap();
        assert!(p.max_abs_diff(ctx.tape.value(q)) < 1e-15);
        for b in 0..2 {
            for c in 0..8 {
                let d = l.data()[(2 * b + 1) * 8 + c] - l.data()[2 * b * 8 + c];
                let sig = 1.0 / (1.0 + (-d).exp());
                assert!((p.data()[b * 8 + c] - sig).abs() < 1e-12);
            }
        }
    }
}
