//! 2D CNN mapping an image to a flat feature vector.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{Conv2dLayer, ConvPair, Layer, LinearLayer, LEAKY_SLOPE};
use crate::params::{Ctx, ParamStore};
use crate::tensor::Var;

/// Plain feed-forward or residual network body.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Shallow,
    Residual,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Shallow => "shallow",
            Variant::Residual => "residual",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "shallow" | "simple" => Some(Variant::Shallow),
            "residual" => Some(Variant::Residual),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub variant: Variant,
    /// Square input extent in pixels.
    pub input_size: usize,
    pub in_channels: usize,
    /// Width of each stage; every stage ends with a 2×2 max-pool.
    pub channels: Vec<usize>,
    pub feature_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            variant: Variant::Residual,
            input_size: 32,
            in_channels: 1,
            channels: vec![8, 16, 32],
            feature_dim: 128,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::Config("encoder.channels must be nonempty and positive".into()));
        }
        if self.feature_dim == 0 || self.in_channels == 0 {
            return Err(Error::Config("encoder feature_dim and in_channels must be >= 1".into()));
        }
        let div = 1usize << self.channels.len();
        if self.input_size == 0 || !self.input_size.is_multiple_of(div) {
            return Err(Error::Config(format!(
                "encoder.input_size {} must be a positive multiple of 2^{} (one halving per stage)",
                self.input_size,
                self.channels.len()
            )));
        }
        Ok(())
    }

    /// Spatial extent after the last pooling stage.
    pub fn final_extent(&self) -> usize {
        self.input_size >> self.channels.len()
    }
}

#[derive(Clone, Debug)]
enum Stage {
    Single(Conv2dLayer),
    Pair(ConvPair<Conv2dLayer>),
}

#[derive(Clone, Debug)]
pub struct Encoder {
    cfg: EncoderConfig,
    stages: Vec<Stage>,
    fc: LinearLayer,
}

impl Encoder {
    pub fn new(cfg: &EncoderConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let mut stages = Vec::with_capacity(cfg.channels.len());
        let mut c_in = cfg.in_channels;
        for (i, &c) in cfg.channels.iter().enumerate() {
            let name = format!("encoder.stage{i}");
            stages.push(match cfg.variant {
                Variant::Shallow => Stage::Single(Conv2dLayer::new(store, rng, &name, c_in, c, 3, 1, 1)),
                // the fourth pair carries no skip connection
                Variant::Residual => Stage::Pair(ConvPair::new_2d(store, rng, &name, c_in, c, i != 3)),
            });
            c_in = c;
        }
        let e = cfg.final_extent();
        let fc = LinearLayer::new(store, rng, "encoder.fc", c_in * e * e, cfg.feature_dim);
        Ok(Encoder {
            cfg: cfg.clone(),
            stages,
            fc,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// `images[B, C, H, W]` → `features[B, feature_dim]`.
    pub fn encode(&self, ctx: &mut Ctx<'_>, images: Var) -> Result<Var> {
        let s = ctx.tape.shape(images).to_vec();
        let want = [self.cfg.in_channels, self.cfg.input_size, self.cfg.input_size];
        if s.len() != 4 || s[1..] != want {
            return Err(Error::shape("encode", &s, &want));
        }
        let mut x = images;
        for stage in &self.stages {
            x = match stage {
                Stage::Single(conv) => {
                    let y = conv.forward(ctx, x)?;
                    ctx.tape.leaky_relu(y, LEAKY_SLOPE)?
                }
                Stage::Pair(pair) => pair.forward(ctx, x)?,
            };
            x = ctx.tape.maxpool2d(x, 2)?;
        }
        let flat_len: usize = ctx.tape.shape(x)[1..].iter().product();
        let flat = ctx.tape.reshape(x, &[s[0], flat_len])?;
        let y = self.fc.forward(ctx, flat)?;
        ctx.tape.leaky_relu(y, LEAKY_SLOPE)
    }
}
