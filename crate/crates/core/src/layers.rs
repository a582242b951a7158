//! Differentiable building blocks: convolutions, pooling, unpooling,
//! fully-connected layers and two-convolution residual pairs.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{Ctx, ParamId, ParamStore};
use crate::tensor::{Tensor, Var};

/// Leak slope used by every LeakyReLU in the network.
pub const LEAKY_SLOPE: f64 = 0.1;

pub trait Layer {
    fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var>;
}

/// 2D convolution, weights `[outC, inC, k, k]`, bias `[outC]`.
#[derive(Clone, Debug)]
pub struct Conv2dLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        Conv2dLayer {
            weight: store.add_uniform(
                format!("{name}.weight"),
                &[out_channels, in_channels, kernel, kernel],
                fan_in,
                rng,
            ),
            bias: store.add_zeros(format!("{name}.bias"), &[out_channels]),
            stride,
            padding,
        }
    }
}

impl Layer for Conv2dLayer {
    fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let (w, b) = (ctx.p(self.weight), ctx.p(self.bias));
        ctx.tape.conv2d(x, w, Some(b), self.stride, self.padding)
    }
}

/// Extent-preserving 3D convolution, weights `[outC, inC, k, k, k]`.
#[derive(Clone, Debug)]
pub struct Conv3dLayer {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Conv3dLayer {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
    ) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(Error::invalid("conv3d", format!("kernel {kernel} must be odd")));
        }
        let fan_in = in_channels * kernel.pow(3);
        Ok(Conv3dLayer {
            weight: store.add_uniform(
                format!("{name}.weight"),
                &[out_channels, in_channels, kernel, kernel, kernel],
                fan_in,
                rng,
            ),
            bias: Some(store.add_zeros(format!("{name}.bias"), &[out_channels])),
        })
    }
}

impl Layer for Conv3dLayer {
    fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let w = ctx.p(self.weight);
        let b = self.bias.map(|b| ctx.p(b));
        ctx.tape.conv3d(x, w, b)
    }
}

/// Fully-connected layer, weights `[out, in]`.
#[derive(Clone, Debug)]
pub struct LinearLayer {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl LinearLayer {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, inputs: usize, outputs: usize) -> Self {
        LinearLayer {
            weight: store.add_uniform(format!("{name}.weight"), &[outputs, inputs], inputs, rng),
            bias: store.add_zeros(format!("{name}.bias"), &[outputs]),
        }
    }
}

impl Layer for LinearLayer {
    fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let (w, b) = (ctx.p(self.weight), ctx.p(self.bias));
        ctx.tape.linear(x, w, Some(b))
    }
}

/// Skip path of a [`ConvPair`].
#[derive(Clone, Debug)]
pub enum Shortcut<L> {
    /// Plain pair, no skip connection.
    None,
    Identity,
    /// 1×1 (×1) convolution matching the channel count.
    Projection(L),
}

/// Two convolution + LeakyReLU stages, optionally with a residual skip:
/// `out = F(x) + P(x)`.
#[derive(Clone, Debug)]
pub struct ConvPair<L> {
    pub first: L,
    pub second: L,
    pub shortcut: Shortcut<L>,
}

impl ConvPair<Conv2dLayer> {
    /// 3×3 pair; `residual` selects identity or 1×1 projection skip.
    pub fn new_2d(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        residual: bool,
    ) -> Self {
        let first = Conv2dLayer::new(store, rng, &format!("{name}.a"), in_channels, out_channels, 3, 1, 1);
        let second = Conv2dLayer::new(store, rng, &format!("{name}.b"), out_channels, out_channels, 3, 1, 1);
        let shortcut = match (residual, in_channels == out_channels) {
            (false, _) => Shortcut::None,
            (true, true) => Shortcut::Identity,
            (true, false) => Shortcut::Projection(Conv2dLayer::new(
                store,
                rng,
                &format!("{name}.proj"),
                in_channels,
                out_channels,
                1,
                1,
                0,
            )),
        };
        ConvPair {
            first,
            second,
            shortcut,
        }
    }
}

impl ConvPair<Conv3dLayer> {
    pub fn new_3d(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        residual: bool,
    ) -> Result<Self> {
        let first = Conv3dLayer::new(store, rng, &format!("{name}.a"), in_channels, out_channels, 3)?;
        let second = Conv3dLayer::new(store, rng, &format!("{name}.b"), out_channels, out_channels, 3)?;
        let shortcut = match (residual, in_channels == out_channels) {
            (false, _) => Shortcut::None,
            (true, true) => Shortcut::Identity,
            (true, false) => Shortcut::Projection(Conv3dLayer::new(
                store,
                rng,
                &format!("{name}.proj"),
                in_channels,
                out_channels,
                1,
            )?),
        };
        Ok(ConvPair {
            first,
            second,
            shortcut,
        })
    }
}

impl<L: Layer> Layer for ConvPair<L> {
    fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let h = self.first.forward(ctx, x)?;
        let h = ctx.tape.leaky_relu(h, LEAKY_SLOPE)?;
        let h = self.second.forward(ctx, h)?;
        let f = ctx.tape.leaky_relu(h, LEAKY_SLOPE)?;
        match &self.shortcut {
            Shortcut::None => Ok(f),
            Shortcut::Identity => ctx.tape.add(f, x),
            Shortcut::Projection(p) => {
                let px = p.forward(ctx, x)?;
                ctx.tape.add(f, px)
            }
        }
    }
}

/// Non-differentiable mean pooling of `x[B,C,D,H,W]` over `factor³` blocks.
pub fn avgpool3d(x: &Tensor, factor: usize) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 5 || factor == 0 || s[2..].iter().any(|d| d % factor != 0) {
        return Err(Error::invalid(
            "avgpool3d",
            format!("shape {s:?} not divisible by factor {factor}"),
        ));
    }
    let (d, h, w) = (s[2] / factor, s[3] / factor, s[4] / factor);
    let mut out = Tensor::zeros([s[0], s[1], d, h, w]);
    let norm = (factor * factor * factor) as f64;
    for p in 0..s[0] * s[1] {
        for z in 0..s[2] {
            for y in 0..s[3] {
                for xx in 0..s[4] {
                    let v = x.data()[((p * s[2] + z) * s[3] + y) * s[4] + xx];
                    out.data_mut()[((p * d + z / factor) * h + y / factor) * w + xx / factor] += v / norm;
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::gradcheck_params;
    use crate::tensor::{gradcheck, Tape};
    use rand::{Rng, SeedableRng};

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn conv2d_unit_kernel_is_identity() {
        let mut tape = Tape::new();
        let x = rand_tensor(&[2, 1, 5, 4], 1);
        let xv = tape.constant(x.clone());
        let w = tape.constant(Tensor::ones([1, 1, 1, 1]));
        let b = tape.constant(Tensor::zeros([1]));
        let y = tape.conv2d(xv, w, Some(b), 1, 0).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn conv2d_all_ones_sums_to_nine() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones([1, 1, 3, 3]));
        let w = tape.constant(Tensor::ones([1, 1, 3, 3]));
        let y = tape.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[9.0]);
    }

    #[test]
    fn conv2d_output_extent_formula() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones([1, 2, 9, 9]));
        let w = tape.constant(Tensor::ones([3, 2, 3, 3]));
        let y = tape.conv2d(x, w, None, 2, 1).unwrap();
        // floor((9 + 2 - 3) / 2) + 1 = 5
        assert_eq!(tape.shape(y), &[1, 3, 5, 5]);
    }

    #[test]
    fn conv2d_rejects_oversized_kernel() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones([1, 1, 2, 2]));
        let w = tape.constant(Tensor::ones([1, 1, 3, 3]));
        assert!(tape.conv2d(x, w, None, 1, 0).is_err());
    }

    #[test]
    fn conv3d_identity_channel_mix() {
        let mut tape = Tape::new();
        let x = rand_tensor(&[1, 3, 4, 4, 4], 2);
        let xv = tape.constant(x.clone());
        let w = Tensor::from_fn([3, 3, 1, 1, 1], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
        let wv = tape.constant(w);
        let y = tape.conv3d(xv, wv, None).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn conv3d_center_of_ones_is_27() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones([1, 1, 4, 4, 4]));
        let w = tape.constant(Tensor::ones([1, 1, 3, 3, 3]));
        let y = tape.conv3d(x, w, None).unwrap();
        let yv = tape.value(y);
        assert_eq!(yv.shape(), &[1, 1, 4, 4, 4]);
        assert_eq!(yv.at(&[0, 0, 1, 1, 1]), 27.0);
        assert_eq!(yv.at(&[0, 0, 1, 2, 2]), 27.0);
        assert_eq!(yv.at(&[0, 0, 0, 0, 0]), 8.0);
    }

    #[test]
    fn conv3d_rejects_even_kernel() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones([1, 1, 4, 4, 4]));
        let w = tape.constant(Tensor::ones([1, 1, 2, 2, 2]));
        assert!(tape.conv3d(x, w, None).is_err());
    }

    #[test]
    fn conv3d_k3_locality() {
        let base = rand_tensor(&[1, 1, 4, 4, 4], 3);
        let w = rand_tensor(&[1, 1, 3, 3, 3], 4);
        let run = |x: &Tensor| {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let wv = tape.constant(w.clone());
            let y = tape.conv3d(xv, wv, None).unwrap();
            tape.value(y).clone()
        };
        let y0 = run(&base);
        let mut pert = base.clone();
        pert.data_mut()[0] += 1.0;
        let y1 = run(&pert);
        assert_eq!(y0.at(&[0, 0, 3, 3, 3]), y1.at(&[0, 0, 3, 3, 3]));
        assert_ne!(y0.at(&[0, 0, 1, 1, 1]), y1.at(&[0, 0, 1, 1, 1]));
    }

    #[test]
    fn conv3d_k1_commutes_with_cell_permutation() {
        let x = rand_tensor(&[1, 2, 2, 2, 2], 5);
        let w = rand_tensor(&[3, 2, 1, 1, 1], 6);
        let perm = [5usize, 2, 7, 0, 1, 6, 3, 4];
        let permute = |t: &Tensor, c: usize| {
            let mut out = t.clone();
            for ch in 0..c {
                for (dst, &src) in perm.iter().enumerate() {
                    out.data_mut()[ch * 8 + dst] = t.data()[ch * 8 + src];
                }
            }
            out
        };
        let run = |x: &Tensor| {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let wv = tape.constant(w.clone());
            let y = tape.conv3d(xv, wv, None).unwrap();
            tape.value(y).clone()
        };
        assert_eq!(run(&permute(&x, 2)), permute(&run(&x), 3));
    }

    #[test]
    fn maxpool_picks_max_and_first_on_ties() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = tape.maxpool2d(x, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);

        let mut tape = Tape::new();
        let x = tape.variable(Tensor::full([1, 1, 4, 4], 2.5));
        let y = tape.maxpool2d(x, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[2.5; 4]);
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        let gx = g.get(x).unwrap();
        let expected: Vec<f64> = (0..16)
            .map(|i| if (i / 4) % 2 == 0 && i % 2 == 0 { 1.0 } else { 0.0 })
            .collect();
        assert_eq!(gx.data(), expected.as_slice());
    }

    #[test]
    fn maxpool_rejects_indivisible_extent() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones([1, 1, 3, 4]));
        assert!(tape.maxpool2d(x, 2).is_err());
    }

    #[test]
    fn maxpool_gradcheck() {
        // distinct values, so no ties within h of each other
        let x = Tensor::from_fn([1, 2, 4, 4], |i| ((i * 29) % 32) as f64 * 0.1 - 1.3);
        let r = gradcheck(&[x], 1e-5, None, |t, v| t.maxpool2d(v[0], 2)).unwrap();
        assert!(r.passes(1e-4), "{r:?}");
    }

    #[test]
    fn unpool_corner_placement() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full([1, 1, 1, 1, 1], 3.5));
        let y = tape.unpool3d(x, 2).unwrap();
        let yv = tape.value(y);
        assert_eq!(yv.shape(), &[1, 1, 2, 2, 2]);
        assert_eq!(yv.data()[0], 3.5);
        assert!(yv.data()[1..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unpool_preserves_sum_and_inverts_avgpool() {
        let x = rand_tensor(&[2, 3, 2, 3, 2], 7);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = tape.unpool3d(xv, 2).unwrap();
        let yv = tape.value(y).clone();
        assert!((yv.sum() - x.sum()).abs() < 1e-12);
        let back = avgpool3d(&yv, 2).unwrap();
        assert!(back.max_abs_diff(&x.map(|v| v / 8.0)) < 1e-15);
        // strided slicing at even indices recovers the input
        let [b, c, d, h, w] = [2, 3, 2, 3, 2];
        for i in 0..b * c {
            for z in 0..d {
                for r in 0..h {
                    for q in 0..w {
                        assert_eq!(
                            yv.data()[((i * 2 * d + 2 * z) * 2 * h + 2 * r) * 2 * w + 2 * q],
                            x.data()[((i * d + z) * h + r) * w + q]
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn unpool_rejects_factor_one() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones([1, 1, 1, 1, 1]));
        assert!(tape.unpool3d(x, 1).is_err());
    }

    #[test]
    fn linear_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new([1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let eye = Tensor::from_fn([3, 3], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
        let w = tape.constant(eye);
        let b = tape.constant(Tensor::zeros([3]));
        let y = tape.linear(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0]);

        let w = tape.constant(Tensor::ones([2, 3]));
        let b = tape.constant(Tensor::new([2], vec![0.5, -1.0]).unwrap());
        let y = tape.linear(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y).data(), &[6.5, 5.0]);

        let bad = tape.constant(Tensor::ones([2, 4]));
        assert!(tape.linear(x, bad, None).is_err());
    }

    #[test]
    fn layer_gradchecks() {
        let x2 = rand_tensor(&[2, 2, 5, 5], 10);
        let w2 = rand_tensor(&[3, 2, 3, 3], 11);
        let b2 = rand_tensor(&[3], 12);
        let r = gradcheck(&[x2, w2, b2], 1e-5, None, |t, v| t.conv2d(v[0], v[1], Some(v[2]), 2, 1)).unwrap();
        assert!(r.passes(1e-4), "conv2d {r:?}");

        let x3 = rand_tensor(&[1, 2, 3, 3, 3], 13);
        let w3 = rand_tensor(&[2, 2, 3, 3, 3], 14);
        let b3 = rand_tensor(&[2], 15);
        let r = gradcheck(&[x3, w3, b3], 1e-5, None, |t, v| t.conv3d(v[0], v[1], Some(v[2]))).unwrap();
        assert!(r.passes(1e-4), "conv3d {r:?}");

        let x = rand_tensor(&[3, 4], 16);
        let w = rand_tensor(&[2, 4], 17);
        let b = rand_tensor(&[2], 18);
        let r = gradcheck(&[x, w, b], 1e-5, None, |t, v| t.linear(v[0], v[1], Some(v[2]))).unwrap();
        assert!(r.passes(1e-4), "linear {r:?}");

        let x = rand_tensor(&[1, 2, 2, 1, 2], 19);
        let r = gradcheck(&[x], 1e-5, None, |t, v| t.unpool3d(v[0], 2)).unwrap();
        assert!(r.passes(1e-4), "unpool {r:?}");
    }

    #[test]
    fn residual_pair_zero_weights_is_identity() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pair = ConvPair::new_2d(&mut store, &mut rng, "res", 4, 4, true);
        assert!(matches!(pair.shortcut, Shortcut::Identity));
        for (id, p) in store.clone().iter() {
            store.set(id, Tensor::zeros(p.value.shape().to_vec())).unwrap();
        }
        let x = rand_tensor(&[1, 4, 6, 6], 20);
        let mut ctx = Ctx::new(&store);
        let xv = ctx.tape.constant(x.clone());
        let y = pair.forward(&mut ctx, xv).unwrap();
        assert_eq!(ctx.tape.value(y), &x);
    }

    #[test]
    fn residual_pair_projects_on_channel_change() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pair = ConvPair::new_2d(&mut store, &mut rng, "res", 8, 16, true);
        match &pair.shortcut {
            Shortcut::Projection(p) => {
                assert_eq!(store.get(p.weight).shape(), &[16, 8, 1, 1]);
            }
            other => panic!("expected projection, got {other:?}"),
        }
    }

    #[test]
    fn residual_pair_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut store = ParamStore::new();
        let pair = ConvPair::new_2d(&mut store, &mut rng, "res", 2, 3, true);
        for (id, _) in store.clone().iter() {
            store.data_mut(id).iter_mut().for_each(|v| *v += 0.05);
        }
        let x = rand_tensor(&[1, 2, 4, 4], 22);
        let r = gradcheck_params(&store, &[x], 1e-5, None, |ctx, v| pair.forward(ctx, v[0])).unwrap();
        assert!(r.passes(1e-4), "{r:?}");
    }
}
