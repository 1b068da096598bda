//! Decoupled forward process and the dual-head denoiser.
//!
//! The clean image attenuates linearly while noise grows linearly:
//! `x_t = (1 - t) x0 + t eps`, whose constant image component is `C = -x0`.

use autodiff::{Element, Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::nn::{Builder, Conv, FilmResBlock, Norm, ParamStore, Params, TimeMlp};

pub fn check_time(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::TimeOutOfRange(t))
    }
}

/// The image component of the constant-rate attenuation path.
pub fn true_component<T: Element>(x0: &Tensor<T>) -> Tensor<T> {
    x0.map(|v| -v)
}

/// `(1 - t) x0 + t eps`.
pub fn forward_diffuse<T: Element>(x0: &Tensor<T>, t: f64, eps: &Tensor<T>) -> Result<Tensor<T>> {
    check_time(t)?;
    let (a, b) = (T::from_f64_lossy(1.0 - t), T::from_f64_lossy(t));
    Ok(x0.zip_map(eps, |x, e| a * x + b * e)?)
}

/// [`forward_diffuse`] over a batch `[B, ...]` with one time per sample.
pub fn forward_diffuse_batch<T: Element>(x0: &Tensor<T>, t: &[f64], eps: &Tensor<T>) -> Result<Tensor<T>> {
    if x0.shape() != eps.shape() {
        return Err(Error::Shape {
            expected: x0.shape().to_vec(),
            got: eps.shape().to_vec(),
        });
    }
    let b = x0.shape()[0];
    if t.len() != b {
        return Err(Error::InvalidArgument(format!("{} times for batch of {b}", t.len())));
    }
    let per = x0.numel() / b;
    let mut out = Vec::with_capacity(x0.numel());
    for (i, &ti) in t.iter().enumerate() {
        check_time(ti)?;
        let (a, c) = (T::from_f64_lossy(1.0 - ti), T::from_f64_lossy(ti));
        let r = i * per..(i + 1) * per;
        out.extend(
            x0.data()[r.clone()]
                .iter()
                .zip(&eps.data()[r])
                .map(|(&x, &e)| a * x + c * e),
        );
    }
    Ok(Tensor::new(x0.shape().to_vec(), out)?)
}

/// Denoiser architecture sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenoiserConfig {
    pub channels: usize,
    pub size: usize,
    pub width: usize,
    pub time_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            channels: 1,
            size: 32,
            width: 32,
            time_dim: 64,
        }
    }
}

/// Predicted image component and noise for a batch.
#[derive(Debug, Clone, Copy)]
pub struct ComponentPair<'t, T: Element> {
    pub c: Var<'t, T>,
    pub eps: Var<'t, T>,
}

#[derive(Debug, Clone)]
struct Decoder {
    up: Conv,
    block: FilmResBlock,
    norm: Norm,
    out: Conv,
}

impl Decoder {
    fn new<T: Element>(bld: &mut Builder<'_, T>, name: &str, cfg: &DenoiserConfig) -> Self {
        let w = cfg.width;
        bld.scope(name, |bld| Decoder {
            up: Conv::same(bld, "up", 2 * w, w, 3),
            block: FilmResBlock::new(bld, "block", 2 * w, w, Some(cfg.time_dim)),
            norm: Norm::new(bld, "norm", w),
            out: Conv::same(bld, "out", w, cfg.channels, 3),
        })
    }

    fn fwd<'t, T: Element>(
        &self,
        p: Params<'_, 't, T>,
        deep: Var<'t, T>,
        skip: Var<'t, T>,
        temb: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let u = self.up.fwd(p, deep.upsample2x()?)?;
        let h = self.block.fwd(p, Var::concat(&[u, skip], 1)?, Some(temb))?;
        self.out.fwd(p, self.norm.fwd(p, h)?.silu()?)
    }
}

/// Two-level U-Net with a shared encoder and separate component and noise
/// decoders.
#[derive(Debug, Clone)]
pub struct DenoiserNet<T: Element> {
    pub cfg: DenoiserConfig,
    pub params: ParamStore<T>,
    time: TimeMlp,
    conv_in: Conv,
    enc_hi: FilmResBlock,
    down: Conv,
    enc_lo: FilmResBlock,
    dec_c: Decoder,
    dec_eps: Decoder,
}

impl<T: Element> DenoiserNet<T> {
    pub fn new(cfg: DenoiserConfig, seed: u64) -> Result<Self> {
        if cfg.size < 4 || !cfg.size.is_multiple_of(2) || cfg.width == 0 || cfg.time_dim < 2 {
            return Err(Error::Config(format!("unsupported denoiser shape {cfg:?}")));
        }
        let mut params = ParamStore::default();
        let mut bld = Builder::new(&mut params, seed);
        let w = cfg.width;
        let time = TimeMlp::new(&mut bld, "time", cfg.time_dim);
        let conv_in = Conv::same(&mut bld, "conv_in", cfg.channels, w, 3);
        let enc_hi = FilmResBlock::new(&mut bld, "enc_hi", w, w, Some(cfg.time_dim));
        let down = Conv::new(&mut bld, "down", w, 2 * w, 3, 2, 1);
        let enc_lo = FilmResBlock::new(&mut bld, "enc_lo", 2 * w, 2 * w, Some(cfg.time_dim));
        let dec_c = Decoder::new(&mut bld, "dec_c", &cfg);
        let dec_eps = Decoder::new(&mut bld, "dec_eps", &cfg);
        Ok(DenoiserNet {
            cfg,
            params,
            time,
            conv_in,
            enc_hi,
            down,
            enc_lo,
            dec_c,
            dec_eps,
        })
    }

    pub fn image_shape(&self, batch: usize) -> Vec<usize> {
        vec![batch, self.cfg.channels, self.cfg.size, self.cfg.size]
    }

    fn check_input(&self, shape: &[usize], t: &[f64]) -> Result<()> {
        let expected = self.image_shape(t.len());
        if shape != expected {
            return Err(Error::Shape {
                expected,
                got: shape.to_vec(),
            });
        }
        t.iter().try_for_each(|&ti| check_time(ti))
    }

    /// Differentiable forward pass with `p` bound from `self.params`.
    pub fn forward<'t>(&self, p: Params<'_, 't, T>, x_t: Var<'t, T>, t: &[f64]) -> Result<ComponentPair<'t, T>> {
        self.check_input(&x_t.shape(), t)?;
        let temb = self.time.fwd(p, x_t.tape(), t)?;
        let h0 = self.conv_in.fwd(p, x_t)?;
        let hi = self.enc_hi.fwd(p, h0, Some(temb))?;
        let lo = self.enc_lo.fwd(p, self.down.fwd(p, hi)?, Some(temb))?;
        Ok(ComponentPair {
            c: self.dec_c.fwd(p, lo, hi, temb)?,
            eps: self.dec_eps.fwd(p, lo, hi, temb)?,
        })
    }

    /// Evaluate without recording gradients; returns `(C, eps)`.
    pub fn denoise(&self, x_t: &Tensor<T>, t: &[f64]) -> Result<(Tensor<T>, Tensor<T>)> {
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let x = tape.constant(x_t.clone());
        let out = self.forward(&p, x, t)?;
        Ok((out.c.to_tensor(), out.eps.to_tensor()))
    }
}
