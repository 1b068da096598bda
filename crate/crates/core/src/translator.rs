//! Time-conditioned component translators and patch discriminators.

use autodiff::{Element, Tape, Tensor, Var};

use crate::diffusion::check_time;
use crate::error::{Error, Result};
use crate::nn::{Attention, Builder, Conv, FilmResBlock, Norm, ParamStore, Params, ResBlock, TimeMlp};

/// Translator depth: down-sampling, residual and up-sampling block counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Depth {
    pub n_down: usize,
    pub n_res: usize,
    pub n_up: usize,
}

impl Depth {
    pub const DESK: Depth = Depth {
        n_down: 2,
        n_res: 6,
        n_up: 2,
    };
    pub const PAPER: Depth = Depth {
        n_down: 3,
        n_res: 12,
        n_up: 3,
    };

    pub fn preset(name: &str) -> Option<Depth> {
        match name {
            "desk" => Some(Self::DESK),
            "paper" => Some(Self::PAPER),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TranslatorConfig {
    pub channels: usize,
    pub size: usize,
    /// Feature width of the first stage; doubles at every down-sampling.
    pub ngf: usize,
    pub depth: Depth,
    pub time_dim: usize,
    pub heads: usize,
    /// Token pooling factor of the self-attention layer.
    pub attn_pool: usize,
    /// `false` drops the time block (embedding, FiLM and attention) and
    /// feeds the encoder-decoder through a plain input convolution.
    pub time_conditioned: bool,
}

impl Default for TranslatorConfig {
    fn default() -> Self {
        TranslatorConfig {
            channels: 1,
            size: 32,
            ngf: 16,
            depth: Depth::DESK,
            time_dim: 64,
            heads: 4,
            attn_pool: 2,
            time_conditioned: true,
        }
    }
}

/// Kernel size of the output convolution.
pub const OUT_KERNEL: usize = 7;

/// Input stage: the time block, or a plain convolution without it.
#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
enum Head {
    Timed {
        time: TimeMlp,
        stem: FilmResBlock,
        attn: Attention,
    },
    Plain {
        conv: Conv,
        norm: Norm,
    },
}

#[derive(Debug, Clone)]
pub struct TranslatorNet<T: Element> {
    pub cfg: TranslatorConfig,
    pub params: ParamStore<T>,
    head: Head,
    down: Vec<(Conv, Norm)>,
    trunk: Vec<ResBlock>,
    up: Vec<(Conv, Norm)>,
    out: Conv,
}

impl<T: Element> TranslatorNet<T> {
    pub fn new(cfg: TranslatorConfig, seed: u64) -> Result<Self> {
        let Depth { n_down, n_res, n_up } = cfg.depth;
        if n_down != n_up {
            return Err(Error::Config(format!("n_down ({n_down}) must equal n_up ({n_up})")));
        }
        let pool_ok = cfg.attn_pool.is_power_of_two() && cfg.size.is_multiple_of(cfg.attn_pool);
        if !cfg.size.is_multiple_of(1 << n_down) || cfg.heads == 0 || !cfg.ngf.is_multiple_of(cfg.heads) || !pool_ok {
            return Err(Error::Config(format!("unsupported translator shape {cfg:?}")));
        }
        let mut params = ParamStore::default();
        let mut bld = Builder::new(&mut params, seed);
        let ngf = cfg.ngf;
        let head = if cfg.time_conditioned {
            Head::Timed {
                time: TimeMlp::new(&mut bld, "time", cfg.time_dim),
                stem: FilmResBlock::new(&mut bld, "stem", cfg.channels, ngf, Some(cfg.time_dim)),
                attn: Attention::new(&mut bld, "attn", ngf, cfg.heads, cfg.attn_pool),
            }
        } else {
            Head::Plain {
                conv: Conv::same(&mut bld, "in", cfg.channels, ngf, OUT_KERNEL),
                norm: Norm::new(&mut bld, "in_norm", ngf),
            }
        };
        let down = (0..n_down)
            .map(|i| {
                let (cin, cout) = (ngf << i, ngf << (i + 1));
                bld.scope(&format!("down{i}"), |b| {
                    (Conv::new(b, "conv", cin, cout, 3, 2, 1), Norm::new(b, "norm", cout))
                })
            })
            .collect();
        let deep = ngf << n_down;
        let trunk = (0..n_res)
            .map(|i| ResBlock::new(&mut bld, &format!("res{i}"), deep))
            .collect();
        let up = (0..n_up)
            .map(|i| {
                let (cin, cout) = (deep >> i, deep >> (i + 1));
                bld.scope(&format!("up{i}"), |b| {
                    (Conv::same(b, "conv", cin, cout, 3), Norm::new(b, "norm", cout))
                })
            })
            .collect();
        let out = Conv::same(&mut bld, "out", ngf, cfg.channels, OUT_KERNEL);
        Ok(TranslatorNet {
            cfg,
            params,
            head,
            down,
            trunk,
            up,
            out,
        })
    }

    pub fn depth(&self) -> Depth {
        self.cfg.depth
    }

    /// Time embedding `[len(t), time_dim]`; `None` for an unconditioned net.
    pub fn time_embed<'t>(&self, p: Params<'_, 't, T>, tape: &'t Tape<T>, t: &[f64]) -> Result<Option<Var<'t, T>>> {
        t.iter().try_for_each(|&ti| check_time(ti))?;
        match &self.head {
            Head::Timed { time, .. } => Ok(Some(time.fwd(p, tape, t)?)),
            Head::Plain { .. } => Ok(None),
        }
    }

    fn check_input(&self, shape: &[usize], t: &[f64]) -> Result<()> {
        let expected = vec![t.len(), self.cfg.channels, self.cfg.size, self.cfg.size];
        if shape != expected {
            return Err(Error::Shape {
                expected,
                got: shape.to_vec(),
            });
        }
        Ok(())
    }

    /// Translate a batch of components `[B, C, H, W]`, one time per sample.
    pub fn forward<'t>(&self, p: Params<'_, 't, T>, c: Var<'t, T>, t: &[f64]) -> Result<Var<'t, T>> {
        self.check_input(&c.shape(), t)?;
        let temb = self.time_embed(p, c.tape(), t)?;
        let mut h = match &self.head {
            Head::Timed { stem, attn, .. } => attn.fwd(p, stem.fwd(p, c, temb)?)?,
            Head::Plain { conv, norm } => norm.fwd(p, conv.fwd(p, c)?)?.relu()?,
        };
        for (conv, norm) in &self.down {
            h = norm.fwd(p, conv.fwd(p, h)?)?.relu()?;
        }
        for block in &self.trunk {
            h = block.fwd(p, h)?;
        }
        for (conv, norm) in &self.up {
            h = norm.fwd(p, conv.fwd(p, h.upsample2x()?)?)?.relu()?;
        }
        self.out.fwd(p, h)
    }

    /// Evaluate without recording gradients.
    pub fn translate(&self, c: &Tensor<T>, t: &[f64]) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        Ok(self.forward(&p, tape.constant(c.clone()), t)?.to_tensor())
    }
}

/// `F(G(c, t), t)` on bound parameters.
pub fn cycle<'t, T: Element>(
    f: (&TranslatorNet<T>, Params<'_, 't, T>),
    g: (&TranslatorNet<T>, Params<'_, 't, T>),
    c: Var<'t, T>,
    t: &[f64],
) -> Result<Var<'t, T>> {
    let there = g.0.forward(g.1, c, t)?;
    f.0.forward(f.1, there, t)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DiscriminatorConfig {
    pub channels: usize,
    pub ndf: usize,
    /// Channels of the output patch map; the contrastive vector dimension.
    pub out_dim: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            channels: 1,
            ndf: 16,
            out_dim: 7,
        }
    }
}

const DISC_LAYERS: usize = 3;

/// Strided convolution stack emitting an `out_dim`-channel patch map.
#[derive(Debug, Clone)]
pub struct PatchDiscriminator<T: Element> {
    pub cfg: DiscriminatorConfig,
    pub params: ParamStore<T>,
    layers: Vec<(Conv, Option<Norm>)>,
    head: Conv,
}

impl<T: Element> PatchDiscriminator<T> {
    pub fn new(cfg: DiscriminatorConfig, seed: u64) -> Self {
        let mut params = ParamStore::default();
        let mut bld = Builder::new(&mut params, seed);
        let mut cin = cfg.channels;
        let mut layers = Vec::new();
        for i in 0..DISC_LAYERS {
            let cout = cfg.ndf << i;
            layers.push(bld.scope(&format!("l{i}"), |b| {
                (
                    Conv::new(b, "conv", cin, cout, 4, 2, 1),
                    (i > 0).then(|| Norm::new(b, "norm", cout)),
                )
            }));
            cin = cout;
        }
        let head = Conv::same(&mut bld, "head", cin, cfg.out_dim, 3);
        PatchDiscriminator {
            cfg,
            params,
            layers,
            head,
        }
    }

    /// Smallest accepted spatial size.
    pub fn min_size() -> usize {
        1 << DISC_LAYERS
    }

    /// Spatial size of the patch map for a given input size.
    pub fn map_size(size: usize) -> usize {
        size >> DISC_LAYERS
    }

    pub fn forward<'t>(&self, p: Params<'_, 't, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.cfg.channels || s[2] < Self::min_size() || s[3] < Self::min_size() {
            return Err(Error::InvalidArgument(format!(
                "discriminator input {s:?} below the minimum {0}x{0} field",
                Self::min_size()
            )));
        }
        let mut h = x;
        for (conv, norm) in &self.layers {
            h = conv.fwd(p, h)?;
            if let Some(n) = norm {
                h = n.fwd(p, h)?;
            }
            h = h.leaky_relu(0.2)?;
        }
        self.head.fwd(p, h)
    }

    pub fn discriminate(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        Ok(self.forward(&p, tape.constant(x.clone()))?.to_tensor())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(time: bool) -> TranslatorConfig {
        TranslatorConfig {
            ngf: 8,
            depth: Depth {
                n_down: 1,
                n_res: 1,
                n_up: 1,
            },
            time_dim: 16,
            size: 16,
            time_conditioned: time,
            ..Default::default()
        }
    }

    #[test]
    fn translate_preserves_shape_and_input() {
        let net = TranslatorNet::<f32>::new(small(true), 2).unwrap();
        let c = Tensor::new([1, 1, 16, 16], (0..256).map(|i| (i as f32 / 128.0) - 1.0).collect()).unwrap();
        let before = c.clone();
        let out = net.translate(&c, &[0.4]).unwrap();
        assert_eq!(out.shape(), c.shape());
        assert_eq!(c, before);
    }

    #[test]
    fn time_changes_the_mapping() {
        let net = TranslatorNet::<f32>::new(small(true), 2).unwrap();
        let c = Tensor::full([1, 1, 16, 16], 0.3f32);
        assert_ne!(net.translate(&c, &[0.1]).unwrap(), net.translate(&c, &[0.9]).unwrap());
        let flat = TranslatorNet::<f32>::new(small(false), 2).unwrap();
        assert_eq!(flat.translate(&c, &[0.1]).unwrap(), flat.translate(&c, &[0.9]).unwrap());
    }

    #[test]
    fn depth_must_be_symmetric() {
        let mut cfg = small(true);
        cfg.depth.n_up = 2;
        assert!(matches!(TranslatorNet::<f32>::new(cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn discriminator_map_shape() {
        let d = PatchDiscriminator::<f32>::new(DiscriminatorConfig::default(), 0);
        let out = d.discriminate(&Tensor::full([2, 1, 32, 32], 0.1)).unwrap();
        assert_eq!(out.shape(), &[2, 7, 4, 4]);
        assert!(d.discriminate(&Tensor::full([1, 1, 4, 4], 0.1)).is_err());
    }
}
