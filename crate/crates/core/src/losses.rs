//! Training objectives. Every norm is a per-element mean.

use autodiff::{Element, Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::nn::{Builder, Conv, ParamStore};
use crate::translator::TranslatorNet;

/// Weights of the six terms of the full objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub diffusion: f64,
    pub adversarial: f64,
    pub cycle: f64,
    pub identity: f64,
    pub perceptual: f64,
    pub dcl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            diffusion: 5e-2,
            adversarial: 1.0,
            cycle: 10.0,
            identity: 5.0,
            perceptual: 0.5,
            dcl: 0.02,
        }
    }
}

impl LossWeights {
    pub fn as_array(&self) -> [f64; 6] {
        [
            self.diffusion,
            self.adversarial,
            self.cycle,
            self.identity,
            self.perceptual,
            self.dcl,
        ]
    }

    pub fn scaled(&self, k: f64) -> Self {
        let [a, b, c, d, e, f] = self.as_array().map(|w| w * k);
        LossWeights {
            diffusion: a,
            adversarial: b,
            cycle: c,
            identity: d,
            perceptual: e,
            dcl: f,
        }
    }
}

/// The six objective terms, in weight order.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub diffusion: f64,
    pub adversarial: f64,
    pub cycle: f64,
    pub identity: f64,
    pub perceptual: f64,
    pub dcl: f64,
}

impl LossParts {
    pub fn as_array(&self) -> [f64; 6] {
        [
            self.diffusion,
            self.adversarial,
            self.cycle,
            self.identity,
            self.perceptual,
            self.dcl,
        ]
    }
}

/// Weighted sum of the six terms.
pub fn total_loss(parts: &LossParts, w: &LossWeights) -> Result<f64> {
    let p = parts.as_array();
    if let Some(bad) = p.iter().find(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(format!("non-finite loss term {bad}")));
    }
    Ok(p.iter().zip(w.as_array()).map(|(v, w)| v * w).sum())
}

fn same_shape<T: Element>(a: Var<'_, T>, b: Var<'_, T>) -> Result<()> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb {
        return Err(Error::Shape { expected: sa, got: sb });
    }
    Ok(())
}

fn mse<'t, T: Element>(a: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
    same_shape(a, b)?;
    Ok(a.sub(b)?.mean_square()?)
}

fn mae<'t, T: Element>(a: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
    same_shape(a, b)?;
    Ok(a.sub(b)?.mean_abs()?)
}

/// `mean((C_pred - C)^2) + mean((eps_pred - eps)^2)`.
pub fn diffusion_loss<'t, T: Element>(
    c_pred: Var<'t, T>,
    eps_pred: Var<'t, T>,
    c_true: Var<'t, T>,
    eps_true: Var<'t, T>,
) -> Result<Var<'t, T>> {
    Ok(mse(c_pred, c_true)?.add(mse(eps_pred, eps_true)?)?)
}

/// Least-squares discriminator objective: real maps toward 1, fake toward 0.
pub fn discriminator_adv_loss<'t, T: Element>(real: Var<'t, T>, fake: Var<'t, T>) -> Result<Var<'t, T>> {
    Ok(real.add_scalar(-1.0)?.mean_square()?.add(fake.mean_square()?)?)
}

/// Least-squares generator objective: fake maps toward 1.
pub fn generator_adv_loss<'t, T: Element>(fake: Var<'t, T>) -> Result<Var<'t, T>> {
    Ok(fake.add_scalar(-1.0)?.mean_square()?)
}

/// How a `[B, N, h, w]` patch map is cut into contrastive vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DclReshape {
    /// One `N`-vector per spatial position: `B*h*w` vectors.
    PerPixel,
    /// One `N*h`-vector per column: `B*w` vectors.
    PerColumn,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DclConfig {
    pub n: usize,
    pub tau: f64,
    pub reshape: DclReshape,
}

impl Default for DclConfig {
    fn default() -> Self {
        DclConfig {
            n: 7,
            tau: 0.1,
            reshape: DclReshape::PerPixel,
        }
    }
}

/// Rows of unit-norm contrastive vectors cut from a patch map.
pub fn dcl_vectors<'t, T: Element>(map: Var<'t, T>, cfg: &DclConfig) -> Result<Var<'t, T>> {
    let s = map.shape();
    if s.len() != 4 || s[1] != cfg.n {
        return Err(Error::InvalidArgument(format!(
            "patch map {s:?} does not have {} channels",
            cfg.n
        )));
    }
    let (b, n, h, w) = (s[0], s[1], s[2], s[3]);
    let rows = match cfg.reshape {
        DclReshape::PerPixel => map.permute(&[0, 2, 3, 1])?.reshape([b * h * w, n])?,
        DclReshape::PerColumn => map.permute(&[0, 3, 1, 2])?.reshape([b * w, n * h])?,
    };
    Ok(rows.l2_normalize()?)
}

/// Exclusion mask value; `exp` of it underflows to exactly zero.
const MASKED: f64 = -1e4;

/// Contrastive loss over discriminator outputs. Real vectors are anchors and
/// mutual positives; fake vectors are negatives.
pub fn dcl_loss<'t, T: Element>(real_map: Var<'t, T>, fake_map: Var<'t, T>, cfg: &DclConfig) -> Result<Var<'t, T>> {
    if cfg.n < 2 || cfg.tau <= 0.0 {
        return Err(Error::Config(format!("invalid contrastive config {cfg:?}")));
    }
    let real = dcl_vectors(real_map, cfg)?;
    let fake = dcl_vectors(fake_map, cfg)?;
    let n = real.shape()[0];
    let m = fake.shape()[0];
    if n < 2 {
        return Err(Error::InvalidArgument(
            "contrastive loss needs at least 2 real vectors".into(),
        ));
    }
    let inv_tau = 1.0 / cfg.tau;
    let rr = real.matmul(real.transpose()?)?.scale(inv_tau)?;
    let rf = real.matmul(fake.transpose()?)?.scale(inv_tau)?;
    let logits = Var::concat(&[rr, rf], 1)?;
    let tape = logits.tape();
    let width = n + m;
    let mut diag = vec![T::zero(); n * width];
    let mut pick = vec![T::zero(); n * width];
    let weight = T::from_f64_lossy(1.0 / ((n - 1) * n) as f64);
    for i in 0..n {
        diag[i * width + i] = T::from_f64_lossy(MASKED);
        for j in (0..n).filter(|&j| j != i) {
            pick[i * width + j] = weight;
        }
    }
    let masked = logits.add(tape.constant(Tensor::new([n, width], diag)?))?;
    let log_p = masked.log_softmax()?;
    Ok(log_p.mul(tape.constant(Tensor::new([n, width], pick)?))?.sum()?.neg()?)
}

/// `mean|F(G(C_S)) - C_S| + mean|G(F(C_T)) - C_T|`.
pub fn cycle_loss<'t, T: Element>(
    src_s: Var<'t, T>,
    cyc_s: Var<'t, T>,
    src_t: Var<'t, T>,
    cyc_t: Var<'t, T>,
) -> Result<Var<'t, T>> {
    Ok(mae(cyc_s, src_s)?.add(mae(cyc_t, src_t)?)?)
}

/// Fixed random convolutional feature extractor with five taps.
#[derive(Debug, Clone)]
pub struct FeatureExtractor<T: Element> {
    pub params: ParamStore<T>,
    pub seed: u64,
    blocks: Vec<Conv>,
}

pub const FEATURE_WIDTHS: [usize; 5] = [8, 16, 16, 32, 32];

impl<T: Element> FeatureExtractor<T> {
    pub fn new(channels: usize, seed: u64) -> Self {
        let mut params = ParamStore::default();
        let mut bld = Builder::new(&mut params, seed);
        let mut cin = channels;
        let blocks = FEATURE_WIDTHS
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let c = Conv::same(&mut bld, &format!("b{i}"), cin, w, 3);
                cin = w;
                c
            })
            .collect();
        FeatureExtractor { params, seed, blocks }
    }

    /// Smallest input size for which every tap is at least 1x1.
    pub fn min_size() -> usize {
        1 << (FEATURE_WIDTHS.len() - 1)
    }

    /// Activations at each tap, shallow to deep.
    pub fn taps<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>) -> Result<Vec<Var<'t, T>>> {
        let s = x.shape();
        if s.len() != 4 || s[2] < Self::min_size() || s[3] < Self::min_size() {
            return Err(Error::InvalidArgument(format!(
                "feature extractor needs at least {0}x{0} input, got {s:?}",
                Self::min_size()
            )));
        }
        let p = self.params.bind(tape, false);
        let mut h = x;
        let mut taps = Vec::with_capacity(self.blocks.len());
        for (i, conv) in self.blocks.iter().enumerate() {
            if i > 0 {
                h = h.avg_pool(2)?;
            }
            h = conv.fwd(&p, h)?.relu()?;
            taps.push(h);
        }
        Ok(taps)
    }

    /// Per-tap mean squared feature distance, averaged over taps.
    pub fn distance<'t>(&self, a: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
        same_shape(a, b)?;
        let tape = a.tape();
        let (ta, tb) = (self.taps(tape, a)?, self.taps(tape, b)?);
        let mut acc: Option<Var<'t, T>> = None;
        for (x, y) in ta.into_iter().zip(tb) {
            let d = mse(x, y)?;
            acc = Some(match acc {
                Some(s) => s.add(d)?,
                None => d,
            });
        }
        Ok(acc.expect("five taps").scale(1.0 / FEATURE_WIDTHS.len() as f64)?)
    }
}

/// Feature distance between sources and round trips, summed over both
/// directions.
pub fn perceptual_loss<'t, T: Element>(
    ext: &FeatureExtractor<T>,
    src_s: Var<'t, T>,
    cyc_s: Var<'t, T>,
    src_t: Var<'t, T>,
    cyc_t: Var<'t, T>,
) -> Result<Var<'t, T>> {
    Ok(ext.distance(cyc_s, src_s)?.add(ext.distance(cyc_t, src_t)?)?)
}

/// `mean|F(C_S) - C_S| + mean|G(C_T) - C_T|` from precomputed translations.
pub fn identity_residual<'t, T: Element>(
    f_of_s: Var<'t, T>,
    c_s: Var<'t, T>,
    g_of_t: Var<'t, T>,
    c_t: Var<'t, T>,
) -> Result<Var<'t, T>> {
    Ok(mae(f_of_s, c_s)?.add(mae(g_of_t, c_t)?)?)
}

/// Identity loss evaluated through the translators on bound parameters.
pub fn identity_loss<'t, T: Element>(
    f: (&TranslatorNet<T>, &[Var<'t, T>]),
    g: (&TranslatorNet<T>, &[Var<'t, T>]),
    c_s: Var<'t, T>,
    c_t: Var<'t, T>,
    t: &[f64],
) -> Result<Var<'t, T>> {
    let fs = f.0.forward(f.1, c_s, t)?;
    let gt = g.0.forward(g.1, c_t, t)?;
    identity_residual(fs, c_s, gt, c_t)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c<'t>(tape: &'t Tape<f64>, shape: &[usize], v: Vec<f64>) -> Var<'t, f64> {
        tape.constant(Tensor::new(shape.to_vec(), v).unwrap())
    }

    #[test]
    fn default_weights_total() {
        let ones = LossParts {
            diffusion: 1.0,
            adversarial: 1.0,
            cycle: 1.0,
            identity: 1.0,
            perceptual: 1.0,
            dcl: 1.0,
        };
        let w = LossWeights::default();
        assert!((total_loss(&ones, &w).unwrap() - 16.57).abs() < 1e-12);
        assert_eq!(total_loss(&ones, &w.scaled(0.0)).unwrap(), 0.0);
        assert!((total_loss(&ones, &w.scaled(2.0)).unwrap() - 33.14).abs() < 1e-12);
        let bad = LossParts {
            cycle: f64::NAN,
            ..ones
        };
        assert!(total_loss(&bad, &w).is_err());
    }

    #[test]
    fn diffusion_loss_unit_offset() {
        let tape = Tape::new();
        let cc = c(&tape, &[4], vec![0.1, 0.2, 0.3, 0.4]);
        let e = c(&tape, &[4], vec![1.0, -1.0, 0.5, 0.0]);
        let e1 = e.add_scalar(1.0).unwrap();
        assert_eq!(diffusion_loss(cc, e1, cc, e).unwrap().item(), 1.0);
        assert_eq!(diffusion_loss(cc, e, cc, e).unwrap().item(), 0.0);
    }

    #[test]
    fn adversarial_examples() {
        let tape = Tape::new();
        let ones = c(&tape, &[1, 7, 2, 2], vec![1.0; 28]);
        let zeros = c(&tape, &[1, 7, 2, 2], vec![0.0; 28]);
        let half = c(&tape, &[1, 7, 2, 2], vec![0.5; 28]);
        assert_eq!(discriminator_adv_loss(ones, zeros).unwrap().item(), 0.0);
        assert_eq!(generator_adv_loss(ones).unwrap().item(), 0.0);
        assert_eq!(discriminator_adv_loss(half, half).unwrap().item(), 0.5);
    }

    #[test]
    fn cycle_offset_one_domain() {
        let tape = Tape::new();
        let s = c(&tape, &[3], vec![0.1, -0.2, 0.7]);
        let t = c(&tape, &[3], vec![1.0, 0.0, -1.0]);
        let s_off = s.add_scalar(0.5).unwrap();
        assert!((cycle_loss(s, s_off, t, t).unwrap().item() - 0.5).abs() < 1e-12);
        assert_eq!(cycle_loss(s, s, t, t).unwrap().item(), 0.0);
    }

    #[test]
    fn dcl_requires_two_real_vectors() {
        let tape = Tape::new();
        let real = c(&tape, &[1, 7, 1, 1], vec![1.0; 7]);
        assert!(dcl_loss(real, real, &DclConfig::default()).is_err());
    }

    #[test]
    fn dcl_vectors_are_unit_norm() {
        let tape = Tape::new();
        let v: Vec<f64> = (0..56).map(|i| (i as f64 * 0.37).sin()).collect();
        let map = c(&tape, &[2, 7, 2, 2], v);
        for cfg in [
            DclConfig::default(),
            DclConfig {
                reshape: DclReshape::PerColumn,
                ..Default::default()
            },
        ] {
            let rows = dcl_vectors(map, &cfg).unwrap().to_tensor();
            let width = rows.shape()[1];
            for r in rows.data().chunks(width) {
                let norm: f64 = r.iter().map(|x| x * x).sum::<f64>().sqrt();
                assert!((norm - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn perceptual_is_zero_on_identical_and_symmetric() {
        let ext = FeatureExtractor::<f64>::new(1, 9);
        let tape = Tape::new();
        let a: Vec<f64> = (0..256).map(|i| ((i * 31) % 17) as f64 / 8.0 - 1.0).collect();
        let b: Vec<f64> = (0..256).map(|i| ((i * 7) % 13) as f64 / 6.0 - 1.0).collect();
        let a = c(&tape, &[1, 1, 16, 16], a);
        let b = c(&tape, &[1, 1, 16, 16], b);
        assert_eq!(ext.distance(a, a).unwrap().item(), 0.0);
        assert_eq!(ext.distance(a, b).unwrap().item(), ext.distance(b, a).unwrap().item());
        let small = c(&tape, &[1, 1, 8, 8], vec![0.0; 64]);
        assert!(ext.distance(small, small).is_err());
    }
}
