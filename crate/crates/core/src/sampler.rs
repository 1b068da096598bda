//! Two-phase translation sampler.
//!
//! Encoding walks the source image up the time grid `s, 2s, .., 1` and
//! records the translated image component at every step. Generation walks
//! the target chain down from noise, replacing the target denoiser's own
//! component with the recorded one, and steps `x <- x - s (C + eps)`.

use autodiff::{Element, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diffusion::{check_time, DenoiserNet};
use crate::error::{Error, Result};
use crate::translator::TranslatorNet;

pub const SAME_MODALITY_STEPS: usize = 100;
pub const CROSS_MODALITY_STEPS: usize = 200;

/// Anything that predicts `(C, eps)` for a batch at one shared time.
pub trait Denoise<T: Element> {
    fn predict(&self, x_t: &Tensor<T>, t: f64) -> Result<(Tensor<T>, Tensor<T>)>;
}

/// Anything that maps components between domains at one shared time.
pub trait Translate<T: Element> {
    fn apply(&self, c: &Tensor<T>, t: f64) -> Result<Tensor<T>>;
}

impl<T: Element> Denoise<T> for DenoiserNet<T> {
    fn predict(&self, x_t: &Tensor<T>, t: f64) -> Result<(Tensor<T>, Tensor<T>)> {
        self.denoise(x_t, &vec![t; x_t.shape()[0]])
    }
}

impl<T: Element> Translate<T> for TranslatorNet<T> {
    fn apply(&self, c: &Tensor<T>, t: f64) -> Result<Tensor<T>> {
        self.translate(c, &vec![t; c.shape()[0]])
    }
}

/// Returns its input.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityTranslator;

impl<T: Element> Translate<T> for IdentityTranslator {
    fn apply(&self, c: &Tensor<T>, _t: f64) -> Result<Tensor<T>> {
        Ok(c.clone())
    }
}

/// Ground-truth denoiser for a known clean image: `C = -x0` and the noise
/// that makes `x_t = (1 - t) x0 + t eps` hold exactly (zero at `t = 0`).
#[derive(Debug, Clone)]
pub struct OracleDenoiser<T: Element> {
    pub x0: Tensor<T>,
}

impl<T: Element> Denoise<T> for OracleDenoiser<T> {
    fn predict(&self, x_t: &Tensor<T>, t: f64) -> Result<(Tensor<T>, Tensor<T>)> {
        check_time(t)?;
        let c = self.x0.map(|v| -v);
        let eps = if t == 0.0 {
            Tensor::zeros(x_t.shape().to_vec())
        } else {
            let (a, inv) = (T::from_f64_lossy(1.0 - t), T::from_f64_lossy(1.0 / t));
            x_t.zip_map(&self.x0, |x, x0| (x - a * x0) * inv)?
        };
        Ok((c, eps))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SamplerConfig {
    pub steps: usize,
    /// Seed of the terminal noise draw.
    pub seed: u64,
}

impl SamplerConfig {
    pub fn new(steps: usize, seed: u64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("sampler needs at least one step".into()));
        }
        Ok(SamplerConfig { steps, seed })
    }

    pub fn same_modality(seed: u64) -> Self {
        SamplerConfig {
            steps: SAME_MODALITY_STEPS,
            seed,
        }
    }

    pub fn cross_modality(seed: u64) -> Self {
        SamplerConfig {
            steps: CROSS_MODALITY_STEPS,
            seed,
        }
    }

    pub fn step_size(&self) -> f64 {
        1.0 / self.steps as f64
    }

    /// Time of grid point `k` (`k = steps` is `t = 1`).
    pub fn time(&self, k: usize) -> f64 {
        if k == self.steps {
            1.0
        } else {
            k as f64 / self.steps as f64
        }
    }
}

/// Translated components in ascending time; entry `k` belongs to `t = (k+1) s`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTrace<T: Element> {
    pub components: Vec<Tensor<T>>,
}

impl<T: Element> SampleTrace<T> {
    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }
}

fn ensure_finite<T: Element>(x: &Tensor<T>, what: &str) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("non-finite {what}")))
    }
}

/// Encode a source batch into its per-step translated components.
pub fn encode_components<T: Element>(
    x0: &Tensor<T>,
    net_s: &impl Denoise<T>,
    g: &impl Translate<T>,
    cfg: &SamplerConfig,
) -> Result<SampleTrace<T>> {
    SamplerConfig::new(cfg.steps, cfg.seed)?;
    let (mut c, mut eps) = net_s.predict(x0, 0.0)?;
    let mut components = Vec::with_capacity(cfg.steps);
    for k in 1..=cfg.steps {
        let t = cfg.time(k);
        let tt = T::from_f64_lossy(t);
        let x_t = Tensor::new(
            x0.shape().to_vec(),
            x0.data()
                .iter()
                .zip(c.data())
                .zip(eps.data())
                .map(|((&x, &c), &e)| x + tt * c + tt * e)
                .collect(),
        )?;
        (c, eps) = net_s.predict(&x_t, t)?;
        ensure_finite(&c, "component prediction")?;
        ensure_finite(&eps, "noise prediction")?;
        let translated = g.apply(&c, t)?;
        ensure_finite(&translated, "translated component")?;
        components.push(translated);
    }
    Ok(SampleTrace { components })
}

/// Standard normal tensor from a seed.
pub fn terminal_noise<T: Element>(shape: &[usize], seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64_lossy(StandardNormal.sample(&mut rng)))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("length matches shape")
}

/// Generate from `x_init` (or seeded noise) at `t = 1`, consuming the trace
/// from its last entry backwards.
pub fn generate<T: Element>(
    trace: SampleTrace<T>,
    net_t: &impl Denoise<T>,
    cfg: &SamplerConfig,
    x_init: Option<Tensor<T>>,
) -> Result<Tensor<T>> {
    let mut path = generate_path(trace, net_t, cfg, x_init)?;
    Ok(path.pop().expect("at least one state"))
}

/// [`generate`] returning every state `x_1, x_{1-s}, .., x_0`.
pub fn generate_path<T: Element>(
    mut trace: SampleTrace<T>,
    net_t: &impl Denoise<T>,
    cfg: &SamplerConfig,
    x_init: Option<Tensor<T>>,
) -> Result<Vec<Tensor<T>>> {
    if trace.len() != cfg.steps || cfg.steps == 0 {
        return Err(Error::InvalidArgument(format!(
            "trace has {} entries for {} steps",
            trace.len(),
            cfg.steps
        )));
    }
    let shape = trace.components[0].shape().to_vec();
    let mut x = match x_init {
        Some(x) if x.shape() != shape.as_slice() => {
            return Err(Error::Shape {
                expected: shape,
                got: x.shape().to_vec(),
            })
        }
        Some(x) => x,
        None => terminal_noise(&shape, cfg.seed),
    };
    let s = T::from_f64_lossy(cfg.step_size());
    let mut path = Vec::with_capacity(cfg.steps + 1);
    for k in (1..=cfg.steps).rev() {
        let (_, eps) = net_t.predict(&x, cfg.time(k))?;
        let c = trace.components.pop().expect("length checked");
        let next = Tensor::new(
            shape.clone(),
            x.data()
                .iter()
                .zip(c.data())
                .zip(eps.data())
                .map(|((&x, &c), &e)| x - s * (c + e))
                .collect(),
        )?;
        ensure_finite(&next, "sample")?;
        path.push(std::mem::replace(&mut x, next));
    }
    path.push(x);
    Ok(path)
}

/// Encode with the source chain, then generate with the target chain.
pub fn translate_image<T: Element>(
    x0: &Tensor<T>,
    net_s: &impl Denoise<T>,
    g: &impl Translate<T>,
    net_t: &impl Denoise<T>,
    cfg: &SamplerConfig,
) -> Result<Tensor<T>> {
    let trace = encode_components(x0, net_s, g, cfg)?;
    generate(trace, net_t, cfg, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f32) -> Tensor<f32> {
        Tensor::new([1, 1, 1, 1], vec![v]).unwrap()
    }

    #[test]
    fn hand_trace_two_steps() {
        let oracle = OracleDenoiser { x0: scalar(0.5) };
        let cfg = SamplerConfig::new(2, 0).unwrap();
        let trace = encode_components(&scalar(0.5), &oracle, &IdentityTranslator, &cfg).unwrap();
        assert_eq!(trace.len(), 2);
        let path = generate_path(trace, &oracle, &cfg, Some(scalar(1.0))).unwrap();
        let xs: Vec<f32> = path.iter().map(|x| x.item()).collect();
        assert_eq!(xs, [1.0, 0.75, 0.5]);
    }

    #[test]
    fn one_step_trace() {
        let oracle = OracleDenoiser { x0: scalar(0.3) };
        let trace = encode_components(
            &scalar(0.3),
            &oracle,
            &IdentityTranslator,
            &SamplerConfig::new(1, 0).unwrap(),
        )
        .unwrap();
        assert_eq!(trace.len(), 1);
        assert_eq!(trace.components[0].item(), -0.3);
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let oracle = OracleDenoiser { x0: scalar(0.3) };
        let trace = SampleTrace {
            components: vec![scalar(-0.3)],
        };
        assert!(generate(trace, &oracle, &SamplerConfig::new(2, 0).unwrap(), None).is_err());
        assert!(SamplerConfig::new(0, 0).is_err());
    }

    #[test]
    fn presets() {
        assert_eq!(SamplerConfig::same_modality(0).steps, 100);
        assert_eq!(SamplerConfig::cross_modality(0).steps, 200);
    }
}
