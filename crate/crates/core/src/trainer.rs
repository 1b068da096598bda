//! Warmup and joint optimization of both diffusion chains, the cycle
//! translators and their discriminators.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use autodiff::{Element, Tape, Tensor, TensorPack, Var};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::{parse_value, KvConfig};
use crate::data::{Dataset, Task};
use crate::diffusion::{forward_diffuse_batch, DenoiserConfig, DenoiserNet};
use crate::error::{Error, Result};
use crate::losses::{
    cycle_loss, dcl_loss, diffusion_loss, discriminator_adv_loss, generator_adv_loss, identity_loss, perceptual_loss,
    total_loss, DclConfig, DclReshape, FeatureExtractor, LossParts, LossWeights,
};
use crate::nn::ParamStore;
use crate::optim::{clip_global_norm, cosine_lr, Adam, AdamConfig, Ema};
use crate::translator::{Depth, DiscriminatorConfig, PatchDiscriminator, TranslatorConfig, TranslatorNet};

/// Training protocol variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arm {
    /// Warmup, then everything optimized together.
    Joint,
    /// Diffusion trained alone for the full budget, then translators on the
    /// frozen (EMA) denoisers.
    NoJoint,
    /// Joint protocol with translators that ignore the timestep.
    NoTime,
}

impl Arm {
    pub fn parse(s: &str) -> Result<Arm> {
        match s {
            "joint" | "none" => Ok(Arm::Joint),
            "no-joint" => Ok(Arm::NoJoint),
            "no-time" => Ok(Arm::NoTime),
            _ => Err(Error::Config(format!("unknown arm {s:?} (joint | no-joint | no-time)"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Arm::Joint => "joint",
            Arm::NoJoint => "no-joint",
            Arm::NoTime => "no-time",
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Diffusion loss only.
    Warmup,
    /// Full objective on all networks.
    Joint,
    /// Translator objective on frozen denoisers.
    TranslatorOnly,
}

impl Phase {
    pub fn name(&self) -> &'static str {
        match self {
            Phase::Warmup => "warmup",
            Phase::Joint => "joint",
            Phase::TranslatorOnly => "translator",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub preset: String,
    pub task: Task,
    pub total_iters: usize,
    pub warmup_iters: usize,
    pub batch_size: usize,
    pub size: usize,
    pub channels: usize,
    pub diffusion_lr_start: f64,
    pub diffusion_lr_end: f64,
    pub translator_lr: f64,
    pub discriminator_lr: f64,
    pub ema_decay: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub arm: Arm,
    pub weights: LossWeights,
    pub dcl: DclConfig,
    pub denoiser_width: usize,
    pub time_dim: usize,
    pub ngf: usize,
    pub depth: Depth,
    pub heads: usize,
    pub attn_pool: usize,
    pub ndf: usize,
    pub checkpoint_every: usize,
    pub threads: usize,
    pub data_dir: PathBuf,
}

impl TrainConfig {
    /// Full-scale hyperparameters.
    pub fn paper() -> Self {
        TrainConfig {
            preset: "paper".into(),
            total_iters: 100_000,
            warmup_iters: 50_000,
            batch_size: 24,
            denoiser_width: 64,
            ngf: 64,
            ndf: 64,
            depth: Depth::PAPER,
            attn_pool: 1,
            ..Self::desk()
        }
    }

    /// CPU-feasible scale on 32x32 canvases.
    pub fn desk() -> Self {
        TrainConfig {
            preset: "desk".into(),
            task: Task::SolidsEdges,
            total_iters: 6000,
            warmup_iters: 2000,
            batch_size: 8,
            size: 32,
            channels: 1,
            diffusion_lr_start: 1e-4,
            diffusion_lr_end: 1e-5,
            translator_lr: 2e-4,
            discriminator_lr: 2e-4,
            ema_decay: 0.999,
            clip_norm: 1.0,
            seed: 0,
            arm: Arm::Joint,
            weights: LossWeights::default(),
            dcl: DclConfig::default(),
            denoiser_width: 32,
            time_dim: 64,
            ngf: 16,
            depth: Depth::DESK,
            heads: 4,
            attn_pool: 2,
            ndf: 16,
            checkpoint_every: 1000,
            threads: 1,
            data_dir: PathBuf::from("data"),
        }
    }

    /// Reduced budget used by the automated ablation checks.
    pub fn quick() -> Self {
        TrainConfig {
            preset: "quick".into(),
            total_iters: 900,
            warmup_iters: 300,
            batch_size: 4,
            denoiser_width: 16,
            time_dim: 32,
            ngf: 8,
            ndf: 8,
            heads: 2,
            ema_decay: 0.99,
            diffusion_lr_start: 1e-3,
            diffusion_lr_end: 1e-4,
            translator_lr: 5e-4,
            discriminator_lr: 5e-4,
            checkpoint_every: 300,
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "desk" => Ok(Self::desk()),
            "quick" => Ok(Self::quick()),
            _ => Err(Error::Config(format!("unknown preset {name:?} (desk | paper | quick)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.warmup_iters > self.total_iters {
            return bad(format!(
                "warmup {} exceeds total {}",
                self.warmup_iters, self.total_iters
            ));
        }
        if self.batch_size < 2 {
            return bad(format!("batch size {} below 2", self.batch_size));
        }
        if self.dcl.n < 2 || self.dcl.tau <= 0.0 {
            return bad(format!("invalid contrastive settings {:?}", self.dcl));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) || self.clip_norm <= 0.0 || self.threads == 0 {
            return bad("ema_decay in [0, 1], clip_norm > 0 and threads >= 1 are required".into());
        }
        let min = PatchDiscriminator::<f32>::min_size().max(FeatureExtractor::<f32>::min_size());
        if self.size < min {
            return bad(format!("image size {} below {min}", self.size));
        }
        Ok(())
    }

    /// Iterations in the whole run, including the translator-only tail of
    /// the decoupled arm.
    pub fn run_length(&self) -> usize {
        match self.arm {
            Arm::NoJoint => 2 * self.total_iters - self.warmup_iters,
            _ => self.total_iters,
        }
    }

    pub fn phase(&self, iter: usize) -> Phase {
        match self.arm {
            Arm::NoJoint if iter >= self.total_iters => Phase::TranslatorOnly,
            Arm::NoJoint => Phase::Warmup,
            _ if iter < self.warmup_iters => Phase::Warmup,
            _ => Phase::Joint,
        }
    }

    /// `(diffusion lr, translator lr)`.
    pub fn lr_at(&self, iter: usize) -> (f64, f64) {
        (
            cosine_lr(iter, self.total_iters, self.diffusion_lr_start, self.diffusion_lr_end),
            self.translator_lr,
        )
    }

    pub fn denoiser(&self) -> DenoiserConfig {
        DenoiserConfig {
            channels: self.channels,
            size: self.size,
            width: self.denoiser_width,
            time_dim: self.time_dim,
        }
    }

    pub fn translator(&self) -> TranslatorConfig {
        TranslatorConfig {
            channels: self.channels,
            size: self.size,
            ngf: self.ngf,
            depth: self.depth,
            time_dim: self.time_dim,
            heads: self.heads,
            attn_pool: self.attn_pool,
            time_conditioned: self.arm != Arm::NoTime,
        }
    }

    pub fn discriminator(&self) -> DiscriminatorConfig {
        DiscriminatorConfig {
            channels: self.channels,
            ndf: self.ndf,
            out_dim: self.dcl.n,
        }
    }
}

impl KvConfig for TrainConfig {
    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let w = &mut self.weights;
        match key {
            "preset" => {
                if v != self.preset {
                    return Err(Error::Config(format!(
                        "preset must be chosen before overrides ({v:?} after {:?})",
                        self.preset
                    )));
                }
            }
            "task" => self.task = Task::parse(v)?,
            "total_iters" => self.total_iters = parse_value(key, v)?,
            "warmup_iters" => self.warmup_iters = parse_value(key, v)?,
            "batch_size" => self.batch_size = parse_value(key, v)?,
            "size" => self.size = parse_value(key, v)?,
            "channels" => self.channels = parse_value(key, v)?,
            "diffusion_lr_start" => self.diffusion_lr_start = parse_value(key, v)?,
            "diffusion_lr_end" => self.diffusion_lr_end = parse_value(key, v)?,
            "translator_lr" => self.translator_lr = parse_value(key, v)?,
            "discriminator_lr" => self.discriminator_lr = parse_value(key, v)?,
            "ema_decay" => self.ema_decay = parse_value(key, v)?,
            "clip_norm" => self.clip_norm = parse_value(key, v)?,
            "seed" => self.seed = parse_value(key, v)?,
            "arm" => self.arm = Arm::parse(v)?,
            "w_dm" => w.diffusion = parse_value(key, v)?,
            "w_adv" => w.adversarial = parse_value(key, v)?,
            "w_cyc" => w.cycle = parse_value(key, v)?,
            "w_idt" => w.identity = parse_value(key, v)?,
            "w_lps" => w.perceptual = parse_value(key, v)?,
            "w_dcl" => w.dcl = parse_value(key, v)?,
            "dcl_n" => self.dcl.n = parse_value(key, v)?,
            "dcl_tau" => self.dcl.tau = parse_value(key, v)?,
            "dcl_reshape" => {
                self.dcl.reshape = match v {
                    "pixel" => DclReshape::PerPixel,
                    "column" => DclReshape::PerColumn,
                    _ => return Err(Error::Config(format!("dcl_reshape {v:?} (pixel | column)"))),
                }
            }
            "denoiser_width" => self.denoiser_width = parse_value(key, v)?,
            "time_dim" => self.time_dim = parse_value(key, v)?,
            "ngf" => self.ngf = parse_value(key, v)?,
            "n_down" => self.depth.n_down = parse_value(key, v)?,
            "n_res" => self.depth.n_res = parse_value(key, v)?,
            "n_up" => self.depth.n_up = parse_value(key, v)?,
            "heads" => self.heads = parse_value(key, v)?,
            "attn_pool" => self.attn_pool = parse_value(key, v)?,
            "ndf" => self.ndf = parse_value(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse_value(key, v)?,
            "threads" => self.threads = parse_value(key, v)?,
            "data_dir" => self.data_dir = PathBuf::from(v),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(String, String)> {
        let w = &self.weights;
        let reshape = match self.dcl.reshape {
            DclReshape::PerPixel => "pixel",
            DclReshape::PerColumn => "column",
        };
        [
            ("preset", self.preset.clone()),
            ("task", self.task.to_string()),
            ("total_iters", self.total_iters.to_string()),
            ("warmup_iters", self.warmup_iters.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("size", self.size.to_string()),
            ("channels", self.channels.to_string()),
            ("diffusion_lr_start", self.diffusion_lr_start.to_string()),
            ("diffusion_lr_end", self.diffusion_lr_end.to_string()),
            ("translator_lr", self.translator_lr.to_string()),
            ("discriminator_lr", self.discriminator_lr.to_string()),
            ("ema_decay", self.ema_decay.to_string()),
            ("clip_norm", self.clip_norm.to_string()),
            ("seed", self.seed.to_string()),
            ("arm", self.arm.to_string()),
            ("w_dm", w.diffusion.to_string()),
            ("w_adv", w.adversarial.to_string()),
            ("w_cyc", w.cycle.to_string()),
            ("w_idt", w.identity.to_string()),
            ("w_lps", w.perceptual.to_string()),
            ("w_dcl", w.dcl.to_string()),
            ("dcl_n", self.dcl.n.to_string()),
            ("dcl_tau", self.dcl.tau.to_string()),
            ("dcl_reshape", reshape.to_string()),
            ("denoiser_width", self.denoiser_width.to_string()),
            ("time_dim", self.time_dim.to_string()),
            ("ngf", self.ngf.to_string()),
            ("n_down", self.depth.n_down.to_string()),
            ("n_res", self.depth.n_res.to_string()),
            ("n_up", self.depth.n_up.to_string()),
            ("heads", self.heads.to_string()),
            ("attn_pool", self.attn_pool.to_string()),
            ("ndf", self.ndf.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("threads", self.threads.to_string()),
            ("data_dir", self.data_dir.display().to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

impl TrainConfig {
    /// Preset named by the highest-precedence layer, then every layer in
    /// order (file, environment, flags).
    pub fn resolve(layers: &[&[(String, String)]]) -> Result<Self> {
        let preset = layers
            .iter()
            .rev()
            .find_map(|l| l.iter().rev().find(|(k, _)| k == "preset").map(|(_, v)| v.clone()))
            .unwrap_or_else(|| "desk".into());
        let mut cfg = Self::preset(&preset)?;
        for layer in layers {
            let rest: Vec<_> = layer.iter().filter(|(k, _)| k != "preset").cloned().collect();
            cfg.apply(&rest)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn init_seed(seed: u64, tag: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ tag.wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Fixed seed of the perceptual feature extractor.
pub const FEATURE_SEED: u64 = 0x5EED_F00D;

/// Every network of the method.
#[derive(Debug, Clone)]
pub struct Models<T: Element> {
    pub net_s: DenoiserNet<T>,
    pub net_t: DenoiserNet<T>,
    /// Source to target.
    pub g: TranslatorNet<T>,
    /// Target to source.
    pub f: TranslatorNet<T>,
    pub d_s: PatchDiscriminator<T>,
    pub d_t: PatchDiscriminator<T>,
}

const NET_NAMES: [&str; 6] = ["net_s", "net_t", "g", "f", "d_s", "d_t"];

impl<T: Element> Models<T> {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        let s = cfg.seed;
        Ok(Models {
            net_s: DenoiserNet::new(cfg.denoiser(), init_seed(s, 1))?,
            net_t: DenoiserNet::new(cfg.denoiser(), init_seed(s, 2))?,
            g: TranslatorNet::new(cfg.translator(), init_seed(s, 3))?,
            f: TranslatorNet::new(cfg.translator(), init_seed(s, 4))?,
            d_s: PatchDiscriminator::new(cfg.discriminator(), init_seed(s, 5)),
            d_t: PatchDiscriminator::new(cfg.discriminator(), init_seed(s, 6)),
        })
    }

    fn stores(&self) -> [&ParamStore<T>; 6] {
        [
            &self.net_s.params,
            &self.net_t.params,
            &self.g.params,
            &self.f.params,
            &self.d_s.params,
            &self.d_t.params,
        ]
    }

    fn stores_mut(&mut self) -> [&mut ParamStore<T>; 6] {
        [
            &mut self.net_s.params,
            &mut self.net_t.params,
            &mut self.g.params,
            &mut self.f.params,
            &mut self.d_s.params,
            &mut self.d_t.params,
        ]
    }

    pub fn save_into(&self, prefix: &str, pack: &mut TensorPack) -> Result<()> {
        for (name, store) in NET_NAMES.iter().zip(self.stores()) {
            store.save_into(&format!("{prefix}{name}"), pack)?;
        }
        Ok(())
    }

    pub fn load_from(&mut self, prefix: &str, pack: &TensorPack) -> Result<()> {
        for (name, store) in NET_NAMES.iter().zip(self.stores_mut()) {
            store.load_from(&format!("{prefix}{name}"), pack)?;
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.stores().iter().map(|s| s.numel()).sum()
    }
}

/// Losses of one iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub iter: usize,
    pub phase: Phase,
    pub diffusion_lr: f64,
    pub translator_lr: f64,
    pub parts: LossParts,
    /// Discriminator adversarial objective.
    pub disc: f64,
    /// Weighted sum of `parts`.
    pub total: f64,
}

pub const LOSS_COLUMNS: [&str; 12] = [
    "iter",
    "phase",
    "diffusion_lr",
    "translator_lr",
    "dm",
    "adv",
    "cyc",
    "idt",
    "lps",
    "dcl",
    "disc",
    "total",
];

impl StepReport {
    pub fn csv_row(&self) -> String {
        let p = &self.parts;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.iter,
            self.phase.name(),
            self.diffusion_lr,
            self.translator_lr,
            p.diffusion,
            p.adversarial,
            p.cycle,
            p.identity,
            p.perceptual,
            p.dcl,
            self.disc,
            self.total
        )
    }
}

impl fmt::Display for StepReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = &self.parts;
        write!(
            f,
            "iter {} [{}] total {:.5} dm {:.5} adv {:.4} cyc {:.4} idt {:.4} lps {:.4} dcl {:.4} disc {:.4}",
            self.iter,
            self.phase.name(),
            self.total,
            p.diffusion,
            p.adversarial,
            p.cycle,
            p.identity,
            p.perceptual,
            p.dcl,
            self.disc
        )
    }
}

/// Randomness of one iteration, independent of everything before it.
pub struct StepDraws {
    pub idx_s: Vec<usize>,
    pub idx_t: Vec<usize>,
    pub t: Vec<f64>,
    pub eps_s: Tensor<f32>,
    pub eps_t: Tensor<f32>,
}

const STREAM_IDX_S: u64 = 1;
const STREAM_IDX_T: u64 = 2;
const STREAM_TIME: u64 = 3;
const STREAM_EPS_S: u64 = 4;
const STREAM_EPS_T: u64 = 5;

fn step_rng(seed: u64, iter: usize, stream: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(iter as u64).to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(stream);
    rng
}

/// Batch indices: distinct when the set is large enough.
pub fn draw_indices(rng: &mut impl Rng, n: usize, batch: usize) -> Vec<usize> {
    if batch <= n {
        rand::seq::index::sample(rng, n, batch).into_vec()
    } else {
        (0..batch).map(|_| rng.random_range(0..n)).collect()
    }
}

fn normal(rng: &mut impl Rng, shape: Vec<usize>) -> Tensor<f32> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape, data).expect("length matches shape")
}

impl StepDraws {
    pub fn new(cfg: &TrainConfig, iter: usize, n_s: usize, n_t: usize) -> Self {
        let b = cfg.batch_size;
        let shape = vec![b, cfg.channels, cfg.size, cfg.size];
        let rng = |s| step_rng(cfg.seed, iter, s);
        let mut rt = rng(STREAM_TIME);
        StepDraws {
            idx_s: draw_indices(&mut rng(STREAM_IDX_S), n_s, b),
            idx_t: draw_indices(&mut rng(STREAM_IDX_T), n_t, b),
            t: (0..b).map(|_| rt.random::<f64>()).collect(),
            eps_s: normal(&mut rng(STREAM_EPS_S), shape.clone()),
            eps_t: normal(&mut rng(STREAM_EPS_T), shape),
        }
    }
}

/// EMA shadows of the networks used for sampling.
#[derive(Debug, Clone)]
pub struct EmaSet {
    pub net_s: Ema<f32>,
    pub net_t: Ema<f32>,
    pub g: Ema<f32>,
    pub f: Ema<f32>,
}

#[derive(Debug, Clone)]
struct Optimizers {
    net_s: Adam<f32>,
    net_t: Adam<f32>,
    g: Adam<f32>,
    f: Adam<f32>,
    d_s: Adam<f32>,
    d_t: Adam<f32>,
}

impl Optimizers {
    fn new(m: &Models<f32>) -> Self {
        Optimizers {
            net_s: Adam::new(AdamConfig::ADAMW, &m.net_s.params),
            net_t: Adam::new(AdamConfig::ADAMW, &m.net_t.params),
            g: Adam::new(AdamConfig::ADAM_GAN, &m.g.params),
            f: Adam::new(AdamConfig::ADAM_GAN, &m.f.params),
            d_s: Adam::new(AdamConfig::ADAM_GAN, &m.d_s.params),
            d_t: Adam::new(AdamConfig::ADAM_GAN, &m.d_t.params),
        }
    }

    fn all(&self) -> [&Adam<f32>; 6] {
        [&self.net_s, &self.net_t, &self.g, &self.f, &self.d_s, &self.d_t]
    }

    fn all_mut(&mut self) -> [&mut Adam<f32>; 6] {
        [
            &mut self.net_s,
            &mut self.net_t,
            &mut self.g,
            &mut self.f,
            &mut self.d_s,
            &mut self.d_t,
        ]
    }
}

fn take_grads(grads: &mut autodiff::Gradients<f32>, vars: &[Var<'_, f32>]) -> Vec<Option<Tensor<f32>>> {
    vars.iter().map(|&v| grads.take(v)).collect()
}

/// Full training state.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub models: Models<f32>,
    pub ema: EmaSet,
    opt: Optimizers,
    ext: FeatureExtractor<f32>,
    data_s: Dataset,
    data_t: Dataset,
    pub iter: usize,
    last: Option<StepReport>,
}

fn diverged(iter: usize, last: &Option<StepReport>) -> impl Fn(Error) -> Error + '_ {
    move |e| {
        if is_numeric(&e) {
            Error::Diverged {
                iter,
                last: last.map_or("none".into(), |r| r.to_string()),
            }
        } else {
            e
        }
    }
}

fn is_numeric(e: &Error) -> bool {
    match e {
        Error::Autodiff(autodiff::Error::NonFinite { .. }) => true,
        Error::InvalidArgument(m) => m.starts_with("non-finite"),
        _ => false,
    }
}

impl Trainer {
    pub fn new(cfg: TrainConfig, data_s: Dataset, data_t: Dataset) -> Result<Self> {
        cfg.validate()?;
        let expected = vec![cfg.channels, cfg.size, cfg.size];
        for d in [&data_s, &data_t] {
            if d.images.shape()[1..] != expected[..] {
                return Err(Error::Shape {
                    expected: expected.clone(),
                    got: d.images.shape()[1..].to_vec(),
                });
            }
        }
        let models = Models::new(&cfg)?;
        let ema = EmaSet {
            net_s: Ema::new(cfg.ema_decay, &models.net_s.params),
            net_t: Ema::new(cfg.ema_decay, &models.net_t.params),
            g: Ema::new(cfg.ema_decay, &models.g.params),
            f: Ema::new(cfg.ema_decay, &models.f.params),
        };
        let opt = Optimizers::new(&models);
        Ok(Trainer {
            ext: FeatureExtractor::new(cfg.channels, FEATURE_SEED),
            cfg,
            models,
            ema,
            opt,
            data_s,
            data_t,
            iter: 0,
            last: None,
        })
    }

    pub fn last_report(&self) -> Option<&StepReport> {
        self.last.as_ref()
    }

    pub fn finished(&self) -> bool {
        self.iter >= self.cfg.run_length()
    }

    /// Networks with the EMA weights substituted where tracked.
    pub fn ema_models(&self) -> Models<f32> {
        let mut m = self.models.clone();
        m.net_s.params = self.ema.net_s.shadow.clone();
        m.net_t.params = self.ema.net_t.shadow.clone();
        m.g.params = self.ema.g.shadow.clone();
        m.f.params = self.ema.f.shadow.clone();
        m
    }

    /// One iteration.
    pub fn step(&mut self) -> Result<StepReport> {
        if self.finished() {
            return Err(Error::InvalidArgument(format!(
                "iteration {} beyond run length {}",
                self.iter,
                self.cfg.run_length()
            )));
        }
        let iter = self.iter;
        let last = self.last;
        let report = self.step_inner().map_err(diverged(iter, &last))?;
        self.iter += 1;
        self.last = Some(report);
        Ok(report)
    }

    fn step_inner(&mut self) -> Result<StepReport> {
        let cfg = self.cfg.clone();
        let iter = self.iter;
        let phase = cfg.phase(iter);
        let (lr_d, lr_t) = cfg.lr_at(iter);
        let draws = StepDraws::new(&cfg, iter, self.data_s.len(), self.data_t.len());
        let x_s = self.data_s.batch(&draws.idx_s);
        let x_t = self.data_t.batch(&draws.idx_t);
        let t = &draws.t;
        let w = cfg.weights;

        let tape = Tape::new();
        let diffusion_trainable = phase != Phase::TranslatorOnly;
        let (ps, pt) = if diffusion_trainable {
            (
                self.models.net_s.params.bind(&tape, true),
                self.models.net_t.params.bind(&tape, true),
            )
        } else {
            (
                self.ema.net_s.shadow.bind(&tape, false),
                self.ema.net_t.shadow.bind(&tape, false),
            )
        };
        let noisy_s = tape.constant(forward_diffuse_batch(&x_s, t, &draws.eps_s)?);
        let noisy_t = tape.constant(forward_diffuse_batch(&x_t, t, &draws.eps_t)?);
        let out_s = self.models.net_s.forward(&ps, noisy_s, t)?;
        let out_t = self.models.net_t.forward(&pt, noisy_t, t)?;
        let neg = |x: &Tensor<f32>| tape.constant(x.map(|v| -v));
        let dm = diffusion_loss(out_s.c, out_s.eps, neg(&x_s), tape.constant(draws.eps_s.clone()))?.add(
            diffusion_loss(out_t.c, out_t.eps, neg(&x_t), tape.constant(draws.eps_t.clone()))?,
        )?;
        let mut parts = LossParts {
            diffusion: dm.item() as f64,
            ..Default::default()
        };

        if phase == Phase::Warmup {
            let loss = dm.scale(w.diffusion)?;
            let mut grads = tape.backward(loss)?;
            let mut gs = take_grads(&mut grads, &ps);
            let mut gt = take_grads(&mut grads, &pt);
            clip_pair(&mut gs, &mut gt, cfg.clip_norm);
            self.opt.net_s.step(&mut self.models.net_s.params, &gs, lr_d)?;
            self.opt.net_t.step(&mut self.models.net_t.params, &gt, lr_d)?;
            self.ema.net_s.update(&self.models.net_s.params);
            self.ema.net_t.update(&self.models.net_t.params);
            return Ok(StepReport {
                iter,
                phase,
                diffusion_lr: lr_d,
                translator_lr: lr_t,
                parts,
                disc: 0.0,
                total: total_loss(&parts, &w)?,
            });
        }

        // Translation graph, shared by both updates.
        let (c_s, c_t) = (out_s.c, out_t.c);
        let pg = self.models.g.params.bind(&tape, true);
        let pf = self.models.f.params.bind(&tape, true);
        let fake_t = self.models.g.forward(&pg, c_s, t)?;
        let fake_s = self.models.f.forward(&pf, c_t, t)?;

        // Discriminator step on detached components.
        let disc_value = {
            let dtape = Tape::new();
            let m = &self.models;
            let pds = m.d_s.params.bind(&dtape, true);
            let pdt = m.d_t.params.bind(&dtape, true);
            let detached = |v: Var<'_, f32>| dtape.constant(v.to_tensor());
            let rs = m.d_s.forward(&pds, detached(c_s))?;
            let fs = m.d_s.forward(&pds, detached(fake_s))?;
            let rt = m.d_t.forward(&pdt, detached(c_t))?;
            let ft = m.d_t.forward(&pdt, detached(fake_t))?;
            let disc = discriminator_adv_loss(rs, fs)?.add(discriminator_adv_loss(rt, ft)?)?;
            let dcl = dcl_loss(rs, fs, &cfg.dcl)?.add(dcl_loss(rt, ft, &cfg.dcl)?)?;
            parts.dcl = dcl.item() as f64;
            let d_total = disc.scale(w.adversarial)?.add(dcl.scale(w.dcl)?)?;
            let value = disc.item() as f64;
            let mut dgrads = dtape.backward(d_total)?;
            let mut gds = take_grads(&mut dgrads, &pds);
            let mut gdt = take_grads(&mut dgrads, &pdt);
            clip_pair(&mut gds, &mut gdt, cfg.clip_norm);
            let lr_disc = cfg.discriminator_lr;
            self.opt.d_s.step(&mut self.models.d_s.params, &gds, lr_disc)?;
            self.opt.d_t.step(&mut self.models.d_t.params, &gdt, lr_disc)?;
            value
        };

        // Generator step against the updated, frozen discriminators:
        // translators, and denoisers in the joint phase.
        let m = &self.models;
        let pds = m.d_s.params.bind(&tape, false);
        let pdt = m.d_t.params.bind(&tape, false);
        let cyc_s = m.f.forward(&pf, fake_t, t)?;
        let cyc_t = m.g.forward(&pg, fake_s, t)?;
        let adv =
            generator_adv_loss(m.d_t.forward(&pdt, fake_t)?)?.add(generator_adv_loss(m.d_s.forward(&pds, fake_s)?)?)?;
        let cyc = cycle_loss(c_s, cyc_s, c_t, cyc_t)?;
        let lps = perceptual_loss(&self.ext, c_s, cyc_s, c_t, cyc_t)?;
        let idt = identity_loss((&m.f, &pf), (&m.g, &pg), c_s, c_t, t)?;
        parts.adversarial = adv.item() as f64;
        parts.cycle = cyc.item() as f64;
        parts.identity = idt.item() as f64;
        parts.perceptual = lps.item() as f64;
        let mut gen = adv
            .scale(w.adversarial)?
            .add(cyc.scale(w.cycle)?)?
            .add(idt.scale(w.identity)?)?
            .add(lps.scale(w.perceptual)?)?;
        if diffusion_trainable {
            gen = gen.add(dm.scale(w.diffusion)?)?;
        }
        let mut grads = tape.backward(gen)?;
        let mut gg = take_grads(&mut grads, &pg);
        let mut gf = take_grads(&mut grads, &pf);
        clip_pair(&mut gg, &mut gf, cfg.clip_norm);
        if diffusion_trainable {
            let mut gs = take_grads(&mut grads, &ps);
            let mut gt = take_grads(&mut grads, &pt);
            clip_pair(&mut gs, &mut gt, cfg.clip_norm);
            self.opt.net_s.step(&mut self.models.net_s.params, &gs, lr_d)?;
            self.opt.net_t.step(&mut self.models.net_t.params, &gt, lr_d)?;
            self.ema.net_s.update(&self.models.net_s.params);
            self.ema.net_t.update(&self.models.net_t.params);
        }
        self.opt.g.step(&mut self.models.g.params, &gg, lr_t)?;
        self.opt.f.step(&mut self.models.f.params, &gf, lr_t)?;
        self.ema.g.update(&self.models.g.params);
        self.ema.f.update(&self.models.f.params);

        Ok(StepReport {
            iter,
            phase,
            diffusion_lr: lr_d,
            translator_lr: lr_t,
            parts,
            disc: disc_value,
            total: total_loss(&parts, &w)?,
        })
    }
}

const CONFIG_PREFIX: &str = "config.";

/// Rebuild the configuration stored in a checkpoint.
pub fn config_from_pack(pack: &TensorPack) -> Result<TrainConfig> {
    let kv: Vec<(String, String)> = pack
        .meta_entries()
        .filter_map(|(k, v)| k.strip_prefix(CONFIG_PREFIX).map(|k| (k.to_string(), v.to_string())))
        .collect();
    if kv.is_empty() {
        return Err(Error::Checkpoint("no configuration recorded".into()));
    }
    TrainConfig::resolve(&[&kv])
}

impl Trainer {
    pub fn to_pack(&self) -> Result<TensorPack> {
        let mut pack = TensorPack::new();
        pack.set_meta("kind", "jointcycle-checkpoint")?;
        pack.set_meta("iter", self.iter)?;
        for (k, v) in self.cfg.entries() {
            pack.set_meta(&format!("{CONFIG_PREFIX}{k}"), v)?;
        }
        self.models.save_into("", &mut pack)?;
        let e = &self.ema;
        for (name, ema) in [("net_s", &e.net_s), ("net_t", &e.net_t), ("g", &e.g), ("f", &e.f)] {
            ema.shadow.save_into(&format!("ema.{name}"), &mut pack)?;
        }
        for (name, opt) in NET_NAMES.iter().zip(self.opt.all()) {
            opt.save_into(&format!("opt.{name}"), &mut pack)?;
        }
        Ok(pack)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        Ok(self.to_pack()?.save(path)?)
    }

    /// Restore every tensor and the iteration counter.
    pub fn load_pack(&mut self, pack: &TensorPack) -> Result<()> {
        let stored = config_from_pack(pack)?;
        if stored != self.cfg {
            return Err(Error::Checkpoint(
                "checkpoint configuration differs from the run".into(),
            ));
        }
        self.models.load_from("", pack)?;
        let e = &mut self.ema;
        for (name, ema) in [
            ("net_s", &mut e.net_s),
            ("net_t", &mut e.net_t),
            ("g", &mut e.g),
            ("f", &mut e.f),
        ] {
            ema.shadow.load_from(&format!("ema.{name}"), pack)?;
        }
        for (name, opt) in NET_NAMES.iter().zip(self.opt.all_mut()) {
            opt.load_from(&format!("opt.{name}"), pack)?;
        }
        self.iter = pack.meta_parse("iter")?;
        self.last = None;
        Ok(())
    }

    /// Continue a run from its checkpoint.
    pub fn resume(path: &Path, data_s: Dataset, data_t: Dataset) -> Result<Trainer> {
        let pack = load_pack(path)?;
        let mut tr = Trainer::new(config_from_pack(&pack)?, data_s, data_t)?;
        tr.load_pack(&pack)?;
        Ok(tr)
    }

    /// Take over the diffusion state of a warmup checkpoint from a run that
    /// differs only in its arm. Translators and discriminators are untouched
    /// during warmup, so this equals running the warmup again.
    pub fn adopt_warmup(&mut self, pack: &TensorPack) -> Result<()> {
        let mut other = config_from_pack(pack)?;
        let iter: usize = pack.meta_parse("iter")?;
        other.arm = self.cfg.arm;
        other.preset.clone_from(&self.cfg.preset);
        if other != self.cfg {
            return Err(Error::Checkpoint(
                "warmup checkpoint comes from a different configuration".into(),
            ));
        }
        if iter > self.cfg.warmup_iters || self.iter != 0 {
            return Err(Error::Checkpoint(format!(
                "checkpoint at iteration {iter} is past warmup ({}) or the run already started",
                self.cfg.warmup_iters
            )));
        }
        self.models.net_s.params.load_from("net_s", pack)?;
        self.models.net_t.params.load_from("net_t", pack)?;
        self.ema.net_s.shadow.load_from("ema.net_s", pack)?;
        self.ema.net_t.shadow.load_from("ema.net_t", pack)?;
        self.opt.net_s.load_from("opt.net_s", pack)?;
        self.opt.net_t.load_from("opt.net_t", pack)?;
        self.iter = iter;
        Ok(())
    }
}

/// Configuration and networks of a checkpoint, with EMA weights substituted.
pub fn eval_models_from_pack(pack: &TensorPack) -> Result<(TrainConfig, Models<f32>)> {
    let cfg = config_from_pack(pack)?;
    let mut m = Models::new(&cfg)?;
    m.load_from("", pack)?;
    m.net_s.params.load_from("ema.net_s", pack)?;
    m.net_t.params.load_from("ema.net_t", pack)?;
    m.g.params.load_from("ema.g", pack)?;
    m.f.params.load_from("ema.f", pack)?;
    Ok((cfg, m))
}

pub fn load_pack(path: &Path) -> Result<TensorPack> {
    TensorPack::load(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

/// Files of one training run.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.txt")
    }

    pub fn losses(&self) -> PathBuf {
        self.root.join("losses.csv")
    }

    pub fn checkpoint(&self, iter: usize) -> PathBuf {
        self.root.join("checkpoints").join(format!("iter_{iter:07}.ckpt"))
    }

    pub fn latest(&self) -> PathBuf {
        self.root.join("checkpoints").join("latest.ckpt")
    }

    pub fn sample(&self, iter: usize) -> PathBuf {
        self.root.join("samples").join(format!("iter_{iter:07}.pgm"))
    }

    /// Loss rows recorded before `iter`, header first.
    fn kept_rows(&self, iter: usize) -> Result<Vec<String>> {
        let path = self.losses();
        if !path.exists() {
            return Ok(vec![LOSS_COLUMNS.join(",")]);
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut lines = text.lines();
        let mut out = vec![lines.next().unwrap_or_default().to_string()];
        out.extend(
            lines
                .filter(|l| {
                    l.split(',')
                        .next()
                        .and_then(|v| v.parse::<usize>().ok())
                        .is_some_and(|i| i < iter)
                })
                .map(str::to_string),
        );
        Ok(out)
    }
}

/// Preview grid: training sources, their denoised reconstructions at
/// `t = 0.5` and the translations of the predicted components.
pub fn preview(tr: &Trainer, count: usize) -> Result<Tensor<f32>> {
    let m = tr.ema_models();
    let idx: Vec<usize> = (0..count.min(tr.data_s.len())).collect();
    let x = tr.data_s.batch(&idx);
    let t = vec![0.5; idx.len()];
    let eps = Tensor::zeros(x.shape().to_vec());
    let (c, _) = m.net_s.denoise(&forward_diffuse_batch(&x, &t, &eps)?, &t)?;
    let translated = m.g.translate(&c, &t)?;
    crate::data::grid(&[x, c.map(|v| -v), translated.map(|v| -v)])
}

/// Train until `until` (or the end of the run), logging every step and
/// checkpointing on schedule and at the stopping point.
pub fn train_run(
    tr: &mut Trainer,
    dir: &RunDir,
    until: Option<usize>,
    mut on_step: impl FnMut(&StepReport),
) -> Result<()> {
    fs::create_dir_all(&dir.root).map_err(|e| Error::io(&dir.root, e))?;
    crate::data::write_atomic(&dir.config(), tr.cfg.to_kv().as_bytes())?;
    let rows = dir.kept_rows(tr.iter)?;
    let path = dir.losses();
    let mut log = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    writeln!(log, "{}", rows.join("\n")).map_err(|e| Error::io(&path, e))?;
    let end = until.unwrap_or(usize::MAX).min(tr.cfg.run_length());
    while tr.iter < end {
        let r = tr.step()?;
        writeln!(log, "{}", r.csv_row()).map_err(|e| Error::io(&path, e))?;
        on_step(&r);
        let done = tr.iter == end;
        if done || (tr.cfg.checkpoint_every > 0 && tr.iter.is_multiple_of(tr.cfg.checkpoint_every)) {
            log.flush().map_err(|e| Error::io(&path, e))?;
            tr.save_checkpoint(&dir.checkpoint(tr.iter))?;
            tr.save_checkpoint(&dir.latest())?;
            let grid = preview(tr, 4)?;
            crate::data::write_atomic(&dir.sample(tr.iter), &crate::data::encode_pgm(&grid))?;
        }
    }
    log.flush().map_err(|e| Error::io(&path, e))
}

/// Clip two gradient lists to one joint norm.
fn clip_pair(a: &mut Vec<Option<Tensor<f32>>>, b: &mut Vec<Option<Tensor<f32>>>, max: f64) {
    let na = a.len();
    let mut all: Vec<Option<Tensor<f32>>> = a.drain(..).chain(b.drain(..)).collect();
    clip_global_norm(&mut all, max);
    let rest = all.split_off(na);
    *a = all;
    *b = rest;
}
