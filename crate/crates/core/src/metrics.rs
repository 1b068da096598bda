//! Evaluation metrics and run reports.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use autodiff::{Element, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{write_atomic, Dataset, Manifest, EVAL};
use crate::error::{Error, Result};
use crate::sampler::{encode_components, generate, terminal_noise, Denoise, SamplerConfig, Translate};
use crate::trainer::{eval_models_from_pack, load_pack};

/// Dynamic range of `[-1, 1]` images.
pub const SSIM_RANGE: f64 = 2.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
/// Smallest set accepted by [`mmd`].
pub const MMD_MIN_SAMPLES: usize = 20;
/// Side of the pooled image fed to the MMD kernel.
pub const MMD_POOL: usize = 8;
pub const EDGE_THRESHOLDS: usize = 25;

/// Split `[.., H, W]` into `(planes, H, W)` as f64.
fn planes<T: Element>(x: &Tensor<T>) -> Result<(Vec<f64>, usize, usize, usize)> {
    let s = x.shape();
    if s.len() < 2 {
        return Err(Error::InvalidArgument(format!("image tensor of shape {s:?}")));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    Ok((x.to_f64_vec(), x.numel() / (h * w), h, w))
}

fn same_shape<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            expected: a.shape().to_vec(),
            got: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

fn ssim_constants() -> (f64, f64) {
    ((0.01 * SSIM_RANGE).powi(2), (0.03 * SSIM_RANGE).powi(2))
}

fn ssim_formula(ma: f64, mb: f64, vaa: f64, vbb: f64, vab: f64) -> f64 {
    let (c1, c2) = ssim_constants();
    ((2.0 * ma * mb + c1) * (2.0 * vab + c2)) / ((ma * ma + mb * mb + c1) * (vaa + vbb + c2))
}

/// Valid-mode separable filtering of one plane.
fn filter(p: &[f64], h: usize, w: usize, g: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| g[i] * p[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| g[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean windowed SSIM over every plane, Gaussian window of side
/// `min(11, H, W)`.
pub fn ssim<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    same_shape(a, b)?;
    let (pa, n, h, w) = planes(a)?;
    let pb = b.to_f64_vec();
    let g = gaussian_window(SSIM_WINDOW.min(h).min(w), SSIM_SIGMA);
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..n {
        let r = i * h * w..(i + 1) * h * w;
        let (xa, xb) = (&pa[r.clone()], &pb[r]);
        let prod = |u: &[f64], v: &[f64]| -> Vec<f64> { u.iter().zip(v).map(|(p, q)| p * q).collect() };
        let (ma, ..) = filter(xa, h, w, &g);
        let (mb, ..) = filter(xb, h, w, &g);
        let (eaa, ..) = filter(&prod(xa, xa), h, w, &g);
        let (ebb, ..) = filter(&prod(xb, xb), h, w, &g);
        let (eab, ..) = filter(&prod(xa, xb), h, w, &g);
        for j in 0..ma.len() {
            let (m1, m2) = (ma[j], mb[j]);
            total += ssim_formula(m1, m2, eaa[j] - m1 * m1, ebb[j] - m2 * m2, eab[j] - m1 * m2);
        }
        count += ma.len();
    }
    Ok(total / count as f64)
}

/// Average-pool every image to `MMD_POOL x MMD_POOL` and flatten.
pub fn pooled_vectors<T: Element>(x: &Tensor<T>) -> Result<Vec<Vec<f64>>> {
    let s = x.shape();
    if s.len() != 4 || !s[2].is_multiple_of(MMD_POOL) || !s[3].is_multiple_of(MMD_POOL) {
        return Err(Error::InvalidArgument(format!(
            "mmd expects [N, C, H, W] with sides divisible by {MMD_POOL}, got {s:?}"
        )));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (fy, fx) = (h / MMD_POOL, w / MMD_POOL);
    let d = x.to_f64_vec();
    Ok((0..n)
        .map(|i| {
            let mut v = Vec::with_capacity(c * MMD_POOL * MMD_POOL);
            for ch in 0..c {
                let base = (i * c + ch) * h * w;
                for py in 0..MMD_POOL {
                    for px in 0..MMD_POOL {
                        let mut acc = 0.0;
                        for y in 0..fy {
                            for x in 0..fx {
                                acc += d[base + (py * fy + y) * w + px * fx + x];
                            }
                        }
                        v.push(acc / (fy * fx) as f64);
                    }
                }
            }
            v
        })
        .collect())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Median pairwise Euclidean distance over the pooled sample.
pub fn median_bandwidth(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let all: Vec<&Vec<f64>> = a.iter().chain(b).collect();
    let mut d: Vec<f64> = Vec::with_capacity(all.len() * all.len() / 2);
    for i in 0..all.len() {
        for j in i + 1..all.len() {
            d.push(sq_dist(all[i], all[j]).sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let m = d.len() / 2;
    let med = if d.len().is_multiple_of(2) {
        0.5 * (d[m - 1] + d[m])
    } else {
        d[m]
    };
    if med > 0.0 {
        med
    } else {
        1.0
    }
}

/// Squared MMD with the Gaussian kernel `exp(-|x - y|^2 / (2 sigma^2))`.
/// The unbiased form drops the within-set diagonals.
pub fn mmd_vectors(a: &[Vec<f64>], b: &[Vec<f64>], sigma: f64, biased: bool) -> f64 {
    let gamma = 1.0 / (2.0 * sigma * sigma);
    let k = |x: &[f64], y: &[f64]| (-gamma * sq_dist(x, y)).exp();
    let within = |s: &[Vec<f64>]| {
        let n = s.len() as f64;
        let mut acc = 0.0;
        for i in 0..s.len() {
            for j in i + 1..s.len() {
                acc += k(&s[i], &s[j]);
            }
        }
        if biased {
            (2.0 * acc + n) / (n * n)
        } else {
            2.0 * acc / (n * (n - 1.0))
        }
    };
    let mut cross = 0.0;
    for x in a {
        for y in b {
            cross += k(x, y);
        }
    }
    within(a) + within(b) - 2.0 * cross / (a.len() * b.len()) as f64
}

/// Unbiased squared MMD between two image batches `[N, C, H, W]`.
/// `bandwidth` of `None` uses the median heuristic.
pub fn mmd<T: Element>(a: &Tensor<T>, b: &Tensor<T>, bandwidth: Option<f64>) -> Result<f64> {
    mmd_with(a, b, bandwidth, false)
}

/// [`mmd`] with the diagonal-inclusive (biased) estimator.
pub fn mmd_biased<T: Element>(a: &Tensor<T>, b: &Tensor<T>, bandwidth: Option<f64>) -> Result<f64> {
    mmd_with(a, b, bandwidth, true)
}

fn mmd_with<T: Element>(a: &Tensor<T>, b: &Tensor<T>, bandwidth: Option<f64>, biased: bool) -> Result<f64> {
    let (va, vb) = (pooled_vectors(a)?, pooled_vectors(b)?);
    if va.len() < MMD_MIN_SAMPLES || vb.len() < MMD_MIN_SAMPLES {
        return Err(Error::InvalidArgument(format!(
            "mmd needs at least {MMD_MIN_SAMPLES} samples per set, got {} and {}",
            va.len(),
            vb.len()
        )));
    }
    let sigma = bandwidth.unwrap_or_else(|| median_bandwidth(&va, &vb));
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("bandwidth {sigma}")));
    }
    Ok(mmd_vectors(&va, &vb, sigma, biased))
}

/// Unbiased MMD values under random relabelling of the pooled sample.
pub fn mmd_permutation_null(a: &[Vec<f64>], b: &[Vec<f64>], sigma: f64, rounds: usize, seed: u64) -> Vec<f64> {
    let mut pool: Vec<Vec<f64>> = a.iter().chain(b).cloned().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..rounds)
        .map(|_| {
            pool.shuffle(&mut rng);
            let (x, y) = pool.split_at(a.len());
            mmd_vectors(x, y, sigma, false)
        })
        .collect()
}

/// Edge-map thresholds, evenly spaced inside `(-1, 1)`.
pub fn edge_thresholds() -> Vec<f64> {
    (1..=EDGE_THRESHOLDS)
        .map(|k| -1.0 + 2.0 * k as f64 / (EDGE_THRESHOLDS + 1) as f64)
        .collect()
}

/// Whether any set pixel of `mask` lies within Chebyshev distance `tol`.
fn near(mask: &[bool], h: usize, w: usize, y: usize, x: usize, tol: usize) -> bool {
    let (y0, y1) = (y.saturating_sub(tol), (y + tol).min(h - 1));
    let (x0, x1) = (x.saturating_sub(tol), (x + tol).min(w - 1));
    (y0..=y1).any(|yy| (x0..=x1).any(|xx| mask[yy * w + xx]))
}

/// Precision/recall counts `(matched_pred, n_pred, matched_true, n_true)`.
pub fn edge_counts(pred: &[bool], truth: &[bool], h: usize, w: usize, tol: usize) -> (usize, usize, usize, usize) {
    let mut c = (0, 0, 0, 0);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if pred[i] {
                c.1 += 1;
                c.0 += near(truth, h, w, y, x, tol) as usize;
            }
            if truth[i] {
                c.3 += 1;
                c.2 += near(pred, h, w, y, x, tol) as usize;
            }
        }
    }
    c
}

fn f1(counts: (usize, usize, usize, usize)) -> f64 {
    let (mp, np, mt, nt) = counts;
    match (np, nt) {
        (0, 0) => 1.0,
        (0, _) | (_, 0) => 0.0,
        _ => {
            let (p, r) = (mp as f64 / np as f64, mt as f64 / nt as f64);
            if p + r == 0.0 {
                0.0
            } else {
                2.0 * p * r / (p + r)
            }
        }
    }
}

/// Best dataset-wide F1 over the threshold grid. Ground truth is `> 0`;
/// a prediction matches a true edge within a `(2 tol + 1)^2` window.
pub fn edge_f1<T: Element>(pred: &Tensor<T>, truth: &Tensor<T>, tol: usize) -> Result<f64> {
    same_shape(pred, truth)?;
    let (pp, n, h, w) = planes(pred)?;
    let tt: Vec<bool> = truth.to_f64_vec().into_iter().map(|v| v > 0.0).collect();
    let mut best = 0.0f64;
    for th in edge_thresholds() {
        let mut acc = (0, 0, 0, 0);
        for i in 0..n {
            let r = i * h * w..(i + 1) * h * w;
            let pm: Vec<bool> = pp[r.clone()].iter().map(|&v| v > th).collect();
            let c = edge_counts(&pm, &tt[r], h, w, tol);
            acc = (acc.0 + c.0, acc.1 + c.1, acc.2 + c.2, acc.3 + c.3);
        }
        best = best.max(f1(acc));
    }
    Ok(best)
}

/// Evaluation summary of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Faithfulness: SSIM between sources and translations.
    pub ssim: f64,
    /// Realism: MMD between translations and the target eval set.
    pub mmd: f64,
    /// Cross-modality tasks only.
    pub edge_f1: Option<f64>,
    /// Mean absolute component round-trip error.
    pub cycle_l1: f64,
    pub meta: BTreeMap<String, String>,
}

pub const LEDGER_COLUMNS: [&str; 9] = [
    "run", "arm", "seed", "steps", "iter", "ssim", "mmd", "edge_f1", "cycle_l1",
];

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        let ok = (-1.0..=1.0).contains(&self.ssim)
            && self.mmd.is_finite()
            && self.edge_f1.is_none_or(|f| (0.0..=1.0).contains(&f))
            && self.cycle_l1.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("report out of range: {self:?}")))
        }
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.meta {
            s.push_str(&format!("{k}={v}\n"));
        }
        s.push_str(&format!("ssim={}\nmmd={}\n", self.ssim, self.mmd));
        if let Some(f) = self.edge_f1 {
            s.push_str(&format!("edge_f1={f}\n"));
        }
        s.push_str(&format!("cycle_l1={}\n", self.cycle_l1));
        s
    }

    pub fn parse_kv(text: &str) -> Result<EvalReport> {
        let mut meta = BTreeMap::new();
        let mut num = BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("report line without '=': {line}")))?;
            match k {
                "ssim" | "mmd" | "edge_f1" | "cycle_l1" => {
                    let x: f64 = v
                        .parse()
                        .map_err(|_| Error::Config(format!("bad number for {k}: {v}")))?;
                    num.insert(k.to_string(), x);
                }
                _ => {
                    meta.insert(k.to_string(), v.to_string());
                }
            }
        }
        let get = |k: &str| {
            num.get(k)
                .copied()
                .ok_or_else(|| Error::Config(format!("report lacks {k}")))
        };
        Ok(EvalReport {
            ssim: get("ssim")?,
            mmd: get("mmd")?,
            edge_f1: num.get("edge_f1").copied(),
            cycle_l1: get("cycle_l1")?,
            meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_kv().as_bytes())
    }

    pub fn load(path: &Path) -> Result<EvalReport> {
        EvalReport::parse_kv(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    fn ledger_row(&self) -> Vec<String> {
        let m = |k: &str| self.meta.get(k).cloned().unwrap_or_default();
        vec![
            m("run"),
            m("arm"),
            m("seed"),
            m("steps"),
            m("iter"),
            self.ssim.to_string(),
            self.mmd.to_string(),
            self.edge_f1.map(|f| f.to_string()).unwrap_or_default(),
            self.cycle_l1.to_string(),
        ]
    }

    /// Append to a CSV ledger, writing the header for a new file.
    pub fn append_to_ledger(&self, path: &Path) -> Result<()> {
        let fresh = !path.exists();
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        let csv_err = |e: csv::Error| Error::Parse {
            path: path.to_path_buf(),
            reason: e.to_string(),
        };
        if fresh {
            w.write_record(LEDGER_COLUMNS).map_err(csv_err)?;
        }
        w.write_record(self.ledger_row()).map_err(csv_err)?;
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Read a ledger as rows of column-name to value.
pub fn read_ledger(path: &Path) -> Result<Vec<BTreeMap<String, String>>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let headers = r.headers().map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let headers: Vec<String> = headers.iter().map(str::to_string).collect();
    r.records()
        .map(|rec| {
            let rec = rec.map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })?;
            Ok(headers.iter().cloned().zip(rec.iter().map(str::to_string)).collect())
        })
        .collect()
}

/// Median of a non-empty slice.
pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len().is_multiple_of(2) {
        0.5 * (s[m - 1] + s[m])
    } else {
        s[m]
    }
}

/// Translation direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Source domain to target domain.
    SourceToTarget,
    TargetToSource,
}

impl Direction {
    pub fn parse(s: &str) -> Result<Direction> {
        match s {
            "s2t" | "S2T" | "forward" => Ok(Direction::SourceToTarget),
            "t2s" | "T2S" | "backward" => Ok(Direction::TargetToSource),
            _ => Err(Error::Config(format!("unknown direction {s:?} (s2t | t2s)"))),
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            Direction::SourceToTarget => "s2t",
            Direction::TargetToSource => "t2s",
        }
    }

    /// Domain names `(from, to)`.
    pub fn domains(&self) -> (&'static str, &'static str) {
        match self {
            Direction::SourceToTarget => ("S", "T"),
            Direction::TargetToSource => ("T", "S"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    pub steps: usize,
    pub seed: u64,
    pub direction: Direction,
    /// Edge matching tolerance in pixels.
    pub tol: usize,
    pub threads: usize,
    /// Images per sampler batch; results do not depend on it.
    pub chunk: usize,
}

impl EvalConfig {
    pub fn new(steps: usize, seed: u64) -> Self {
        EvalConfig {
            steps,
            seed,
            direction: Direction::SourceToTarget,
            tol: 1,
            threads: 1,
            chunk: 16,
        }
    }
}

/// Times at which the component round trip is measured.
pub const CYCLE_TIMES: [f64; 4] = [0.25, 0.5, 0.75, 1.0];

/// Seed of the terminal noise of eval image `index`.
pub fn image_noise_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x2545_F491_4F6C_DD1D) ^ (index as u64).wrapping_add(0x9E37_79B9)
}

/// Networks used by one translation direction.
pub struct EvalNets<'a, D, G, H> {
    pub from: &'a D,
    /// Forward translator.
    pub fwd: &'a G,
    /// Reverse translator, used for the round trip.
    pub back: &'a H,
    pub to: &'a D,
}

/// Translate every source with per-image noise, in fixed chunks.
pub fn translate_all<D, G>(sources: &Tensor<f32>, from: &D, fwd: &G, to: &D, cfg: &EvalConfig) -> Result<Tensor<f32>>
where
    D: Denoise<f32> + Sync,
    G: Translate<f32> + Sync,
{
    use rayon::prelude::*;
    let n = sources.shape()[0];
    let chunk = cfg.chunk.max(1);
    let sampler = SamplerConfig::new(cfg.steps, cfg.seed)?;
    let mut one = sources.shape().to_vec();
    one[0] = 1;
    let run = |start: usize| -> Result<Tensor<f32>> {
        let len = chunk.min(n - start);
        let x0 = sources.narrow_batch(start, len)?;
        let noise: Vec<Tensor<f32>> = (start..start + len)
            .map(|i| terminal_noise(&one, image_noise_seed(cfg.seed, i)))
            .collect();
        let trace = encode_components(&x0, from, fwd, &sampler)?;
        generate(trace, to, &sampler, Some(Tensor::stack_batch(&noise)?))
    };
    let starts: Vec<usize> = (0..n).step_by(chunk).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let parts: Vec<Tensor<f32>> = pool.install(|| starts.par_iter().map(|&s| run(s)).collect::<Result<_>>())?;
    Ok(Tensor::stack_batch(&parts)?)
}

/// Mean `|back(fwd(C, t), t) - C|` over `C = -x0` and [`CYCLE_TIMES`].
pub fn cycle_l1<G: Translate<f32>, H: Translate<f32>>(sources: &Tensor<f32>, fwd: &G, back: &H) -> Result<f64> {
    let c = sources.map(|v| -v);
    let mut total = 0.0;
    for &t in &CYCLE_TIMES {
        let round = back.apply(&fwd.apply(&c, t)?, t)?;
        let diff: f64 = round
            .data()
            .iter()
            .zip(c.data())
            .map(|(&a, &b)| (a as f64 - b as f64).abs())
            .sum();
        total += diff / c.data().len() as f64;
    }
    Ok(total / CYCLE_TIMES.len() as f64)
}

/// Translate the paired eval set and score it. `edges` selects whether
/// boundary F1 against the paired ground truth is meaningful.
pub fn evaluate<D, G, H>(
    nets: EvalNets<'_, D, G, H>,
    sources: &Tensor<f32>,
    targets: &Tensor<f32>,
    edges: bool,
    cfg: &EvalConfig,
) -> Result<EvalReport>
where
    D: Denoise<f32> + Sync,
    G: Translate<f32> + Sync,
    H: Translate<f32>,
{
    if sources.shape() != targets.shape() {
        return Err(Error::Shape {
            expected: sources.shape().to_vec(),
            got: targets.shape().to_vec(),
        });
    }
    let translated = translate_all(sources, nets.from, nets.fwd, nets.to, cfg)?;
    let edge_f1 = if edges {
        Some(edge_f1(&translated, targets, cfg.tol)?)
    } else {
        None
    };
    let mut meta = BTreeMap::new();
    meta.insert("steps".to_string(), cfg.steps.to_string());
    meta.insert("eval_seed".to_string(), cfg.seed.to_string());
    meta.insert("direction".to_string(), cfg.direction.tag().to_string());
    meta.insert("count".to_string(), sources.shape()[0].to_string());
    let report = EvalReport {
        ssim: ssim(sources, &translated)?,
        mmd: mmd(&translated, targets, None)?,
        edge_f1,
        cycle_l1: cycle_l1(sources, nets.fwd, nets.back)?,
        meta,
    };
    report.validate()?;
    Ok(report)
}

/// Evaluate the EMA networks of a checkpoint on the paired eval split under
/// `data_root`.
pub fn evaluate_run(checkpoint: &Path, data_root: &Path, cfg: &EvalConfig) -> Result<EvalReport> {
    let pack = load_pack(checkpoint)?;
    let (tc, m) = eval_models_from_pack(&pack)?;
    let (from, to) = cfg.direction.domains();
    let sources = Dataset::load(data_root, EVAL, from)?.images;
    let targets = Dataset::load(data_root, EVAL, to)?.images;
    let manifest = Manifest::load(&data_root.join(format!("{EVAL}.manifest")))?;
    if manifest.task != tc.task || manifest.size != tc.size {
        return Err(Error::Config(format!(
            "eval set is {} at {}px, checkpoint expects {} at {}px",
            manifest.task.name(),
            manifest.size,
            tc.task.name(),
            tc.size
        )));
    }
    let edges = tc.task.cross_modality() && cfg.direction == Direction::SourceToTarget;
    let nets = match cfg.direction {
        Direction::SourceToTarget => EvalNets {
            from: &m.net_s,
            fwd: &m.g,
            back: &m.f,
            to: &m.net_t,
        },
        Direction::TargetToSource => EvalNets {
            from: &m.net_t,
            fwd: &m.f,
            back: &m.g,
            to: &m.net_s,
        },
    };
    let mut report = evaluate(nets, &sources, &targets, edges, cfg)?;
    let iter: usize = pack.meta_parse("iter")?;
    report.meta.insert("arm".to_string(), tc.arm.name().to_string());
    report.meta.insert("seed".to_string(), tc.seed.to_string());
    report.meta.insert("iter".to_string(), iter.to_string());
    report.meta.insert("task".to_string(), tc.task.name().to_string());
    report
        .meta
        .insert("checkpoint".to_string(), checkpoint.display().to_string());
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        use rand::Rng;
        Tensor::new([1, 1, 16, 16], (0..256).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct windowed SSIM: every window position evaluated from scratch.
    fn ssim_direct(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        let (h, w) = (16, 16);
        let g = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
        let (da, db) = (a.data(), b.data());
        let mut total = 0.0;
        let n = h - SSIM_WINDOW + 1;
        for y in 0..n {
            for x in 0..n {
                let (mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..SSIM_WINDOW {
                    for j in 0..SSIM_WINDOW {
                        let wt = g[i] * g[j];
                        let (p, q) = (da[(y + i) * w + x + j], db[(y + i) * w + x + j]);
                        ma += wt * p;
                        mb += wt * q;
                        aa += wt * p * p;
                        bb += wt * q * q;
                        ab += wt * p * q;
                    }
                }
                total += ssim_formula(ma, mb, aa - ma * ma, bb - mb * mb, ab - ma * mb);
            }
        }
        total / (n * n) as f64
    }

    #[test]
    fn ssim_identity_negation_and_oracle() {
        let (a, b) = (ramp(1), ramp(2));
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-6);
        let (f, d) = (ssim(&a, &b).unwrap(), ssim_direct(&a, &b));
        assert!((f - d).abs() < 1e-6, "{f} {d}");
        assert!((ssim(&a, &b).unwrap() - ssim_direct(&a, &b)).abs() < 1e-6);
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-9);
        assert!(ssim(&a, &Tensor::zeros([1, 1, 8, 8])).is_err());
    }

    #[test]
    fn edge_f1_examples() {
        let mut truth = vec![-1.0f64; 64];
        for i in 2..6 {
            truth[2 * 8 + i] = 1.0;
        }
        let t = Tensor::new([1, 1, 8, 8], truth.clone()).unwrap();
        assert_eq!(edge_f1(&t, &t, 1).unwrap(), 1.0);
        assert_eq!(edge_f1(&Tensor::full([1, 1, 8, 8], -1.0), &t, 1).unwrap(), 0.0);
        let mut shifted = vec![-1.0f64; 64];
        for i in 2..6 {
            shifted[3 * 8 + i] = 1.0;
        }
        let s = Tensor::new([1, 1, 8, 8], shifted).unwrap();
        assert_eq!(edge_f1(&s, &t, 1).unwrap(), 1.0);
        assert_eq!(edge_f1(&s, &t, 0).unwrap(), 0.0);
    }

    #[test]
    fn report_kv_round_trip() {
        let mut meta = BTreeMap::new();
        meta.insert("arm".to_string(), "joint".to_string());
        let r = EvalReport {
            ssim: 0.5,
            mmd: 0.01,
            edge_f1: Some(0.7),
            cycle_l1: 0.1,
            meta,
        };
        assert_eq!(EvalReport::parse_kv(&r.to_kv()).unwrap(), r);
        r.validate().unwrap();
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
