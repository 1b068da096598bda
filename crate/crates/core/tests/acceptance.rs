//! Acceptance criteria. Each test writes one `criterion N: PASS|FAIL` line to
//! stderr (uncaptured) and then asserts it.

use autodiff::{grad_check, grad_check_fn, reference_cases, Tape, Tensor, TensorPack};
use jointcycle::config::{parse_kv, KvConfig};
use jointcycle::data::{make_paired_eval, make_unpaired_split, Dataset, Task, TRAIN_SOURCE, TRAIN_TARGET};
use jointcycle::diffusion::{forward_diffuse, true_component};
use jointcycle::losses::{
    cycle_loss, dcl_loss, diffusion_loss, discriminator_adv_loss, generator_adv_loss, identity_residual,
    perceptual_loss, DclConfig, DclReshape, FeatureExtractor, LossWeights,
};
use jointcycle::metrics::{evaluate_run, median, mmd, pooled_vectors, ssim, EvalConfig, EvalReport};
use jointcycle::sampler::{
    encode_components, generate, generate_path, IdentityTranslator, OracleDenoiser, SamplerConfig,
    CROSS_MODALITY_STEPS, SAME_MODALITY_STEPS,
};
use jointcycle::trainer::{train_run, Arm, RunDir, TrainConfig, Trainer};
use jointcycle::translator::{Depth, TranslatorConfig, TranslatorNet, OUT_KERNEL};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::io::Write;
use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::Instant;

fn report(n: usize, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr().lock(), "criterion {n}: {verdict} {detail}");
    assert!(pass, "criterion {n}: {detail}");
}

fn scratch(name: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("jointcycle_acceptance_{}_{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&d);
    d
}

fn uniform(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn criterion_01_forward_moments() {
    let start = Instant::now();
    let x0 = uniform(&[1, 1, 32, 32], 1);
    let draws = 10_000;
    let n = draws as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst_se, mut worst_pooled, mut worst_pixel) = (0.0f64, 0.0f64, 0.0f64);
    for t in [0.25, 0.5, 0.9] {
        let mut sum = vec![0.0; 1024];
        let mut sq = vec![0.0; 1024];
        for _ in 0..draws {
            let eps = Tensor::new([1, 1, 32, 32], (0..1024).map(|_| rng.sample(StandardNormal)).collect()).unwrap();
            let x = forward_diffuse(&x0, t, &eps).unwrap();
            for (i, v) in x.data().iter().enumerate() {
                sum[i] += v;
                sq[i] += v * v;
            }
        }
        let mut var_total = 0.0;
        for i in 0..1024 {
            let mean = sum[i] / n;
            let var = (sq[i] - n * mean * mean) / (n - 1.0);
            let se = (var / n).sqrt();
            worst_se = worst_se.max((mean - (1.0 - t) * x0.data()[i]).abs() / se);
            worst_pixel = worst_pixel.max((var / (t * t) - 1.0).abs());
            var_total += var;
        }
        worst_pooled = worst_pooled.max((var_total / 1024.0 / (t * t) - 1.0).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst_se <= 4.0 && worst_pixel <= 0.05 && secs < 10.0;
    report(
        1,
        pass,
        &format!(
            "max |mean error| {worst_se:.2} SE, per-pixel variance within {:.2}% of t^2 \
             (pixel average {:.2}%), {secs:.1}s",
            100.0 * worst_pixel,
            100.0 * worst_pooled
        ),
    );
}

#[test]
fn criterion_02_attenuation_boundary() {
    let x0 = uniform(&[2, 1, 32, 32], 3).cast::<f32>();
    let eps = uniform(&[2, 1, 32, 32], 4).cast::<f32>();
    let at_one = forward_diffuse(&x0, 1.0, &eps).unwrap();
    let bitwise = at_one
        .data()
        .iter()
        .zip(eps.data())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    let c = true_component(&x0);
    let cancels = x0.data().iter().zip(c.data()).all(|(x, c)| x + c == 0.0);
    report(
        2,
        bitwise && cancels,
        &format!("x_1 == eps bitwise: {bitwise}, x0 + C == 0: {cancels}"),
    );
}

#[test]
fn criterion_03_sampler_oracle() {
    let start = Instant::now();
    let x0 = uniform(&[2, 1, 32, 32], 5).cast::<f32>();
    let oracle = OracleDenoiser { x0: x0.clone() };
    let mut worst = 0.0f64;
    for steps in [1, 2, 10, 100] {
        let cfg = SamplerConfig::new(steps, 9).unwrap();
        let trace = encode_components(&x0, &oracle, &IdentityTranslator, &cfg).unwrap();
        worst = worst.max(generate(trace, &oracle, &cfg, None).unwrap().max_abs_diff(&x0));
    }
    let one = |v: f32| Tensor::new([1, 1, 1, 1], vec![v]).unwrap();
    let scalar = OracleDenoiser { x0: one(0.5) };
    let cfg = SamplerConfig::new(2, 0).unwrap();
    let trace = encode_components(&one(0.5), &scalar, &IdentityTranslator, &cfg).unwrap();
    let path: Vec<f32> = generate_path(trace, &scalar, &cfg, Some(one(1.0)))
        .unwrap()
        .iter()
        .map(|x| x.item())
        .collect();
    let secs = start.elapsed().as_secs_f64();
    let pass = worst <= 1e-5 && path == [1.0, 0.75, 0.5] && secs < 5.0;
    report(
        3,
        pass,
        &format!("max error {worst:.1e} over N in {{1,2,10,100}}, N=2 trace {path:?}, {secs:.2}s"),
    );
}

fn lift<T>(r: jointcycle::error::Result<T>) -> autodiff::Result<T> {
    r.map_err(|e| autodiff::Error::InvalidArgument(e.to_string()))
}

#[test]
fn criterion_04_gradient_suite() {
    const STEP: f64 = 1e-5;
    let start = Instant::now();
    let mut results: Vec<(String, f64)> = reference_cases(4)
        .into_iter()
        .map(|(p, inputs)| (p.name().to_string(), grad_check(&p, &inputs, 1e-4).unwrap()))
        .collect();
    let four = |shape: &[usize]| -> Vec<Tensor<f64>> { (0..4).map(|i| uniform(shape, 20 + i)).collect() };
    let maps = [uniform(&[2, 7, 2, 2], 30), uniform(&[2, 7, 2, 2], 31)];
    let mut l1 = four(&[2, 1, 3, 3]);
    l1[1] = l1[0].map(|v| v + 0.5);
    l1[3] = l1[2].map(|v| v - 0.5);
    let ext = FeatureExtractor::<f64>::new(1, 3);
    let mut check = |name: &str, err: autodiff::Result<f64>| results.push((name.to_string(), err.unwrap()));
    check(
        "diffusion",
        grad_check_fn(&four(&[2, 1, 3, 3]), STEP, |v| {
            lift(diffusion_loss(v[0], v[1], v[2], v[3]))
        }),
    );
    check(
        "adversarial (discriminator)",
        grad_check_fn(&maps, STEP, |v| lift(discriminator_adv_loss(v[0], v[1]))),
    );
    check(
        "adversarial (generator)",
        grad_check_fn(&maps[1..], STEP, |v| lift(generator_adv_loss(v[0]))),
    );
    for reshape in [DclReshape::PerPixel, DclReshape::PerColumn] {
        let cfg = DclConfig {
            reshape,
            ..DclConfig::default()
        };
        check("dcl", grad_check_fn(&maps, STEP, |v| lift(dcl_loss(v[0], v[1], &cfg))));
    }
    check(
        "cycle",
        grad_check_fn(&l1, STEP, |v| lift(cycle_loss(v[0], v[1], v[2], v[3]))),
    );
    check(
        "identity",
        grad_check_fn(&l1, STEP, |v| lift(identity_residual(v[1], v[0], v[3], v[2]))),
    );
    check(
        "perceptual",
        grad_check_fn(&four(&[1, 1, 16, 16]), STEP, |v| {
            lift(perceptual_loss(&ext, v[0], v[1], v[2], v[3]))
        }),
    );
    let secs = start.elapsed().as_secs_f64();
    let failing: Vec<_> = results.iter().filter(|(_, e)| *e > 1e-3).collect();
    let worst = results.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    report(
        4,
        failing.is_empty() && secs < 120.0,
        &format!(
            "{} checks, worst relative error {worst:.1e}, failing {failing:?}, {secs:.1}s",
            results.len()
        ),
    );
}

fn normalized_rows(m: &Tensor<f64>) -> Vec<Vec<f64>> {
    let s = m.shape();
    let (b, n, hw) = (s[0], s[1], s[2] * s[3]);
    let mut out = Vec::new();
    for bi in 0..b {
        for p in 0..hw {
            let v: Vec<f64> = (0..n).map(|c| m.data()[(bi * n + c) * hw + p]).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            out.push(v.iter().map(|x| x / norm).collect());
        }
    }
    out
}

fn dcl_brute(real: &Tensor<f64>, fake: &Tensor<f64>, tau: f64) -> f64 {
    let (r, f) = (normalized_rows(real), normalized_rows(fake));
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / tau;
    let n = r.len();
    let mut total = 0.0;
    for i in 0..n {
        let denom: f64 = (0..n).filter(|&j| j != i).map(|j| dot(&r[i], &r[j]).exp()).sum::<f64>()
            + f.iter().map(|v| dot(&r[i], v).exp()).sum::<f64>();
        for j in (0..n).filter(|&j| j != i) {
            total += denom.ln() - dot(&r[i], &r[j]);
        }
    }
    total / (n * (n - 1)) as f64
}

fn mmd_brute(a: &Tensor<f64>, b: &Tensor<f64>, sigma: f64) -> f64 {
    let (va, vb) = (pooled_vectors(a).unwrap(), pooled_vectors(b).unwrap());
    let k = |x: &Vec<f64>, y: &Vec<f64>| {
        (-x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / (2.0 * sigma * sigma)).exp()
    };
    let within = |v: &[Vec<f64>]| {
        let mut s = 0.0;
        for i in 0..v.len() {
            for j in 0..v.len() {
                if i != j {
                    s += k(&v[i], &v[j]);
                }
            }
        }
        s / (v.len() * (v.len() - 1)) as f64
    };
    let cross: f64 = va
        .iter()
        .flat_map(|x| vb.iter().map(move |y| (x, y)))
        .map(|(x, y)| k(x, y))
        .sum();
    within(&va) + within(&vb) - 2.0 * cross / (va.len() * vb.len()) as f64
}

#[test]
fn criterion_05_loss_oracles() {
    let tape = Tape::new();
    let cfg = DclConfig::default();
    let mut dcl_err = 0.0f64;
    for seed in 0..5 {
        let (real, fake) = (uniform(&[2, 7, 3, 3], seed), uniform(&[2, 7, 3, 3], seed + 100));
        let got = dcl_loss(tape.constant(real.clone()), tape.constant(fake.clone()), &cfg)
            .unwrap()
            .item();
        dcl_err = dcl_err.max((got - dcl_brute(&real, &fake, cfg.tau)).abs());
    }
    let mut mmd_err = 0.0f64;
    for seed in 0..3 {
        let a = uniform(&[20, 1, 16, 16], seed);
        let b = uniform(&[24, 1, 16, 16], seed + 50).map(|v| 0.7 * v + 0.2);
        mmd_err = mmd_err.max((mmd(&a, &b, Some(1.3)).unwrap() - mmd_brute(&a, &b, 1.3)).abs());
    }
    let x = uniform(&[3, 1, 32, 32], 8);
    let ssim_self = ssim(&x, &x).unwrap();
    let c = tape.constant(uniform(&[2, 1, 8, 8], 9));
    let d = tape.constant(uniform(&[2, 1, 8, 8], 10));
    let cyc = cycle_loss(c, c, d, d).unwrap().item();
    let idt = identity_residual(c, c, d, d).unwrap().item();
    let pass = dcl_err <= 1e-6 && mmd_err <= 1e-9 && (ssim_self - 1.0).abs() <= 1e-6 && cyc == 0.0 && idt == 0.0;
    report(
        5,
        pass,
        &format!(
            "dcl error {dcl_err:.1e}, mmd error {mmd_err:.1e}, ssim(x,x) = {ssim_self}, \
             cycle {cyc}, identity {idt} under identity maps"
        ),
    );
}

#[test]
fn criterion_06_default_configuration() {
    let w = LossWeights::default().as_array();
    let dcl = DclConfig::default();
    let paper = TrainConfig::paper();
    let t = TranslatorNet::<f32>::new(
        TranslatorConfig {
            depth: Depth::PAPER,
            ngf: 4,
            ..TranslatorConfig::default()
        },
        0,
    )
    .unwrap();
    let (name, out) = t.params.iter().filter(|(_, v)| v.shape().len() == 4).last().unwrap();
    let checks = [
        ("weights", w == [5e-2, 1.0, 10.0, 5.0, 0.5, 0.02]),
        (
            "dcl",
            dcl.n == 7 && dcl.tau == 0.1 && dcl.reshape == DclReshape::PerPixel,
        ),
        (
            "sampler presets",
            SAME_MODALITY_STEPS == 100 && CROSS_MODALITY_STEPS == 200,
        ),
        (
            "paper depth",
            (Depth::PAPER.n_down, Depth::PAPER.n_res, Depth::PAPER.n_up) == (3, 12, 3),
        ),
        (
            "paper preset",
            paper.depth == Depth::PAPER && paper.weights == LossWeights::default(),
        ),
        (
            "output conv",
            OUT_KERNEL == 7 && out.shape()[2..] == [7, 7] && out.shape()[0] == 1,
        ),
    ];
    let failing: Vec<_> = checks.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();
    report(
        6,
        failing.is_empty(),
        &format!(
            "weights {w:?}, dcl n={} tau={}, final conv {name} {:?}, failing {failing:?}",
            dcl.n,
            dcl.tau,
            out.shape()
        ),
    );
}

fn pack_bytes(p: &TensorPack) -> Vec<u8> {
    let mut buf = Vec::new();
    p.write_to(&mut buf).unwrap();
    buf
}

#[test]
fn criterion_10_determinism_and_persistence() {
    let root = scratch("c10");
    make_unpaired_split(&root, Task::SolidsEdges, 16, 16, 32, 5).unwrap();
    let load = || {
        (
            Dataset::load(&root, TRAIN_SOURCE, "S").unwrap(),
            Dataset::load(&root, TRAIN_TARGET, "T").unwrap(),
        )
    };
    let mut cfg = TrainConfig::quick();
    cfg.apply(&parse_kv("total_iters=5\nwarmup_iters=2\ncheckpoint_every=0\nseed=4").unwrap())
        .unwrap();
    let run = |name: &str| {
        let (s, t) = load();
        let mut tr = Trainer::new(cfg.clone(), s, t).unwrap();
        let dir = RunDir::new(root.join(name));
        train_run(&mut tr, &dir, None, |_| {}).unwrap();
        std::fs::read(dir.losses()).unwrap()
    };
    let (a, b) = (run("a"), run("b"));
    let csv_same = a == b && String::from_utf8_lossy(&a).lines().count() == 6;

    let (s, t) = load();
    let mut tr = Trainer::new(cfg.clone(), s, t).unwrap();
    for _ in 0..3 {
        tr.step().unwrap();
    }
    let path = root.join("mid.ckpt");
    tr.save_checkpoint(&path).unwrap();
    let (s, t) = load();
    let mut restored = Trainer::resume(&path, s, t).unwrap();
    let (ra, rb) = (tr.step().unwrap(), restored.step().unwrap());
    let step_same = ra.to_string() == rb.to_string()
        && pack_bytes(&tr.to_pack().unwrap()) == pack_bytes(&restored.to_pack().unwrap());
    let _ = std::fs::remove_dir_all(&root);
    report(
        10,
        csv_same && step_same,
        &format!("loss CSVs identical: {csv_same}, step after reload identical: {step_same}"),
    );
}

/// Arms, seeds and sizes of the shared ablation experiment.
const SEEDS: [u64; 3] = [1, 2, 3];
const TRAIN_PER_DOMAIN: usize = 200;
const EVAL_PAIRS: usize = 32;
const EVAL_SEED: u64 = 7;

struct SeedResult {
    joint: EvalReport,
    joint_50: EvalReport,
    no_joint: EvalReport,
    no_time: EvalReport,
}

/// Train the three arms on every seed (sharing each seed's warmup) and
/// evaluate them. Computed once for criteria 7 to 9.
fn experiment() -> &'static Vec<SeedResult> {
    static RESULTS: OnceLock<Vec<SeedResult>> = OnceLock::new();
    RESULTS.get_or_init(|| {
        let root = scratch("ablation");
        make_unpaired_split(&root, Task::SolidsEdges, TRAIN_PER_DOMAIN, TRAIN_PER_DOMAIN, 32, 0).unwrap();
        make_paired_eval(&root, Task::SolidsEdges, EVAL_PAIRS, 32, 0).unwrap();
        let s = Dataset::load(&root, TRAIN_SOURCE, "S").unwrap();
        let t = Dataset::load(&root, TRAIN_TARGET, "T").unwrap();
        let results = SEEDS
            .iter()
            .map(|&seed| {
                let mut warm: Option<TensorPack> = None;
                let mut ckpt = |arm: Arm| {
                    let cfg = TrainConfig {
                        seed,
                        arm,
                        ..TrainConfig::quick()
                    };
                    let mut tr = Trainer::new(cfg.clone(), s.clone(), t.clone()).unwrap();
                    if let Some(w) = &warm {
                        tr.adopt_warmup(w).unwrap();
                    }
                    while !tr.finished() {
                        tr.step().unwrap();
                        if tr.iter == cfg.warmup_iters && warm.is_none() {
                            warm = Some(tr.to_pack().unwrap());
                        }
                    }
                    let path = root.join(format!("seed{seed}_{}.ckpt", arm.name()));
                    tr.save_checkpoint(&path).unwrap();
                    path
                };
                let (joint, no_joint, no_time) = (ckpt(Arm::Joint), ckpt(Arm::NoJoint), ckpt(Arm::NoTime));
                let eval = |path: &PathBuf, steps: usize| {
                    evaluate_run(path, &root, &EvalConfig::new(steps, EVAL_SEED)).unwrap()
                };
                let r = SeedResult {
                    joint: eval(&joint, CROSS_MODALITY_STEPS),
                    joint_50: eval(&joint, 50),
                    no_joint: eval(&no_joint, CROSS_MODALITY_STEPS),
                    no_time: eval(&no_time, CROSS_MODALITY_STEPS),
                };
                for (name, rep) in [
                    ("joint", &r.joint),
                    ("joint@50", &r.joint_50),
                    ("no-joint", &r.no_joint),
                    ("no-time", &r.no_time),
                ] {
                    let _ = writeln!(
                        std::io::stderr().lock(),
                        "ablation seed {seed} {name}: ssim {:.4} mmd {:.5} edge_f1 {:.4} cycle_l1 {:.4}",
                        rep.ssim,
                        rep.mmd,
                        rep.edge_f1.unwrap_or(f64::NAN),
                        rep.cycle_l1
                    );
                }
                r
            })
            .collect();
        let _ = std::fs::remove_dir_all(&root);
        results
    })
}

fn med(results: &[SeedResult], f: impl Fn(&SeedResult) -> f64) -> f64 {
    median(&results.iter().map(f).collect::<Vec<_>>())
}

fn f1(r: &EvalReport) -> f64 {
    r.edge_f1.expect("edge task")
}

#[test]
fn criterion_07_joint_training_ablation() {
    let r = experiment();
    let (mmd_j, mmd_n) = (med(r, |s| s.joint.mmd), med(r, |s| s.no_joint.mmd));
    let (f1_j, f1_n) = (med(r, |s| f1(&s.joint)), med(r, |s| f1(&s.no_joint)));
    report(
        7,
        mmd_j < mmd_n && f1_j > f1_n,
        &format!(
            "median mmd joint {mmd_j:.5} vs no-joint {mmd_n:.5}; median edge_f1 joint {f1_j:.4} vs no-joint {f1_n:.4}"
        ),
    );
}

#[test]
fn criterion_08_time_conditioning_ablation() {
    let r = experiment();
    let (f1_j, f1_t) = (med(r, |s| f1(&s.joint)), med(r, |s| f1(&s.no_time)));
    report(
        8,
        f1_t <= f1_j,
        &format!("median edge_f1 no-time {f1_t:.4} vs joint {f1_j:.4}"),
    );
}

#[test]
fn criterion_09_step_count_trend() {
    let r = experiment();
    let (f1_50, f1_200) = (med(r, |s| f1(&s.joint_50)), med(r, |s| f1(&s.joint)));
    let (mmd_50, mmd_200) = (med(r, |s| s.joint_50.mmd), med(r, |s| s.joint.mmd));
    report(
        9,
        f1_50 <= f1_200,
        &format!("median edge_f1 at 50 steps {f1_50:.4} vs 200 steps {f1_200:.4} (mmd {mmd_50:.5} vs {mmd_200:.5})"),
    );
}
