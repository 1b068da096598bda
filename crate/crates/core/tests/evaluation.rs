//! Evaluation harness on hand-built denoisers and translators.

use autodiff::Tensor;
use jointcycle::data::{spec_seed, Stream, Task};
use jointcycle::error::Result;
use jointcycle::metrics::{cycle_l1, evaluate, translate_all, EvalConfig, EvalNets};
use jointcycle::sampler::{Denoise, IdentityTranslator, OracleDenoiser, Translate};

fn solids(n: usize) -> Tensor<f32> {
    let imgs: Vec<_> = (0..n)
        .map(|i| {
            let spec = Task::SolidsEdges.sample_spec(spec_seed(Stream::Eval, 9, i));
            Task::SolidsEdges
                .render_source(&spec, 32)
                .unwrap()
                .reshape([1, 1, 32, 32])
                .unwrap()
        })
        .collect();
    Tensor::stack_batch(&imgs).unwrap()
}

/// Pixelwise stand-in for a trained denoiser.
struct Shrink;

impl Denoise<f32> for Shrink {
    fn predict(&self, x_t: &Tensor<f32>, t: f64) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let k = (1.0 - t) as f32;
        Ok((x_t.map(|v| -0.5 * v * k), x_t.map(|v| v * t as f32)))
    }
}

struct Scale(f32);

impl Translate<f32> for Scale {
    fn apply(&self, c: &Tensor<f32>, _t: f64) -> Result<Tensor<f32>> {
        Ok(c.map(|v| self.0 * v))
    }
}

#[test]
fn oracle_pipeline_reproduces_the_sources() {
    let x = solids(20);
    let oracle = OracleDenoiser { x0: x.clone() };
    let cfg = EvalConfig {
        chunk: 32,
        ..EvalConfig::new(20, 3)
    };
    let nets = EvalNets {
        from: &oracle,
        fwd: &IdentityTranslator,
        back: &IdentityTranslator,
        to: &oracle,
    };
    let out = translate_all(&x, &oracle, &IdentityTranslator, &oracle, &cfg).unwrap();
    assert!(out.max_abs_diff(&x) <= 1e-5);
    let r = evaluate(nets, &x, &x, false, &cfg).unwrap();
    assert!(r.ssim > 0.9999, "{}", r.ssim);
    assert!(r.mmd <= 1e-9);
    assert_eq!(r.cycle_l1, 0.0);
    assert!(r.edge_f1.is_none());
    assert_eq!(r.meta["count"], "20");
    assert_eq!(r.meta["steps"], "20");
}

#[test]
fn translation_ignores_chunking_and_threads() {
    let x = solids(21);
    let base = EvalConfig::new(8, 5);
    let run = |cfg: EvalConfig| translate_all(&x, &Shrink, &Scale(0.9), &Shrink, &cfg).unwrap();
    let reference = run(base);
    for (chunk, threads) in [(1, 1), (4, 2), (21, 1), (64, 3)] {
        let got = run(EvalConfig { chunk, threads, ..base });
        assert_eq!(got.data(), reference.data(), "chunk {chunk} threads {threads}");
    }
    assert_ne!(run(EvalConfig::new(8, 6)).data(), reference.data());
}

#[test]
fn evaluation_is_deterministic_and_checks_shapes() {
    let x = solids(20);
    let edges: Vec<Tensor<f32>> = (0..20)
        .map(|i| {
            let spec = Task::SolidsEdges.sample_spec(spec_seed(Stream::Eval, 9, i));
            Task::SolidsEdges
                .render_target(&spec, 32)
                .unwrap()
                .reshape([1, 1, 32, 32])
                .unwrap()
        })
        .collect();
    let y = Tensor::stack_batch(&edges).unwrap();
    let cfg = EvalConfig::new(6, 1);
    let go = || {
        let nets = EvalNets {
            from: &Shrink,
            fwd: &Scale(-1.0),
            back: &Scale(-1.0),
            to: &Shrink,
        };
        evaluate(nets, &x, &y, true, &cfg).unwrap()
    };
    let (a, b) = (go(), go());
    assert_eq!(a, b);
    assert!(a.edge_f1.is_some_and(|f| (0.0..=1.0).contains(&f)));
    assert_eq!(a.cycle_l1, 0.0);

    let nets = EvalNets {
        from: &Shrink,
        fwd: &Scale(1.0),
        back: &Scale(1.0),
        to: &Shrink,
    };
    assert!(evaluate(nets, &x, &y.narrow_batch(0, 19).unwrap(), false, &cfg).is_err());
}

#[test]
fn cycle_l1_of_a_doubling_map() {
    let x = solids(4);
    let want = x.data().iter().map(|v| v.abs() as f64).sum::<f64>() / x.numel() as f64;
    let got = cycle_l1(&x, &Scale(2.0), &IdentityTranslator).unwrap();
    assert!((got - want).abs() < 1e-6);
}
