//! Finite-difference checks of every loss and network in f64.

use autodiff::{grad_check_fn, Tape, Tensor, Var};
use jointcycle::diffusion::{DenoiserConfig, DenoiserNet};
use jointcycle::losses::{
    cycle_loss, dcl_loss, diffusion_loss, discriminator_adv_loss, generator_adv_loss, identity_residual,
    perceptual_loss, DclConfig, DclReshape, FeatureExtractor,
};
use jointcycle::translator::{Depth, DiscriminatorConfig, PatchDiscriminator, TranslatorConfig, TranslatorNet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-3;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn four(shape: &[usize]) -> Vec<Tensor<f64>> {
    (0..4).map(|i| random(shape, 10 + i)).collect()
}

/// Run a loss built on this crate's error type under the gradient checker.
fn lift<T>(r: jointcycle::error::Result<T>) -> autodiff::Result<T> {
    r.map_err(|e| autodiff::Error::InvalidArgument(e.to_string()))
}

fn check(name: &str, err: f64) {
    assert!(err < TOL, "{name}: relative gradient error {err}");
}

#[test]
fn diffusion_loss_gradient() {
    let err = grad_check_fn(&four(&[2, 1, 3, 3]), STEP, |v| {
        lift(diffusion_loss(v[0], v[1], v[2], v[3]))
    })
    .unwrap();
    check("diffusion", err);
}

#[test]
fn adversarial_loss_gradients() {
    let xs = [random(&[2, 7, 2, 2], 1), random(&[2, 7, 2, 2], 2)];
    check(
        "disc",
        grad_check_fn(&xs, STEP, |v| lift(discriminator_adv_loss(v[0], v[1]))).unwrap(),
    );
    check(
        "gen",
        grad_check_fn(&xs[1..], STEP, |v| lift(generator_adv_loss(v[0]))).unwrap(),
    );
}

#[test]
fn contrastive_loss_gradients() {
    for reshape in [DclReshape::PerPixel, DclReshape::PerColumn] {
        let cfg = DclConfig {
            n: 7,
            tau: 0.1,
            reshape,
        };
        let xs = [random(&[2, 7, 2, 2], 3), random(&[2, 7, 2, 2], 4)];
        check(
            "dcl",
            grad_check_fn(&xs, STEP, |v| lift(dcl_loss(v[0], v[1], &cfg))).unwrap(),
        );
    }
}

#[test]
fn l1_loss_gradients() {
    // Differences kept away from zero, where |x| has a kink.
    let mut xs = four(&[2, 1, 3, 3]);
    xs[1] = xs[0].map(|v| v + 0.5);
    xs[3] = xs[2].map(|v| v - 0.5);
    check(
        "cycle",
        grad_check_fn(&xs, STEP, |v| lift(cycle_loss(v[0], v[1], v[2], v[3]))).unwrap(),
    );
    check(
        "identity",
        grad_check_fn(&xs, STEP, |v| lift(identity_residual(v[1], v[0], v[3], v[2]))).unwrap(),
    );
}

#[test]
fn perceptual_loss_gradient() {
    let ext = FeatureExtractor::<f64>::new(1, 3);
    let xs = four(&[1, 1, 16, 16]);
    check(
        "perceptual",
        grad_check_fn(&xs, STEP, |v| lift(perceptual_loss(&ext, v[0], v[1], v[2], v[3]))).unwrap(),
    );
}

/// Input followed by every parameter tensor of a network.
fn with_params(x: Tensor<f64>, params: &jointcycle::nn::ParamStore<f64>) -> Vec<Tensor<f64>> {
    std::iter::once(x)
        .chain(params.iter().map(|(_, t)| t.clone()))
        .collect()
}

/// Fixed positive weighting reducing a network output to a scalar.
fn project<'t>(out: Var<'t, f64>) -> Var<'t, f64> {
    let n = out.value().numel();
    let w: Vec<f64> = (0..n)
        .map(|i| 0.5 + ((i as f64 + 1.0) * 0.618_033_988_749_895).fract())
        .collect();
    let w = out.tape().constant(Tensor::new([n], w).unwrap());
    out.reshape([n]).unwrap().mul(w).unwrap().sum().unwrap()
}

/// Central differences against backprop with error `|a - c| <= ATOL + TOL * max(|a|, |c|)`.
///
/// Biases feeding a normalization have an exact zero gradient, so a purely
/// relative measure only sees round-off there.
fn net_check<F>(name: &str, inputs: &[Tensor<f64>], f: F)
where
    F: for<'t> Fn(&[Var<'t, f64>]) -> Var<'t, f64>,
{
    const ATOL: f64 = 1e-7;
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let grads = tape.backward(project(f(&vars))).unwrap();
    let eval = |probe: &[Tensor<f64>]| {
        let tape = Tape::new();
        let vars: Vec<_> = probe.iter().map(|x| tape.constant(x.clone())).collect();
        project(f(&vars)).item()
    };
    let mut probe = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .map(|g| g.data().to_vec())
            .unwrap_or(vec![0.0; inputs[k].numel()]);
        for (i, &a) in analytic.iter().enumerate() {
            let orig = inputs[k].data()[i];
            probe[k].data_mut()[i] = orig + STEP;
            let up = eval(&probe);
            probe[k].data_mut()[i] = orig - STEP;
            let down = eval(&probe);
            probe[k].data_mut()[i] = orig;
            let c = (up - down) / (2.0 * STEP);
            assert!(
                (a - c).abs() <= ATOL + TOL * a.abs().max(c.abs()),
                "{name}: input {k} coordinate {i}: analytic {a} vs numeric {c}"
            );
        }
    }
}

#[test]
fn denoiser_gradient() {
    let cfg = DenoiserConfig {
        channels: 1,
        size: 8,
        width: 4,
        time_dim: 8,
    };
    let net = DenoiserNet::<f64>::new(cfg, 1).unwrap();
    let xs = with_params(random(&[2, 1, 8, 8], 5), &net.params);
    net_check("denoiser", &xs, |v| {
        let out = net.forward(&v[1..], v[0], &[0.3, 0.8]).unwrap();
        out.c.add(out.eps.scale(0.5).unwrap()).unwrap()
    });
}

#[test]
fn translator_gradient() {
    for time_conditioned in [true, false] {
        let cfg = TranslatorConfig {
            channels: 1,
            size: 8,
            ngf: 2,
            depth: Depth::DESK,
            time_dim: 8,
            heads: 1,
            attn_pool: 2,
            time_conditioned,
        };
        let net = TranslatorNet::<f64>::new(cfg, 2).unwrap();
        let xs = with_params(random(&[1, 1, 8, 8], 6), &net.params);
        net_check("translator", &xs, |v| net.forward(&v[1..], v[0], &[0.4]).unwrap());
    }
}

#[test]
fn discriminator_gradient() {
    let cfg = DiscriminatorConfig {
        channels: 1,
        ndf: 2,
        out_dim: 7,
    };
    let net = PatchDiscriminator::<f64>::new(cfg, 3);
    let xs = with_params(random(&[1, 1, 16, 16], 7), &net.params);
    net_check("discriminator", &xs, |v| net.forward(&v[1..], v[0]).unwrap());
}
