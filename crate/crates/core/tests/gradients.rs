//! Analytic gradients of the training loss against central finite differences
//! on a 784→32→784 model, for every (κ_D, κ_L) ∈ {0, 0.15}².

use coupled_vae::autodiff::Tensor;
use coupled_vae::coupling::Coupling;
use coupled_vae::mnist::PIXELS;
use coupled_vae::model::{BatchNoise, LossConfig, ModelDims, Objective, VaeParams};
use coupled_vae::sampling::{Purpose, Rng};

const H: f64 = 1e-4;
const TOLERANCE: f64 = 1e-4;
const SAMPLES: usize = 150;
/// Both derivatives below this are treated as the same zero.
const ZERO: f64 = 1e-8;

fn dims() -> ModelDims {
    ModelDims {
        input: PIXELS,
        hidden: 32,
        hidden_layers: 1,
        z_dim: 2,
    }
}

fn batch(rows: usize, rng: &mut Rng) -> Tensor {
    // MNIST-like: mostly background with some grey and saturated pixels.
    let data = (0..rows * PIXELS)
        .map(|_| match rng.uniform() {
            u if u < 0.6 => 0.0,
            u if u < 0.8 => 1.0,
            _ => rng.uniform(),
        })
        .collect();
    Tensor::from_vec(&[rows, PIXELS], data).unwrap()
}

/// `(tensor index, element index)` pairs spread over every parameter tensor.
fn sample_coordinates(params: &VaeParams, rng: &mut Rng) -> Vec<(usize, usize)> {
    let named = params.named();
    let mut out = Vec::new();
    for i in 0..SAMPLES {
        let t = i % named.len();
        let e = rng.below(named[t].1.len() as u64) as usize;
        out.push((t, e));
    }
    out
}

/// Number of non-zero derivatives compared and the worst relative error.
fn check(kappa_d: f64, kappa_l: f64) -> (usize, f64) {
    let dims = dims();
    let config = LossConfig {
        kappa_l: Coupling::new(kappa_l).unwrap(),
        kappa_d,
        dropout: 0.1,
    };
    let mut rng = Rng::new(42, Purpose::Test);
    let params = VaeParams::init(dims, &mut Rng::new(0, Purpose::Init)).unwrap();
    let x = batch(4, &mut rng);
    let noise = BatchNoise::draw(
        &dims,
        4,
        kappa_d,
        0.1,
        &mut Rng::new(1, Purpose::Latent),
        &mut Rng::new(1, Purpose::Dropout),
    )
    .unwrap();
    let mut objective = Objective::new(dims, &config, true).unwrap();
    objective.evaluate(&params, &x, &noise).unwrap();
    let grads = objective.gradients().unwrap();
    let aligned = params.align(&grads).unwrap();

    let mut worst = 0.0f64;
    let mut compared = 0;
    let coords = sample_coordinates(&params, &mut rng);
    for &(t, e) in &coords {
        let name = params.named()[t].0.clone();
        let mut shifted = params.clone();
        let base = params.named()[t].1.data()[e];
        shifted.get_mut(&name).unwrap().data_mut()[e] = base + H;
        let plus = objective.evaluate(&shifted, &x, &noise).unwrap().total;
        shifted.get_mut(&name).unwrap().data_mut()[e] = base - H;
        let minus = objective.evaluate(&shifted, &x, &noise).unwrap().total;
        let numeric = (plus - minus) / (2.0 * H);
        let analytic = aligned[t].data()[e];
        let scale = analytic.abs().max(numeric.abs());
        if scale < ZERO {
            continue;
        }
        compared += 1;
        let rel = (analytic - numeric).abs() / scale;
        assert!(
            rel < TOLERANCE,
            "(kappa_d {kappa_d}, kappa_l {kappa_l}) {name}[{e}]: analytic {analytic:e} numeric {numeric:e} rel {rel:e}"
        );
        worst = worst.max(rel);
    }
    (compared, worst)
}

#[test]
fn gaussian_uncoupled() {
    let (n, worst) = check(0.0, 0.0);
    assert!(n >= 100, "{n}");
    eprintln!("{n} derivatives, worst relative error {worst:e}");
}

#[test]
fn gaussian_coupled_loss() {
    let (n, _) = check(0.0, 0.15);
    assert!(n >= 100, "{n}");
}

#[test]
fn student_t_uncoupled() {
    let (n, _) = check(0.15, 0.0);
    assert!(n >= 100, "{n}");
}

#[test]
fn student_t_coupled_loss() {
    let (n, _) = check(0.15, 0.15);
    assert!(n >= 100, "{n}");
}

#[test]
fn reparameterization_derivatives_are_exact() {
    // ∂z/∂μ = 1 and ∂z/∂σ = ε.
    use coupled_vae::autodiff::Graph;
    let mut g = Graph::new();
    let mu = g.param("mu", &[1, 2]);
    let sigma = g.param("sigma", &[1, 2]);
    let eps = g.input("eps", 2);
    let spread = g.mul(sigma, eps);
    let z = g.add(mu, spread);
    let loss = g.sum(z);
    let m = Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap();
    let s = Tensor::from_vec(&[1, 2], vec![1.0, 0.5]).unwrap();
    let e = Tensor::from_vec(&[1, 2], vec![2.0, -2.0]).unwrap();
    g.forward(&[("mu", &m), ("sigma", &s), ("eps", &e)]).unwrap();
    assert_eq!(g.value(z).unwrap().data(), &[3.0, 1.0]);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get("mu").unwrap().data(), &[1.0, 1.0]);
    assert_eq!(grads.get("sigma").unwrap().data(), &[2.0, -2.0]);
}
