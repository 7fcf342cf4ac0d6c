//! Forward pass of a small model with formula-defined weights, frozen against an
//! independent float64 implementation, plus the κ → 0 reduction of the loss.

use coupled_vae::autodiff::Tensor;
use coupled_vae::coupling::Coupling;
use coupled_vae::metrics::{image_log_likelihood, EvalMode, EvalSpec};
use coupled_vae::mnist::PIXELS;
use coupled_vae::model::{
    coupled_reconstruction_loss, decode, encode, kl_term, pixel_log_likelihood, total_loss, BatchNoise, LatentStats,
    LossConfig, ModelDims, Objective, VaeParams,
};
use coupled_vae::sampling::{sample_latent_noise, Purpose, Rng};

const MU: [f64; 2] = [0.012612171026528621, 0.024047098840556627];
const LOG_SIGMA: [f64; 2] = [0.001255917368861641, -0.009228737983349698];
const X_PRIME: [(usize, f64); 4] = [
    (0, 0.49720132363302627),
    (100, 0.4978184929377636),
    (400, 0.500356351057678),
    (783, 0.4993213664454478),
];
const LOG_LIKELIHOOD: f64 = -543.4313190705745;
const COUPLED_RECON: f64 = 494.5696555057971;
const KL_ANALYTIC: f64 = 0.0004548915687645418;
// Objective at ε = (0.3, −1.2).
const T_RECON: f64 = 494.57023068412053;
const T_KL: f64 = -0.15981538250869765;
const GAUSS_RECON: f64 = 543.4319192268597;

fn close(got: f64, want: f64, what: &str) {
    let rel = (got - want).abs() / want.abs().max(1e-300);
    assert!(rel < 1e-10, "{what}: {got} vs {want} (rel {rel:e})");
}

fn golden_dims() -> ModelDims {
    ModelDims {
        input: PIXELS,
        hidden: 16,
        hidden_layers: 1,
        z_dim: 2,
    }
}

/// Weight `e` of tensor `t` is `0.1·sin(0.37e + 1.3t)`, bias `e` is `0.01·cos(0.5e + t)`.
fn golden_params() -> VaeParams {
    let template = VaeParams::zeros(golden_dims()).unwrap();
    let named = template
        .named()
        .iter()
        .enumerate()
        .map(|(t, (name, tensor))| {
            let data = (0..tensor.len())
                .map(|e| {
                    let (e, t) = (e as f64, t as f64);
                    if name.ends_with(".w") {
                        0.1 * (0.37 * e + 1.3 * t).sin()
                    } else {
                        0.01 * (0.5 * e + t).cos()
                    }
                })
                .collect();
            (name.clone(), Tensor::from_vec(tensor.shape(), data).unwrap())
        })
        .collect();
    VaeParams::from_named(golden_dims(), named).unwrap()
}

fn golden_image() -> Vec<f64> {
    (0..PIXELS).map(|p| ((p * 13) % 29) as f64 / 28.0).collect()
}

fn unused_rng() -> Rng {
    Rng::new(0, Purpose::Test)
}

#[test]
fn encoder_matches_reference() {
    let x = Tensor::from_vec(&[1, PIXELS], golden_image()).unwrap();
    let stats = encode(&golden_params(), &x, false, 0.0, &mut unused_rng()).unwrap();
    for j in 0..2 {
        close(stats[0].mu[j], MU[j], "mu");
        close(stats[0].log_sigma[j], LOG_SIGMA[j], "log sigma");
    }
}

#[test]
fn decoder_and_likelihood_match_reference() {
    let params = golden_params();
    let z = Tensor::from_vec(&[1, 2], MU.to_vec()).unwrap();
    let x_prime = decode(&params, &z, false, 0.0, &mut unused_rng()).unwrap();
    for (i, want) in X_PRIME {
        close(x_prime.data()[i], want, "x'");
    }
    let x = golden_image();
    let ell: f64 = x.iter().zip(x_prime.data()).map(|(&a, &b)| pixel_log_likelihood(a, b)).sum();
    close(ell, LOG_LIKELIHOOD, "log-likelihood");
    let spec = EvalSpec {
        kappa_d: 0.0,
        kappa_l: 0.0,
        mode: EvalMode::Deterministic,
        seed: 0,
    };
    close(image_log_likelihood(&params, &x, &spec).unwrap(), LOG_LIKELIHOOD, "eval log-likelihood");
    let coupled = coupled_reconstruction_loss(&x, x_prime.data(), Coupling::new(0.15).unwrap()).unwrap();
    close(coupled, COUPLED_RECON, "coupled reconstruction");
    let stats = LatentStats {
        mu: MU.to_vec(),
        log_sigma: LOG_SIGMA.to_vec(),
    };
    close(kl_term(&stats, &[0.0, 0.0], 0.0).unwrap(), KL_ANALYTIC, "analytic kl");
}

fn objective_at_fixed_noise(kappa_d: f64, kappa_l: f64) -> (f64, f64, f64) {
    let config = LossConfig {
        kappa_l: Coupling::new(kappa_l).unwrap(),
        kappa_d,
        dropout: 0.0,
    };
    let mut objective = Objective::new(golden_dims(), &config, false).unwrap();
    let x = Tensor::from_vec(&[1, PIXELS], golden_image()).unwrap();
    let noise = BatchNoise {
        epsilon: Tensor::from_vec(&[1, 2], vec![0.3, -1.2]).unwrap(),
        masks: Vec::new(),
    };
    let loss = objective.evaluate(&golden_params(), &x, &noise).unwrap();
    (loss.reconstruction, loss.kl, loss.total)
}

#[test]
fn objective_matches_reference_with_student_t_latent() {
    let (recon, kl, total) = objective_at_fixed_noise(0.15, 0.15);
    close(recon, T_RECON, "reconstruction");
    close(kl, T_KL, "kl estimate");
    close(total, T_RECON + T_KL, "total");
}

#[test]
fn objective_matches_reference_gaussian() {
    let (recon, kl, total) = objective_at_fixed_noise(0.0, 0.0);
    close(recon, GAUSS_RECON, "reconstruction");
    close(kl, KL_ANALYTIC, "kl");
    close(total, GAUSS_RECON + KL_ANALYTIC, "total");
}

fn mnist_like_batch(rows: usize) -> Tensor {
    let mut rng = Rng::new(3, Purpose::Test);
    let data = (0..rows * PIXELS)
        .map(|_| match rng.uniform() {
            u if u < 0.7 => 0.0,
            u if u < 0.85 => 1.0,
            _ => rng.uniform(),
        })
        .collect();
    Tensor::from_vec(&[rows, PIXELS], data).unwrap()
}

#[test]
fn zero_coupling_reduces_to_bce_plus_gaussian_kl() {
    let dims = ModelDims {
        input: PIXELS,
        hidden: 64,
        hidden_layers: 2,
        z_dim: 2,
    };
    let params = VaeParams::init(dims, &mut Rng::new(9, Purpose::Init)).unwrap();
    let x = mnist_like_batch(8);
    let config = LossConfig {
        kappa_l: Coupling::new(0.0).unwrap(),
        kappa_d: 0.0,
        dropout: 0.1,
    };
    let mut rng = Rng::new(21, Purpose::Latent);
    let mut replay = rng.clone();
    let loss = total_loss(&params, &x, &config, false, &mut rng).unwrap();

    // Naive evaluation: plain binary cross-entropy and the closed-form Gaussian KL.
    replay.next_u64();
    let stats = encode(&params, &x, false, 0.0, &mut unused_rng()).unwrap();
    let (mut bce, mut kl) = (0.0, 0.0);
    for (i, s) in stats.iter().enumerate() {
        let eps = sample_latent_noise(2, 0.0, &mut replay).unwrap().epsilon;
        let z: Vec<f64> = (0..2).map(|j| s.mu[j] + s.log_sigma[j].exp() * eps[j]).collect();
        let x_prime = decode(&params, &Tensor::from_vec(&[1, 2], z).unwrap(), false, 0.0, &mut unused_rng()).unwrap();
        for (&a, &b) in x.row(i).iter().zip(x_prime.data()) {
            let b = b.clamp(1e-7, 1.0 - 1e-7);
            bce -= a * b.ln() + (1.0 - a) * (1.0 - b).ln();
        }
        kl += 0.5
            * (0..2)
                .map(|j| s.mu[j].powi(2) + (2.0 * s.log_sigma[j]).exp() - 1.0 - 2.0 * s.log_sigma[j])
                .sum::<f64>();
    }
    let n = stats.len() as f64;
    let (bce, kl) = (bce / n, kl / n);
    assert!((loss.reconstruction - bce).abs() <= 1e-12 * bce.abs(), "{} vs {bce}", loss.reconstruction);
    assert!((loss.kl - kl).abs() <= 1e-12 * kl.abs().max(1.0), "{} vs {kl}", loss.kl);
    assert!((loss.total - (bce + kl)).abs() <= 1e-12 * (bce + kl).abs());
}

#[test]
fn loss_is_finite_on_blank_and_saturated_images() {
    let dims = ModelDims {
        input: PIXELS,
        hidden: 32,
        hidden_layers: 2,
        z_dim: 2,
    };
    let params = VaeParams::init(dims, &mut Rng::new(1, Purpose::Init)).unwrap();
    for fill in [0.0, 1.0] {
        let x = Tensor::from_vec(&[2, PIXELS], vec![fill; 2 * PIXELS]).unwrap();
        for (kd, kl) in [(0.0, 0.0), (0.0, 0.15), (0.15, 0.0), (0.15, 0.15)] {
            let config = LossConfig {
                kappa_l: Coupling::new(kl).unwrap(),
                kappa_d: kd,
                dropout: 0.1,
            };
            let loss = total_loss(&params, &x, &config, true, &mut Rng::new(4, Purpose::Latent)).unwrap();
            assert!(loss.total.is_finite(), "fill {fill}, ({kd}, {kl}): {loss:?}");
        }
    }
}
