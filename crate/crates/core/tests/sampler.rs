use coupled_vae::model::{kl_term, LatentStats};
use coupled_vae::sampling::{
    dof_from_kappa, log_density_diag_normal, log_density_mv_student_t, sample_latent_noise,
    sample_standard_normal, Purpose, Rng,
};

const DRAWS: usize = 200_000;

// mpmath quadrature of KL(t_nu(0, I) || N(0, I)) for nu = 1/0.15.
const KL_T_NORMAL_D1: f64 = 0.059_262_9;
const KL_T_NORMAL_D2: f64 = 0.128_571_428;

#[test]
fn t_noise_variance() {
    let mut rng = Rng::new(0, Purpose::Test);
    let mut sums = [0.0f64; 2];
    let mut squares = [0.0f64; 2];
    for _ in 0..DRAWS {
        let n = sample_latent_noise(2, 0.15, &mut rng).unwrap();
        for j in 0..2 {
            sums[j] += n.epsilon[j];
            squares[j] += n.epsilon[j] * n.epsilon[j];
        }
    }
    for j in 0..2 {
        let mean = sums[j] / DRAWS as f64;
        let var = squares[j] / DRAWS as f64 - mean * mean;
        assert!((1.36..=1.50).contains(&var), "coordinate {j}: variance {var}");
    }
}

#[test]
fn shared_radial_factor_is_exact() {
    let mut rng = Rng::new(0, Purpose::Test);
    for _ in 0..10_000 {
        let n = sample_latent_noise(2, 0.15, &mut rng).unwrap();
        for j in 0..2 {
            assert_eq!(n.epsilon[j].to_bits(), (n.gaussian[j] * n.radial).to_bits());
        }
        // The recovered ratios agree to rounding of one multiply and one divide.
        let (r1, r2) = (n.epsilon[0] / n.gaussian[0], n.epsilon[1] / n.gaussian[1]);
        assert!((r1 - r2).abs() <= 2.0 * f64::EPSILON * r1.abs(), "{r1} {r2}");
    }
}

#[test]
fn gaussian_limit_of_noise() {
    let mut a = Rng::new(5, Purpose::Test);
    let mut b = Rng::new(5, Purpose::Test);
    for _ in 0..100 {
        let n = sample_latent_noise(2, 0.0, &mut a).unwrap();
        assert_eq!(n.epsilon, sample_standard_normal(2, &mut b).unwrap());
    }
}

#[test]
fn t_noise_has_heavier_tails() {
    let tail = |kappa: f64| {
        let mut rng = Rng::new(0, Purpose::Test);
        (0..DRAWS)
            .filter(|_| sample_latent_noise(2, kappa, &mut rng).unwrap().epsilon[0].abs() > 4.0)
            .count()
    };
    let (heavy, light) = (tail(0.15), tail(0.0));
    assert!(heavy > light, "{heavy} vs {light}");
}

#[test]
fn t_density_integrates_to_one_in_2d() {
    let nu = 6.6667;
    let h = 0.05;
    let steps = (60.0 / h) as usize;
    let mut total = 0.0;
    for i in 0..=steps {
        let x = -30.0 + h * i as f64;
        let wx = if i == 0 || i == steps { 0.5 } else { 1.0 };
        for j in 0..=steps {
            let y = -30.0 + h * j as f64;
            let wy = if j == 0 || j == steps { 0.5 } else { 1.0 };
            total += wx * wy * log_density_mv_student_t(&[x, y], &[0.0, 0.0], &[1.0, 1.0], nu).unwrap().exp();
        }
    }
    total *= h * h;
    assert!((total - 1.0).abs() < 1e-3, "{total}");
}

#[test]
fn densities_integrate_to_one_in_1d() {
    let h = 1e-3;
    let steps = (120.0 / h) as usize;
    let integrate = |f: &dyn Fn(f64) -> f64| {
        (0..=steps)
            .map(|i| {
                let w = if i == 0 || i == steps { 0.5 } else { 1.0 };
                w * f(-60.0 + h * i as f64)
            })
            .sum::<f64>()
            * h
    };
    let normal = integrate(&|x| log_density_diag_normal(&[x], &[0.3], &[1.7]).unwrap().exp());
    assert!((normal - 1.0).abs() < 1e-4, "{normal}");
    // nu = 20 keeps the mass beyond +/-60 far below the tolerance.
    let t = integrate(&|x| log_density_mv_student_t(&[x], &[0.3], &[1.7], 20.0).unwrap().exp());
    assert!((t - 1.0).abs() < 1e-4, "{t}");
}

#[test]
fn t_density_approaches_normal() {
    let mut rng = Rng::new(11, Purpose::Test);
    for _ in 0..200 {
        // Points drawn from the distribution; far outside it the two differ by ~m⁴/(4ν).
        let mu: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
        let sigma: Vec<f64> = (0..3).map(|_| 0.2 + rng.uniform() * 2.0).collect();
        let z: Vec<f64> = mu.iter().zip(&sigma).map(|(m, s)| m + s * rng.normal()).collect();
        let t = log_density_mv_student_t(&z, &mu, &sigma, 1e8).unwrap();
        let n = log_density_diag_normal(&z, &mu, &sigma).unwrap();
        assert!((t - n).abs() < 1e-4, "{t} vs {n}");
    }
}

/// KL(t || N) for identity scale by radial quadrature: `∫ S_d(r) t(r) [ln t(r) − ln N(r)] dr`.
fn kl_quadrature(d: usize, nu: f64) -> f64 {
    let h = 1e-4;
    let shell = |r: f64| if d == 1 { 2.0 } else { 2.0 * std::f64::consts::PI * r };
    let mut total = 0.0;
    let steps = (200.0 / h) as usize;
    for i in 0..=steps {
        let r = h * i as f64;
        let mut z = vec![0.0; d];
        z[0] = r;
        let lt = log_density_mv_student_t(&z, &vec![0.0; d], &vec![1.0; d], nu).unwrap();
        let ln = log_density_diag_normal(&z, &vec![0.0; d], &vec![1.0; d]).unwrap();
        let w = if i == 0 || i == steps { 0.5 } else { 1.0 };
        total += w * shell(r) * lt.exp() * (lt - ln);
    }
    total * h
}

#[test]
fn quadrature_matches_high_precision_oracle() {
    let nu = dof_from_kappa(0.15);
    assert!((kl_quadrature(1, nu) - KL_T_NORMAL_D1).abs() < 1e-6);
    assert!((kl_quadrature(2, nu) - KL_T_NORMAL_D2).abs() < 1e-6);
}

#[test]
fn monte_carlo_kl_matches_quadrature() {
    let stats = LatentStats {
        mu: vec![0.0, 0.0],
        log_sigma: vec![0.0, 0.0],
    };
    let mut rng = Rng::new(0, Purpose::Test);
    let mut sum = 0.0;
    for _ in 0..DRAWS {
        let noise = sample_latent_noise(2, 0.15, &mut rng).unwrap();
        sum += kl_term(&stats, &noise.epsilon, 0.15).unwrap();
    }
    let estimate = sum / DRAWS as f64;
    let rel = (estimate - KL_T_NORMAL_D2).abs() / KL_T_NORMAL_D2;
    assert!(rel < 0.02, "MC {estimate} vs quadrature {KL_T_NORMAL_D2} (rel {rel})");
}

#[test]
fn samplers_are_reproducible() {
    let draw = |seed| {
        let mut rng = Rng::substream(seed, Purpose::Latent, 7, 3);
        (0..50).flat_map(|_| sample_latent_noise(2, 0.15, &mut rng).unwrap().epsilon).collect::<Vec<_>>()
    };
    assert_eq!(draw(0), draw(0));
    assert_ne!(draw(0), draw(1));
}
