//! Seeded random streams, latent-noise samplers and exact log-densities.
//!
//! # Generator
//!
//! Every random draw comes from ChaCha12 (`rand_chacha`), which is
//! value-stable across platforms. A stream is addressed by
//! `(seed, purpose, epoch, batch)`:
//!
//! * the 256-bit key is four successive SplitMix64 outputs seeded with
//!   `seed ^ purpose.tag()`;
//! * the 64-bit ChaCha stream id is `(epoch << 32) | batch`.
//!
//! Uniform doubles take the top 53 bits of a `u64`. Normals use the Marsaglia
//! polar method (the spare deviate is cached in the stream). Gamma variates use
//! Marsaglia–Tsang; shapes below one are boosted with `U^(1/shape)`.

use rand_chacha::ChaCha12Rng;
use rand_core::{RngCore, SeedableRng};

use crate::error::{Error, Result};

/// Which part of a run a stream feeds. Distinct purposes never share draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Purpose {
    Init,
    Shuffle,
    Dropout,
    Latent,
    Eval,
    Samples,
    Test,
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::Init => 0x494e_4954,
            Purpose::Shuffle => 0x5348_5546,
            Purpose::Dropout => 0x4452_4f50,
            Purpose::Latent => 0x4c41_5445,
            Purpose::Eval => 0x4556_414c,
            Purpose::Samples => 0x534d_504c,
            Purpose::Test => 0x5445_5354,
        }
    }
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic random stream. Single owner; derive a new substream for
/// anything that must be independent.
#[derive(Debug, Clone)]
pub struct Rng {
    inner: ChaCha12Rng,
    seed: u64,
    spare_normal: Option<f64>,
}

impl Rng {
    /// Stream `(seed, purpose, 0, 0)`.
    pub fn new(seed: u64, purpose: Purpose) -> Self {
        Self::substream(seed, purpose, 0, 0)
    }

    pub fn substream(seed: u64, purpose: Purpose, epoch: u32, batch: u32) -> Self {
        let mut state = seed ^ purpose.tag();
        let mut key = [0u8; 32];
        for chunk in key.chunks_exact_mut(8) {
            chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
        }
        let mut inner = ChaCha12Rng::from_seed(key);
        inner.set_stream((u64::from(epoch) << 32) | u64::from(batch));
        Rng {
            inner,
            seed,
            spare_normal: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on `(0, 1)`.
    pub fn uniform_open(&mut self) -> f64 {
        loop {
            let u = self.uniform();
            if u > 0.0 {
                return u;
            }
        }
    }

    /// Uniform integer in `0..n` (Lemire's multiply-shift with rejection).
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0);
        let threshold = n.wrapping_neg() % n;
        loop {
            let m = u128::from(self.next_u64()) * u128::from(n);
            if (m as u64) >= threshold {
                return (m >> 64) as u64;
            }
        }
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        loop {
            let u = 2.0 * self.uniform() - 1.0;
            let v = 2.0 * self.uniform() - 1.0;
            let s = u * u + v * v;
            if s > 0.0 && s < 1.0 {
                let factor = (-2.0 * s.ln() / s).sqrt();
                self.spare_normal = Some(v * factor);
                return u * factor;
            }
        }
    }

    /// Uniform on `[lo, hi)`.
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }
}

pub fn sample_standard_normal(n: usize, rng: &mut Rng) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::Argument("sample count must be >= 1".into()));
    }
    Ok((0..n).map(|_| rng.normal()).collect())
}

/// One `Gamma(shape, 1)` draw.
pub fn sample_gamma(shape: f64, rng: &mut Rng) -> Result<f64> {
    if !(shape.is_finite() && shape > 0.0) {
        return Err(Error::Argument(format!(
            "gamma shape must be positive and finite, got {shape}"
        )));
    }
    if shape < 1.0 {
        let boosted = sample_gamma(shape + 1.0, rng)?;
        return Ok(boosted * rng.uniform_open().powf(1.0 / shape));
    }
    let d = shape - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let (x, v) = loop {
            let x = rng.normal();
            let v = 1.0 + c * x;
            if v > 0.0 {
                break (x, v * v * v);
            }
        };
        let u = rng.uniform_open();
        let x2 = x * x;
        if u < 1.0 - 0.0331 * x2 * x2 || u.ln() < 0.5 * x2 + d * (1.0 - v + v.ln()) {
            return Ok(d * v);
        }
    }
}

/// `χ²_ν` as `2·Gamma(ν/2)`.
pub fn sample_chi_square(dof: f64, rng: &mut Rng) -> Result<f64> {
    Ok(2.0 * sample_gamma(dof / 2.0, rng)?)
}

/// Latent noise ε for one example.
///
/// `epsilon[j] == gaussian[j] * radial` exactly, with one `radial` shared by every
/// coordinate (a multivariate t with identity scale). In the Gaussian limit
/// `radial == 1` and `dof` is infinite.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentNoise {
    pub epsilon: Vec<f64>,
    pub gaussian: Vec<f64>,
    pub radial: f64,
    pub dof: f64,
}

/// Degrees of freedom `ν = 1/κ_D`; infinite at `κ_D = 0`.
pub fn dof_from_kappa(kappa_d: f64) -> f64 {
    if kappa_d == 0.0 {
        f64::INFINITY
    } else {
        1.0 / kappa_d
    }
}

pub fn sample_latent_noise(z_dim: usize, kappa_d: f64, rng: &mut Rng) -> Result<LatentNoise> {
    if z_dim == 0 {
        return Err(Error::Argument("z_dim must be >= 1".into()));
    }
    if !(kappa_d.is_finite() && kappa_d >= 0.0) {
        return Err(Error::Argument(format!(
            "kappa_d must be finite and >= 0, got {kappa_d}"
        )));
    }
    let gaussian = sample_standard_normal(z_dim, rng)?;
    let dof = dof_from_kappa(kappa_d);
    let radial = if kappa_d == 0.0 {
        1.0
    } else {
        let w = sample_chi_square(dof, rng)?;
        (dof / w).sqrt()
    };
    let epsilon = gaussian.iter().map(|g| g * radial).collect();
    Ok(LatentNoise {
        epsilon,
        gaussian,
        radial,
        dof,
    })
}

/// Natural-log gamma function.
pub fn ln_gamma(x: f64) -> f64 {
    libm::lgamma(x)
}

fn check_density_args(z: &[f64], mu: &[f64], sigma: &[f64]) -> Result<()> {
    if z.len() != mu.len() || z.len() != sigma.len() {
        return Err(Error::Argument(format!(
            "length mismatch: z={}, mu={}, sigma={}",
            z.len(),
            mu.len(),
            sigma.len()
        )));
    }
    if let Some(s) = sigma.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
        return Err(Error::Domain(format!("sigma must be positive, got {s}")));
    }
    Ok(())
}

/// Log-density of a multivariate t with location `mu`, diagonal scale `sigma`
/// and `nu` degrees of freedom.
pub fn log_density_mv_student_t(z: &[f64], mu: &[f64], sigma: &[f64], nu: f64) -> Result<f64> {
    check_density_args(z, mu, sigma)?;
    if nu.is_nan() || nu <= 0.0 {
        return Err(Error::Domain(format!("nu must be positive, got {nu}")));
    }
    let d = z.len() as f64;
    let maha: f64 = z
        .iter()
        .zip(mu)
        .zip(sigma)
        .map(|((z, m), s)| ((z - m) / s).powi(2))
        .sum();
    let log_sigma: f64 = sigma.iter().map(|s| s.ln()).sum();
    Ok(ln_gamma((nu + d) / 2.0) - ln_gamma(nu / 2.0) - d / 2.0 * (nu * std::f64::consts::PI).ln()
        - log_sigma
        - (nu + d) / 2.0 * (maha / nu).ln_1p())
}

pub fn log_density_diag_normal(z: &[f64], mu: &[f64], sigma: &[f64]) -> Result<f64> {
    check_density_args(z, mu, sigma)?;
    let d = z.len() as f64;
    let maha: f64 = z
        .iter()
        .zip(mu)
        .zip(sigma)
        .map(|((z, m), s)| ((z - m) / s).powi(2))
        .sum();
    let log_sigma: f64 = sigma.iter().map(|s| s.ln()).sum();
    Ok(-d / 2.0 * (2.0 * std::f64::consts::PI).ln() - log_sigma - 0.5 * maha)
}
