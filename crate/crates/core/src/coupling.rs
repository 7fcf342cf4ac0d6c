//! Coupled logarithm / exponential pair and log-space generalized means.
//!
//! For coupling `κ > 0`:
//!
//! ```text
//! ln_κ(x)  = (x^(κ/(1+κ)) − 1) / κ
//! exp_κ(y) = (1 + κ·y)_+^((1+κ)/κ)
//! ```
//!
//! and `κ = 0` is the exact natural-log branch. `ln_κ(1/p)` grows polynomially as
//! `p → 0`, so low-likelihood pixels cost more than under `−ln p`.
//!
//! Generalized means are returned as `ln M_r` and never exponentiate an
//! individual likelihood, so sets with `ℓ ≈ −600` are handled without underflow.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Non-negative, finite coupling parameter.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Coupling(f64);

impl Coupling {
    pub const ZERO: Coupling = Coupling(0.0);

    pub fn new(kappa: f64) -> Result<Self> {
        if !kappa.is_finite() || kappa < 0.0 {
            return Err(Error::Domain(format!(
                "coupling must be finite and >= 0, got {kappa}"
            )));
        }
        Ok(Coupling(kappa))
    }

    pub fn kappa(self) -> f64 {
        self.0
    }

    pub fn is_zero(self) -> bool {
        self.0 == 0.0
    }

    /// Exponent `κ/(1+κ)` applied to `x` inside the coupled logarithm.
    fn inner_exponent(self) -> f64 {
        self.0 / (1.0 + self.0)
    }
}

impl TryFrom<f64> for Coupling {
    type Error = Error;

    fn try_from(kappa: f64) -> Result<Self> {
        Coupling::new(kappa)
    }
}

impl From<Coupling> for f64 {
    fn from(c: Coupling) -> f64 {
        c.0
    }
}

pub fn coupled_log(x: f64, c: Coupling) -> Result<f64> {
    if !(x.is_finite() && x > 0.0) {
        return Err(Error::Domain(format!(
            "coupled_log needs a positive finite argument, got {x}"
        )));
    }
    if c.is_zero() {
        return Ok(x.ln());
    }
    Ok((c.inner_exponent() * x.ln()).exp_m1() / c.kappa())
}

pub fn coupled_exp(y: f64, c: Coupling) -> Result<f64> {
    if !y.is_finite() {
        return Err(Error::Domain(format!(
            "coupled_exp needs a finite argument, got {y}"
        )));
    }
    if c.is_zero() {
        return Ok(y.exp());
    }
    let k = c.kappa();
    let base = 1.0 + k * y;
    if base <= 0.0 {
        return Ok(0.0);
    }
    Ok(((1.0 + k) / k * (k * y).ln_1p()).exp())
}

/// Coupled negative log-likelihood `ln_κ(1/p)` evaluated from `ℓ = ln p`.
pub fn coupled_nll_from_logp(log_p: f64, c: Coupling) -> Result<f64> {
    if !log_p.is_finite() || log_p > 0.0 {
        return Err(Error::Domain(format!(
            "log-likelihood must be finite and <= 0, got {log_p}"
        )));
    }
    Ok(coupled_nll_unchecked(log_p, c.kappa()))
}

/// `ln_κ(1/p)` from `ℓ = ln p` without validation. Used inside the autodiff node.
#[inline]
pub(crate) fn coupled_nll_unchecked(log_p: f64, kappa: f64) -> f64 {
    if kappa == 0.0 {
        -log_p
    } else {
        (-log_p * kappa / (1.0 + kappa)).exp_m1() / kappa
    }
}

/// Derivative of [`coupled_nll_unchecked`] with respect to `ℓ`.
#[inline]
pub(crate) fn coupled_nll_derivative(log_p: f64, kappa: f64) -> f64 {
    if kappa == 0.0 {
        -1.0
    } else {
        -(-log_p * kappa / (1.0 + kappa)).exp() / (1.0 + kappa)
    }
}

/// Natural-log likelihoods `ℓ_i = ln p_i` whose power means are the evaluation metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct LogLikelihoodSet(Vec<f64>);

impl LogLikelihoodSet {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Argument("log-likelihood set is empty".into()));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Domain(format!(
                "log-likelihood set contains non-finite value {bad}"
            )));
        }
        Ok(LogLikelihoodSet(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Sum in a fixed pairwise order. Deterministic and with `O(log n)` error growth.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const LEAF: usize = 32;
    if values.len() <= LEAF {
        return values.iter().sum();
    }
    let (lo, hi) = values.split_at(values.len() / 2);
    pairwise_sum(lo) + pairwise_sum(hi)
}

/// `ln Σ exp(a_i)`, max-shifted. Returns `-inf` for an empty slice.
pub fn logsumexp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let shifted: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    max + pairwise_sum(&shifted).ln()
}

/// `ln M_r` of the likelihoods `p_i = exp(ℓ_i)`.
///
/// `r = 0` is the geometric mean, i.e. the mean of `ℓ_i`. For `r ≠ 0` the result is
/// `(1/r)·[ln Σ exp(r·ℓ_i) − ln N]`. When `r·ℓ` barely varies across the set the log
/// of the mean is taken around the centre with `expm1`/`ln_1p`, which keeps the
/// `r → 0` limit continuous.
pub fn generalized_mean_log(set: &LogLikelihoodSet, r: f64) -> f64 {
    let ell = set.values();
    if ell.iter().all(|&l| l == ell[0]) {
        return ell[0];
    }
    let n = ell.len() as f64;
    let mean_ell = pairwise_sum(ell) / n;
    if r == 0.0 {
        return mean_ell;
    }
    let scaled: Vec<f64> = ell.iter().map(|&l| r * l).collect();
    let centre = r * mean_ell;
    let spread = scaled
        .iter()
        .map(|a| (a - centre).abs())
        .fold(0.0_f64, f64::max);
    if spread <= 1.0 {
        let deviations: Vec<f64> = scaled.iter().map(|a| (a - centre).exp_m1()).collect();
        let log_mean = (pairwise_sum(&deviations) / n).ln_1p();
        mean_ell + log_mean / r
    } else {
        (logsumexp(&scaled) - n.ln()) / r
    }
}
