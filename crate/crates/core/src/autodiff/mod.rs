//! Minimal reverse-mode differentiation over dense-layer graphs.

mod adam;
mod graph;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use graph::{sigmoid, Gradients, Graph, Var};
pub use tensor::Tensor;

use crate::error::{Error, Result};
use crate::sampling::Rng;

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Argument(format!("dropout rate must be in [0, 1), got {rate}")));
    }
    Ok(())
}

/// Inverted-dropout mask: each entry is `0` with probability `rate`, else `1/(1−rate)`.
pub fn dropout_mask(shape: &[usize], rate: f64, rng: &mut Rng) -> Result<Tensor> {
    check_rate(rate)?;
    let keep = 1.0 / (1.0 - rate);
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| if rate > 0.0 && rng.uniform() < rate { 0.0 } else { keep })
        .collect();
    Tensor::from_vec(shape, data)
}

/// Inverted dropout on a plain tensor; identity at inference time.
pub fn dropout(x: &Tensor, rate: f64, training: bool, rng: &mut Rng) -> Result<Tensor> {
    check_rate(rate)?;
    if !training || rate == 0.0 {
        return Ok(x.clone());
    }
    let mask = dropout_mask(x.shape(), rate, rng)?;
    let data = x.data().iter().zip(mask.data()).map(|(a, b)| a * b).collect();
    Tensor::from_vec(x.shape(), data)
}
