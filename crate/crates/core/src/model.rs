//! The coupled VAE: dense encoder/decoder, Student's-t reparameterization,
//! coupled reconstruction loss and KL term.
//!
//! Architecture (per coder, `hidden_layers` ReLU layers of `hidden` units with
//! inverted dropout after each):
//!
//! ```text
//! encoder: x ─ dense·ReLU ─ … ─┬─ dense → μ
//!                              └─ dense → clamp[−7, 7] → log σ
//! decoder: z ─ dense·ReLU ─ … ─ dense → sigmoid → clamp[1e−7, 1−1e−7] → x′
//! ```
//!
//! Loss per image is `Σ_pixels ln_κL(1/p_i) + KL`, averaged over the batch. The
//! KL term is analytic when `κ_D = 0` and a single-sample estimate
//! `ln t_ν(z; μ, σ) − ln N(z; 0, I)` otherwise, reusing the training sample `z`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{dropout_mask, Gradients, Graph, Tensor, Var};
use crate::coupling::{coupled_nll_from_logp, Coupling};
use crate::error::{Error, Result};
use crate::sampling::{
    dof_from_kappa, ln_gamma, log_density_diag_normal, log_density_mv_student_t,
    sample_latent_noise, LatentNoise, Rng,
};

pub const LOG_SIGMA_MIN: f64 = -7.0;
pub const LOG_SIGMA_MAX: f64 = 7.0;
/// Decoder outputs are clamped to `[OUTPUT_CLAMP, 1 − OUTPUT_CLAMP]` before any likelihood.
pub const OUTPUT_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub input: usize,
    pub hidden: usize,
    pub hidden_layers: usize,
    pub z_dim: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            input: crate::mnist::PIXELS,
            hidden: 500,
            hidden_layers: 2,
            z_dim: 2,
        }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.input == 0 || self.hidden == 0 || self.hidden_layers == 0 || self.z_dim == 0 {
            return Err(Error::Argument(format!("all model dimensions must be >= 1: {self:?}")));
        }
        Ok(())
    }

    /// `(name, fan_in, fan_out, relu)` for every dense layer, in canonical order.
    fn layers(&self) -> Vec<(String, usize, usize, bool)> {
        let mut out = Vec::new();
        let mut width = self.input;
        for i in 0..self.hidden_layers {
            out.push((format!("enc.{i}"), width, self.hidden, true));
            width = self.hidden;
        }
        out.push(("enc.mu".into(), self.hidden, self.z_dim, false));
        out.push(("enc.logsigma".into(), self.hidden, self.z_dim, false));
        width = self.z_dim;
        for i in 0..self.hidden_layers {
            out.push((format!("dec.{i}"), width, self.hidden, true));
            width = self.hidden;
        }
        out.push(("dec.out".into(), self.hidden, self.input, false));
        out
    }
}

/// Encoder and decoder weights. Each dense layer `L` owns `L.w` (`fan_in × fan_out`)
/// and `L.b` (`fan_out`).
#[derive(Debug, Clone, PartialEq)]
pub struct VaeParams {
    pub dims: ModelDims,
    tensors: Vec<(String, Tensor)>,
}

impl VaeParams {
    /// He-uniform weights for ReLU layers, Xavier-uniform for the output layers,
    /// zero biases. Draws follow the canonical parameter order.
    pub fn init(dims: ModelDims, rng: &mut Rng) -> Result<Self> {
        dims.validate()?;
        let mut tensors = Vec::new();
        for (name, fan_in, fan_out, relu) in dims.layers() {
            let limit = if relu {
                (6.0 / fan_in as f64).sqrt()
            } else {
                (6.0 / (fan_in + fan_out) as f64).sqrt()
            };
            let w = (0..fan_in * fan_out).map(|_| rng.uniform_range(-limit, limit)).collect();
            tensors.push((format!("{name}.w"), Tensor::from_vec(&[fan_in, fan_out], w)?));
            tensors.push((format!("{name}.b"), Tensor::zeros(&[fan_out])));
        }
        Ok(VaeParams { dims, tensors })
    }

    pub fn zeros(dims: ModelDims) -> Result<Self> {
        dims.validate()?;
        let mut tensors = Vec::new();
        for (name, fan_in, fan_out, _) in dims.layers() {
            tensors.push((format!("{name}.w"), Tensor::zeros(&[fan_in, fan_out])));
            tensors.push((format!("{name}.b"), Tensor::zeros(&[fan_out])));
        }
        Ok(VaeParams { dims, tensors })
    }

    /// Rebuild from named tensors, checking names and shapes against `dims`.
    pub fn from_named(dims: ModelDims, named: Vec<(String, Tensor)>) -> Result<Self> {
        let template = VaeParams::zeros(dims)?;
        if named.len() != template.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, got {}",
                template.tensors.len(),
                named.len()
            )));
        }
        for ((tn, tt), (n, t)) in template.tensors.iter().zip(&named) {
            if tn != n || tt.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {n} {:?} does not match expected {tn} {:?}",
                    t.shape(),
                    tt.shape()
                )));
            }
        }
        Ok(VaeParams { dims, tensors: named })
    }

    pub fn named(&self) -> &[(String, Tensor)] {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.tensors.iter_mut().map(|(_, t)| t)
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|(_, t)| t.is_finite())
    }

    fn feeds(&self) -> Vec<(&str, &Tensor)> {
        self.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect()
    }

    /// Gradients aligned with [`VaeParams::named`].
    pub fn align<'g>(&self, grads: &'g Gradients) -> Result<Vec<&'g Tensor>> {
        self.tensors
            .iter()
            .map(|(n, _)| {
                grads
                    .get(n)
                    .ok_or_else(|| Error::Graph(format!("no gradient for {n}")))
            })
            .collect()
    }
}

/// Encoder output for one example.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentStats {
    pub mu: Vec<f64>,
    pub log_sigma: Vec<f64>,
}

impl LatentStats {
    pub fn sigma(&self) -> Vec<f64> {
        self.log_sigma.iter().map(|l| l.exp()).collect()
    }
}

/// Batch-mean losses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub reconstruction: f64,
    pub kl: f64,
    pub total: f64,
    /// Always true: the three fields are means over the images of the batch.
    pub per_image: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub kappa_l: Coupling,
    pub kappa_d: f64,
    pub dropout: f64,
}

fn dense(g: &mut Graph, name: &str, fan_in: usize, fan_out: usize, x: Var) -> Var {
    let w = g.param(&format!("{name}.w"), &[fan_in, fan_out]);
    let b = g.param(&format!("{name}.b"), &[fan_out]);
    let h = g.matmul(x, w);
    let y = g.add_bias(h, b);
    g.label(y, name)
}

fn mask_name(coder: &str, i: usize) -> String {
    format!("mask.{coder}.{i}")
}

fn hidden_stack(g: &mut Graph, dims: &ModelDims, coder: &str, x: Var, width: usize, masked: bool) -> Var {
    let mut h = x;
    let mut fan_in = width;
    for i in 0..dims.hidden_layers {
        let pre = dense(g, &format!("{coder}.{i}"), fan_in, dims.hidden, h);
        h = g.relu(pre);
        if masked {
            let m = g.input(&mask_name(coder, i), dims.hidden);
            h = g.mul(h, m);
        }
        fan_in = dims.hidden;
    }
    h
}

fn encoder_nodes(g: &mut Graph, dims: &ModelDims, x: Var, masked: bool) -> (Var, Var) {
    let h = hidden_stack(g, dims, "enc", x, dims.input, masked);
    let mu = dense(g, "enc.mu", dims.hidden, dims.z_dim, h);
    let raw = dense(g, "enc.logsigma", dims.hidden, dims.z_dim, h);
    let log_sigma = g.clamp(raw, LOG_SIGMA_MIN, LOG_SIGMA_MAX);
    (mu, g.label(log_sigma, "log_sigma"))
}

fn decoder_nodes(g: &mut Graph, dims: &ModelDims, z: Var, masked: bool) -> Var {
    let h = hidden_stack(g, dims, "dec", z, dims.z_dim, masked);
    let logits = dense(g, "dec.out", dims.hidden, dims.input, h);
    let probs = g.sigmoid(logits);
    let clamped = g.clamp(probs, OUTPUT_CLAMP, 1.0 - OUTPUT_CLAMP);
    g.label(clamped, "x_prime")
}

/// Per-batch random inputs of the loss graph: latent noise and dropout masks.
#[derive(Debug, Clone)]
pub struct BatchNoise {
    pub epsilon: Tensor,
    /// `(leaf name, mask)`; empty when dropout is inactive.
    pub masks: Vec<(String, Tensor)>,
}

impl BatchNoise {
    /// Draw noise for `rows` images: one [`LatentNoise`] per image from `latent`,
    /// then masks (encoder layers first) from `dropout` when `rate > 0`.
    pub fn draw(
        dims: &ModelDims,
        rows: usize,
        kappa_d: f64,
        rate: f64,
        latent: &mut Rng,
        dropout: &mut Rng,
    ) -> Result<Self> {
        let mut eps = Vec::with_capacity(rows * dims.z_dim);
        for _ in 0..rows {
            eps.extend(sample_latent_noise(dims.z_dim, kappa_d, latent)?.epsilon);
        }
        let mut masks = Vec::new();
        if rate > 0.0 {
            for coder in ["enc", "dec"] {
                for i in 0..dims.hidden_layers {
                    let m = dropout_mask(&[rows, dims.hidden], rate, dropout)?;
                    masks.push((mask_name(coder, i), m));
                }
            }
        }
        Ok(BatchNoise {
            epsilon: Tensor::from_vec(&[rows, dims.z_dim], eps)?,
            masks,
        })
    }
}

/// The differentiable training objective, built once per configuration and
/// re-evaluated per batch.
#[derive(Debug, Clone)]
pub struct Objective {
    dims: ModelDims,
    graph: Graph,
    loss: Var,
    recon: Var,
    kl: Var,
    masked: bool,
}

impl Objective {
    /// `masked` adds dropout-mask inputs after every hidden layer.
    pub fn new(dims: ModelDims, config: &LossConfig, masked: bool) -> Result<Self> {
        dims.validate()?;
        if !(config.kappa_d.is_finite() && config.kappa_d >= 0.0) {
            return Err(Error::Argument(format!("kappa_d must be >= 0, got {}", config.kappa_d)));
        }
        let mut g = Graph::new();
        let x = g.input("x", dims.input);
        let eps = g.input("epsilon", dims.z_dim);
        let (mu, log_sigma) = encoder_nodes(&mut g, &dims, x, masked);
        let sigma = g.exp(log_sigma);
        let spread = g.mul(sigma, eps);
        let z = g.add(mu, spread);
        let z = g.label(z, "z");
        let x_prime = decoder_nodes(&mut g, &dims, z, masked);

        let pixel_ll = g.bernoulli_log_lik(x_prime, x);
        let pixel_loss = g.coupled_nll(pixel_ll, config.kappa_l.kappa());
        let recon = g.row_sum(pixel_loss);
        let recon = g.label(recon, "reconstruction");

        let kl = if config.kappa_d == 0.0 {
            // ½ Σ (μ² + σ² − 1 − 2 ln σ)
            let mu2 = g.square(mu);
            let two_ls = g.scale(log_sigma, 2.0);
            let sigma2 = g.exp(two_ls);
            let a = g.add(mu2, sigma2);
            let b = g.sub(a, two_ls);
            let c = g.add_scalar(b, -1.0);
            let s = g.row_sum(c);
            g.scale(s, 0.5)
        } else {
            let nu = dof_from_kappa(config.kappa_d);
            let d = dims.z_dim as f64;
            let log_norm = ln_gamma((nu + d) / 2.0) - ln_gamma(nu / 2.0) - d / 2.0 * (nu * std::f64::consts::PI).ln();
            let centred = g.sub(z, mu);
            let standardized = g.div(centred, sigma);
            let sq = g.square(standardized);
            let maha = g.row_sum(sq);
            let ratio = g.scale(maha, 1.0 / nu);
            let base = g.add_scalar(ratio, 1.0);
            let log_base = g.log(base);
            let tail = g.scale(log_base, -(nu + d) / 2.0);
            let sum_ls = g.row_sum(log_sigma);
            let neg_ls = g.scale(sum_ls, -1.0);
            let log_q = g.add(tail, neg_ls);
            let log_q = g.add_scalar(log_q, log_norm);
            // −ln N(z; 0, I) = (d/2) ln 2π + ½ Σ z²
            let z2 = g.square(z);
            let zs = g.row_sum(z2);
            let half = g.scale(zs, 0.5);
            let neg_log_p = g.add_scalar(half, d / 2.0 * (2.0 * std::f64::consts::PI).ln());
            g.add(log_q, neg_log_p)
        };
        let kl = g.label(kl, "kl");
        let per_image = g.add(recon, kl);
        let loss = g.mean(per_image);
        let loss = g.label(loss, "loss");
        let recon = g.mean(recon);
        let kl = g.mean(kl);
        Ok(Objective {
            dims,
            graph: g,
            loss,
            recon,
            kl,
            masked,
        })
    }

    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    pub fn evaluate(&mut self, params: &VaeParams, x: &Tensor, noise: &BatchNoise) -> Result<LossBreakdown> {
        if params.dims != self.dims {
            return Err(Error::Argument("parameter dims differ from objective dims".into()));
        }
        if self.masked && noise.masks.is_empty() {
            return Err(Error::Argument("objective expects dropout masks".into()));
        }
        let mut feeds = params.feeds();
        feeds.push(("x", x));
        feeds.push(("epsilon", &noise.epsilon));
        if self.masked {
            feeds.extend(noise.masks.iter().map(|(n, t)| (n.as_str(), t)));
        }
        self.graph.forward(&feeds)?;
        Ok(LossBreakdown {
            reconstruction: self.graph.value(self.recon)?.item(),
            kl: self.graph.value(self.kl)?.item(),
            total: self.graph.value(self.loss)?.item(),
            per_image: true,
        })
    }

    /// Gradients of the last evaluated loss with respect to every parameter.
    pub fn gradients(&self) -> Result<Gradients> {
        self.graph.backward(self.loss)
    }
}

/// Loss on one batch, drawing latent noise and (when `training`) dropout masks
/// sequentially from `rng`.
pub fn total_loss(
    params: &VaeParams,
    x: &Tensor,
    config: &LossConfig,
    training: bool,
    rng: &mut Rng,
) -> Result<LossBreakdown> {
    let masked = training && config.dropout > 0.0;
    let mut objective = Objective::new(params.dims, config, masked)?;
    let rate = if masked { config.dropout } else { 0.0 };
    let mut dropout_rng = Rng::new(rng.next_u64(), crate::sampling::Purpose::Dropout);
    let noise = BatchNoise::draw(&params.dims, x.rows(), config.kappa_d, rate, rng, &mut dropout_rng)?;
    objective.evaluate(params, x, &noise)
}

/// Forward-only encoder/decoder graphs for inference and figures.
fn run_coder(
    params: &VaeParams,
    input: &Tensor,
    training: bool,
    rate: f64,
    rng: &mut Rng,
    encoder: bool,
) -> Result<Vec<Tensor>> {
    let dims = params.dims;
    let masked = training && rate > 0.0;
    let mut g = Graph::new();
    let (leaf, cols) = if encoder { ("x", dims.input) } else { ("z", dims.z_dim) };
    let x = g.input(leaf, cols);
    let outputs = if encoder {
        let (mu, ls) = encoder_nodes(&mut g, &dims, x, masked);
        vec![mu, ls]
    } else {
        vec![decoder_nodes(&mut g, &dims, x, masked)]
    };
    let coder = if encoder { "enc" } else { "dec" };
    let masks: Vec<(String, Tensor)> = if masked {
        (0..dims.hidden_layers)
            .map(|i| Ok((mask_name(coder, i), dropout_mask(&[input.rows(), dims.hidden], rate, rng)?)))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    // Feed only the parameters this coder uses.
    let mut feeds: Vec<(&str, &Tensor)> = params
        .feeds()
        .into_iter()
        .filter(|(n, _)| n.starts_with(coder))
        .collect();
    feeds.push((leaf, input));
    feeds.extend(masks.iter().map(|(n, t)| (n.as_str(), t)));
    g.forward(&feeds)?;
    outputs.iter().map(|v| g.value(*v).cloned()).collect()
}

/// Latent statistics `(μ, log σ)` as two `N × z_dim` tensors.
pub fn encode_batch(params: &VaeParams, x: &Tensor, training: bool, rate: f64, rng: &mut Rng) -> Result<(Tensor, Tensor)> {
    let mut out = run_coder(params, x, training, rate, rng, true)?;
    let log_sigma = out.pop().expect("two outputs");
    let mu = out.pop().expect("two outputs");
    Ok((mu, log_sigma))
}

pub fn encode(params: &VaeParams, x: &Tensor, training: bool, rate: f64, rng: &mut Rng) -> Result<Vec<LatentStats>> {
    let (mu, ls) = encode_batch(params, x, training, rate, rng)?;
    Ok((0..mu.rows())
        .map(|i| LatentStats {
            mu: mu.row(i).to_vec(),
            log_sigma: ls.row(i).to_vec(),
        })
        .collect())
}

/// Decoder probabilities (clamped) for an `N × z_dim` batch.
pub fn decode(params: &VaeParams, z: &Tensor, training: bool, rate: f64, rng: &mut Rng) -> Result<Tensor> {
    if z.shape().len() != 2 || z.cols() != params.dims.z_dim {
        return Err(Error::Shape {
            node: "decode".into(),
            detail: format!("expected [n, {}], got {:?}", params.dims.z_dim, z.shape()),
        });
    }
    Ok(run_coder(params, z, training, rate, rng, false)?.remove(0))
}

/// `z = μ + σ ⊙ ε`.
pub fn reparameterize(stats: &LatentStats, noise: &LatentNoise) -> Result<Vec<f64>> {
    if stats.mu.len() != noise.epsilon.len() || stats.log_sigma.len() != stats.mu.len() {
        return Err(Error::Argument(format!(
            "latent length {} does not match noise length {}",
            stats.mu.len(),
            noise.epsilon.len()
        )));
    }
    Ok(stats
        .mu
        .iter()
        .zip(&stats.log_sigma)
        .zip(&noise.epsilon)
        .map(|((m, ls), e)| m + ls.exp() * e)
        .collect())
}

/// `x·ln x′ + (1−x)·ln(1−x′)` with `x′` clamped into `[1e−7, 1−1e−7]`.
pub fn pixel_log_likelihood(x: f64, x_prime: f64) -> f64 {
    let p = x_prime.clamp(OUTPUT_CLAMP, 1.0 - OUTPUT_CLAMP);
    x * p.ln() + (1.0 - x) * (-p).ln_1p()
}

/// `Σ_i ln_κ(1/p_i)` over pixels; binary cross-entropy when `κ = 0`.
pub fn coupled_reconstruction_loss(x: &[f64], x_prime: &[f64], kappa_l: Coupling) -> Result<f64> {
    if x.len() != x_prime.len() {
        return Err(Error::Argument(format!(
            "image length {} vs reconstruction length {}",
            x.len(),
            x_prime.len()
        )));
    }
    x.iter()
        .zip(x_prime)
        .map(|(&a, &b)| coupled_nll_from_logp(pixel_log_likelihood(a, b), kappa_l))
        .sum()
}

/// KL term for one example: analytic at `κ_D = 0`, single-sample estimate at the
/// sample `z` otherwise.
pub fn kl_term(stats: &LatentStats, z: &[f64], kappa_d: f64) -> Result<f64> {
    if !(kappa_d.is_finite() && kappa_d >= 0.0) {
        return Err(Error::Argument(format!("kappa_d must be >= 0, got {kappa_d}")));
    }
    let sigma = stats.sigma();
    if kappa_d == 0.0 {
        return Ok(0.5
            * stats
                .mu
                .iter()
                .zip(&sigma)
                .zip(&stats.log_sigma)
                .map(|((m, s), ls)| m * m + s * s - 1.0 - 2.0 * ls)
                .sum::<f64>());
    }
    let zeros = vec![0.0; z.len()];
    let ones = vec![1.0; z.len()];
    Ok(log_density_mv_student_t(z, &stats.mu, &sigma, dof_from_kappa(kappa_d))?
        - log_density_diag_normal(z, &zeros, &ones)?)
}
