//! Per-image reconstruction likelihoods and their decisiveness / accuracy /
//! robustness summaries, the power means `M_1`, `M_0` and `M_{−2/3}` of the
//! image likelihoods.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::coupling::{generalized_mean_log, LogLikelihoodSet};
use crate::error::{Error, Result};
use crate::mnist::Dataset;
use crate::model::{decode, encode_batch, pixel_log_likelihood, VaeParams};
use crate::sampling::{sample_latent_noise, Purpose, Rng};
use crate::train::RunConfig;

pub const DECISIVENESS_POWER: f64 = 1.0;
pub const ACCURACY_POWER: f64 = 0.0;
pub const ROBUSTNESS_POWER: f64 = -2.0 / 3.0;

pub const CSV_HEADER: &str =
    "kappa_d,kappa_l,z_dim,n,decisiveness_log10,accuracy_log10,robustness_log10,mode,seed";

/// Rows per encoder/decoder pass.
const CHUNK: usize = 2000;

/// How the latent code of a test image is chosen before decoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    /// `z = μ(x)`.
    #[default]
    Deterministic,
    /// One reparameterized draw per image; image `i` uses stream `(seed, Eval, 0, i)`.
    Sampled,
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalMode::Deterministic => "deterministic",
            EvalMode::Sampled => "sampled",
        })
    }
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deterministic" => Ok(EvalMode::Deterministic),
            "sampled" => Ok(EvalMode::Sampled),
            other => Err(Error::Argument(format!(
                "unknown evaluation mode `{other}` (expected deterministic or sampled)"
            ))),
        }
    }
}

/// What an evaluation is run with and echoed into its report.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSpec {
    pub kappa_d: f64,
    pub kappa_l: f64,
    pub mode: EvalMode,
    pub seed: u64,
}

impl EvalSpec {
    pub fn for_run(config: &RunConfig, mode: EvalMode) -> Self {
        EvalSpec {
            kappa_d: config.kappa_d,
            kappa_l: config.kappa_l,
            mode,
            seed: config.seed,
        }
    }
}

/// `ln p(x | z)` summed over pixels for every row of `images`.
pub fn image_log_likelihoods(params: &VaeParams, images: &Tensor, spec: &EvalSpec) -> Result<Vec<f64>> {
    let dims = params.dims;
    if images.shape().len() != 2 || images.cols() != dims.input {
        return Err(Error::DimensionMismatch(format!(
            "images have shape {:?}, model expects {} pixels",
            images.shape(),
            dims.input
        )));
    }
    // Inference never draws from this stream: dropout is off.
    let mut unused = Rng::new(spec.seed, Purpose::Eval);
    let mut out = Vec::with_capacity(images.rows());
    let rows: Vec<usize> = (0..images.rows()).collect();
    for chunk in rows.chunks(CHUNK) {
        let x = images.select_rows(chunk);
        let (mu, log_sigma) = encode_batch(params, &x, false, 0.0, &mut unused)?;
        let z = match spec.mode {
            EvalMode::Deterministic => mu,
            EvalMode::Sampled => {
                let mut z = Vec::with_capacity(mu.len());
                for (r, &i) in chunk.iter().enumerate() {
                    let mut rng = Rng::substream(spec.seed, Purpose::Eval, 0, i as u32);
                    let noise = sample_latent_noise(dims.z_dim, spec.kappa_d, &mut rng)?;
                    for ((m, ls), e) in mu.row(r).iter().zip(log_sigma.row(r)).zip(&noise.epsilon) {
                        z.push(m + ls.exp() * e);
                    }
                }
                Tensor::from_vec(mu.shape(), z)?
            }
        };
        let x_prime = decode(params, &z, false, 0.0, &mut unused)?;
        for r in 0..chunk.len() {
            out.push(
                x.row(r)
                    .iter()
                    .zip(x_prime.row(r))
                    .map(|(&a, &b)| pixel_log_likelihood(a, b))
                    .sum(),
            );
        }
    }
    Ok(out)
}

/// Log-likelihood of a single image; in sampled mode it uses the stream of image 0.
pub fn image_log_likelihood(params: &VaeParams, x: &[f64], spec: &EvalSpec) -> Result<f64> {
    let t = Tensor::from_vec(&[1, x.len()], x.to_vec())?;
    Ok(image_log_likelihoods(params, &t, spec)?[0])
}

/// The three summaries in `log10`, plus the run they describe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub kappa_d: f64,
    pub kappa_l: f64,
    pub z_dim: usize,
    pub n_images: usize,
    pub decisiveness_log10: f64,
    pub accuracy_log10: f64,
    pub robustness_log10: f64,
    pub mode: EvalMode,
    pub seed: u64,
}

impl MetricsReport {
    pub fn from_log_likelihoods(set: &LogLikelihoodSet, spec: &EvalSpec, z_dim: usize) -> Self {
        let log10 = |r: f64| generalized_mean_log(set, r) / std::f64::consts::LN_10;
        MetricsReport {
            kappa_d: spec.kappa_d,
            kappa_l: spec.kappa_l,
            z_dim,
            n_images: set.len(),
            decisiveness_log10: log10(DECISIVENESS_POWER),
            accuracy_log10: log10(ACCURACY_POWER),
            robustness_log10: log10(ROBUSTNESS_POWER),
            mode: spec.mode,
            seed: spec.seed,
        }
    }

    /// Power-mean inequality `M_{−2/3} ≤ M_0 ≤ M_1`.
    pub fn is_ordered(&self) -> bool {
        self.robustness_log10 <= self.accuracy_log10 && self.accuracy_log10 <= self.decisiveness_log10
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.kappa_d,
            self.kappa_l,
            self.z_dim,
            self.n_images,
            self.decisiveness_log10,
            self.accuracy_log10,
            self.robustness_log10,
            self.mode,
            self.seed
        )
    }

    /// Header line plus one row, newline-terminated.
    pub fn to_csv(&self) -> String {
        format!("{CSV_HEADER}\n{}\n", self.csv_row())
    }

    pub fn decisiveness(&self) -> String {
        sci_from_log10(self.decisiveness_log10)
    }

    pub fn accuracy(&self) -> String {
        sci_from_log10(self.accuracy_log10)
    }

    pub fn robustness(&self) -> String {
        sci_from_log10(self.robustness_log10)
    }
}

/// Result of [`evaluate`]: the report and the per-image values it reduces.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub log_likelihoods: LogLikelihoodSet,
}

pub fn evaluate(params: &VaeParams, test: &Dataset, spec: &EvalSpec) -> Result<Evaluation> {
    if test.is_empty() {
        return Err(Error::Argument("test set is empty".into()));
    }
    let values = image_log_likelihoods(params, &test.images, spec)?;
    let set = LogLikelihoodSet::new(values)?;
    Ok(Evaluation {
        report: MetricsReport::from_log_likelihoods(&set, spec, params.dims.z_dim),
        log_likelihoods: set,
    })
}

/// `10^l` as `m.mme±x`, e.g. `-57.647…` → `2.25e-58`. Works far below `f64` range.
pub fn sci_from_log10(l: f64) -> String {
    if !l.is_finite() {
        return format!("{l}");
    }
    let mut exponent = l.floor();
    let mut mantissa = 10f64.powf(l - exponent);
    if (mantissa * 100.0).round() >= 1000.0 {
        mantissa /= 10.0;
        exponent += 1.0;
    }
    format!("{mantissa:.2}e{}", exponent as i64)
}

/// Plain-text table with one row per report, laid out like the usual
/// decisiveness / accuracy / robustness comparison.
pub fn render_table(reports: &[MetricsReport]) -> String {
    let mut s = format!(
        "{:<9}{:<9}{:<15}{:<15}{:<15}\n",
        "kappa_D", "kappa_L", "Decisiveness", "Accuracy", "Robustness"
    );
    for r in reports {
        s.push_str(&format!(
            "{:<9}{:<9}{:<15}{:<15}{:<15}\n",
            r.kappa_d,
            r.kappa_l,
            r.decisiveness(),
            r.accuracy(),
            r.robustness()
        ));
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bin {
    /// Bounds in `log10` likelihood.
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub bins: Vec<Bin>,
}

impl Histogram {
    pub fn total(&self) -> usize {
        self.bins.iter().map(|b| b.count).sum()
    }

    pub fn min(&self) -> f64 {
        self.bins[0].lo
    }

    pub fn max(&self) -> f64 {
        self.bins[self.bins.len() - 1].hi
    }
}

/// Equal-width bins over `[min, max]` of `log10 p_i`, from natural-log values `ℓ_i`.
/// The top edge belongs to the last bin. When all values coincide every value
/// falls in the first bin.
pub fn histogram(log_likelihoods: &[f64], bin_count: usize) -> Result<Histogram> {
    if bin_count == 0 {
        return Err(Error::Argument("histogram needs at least one bin".into()));
    }
    if log_likelihoods.is_empty() {
        return Err(Error::Argument("histogram of an empty set".into()));
    }
    if let Some(bad) = log_likelihoods.iter().find(|v| !v.is_finite()) {
        return Err(Error::Domain(format!("non-finite log-likelihood {bad}")));
    }
    let values: Vec<f64> = log_likelihoods.iter().map(|l| l / std::f64::consts::LN_10).collect();
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = (max - min) / bin_count as f64;
    let mut bins: Vec<Bin> = (0..bin_count)
        .map(|i| Bin {
            lo: min + width * i as f64,
            hi: if i + 1 == bin_count { max } else { min + width * (i + 1) as f64 },
            count: 0,
        })
        .collect();
    for v in values {
        let i = if width > 0.0 {
            (((v - min) / width) as usize).min(bin_count - 1)
        } else {
            0
        };
        bins[i].count += 1;
    }
    Ok(Histogram { bins })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mnist::{Split, PIXELS};
    use crate::model::ModelDims;

    fn spec(mode: EvalMode) -> EvalSpec {
        EvalSpec {
            kappa_d: 0.0,
            kappa_l: 0.0,
            mode,
            seed: 0,
        }
    }

    fn small_dims() -> ModelDims {
        ModelDims {
            input: PIXELS,
            hidden: 6,
            hidden_layers: 1,
            z_dim: 2,
        }
    }

    #[test]
    fn zero_model_gives_closed_form() {
        let p = VaeParams::zeros(small_dims()).unwrap();
        let x: Vec<f64> = (0..PIXELS).map(|i| (i % 7) as f64 / 6.0).collect();
        for mode in [EvalMode::Deterministic, EvalMode::Sampled] {
            let l = image_log_likelihood(&p, &x, &spec(mode)).unwrap();
            assert!((l - 784.0 * 0.5f64.ln()).abs() < 1e-9, "{l}");
        }
        assert!((784.0 * 0.5f64.ln() - (-543.43)).abs() < 5e-3);
    }

    #[test]
    fn perfect_decoder_is_near_zero() {
        // Output bias +/- 30 saturates the sigmoid to the clamp on a binary image.
        let mut p = VaeParams::zeros(small_dims()).unwrap();
        let x: Vec<f64> = (0..PIXELS).map(|i| (i % 3 == 0) as u8 as f64).collect();
        let b: Vec<f64> = x.iter().map(|v| if *v == 1.0 { 30.0 } else { -30.0 }).collect();
        *p.get_mut("dec.out.b").unwrap() = Tensor::from_vec(&[PIXELS], b).unwrap();
        let l = image_log_likelihood(&p, &x, &spec(EvalMode::Deterministic)).unwrap();
        assert!(l <= 0.0 && l > -1e-4, "{l}");
    }

    #[test]
    fn equal_values_give_equal_metrics() {
        let set = LogLikelihoodSet::new(vec![-123.4; 17]).unwrap();
        let r = MetricsReport::from_log_likelihoods(&set, &spec(EvalMode::Deterministic), 2);
        assert_eq!(r.decisiveness_log10, r.accuracy_log10);
        assert_eq!(r.accuracy_log10, r.robustness_log10);
        assert!(r.is_ordered());
    }

    #[test]
    fn robustness_of_two_point_set() {
        // mpmath: (0.5·(0.1^(−2/3) + 0.001^(−2/3)))^(−3/2)
        let set = LogLikelihoodSet::new(vec![0.1f64.ln(), 0.001f64.ln()]).unwrap();
        let r = MetricsReport::from_log_likelihoods(&set, &spec(EvalMode::Deterministic), 2);
        let m = 10f64.powf(r.robustness_log10);
        assert!((m / 0.002_642_338_822_875_133 - 1.0).abs() < 1e-6, "{m}");
        assert!((10f64.powf(r.accuracy_log10) - 0.01).abs() < 1e-15);
        assert!((10f64.powf(r.decisiveness_log10) - 0.0505).abs() < 1e-15);
    }

    #[test]
    fn evaluation_is_order_independent() {
        let p = VaeParams::init(small_dims(), &mut Rng::new(1, Purpose::Init)).unwrap();
        let mut rng = Rng::new(2, Purpose::Test);
        let n = 9;
        let images = Tensor::from_vec(&[n, PIXELS], (0..n * PIXELS).map(|_| rng.uniform()).collect()).unwrap();
        let data = Dataset {
            images,
            labels: vec![0; n],
            split: Split::Test,
        };
        let a = evaluate(&p, &data, &spec(EvalMode::Deterministic)).unwrap();
        let perm: Vec<usize> = vec![4, 8, 0, 2, 7, 1, 6, 3, 5];
        let b = evaluate(&p, &data.select(&perm), &spec(EvalMode::Deterministic)).unwrap();
        assert!((a.report.accuracy_log10 - b.report.accuracy_log10).abs() < 1e-12);
        assert!((a.report.robustness_log10 - b.report.robustness_log10).abs() < 1e-12);
        assert!((a.report.decisiveness_log10 - b.report.decisiveness_log10).abs() < 1e-12);
        assert!(a.report.is_ordered());

        let s1 = evaluate(&p, &data, &spec(EvalMode::Sampled)).unwrap();
        let s2 = evaluate(&p, &data, &spec(EvalMode::Sampled)).unwrap();
        assert_eq!(s1.report, s2.report);
        assert_ne!(s1.report.accuracy_log10, a.report.accuracy_log10);
    }

    #[test]
    fn empty_test_set_is_an_error() {
        let p = VaeParams::zeros(small_dims()).unwrap();
        let data = Dataset {
            images: Tensor::zeros(&[0, PIXELS]),
            labels: vec![],
            split: Split::Test,
        };
        assert!(evaluate(&p, &data, &spec(EvalMode::Deterministic)).is_err());
    }

    #[test]
    fn scientific_rendering() {
        assert_eq!(sci_from_log10((2.25f64).log10() - 58.0), "2.25e-58");
        assert_eq!(sci_from_log10((1.24f64).log10() - 258.0), "1.24e-258");
        assert_eq!(sci_from_log10((9.999f64).log10() - 3.0), "1.00e-2");
        assert_eq!(sci_from_log10(0.0), "1.00e0");
    }

    #[test]
    fn csv_and_table_layout() {
        let set = LogLikelihoodSet::new(vec![-100.0, -120.0]).unwrap();
        let r = MetricsReport::from_log_likelihoods(&set, &spec(EvalMode::Deterministic), 2);
        let csv = r.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(CSV_HEADER));
        let row: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(row.len(), 9);
        assert_eq!(row[7], "deterministic");
        assert_eq!(row[5].parse::<f64>().unwrap(), r.accuracy_log10);
        let table = render_table(std::slice::from_ref(&r));
        assert!(table.contains("Robustness") && table.contains(&r.robustness()));
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("sampled".parse::<EvalMode>().unwrap(), EvalMode::Sampled);
        assert!("mean".parse::<EvalMode>().is_err());
    }

    #[test]
    fn histogram_examples() {
        let ln10 = std::f64::consts::LN_10;
        let spread: Vec<f64> = [-10.0, -9.0, -2.0, -1.0].iter().map(|v| v * ln10).collect();
        let h = histogram(&spread, 2).unwrap();
        assert_eq!(h.bins.iter().map(|b| b.count).collect::<Vec<_>>(), vec![2, 2]);
        assert_eq!((h.min(), h.max()), (-10.0, -1.0));

        let same = vec![-5.0; 12];
        let h = histogram(&same, 5).unwrap();
        assert_eq!(h.bins.iter().filter(|b| b.count > 0).count(), 1);
        assert_eq!(h.total(), 12);

        assert!(histogram(&spread, 0).is_err());
        assert!(histogram(&[], 3).is_err());
    }
}
