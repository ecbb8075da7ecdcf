//! Gaussian feature model of fine-tuning robustness.
//!
//! Binary labels, one strongly label-correlated feature `x1`, and weakly
//! correlated features drawn i.i.d. from N(eta*y, 1). The pre-trained
//! weights read `d` weak features; fine-tuning adapts `k` further weights,
//! each reading its own downstream-specific weak feature, so the adapted
//! classifier aggregates k+d independent weak votes. Accuracy and
//! worst-case L-infinity adversarial accuracy then have closed forms that
//! the Monte-Carlo and PGD paths are checked against.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::attack::{self, AttackConfig, AttackTarget};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng;

const MC_SHARD: u64 = 32_768;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TheoryParams {
    /// Number of weakly correlated features.
    pub d: usize,
    /// Number of adapted weights, 0 <= k <= d.
    pub k: usize,
    /// Mean shift of the weak features.
    pub eta: f64,
    /// Probability that the robust feature x1 agrees with the label.
    #[serde(default = "default_reliability")]
    pub p: f64,
}

fn default_reliability() -> f64 {
    0.95
}

impl TheoryParams {
    pub fn validate(&self) -> Result<()> {
        if self.d < 1 {
            return Err(Error::Config("theory.d must be >= 1".into()));
        }
        if self.k > self.d {
            return Err(Error::Config(format!(
                "theory.k ({}) must not exceed d ({})",
                self.k, self.d
            )));
        }
        if self.eta < 0.0 {
            return Err(Error::Config("theory.eta must be >= 0".into()));
        }
        if !(0.5..=1.0).contains(&self.p) {
            return Err(Error::Config("theory.p must lie in [0.5, 1]".into()));
        }
        Ok(())
    }
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("standard normal")
}

/// Standard normal CDF.
pub fn phi(z: f64) -> f64 {
    std_normal().cdf(z)
}

/// Standard normal quantile.
pub fn phi_inv(p: f64) -> f64 {
    std_normal().inverse_cdf(p)
}

/// Length of the sample vectors for the given parameters: x1 plus d
/// pre-training weak features plus k downstream-specific weak features.
pub fn input_dim(params: &TheoryParams) -> usize {
    1 + params.d + params.k
}

/// Draw `n` labeled samples: y uniform on {-1,+1}, x1 = y with probability
/// `p` (else -y), and k+d weak features i.i.d. N(eta*y, 1).
pub fn sample(params: &TheoryParams, n: usize, seed: u64) -> Result<Vec<(Tensor, i64)>> {
    params.validate()?;
    if n < 1 {
        return Err(Error::Config("sample size must be >= 1".into()));
    }
    let mut r = rng::stream(seed, "theory-sample");
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let (x, y) = draw(params, &mut r);
        out.push((Tensor::from_vec(vec![input_dim(params)], x)?, y));
    }
    Ok(out)
}

fn draw(params: &TheoryParams, r: &mut impl Rng) -> (Vec<f64>, i64) {
    let y: i64 = if r.gen::<bool>() { 1 } else { -1 };
    let yf = y as f64;
    let mut x = Vec::with_capacity(input_dim(params));
    x.push(if r.gen::<f64>() < params.p { yf } else { -yf });
    for _ in 0..params.d + params.k {
        let z: f64 = StandardNormal.sample(r);
        x.push(params.eta * yf + z);
    }
    (x, y)
}

/// The fine-tuned linear classifier sign((w0 + delta_w) . x).
///
/// w0 puts weight 1/d on the d pre-training weak features and 0 on x1;
/// delta_w puts 1/d on the k adapted weights, each reading a weak feature
/// the pre-trained weights do not use. Which coordinates play which role
/// is immaterial because all weak features are exchangeable; the default
/// assigns the trailing k to the adapted weights.
#[derive(Debug, Clone)]
pub struct LinearFtClassifier {
    w0: Vec<f64>,
    delta_w: Vec<f64>,
}

impl LinearFtClassifier {
    pub fn new(params: &TheoryParams) -> Result<Self> {
        let selection: Vec<usize> = (params.d + 1..=params.d + params.k).collect();
        Self::with_selection(params, &selection)
    }

    /// Adapted-weight coordinates given explicitly; valid values are
    /// 1..=d+k (coordinate 0 is x1). The pre-trained weights take the
    /// remaining d weak coordinates.
    pub fn with_selection(params: &TheoryParams, selection: &[usize]) -> Result<Self> {
        params.validate()?;
        if selection.len() != params.k {
            return Err(Error::Config(format!(
                "selection has {} coordinates, expected k = {}",
                selection.len(),
                params.k
            )));
        }
        let dim = input_dim(params);
        let inv_d = 1.0 / params.d as f64;
        let mut delta_w = vec![0.0; dim];
        for &c in selection {
            if c == 0 || c >= dim {
                return Err(Error::Config(format!(
                    "selection coordinate {c} outside the weak-feature range 1..={}",
                    params.d + params.k
                )));
            }
            if delta_w[c] != 0.0 {
                return Err(Error::Config(format!("duplicate selection coordinate {c}")));
            }
            delta_w[c] = inv_d;
        }
        let mut w0 = vec![0.0; dim];
        for c in 1..dim {
            if delta_w[c] == 0.0 {
                w0[c] = inv_d;
            }
        }
        Ok(LinearFtClassifier { w0, delta_w })
    }

    /// Combined weight vector w0 + delta_w.
    pub fn weights(&self) -> Vec<f64> {
        self.w0
            .iter()
            .zip(&self.delta_w)
            .map(|(&a, &b)| a + b)
            .collect()
    }

    pub fn w0(&self) -> &[f64] {
        &self.w0
    }

    pub fn delta_w(&self) -> &[f64] {
        &self.delta_w
    }

    fn margin(&self, x: &[f64]) -> f64 {
        self.w0
            .iter()
            .zip(&self.delta_w)
            .zip(x)
            .map(|((&a, &b), &v)| (a + b) * v)
            .sum()
    }
}

impl AttackTarget for LinearFtClassifier {
    fn loss_and_input_grad(&self, x: &Tensor, label: i64) -> Result<(f64, Tensor)> {
        if x.numel() != self.w0.len() {
            return Err(Error::ShapeMismatch {
                op: "theory-classifier",
                lhs: vec![self.w0.len()],
                rhs: x.shape().to_vec(),
            });
        }
        let y = label as f64;
        let grad: Vec<f64> = self
            .w0
            .iter()
            .zip(&self.delta_w)
            .map(|(&a, &b)| -y * (a + b))
            .collect();
        Ok((
            -y * self.margin(x.data()),
            Tensor::from_vec(x.shape().to_vec(), grad)?,
        ))
    }

    fn predict(&self, x: &Tensor) -> Result<i64> {
        Ok(if self.margin(x.data()) >= 0.0 { 1 } else { -1 })
    }
}

/// Clean accuracy of the fine-tuned classifier: Phi(sqrt(k+d) * eta).
pub fn ft_accuracy_closed(params: &TheoryParams) -> f64 {
    phi(((params.k + params.d) as f64).sqrt() * params.eta)
}

/// Smallest eta for which the classifier reaches `target_accuracy`:
/// quantile(target) / sqrt(k+d). At the default 0.99 the constant is
/// 2.3263.
pub fn eta_lower_bound(k: usize, d: usize, target_accuracy: f64) -> Result<f64> {
    if !(0.5..1.0).contains(&target_accuracy) {
        return Err(Error::Config(format!(
            "target accuracy {target_accuracy} must lie in [0.5, 1)"
        )));
    }
    Ok(phi_inv(target_accuracy) / ((k + d) as f64).sqrt())
}

/// Worst-case L-infinity-epsilon accuracy: Phi(sqrt(k+d) * (eta - epsilon)).
/// Every weak feature shifts by -epsilon*y; x1 carries no weight, so its
/// perturbation is irrelevant.
pub fn adv_accuracy_closed(params: &TheoryParams, epsilon: f64) -> f64 {
    phi(((params.k + params.d) as f64).sqrt() * (params.eta - epsilon))
}

/// Monte-Carlo accuracy estimate with binomial standard error.
#[derive(Debug, Clone, Copy)]
pub struct McEstimate {
    pub accuracy: f64,
    pub stderr: f64,
    pub n: usize,
}

impl McEstimate {
    /// |estimate - reference| in binomial standard errors of the reference
    /// probability.
    pub fn sigmas_from(&self, reference: f64) -> f64 {
        let sigma = (reference * (1.0 - reference) / self.n as f64).sqrt();
        (self.accuracy - reference).abs() / sigma.max(1e-12)
    }
}

/// Estimate (robust) accuracy by streaming fresh samples; shards run in
/// parallel with independent RNG substreams, so the result is independent
/// of thread scheduling. When `epsilon > 0` each sample is attacked with
/// PGD at full step size alpha = epsilon.
pub fn monte_carlo_accuracy(
    classifier: &LinearFtClassifier,
    params: &TheoryParams,
    n: usize,
    epsilon: f64,
    attack_steps: usize,
    seed: u64,
) -> Result<McEstimate> {
    params.validate()?;
    if n < 1_000 {
        return Err(Error::Config("monte carlo needs n >= 1000".into()));
    }
    let attack_cfg = AttackConfig {
        epsilon,
        alpha: epsilon,
        steps: attack_steps.max(1),
        random_start: false,
        clamp: (f64::NEG_INFINITY, f64::INFINITY),
    };
    let shards = (n as u64).div_ceil(MC_SHARD);
    let correct: usize = (0..shards)
        .into_par_iter()
        .map(|shard| -> Result<usize> {
            let lo = shard * MC_SHARD;
            let hi = ((shard + 1) * MC_SHARD).min(n as u64);
            let mut r = rng::substream(seed, "theory-mc", shard);
            let mut hits = 0;
            for _ in lo..hi {
                let (x, y) = draw(params, &mut r);
                let x = Tensor::from_vec(vec![input_dim(params)], x)?;
                let x_eval = if epsilon > 0.0 {
                    attack::pgd(classifier, &x, y, &attack_cfg, seed)?
                } else {
                    x
                };
                if classifier.predict(&x_eval)? == y {
                    hits += 1;
                }
            }
            Ok(hits)
        })
        .try_reduce(|| 0, |a, b| Ok(a + b))?;
    let acc = correct as f64 / n as f64;
    Ok(McEstimate {
        accuracy: acc,
        stderr: (acc * (1.0 - acc) / n as f64).sqrt(),
        n,
    })
}
