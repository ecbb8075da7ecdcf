//! L-infinity projected gradient descent and adversarial-accuracy evaluation.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng;

/// PGD budget and iteration parameters. Epsilon and alpha are in the same
/// normalized input units as the data (images live in [0,1]).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub alpha: f64,
    pub steps: usize,
    #[serde(default)]
    pub random_start: bool,
    #[serde(default = "default_clamp")]
    pub clamp: (f64, f64),
}

fn default_clamp() -> (f64, f64) {
    (0.0, 1.0)
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            epsilon: 1.0 / 255.0,
            alpha: 0.25 / 255.0,
            steps: 15,
            random_start: false,
            clamp: (0.0, 1.0),
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=self.epsilon).contains(&self.alpha) {
            return Err(Error::Config(format!(
                "attack.alpha must satisfy 0 <= alpha ({}) <= epsilon ({})",
                self.alpha, self.epsilon
            )));
        }
        if self.steps < 1 {
            return Err(Error::Config("attack.steps must be >= 1".into()));
        }
        if self.clamp.0 > self.clamp.1 {
            return Err(Error::Config(format!(
                "attack.clamp range [{}, {}] is empty",
                self.clamp.0, self.clamp.1
            )));
        }
        Ok(())
    }
}

/// Anything PGD can attack: a differentiable loss oracle plus a label
/// predictor. Labels are plain integers so both the transformer (class
/// indices) and the theory classifier (signs) fit.
pub trait AttackTarget: Sync {
    /// Untargeted loss to maximize, and its gradient w.r.t. the input.
    fn loss_and_input_grad(&self, x: &Tensor, label: i64) -> Result<(f64, Tensor)>;

    fn predict(&self, x: &Tensor) -> Result<i64>;
}

fn sign(g: f64) -> f64 {
    if g > 0.0 {
        1.0
    } else if g < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Maximize the target's loss over the epsilon-ball around `x0`, staying
/// inside the clamp range. Projection runs after every iteration.
pub fn pgd(
    target: &dyn AttackTarget,
    x0: &Tensor,
    label: i64,
    cfg: &AttackConfig,
    seed: u64,
) -> Result<Tensor> {
    let (lo, hi) = cfg.clamp;
    if x0.data().iter().any(|&v| v < lo || v > hi) {
        return Err(Error::Contract(format!(
            "attack input outside clamp range [{lo}, {hi}]"
        )));
    }
    let mut x = x0.clone();
    if cfg.random_start && cfg.epsilon > 0.0 {
        let mut r = rng::stream(seed, "pgd-start");
        for (v, &orig) in x.data_mut().iter_mut().zip(x0.data()) {
            let delta = r.gen_range(-cfg.epsilon..=cfg.epsilon);
            *v = (orig + delta).clamp(lo, hi);
        }
    }
    for step in 0..cfg.steps {
        let (_, grad) = target.loss_and_input_grad(&x, label)?;
        if !grad.all_finite() {
            return Err(Error::Attack {
                step,
                msg: "non-finite input gradient".into(),
            });
        }
        for ((v, &g), &orig) in x.data_mut().iter_mut().zip(grad.data()).zip(x0.data()) {
            let stepped = *v + cfg.alpha * sign(g);
            // project onto the L-inf ball around the original, then the clamp box
            *v = stepped
                .clamp(orig - cfg.epsilon, orig + cfg.epsilon)
                .clamp(lo, hi);
        }
    }
    Ok(x)
}

/// Fraction of samples still classified correctly after PGD. With
/// epsilon = 0 this is exactly clean accuracy.
pub fn robust_accuracy(
    target: &dyn AttackTarget,
    dataset: &[(Tensor, i64)],
    cfg: &AttackConfig,
    seed: u64,
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Data("robust_accuracy over an empty dataset".into()));
    }
    let correct: usize = dataset
        .par_iter()
        .enumerate()
        .map(|(i, (x, y))| -> Result<usize> {
            let x_eval = if cfg.epsilon > 0.0 {
                pgd(target, x, *y, cfg, seed ^ (i as u64).wrapping_mul(0x9e3779b9))?
            } else {
                x.clone()
            };
            Ok((target.predict(&x_eval)? == *y) as usize)
        })
        .try_reduce(|| 0, |a, b| Ok(a + b))?;
    Ok(correct as f64 / dataset.len() as f64)
}

/// Accuracy without any perturbation.
pub fn clean_accuracy(target: &dyn AttackTarget, dataset: &[(Tensor, i64)]) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Data("clean_accuracy over an empty dataset".into()));
    }
    let correct: usize = dataset
        .par_iter()
        .map(|(x, y)| -> Result<usize> { Ok((target.predict(x)? == *y) as usize) })
        .try_reduce(|| 0, |a, b| Ok(a + b))?;
    Ok(correct as f64 / dataset.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// f(x) = sign(w.x), attacked through the margin loss -y * w.x.
    struct LinearTarget {
        w: Vec<f64>,
    }

    impl AttackTarget for LinearTarget {
        fn loss_and_input_grad(&self, x: &Tensor, label: i64) -> Result<(f64, Tensor)> {
            let y = label as f64;
            let dot: f64 = self.w.iter().zip(x.data()).map(|(&w, &v)| w * v).sum();
            let grad: Vec<f64> = self.w.iter().map(|&w| -y * w).collect();
            Ok((
                -y * dot,
                Tensor::from_vec(vec![self.w.len()], grad)?,
            ))
        }

        fn predict(&self, x: &Tensor) -> Result<i64> {
            let dot: f64 = self.w.iter().zip(x.data()).map(|(&w, &v)| w * v).sum();
            Ok(if dot >= 0.0 { 1 } else { -1 })
        }
    }

    fn wide_clamp() -> (f64, f64) {
        (-100.0, 100.0)
    }

    #[test]
    fn zero_epsilon_returns_input_exactly() {
        let target = LinearTarget { w: vec![1.0, -2.0, 0.5] };
        let cfg = AttackConfig {
            epsilon: 0.0,
            alpha: 0.0,
            steps: 5,
            random_start: false,
            clamp: wide_clamp(),
        };
        let x = Tensor::from_vec(vec![3], vec![0.3, -0.2, 0.9]).unwrap();
        let adv = pgd(&target, &x, 1, &cfg, 0).unwrap();
        assert!(adv.bits_eq(&x));
    }

    #[test]
    fn single_step_full_alpha_hits_linear_worst_case() {
        // argmax of -y w.x over the inf-ball is x - eps * y * sign(w)
        let target = LinearTarget { w: vec![0.0, 0.4, -0.7, 1.2] };
        let eps = 0.25;
        let cfg = AttackConfig {
            epsilon: eps,
            alpha: eps,
            steps: 1,
            random_start: false,
            clamp: wide_clamp(),
        };
        for &y in &[1i64, -1] {
            let x = Tensor::from_vec(vec![4], vec![0.1, -0.3, 0.5, 0.2]).unwrap();
            let adv = pgd(&target, &x, y, &cfg, 0).unwrap();
            let expected: Vec<f64> = x
                .data()
                .iter()
                .zip(&target.w)
                .map(|(&v, &w)| v - eps * y as f64 * sign(w))
                .collect();
            assert_eq!(adv.data(), expected.as_slice());
        }
    }

    #[test]
    fn ball_and_clamp_containment_at_every_prefix() {
        let target = LinearTarget { w: vec![2.0, -1.0, 0.3, -0.6, 1.5] };
        let cfg_base = AttackConfig {
            epsilon: 0.1,
            alpha: 0.03,
            steps: 0, // overwritten below
            random_start: true,
            clamp: (0.0, 1.0),
        };
        let x = Tensor::from_vec(vec![5], vec![0.05, 0.5, 0.98, 0.2, 0.77]).unwrap();
        for steps in 1..=12 {
            let cfg = AttackConfig { steps, ..cfg_base.clone() };
            let adv = pgd(&target, &x, 1, &cfg, 99).unwrap();
            for (&a, &o) in adv.data().iter().zip(x.data()) {
                assert!((a - o).abs() <= cfg.epsilon + 1e-12);
                assert!((0.0..=1.0).contains(&a));
            }
        }
    }

    #[test]
    fn deterministic_with_random_start() {
        let target = LinearTarget { w: vec![1.0, 1.0] };
        let cfg = AttackConfig {
            epsilon: 0.2,
            alpha: 0.05,
            steps: 4,
            random_start: true,
            clamp: wide_clamp(),
        };
        let x = Tensor::from_vec(vec![2], vec![0.4, -0.1]).unwrap();
        let a = pgd(&target, &x, -1, &cfg, 1234).unwrap();
        let b = pgd(&target, &x, -1, &cfg, 1234).unwrap();
        assert!(a.bits_eq(&b));
    }

    #[test]
    fn robust_accuracy_at_zero_epsilon_equals_clean() {
        let target = LinearTarget { w: vec![1.0, -1.0] };
        let data: Vec<(Tensor, i64)> = (0..20)
            .map(|i| {
                let v = i as f64 / 20.0 - 0.5;
                (
                    Tensor::from_vec(vec![2], vec![v, -v]).unwrap(),
                    if v >= 0.0 { 1 } else { -1 },
                )
            })
            .collect();
        let cfg = AttackConfig {
            epsilon: 0.0,
            alpha: 0.0,
            steps: 1,
            random_start: false,
            clamp: wide_clamp(),
        };
        let ra = robust_accuracy(&target, &data, &cfg, 0).unwrap();
        let ca = clean_accuracy(&target, &data).unwrap();
        assert_eq!(ra, ca);
    }

    #[test]
    fn config_validation() {
        let mut cfg = AttackConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.alpha = cfg.epsilon * 2.0;
        assert!(cfg.validate().is_err());
        let bad_steps = AttackConfig { steps: 0, ..AttackConfig::default() };
        assert!(bad_steps.validate().is_err());
    }
}
