use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// Per-epoch learning-rate schedule, relative to a base rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    /// Half-cosine decay from the base rate towards 0, without restarts.
    Cosine,
    /// `base * (1 - epoch / total)^0.9`.
    Polynomial,
    /// Linear interpolation from `initial_rate` (the final non-zero rate of
    /// the schedule a model was originally trained with) to the polynomial
    /// schedule during the first `warmup_epochs`, then plain polynomial.
    WarmupComposite { initial_rate: f64, warmup_epochs: usize },
}

const POLY_POWER: f64 = 0.9;

pub fn schedule_lr(schedule: &Schedule, base: f64, epoch: usize, total_epochs: usize) -> Result<f64> {
    if epoch >= total_epochs {
        return Err(Error::EpochOutOfRange {
            epoch,
            total: total_epochs,
        });
    }
    let frac = epoch as f64 / total_epochs as f64;
    let poly = base * (1.0 - frac).powf(POLY_POWER);
    let lr = match schedule {
        Schedule::Constant => base,
        Schedule::Cosine => 0.5 * base * (1.0 + (PI * frac).cos()),
        Schedule::Polynomial => poly,
        Schedule::WarmupComposite {
            initial_rate,
            warmup_epochs,
        } => {
            if epoch < *warmup_epochs {
                let t = epoch as f64 / *warmup_epochs as f64;
                initial_rate + t * (poly - initial_rate)
            } else {
                poly
            }
        }
    };
    Ok(lr.max(0.0))
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
struct Moments {
    first: Vec<f32>,
    second: Vec<f32>,
}

/// AdamW with decoupled weight decay (the PyTorch update rule).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every trainable tensor and clears its gradient.
    ///
    /// Fails without touching any parameter if a trainable tensor has no
    /// gradient.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = (String, &'a mut Tensor)>) -> Result<()> {
        let params: Vec<(String, &mut Tensor)> = params.into_iter().filter(|(_, t)| t.requires_grad()).collect();
        if let Some((name, _)) = params.iter().find(|(_, t)| t.grad().is_none()) {
            return Err(Error::MissingGradient(name.clone()));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let step_size = (self.lr / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        let decay = (1.0 - self.lr * self.weight_decay) as f32;
        let (b1, b2, eps) = (self.beta1 as f32, self.beta2 as f32, self.eps as f32);
        for (name, tensor) in params {
            let grad = tensor.grad().expect("checked above").to_vec();
            let m = self.moments.entry(name).or_insert_with(|| Moments {
                first: vec![0.0; grad.len()],
                second: vec![0.0; grad.len()],
            });
            if m.first.len() != grad.len() {
                return Err(Error::shape("adamw", "moment buffers do not match parameter"));
            }
            let data = tensor.data_mut();
            for i in 0..grad.len() {
                let g = grad[i];
                m.first[i] = b1 * m.first[i] + (1.0 - b1) * g;
                m.second[i] = b2 * m.second[i] + (1.0 - b2) * g * g;
                data[i] *= decay;
                let denom = m.second[i].sqrt() / bc2_sqrt + eps;
                data[i] -= step_size * m.first[i] / denom;
            }
            tensor.zero_grad();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(values: &[f32], grad: &[f32]) -> Tensor {
        let mut t = Tensor::new(vec![values.len()], values.to_vec()).unwrap().with_requires_grad(true);
        t.accumulate_grad(grad).unwrap();
        t
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut opt = AdamW::new(1e-3, 0.0);
        let mut p = param(&[1.5, -2.0], &[0.0, 0.0]);
        opt.step([("p".to_string(), &mut p)]).unwrap();
        assert_eq!(p.data(), &[1.5, -2.0]);
        assert!(p.grad().is_none());
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn decoupled_decay_shrinks_multiplicatively() {
        let (lr, wd) = (0.01, 0.1);
        let mut opt = AdamW::new(lr, wd);
        let mut p = param(&[2.0, -4.0], &[0.0, 0.0]);
        opt.step([("p".to_string(), &mut p)]).unwrap();
        let factor = (1.0 - lr * wd) as f32;
        assert_eq!(p.data(), &[2.0 * factor, -4.0 * factor]);
    }

    #[test]
    fn single_step_matches_hand_computation() {
        // f(x) = (x - 3)^2 at x = 1: g = -4.
        // m = 0.1 * g, v = 0.001 * g^2; bias corrections 0.1 and 0.001,
        // so m_hat / (sqrt(v_hat) + eps) = g / (|g| + eps) ~= -1.
        // x' = x * (1 - lr * wd) - lr * (-4) / (4 + 1e-8)
        let (lr, wd) = (0.1, 0.01);
        let mut opt = AdamW::new(lr, wd);
        let mut p = param(&[1.0], &[-4.0]);
        opt.step([("x".to_string(), &mut p)]).unwrap();
        let expected = 1.0 * (1.0 - lr * wd) + lr * 4.0 / (4.0 + 1e-8);
        assert!((p.data()[0] as f64 - expected).abs() < 1e-6, "{} vs {expected}", p.data()[0]);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut opt = AdamW::new(1e-3, 0.0);
        let mut p = Tensor::zeros(&[2]).with_requires_grad(true);
        assert!(matches!(
            opt.step([("p".to_string(), &mut p)]),
            Err(Error::MissingGradient(_))
        ));
        assert_eq!(opt.steps(), 0);
    }

    #[test]
    fn cosine_endpoints() {
        let base = 1e-3;
        assert_eq!(schedule_lr(&Schedule::Cosine, base, 0, 100).unwrap(), base);
        let end = schedule_lr(&Schedule::Cosine, base, 999, 1000).unwrap();
        assert!(end < 1e-8, "{end}");
        assert!(schedule_lr(&Schedule::Cosine, base, 100, 100).is_err());
    }

    #[test]
    fn polynomial_matches_formula() {
        let lr = schedule_lr(&Schedule::Polynomial, 0.01, 25, 100).unwrap();
        assert!((lr - 0.01 * 0.75f64.powf(0.9)).abs() < 1e-15);
    }

    #[test]
    fn warmup_starts_at_previous_final_rate() {
        let final_rate = schedule_lr(&Schedule::Polynomial, 1e-2, 99, 100).unwrap();
        let s = Schedule::WarmupComposite {
            initial_rate: final_rate,
            warmup_epochs: 20,
        };
        assert_eq!(schedule_lr(&s, 1e-5, 0, 60).unwrap(), final_rate);
        let mid = schedule_lr(&s, 1e-5, 10, 60).unwrap();
        let poly = schedule_lr(&Schedule::Polynomial, 1e-5, 10, 60).unwrap();
        assert!((mid - (final_rate + 0.5 * (poly - final_rate))).abs() < 1e-15);
        assert_eq!(
            schedule_lr(&s, 1e-5, 20, 60).unwrap(),
            schedule_lr(&Schedule::Polynomial, 1e-5, 20, 60).unwrap()
        );
    }
}
