//! AdamW with decoupled weight decay and a warmup-then-cosine schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Per-parameter first/second moments and the shared step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One bias-corrected AdamW update of every parameter named in `grads`:
    ///
    /// `theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)`.
    ///
    /// Parameters without a gradient are not touched. Gradients are checked
    /// for finiteness before anything is modified.
    pub fn step<P: ParamSet + ?Sized>(
        &mut self,
        params: &mut P,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
    ) -> Result<()> {
        self.step_with(params, grads, |_| lr)
    }

    /// [`AdamW::step`] with a per-parameter learning rate.
    pub fn step_with<P: ParamSet + ?Sized>(
        &mut self,
        params: &mut P,
        grads: &BTreeMap<String, Tensor>,
        lr_for: impl Fn(&str) -> f64,
    ) -> Result<()> {
        if let Some((name, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient for `{name}`")));
        }
        self.step += 1;
        let t = self.step as i32;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let moments = &mut self.moments;
        let mut seen = 0;
        let mut shape_err = None;
        params.visit_mut("", &mut |name, theta| {
            let Some(g) = grads.get(&name) else {
                return;
            };
            seen += 1;
            let lr = lr_for(&name);
            if g.shape() != theta.shape() {
                shape_err = Some(Error::dim(
                    "adamw",
                    format!("gradient {:?} for `{name}` {:?}", g.shape(), theta.shape()),
                ));
                return;
            }
            let st = moments.entry(name).or_insert_with(|| Moments {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
            });
            for (((p, &gi), m), v) in theta
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(&mut st.m)
                .zip(&mut st.v)
            {
                *m = beta1 * *m + (1.0 - beta1) * gi;
                *v = beta2 * *v + (1.0 - beta2) * gi * gi;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * *p);
            }
        });
        if let Some(e) = shape_err {
            return Err(e);
        }
        if seen != grads.len() {
            let known = params.names();
            let missing = grads.keys().find(|k| !known.contains(k)).cloned().unwrap_or_default();
            return Err(Error::Lookup(format!("gradient for unknown parameter `{missing}`")));
        }
        Ok(())
    }
}

/// Number of warmup steps: `ceil(warmup_ratio * total_steps)`.
pub fn warmup_steps(total_steps: u64, warmup_ratio: f64) -> u64 {
    (warmup_ratio * total_steps as f64).ceil() as u64
}

/// Linear ramp `0 -> peak` over the warmup steps, then cosine decay
/// `peak -> 0` over the remaining steps.
pub fn lr_at(step: u64, total_steps: u64, peak: f64, warmup_ratio: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::config("schedule needs at least one step"));
    }
    if step > total_steps {
        return Err(Error::Contract(format!("step {step} beyond {total_steps} total steps")));
    }
    if !(0.0..=1.0).contains(&warmup_ratio) {
        return Err(Error::config(format!("warmup ratio {warmup_ratio} outside [0, 1]")));
    }
    let warmup = warmup_steps(total_steps, warmup_ratio);
    if step < warmup {
        return Ok(peak * step as f64 / warmup as f64);
    }
    let span = total_steps - warmup;
    if span == 0 {
        return Ok(peak);
    }
    let progress = (step - warmup) as f64 / span as f64;
    Ok(peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(name: &str, v: f64) -> BTreeMap<String, Tensor> {
        BTreeMap::from([(name.to_string(), Tensor::vector(vec![v]))])
    }

    #[test]
    fn zero_grad_zero_decay_is_noop() {
        let mut p = BTreeMap::from([("w".to_string(), Tensor::vector(vec![1.5, -2.0]))]);
        let before = p.clone();
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        });
        let g = BTreeMap::from([("w".to_string(), Tensor::vector(vec![0.0, 0.0]))]);
        opt.step(&mut p, &g, 0.1).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn single_step_closed_form() {
        // m = 0.1, v = 0.05; bias corrections 0.1 and 0.05 give m_hat = v_hat = 1
        let mut p = BTreeMap::from([("w".to_string(), Tensor::vector(vec![2.0]))]);
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        });
        opt.step(&mut p, &one("w", 1.0), 0.1).unwrap();
        let m_hat = (0.1 * 1.0) / (1.0 - 0.9);
        let v_hat: f64 = (0.05 * 1.0) / (1.0 - 0.95);
        let expected = 2.0 - 0.1 * m_hat / (v_hat.sqrt() + 1e-8);
        assert!((p["w"].data()[0] - expected).abs() < 1e-15);
        assert!((p["w"].data()[0] - (2.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn pure_decay() {
        let mut p = BTreeMap::from([("w".to_string(), Tensor::vector(vec![3.0]))]);
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step(&mut p, &one("w", 0.0), 0.01).unwrap();
        assert!((p["w"].data()[0] - 3.0 * (1.0 - 0.01 * 0.1)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = BTreeMap::from([("w".to_string(), Tensor::vector(vec![3.0]))]);
        let before = p.clone();
        let mut opt = AdamW::new(AdamWConfig::default());
        let err = opt.step(&mut p, &one("w", f64::NAN), 0.01).unwrap_err();
        assert!(err.to_string().contains("`w`"));
        assert_eq!(p, before);
        assert!(opt.step(&mut p, &one("nope", 1.0), 0.01).is_err());
    }

    #[test]
    fn schedule_points() {
        let (total, peak) = (1000, 0.3);
        let w = warmup_steps(total, 0.01);
        assert_eq!(w, 10);
        assert_eq!(lr_at(0, total, peak, 0.01).unwrap(), 0.0);
        assert_eq!(lr_at(5, total, peak, 0.01).unwrap(), 0.15);
        assert_eq!(lr_at(w, total, peak, 0.01).unwrap(), peak);
        assert!(lr_at(total, total, peak, 0.01).unwrap().abs() < 1e-12);
        let mid = w + (total - w) / 2;
        assert!((lr_at(mid, total, peak, 0.01).unwrap() - 0.5 * peak).abs() < 1e-12);
        assert!(lr_at(0, 0, peak, 0.01).is_err());
        assert!(lr_at(1001, total, peak, 0.01).is_err());
    }
}
