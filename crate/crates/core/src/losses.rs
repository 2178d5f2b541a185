//! Cross-entropy, generalized cross-entropy and the exponentially weighted
//! cross-entropy used during debiased finetuning.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::SampleId;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum LossError {
    #[error("empty logits")]
    EmptyLogits,
    #[error("target {target} out of range for {len} logits")]
    TargetOutOfRange { target: usize, len: usize },
    #[error("invalid q = {0}; must lie in (0, 1]")]
    InvalidQ(f64),
    #[error("invalid GCE value {value} for sample {id}")]
    InvalidCacheValue { id: SampleId, value: f64 },
    #[error("sample {0} already has a cached GCE value")]
    AlreadyCached(SampleId),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GceConfig {
    pub q: f64,
    /// Lower clamp applied to p_y before evaluating the loss.
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_eps() -> f64 {
    1e-12
}

impl Default for GceConfig {
    fn default() -> Self {
        Self { q: 0.7, eps: default_eps() }
    }
}

impl GceConfig {
    pub fn new(q: f64) -> Result<Self, LossError> {
        let cfg = Self { q, ..Self::default() };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.q > 0.0 && self.q <= 1.0) {
            return Err(LossError::InvalidQ(self.q));
        }
        Ok(())
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn check(logits: &[f64], target: usize) -> Result<(), LossError> {
    if logits.is_empty() {
        return Err(LossError::EmptyLogits);
    }
    if target >= logits.len() {
        return Err(LossError::TargetOutOfRange { target, len: logits.len() });
    }
    Ok(())
}

/// −log softmax(logits)[target] and its gradient softmax − onehot.
pub fn ce_loss(logits: &[f64], target: usize) -> Result<(f64, Vec<f64>), LossError> {
    check(logits, target)?;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    let loss = lse - logits[target];
    let mut grad = softmax(logits);
    grad[target] -= 1.0;
    Ok((loss.max(0.0), grad))
}

/// (1 − p_y^q)/q and its derivative −p_y^(q−1) with respect to p_y.
///
/// A p_y below `cfg.eps` is clamped and reported through `log::warn!`.
pub fn gce_loss(p_target: f64, cfg: &GceConfig) -> (f64, f64) {
    let p = if p_target < cfg.eps {
        log::warn!("GCE: p_y = {p_target:e} clamped to {:e}", cfg.eps);
        cfg.eps
    } else {
        p_target.min(1.0)
    };
    let q = cfg.q;
    ((1.0 - p.powf(q)) / q, -p.powf(q - 1.0))
}

/// GCE evaluated from logits. The gradient is chained through the softmax Jacobian,
/// dp_y/dz_j = p_y (δ_jy − p_j).
pub fn gce_from_logits(logits: &[f64], target: usize, cfg: &GceConfig) -> Result<(f64, Vec<f64>), LossError> {
    check(logits, target)?;
    let probs = softmax(logits);
    let p = probs[target];
    let (loss, dloss_dp) = gce_loss(p, cfg);
    let grad = probs
        .iter()
        .enumerate()
        .map(|(j, pj)| {
            let delta = if j == target { 1.0 } else { 0.0 };
            dloss_dp * p * (delta - pj)
        })
        .collect();
    Ok((loss, grad))
}

/// W(x) = exp(α · L_GCE(x)).
pub fn wce_weight(cached_gce: f64, alpha: f64) -> f64 {
    (alpha * cached_gce).exp()
}

/// Logistic squashing of the unconstrained parameter into (0, 1).
pub fn alpha_value(alpha_raw: f64) -> f64 {
    let a = if alpha_raw >= 0.0 {
        1.0 / (1.0 + (-alpha_raw).exp())
    } else {
        let e = alpha_raw.exp();
        e / (1.0 + e)
    };
    // Far tails round to 0 or 1 in f64; keep the interval open.
    a.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

/// d alpha / d alpha_raw.
pub fn alpha_derivative(alpha_raw: f64) -> f64 {
    let a = alpha_value(alpha_raw);
    a * (1.0 - a)
}

/// Inverse of [`alpha_value`] for α in (0, 1).
pub fn alpha_raw_for(alpha: f64) -> f64 {
    (alpha / (1.0 - alpha)).ln()
}

/// Per-sample GCE values of the biased network, filled once per task.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleWeightCache {
    values: BTreeMap<SampleId, f64>,
}

impl SampleWeightCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: SampleId, gce: f64) -> Result<(), LossError> {
        if !(gce >= 0.0) || !gce.is_finite() {
            return Err(LossError::InvalidCacheValue { id, value: gce });
        }
        if self.values.contains_key(&id) {
            return Err(LossError::AlreadyCached(id));
        }
        self.values.insert(id, gce);
        Ok(())
    }

    pub fn get(&self, id: SampleId) -> Option<f64> {
        self.values.get(&id).copied()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (SampleId, f64)> + '_ {
        self.values.iter().map(|(k, v)| (*k, *v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ce_uniform_and_saturated() {
        let (l, g) = ce_loss(&[0.0, 0.0], 0).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((g[0] + 0.5).abs() < 1e-15 && (g[1] - 0.5).abs() < 1e-15);
        let (l, _) = ce_loss(&[1000.0, 0.0], 0).unwrap();
        assert!(l.is_finite() && l < 1e-300);
        let (l, _) = ce_loss(&[0.0, 1000.0], 0).unwrap();
        assert!((l - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn ce_matches_arbitrary_precision_oracle() {
        // Reference values evaluated at 50 significant digits.
        let cases: [([f64; 5], usize, f64); 5] = [
            ([-2.114007, -4.18981, 1.811214, -5.130765, 0.430584], 2, 0.24263275957661363945),
            ([0.993456, 4.916449, -3.423622, -4.968633, -0.981934], 1, 0.022558983291569459254),
            ([-4.911444, -0.90577, 3.922225, -4.514376, -3.321132], 4, 7.2523960111422081817),
            ([5.372507, 0.925235, -1.239834, 5.715061, -5.441008], 1, 5.3317065453361281332),
            ([-2.524689, -4.268939, -4.586493, -2.298218, 3.793516], 1, 8.0670536315101599048),
        ];
        for (z, t, expected) in cases {
            let (l, _) = ce_loss(&z, t).unwrap();
            assert!((l - expected).abs() < 1e-10, "{l} vs {expected}");
        }
    }

    #[test]
    fn ce_rejects_bad_input() {
        assert_eq!(ce_loss(&[], 0), Err(LossError::EmptyLogits));
        assert!(matches!(ce_loss(&[1.0], 1), Err(LossError::TargetOutOfRange { .. })));
    }

    #[test]
    fn gce_examples() {
        for q in [0.1, 0.7, 1.0] {
            assert_eq!(gce_loss(1.0, &GceConfig { q, eps: 1e-12 }).0, 0.0);
        }
        let (l, d) = gce_loss(0.3, &GceConfig { q: 1.0, eps: 1e-12 });
        assert!((l - 0.7).abs() < 1e-15);
        assert!((d + 1.0).abs() < 1e-15);
        let (l, _) = gce_loss(0.5, &GceConfig::default());
        assert!((l - 0.54918256189648836821).abs() < 1e-12);
    }

    #[test]
    fn gce_clamps_zero_probability() {
        let cfg = GceConfig::default();
        let (l, d) = gce_loss(0.0, &cfg);
        assert!(l.is_finite() && d.is_finite());
        assert!((l - (1.0 - 1e-12f64.powf(0.7)) / 0.7).abs() < 1e-15);
    }

    #[test]
    fn gce_derivative_matches_finite_difference() {
        let cfg = GceConfig::default();
        for p in [0.1, 0.35, 0.8] {
            let h = 1e-6;
            let fd = (gce_loss(p + h, &cfg).0 - gce_loss(p - h, &cfg).0) / (2.0 * h);
            assert!((fd - gce_loss(p, &cfg).1).abs() < 1e-7);
        }
    }

    #[test]
    fn gce_small_q_approaches_log_loss() {
        let cfg = GceConfig { q: 1e-4, eps: 1e-12 };
        for p in [0.05, 0.3, 0.9] {
            assert!((gce_loss(p, &cfg).0 + f64::ln(p)).abs() < 1e-3);
        }
    }

    #[test]
    fn q_validation() {
        assert!(GceConfig::new(0.0).is_err());
        assert!(GceConfig::new(1.5).is_err());
        assert!(GceConfig::new(1.0).is_ok());
    }

    #[test]
    fn weight_examples() {
        assert_eq!(wce_weight(0.0, 0.5), 1.0);
        assert!((wce_weight(2.0, 0.5) - 2.7182818284590452354).abs() < 1e-12);
        assert!(wce_weight(0.3, 0.4) <= wce_weight(0.31, 0.4));
    }

    #[test]
    fn alpha_examples() {
        assert_eq!(alpha_value(0.0), 0.5);
        assert!(alpha_value(40.0) < 1.0);
        assert!(alpha_value(-800.0) > 0.0);
        let h = 1e-6;
        let fd = (alpha_value(h) - alpha_value(-h)) / (2.0 * h);
        assert!((fd - 0.25).abs() < 1e-9);
        assert_eq!(alpha_derivative(0.0), 0.25);
        assert!((alpha_value(alpha_raw_for(0.3)) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn cache_is_write_once() {
        let mut cache = SampleWeightCache::new();
        cache.insert(3, 0.2).unwrap();
        assert_eq!(cache.insert(3, 0.1), Err(LossError::AlreadyCached(3)));
        assert!(cache.insert(4, -0.1).is_err());
        assert!(cache.insert(5, f64::NAN).is_err());
        assert_eq!(cache.get(3), Some(0.2));
    }

    proptest! {
        #[test]
        fn gce_gradient_is_scaled_ce_gradient(
            logits in prop::collection::vec(-8.0f64..8.0, 2..7),
            t in 0usize..7,
            q in 0.05f64..1.0,
        ) {
            let t = t % logits.len();
            let cfg = GceConfig { q, eps: 1e-12 };
            let (_, ce) = ce_loss(&logits, t).unwrap();
            let (_, gce) = gce_from_logits(&logits, t, &cfg).unwrap();
            let p = softmax(&logits)[t];
            for (a, b) in gce.iter().zip(&ce) {
                let expect = p.powf(q) * b;
                prop_assert!((a - expect).abs() <= 1e-8 * expect.abs().max(1e-300));
            }
        }

        #[test]
        fn weights_at_least_one_and_increasing(a in 0.0f64..5.0, d in 1e-6f64..5.0, alpha in 0.001f64..0.999) {
            prop_assert!(wce_weight(a, alpha) >= 1.0);
            prop_assert!(wce_weight(a + d, alpha) > wce_weight(a, alpha));
        }
    }
}
