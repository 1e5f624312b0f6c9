//! Belief distributions and Bayesian surprise.
//!
//! Beliefs at one timestep are a probability distribution over N textual
//! hypotheses, obtained by a tempered softmax over their negative
//! log-likelihoods:
//!
//! ```text
//! P(b_i) = exp(-NLL(b_i)/τ) / Σ_j exp(-NLL(b_j)/τ)
//! ```
//!
//! Surprise is the divergence between the posterior distribution (after the
//! new frame was observed) and the prior distribution (before), either as
//! KL(post ‖ prior) in nats, or as a base-2 Jensen–Shannon divergence which
//! lands in [0, 1].

use serde::{Deserialize, Serialize};

/// Prior probabilities are floored at this value inside KL so a degenerate
/// prior cannot produce a division by zero.
pub const KL_PRIOR_FLOOR: f64 = 1e-12;

/// Errors from belief-space computations.
#[derive(Debug, thiserror::Error)]
pub enum BeliefError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("shape mismatch: left has {left} entries, right has {right}")]
    ShapeMismatch { left: usize, right: usize },
}

/// Softmax temperature. Strictly positive and finite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Temperature(f64);

impl Temperature {
    pub fn new(value: f64) -> Result<Self, BeliefError> {
        if !value.is_finite() || value <= 0.0 {
            return Err(BeliefError::InvalidParameter(format!(
                "temperature must be positive and finite, got {value}"
            )));
        }
        Ok(Temperature(value))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl Default for Temperature {
    fn default() -> Self {
        Temperature(1.0)
    }
}

impl TryFrom<f64> for Temperature {
    type Error = BeliefError;

    fn try_from(value: f64) -> Result<Self, Self::Error> {
        Temperature::new(value)
    }
}

impl From<Temperature> for f64 {
    fn from(t: Temperature) -> f64 {
        t.0
    }
}

/// Negative log-likelihoods (nats) for a hypothesis set, one per hypothesis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct NllVector(Vec<f64>);

impl NllVector {
    pub fn new(values: Vec<f64>) -> Result<Self, BeliefError> {
        if values.len() < 2 {
            return Err(BeliefError::InvalidInput(format!(
                "NLL vector needs at least 2 entries, got {}",
                values.len()
            )));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(BeliefError::InvalidInput(format!(
                "NLL vector contains non-finite entry {bad}"
            )));
        }
        Ok(NllVector(values))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for NllVector {
    type Error = BeliefError;

    fn try_from(values: Vec<f64>) -> Result<Self, Self::Error> {
        NllVector::new(values)
    }
}

impl From<NllVector> for Vec<f64> {
    fn from(v: NllVector) -> Vec<f64> {
        v.0
    }
}

/// A discrete probability distribution: entries in [0, 1] summing to 1
/// within 1e-9.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ProbabilityDistribution(Vec<f64>);

impl ProbabilityDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self, BeliefError> {
        if probs.is_empty() {
            return Err(BeliefError::InvalidInput(
                "probability distribution is empty".into(),
            ));
        }
        if let Some(bad) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(BeliefError::InvalidInput(format!(
                "probability {bad} outside [0, 1]"
            )));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(BeliefError::InvalidInput(format!(
                "probabilities sum to {sum}, expected 1"
            )));
        }
        Ok(ProbabilityDistribution(probs))
    }

    /// Exact uniform distribution over `n` outcomes.
    pub fn uniform(n: usize) -> Result<Self, BeliefError> {
        if n == 0 {
            return Err(BeliefError::InvalidInput(
                "cannot build a uniform distribution over 0 outcomes".into(),
            ));
        }
        Ok(ProbabilityDistribution(vec![1.0 / n as f64; n]))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for ProbabilityDistribution {
    type Error = BeliefError;

    fn try_from(probs: Vec<f64>) -> Result<Self, Self::Error> {
        ProbabilityDistribution::new(probs)
    }
}

impl From<ProbabilityDistribution> for Vec<f64> {
    fn from(d: ProbabilityDistribution) -> Vec<f64> {
        d.0
    }
}

/// Which divergence quantifies the belief shift.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DivergenceMode {
    /// KL(post ‖ prior) in nats. Unbounded above.
    #[default]
    Kl,
    /// Base-2 Jensen–Shannon divergence, bounded in [0, 1].
    Jsd,
}

impl std::str::FromStr for DivergenceMode {
    type Err = BeliefError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "kl" => Ok(DivergenceMode::Kl),
            "jsd" => Ok(DivergenceMode::Jsd),
            other => Err(BeliefError::InvalidParameter(format!(
                "unknown divergence mode {other:?} (expected \"kl\" or \"jsd\")"
            ))),
        }
    }
}

impl std::fmt::Display for DivergenceMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DivergenceMode::Kl => write!(f, "kl"),
            DivergenceMode::Jsd => write!(f, "jsd"),
        }
    }
}

/// A scalar surprise score together with the divergence that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurpriseScore {
    pub value: f64,
    pub mode: DivergenceMode,
}

/// Beliefs at one timestep: hypothesis texts with aligned prior and
/// posterior probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeliefState {
    pub hypotheses: Vec<String>,
    pub prior: ProbabilityDistribution,
    pub posterior: ProbabilityDistribution,
    /// Timestep in seconds from video start.
    pub timestep: f64,
}

impl BeliefState {
    pub fn new(
        hypotheses: Vec<String>,
        prior: ProbabilityDistribution,
        posterior: ProbabilityDistribution,
        timestep: f64,
    ) -> Result<Self, BeliefError> {
        let n = hypotheses.len();
        if prior.len() != n {
            return Err(BeliefError::ShapeMismatch {
                left: n,
                right: prior.len(),
            });
        }
        if posterior.len() != n {
            return Err(BeliefError::ShapeMismatch {
                left: n,
                right: posterior.len(),
            });
        }
        if hypotheses.iter().any(|h| h.trim().is_empty()) {
            return Err(BeliefError::InvalidInput("empty hypothesis text".into()));
        }
        if !timestep.is_finite() || timestep < 0.0 {
            return Err(BeliefError::InvalidInput(format!(
                "timestep must be a nonnegative number of seconds, got {timestep}"
            )));
        }
        Ok(BeliefState {
            hypotheses,
            prior,
            posterior,
            timestep,
        })
    }

    pub fn len(&self) -> usize {
        self.hypotheses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hypotheses.is_empty()
    }
}

/// Tempered softmax over negative log-likelihoods.
///
/// Exponents are shifted by their maximum before exponentiation, so large
/// NLL spreads cannot overflow.
pub fn distribution_from_nll(
    nlls: &NllVector,
    tau: Temperature,
) -> Result<ProbabilityDistribution, BeliefError> {
    let tau = tau.value();
    let logits: Vec<f64> = nlls.values().iter().map(|nll| -nll / tau).collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = weights.iter().sum();
    let probs = weights.iter().map(|w| w / sum).collect();
    ProbabilityDistribution::new(probs)
}

/// KL(post ‖ prior) in nats.
///
/// Terms with `post[i] == 0` contribute nothing; prior entries are floored
/// at [`KL_PRIOR_FLOOR`] before the division. Tiny negative rounding
/// residue near zero is clamped so the result is always nonnegative.
pub fn kl_divergence(
    post: &ProbabilityDistribution,
    prior: &ProbabilityDistribution,
) -> Result<f64, BeliefError> {
    if post.len() != prior.len() {
        return Err(BeliefError::ShapeMismatch {
            left: post.len(),
            right: prior.len(),
        });
    }
    let mut kl = 0.0;
    for (&p, &q) in post.probs().iter().zip(prior.probs()) {
        if p > 0.0 {
            kl += p * (p / q.max(KL_PRIOR_FLOOR)).ln();
        }
    }
    Ok(kl.max(0.0))
}

/// Jensen–Shannon divergence with base-2 logarithms, bounded in [0, 1].
///
/// ```text
/// JSD(post, prior) = ½ KL₂(post ‖ M) + ½ KL₂(prior ‖ M),  M = ½(post + prior)
/// ```
pub fn jsd(
    post: &ProbabilityDistribution,
    prior: &ProbabilityDistribution,
) -> Result<f64, BeliefError> {
    if post.len() != prior.len() {
        return Err(BeliefError::ShapeMismatch {
            left: post.len(),
            right: prior.len(),
        });
    }
    let mid: Vec<f64> = post
        .probs()
        .iter()
        .zip(prior.probs())
        .map(|(&p, &q)| 0.5 * (p + q))
        .collect();
    let half_kl2 = |dist: &[f64]| -> f64 {
        dist.iter()
            .zip(&mid)
            .filter(|(&p, _)| p > 0.0)
            .map(|(&p, &m)| p * (p / m).log2())
            .sum::<f64>()
    };
    let value = 0.5 * half_kl2(post.probs()) + 0.5 * half_kl2(prior.probs());
    Ok(value.clamp(0.0, 1.0))
}

/// Surprise score from raw NLL vectors: softmax both sides, then apply the
/// selected divergence with the posterior as first argument.
pub fn surprise(
    prior_nlls: &NllVector,
    post_nlls: &NllVector,
    tau: Temperature,
    mode: DivergenceMode,
) -> Result<SurpriseScore, BeliefError> {
    if prior_nlls.len() != post_nlls.len() {
        return Err(BeliefError::ShapeMismatch {
            left: prior_nlls.len(),
            right: post_nlls.len(),
        });
    }
    let prior = distribution_from_nll(prior_nlls, tau)?;
    let post = distribution_from_nll(post_nlls, tau)?;
    let value = match mode {
        DivergenceMode::Kl => kl_divergence(&post, &prior)?,
        DivergenceMode::Jsd => jsd(&post, &prior)?,
    };
    Ok(SurpriseScore { value, mode })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn dist(probs: &[f64]) -> ProbabilityDistribution {
        ProbabilityDistribution::new(probs.to_vec()).unwrap()
    }

    fn nll(values: &[f64]) -> NllVector {
        NllVector::new(values.to_vec()).unwrap()
    }

    fn tau(v: f64) -> Temperature {
        Temperature::new(v).unwrap()
    }

    #[test]
    fn softmax_hand_value() {
        let d = distribution_from_nll(
            &nll(&[2.0_f64.ln(), 4.0_f64.ln(), 4.0_f64.ln()]),
            tau(1.0),
        )
        .unwrap();
        assert_abs_diff_eq!(d.probs()[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(d.probs()[1], 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(d.probs()[2], 0.25, epsilon = 1e-12);
    }

    #[test]
    fn softmax_constant_nll_is_uniform() {
        let d = distribution_from_nll(&nll(&[3.7, 3.7, 3.7]), tau(1.0)).unwrap();
        for &p in d.probs() {
            assert_abs_diff_eq!(p, 1.0 / 3.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn softmax_sharp_temperature() {
        // Arbitrary-precision oracle: exp(-100) / (1 + exp(-100)).
        let d = distribution_from_nll(&nll(&[0.0, 10.0]), tau(0.1)).unwrap();
        assert_abs_diff_eq!(d.probs()[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(d.probs()[1], 3.7200759760208360e-44, epsilon = 1e-55);
    }

    #[test]
    fn softmax_survives_huge_nll_spread() {
        let d = distribution_from_nll(&nll(&[0.0, 1e6]), tau(1.0)).unwrap();
        assert_eq!(d.probs()[0], 1.0);
        assert_eq!(d.probs()[1], 0.0);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        assert!(NllVector::new(vec![0.0, f64::NAN]).is_err());
        assert!(NllVector::new(vec![0.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn temperature_rejects_nonpositive() {
        assert!(Temperature::new(0.0).is_err());
        assert!(Temperature::new(-1.0).is_err());
        assert!(Temperature::new(f64::NAN).is_err());
    }

    #[test]
    fn kl_of_identical_distributions_is_zero() {
        let d = dist(&[0.5, 0.5]);
        assert_eq!(kl_divergence(&d, &d).unwrap(), 0.0);
    }

    #[test]
    fn kl_hand_value() {
        // 0.5 ln 2 + 0.5 ln(2/3) = 0.14384103622589046
        let kl = kl_divergence(&dist(&[0.5, 0.5]), &dist(&[0.25, 0.75])).unwrap();
        assert_abs_diff_eq!(kl, 0.14384103622589046, epsilon = 1e-12);
    }

    #[test]
    fn kl_single_term() {
        let kl = kl_divergence(&dist(&[1.0, 0.0]), &dist(&[0.5, 0.5])).unwrap();
        assert_abs_diff_eq!(kl, 2.0_f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn kl_shape_mismatch() {
        let err = kl_divergence(&dist(&[0.5, 0.5]), &dist(&[0.2, 0.3, 0.5])).unwrap_err();
        assert!(matches!(err, BeliefError::ShapeMismatch { left: 2, right: 3 }));
    }

    #[test]
    fn kl_floors_degenerate_prior() {
        let kl = kl_divergence(&dist(&[1.0, 0.0]), &dist(&[0.0, 1.0])).unwrap();
        assert!(kl.is_finite());
        assert_abs_diff_eq!(kl, (1.0 / KL_PRIOR_FLOOR).ln(), epsilon = 1e-9);
    }

    #[test]
    fn jsd_identical_is_zero() {
        let d = dist(&[0.3, 0.7]);
        assert_eq!(jsd(&d, &d).unwrap(), 0.0);
    }

    #[test]
    fn jsd_disjoint_supports_is_one() {
        let j = jsd(&dist(&[1.0, 0.0]), &dist(&[0.0, 1.0])).unwrap();
        assert_abs_diff_eq!(j, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn jsd_matches_direct_formula() {
        // Independent evaluation of ½KL₂(p‖m) + ½KL₂(q‖m), m = (p+q)/2,
        // written out term by term.
        let p = [0.5, 0.5];
        let q = [0.25, 0.75];
        let m = [0.375, 0.625];
        let oracle = 0.5 * (p[0] * (p[0] / m[0]).log2() + p[1] * (p[1] / m[1]).log2())
            + 0.5 * (q[0] * (q[0] / m[0]).log2() + q[1] * (q[1] / m[1]).log2());
        let j = jsd(&dist(&p), &dist(&q)).unwrap();
        assert_abs_diff_eq!(j, oracle, epsilon = 1e-15);
        assert_abs_diff_eq!(j, 0.04879494069539853, epsilon = 1e-12);
    }

    #[test]
    fn surprise_no_update_is_zero() {
        let nlls = nll(&[0.4, 1.3, 2.2]);
        for mode in [DivergenceMode::Kl, DivergenceMode::Jsd] {
            let s = surprise(&nlls, &nlls, tau(0.7), mode).unwrap();
            assert_eq!(s.value, 0.0);
            assert_eq!(s.mode, mode);
        }
    }

    #[test]
    fn surprise_matches_composition() {
        let prior_nlls = nll(&[2.0_f64.ln(), 2.0_f64.ln()]);
        let post_nlls = nll(&[0.0001, 9.21]);
        let t = tau(1.0);
        let s = surprise(&prior_nlls, &post_nlls, t, DivergenceMode::Kl).unwrap();
        let expected = kl_divergence(
            &distribution_from_nll(&post_nlls, t).unwrap(),
            &distribution_from_nll(&prior_nlls, t).unwrap(),
        )
        .unwrap();
        assert_eq!(s.value, expected);
    }

    #[test]
    fn surprise_length_mismatch() {
        let err = surprise(
            &nll(&[0.1, 0.2]),
            &nll(&[0.1, 0.2, 0.3]),
            tau(1.0),
            DivergenceMode::Kl,
        )
        .unwrap_err();
        assert!(matches!(err, BeliefError::ShapeMismatch { .. }));
    }

    #[test]
    fn belief_state_requires_aligned_lengths() {
        let err = BeliefState::new(
            vec!["a".into(), "b".into()],
            dist(&[0.5, 0.5]),
            dist(&[0.2, 0.3, 0.5]),
            0.0,
        )
        .unwrap_err();
        assert!(matches!(err, BeliefError::ShapeMismatch { .. }));
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn nll_vec() -> impl Strategy<Value = Vec<f64>> {
            proptest::collection::vec(0.0_f64..10.0, 2..8)
        }

        proptest! {
            #[test]
            fn softmax_sums_to_one(values in nll_vec(), t in 0.2_f64..3.0) {
                let d = distribution_from_nll(
                    &NllVector::new(values).unwrap(),
                    Temperature::new(t).unwrap(),
                ).unwrap();
                let sum: f64 = d.probs().iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-9);
            }

            #[test]
            fn softmax_shift_invariant(values in nll_vec(), shift in -5.0_f64..5.0) {
                let base = distribution_from_nll(
                    &NllVector::new(values.clone()).unwrap(),
                    Temperature::default(),
                ).unwrap();
                let shifted = distribution_from_nll(
                    &NllVector::new(values.iter().map(|v| v + shift).collect()).unwrap(),
                    Temperature::default(),
                ).unwrap();
                for (a, b) in base.probs().iter().zip(shifted.probs()) {
                    prop_assert!((a - b).abs() < 1e-12);
                }
            }

            #[test]
            fn lower_tau_sharpens_argmin(values in nll_vec(), t in 0.5_f64..2.0, factor in 0.5_f64..0.9) {
                // Keep a clear gap so saturation cannot flatten the comparison.
                let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
                let gapped: Vec<f64> = values
                    .iter()
                    .map(|&v| if v == min { v } else { v.max(min + 0.1) })
                    .collect();
                prop_assume!(gapped.iter().filter(|&&v| v == min).count() == 1);
                let argmin = gapped.iter().position(|&v| v == min).unwrap();
                let wide = distribution_from_nll(
                    &NllVector::new(gapped.clone()).unwrap(),
                    Temperature::new(t).unwrap(),
                ).unwrap();
                let sharp = distribution_from_nll(
                    &NllVector::new(gapped).unwrap(),
                    Temperature::new(t * factor).unwrap(),
                ).unwrap();
                prop_assert!(sharp.probs()[argmin] > wide.probs()[argmin]);
            }

            #[test]
            fn kl_nonnegative_and_jsd_bounded(
                a in proptest::collection::vec(0.01_f64..1.0, 4),
                b in proptest::collection::vec(0.01_f64..1.0, 4),
            ) {
                let norm = |v: &[f64]| {
                    let s: f64 = v.iter().sum();
                    ProbabilityDistribution::new(v.iter().map(|x| x / s).collect()).unwrap()
                };
                let p = norm(&a);
                let q = norm(&b);
                let kl = kl_divergence(&p, &q).unwrap();
                prop_assert!(kl >= 0.0);
                let j = jsd(&p, &q).unwrap();
                prop_assert!((0.0..=1.0).contains(&j));
                let j_rev = jsd(&q, &p).unwrap();
                prop_assert!((j - j_rev).abs() < 1e-12);
            }
        }
    }
}
