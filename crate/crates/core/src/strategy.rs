//! Mixed strategies over commuting options and the explicit update rules
//! applied when an agent reinforces a subset of options: proportional mass
//! shifting, multiplicative weights, and the equivalent propensity form,
//! plus the diminishing step-size schedule and decimal quantization used
//! when strategies are echoed back through dialog.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StrategyError {
    #[error("strategy must have at least one option")]
    Empty,
    #[error("probability {value} at option {index} is not a finite nonnegative number")]
    BadProbability { index: usize, value: f64 },
    #[error("probabilities sum to {sum}, expected 1")]
    SumNotOne { sum: f64 },
    #[error("step size must lie strictly between 0 and 1, got {0}")]
    BadEta(f64),
    #[error("step schedule parameters are invalid: {0}")]
    BadSchedule(String),
    #[error("reinforced set is empty")]
    EmptyReinforcedSet,
    #[error("reinforced option {index} is out of range for {count} options")]
    ReinforcedOutOfRange { index: usize, count: usize },
    #[error("reinforced options carry zero probability; nothing to scale")]
    DegenerateSupport,
    #[error("updated probabilities drifted from the simplex by {drift}")]
    SimplexDrift { drift: f64 },
}

/// A probability vector over a class's commuting options. Construction
/// validates nonnegativity and unit sum (tolerance 1e-9), then renormalizes
/// so the stored values sum to 1 up to rounding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct MixedStrategy {
    probs: Vec<f64>,
}

impl MixedStrategy {
    pub fn new(probs: Vec<f64>) -> Result<Self, StrategyError> {
        if probs.is_empty() {
            return Err(StrategyError::Empty);
        }
        for (index, &value) in probs.iter().enumerate() {
            if !(value >= 0.0 && value.is_finite()) {
                return Err(StrategyError::BadProbability { index, value });
            }
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(StrategyError::SumNotOne { sum });
        }
        Ok(Self::renormalized(probs))
    }

    /// Equal probability on each of `n` options.
    pub fn uniform(n: usize) -> Result<Self, StrategyError> {
        if n == 0 {
            return Err(StrategyError::Empty);
        }
        Ok(MixedStrategy { probs: vec![1.0 / n as f64; n] })
    }

    fn renormalized(mut probs: Vec<f64>) -> Self {
        let sum: f64 = probs.iter().sum();
        for p in &mut probs {
            *p /= sum;
        }
        MixedStrategy { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

impl TryFrom<Vec<f64>> for MixedStrategy {
    type Error = StrategyError;
    /// Deserialization path: validates like `new` but keeps the stored bits,
    /// so a serialized strategy round-trips exactly instead of picking up a
    /// one-ulp shift from a second renormalization.
    fn try_from(probs: Vec<f64>) -> Result<Self, Self::Error> {
        if probs.is_empty() {
            return Err(StrategyError::Empty);
        }
        for (index, &value) in probs.iter().enumerate() {
            if !(value >= 0.0 && value.is_finite()) {
                return Err(StrategyError::BadProbability { index, value });
            }
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(StrategyError::SumNotOne { sum });
        }
        Ok(MixedStrategy { probs })
    }
}

impl From<MixedStrategy> for Vec<f64> {
    fn from(s: MixedStrategy) -> Vec<f64> {
        s.probs
    }
}

fn check_update_args(
    strategy: &MixedStrategy,
    reinforced: &[usize],
    eta: f64,
) -> Result<(), StrategyError> {
    if !(eta > 0.0 && eta < 1.0) {
        return Err(StrategyError::BadEta(eta));
    }
    if reinforced.is_empty() {
        return Err(StrategyError::EmptyReinforcedSet);
    }
    for &index in reinforced {
        if index >= strategy.len() {
            return Err(StrategyError::ReinforcedOutOfRange { index, count: strategy.len() });
        }
    }
    Ok(())
}

fn finish_update(probs: Vec<f64>) -> Result<MixedStrategy, StrategyError> {
    let sum: f64 = probs.iter().sum();
    let drift = (sum - 1.0).abs();
    if drift > 1e-12 {
        return Err(StrategyError::SimplexDrift { drift });
    }
    Ok(MixedStrategy::renormalized(probs))
}

/// Proportional mass shift: the reinforced options' combined probability `s`
/// moves to `s′ = (1−η)s + η`, scaling each reinforced option by `s′/s` and
/// every other option by `1−η`. Requires `s > 0`.
pub fn rule1_update(
    strategy: &MixedStrategy,
    reinforced: &[usize],
    eta: f64,
) -> Result<MixedStrategy, StrategyError> {
    check_update_args(strategy, reinforced, eta)?;
    let mut in_set = vec![false; strategy.len()];
    for &index in reinforced {
        in_set[index] = true;
    }
    let s: f64 = strategy
        .probs
        .iter()
        .zip(&in_set)
        .filter(|(_, &m)| m)
        .map(|(&p, _)| p)
        .sum();
    if s == 0.0 {
        return Err(StrategyError::DegenerateSupport);
    }
    let s_next = (1.0 - eta) * s + eta;
    let grow = s_next / s;
    let shrink = 1.0 - eta;
    let probs = strategy
        .probs
        .iter()
        .zip(&in_set)
        .map(|(&p, &m)| if m { p * grow } else { p * shrink })
        .collect();
    finish_update(probs)
}

/// Multiplicative-weights shift: each reinforced option's probability is
/// scaled by `e^η`, then the vector is normalized.
pub fn rule2_update(
    strategy: &MixedStrategy,
    reinforced: &[usize],
    eta: f64,
) -> Result<MixedStrategy, StrategyError> {
    check_update_args(strategy, reinforced, eta)?;
    let mut weights = strategy.probs.clone();
    let boost = eta.exp();
    for &index in reinforced {
        weights[index] *= boost;
    }
    Ok(MixedStrategy::renormalized(weights))
}

/// Adds `η` to each reinforced option's propensity. Mapping propensities
/// through [`softmax`] before and after reproduces [`rule2_update`].
pub fn propensity_update(
    propensities: &[f64],
    reinforced: &[usize],
    eta: f64,
) -> Result<Vec<f64>, StrategyError> {
    if !(eta > 0.0 && eta < 1.0) {
        return Err(StrategyError::BadEta(eta));
    }
    if reinforced.is_empty() {
        return Err(StrategyError::EmptyReinforcedSet);
    }
    for &index in reinforced {
        if index >= propensities.len() {
            return Err(StrategyError::ReinforcedOutOfRange {
                index,
                count: propensities.len(),
            });
        }
    }
    let mut next = propensities.to_vec();
    for &index in reinforced {
        next[index] += eta;
    }
    Ok(next)
}

/// Numerically stable softmax: `p_k ∝ e^{q_k}`.
pub fn softmax(propensities: &[f64]) -> Result<MixedStrategy, StrategyError> {
    if propensities.is_empty() {
        return Err(StrategyError::Empty);
    }
    let max = propensities.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    if !max.is_finite() {
        return Err(StrategyError::BadProbability { index: 0, value: max });
    }
    let weights: Vec<f64> = propensities.iter().map(|&q| (q - max).exp()).collect();
    Ok(MixedStrategy::renormalized(weights))
}

/// Diminishing or constant step sizes for the daily updates. The harmonic
/// default `η^t = η0·offset/(offset+t)` with `η0 = 1/2`, `offset = 2` gives
/// the classical averaging sequence `1/(t+2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepSchedule {
    Harmonic { eta0: f64, offset: f64 },
    Constant { eta: f64 },
}

impl Default for StepSchedule {
    fn default() -> Self {
        StepSchedule::Harmonic { eta0: 0.5, offset: 2.0 }
    }
}

impl StepSchedule {
    pub fn validate(&self) -> Result<(), StrategyError> {
        match *self {
            StepSchedule::Harmonic { eta0, offset } => {
                if !(eta0 > 0.0 && eta0 <= 1.0 && eta0.is_finite()) {
                    return Err(StrategyError::BadSchedule(format!(
                        "eta0 must lie in (0, 1], got {eta0}"
                    )));
                }
                if !(offset > 0.0 && offset.is_finite()) {
                    return Err(StrategyError::BadSchedule(format!(
                        "offset must be positive, got {offset}"
                    )));
                }
            }
            StepSchedule::Constant { eta } => {
                if !(eta > 0.0 && eta < 1.0) {
                    return Err(StrategyError::BadSchedule(format!(
                        "constant eta must lie in (0, 1), got {eta}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Step size for day `t` (0-based).
    pub fn eta(&self, t: usize) -> f64 {
        match *self {
            StepSchedule::Harmonic { eta0, offset } => eta0 * offset / (offset + t as f64),
            StepSchedule::Constant { eta } => eta,
        }
    }
}

/// Expected option flows for one class: demand times each probability.
pub fn flows_from_strategy(demand: f64, strategy: &MixedStrategy) -> Vec<f64> {
    strategy.probs.iter().map(|&p| demand * p).collect()
}

/// Rounds a strategy to six decimal places while preserving an exact unit
/// sum, by flooring at 1e-6 resolution and handing the leftover units to the
/// largest remainders (ties to the lowest option index).
pub fn quantized_probs(strategy: &MixedStrategy) -> Vec<f64> {
    const SCALE: f64 = 1e6;
    let n = strategy.len();
    let mut units = Vec::with_capacity(n);
    let mut remainders = Vec::with_capacity(n);
    for &p in &strategy.probs {
        let scaled = p * SCALE;
        let floor = scaled.floor();
        units.push(floor as i64);
        remainders.push(scaled - floor);
    }
    let assigned: i64 = units.iter().sum();
    let mut leftover = SCALE as i64 - assigned;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        remainders[b].total_cmp(&remainders[a]).then(a.cmp(&b))
    });
    for &index in &order {
        if leftover == 0 {
            break;
        }
        units[index] += 1;
        leftover -= 1;
    }
    debug_assert_eq!(units.iter().sum::<i64>(), SCALE as i64);
    units.into_iter().map(|u| u as f64 / SCALE).collect()
}
