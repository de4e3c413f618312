//! Group-relative advantages over a rollout group's rewards.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Epsilon used when serving rewards.
pub const SERVING_EPSILON: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GrpoError {
    #[error("reward vector is empty")]
    Empty,
    #[error("epsilon must be finite and non-negative, got {0}")]
    Epsilon(f64),
    #[error("reward {index} is not finite: {value}")]
    NonFinite { index: usize, value: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAdvantage {
    pub group_id: String,
    pub rewards: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub advantages: Vec<f64>,
    pub epsilon: f64,
}

/// `(r - mean) / (std + epsilon)` with population statistics. A group whose
/// rewards are all equal gets `std = 0` and all-zero advantages.
pub fn compute_group_advantages(rewards: &[f64], epsilon: f64) -> Result<GroupAdvantage, GrpoError> {
    if rewards.is_empty() {
        return Err(GrpoError::Empty);
    }
    if !(epsilon.is_finite() && epsilon >= 0.0) {
        return Err(GrpoError::Epsilon(epsilon));
    }
    if let Some((index, &value)) = rewards.iter().enumerate().find(|(_, r)| !r.is_finite()) {
        return Err(GrpoError::NonFinite { index, value });
    }

    let n = rewards.len() as f64;
    // Equality is checked directly: summing equal values can leave a rounding
    // residue that would otherwise be amplified into ±1 advantages.
    let constant = rewards.iter().all(|&r| r == rewards[0]);
    let (mean, std) = if constant {
        (rewards[0], 0.0)
    } else {
        let mean = rewards.iter().sum::<f64>() / n;
        let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
        (mean, var.sqrt())
    };

    let advantages = if std == 0.0 {
        vec![0.0; rewards.len()]
    } else {
        rewards.iter().map(|r| (r - mean) / (std + epsilon)).collect()
    };

    Ok(GroupAdvantage {
        group_id: String::new(),
        rewards: rewards.to_vec(),
        mean,
        std,
        advantages,
        epsilon,
    })
}

impl GroupAdvantage {
    pub fn with_group_id(mut self, group_id: impl Into<String>) -> Self {
        self.group_id = group_id.into();
        self
    }
}
