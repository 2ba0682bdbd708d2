use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Denominator of the soft-Dice coherence term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiceDenominator {
    /// `sum A^2 + sum M^2 + eps`
    Sum,
    /// `sum A^2 * sum M^2 + eps`, the literal printed form.
    Product,
}

impl fmt::Display for DiceDenominator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Sum => "sum",
            Self::Product => "product",
        })
    }
}

impl FromStr for DiceDenominator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Self::Sum),
            "product" => Ok(Self::Product),
            other => Err(Error::Config(format!("dice_denominator must be sum|product, got {other:?}"))),
        }
    }
}

/// Every loss hyperparameter.
///
/// `lambda_u` and `lambda_m` are normally both the single `lambda` weight of
/// the objective; they are separate so that ablations can zero one term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda_u: f64,
    pub lambda_m: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub beta: f64,
    pub epsilon: f64,
    pub absent_penalty_weight: f64,
    pub dice_denominator: DiceDenominator,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_u: 0.4,
            lambda_m: 0.4,
            gamma: 0.25,
            alpha: 1.0,
            beta: 0.5,
            epsilon: 1e-6,
            absent_penalty_weight: 1.0,
            dice_denominator: DiceDenominator::Sum,
        }
    }
}

impl LossConfig {
    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda_u = lambda;
        self.lambda_m = lambda;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")))
            }
        };
        unit("lambda_u", self.lambda_u)?;
        unit("lambda_m", self.lambda_m)?;
        unit("gamma", self.gamma)?;
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::Config("margins alpha and beta must be >= 0".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("epsilon must be > 0".into()));
        }
        if !(self.absent_penalty_weight >= 0.0) {
            return Err(Error::Config("absent_penalty_weight must be >= 0".into()));
        }
        Ok(())
    }
}
