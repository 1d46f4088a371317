//! Informativeness scores. Larger means more informative.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::classifiers::PredictiveDistribution;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Random,
    Margin,
    Entropy,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Random, Strategy::Margin, Strategy::Entropy];
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Random => "random",
            Strategy::Margin => "margin",
            Strategy::Entropy => "entropy",
        })
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "random" => Ok(Strategy::Random),
            "margin" => Ok(Strategy::Margin),
            "entropy" => Ok(Strategy::Entropy),
            _ => Err(Error::invalid(format!("unknown strategy `{s}`"))),
        }
    }
}

/// One uniform draw per id, in the given order.
pub fn informativeness_random(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random::<f64>()).collect()
}

/// Negated gap between the two most probable classes; in [-1, 0].
pub fn informativeness_margin(dist: &PredictiveDistribution) -> Result<f64> {
    dist.validate()?;
    let (mut first, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &p in &dist.probs {
        if p > first {
            second = first;
            first = p;
        } else if p > second {
            second = p;
        }
    }
    Ok(-(first - second))
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn informativeness_entropy(dist: &PredictiveDistribution) -> f64 {
    -dist.probs.iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

/// Indices of the `k` largest scores; ties go to the earlier index.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}
