//! Probabilistic multiclass classifiers over embedded points.

pub mod nn;
pub mod svm;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trajectory::ClassLabel;

pub use nn::{nn_train, NnConfig, NnModel};
pub use svm::{svm_train, SvmModel, SvmParams};

const PROB_TOL: f64 = 1e-8;

/// Class-probability vector for one point. `classes[j]` has probability `probs[j]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictiveDistribution {
    pub classes: Vec<ClassLabel>,
    pub probs: Vec<f64>,
}

impl PredictiveDistribution {
    pub fn new(classes: Vec<ClassLabel>, probs: Vec<f64>) -> Result<Self> {
        let d = PredictiveDistribution { classes, probs };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.len() != self.probs.len() {
            return Err(Error::InvalidDistribution("class and probability counts differ".into()));
        }
        if self.probs.len() < 2 {
            return Err(Error::InvalidDistribution("fewer than two classes".into()));
        }
        if self.probs.iter().any(|p| !p.is_finite() || *p < 0.0 || *p > 1.0 + PROB_TOL) {
            return Err(Error::InvalidDistribution(format!("entries outside [0, 1]: {:?}", self.probs)));
        }
        let s: f64 = self.probs.iter().sum();
        if (s - 1.0).abs() > PROB_TOL {
            return Err(Error::InvalidDistribution(format!("sums to {s}")));
        }
        Ok(())
    }

    /// Most probable class, first on ties.
    pub fn argmax(&self) -> ClassLabel {
        let best = self
            .probs
            .iter()
            .enumerate()
            .fold(0, |b, (i, p)| if *p > self.probs[b] { i } else { b });
        self.classes[best]
    }

    pub fn prob_of(&self, class: ClassLabel) -> f64 {
        self.classes.iter().position(|c| *c == class).map_or(0.0, |i| self.probs[i])
    }
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ClassifierTag {
    #[serde(rename = "SVM")]
    Svm,
    #[serde(rename = "NN")]
    Nn,
}

impl fmt::Display for ClassifierTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClassifierTag::Svm => "SVM",
            ClassifierTag::Nn => "NN",
        })
    }
}

impl std::str::FromStr for ClassifierTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "svm" => Ok(ClassifierTag::Svm),
            "nn" => Ok(ClassifierTag::Nn),
            _ => Err(Error::invalid(format!("unknown classifier `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClassifierConfig {
    Svm(SvmParams),
    Nn(NnConfig),
}

impl ClassifierConfig {
    pub fn default_for(tag: ClassifierTag) -> Self {
        match tag {
            ClassifierTag::Svm => ClassifierConfig::Svm(SvmParams::default()),
            ClassifierTag::Nn => ClassifierConfig::Nn(NnConfig::default()),
        }
    }

    pub fn tag(&self) -> ClassifierTag {
        match self {
            ClassifierConfig::Svm(_) => ClassifierTag::Svm,
            ClassifierConfig::Nn(_) => ClassifierTag::Nn,
        }
    }

    /// Trains a fresh model. `seed` only matters for the network.
    pub fn train(&self, points: &[Vec<f64>], labels: &[ClassLabel], seed: u64) -> Result<Model> {
        match self {
            ClassifierConfig::Svm(p) => svm_train(points, labels, p).map(Model::Svm),
            ClassifierConfig::Nn(c) => nn_train(points, labels, c, seed).map(Model::Nn),
        }
    }
}

#[derive(Debug, Clone)]
pub enum Model {
    Svm(SvmModel),
    Nn(NnModel),
}

impl Model {
    pub fn classes(&self) -> &[ClassLabel] {
        match self {
            Model::Svm(m) => &m.classes,
            Model::Nn(m) => &m.classes,
        }
    }

    pub fn predict_proba(&self, point: &[f64]) -> Result<PredictiveDistribution> {
        match self {
            Model::Svm(m) => m.predict_proba(point),
            Model::Nn(m) => m.predict_proba(point),
        }
    }

    pub fn predict(&self, point: &[f64]) -> Result<ClassLabel> {
        match self {
            Model::Svm(m) => m.predict(point),
            Model::Nn(m) => Ok(m.predict_proba(point)?.argmax()),
        }
    }
}
