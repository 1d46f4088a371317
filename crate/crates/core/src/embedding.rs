use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trajectory::TrajId;

/// Which embedding produced a point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EmbeddingTag {
    #[serde(rename = "mTSNE")]
    MTsne,
    #[serde(rename = "RAE")]
    Rae,
    #[serde(rename = "VRAE")]
    Vrae,
}

impl fmt::Display for EmbeddingTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EmbeddingTag::MTsne => "mTSNE",
            EmbeddingTag::Rae => "RAE",
            EmbeddingTag::Vrae => "VRAE",
        })
    }
}

impl std::str::FromStr for EmbeddingTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mtsne" | "tsne" => Ok(EmbeddingTag::MTsne),
            "rae" => Ok(EmbeddingTag::Rae),
            "vrae" => Ok(EmbeddingTag::Vrae),
            _ => Err(Error::invalid(format!("unknown embedding `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddedPoint {
    pub id: TrajId,
    pub tag: EmbeddingTag,
    pub coords: Vec<f64>,
}

/// One embedding run: exactly one point per trajectory, common dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub tag: EmbeddingTag,
    #[serde(with = "crate::trajectory::id_map")]
    points: BTreeMap<TrajId, Vec<f64>>,
}

impl Embedding {
    pub fn from_points(points: Vec<EmbeddedPoint>) -> Result<Self> {
        let first = points.first().ok_or_else(|| Error::invalid("empty embedding"))?;
        let tag = first.tag;
        let dim = first.coords.len();
        let mut map = BTreeMap::new();
        for p in points {
            if p.tag != tag {
                return Err(Error::invalid("mixed embedding tags"));
            }
            if p.coords.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: p.coords.len(),
                });
            }
            if p.coords.iter().any(|c| !c.is_finite()) {
                return Err(Error::NonFinite(format!("embedded point {}", p.id)));
            }
            if map.insert(p.id, p.coords).is_some() {
                return Err(Error::invalid(format!("trajectory {} embedded twice", p.id)));
            }
        }
        Ok(Embedding { tag, points: map })
    }

    pub fn dim(&self) -> usize {
        self.points.values().next().map_or(0, Vec::len)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn get(&self, id: TrajId) -> Result<&[f64]> {
        self.points.get(&id).map(Vec::as_slice).ok_or(Error::UnknownId(id))
    }

    pub fn contains(&self, id: TrajId) -> bool {
        self.points.contains_key(&id)
    }

    pub fn points(&self) -> Vec<EmbeddedPoint> {
        self.points
            .iter()
            .map(|(id, c)| EmbeddedPoint {
                id: *id,
                tag: self.tag,
                coords: c.clone(),
            })
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (TrajId, &[f64])> {
        self.points.iter().map(|(id, c)| (*id, c.as_slice()))
    }
}

/// Leave-one-out 1-nearest-neighbour accuracy under Euclidean distance.
pub fn one_nn_accuracy<L: PartialEq>(points: &[Vec<f64>], labels: &[L]) -> f64 {
    let n = points.len();
    let mut correct = 0;
    for i in 0..n {
        let nearest = (0..n)
            .filter(|&j| j != i)
            .min_by(|&a, &b| sq_dist(&points[i], &points[a]).total_cmp(&sq_dist(&points[i], &points[b])));
        if nearest.is_some_and(|j| labels[j] == labels[i]) {
            correct += 1;
        }
    }
    correct as f64 / n as f64
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
