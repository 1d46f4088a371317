//! Trajectories, class labels and the in-memory trajectory store.
//!
//! A trajectory is a variable-length sequence of frames. Each frame carries
//! the lateral road position (m), the longitudinal road position (m) and the
//! longitudinal velocity relative to the ego vehicle (m/s) of one surrounding
//! vehicle.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of channels per frame.
pub const CHANNELS: usize = 3;

/// One sample: `[lateral, longitudinal, relative_velocity]`.
pub type Frame = [f64; CHANNELS];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TrajId(pub u32);

impl fmt::Display for TrajId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ClassLabel {
    LeftDriveBy,
    RightDriveBy,
    CutIn,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 3] = [
        ClassLabel::LeftDriveBy,
        ClassLabel::RightDriveBy,
        ClassLabel::CutIn,
    ];

    pub fn index(self) -> usize {
        match self {
            ClassLabel::LeftDriveBy => 0,
            ClassLabel::RightDriveBy => 1,
            ClassLabel::CutIn => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ClassLabel::LeftDriveBy => "LeftDriveBy",
            ClassLabel::RightDriveBy => "RightDriveBy",
            ClassLabel::CutIn => "CutIn",
        }
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ClassLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "LeftDriveBy" | "left" => Ok(ClassLabel::LeftDriveBy),
            "RightDriveBy" | "right" => Ok(ClassLabel::RightDriveBy),
            "CutIn" | "cutin" | "cut-in" => Ok(ClassLabel::CutIn),
            other => Err(Error::invalid(format!("unknown class label `{other}`"))),
        }
    }
}

/// Shape variant of a cut-in. Generator metadata only; never handed to a
/// classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CutInVariant {
    Plain,
    Double,
    Decelerative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: TrajId,
    pub frames: Vec<Frame>,
    pub label: Option<ClassLabel>,
    pub variant: Option<CutInVariant>,
}

impl Trajectory {
    /// Builds a trajectory and checks its invariants.
    pub fn new(
        id: TrajId,
        frames: Vec<Frame>,
        label: Option<ClassLabel>,
        variant: Option<CutInVariant>,
    ) -> Result<Self> {
        let t = Trajectory {
            id,
            frames,
            label,
            variant,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: &str| Error::InvalidTrajectory {
            id: self.id,
            reason: reason.to_string(),
        };
        if self.frames.len() < 2 {
            return Err(bad("fewer than 2 frames"));
        }
        if self.frames.iter().flatten().any(|v| !v.is_finite()) {
            return Err(bad("non-finite channel value"));
        }
        if self.variant.is_some() && self.label != Some(ClassLabel::CutIn) {
            return Err(bad("cut-in variant on a non-cut-in trajectory"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Copy of this trajectory with the label and variant removed.
    pub fn unlabeled(&self) -> Trajectory {
        Trajectory {
            id: self.id,
            frames: self.frames.clone(),
            label: None,
            variant: None,
        }
    }

    /// Frames restricted to the selected channels, as a [`Series`].
    pub fn series(&self, channels: ChannelSelection) -> Series {
        let idx = channels.indices();
        let mut data = Vec::with_capacity(self.frames.len() * idx.len());
        for f in &self.frames {
            data.extend(idx.iter().map(|&c| f[c]));
        }
        Series {
            arity: idx.len(),
            data,
        }
    }
}

/// Which frame channels feed the embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelSelection {
    pub include_velocity: bool,
}

impl Default for ChannelSelection {
    fn default() -> Self {
        ChannelSelection {
            include_velocity: true,
        }
    }
}

impl ChannelSelection {
    pub fn indices(self) -> &'static [usize] {
        if self.include_velocity {
            &[0, 1, 2]
        } else {
            &[0, 1]
        }
    }

    pub fn arity(self) -> usize {
        self.indices().len()
    }
}

/// A multivariate time series stored row-major: `data[t * arity + c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub arity: usize,
    pub data: Vec<f64>,
}

impl Series {
    pub fn new(arity: usize, data: Vec<f64>) -> Result<Self> {
        if arity == 0 || data.len() % arity != 0 {
            return Err(Error::invalid(format!(
                "series of {} values is not a multiple of arity {arity}",
                data.len()
            )));
        }
        Ok(Series { arity, data })
    }

    /// Convenience for 1-channel series.
    pub fn scalar(values: &[f64]) -> Self {
        Series {
            arity: 1,
            data: values.to_vec(),
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let arity = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != arity) {
            return Err(Error::invalid("rows of unequal arity"));
        }
        Series::new(arity, rows.concat())
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.arity
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.arity..(t + 1) * self.arity]
    }
}

/// Read access to trajectories by id.
pub trait TrajectorySource: Sync {
    fn ids(&self) -> Vec<TrajId>;
    fn fetch(&self, id: TrajId) -> Option<&Trajectory>;
}

/// Immutable trajectory collection keyed by id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrajectoryStore {
    items: BTreeMap<TrajId, Trajectory>,
}

impl TrajectoryStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, t: Trajectory) -> Result<()> {
        t.validate()?;
        if self.items.contains_key(&t.id) {
            return Err(Error::invalid(format!("duplicate trajectory id {}", t.id)));
        }
        self.items.insert(t.id, t);
        Ok(())
    }

    pub fn get(&self, id: TrajId) -> Result<&Trajectory> {
        self.items.get(&id).ok_or(Error::UnknownId(id))
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Trajectory> {
        self.items.values()
    }

    pub fn label_of(&self, id: TrajId) -> Result<Option<ClassLabel>> {
        Ok(self.get(id)?.label)
    }

    /// View exposing only trajectories whose label is in `classes`.
    pub fn restricted_to<'a>(&'a self, classes: &[ClassLabel]) -> RestrictedView<'a> {
        let allowed = self
            .items
            .values()
            .filter(|t| t.label.is_some_and(|l| classes.contains(&l)))
            .map(|t| t.id)
            .collect();
        RestrictedView {
            store: self,
            allowed,
        }
    }
}

impl FromIterator<Trajectory> for TrajectoryStore {
    fn from_iter<I: IntoIterator<Item = Trajectory>>(iter: I) -> Self {
        TrajectoryStore {
            items: iter.into_iter().map(|t| (t.id, t)).collect(),
        }
    }
}

impl TrajectorySource for TrajectoryStore {
    fn ids(&self) -> Vec<TrajId> {
        self.items.keys().copied().collect()
    }

    fn fetch(&self, id: TrajId) -> Option<&Trajectory> {
        self.items.get(&id)
    }
}

/// Subset of a store; ids outside the subset are invisible.
pub struct RestrictedView<'a> {
    store: &'a TrajectoryStore,
    allowed: BTreeSet<TrajId>,
}

impl TrajectorySource for RestrictedView<'_> {
    fn ids(&self) -> Vec<TrajId> {
        self.allowed.iter().copied().collect()
    }

    fn fetch(&self, id: TrajId) -> Option<&Trajectory> {
        if self.allowed.contains(&id) {
            self.store.items.get(&id)
        } else {
            None
        }
    }
}

/// Wraps a source and records every id fetched through it.
pub struct AccessLogged<'a, S: TrajectorySource + ?Sized> {
    inner: &'a S,
    log: Mutex<BTreeSet<TrajId>>,
}

impl<'a, S: TrajectorySource + ?Sized> AccessLogged<'a, S> {
    pub fn new(inner: &'a S) -> Self {
        AccessLogged {
            inner,
            log: Mutex::new(BTreeSet::new()),
        }
    }

    pub fn accessed(&self) -> BTreeSet<TrajId> {
        self.log.lock().expect("access log poisoned").clone()
    }
}

impl<S: TrajectorySource + ?Sized> TrajectorySource for AccessLogged<'_, S> {
    fn ids(&self) -> Vec<TrajId> {
        self.inner.ids()
    }

    fn fetch(&self, id: TrajId) -> Option<&Trajectory> {
        let t = self.inner.fetch(id);
        if t.is_some() {
            self.log.lock().expect("access log poisoned").insert(id);
        }
        t
    }
}

/// Serializes an id-keyed map as a list of `[id, value]` pairs, which
/// survives buffering inside tagged enums.
pub mod id_map {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use super::TrajId;

    pub fn serialize<V: Serialize, S: Serializer>(map: &BTreeMap<TrajId, V>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(map.iter())
    }

    pub fn deserialize<'de, V: Deserialize<'de>, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<TrajId, V>, D::Error> {
        let pairs: Vec<(TrajId, V)> = Vec::deserialize(d)?;
        let n = pairs.len();
        let map: BTreeMap<TrajId, V> = pairs.into_iter().collect();
        if map.len() != n {
            return Err(serde::de::Error::custom("duplicate trajectory id"));
        }
        Ok(map)
    }
}
