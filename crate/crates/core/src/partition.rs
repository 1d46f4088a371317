//! Annotated / unlabeled / test split of a trajectory pool.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trajectory::TrajId;

/// Three pairwise-disjoint id sets. Ids are kept sorted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawPartition")]
pub struct DatasetPartition {
    annotated: BTreeSet<TrajId>,
    unlabeled: BTreeSet<TrajId>,
    test: BTreeSet<TrajId>,
}

#[derive(Deserialize)]
struct RawPartition {
    annotated: Vec<TrajId>,
    unlabeled: Vec<TrajId>,
    test: Vec<TrajId>,
}

impl TryFrom<RawPartition> for DatasetPartition {
    type Error = Error;

    fn try_from(r: RawPartition) -> Result<Self> {
        DatasetPartition::new(r.annotated, r.unlabeled, r.test)
    }
}

impl DatasetPartition {
    pub fn new(
        annotated: impl IntoIterator<Item = TrajId>,
        unlabeled: impl IntoIterator<Item = TrajId>,
        test: impl IntoIterator<Item = TrajId>,
    ) -> Result<Self> {
        let mut seen = BTreeSet::new();
        let mut take = |ids: &mut dyn Iterator<Item = TrajId>| -> Result<BTreeSet<TrajId>> {
            let mut set = BTreeSet::new();
            for id in ids {
                if !seen.insert(id) {
                    return Err(Error::invalid(format!("trajectory {id} appears in more than one split")));
                }
                set.insert(id);
            }
            Ok(set)
        };
        let annotated = take(&mut annotated.into_iter())?;
        let unlabeled = take(&mut unlabeled.into_iter())?;
        let test = take(&mut test.into_iter())?;
        Ok(DatasetPartition {
            annotated,
            unlabeled,
            test,
        })
    }

    pub fn annotated(&self) -> &BTreeSet<TrajId> {
        &self.annotated
    }

    pub fn unlabeled(&self) -> &BTreeSet<TrajId> {
        &self.unlabeled
    }

    pub fn test(&self) -> &BTreeSet<TrajId> {
        &self.test
    }

    /// Annotated and unlabeled sizes combined; constant under [`annotate`](Self::annotate).
    pub fn pool_size(&self) -> usize {
        self.annotated.len() + self.unlabeled.len()
    }

    pub fn all_ids(&self) -> impl Iterator<Item = TrajId> + '_ {
        self.annotated.iter().chain(&self.unlabeled).chain(&self.test).copied()
    }

    /// Moves `id` from the unlabeled set to the annotated set.
    pub fn annotate(&mut self, id: TrajId) -> Result<()> {
        if !self.unlabeled.remove(&id) {
            return Err(Error::invalid(format!("trajectory {id} is not in the unlabeled set")));
        }
        self.annotated.insert(id);
        Ok(())
    }
}
