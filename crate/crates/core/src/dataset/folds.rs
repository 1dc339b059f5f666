use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_FOLDS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Validation,
    Test,
}

/// One cross-validation iteration, naming groups by index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub index: usize,
    pub test: usize,
    pub validation: [usize; 2],
    pub train: Vec<usize>,
}

impl Fold {
    pub fn role_of_group(&self, group: usize) -> Role {
        if group == self.test {
            Role::Test
        } else if self.validation.contains(&group) {
            Role::Validation
        } else {
            Role::Train
        }
    }
}

/// Ten equal subject groups (ascending ID order) and the ten folds built
/// from them. Fold `k` tests on group `k` and validates on groups `k+1` and
/// `k+2` (mod 10).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub groups: Vec<Vec<u32>>,
    pub folds: Vec<Fold>,
}

impl FoldPlan {
    pub fn group_of(&self, subject: u32) -> Option<usize> {
        self.groups.iter().position(|g| g.contains(&subject))
    }

    pub fn role(&self, fold: usize, subject: u32) -> Option<Role> {
        self.group_of(subject)
            .map(|g| self.folds[fold].role_of_group(g))
    }

    pub fn subjects(&self, fold: usize, role: Role) -> Vec<u32> {
        let f = &self.folds[fold];
        let mut out: Vec<u32> = (0..self.groups.len())
            .filter(|&g| f.role_of_group(g) == role)
            .flat_map(|g| self.groups[g].iter().copied())
            .collect();
        out.sort_unstable();
        out
    }
}

/// Splits subjects into ten groups by ascending ID and lays out the folds.
pub fn build_folds(subject_ids: &[u32]) -> Result<FoldPlan> {
    let ids: Vec<u32> = subject_ids.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    if ids.len() != subject_ids.len() {
        return Err(Error::Validation("subject ids must be distinct".into()));
    }
    if ids.is_empty() || ids.len() % NUM_FOLDS != 0 {
        return Err(Error::Validation(format!(
            "{} subjects cannot be split into {NUM_FOLDS} equal groups",
            ids.len()
        )));
    }
    let size = ids.len() / NUM_FOLDS;
    let groups: Vec<Vec<u32>> = ids.chunks(size).map(<[u32]>::to_vec).collect();
    let folds = (0..NUM_FOLDS)
        .map(|k| {
            let validation = [(k + 1) % NUM_FOLDS, (k + 2) % NUM_FOLDS];
            Fold {
                index: k,
                test: k,
                validation,
                train: (0..NUM_FOLDS)
                    .filter(|g| *g != k && !validation.contains(g))
                    .collect(),
            }
        })
        .collect();
    Ok(FoldPlan { groups, folds })
}
