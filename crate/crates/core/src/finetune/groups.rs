use serde::{Deserialize, Serialize};

use super::ScheduleError;
use crate::tensor::ParamId;

/// Each layer's learning rate is the one above it divided by this factor.
pub const DISCR_DECAY: f64 = 2.6;

/// Ordered partition of the model parameters, lowest layer first, with a
/// peak learning rate and a frozen flag per group.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGroups {
    groups: Vec<Vec<ParamId>>,
    lrs: Vec<f64>,
    frozen: Vec<bool>,
}

impl LayerGroups {
    /// All groups start unfrozen with learning rate `lr`. Groups must be
    /// non-empty and pairwise disjoint.
    pub fn new(groups: Vec<Vec<ParamId>>, lr: f64) -> Result<Self, ScheduleError> {
        if groups.is_empty() || groups.iter().any(Vec::is_empty) {
            return Err(ScheduleError::Invalid("layer groups must be non-empty".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for id in groups.iter().flatten() {
            if !seen.insert(*id) {
                return Err(ScheduleError::Invalid(format!(
                    "parameter {} belongs to more than one group",
                    id.0
                )));
            }
        }
        let n = groups.len();
        Ok(Self {
            groups,
            lrs: vec![lr; n],
            frozen: vec![false; n],
        })
    }

    /// Checks that the groups cover exactly `0..num_params`.
    pub fn covers(&self, num_params: usize) -> bool {
        let mut ids: Vec<usize> = self.groups.iter().flatten().map(|p| p.0).collect();
        ids.sort_unstable();
        ids == (0..num_params).collect::<Vec<_>>()
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn group(&self, g: usize) -> &[ParamId] {
        &self.groups[g]
    }

    pub fn groups(&self) -> &[Vec<ParamId>] {
        &self.groups
    }

    pub fn lr(&self, g: usize) -> f64 {
        self.lrs[g]
    }

    pub fn lrs(&self) -> &[f64] {
        &self.lrs
    }

    pub fn set_lrs(&mut self, lrs: Vec<f64>) {
        assert_eq!(lrs.len(), self.groups.len());
        self.lrs = lrs;
    }

    pub fn set_uniform_lr(&mut self, lr: f64) {
        self.lrs.iter_mut().for_each(|x| *x = lr);
    }

    pub fn is_group_frozen(&self, g: usize) -> bool {
        self.frozen[g]
    }

    pub fn set_frozen(&mut self, g: usize, frozen: bool) {
        self.frozen[g] = frozen;
    }

    pub fn group_of(&self, id: ParamId) -> Option<usize> {
        self.groups.iter().position(|g| g.contains(&id))
    }

    /// Parameters outside every group count as frozen.
    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.group_of(id).is_none_or(|g| self.frozen[g])
    }

    /// Indices of unfrozen groups, ascending.
    pub fn unfrozen(&self) -> Vec<usize> {
        (0..self.groups.len()).filter(|&g| !self.frozen[g]).collect()
    }

    /// Per-parameter trainable flags indexed by `ParamId.0`.
    pub fn trainable_mask(&self, num_params: usize) -> Vec<bool> {
        let mut mask = vec![false; num_params];
        for (g, ids) in self.groups.iter().enumerate() {
            if !self.frozen[g] {
                for id in ids {
                    mask[id.0] = true;
                }
            }
        }
        mask
    }
}

/// Gives the top group `eta_last` and group `l` (0-based) `eta_last / decay^(L-1-l)`.
pub fn assign_discriminative_lrs(
    mut groups: LayerGroups,
    eta_last: f64,
    decay: f64,
) -> Result<LayerGroups, ScheduleError> {
    if !(eta_last > 0.0 && decay > 0.0) {
        return Err(ScheduleError::Invalid(format!(
            "eta_last {eta_last} and decay {decay} must be positive"
        )));
    }
    let top = groups.len() - 1;
    let lrs = (0..groups.len())
        .map(|l| eta_last / decay.powi((top - l) as i32))
        .collect();
    groups.set_lrs(lrs);
    Ok(groups)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnfreezeMode {
    /// Every group trains from the start.
    Full,
    /// Only the top group ever trains.
    LastOnly,
    /// One more group per stage, from the top down.
    Gradual,
    /// A single group per stage: the top one, then each lower one in turn,
    /// then everything.
    ChainThaw,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnfreezePolicy {
    pub mode: UnfreezeMode,
    pub epochs_per_stage: usize,
}

impl UnfreezePolicy {
    pub fn new(mode: UnfreezeMode) -> Self {
        Self {
            mode,
            epochs_per_stage: 1,
        }
    }

    /// Epochs before every group has been unfrozen at least once.
    pub fn epochs_to_full(&self, n_groups: usize) -> usize {
        let stages = match self.mode {
            UnfreezeMode::Full => 1,
            UnfreezeMode::LastOnly => 1,
            UnfreezeMode::Gradual => n_groups,
            UnfreezeMode::ChainThaw => n_groups + 1,
        };
        stages * self.epochs_per_stage.max(1)
    }
}

impl Default for UnfreezePolicy {
    fn default() -> Self {
        Self::new(UnfreezeMode::Gradual)
    }
}

/// Sets frozen flags for 1-based `epoch` under `policy`.
pub fn unfreeze_step(policy: &UnfreezePolicy, mut groups: LayerGroups, epoch: usize) -> LayerGroups {
    let n = groups.len();
    let stage = (epoch.max(1) - 1) / policy.epochs_per_stage.max(1) + 1;
    let unfrozen = |g: usize| -> bool {
        match policy.mode {
            UnfreezeMode::Full => true,
            UnfreezeMode::LastOnly => g == n - 1,
            UnfreezeMode::Gradual => g + stage >= n,
            UnfreezeMode::ChainThaw => stage > n || g == n - stage,
        }
    };
    for g in 0..n {
        groups.set_frozen(g, !unfrozen(g));
    }
    groups
}
