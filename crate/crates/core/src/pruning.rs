//! Magnitude pruning and the stage-transition engine.
//!
//! Cumulative percentile pruning sorts a group's magnitudes ascending and
//! prunes the longest prefix whose running sum stays within `τ` of the group
//! total. The fixed-ratio variant prunes a constant fraction by count.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, CsmfError, Result};
use crate::stagenet::{ParamState, ParameterStore, Stage, Structure};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneMethod {
    #[default]
    Cpp,
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneDecision {
    /// `true` where the parameter is pruned.
    pub prune: Vec<bool>,
    pub tau: f64,
    pub total_mass: f64,
    /// Largest cumulative mass that may be pruned (`τ · total`).
    pub threshold: f64,
    pub pruned_count: usize,
}

impl PruneDecision {
    pub fn retained_count(&self) -> usize {
        self.prune.len() - self.pruned_count
    }
}

/// Indices sorted by ascending magnitude, ties by index.
fn ascending_order(magnitudes: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..magnitudes.len()).collect();
    order.sort_by(|&a, &b| match magnitudes[a].total_cmp(&magnitudes[b]) {
        Ordering::Equal => a.cmp(&b),
        o => o,
    });
    order
}

fn check_magnitudes(magnitudes: &[f64]) -> Result<()> {
    if magnitudes.iter().any(|m| !m.is_finite() || *m < 0.0) {
        return Err(CsmfError::Numeric("magnitudes must be finite and non-negative".into()));
    }
    Ok(())
}

/// Cumulative percentile selection.
///
/// Running sums are compared against `τ · total` with a slack equal to the
/// rounding bound of an `n`-term sum, so equal magnitudes prune exactly
/// `⌊τ n⌋` entries. The largest magnitude is always retained; an all-zero
/// group keeps only index 0.
pub fn cpp_select(magnitudes: &[f64], tau: f64) -> Result<PruneDecision> {
    if !(tau > 0.0 && tau < 1.0) {
        return config_err(format!("pruning ratio must lie in (0, 1), got {tau}"));
    }
    check_magnitudes(magnitudes)?;
    let n = magnitudes.len();
    let total: f64 = magnitudes.iter().sum();
    let threshold = tau * total;
    let mut prune = vec![false; n];
    if n == 0 {
        return Ok(PruneDecision { prune, tau, total_mass: total, threshold, pruned_count: 0 });
    }
    if total == 0.0 {
        prune.iter_mut().skip(1).for_each(|p| *p = true);
        return Ok(PruneDecision { prune, tau, total_mass: 0.0, threshold, pruned_count: n - 1 });
    }
    let slack = n as f64 * f64::EPSILON * total;
    let order = ascending_order(magnitudes);
    let mut cum = 0.0;
    let mut pruned = 0;
    // the last (largest) entry is never pruned
    for &i in &order[..n - 1] {
        cum += magnitudes[i];
        if cum > threshold + slack {
            break;
        }
        prune[i] = true;
        pruned += 1;
    }
    Ok(PruneDecision { prune, tau, total_mass: total, threshold, pruned_count: pruned })
}

/// Prunes the `⌊ratio · n⌋` smallest magnitudes.
pub fn fixed_ratio_select(magnitudes: &[f64], ratio: f64) -> Result<PruneDecision> {
    if !(0.0..1.0).contains(&ratio) {
        return config_err(format!("fixed pruning ratio must lie in [0, 1), got {ratio}"));
    }
    check_magnitudes(magnitudes)?;
    let n = magnitudes.len();
    let k = (ratio * n as f64).floor() as usize;
    let total: f64 = magnitudes.iter().sum();
    let mut prune = vec![false; n];
    for &i in ascending_order(magnitudes).iter().take(k) {
        prune[i] = true;
    }
    Ok(PruneDecision { prune, tau: ratio, total_mass: total, threshold: ratio * total, pruned_count: k })
}

pub fn select(method: PruneMethod, magnitudes: &[f64], tau: f64) -> Result<PruneDecision> {
    match method {
        PruneMethod::Cpp => cpp_select(magnitudes, tau),
        PruneMethod::Fixed => fixed_ratio_select(magnitudes, tau),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub group: String,
    pub size: usize,
    pub retained: usize,
    pub zero_locked: usize,
    pub handed_off: usize,
    pub total_mass: f64,
    pub threshold: f64,
    pub retained_mass_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionReport {
    pub stage: Stage,
    pub method: PruneMethod,
    pub tau: f64,
    pub groups: Vec<GroupReport>,
}

impl TransitionReport {
    pub fn retained(&self) -> usize {
        self.groups.iter().map(|g| g.retained).sum()
    }

    pub fn zero_locked(&self) -> usize {
        self.groups.iter().map(|g| g.zero_locked).sum()
    }

    pub fn handed_off(&self) -> usize {
        self.groups.iter().map(|g| g.handed_off).sum()
    }

    pub fn size(&self) -> usize {
        self.groups.iter().map(|g| g.size).sum()
    }
}

/// Prunes every group's `Trainable(stage)` parameters and applies the state
/// transitions: retained → `Frozen(stage)`; pruned parameters writing into
/// `stage`'s own block → `ZeroLocked`; pruned parameters writing into later
/// blocks are zeroed and handed to the next stage. With structure off every
/// pruned parameter is handed on.
pub fn commit_stage<S: ParameterStore + ?Sized>(
    store: &mut S,
    stage: Stage,
    method: PruneMethod,
    tau: f64,
) -> Result<TransitionReport> {
    let Some(next) = stage.next() else {
        return Err(CsmfError::Lifecycle("the conversion stage is frozen, not pruned".into()));
    };
    if store.census().trainable[stage.index()] == 0 {
        return Err(CsmfError::Lifecycle(format!("stage {stage} has no trainable parameters to commit")));
    }
    // validate before mutating anything
    select(method, &[1.0], tau)?;
    let structure = store.structure();
    let mut groups = Vec::new();
    for mut g in store.groups_mut() {
        let mut slots = Vec::new();
        let mut mags = Vec::new();
        for (ti, t) in g.tensors.iter().enumerate() {
            for i in 0..t.len() {
                if t.state(i) == ParamState::Trainable(stage) {
                    slots.push((ti, i));
                    mags.push(t.value(i).abs());
                }
            }
        }
        if slots.is_empty() {
            continue;
        }
        let decision = select(method, &mags, tau)?;
        let (mut retained, mut locked, mut handed) = (0, 0, 0);
        let mut retained_mass = 0.0;
        for (k, &(ti, i)) in slots.iter().enumerate() {
            let t = &mut g.tensors[ti];
            if !decision.prune[k] {
                t.set_state(i, ParamState::Frozen(stage));
                retained += 1;
                retained_mass += mags[k];
            } else if structure == Structure::On && t.target(i) <= stage {
                t.set_state(i, ParamState::ZeroLocked);
                locked += 1;
            } else {
                t.set_value(i, 0.0);
                t.set_state(i, ParamState::Trainable(next));
                handed += 1;
            }
        }
        groups.push(GroupReport {
            group: g.name.clone(),
            size: slots.len(),
            retained,
            zero_locked: locked,
            handed_off: handed,
            total_mass: decision.total_mass,
            threshold: decision.threshold,
            retained_mass_fraction: if decision.total_mass > 0.0 {
                retained_mass / decision.total_mass
            } else {
                1.0
            },
        });
    }
    Ok(TransitionReport { stage, method, tau, groups })
}

/// Freezes every `Trainable(stage)` parameter without pruning. Returns the
/// number frozen.
pub fn freeze_stage<S: ParameterStore + ?Sized>(store: &mut S, stage: Stage) -> Result<usize> {
    let mut n = 0;
    for t in store.tensors_mut() {
        for i in 0..t.len() {
            if t.state(i) == ParamState::Trainable(stage) {
                t.set_state(i, ParamState::Frozen(stage));
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(CsmfError::Lifecycle(format!("stage {stage} has nothing left to freeze")));
    }
    Ok(n)
}
