use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{report_key, PageError};
use crate::kb::Kb;
use crate::select::{AttackVector, SelectionResult, Side};
use crate::{BrowserId, StateId};

/// Probes beyond this many per browser group would make the table unwieldy.
pub const MAX_PROBES_PER_GROUP: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeRef {
    pub report_key: String,
    pub class_name: String,
    pub sd_url: String,
    pub observable_a: String,
    pub observable_b: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "kebab-case")]
pub enum Verdict {
    InTargetState,
    /// Consistent with these non-target states only.
    InState {
        states: Vec<StateId>,
    },
    Indeterminate,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionRow {
    /// One observable per probe, in probe order.
    pub observed: Vec<String>,
    pub verdict: Verdict,
}

/// Browsers that run the same probes share one table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionGroup {
    pub browsers: BTreeSet<BrowserId>,
    pub probes: Vec<ProbeRef>,
    pub rows: Vec<DecisionRow>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionTable {
    pub target: StateId,
    pub groups: Vec<DecisionGroup>,
}

impl DecisionTable {
    pub fn group_for(&self, browser: BrowserId) -> Option<&DecisionGroup> {
        self.groups.iter().find(|g| g.browsers.contains(&browser))
    }
}

impl DecisionGroup {
    pub fn verdict(&self, observed: &[&str]) -> Option<&Verdict> {
        self.rows
            .iter()
            .find(|r| {
                r.observed
                    .iter()
                    .map(String::as_str)
                    .eq(observed.iter().copied())
            })
            .map(|r| &r.verdict)
    }
}

/// The side `state` falls on for `v` under `browser`, if known.
fn side_of(v: &AttackVector, browser: BrowserId, state: &StateId) -> Option<Side> {
    match v.state_sides.get(&browser) {
        Some(sides) => sides.get(state).copied(),
        None if *state == v.target => Some(v.target_side),
        None if v.distinguished_states.contains(state) => Some(v.target_side.other()),
        None => None,
    }
}

/// Maps every combination of probe outcomes to a verdict, per group of
/// browsers that run the same probes. A state whose side is unknown for a
/// probe is consistent with either outcome.
pub fn decision_rule(selection: &SelectionResult, kb: &Kb) -> Result<DecisionTable, PageError> {
    let mut by_active: BTreeMap<Vec<usize>, BTreeSet<BrowserId>> = BTreeMap::new();
    for &b in &selection.browsers {
        let active: Vec<usize> = selection
            .chosen
            .iter()
            .enumerate()
            .filter(|(_, s)| s.vector.browsers.contains(&b))
            .map(|(i, _)| i)
            .collect();
        by_active.entry(active).or_default().insert(b);
    }
    let mut groups: Vec<DecisionGroup> = Vec::new();
    for (active, browsers) in by_active {
        if active.len() > MAX_PROBES_PER_GROUP {
            return Err(PageError::TooManyProbes(active.len()));
        }
        let vectors: Vec<&AttackVector> = active
            .iter()
            .map(|&i| &selection.chosen[i].vector)
            .collect();
        let mut probes = Vec::new();
        for v in &vectors {
            let class = kb
                .get(&v.class_name)
                .ok_or_else(|| PageError::UnknownClass(v.class_name.clone()))?;
            probes.push(ProbeRef {
                report_key: report_key(v),
                class_name: v.class_name.clone(),
                sd_url: v.sd_url.clone(),
                observable_a: class.observable_a.clone(),
                observable_b: class.observable_b.clone(),
            });
        }

        let mut rows = Vec::new();
        for combo in 0u32..(1u32 << vectors.len()) {
            let outcome: Vec<Side> = (0..vectors.len())
                .map(|i| {
                    if combo >> i & 1 == 1 {
                        Side::B
                    } else {
                        Side::A
                    }
                })
                .collect();
            let consistent: Vec<&StateId> = selection
                .states
                .iter()
                .filter(|s| {
                    browsers.iter().all(|&b| {
                        vectors
                            .iter()
                            .zip(&outcome)
                            .all(|(v, o)| side_of(v, b, s).is_none_or(|side| side == *o))
                    })
                })
                .collect();
            let verdict = match consistent.as_slice() {
                [] => Verdict::Indeterminate,
                [only] if **only == selection.target => Verdict::InTargetState,
                many if many.contains(&&selection.target) => Verdict::Indeterminate,
                many => Verdict::InState {
                    states: many.iter().map(|s| (*s).clone()).collect(),
                },
            };
            let observed = probes
                .iter()
                .zip(&outcome)
                .map(|(p, o)| match o {
                    Side::A => p.observable_a.clone(),
                    Side::B => p.observable_b.clone(),
                })
                .collect();
            rows.push(DecisionRow { observed, verdict });
        }
        groups.push(DecisionGroup {
            browsers,
            probes,
            rows,
        });
    }
    groups.sort_by_key(|g| g.browsers.iter().next().copied());
    Ok(DecisionTable {
        target: selection.target.clone(),
        groups,
    })
}
