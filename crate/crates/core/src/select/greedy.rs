use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kb::{InclusionMethod, InterferenceTag};
use crate::{BrowserId, StateId};

/// Score multiplier per conflicting tag pair with an already chosen vector.
pub const INTERFERENCE_PENALTY: f64 = 0.5;
/// Lower bound of the combined multiplier, so a useful vector never scores 0.
pub const INTERFERENCE_FLOOR: f64 = 0.1;

/// Which predicate of the class a response satisfies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    A,
    B,
}

impl Side {
    pub fn other(self) -> Side {
        match self {
            Side::A => Side::B,
            Side::B => Side::A,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CoveragePair {
    pub state: StateId,
    pub browser: BrowserId,
}

impl CoveragePair {
    pub fn new(state: impl Into<String>, browser: BrowserId) -> Self {
        Self {
            state: StateId::new(state),
            browser,
        }
    }
}

/// An (SD-URL, attack class) usable to tell `target` apart from the
/// distinguished states.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackVector {
    pub sd_url: String,
    pub class_name: String,
    pub target: StateId,
    /// The predicate side the target's response satisfies.
    pub target_side: Side,
    pub distinguished_states: BTreeSet<StateId>,
    pub browsers: BTreeSet<BrowserId>,
    /// Exactly which (state, browser) pairs the vector separates from the
    /// target; a subset of distinguished_states × browsers.
    pub coverage: BTreeSet<CoveragePair>,
    #[serde(default)]
    pub interference_tags: BTreeSet<InterferenceTag>,
    pub inclusion_method: InclusionMethod,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub params: BTreeMap<String, String>,
    /// Per browser, the side each state's response falls on. States whose
    /// response satisfies neither predicate are absent.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub state_sides: BTreeMap<BrowserId, BTreeMap<StateId, Side>>,
}

impl AttackVector {
    /// Convenience constructor with full coverage of states × browsers.
    pub fn simple(
        sd_url: &str,
        class_name: &str,
        target: &str,
        distinguished: &[&str],
        browsers: &[BrowserId],
        inclusion_method: InclusionMethod,
    ) -> Self {
        let distinguished_states: BTreeSet<StateId> =
            distinguished.iter().map(|s| StateId::new(*s)).collect();
        let browsers: BTreeSet<BrowserId> = browsers.iter().copied().collect();
        let coverage = distinguished_states
            .iter()
            .flat_map(|s| {
                browsers.iter().map(move |&b| CoveragePair {
                    state: s.clone(),
                    browser: b,
                })
            })
            .collect();
        Self {
            sd_url: sd_url.into(),
            class_name: class_name.into(),
            target: StateId::new(target),
            target_side: Side::A,
            distinguished_states,
            browsers,
            coverage,
            interference_tags: BTreeSet::new(),
            inclusion_method,
            params: BTreeMap::new(),
            state_sides: BTreeMap::new(),
        }
    }

    /// Non-target states with an undetermined side under some browser.
    pub fn undetermined_states(&self, states: &[StateId]) -> usize {
        states
            .iter()
            .filter(|s| **s != self.target)
            .filter(|s| {
                self.browsers.iter().any(|b| {
                    self.state_sides
                        .get(b)
                        .is_some_and(|sides| !sides.contains_key(*s))
                })
            })
            .count()
    }

    fn merge_key(&self) -> (String, String, StateId, Side) {
        (
            self.sd_url.clone(),
            self.class_name.clone(),
            self.target.clone(),
            self.target_side,
        )
    }
}

/// Coalesces vectors sharing SD-URL, class and orientation.
pub fn merge_states(vectors: &[AttackVector]) -> Vec<AttackVector> {
    let mut order: Vec<(String, String, StateId, Side)> = Vec::new();
    let mut merged: BTreeMap<(String, String, StateId, Side), AttackVector> = BTreeMap::new();
    for v in vectors {
        let key = v.merge_key();
        match merged.get_mut(&key) {
            Some(m) => {
                m.distinguished_states
                    .extend(v.distinguished_states.iter().cloned());
                m.browsers.extend(v.browsers.iter().copied());
                m.coverage.extend(v.coverage.iter().cloned());
                for (b, sides) in &v.state_sides {
                    let into = m.state_sides.entry(*b).or_default();
                    for (s, side) in sides {
                        into.entry(s.clone()).or_insert(*side);
                    }
                }
                for (k, p) in &v.params {
                    m.params.entry(k.clone()).or_insert_with(|| p.clone());
                }
            }
            None => {
                order.push(key.clone());
                merged.insert(key, v.clone());
            }
        }
    }
    order
        .into_iter()
        .map(|k| merged.remove(&k).expect("key recorded"))
        .collect()
}

fn conflicts(v: &AttackVector, chosen: &[AttackVector]) -> usize {
    chosen
        .iter()
        .map(|c| {
            v.interference_tags
                .iter()
                .flat_map(|t| c.interference_tags.iter().map(move |u| (*t, *u)))
                .filter(|(t, u)| t.conflicts_with(*u))
                .count()
        })
        .sum()
}

/// Remaining pairs the vector covers, damped by interference with the
/// vectors already chosen.
pub fn score(
    vector: &AttackVector,
    remaining: &BTreeSet<CoveragePair>,
    chosen: &[AttackVector],
) -> f64 {
    let base = vector.coverage.intersection(remaining).count();
    if base == 0 {
        return 0.0;
    }
    let k = conflicts(vector, chosen);
    let factor = INTERFERENCE_PENALTY
        .powi(k.min(64) as i32)
        .max(INTERFERENCE_FLOOR);
    base as f64 * factor
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedVector {
    #[serde(flatten)]
    pub vector: AttackVector,
    pub score: f64,
    /// Pairs removed from the residual by this vector.
    pub covered: BTreeSet<CoveragePair>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub target: StateId,
    pub browsers: BTreeSet<BrowserId>,
    pub states: Vec<StateId>,
    pub chosen: Vec<SelectedVector>,
    pub uncovered: BTreeSet<CoveragePair>,
}

impl SelectionResult {
    pub fn is_full_cover(&self) -> bool {
        self.uncovered.is_empty()
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SelectError {
    #[error("target state `{0}` is not one of the scanned states")]
    UnknownTarget(StateId),
    #[error("no target browsers given")]
    NoBrowsers,
}

/// Greedy cover of (S - target) × B.
///
/// Ties on score go to the vector covering more browsers, then to the one
/// leaving fewer states undetermined, then to fewer interference tags, then
/// to the smaller (class name, SD-URL).
pub fn select_vectors(
    target: &StateId,
    browsers: &BTreeSet<BrowserId>,
    states: &[StateId],
    vectors: &[AttackVector],
) -> Result<SelectionResult, SelectError> {
    if !states.contains(target) {
        return Err(SelectError::UnknownTarget(target.clone()));
    }
    if browsers.is_empty() {
        return Err(SelectError::NoBrowsers);
    }
    let filtered: Vec<AttackVector> = vectors
        .iter()
        .filter(|v| &v.target == target && !v.distinguished_states.contains(target))
        .cloned()
        .collect();
    let mut pool = merge_states(&filtered);
    let mut remaining: BTreeSet<CoveragePair> = states
        .iter()
        .filter(|s| *s != target)
        .flat_map(|s| {
            browsers.iter().map(move |&b| CoveragePair {
                state: s.clone(),
                browser: b,
            })
        })
        .collect();

    let mut chosen: Vec<SelectedVector> = Vec::new();
    let mut chosen_plain: Vec<AttackVector> = Vec::new();
    while !remaining.is_empty() && !pool.is_empty() {
        let scored: Vec<(f64, usize)> = pool
            .iter()
            .enumerate()
            .map(|(i, v)| (score(v, &remaining, &chosen_plain), i))
            .collect();
        let (best_score, best) = scored
            .iter()
            .copied()
            .min_by(|(sa, ia), (sb, ib)| rank(*sa, &pool[*ia], *sb, &pool[*ib], browsers, states))
            .expect("pool is non-empty");
        if best_score <= 0.0 {
            break;
        }
        let v = pool.remove(best);
        let covered: BTreeSet<CoveragePair> =
            v.coverage.intersection(&remaining).cloned().collect();
        remaining.retain(|p| !covered.contains(p));
        chosen_plain.push(v.clone());
        chosen.push(SelectedVector {
            vector: v,
            score: best_score,
            covered,
        });
    }

    Ok(SelectionResult {
        target: target.clone(),
        browsers: browsers.clone(),
        states: states.to_vec(),
        chosen,
        uncovered: remaining,
    })
}

/// Orders candidates best-first.
fn rank(
    sa: f64,
    a: &AttackVector,
    sb: f64,
    b: &AttackVector,
    browsers: &BTreeSet<BrowserId>,
    states: &[StateId],
) -> Ordering {
    let width = |v: &AttackVector| v.browsers.intersection(browsers).count();
    sb.total_cmp(&sa)
        .then_with(|| width(b).cmp(&width(a)))
        .then_with(|| {
            a.undetermined_states(states)
                .cmp(&b.undetermined_states(states))
        })
        .then_with(|| a.interference_tags.len().cmp(&b.interference_tags.len()))
        .then_with(|| (&a.class_name, &a.sd_url).cmp(&(&b.class_name, &b.sd_url)))
}
