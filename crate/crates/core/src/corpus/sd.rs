use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::Corpus;
use crate::response::{normalize, NormalizationRules, NormalizedResponse};
use crate::{BrowserId, StateId};

/// An unordered state pair (stored in scan order) with the browsers under
/// which the two responses differ.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistinguishablePair {
    pub states: [StateId; 2],
    pub browsers: BTreeSet<BrowserId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdUrlReport {
    pub url: String,
    pub distinguishable_pairs: Vec<DistinguishablePair>,
    /// Equivalence classes of states, per browser, in scan order.
    pub partitions: BTreeMap<BrowserId, Vec<Vec<StateId>>>,
    /// Class representative for each state, taken from the first browser
    /// that has a response for it.
    pub representative_responses: BTreeMap<StateId, NormalizedResponse>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failed_cells: Vec<(StateId, BrowserId)>,
}

impl SdUrlReport {
    pub fn class_of(&self, browser: BrowserId, state: &StateId) -> Option<usize> {
        self.partitions
            .get(&browser)?
            .iter()
            .position(|class| class.contains(state))
    }

    pub fn distinguishes(&self, a: &StateId, b: &StateId) -> bool {
        self.distinguishable_pairs.iter().any(|p| {
            (&p.states[0] == a && &p.states[1] == b) || (&p.states[0] == b && &p.states[1] == a)
        })
    }
}

/// Partitions every URL's states into normalized-response equivalence
/// classes and reports the URLs with at least two classes under some
/// browser. Failed cells take no part in the pairing.
pub fn find_sd_urls(corpus: &Corpus, rules: &NormalizationRules) -> Vec<SdUrlReport> {
    let states = corpus.state_ids();
    let mut reports = Vec::new();

    for url in corpus.urls() {
        let mut partitions = BTreeMap::new();
        let mut representatives: BTreeMap<StateId, NormalizedResponse> = BTreeMap::new();
        let mut pairs: BTreeMap<(usize, usize), BTreeSet<BrowserId>> = BTreeMap::new();
        let mut failed = Vec::new();

        for &browser in &corpus.browsers {
            let mut classes: Vec<(NormalizedResponse, Vec<usize>)> = Vec::new();
            for (si, state) in states.iter().enumerate() {
                let Some(resp) = corpus.response(&url, state, browser) else {
                    if corpus.get(&url, state, browser).is_some() {
                        failed.push((state.clone(), browser));
                    }
                    continue;
                };
                let n = normalize(resp, rules);
                match classes
                    .iter_mut()
                    .find(|(rep, _)| rep.same_canonical_form(&n))
                {
                    Some((_, members)) => members.push(si),
                    None => classes.push((n, vec![si])),
                }
            }
            for (ci, (_, members)) in classes.iter().enumerate() {
                for (_, other) in classes.iter().skip(ci + 1) {
                    for &a in members {
                        for &b in other {
                            pairs
                                .entry((a.min(b), a.max(b)))
                                .or_default()
                                .insert(browser);
                        }
                    }
                }
            }
            for (rep, members) in &classes {
                for &si in members {
                    representatives
                        .entry(states[si].clone())
                        .or_insert_with(|| rep.clone());
                }
            }
            partitions.insert(
                browser,
                classes
                    .into_iter()
                    .map(|(_, m)| m.into_iter().map(|i| states[i].clone()).collect())
                    .collect::<Vec<Vec<StateId>>>(),
            );
        }

        if pairs.is_empty() {
            continue;
        }
        reports.push(SdUrlReport {
            url,
            distinguishable_pairs: pairs
                .into_iter()
                .map(|((a, b), browsers)| DistinguishablePair {
                    states: [states[a].clone(), states[b].clone()],
                    browsers,
                })
                .collect(),
            partitions,
            representative_responses: representatives,
            failed_cells: failed,
        });
    }
    reports
}
