//! From class matches to attack vectors, and the greedy choice of the
//! vectors an attack page needs.

mod greedy;

pub use greedy::{
    merge_states, score, select_vectors, AttackVector, CoveragePair, SelectError, SelectedVector,
    SelectionResult, Side, INTERFERENCE_FLOOR, INTERFERENCE_PENALTY,
};

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::debug;

use crate::corpus::{Corpus, SdUrlReport};
use crate::dynamic::ObservationIndex;
use crate::kb::{match_pair, AttackClass, ClassMatch, Kb, MatchKinds, Orientation};
use crate::response::{normalize, NormalizationRules, ResponseSignature};
use crate::{BrowserId, StateId};

/// One (SD-URL, class) that separates the two states of a pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairVector {
    pub sd_url: String,
    pub class_name: String,
    /// The state whose response satisfies pred_a.
    pub a_state: StateId,
    pub browsers: BTreeSet<BrowserId>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub params: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairVectors {
    pub states: [StateId; 2],
    pub vectors: Vec<PairVector>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdentifyStats {
    /// Response pairs run through the KB.
    pub pairs_matched: usize,
    /// State pairs that reused the matches of an identical response pair.
    pub pairs_reused: usize,
}

#[derive(Debug, Clone, Default)]
pub struct IdentifyOptions {
    /// Also match classes flagged deprecated in the KB.
    pub include_deprecated: bool,
}

/// The scan result consumed by page generation (`vectors.json`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorReport {
    pub states: Vec<StateId>,
    pub browsers: BTreeSet<BrowserId>,
    pub pairs: Vec<PairVectors>,
    /// Signatures of every SD-URL response, dynamic traits included.
    pub signatures: BTreeMap<String, BTreeMap<StateId, BTreeMap<BrowserId, ResponseSignature>>>,
    pub stats: IdentifyStats,
}

#[derive(Debug, Error)]
pub enum VectorReportError {
    #[error("cannot read vector report: {0}")]
    Io(#[from] std::io::Error),
    #[error("vector report is malformed: {0}")]
    Json(#[from] serde_json::Error),
}

impl VectorReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn load(path: &Path) -> Result<Self, VectorReportError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn all_vectors(&self) -> impl Iterator<Item = (&[StateId; 2], &PairVector)> {
        self.pairs
            .iter()
            .flat_map(|p| p.vectors.iter().map(move |v| (&p.states, v)))
    }

    fn signature(
        &self,
        url: &str,
        state: &StateId,
        browser: BrowserId,
    ) -> Option<&ResponseSignature> {
        self.signatures.get(url)?.get(state)?.get(&browser)
    }
}

type MatchMemo = HashMap<(String, String), Vec<ClassMatch>>;

fn sig_key(s: &ResponseSignature) -> String {
    serde_json::to_string(s).expect("signature serializes")
}

/// Matches every distinguishable pair of every SD-URL against the KB.
///
/// Matching runs once per distinct pair of signatures; a state pair whose
/// responses equal an already matched pair reuses its result, with the
/// orientation flipped when the pair appears the other way round.
pub fn identify_vectors(
    reports: &[SdUrlReport],
    corpus: &Corpus,
    kb: &Kb,
    rules: &NormalizationRules,
    observations: &ObservationIndex,
    options: &IdentifyOptions,
) -> VectorReport {
    let classes: Vec<&AttackClass> = kb
        .classes()
        .iter()
        .filter(|c| options.include_deprecated || !c.deprecated)
        .collect();
    let states = corpus.state_ids();
    let mut memo: MatchMemo = HashMap::new();
    let mut stats = IdentifyStats::default();
    let mut signatures: BTreeMap<
        String,
        BTreeMap<StateId, BTreeMap<BrowserId, ResponseSignature>>,
    > = BTreeMap::new();
    // (state index pair) -> (url, class index, a_state) -> (browsers, params)
    type Found =
        BTreeMap<(String, usize, StateId), (BTreeSet<BrowserId>, BTreeMap<String, String>)>;
    let mut found: BTreeMap<(usize, usize), Found> = BTreeMap::new();

    for report in reports {
        let url = &report.url;
        let url_sigs = signatures.entry(url.clone()).or_default();
        for state in &states {
            for &browser in &corpus.browsers {
                if let Some(resp) = corpus.response(url, state, browser) {
                    let base = normalize(resp, rules).signature;
                    let sig = observations.enrich(url, state, browser, base);
                    url_sigs
                        .entry(state.clone())
                        .or_default()
                        .insert(browser, sig);
                }
            }
        }

        for pair in &report.distinguishable_pairs {
            let [si, sj] = &pair.states;
            let idx = |s: &StateId| {
                states
                    .iter()
                    .position(|x| x == s)
                    .expect("pair state in corpus")
            };
            let key = (idx(si), idx(sj));
            for &browser in &pair.browsers {
                let (Some(x), Some(y)) = (
                    url_sigs.get(si).and_then(|m| m.get(&browser)),
                    url_sigs.get(sj).and_then(|m| m.get(&browser)),
                ) else {
                    continue;
                };
                let (kx, ky) = (sig_key(x), sig_key(y));
                let matches = if let Some(m) = memo.get(&(kx.clone(), ky.clone())) {
                    stats.pairs_reused += 1;
                    m.clone()
                } else if let Some(m) = memo.get(&(ky.clone(), kx.clone())) {
                    stats.pairs_reused += 1;
                    m.iter()
                        .map(|c| ClassMatch {
                            orientation: c.orientation.flip(),
                            ..c.clone()
                        })
                        .collect()
                } else {
                    stats.pairs_matched += 1;
                    let m = match_pair(x, y, classes.iter().copied(), MatchKinds::StaticAndDynamic);
                    memo.insert((kx, ky), m.clone());
                    m
                };
                for m in matches {
                    if !m.browsers.contains(&browser) {
                        continue;
                    }
                    let ci = classes
                        .iter()
                        .position(|c| c.name == m.class_name)
                        .expect("class in KB");
                    let (a_state, a, b) = match m.orientation {
                        Orientation::Forward => (si.clone(), x, y),
                        Orientation::Reversed => (sj.clone(), y, x),
                    };
                    let entry = found
                        .entry(key)
                        .or_default()
                        .entry((url.clone(), ci, a_state))
                        .or_insert_with(|| (BTreeSet::new(), classes[ci].vector_params(a, b)));
                    entry.0.insert(browser);
                }
            }
        }
    }
    debug!(
        matched = stats.pairs_matched,
        reused = stats.pairs_reused,
        "class matching done"
    );

    let pairs = found
        .into_iter()
        .map(|((i, j), vs)| {
            let mut vectors: Vec<(usize, PairVector)> = vs
                .into_iter()
                .map(|((url, ci, a_state), (browsers, params))| {
                    (
                        ci,
                        PairVector {
                            sd_url: url,
                            class_name: classes[ci].name.clone(),
                            a_state,
                            browsers,
                            params,
                        },
                    )
                })
                .collect();
            vectors.sort_by(|(ca, a), (cb, b)| (&a.sd_url, ca).cmp(&(&b.sd_url, cb)));
            PairVectors {
                states: [states[i].clone(), states[j].clone()],
                vectors: vectors.into_iter().map(|(_, v)| v).collect(),
            }
        })
        .collect();

    VectorReport {
        states,
        browsers: corpus.browsers.clone(),
        pairs,
        signatures,
        stats,
    }
}

/// Vectors involving `target`, oriented relative to it, one per pair
/// vector. The first inclusion method of the class is used.
pub fn filter_for_target(report: &VectorReport, kb: &Kb, target: &StateId) -> Vec<AttackVector> {
    let mut out = Vec::new();
    for (states, pv) in report.all_vectors() {
        let other = match states {
            [a, b] if a == target => b,
            [a, b] if b == target => a,
            _ => continue,
        };
        let Some(class) = kb.get(&pv.class_name) else {
            continue;
        };
        let target_side = if &pv.a_state == target {
            Side::A
        } else {
            Side::B
        };
        let oriented = |t: &ResponseSignature, d: &ResponseSignature| match target_side {
            Side::A => class.holds(t, d),
            Side::B => class.holds(d, t),
        };

        let mut state_sides = BTreeMap::new();
        for &browser in &pv.browsers {
            let (Some(t_sig), Some(d_sig)) = (
                report.signature(&pv.sd_url, target, browser),
                report.signature(&pv.sd_url, other, browser),
            ) else {
                continue;
            };
            let mut sides = BTreeMap::new();
            for s in &report.states {
                let Some(sig) = report.signature(&pv.sd_url, s, browser) else {
                    continue;
                };
                let side = if s == target || sig == t_sig || oriented(sig, d_sig) {
                    Some(target_side)
                } else if oriented(t_sig, sig) {
                    Some(target_side.other())
                } else {
                    None
                };
                if let Some(side) = side {
                    sides.insert(s.clone(), side);
                }
            }
            state_sides.insert(browser, sides);
        }

        out.push(AttackVector {
            sd_url: pv.sd_url.clone(),
            class_name: pv.class_name.clone(),
            target: target.clone(),
            target_side,
            distinguished_states: [other.clone()].into(),
            browsers: pv.browsers.clone(),
            coverage: pv
                .browsers
                .iter()
                .map(|&b| CoveragePair {
                    state: other.clone(),
                    browser: b,
                })
                .collect(),
            interference_tags: class.interference_tags.clone(),
            inclusion_method: class.inclusion_methods[0].clone(),
            params: pv.params.clone(),
            state_sides,
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{find_sd_urls, Cell, StateDefinition};
    use crate::response::HttpResponse;

    fn hotcrp() -> Corpus {
        let states = vec![
            StateDefinition::new("R1", "").with_auth("Cookie", "s=r1"),
            StateDefinition::new("R2", "").with_auth("Cookie", "s=r2"),
            StateDefinition::new("LO", ""),
        ];
        let mut c = Corpus::new("http://conf.test", states, BrowserId::ALL);
        let api = "http://conf.test/testconf/api.php/review?p=1";
        let off = "http://conf.test/testconf/offline.php?downloadForm=1";
        let html = |url: &str, sc: u16, nosniff: bool| {
            let r = HttpResponse::new(url, sc)
                .with_header("Content-Type", "text/html")
                .with_body("<html></html>");
            if nosniff {
                r.with_header("X-Content-Type-Options", "nosniff")
            } else {
                r
            }
        };
        for b in BrowserId::ALL {
            for (url, st, r) in [
                (api, "R1", html(api, 200, true)),
                (api, "R2", html(api, 403, false)),
                (api, "LO", html(api, 200, false)),
                (off, "R1", html(off, 200, true)),
                (off, "R2", html(off, 200, true)),
                (off, "LO", html(off, 200, false)),
            ] {
                c.insert(url, &StateId::new(st), b, Cell::Response(r))
                    .unwrap();
            }
        }
        c
    }

    fn report() -> VectorReport {
        let c = hotcrp();
        let rules = NormalizationRules::default();
        let sd = find_sd_urls(&c, &rules);
        identify_vectors(
            &sd,
            &c,
            &Kb::builtin(),
            &rules,
            &ObservationIndex::default(),
            &IdentifyOptions::default(),
        )
    }

    #[test]
    fn offline_reuses_matches() {
        let r = report();
        // Signatures do not depend on the browser here, so only the three
        // api.php pairs reach the KB; both offline.php pairs equal api.php's
        // (R1,LO) and everything else repeats under the other browsers.
        assert_eq!(r.stats.pairs_matched, 3);
        assert_eq!(r.stats.pairs_reused, 5 * 3 - 3);
        let off: Vec<_> = r
            .pairs
            .iter()
            .filter(|p| p.states[0].as_str() == "R2" && p.states[1].as_str() == "LO")
            .flat_map(|p| &p.vectors)
            .filter(|v| v.sd_url.contains("offline"))
            .map(|v| v.class_name.as_str())
            .collect();
        assert_eq!(off, ["EF-XctoScript", "EF-XctoObject"]);
    }

    #[test]
    fn state_sides_follow_predicates() {
        let r = report();
        let vs = filter_for_target(&r, &Kb::builtin(), &StateId::new("R1"));
        let off = vs
            .iter()
            .find(|v| v.sd_url.contains("offline") && v.class_name == "EF-XctoObject")
            .unwrap();
        assert_eq!(off.target_side, Side::B);
        let ff = &off.state_sides[&BrowserId::Firefox];
        assert_eq!(ff[&StateId::new("R2")], Side::B);
        assert_eq!(ff[&StateId::new("LO")], Side::A);
        let api = vs
            .iter()
            .find(|v| v.sd_url.contains("api") && v.class_name == "EF-XctoObject")
            .unwrap();
        assert!(!api.state_sides[&BrowserId::Firefox].contains_key(&StateId::new("R2")));
    }

    #[test]
    fn report_round_trips() {
        let r = report();
        let back: VectorReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }
}
