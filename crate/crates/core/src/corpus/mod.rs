//! Per-state, per-browser response corpora and state-dependent URL detection.

mod collect;
mod har;
mod sd;

pub use collect::{collect_live, CollectConfig, CollectError, CollectStats, StateFetchStats};
pub use har::{har_to_responses, import_har, HarError, HarImport};
pub use sd::{find_sd_urls, DistinguishablePair, SdUrlReport};

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use url::Url;

use crate::response::{Headers, HttpResponse, RedirectHop};
use crate::{BrowserId, StateId};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateDefinition {
    pub state_id: StateId,
    #[serde(default)]
    pub description: String,
    /// Request headers (Cookie, Authorization, ...) that put a fetch into this
    /// state. Absent for the logged-out baseline.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auth_material: Option<BTreeMap<String, String>>,
}

impl StateDefinition {
    pub fn new(id: &str, description: &str) -> Self {
        Self {
            state_id: StateId::new(id),
            description: description.to_string(),
            auth_material: None,
        }
    }

    pub fn with_auth(mut self, header: &str, value: &str) -> Self {
        self.auth_material
            .get_or_insert_with(BTreeMap::new)
            .insert(header.to_string(), value.to_string());
        self
    }

    pub fn is_baseline(&self) -> bool {
        self.auth_material.is_none()
    }
}

/// Checks unique ids and at most one baseline state.
pub fn validate_states(states: &[StateDefinition]) -> Result<(), String> {
    let mut seen = BTreeSet::new();
    for s in states {
        if s.state_id.as_str().is_empty() {
            return Err("empty state_id".into());
        }
        if !seen.insert(&s.state_id) {
            return Err(format!("duplicate state_id `{}`", s.state_id));
        }
    }
    let baselines = states.iter().filter(|s| s.is_baseline()).count();
    if baselines > 1 {
        return Err(format!(
            "{baselines} states lack auth_material; only the logged-out baseline may"
        ));
    }
    Ok(())
}

/// One (url, state, browser) cell: a response or an explicit fetch failure.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Cell {
    Response(HttpResponse),
    Failed(String),
}

impl Cell {
    pub fn response(&self) -> Option<&HttpResponse> {
        match self {
            Cell::Response(r) => Some(r),
            Cell::Failed(_) => None,
        }
    }
}

pub type CellKey = (String, StateId, BrowserId);

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read corpus: {0}")]
    Io(#[from] std::io::Error),
    #[error("corpus is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("entry {index}: {message}")]
    Schema { index: usize, message: String },
    #[error("entry {index}: duplicate cell ({url}, {state}, {browser})")]
    Conflict {
        index: usize,
        url: String,
        state: StateId,
        browser: BrowserId,
    },
    #[error("invalid corpus header: {0}")]
    Header(String),
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("unparseable URL `{url}`: {reason}")]
pub struct ScopeError {
    pub url: String,
    pub reason: String,
}

/// True iff `url` is hosted at the target domain, or some URL of its redirect
/// chain is. Subdomains of the target host count as hosted there.
pub fn in_scope(
    url: &str,
    target_origin: &str,
    redirect_chain: &[String],
) -> Result<bool, ScopeError> {
    let parse = |u: &str, base: Option<&Url>| {
        match base {
            Some(b) => b.join(u),
            None => Url::parse(u),
        }
        .map_err(|e| ScopeError {
            url: u.to_string(),
            reason: e.to_string(),
        })
    };
    let target = parse(target_origin, None)?;
    let target_host = target
        .host_str()
        .ok_or_else(|| ScopeError {
            url: target_origin.to_string(),
            reason: "no host".into(),
        })?
        .to_ascii_lowercase();
    let on_target = |u: &Url| {
        u.host_str().is_some_and(|h| {
            let h = h.to_ascii_lowercase();
            h == target_host || h.ends_with(&format!(".{target_host}"))
        })
    };

    let start = parse(url, None)?;
    if on_target(&start) {
        return Ok(true);
    }
    for hop in redirect_chain {
        if on_target(&parse(hop, Some(&start))?) {
            return Ok(true);
        }
    }
    Ok(false)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub target_origin: String,
    pub states: Vec<StateDefinition>,
    pub browsers: BTreeSet<BrowserId>,
    entries: BTreeMap<CellKey, Cell>,
}

impl Corpus {
    pub fn new(
        target_origin: impl Into<String>,
        states: Vec<StateDefinition>,
        browsers: impl IntoIterator<Item = BrowserId>,
    ) -> Self {
        Self {
            target_origin: target_origin.into(),
            states,
            browsers: browsers.into_iter().collect(),
            entries: BTreeMap::new(),
        }
    }

    /// Adds a cell. Rejects duplicates, unknown states or browsers, and URLs
    /// outside the target site.
    pub fn insert(
        &mut self,
        url: &str,
        state: &StateId,
        browser: BrowserId,
        cell: Cell,
    ) -> Result<(), String> {
        if !self.states.iter().any(|s| &s.state_id == state) {
            return Err(format!("unknown state `{state}`"));
        }
        if !self.browsers.contains(&browser) {
            return Err(format!("browser `{browser}` not part of the scan"));
        }
        let chain: Vec<String> = match &cell {
            Cell::Response(r) => {
                r.validate()?;
                r.redirect_chain
                    .iter()
                    .map(|h| h.location.clone())
                    .collect()
            }
            Cell::Failed(_) => Vec::new(),
        };
        if !in_scope(url, &self.target_origin, &chain).map_err(|e| e.to_string())? {
            return Err(format!("`{url}` is outside {}", self.target_origin));
        }
        let key = (url.to_string(), state.clone(), browser);
        if self.entries.contains_key(&key) {
            return Err("duplicate".into());
        }
        self.entries.insert(key, cell);
        Ok(())
    }

    pub fn get(&self, url: &str, state: &StateId, browser: BrowserId) -> Option<&Cell> {
        self.entries.get(&(url.to_string(), state.clone(), browser))
    }

    pub fn response(
        &self,
        url: &str,
        state: &StateId,
        browser: BrowserId,
    ) -> Option<&HttpResponse> {
        self.get(url, state, browser).and_then(Cell::response)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&CellKey, &Cell)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn urls(&self) -> Vec<String> {
        let set: BTreeSet<&String> = self.entries.keys().map(|(u, _, _)| u).collect();
        set.into_iter().cloned().collect()
    }

    pub fn state_ids(&self) -> Vec<StateId> {
        self.states.iter().map(|s| s.state_id.clone()).collect()
    }

    pub fn failed_cells(&self) -> usize {
        self.entries
            .values()
            .filter(|c| matches!(c, Cell::Failed(_)))
            .count()
    }

    pub fn to_json(&self) -> String {
        let doc = CorpusDocument {
            target_origin: self.target_origin.clone(),
            states: self
                .states
                .iter()
                .map(|s| StateRecord {
                    state_id: s.state_id.clone(),
                    description: s.description.clone(),
                })
                .collect(),
            browsers: self.browsers.iter().copied().collect(),
            entries: self
                .entries
                .iter()
                .map(|((url, state, browser), cell)| {
                    EntryRecord::from_cell(url, state, *browser, cell)
                })
                .map(|r| serde_json::to_value(r).expect("entry serializes"))
                .collect(),
        };
        let mut text = serde_json::to_string_pretty(&doc).expect("corpus serializes");
        text.push('\n');
        text
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_json())
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        ingest_corpus(&std::fs::read_to_string(path)?)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateRecord {
    state_id: StateId,
    #[serde(default)]
    description: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CorpusDocument {
    target_origin: String,
    states: Vec<StateRecord>,
    browsers: Vec<BrowserId>,
    #[serde(default)]
    entries: Vec<serde_json::Value>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EntryRecord {
    url: String,
    state_id: StateId,
    browser_id: BrowserId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    status: Option<u16>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    headers: Option<Vec<(String, String)>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    body_b64: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    final_url: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    redirect_chain: Option<Vec<RedirectHop>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fetch_error: Option<String>,
}

impl EntryRecord {
    fn from_cell(url: &str, state: &StateId, browser: BrowserId, cell: &Cell) -> Self {
        let mut rec = EntryRecord {
            url: url.to_string(),
            state_id: state.clone(),
            browser_id: browser,
            status: None,
            headers: None,
            body_b64: None,
            final_url: None,
            redirect_chain: None,
            fetch_error: None,
        };
        match cell {
            Cell::Response(r) => {
                rec.status = Some(r.status);
                rec.headers = Some(
                    r.headers
                        .iter()
                        .map(|(n, v)| (n.to_string(), v.to_string()))
                        .collect(),
                );
                rec.body_b64 = Some(STANDARD.encode(&r.body));
                rec.final_url = Some(r.final_url.clone());
                rec.redirect_chain = Some(r.redirect_chain.clone());
            }
            Cell::Failed(e) => rec.fetch_error = Some(e.clone()),
        }
        rec
    }

    fn into_cell(self) -> Result<(String, StateId, BrowserId, Cell), String> {
        let cell = match (self.fetch_error, self.status) {
            (Some(_), Some(_)) => return Err("both status and fetch_error present".into()),
            (Some(e), None) => Cell::Failed(e),
            (None, None) => return Err("missing status".into()),
            (None, Some(status)) => {
                let body = match self.body_b64 {
                    Some(b) => STANDARD.decode(b).map_err(|e| format!("body_b64: {e}"))?,
                    None => Vec::new(),
                };
                Cell::Response(HttpResponse {
                    final_url: self.final_url.unwrap_or_else(|| self.url.clone()),
                    url: self.url.clone(),
                    status,
                    headers: Headers::from(self.headers.unwrap_or_default()),
                    body,
                    redirect_chain: self.redirect_chain.unwrap_or_default(),
                })
            }
        };
        Ok((self.url, self.state_id, self.browser_id, cell))
    }
}

/// Loads a corpus document.
pub fn ingest_corpus(text: &str) -> Result<Corpus, CorpusError> {
    let doc: CorpusDocument = serde_json::from_str(text)?;
    let states: Vec<StateDefinition> = doc
        .states
        .into_iter()
        .map(|s| StateDefinition {
            state_id: s.state_id,
            description: s.description,
            auth_material: None,
        })
        .collect();
    let mut ids = BTreeSet::new();
    for s in &states {
        if !ids.insert(s.state_id.clone()) {
            return Err(CorpusError::Header(format!(
                "duplicate state `{}`",
                s.state_id
            )));
        }
    }
    Url::parse(&doc.target_origin)
        .map_err(|e| CorpusError::Header(format!("target_origin: {e}")))?;

    let mut corpus = Corpus::new(doc.target_origin, states, doc.browsers);
    for (index, value) in doc.entries.into_iter().enumerate() {
        let rec: EntryRecord = serde_json::from_value(value).map_err(|e| CorpusError::Schema {
            index,
            message: e.to_string(),
        })?;
        let (url, state, browser, cell) = rec
            .into_cell()
            .map_err(|message| CorpusError::Schema { index, message })?;
        if corpus.get(&url, &state, browser).is_some() {
            return Err(CorpusError::Conflict {
                index,
                url,
                state,
                browser,
            });
        }
        corpus
            .insert(&url, &state, browser, cell)
            .map_err(|message| CorpusError::Schema { index, message })?;
    }
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scope_rules() {
        let origin = "https://conf.example.org";
        assert_eq!(
            in_scope("https://conf.example.org/a", origin, &[]),
            Ok(true)
        );
        assert_eq!(
            in_scope("https://cdn.conf.example.org/a", origin, &[]),
            Ok(true)
        );
        assert_eq!(
            in_scope(
                "https://short.ly/x",
                origin,
                &[
                    "https://sso.other.net/".into(),
                    "https://conf.example.org/home".into()
                ]
            ),
            Ok(true)
        );
        assert_eq!(
            in_scope(
                "https://short.ly/x",
                origin,
                &["https://sso.other.net/".into()]
            ),
            Ok(false)
        );
        assert!(in_scope("not a url", origin, &[]).is_err());
    }

    fn doc(entries: &str) -> String {
        format!(
            r#"{{"target_origin":"http://t.test","states":[{{"state_id":"R1"}},{{"state_id":"LO"}}],"browsers":["chrome"],"entries":[{entries}]}}"#
        )
    }

    #[test]
    fn empty_archive() {
        let c = ingest_corpus(&doc("")).unwrap();
        assert!(c.is_empty());
    }

    #[test]
    fn duplicate_cell_conflicts() {
        let e = r#"{"url":"http://t.test/a","state_id":"R1","browser_id":"chrome","status":200}"#;
        let err = ingest_corpus(&doc(&format!("{e},{e}"))).unwrap_err();
        assert!(matches!(err, CorpusError::Conflict { index: 1, .. }));
    }

    #[test]
    fn schema_error_names_index() {
        let good =
            r#"{"url":"http://t.test/a","state_id":"R1","browser_id":"chrome","status":200}"#;
        let bad = r#"{"url":"http://t.test/b","state_id":"R1","browser_id":"chrome","status":"x"}"#;
        let err = ingest_corpus(&doc(&format!("{good},{bad}"))).unwrap_err();
        assert!(matches!(err, CorpusError::Schema { index: 1, .. }));
        let unknown_state =
            r#"{"url":"http://t.test/a","state_id":"ZZ","browser_id":"chrome","status":200}"#;
        assert!(matches!(
            ingest_corpus(&doc(unknown_state)).unwrap_err(),
            CorpusError::Schema { index: 0, .. }
        ));
    }

    #[test]
    fn failures_round_trip() {
        let e = r#"{"url":"http://t.test/a","state_id":"LO","browser_id":"chrome","fetch_error":"timed out"}"#;
        let c = ingest_corpus(&doc(e)).unwrap();
        assert_eq!(c.failed_cells(), 1);
        let again = ingest_corpus(&c.to_json()).unwrap();
        assert_eq!(again, c);
        assert_eq!(again.to_json(), c.to_json());
    }

    #[test]
    fn baseline_rule() {
        let ok = vec![
            StateDefinition::new("R1", "").with_auth("Cookie", "s=1"),
            StateDefinition::new("LO", ""),
        ];
        assert!(validate_states(&ok).is_ok());
        let two = vec![StateDefinition::new("A", ""), StateDefinition::new("B", "")];
        assert!(validate_states(&two).is_err());
        let dup = vec![
            StateDefinition::new("A", "").with_auth("Cookie", "1"),
            StateDefinition::new("A", "").with_auth("Cookie", "2"),
        ];
        assert!(validate_states(&dup).is_err());
    }
}
