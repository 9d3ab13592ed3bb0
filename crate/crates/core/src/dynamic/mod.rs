//! Browser-side observations for the dynamic attack classes: planning the
//! collection pages, ingesting what the harness reports, and folding it into
//! response signatures.

mod jaro;
mod plan;

pub use jaro::{jaro, postmessage_differs};
pub use plan::{
    plan_dynamic_collection, render_collection_page, write_plan, CollectionPage, CollectionPlan,
};

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::response::{Dimensions, PostMessage, ResponseSignature};
use crate::{BrowserId, StateId};

/// Default per-page event collection window.
pub const DEFAULT_WINDOW_MS: u64 = 6000;

fn default_window() -> u64 {
    DEFAULT_WINDOW_MS
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AppcacheEvent {
    Cached,
    Error,
    #[default]
    None,
}

/// What the in-browser harness saw for one (url, state, browser, inclusion
/// method). Optional signal fields are absent when the page did not
/// instrument them; an instrumented signal that never fired is recorded
/// as empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicObservation {
    pub url: String,
    pub state_id: StateId,
    pub browser_id: BrowserId,
    pub inclusion_method: String,
    #[serde(default = "default_window")]
    pub window_ms: u64,
    #[serde(default)]
    pub events: Vec<String>,
    /// Property reads keyed by name; unknown names are kept verbatim.
    #[serde(default)]
    pub properties: BTreeMap<String, serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub postmessages: Option<Vec<PostMessage>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub js_error_count: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub readable_objects: Option<BTreeSet<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub css_computed: Option<BTreeMap<String, BTreeMap<String, String>>>,
    #[serde(default)]
    pub csp_report_received: bool,
    #[serde(default)]
    pub appcache_event: AppcacheEvent,
}

impl DynamicObservation {
    pub fn new(url: &str, state: &str, browser: BrowserId, inclusion_method: &str) -> Self {
        Self {
            url: url.into(),
            state_id: StateId::new(state),
            browser_id: browser,
            inclusion_method: inclusion_method.into(),
            window_ms: DEFAULT_WINDOW_MS,
            events: Vec::new(),
            properties: BTreeMap::new(),
            postmessages: None,
            js_error_count: None,
            readable_objects: None,
            css_computed: None,
            csp_report_received: false,
            appcache_event: AppcacheEvent::None,
        }
    }

    fn number(&self, name: &str) -> Option<f64> {
        self.properties.get(name)?.as_f64()
    }

    fn count(&self, name: &str) -> Option<u32> {
        let v = self.number(name)?;
        (v.fract() == 0.0 && v <= u32::MAX as f64).then_some(v as u32)
    }

    fn validate(&self) -> Result<(), String> {
        for (name, v) in &self.properties {
            if v.as_f64().is_some_and(|x| x < 0.0) {
                return Err(format!("property `{name}` is negative"));
            }
        }
        if self.window_ms == 0 {
            return Err("window_ms must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ObservationError {
    #[error("cannot read observations: {0}")]
    Io(#[from] std::io::Error),
    #[error("observation record {index} (line {line}): {message}")]
    Schema {
        index: usize,
        line: usize,
        message: String,
    },
}

/// Parses a JSON-lines observation document. Blank lines are skipped.
pub fn ingest_observations(text: &str) -> Result<Vec<DynamicObservation>, ObservationError> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let index = out.len();
        let err = |message: String| ObservationError::Schema {
            index,
            line: lineno + 1,
            message,
        };
        let obs: DynamicObservation = serde_json::from_str(raw).map_err(|e| err(e.to_string()))?;
        obs.validate().map_err(err)?;
        out.push(obs);
    }
    Ok(out)
}

pub fn load_observations(
    path: &std::path::Path,
) -> Result<Vec<DynamicObservation>, ObservationError> {
    ingest_observations(&std::fs::read_to_string(path)?)
}

/// Enriches `base` with the body traits `obs` reveals. Traits `base`
/// already carries are left untouched.
pub fn lift_traits(obs: &DynamicObservation, base: &ResponseSignature) -> ResponseSignature {
    let mut sig = base.clone();
    let t = &mut sig.body_traits;

    if t.frame_count.is_none() {
        t.frame_count = obs
            .count("contentWindow.length")
            .or_else(|| obs.count("frames.length"));
    }
    if t.video.is_none() {
        if let (Some(width), Some(height)) = (obs.count("videoWidth"), obs.count("videoHeight")) {
            t.video = Some(Dimensions { width, height });
        }
    }
    if t.image.is_none() {
        if let (Some(width), Some(height)) = (obs.count("naturalWidth"), obs.count("naturalHeight"))
        {
            if width > 0 && height > 0 {
                t.image = Some(Dimensions { width, height });
            }
        }
    }
    if t.media_duration.is_none() {
        t.media_duration = obs.number("duration").filter(|d| d.is_finite());
    }
    if matches!(obs.inclusion_method.as_str(), "audio" | "video" | "source") {
        t.media_probed = true;
    }
    if t.js_error_count.is_none() {
        t.js_error_count = obs.js_error_count;
    }
    if t.readable_objects.is_none() {
        t.readable_objects = obs.readable_objects.clone();
    }
    if t.broadcast_postmsgs.is_none() {
        t.broadcast_postmsgs = obs.postmessages.clone();
    }
    if t.css_rules.is_none() {
        t.css_rules = obs.css_computed.clone();
    }
    sig
}

/// Observations indexed by the corpus cell they describe.
#[derive(Debug, Clone, Default)]
pub struct ObservationIndex {
    by_cell: BTreeMap<(String, StateId, BrowserId), Vec<DynamicObservation>>,
}

impl ObservationIndex {
    pub fn new(observations: impl IntoIterator<Item = DynamicObservation>) -> Self {
        let mut by_cell: BTreeMap<_, Vec<_>> = BTreeMap::new();
        for o in observations {
            by_cell
                .entry((o.url.clone(), o.state_id.clone(), o.browser_id))
                .or_default()
                .push(o);
        }
        Self { by_cell }
    }

    pub fn is_empty(&self) -> bool {
        self.by_cell.is_empty()
    }

    /// Applies every observation for the cell, in input order.
    pub fn enrich(
        &self,
        url: &str,
        state: &StateId,
        browser: BrowserId,
        base: ResponseSignature,
    ) -> ResponseSignature {
        match self.by_cell.get(&(url.to_string(), state.clone(), browser)) {
            Some(list) => list.iter().fold(base, |sig, o| lift_traits(o, &sig)),
            None => base,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::response::{signature_of, HttpResponse};

    fn base() -> ResponseSignature {
        signature_of(
            &HttpResponse::new("http://t.test/p", 200).with_header("Content-Type", "text/html"),
        )
    }

    #[test]
    fn ingest_cases() {
        assert!(ingest_observations("").unwrap().is_empty());
        let line = r#"{"url":"http://t.test/offline.php","state_id":"LO","browser_id":"firefox","inclusion_method":"object","events":["onload"],"properties":{"x-custom":"kept"}}"#;
        let obs = ingest_observations(&format!("\n{line}\n")).unwrap();
        assert_eq!(obs.len(), 1);
        assert_eq!(obs[0].events, ["onload"]);
        assert_eq!(obs[0].window_ms, DEFAULT_WINDOW_MS);
        assert_eq!(obs[0].properties["x-custom"], "kept");

        let neg = r#"{"url":"u","state_id":"LO","browser_id":"chrome","inclusion_method":"audio","properties":{"duration":-1.5}}"#;
        match ingest_observations(&format!("{line}\n{neg}")) {
            Err(ObservationError::Schema {
                index: 1, line: 2, ..
            }) => {}
            other => panic!("{other:?}"),
        }
        let bad = r#"{"url":"u","state_id":"LO","browser_id":"chrome","inclusion_method":"script","js_error_count":-2}"#;
        assert!(matches!(
            ingest_observations(bad),
            Err(ObservationError::Schema { index: 0, .. })
        ));
    }

    #[test]
    fn lifts_frames_and_postmessages() {
        let mut o = DynamicObservation::new("http://t.test/p", "R1", BrowserId::Chrome, "iframe");
        o.properties.insert("contentWindow.length".into(), 3.into());
        o.postmessages = Some(vec![]);
        let s = lift_traits(&o, &base());
        assert_eq!(s.body_traits.frame_count, Some(3));
        assert_eq!(s.body_traits.broadcast_postmsgs, Some(vec![]));
    }

    #[test]
    fn lifting_is_monotone() {
        let mut b = base();
        b.body_traits.frame_count = Some(1);
        let mut o = DynamicObservation::new("http://t.test/p", "R1", BrowserId::Chrome, "iframe");
        o.properties.insert("frames.length".into(), 5.into());
        o.js_error_count = Some(0);
        let s = lift_traits(&o, &b);
        assert_eq!(s.body_traits.frame_count, Some(1));
        assert_eq!(s.body_traits.js_error_count, Some(0));
    }

    #[test]
    fn media_inclusion_marks_probe() {
        let o = DynamicObservation::new("http://t.test/p", "R1", BrowserId::Chrome, "video");
        let s = lift_traits(&o, &base());
        assert!(s.body_traits.media_probed);
        assert!(s.body_traits.video.is_none());
    }
}
