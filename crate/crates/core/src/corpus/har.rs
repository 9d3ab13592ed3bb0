//! HAR 1.2 import: each archive entry becomes one corpus cell, with the state
//! and browser supplied per file.

use std::collections::HashMap;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::Deserialize;
use thiserror::Error;
use url::Url;

use super::{Cell, Corpus};
use crate::response::{Headers, HttpResponse, RedirectHop};
use crate::{BrowserId, StateId};

const MAX_HOPS: usize = 10;

#[derive(Debug, Error)]
pub enum HarError {
    #[error("HAR is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("HAR entry {index}: {message}")]
    Entry { index: usize, message: String },
}

#[derive(Deserialize)]
struct Har {
    log: HarLog,
}

#[derive(Deserialize)]
struct HarLog {
    #[serde(default)]
    entries: Vec<HarEntry>,
}

#[derive(Deserialize)]
struct HarEntry {
    request: HarRequest,
    response: HarResponse,
}

#[derive(Deserialize)]
struct HarRequest {
    #[serde(default = "get")]
    method: String,
    url: String,
}

fn get() -> String {
    "GET".into()
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct HarResponse {
    status: i64,
    #[serde(default)]
    headers: Vec<HarHeader>,
    #[serde(default)]
    content: HarContent,
    #[serde(default)]
    redirect_url: String,
}

#[derive(Deserialize)]
struct HarHeader {
    name: String,
    value: String,
}

#[derive(Deserialize, Default)]
struct HarContent {
    #[serde(default)]
    text: Option<String>,
    #[serde(default)]
    encoding: Option<String>,
}

/// Converts the GET entries of a HAR archive to responses. Redirect chains
/// are rebuilt by following `redirectURL` through later entries of the same
/// archive.
pub fn har_to_responses(text: &str) -> Result<Vec<HttpResponse>, HarError> {
    let har: Har = serde_json::from_str(text)?;
    let mut out = Vec::new();
    for (index, e) in har.log.entries.iter().enumerate() {
        if !e.request.method.eq_ignore_ascii_case("GET") {
            continue;
        }
        let err = |message: String| HarError::Entry { index, message };
        let status = u16::try_from(e.response.status)
            .ok()
            .filter(|s| (100..=999).contains(s))
            .ok_or_else(|| err(format!("status {} out of range", e.response.status)))?;
        let body = match (
            &e.response.content.text,
            e.response.content.encoding.as_deref(),
        ) {
            (None, _) => Vec::new(),
            (Some(t), Some("base64")) => STANDARD
                .decode(t)
                .map_err(|x| err(format!("content: {x}")))?,
            (Some(t), _) => t.as_bytes().to_vec(),
        };
        let headers: Headers = e
            .response
            .headers
            .iter()
            .map(|h| (h.name.as_str(), h.value.as_str()))
            .collect();
        Url::parse(&e.request.url).map_err(|x| err(format!("request url: {x}")))?;
        let mut resp = HttpResponse::new(&e.request.url, status);
        resp.headers = headers;
        resp.body = body;
        out.push(resp);
    }

    // Rebuild chains from the recorded hops.
    let by_url: HashMap<String, (u16, String)> = har
        .log
        .entries
        .iter()
        .filter_map(|e| {
            let status = u16::try_from(e.response.status).ok()?;
            Some((e.request.url.clone(), (status, redirect_target(e)?)))
        })
        .collect();
    for resp in &mut out {
        let mut current = resp.url.clone();
        while resp.redirect_chain.len() < MAX_HOPS {
            let Some((status, next)) = by_url.get(&current) else {
                break;
            };
            if !(300..400).contains(status) {
                break;
            }
            resp.redirect_chain.push(RedirectHop {
                status: *status,
                location: next.clone(),
            });
            resp.final_url = next.clone();
            current = next.clone();
        }
    }
    Ok(out)
}

fn redirect_target(e: &HarEntry) -> Option<String> {
    let raw = if e.response.redirect_url.is_empty() {
        e.response
            .headers
            .iter()
            .find(|h| h.name.eq_ignore_ascii_case("location"))?
            .value
            .clone()
    } else {
        e.response.redirect_url.clone()
    };
    Some(
        Url::parse(&e.request.url)
            .ok()?
            .join(&raw)
            .ok()?
            .to_string(),
    )
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct HarImport {
    pub imported: usize,
    /// Repeated requests for a URL already in the corpus; the first wins.
    pub duplicates: usize,
    pub out_of_scope: usize,
}

/// Adds one HAR file recorded as `state` with `browser` to `corpus`.
pub fn import_har(
    corpus: &mut Corpus,
    text: &str,
    state: &StateId,
    browser: BrowserId,
) -> Result<HarImport, HarError> {
    let mut report = HarImport::default();
    for (index, resp) in har_to_responses(text)?.into_iter().enumerate() {
        let url = resp.url.clone();
        if corpus.get(&url, state, browser).is_some() {
            report.duplicates += 1;
            continue;
        }
        let chain: Vec<String> = resp
            .redirect_chain
            .iter()
            .map(|h| h.location.clone())
            .collect();
        if !super::in_scope(&url, &corpus.target_origin, &chain).unwrap_or(false) {
            report.out_of_scope += 1;
            continue;
        }
        corpus
            .insert(&url, state, browser, Cell::Response(resp))
            .map_err(|message| HarError::Entry { index, message })?;
        report.imported += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::StateDefinition;

    const HAR: &str = r#"{"log":{"version":"1.2","entries":[
      {"request":{"method":"GET","url":"http://t.test/a"},
       "response":{"status":302,"headers":[{"name":"Location","value":"/b"}],"content":{},"redirectURL":"/b"}},
      {"request":{"method":"GET","url":"http://t.test/b"},
       "response":{"status":200,"headers":[{"name":"Content-Type","value":"text/plain"}],"content":{"text":"aGk=","encoding":"base64"}}},
      {"request":{"method":"GET","url":"http://t.test/b"},
       "response":{"status":200,"headers":[],"content":{"text":"again"}}},
      {"request":{"method":"POST","url":"http://t.test/c"},
       "response":{"status":200,"headers":[],"content":{}}},
      {"request":{"method":"GET","url":"http://elsewhere.test/x"},
       "response":{"status":200,"headers":[],"content":{}}}
    ]}}"#;

    #[test]
    fn converts_entries() {
        let rs = har_to_responses(HAR).unwrap();
        assert_eq!(rs.len(), 4);
        assert_eq!(rs[0].redirect_chain.len(), 1);
        assert_eq!(rs[0].redirect_chain[0].location, "http://t.test/b");
        assert_eq!(rs[0].final_url, "http://t.test/b");
        assert_eq!(rs[1].body, b"hi");
        assert!(rs[1].redirect_chain.is_empty());
    }

    #[test]
    fn import_counts() {
        let mut c = Corpus::new(
            "http://t.test",
            vec![StateDefinition::new("LO", "")],
            [BrowserId::Firefox],
        );
        let r = import_har(&mut c, HAR, &StateId::new("LO"), BrowserId::Firefox).unwrap();
        assert_eq!(
            r,
            HarImport {
                imported: 2,
                duplicates: 1,
                out_of_scope: 1
            }
        );
        assert_eq!(
            c.response("http://t.test/b", &StateId::new("LO"), BrowserId::Firefox)
                .unwrap()
                .body,
            b"hi"
        );
    }

    #[test]
    fn bad_status_names_entry() {
        let bad =
            r#"{"log":{"entries":[{"request":{"url":"http://t.test/"},"response":{"status":0}}]}}"#;
        assert!(matches!(
            har_to_responses(bad),
            Err(HarError::Entry { index: 0, .. })
        ));
    }
}
