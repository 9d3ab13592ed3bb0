use std::collections::HashSet;
use std::path::Path;
use std::sync::LazyLock;

use regex::bytes::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::signature::{signature_of, ResponseSignature};
use super::{Headers, HttpResponse, RedirectHop};

const DEFAULT_RULES: &str = include_str!("../../rules/default-normalization.json");
const MAX_PASSES: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskReason {
    DateHeader,
    CsrfToken,
    SessionToken,
    Nonce,
    Timestamp,
    OtherDynamic,
}

impl MaskReason {
    fn as_str(self) -> &'static str {
        match self {
            Self::DateHeader => "date-header",
            Self::CsrfToken => "csrf-token",
            Self::SessionToken => "session-token",
            Self::Nonce => "nonce",
            Self::Timestamp => "timestamp",
            Self::OtherDynamic => "other-dynamic",
        }
    }

    fn parse(s: &[u8]) -> Option<Self> {
        Some(match s {
            b"date-header" => Self::DateHeader,
            b"csrf-token" => Self::CsrfToken,
            b"session-token" => Self::SessionToken,
            b"nonce" => Self::Nonce,
            b"timestamp" => Self::Timestamp,
            b"other-dynamic" => Self::OtherDynamic,
            _ => return None,
        })
    }

    fn placeholder(self) -> String {
        format!("[[masked:{}]]", self.as_str())
    }

    fn for_header(lower_name: &str) -> Self {
        match lower_name {
            "date" => Self::DateHeader,
            "expires" | "last-modified" => Self::Timestamp,
            "set-cookie" => Self::SessionToken,
            _ => Self::OtherDynamic,
        }
    }
}

static PLACEHOLDER: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"\[\[masked:(date-header|csrf-token|session-token|nonce|timestamp|other-dynamic)\]\]",
    )
    .unwrap()
});

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BodyPattern {
    pub regex: String,
    pub reason: MaskReason,
}

/// The on-disk rules document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleSet {
    pub masked_headers: Vec<String>,
    pub body_patterns: Vec<BodyPattern>,
}

#[derive(Debug, Error)]
pub enum RulesError {
    #[error("cannot read rules file: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed rules document: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("body pattern {index} does not compile: {source}")]
    Regex {
        index: usize,
        #[source]
        source: regex::Error,
    },
}

/// Compiled masking rules.
#[derive(Debug, Clone)]
pub struct NormalizationRules {
    masked_headers: HashSet<String>,
    patterns: Vec<(Regex, MaskReason)>,
}

impl NormalizationRules {
    pub fn from_rule_set(set: &RuleSet) -> Result<Self, RulesError> {
        let patterns = set
            .body_patterns
            .iter()
            .enumerate()
            .map(|(index, p)| {
                Regex::new(&p.regex)
                    .map(|re| (re, p.reason))
                    .map_err(|source| RulesError::Regex { index, source })
            })
            .collect::<Result<_, _>>()?;
        Ok(Self {
            masked_headers: set
                .masked_headers
                .iter()
                .map(|h| h.to_ascii_lowercase())
                .collect(),
            patterns,
        })
    }

    pub fn from_json(text: &str) -> Result<Self, RulesError> {
        Self::from_rule_set(&serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, RulesError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn default_rule_set() -> RuleSet {
        serde_json::from_str(DEFAULT_RULES).expect("shipped rules parse")
    }

    /// Rules that mask nothing.
    pub fn empty() -> Self {
        Self {
            masked_headers: HashSet::new(),
            patterns: Vec::new(),
        }
    }

    fn mask_pass(&self, body: &[u8]) -> Vec<u8> {
        let mut accepted: Vec<(usize, usize, MaskReason)> = PLACEHOLDER
            .captures_iter(body)
            .map(|c| {
                let m = c.get(0).unwrap();
                (m.start(), m.end(), MaskReason::parse(&c[1]).unwrap())
            })
            .collect();
        let mut candidates: Vec<(usize, usize, usize, MaskReason)> = Vec::new();
        for (rule, (re, reason)) in self.patterns.iter().enumerate() {
            for caps in re.captures_iter(body) {
                let m = caps.get(1).or_else(|| caps.get(0)).unwrap();
                if m.start() < m.end() {
                    candidates.push((m.start(), m.end(), rule, *reason));
                }
            }
        }
        candidates.sort_by_key(|&(s, e, rule, _)| (s, std::cmp::Reverse(e), rule));
        for (s, e, _, reason) in candidates {
            if accepted.iter().all(|&(as_, ae, _)| e <= as_ || s >= ae) {
                accepted.push((s, e, reason));
            }
        }
        accepted.sort_by_key(|&(s, _, _)| s);

        let mut out = Vec::with_capacity(body.len());
        let mut cursor = 0;
        for (s, e, reason) in accepted {
            out.extend_from_slice(&body[cursor..s]);
            out.extend_from_slice(reason.placeholder().as_bytes());
            cursor = e;
        }
        out.extend_from_slice(&body[cursor..]);
        out
    }

    fn mask_body(&self, body: &[u8]) -> (Vec<u8>, Vec<MaskedRegion>) {
        let mut current = body.to_vec();
        for _ in 0..MAX_PASSES {
            let next = self.mask_pass(&current);
            if next == current {
                break;
            }
            current = next;
        }
        let regions = PLACEHOLDER
            .captures_iter(&current)
            .map(|c| {
                let m = c.get(0).unwrap();
                MaskedRegion {
                    offset: m.start(),
                    length: m.len(),
                    reason: MaskReason::parse(&c[1]).unwrap(),
                }
            })
            .collect();
        (current, regions)
    }

    fn mask_headers(&self, headers: &Headers) -> Headers {
        let mut out: Vec<(String, String)> = headers
            .iter()
            .map(|(name, value)| {
                let lower = name.to_ascii_lowercase();
                let value = if self.masked_headers.contains(&lower) {
                    MaskReason::for_header(&lower).placeholder()
                } else {
                    value.to_string()
                };
                (lower, value)
            })
            .collect();
        // Stable: duplicates keep their relative order.
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out.into()
    }
}

impl Default for NormalizationRules {
    fn default() -> Self {
        Self::from_rule_set(&Self::default_rule_set()).expect("shipped rules compile")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedRegion {
    pub offset: usize,
    pub length: usize,
    pub reason: MaskReason,
}

/// Canonical form of a response with its non-deterministic parts masked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedResponse {
    pub url: String,
    /// Computed over the masked headers and body.
    pub signature: ResponseSignature,
    pub normalized_headers: Headers,
    #[serde(with = "crate::b64")]
    pub normalized_body: Vec<u8>,
    pub masked_regions: Vec<MaskedRegion>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub final_url: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub redirect_chain: Vec<RedirectHop>,
}

impl NormalizedResponse {
    /// Rebuilds a response from the canonical form.
    pub fn to_response(&self) -> HttpResponse {
        HttpResponse {
            url: self.url.clone(),
            status: self.signature.sc,
            headers: self.normalized_headers.clone(),
            body: self.normalized_body.clone(),
            final_url: self.final_url.clone(),
            redirect_chain: self.redirect_chain.clone(),
        }
    }

    /// Equality of the parts that define response equivalence.
    pub fn same_canonical_form(&self, other: &Self) -> bool {
        self.signature == other.signature
            && self.normalized_headers == other.normalized_headers
            && self.normalized_body == other.normalized_body
    }
}

pub fn normalize(resp: &HttpResponse, rules: &NormalizationRules) -> NormalizedResponse {
    let normalized_headers = rules.mask_headers(&resp.headers);
    let (normalized_body, masked_regions) = rules.mask_body(&resp.body);
    let masked = HttpResponse {
        url: resp.url.clone(),
        status: resp.status,
        headers: normalized_headers.clone(),
        body: normalized_body.clone(),
        final_url: resp.final_url.clone(),
        redirect_chain: resp.redirect_chain.clone(),
    };
    NormalizedResponse {
        url: resp.url.clone(),
        signature: signature_of(&masked),
        normalized_headers,
        normalized_body,
        masked_regions,
        final_url: resp.final_url.clone(),
        redirect_chain: resp.redirect_chain.clone(),
    }
}

pub fn responses_equivalent(
    a: &HttpResponse,
    b: &HttpResponse,
    rules: &NormalizationRules,
) -> bool {
    normalize(a, rules).same_canonical_form(&normalize(b, rules))
}
