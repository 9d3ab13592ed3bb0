//! HTTP responses and the feature vector that attack-class predicates read.

mod normalize;
mod signature;

pub use normalize::{
    normalize, responses_equivalent, BodyPattern, MaskReason, MaskedRegion, NormalizationRules,
    NormalizedResponse, RuleSet, RulesError,
};
pub use signature::{
    signature_of, BodyTraits, CtFamily, Dimensions, PostMessage, RedirectOrigin, ResponseSignature,
    ScClass,
};

use serde::{Deserialize, Serialize};

/// Ordered header multimap. Names keep their original spelling but compare
/// case-insensitively.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Headers(Vec<(String, String)>);

impl Headers {
    pub fn new() -> Self {
        Self(Vec::new())
    }

    pub fn push(&mut self, name: impl Into<String>, value: impl Into<String>) {
        self.0.push((name.into(), value.into()));
    }

    pub fn get_all<'a, 'n>(&'a self, name: &'n str) -> impl Iterator<Item = &'a str> + use<'a, 'n> {
        self.0
            .iter()
            .filter(move |(n, _)| n.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }

    pub fn first(&self, name: &str) -> Option<&str> {
        self.get_all(name).next()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.first(name).is_some()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.0.iter().map(|(n, v)| (n.as_str(), v.as_str()))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl From<Vec<(String, String)>> for Headers {
    fn from(v: Vec<(String, String)>) -> Self {
        Self(v)
    }
}

impl<'a> FromIterator<(&'a str, &'a str)> for Headers {
    fn from_iter<I: IntoIterator<Item = (&'a str, &'a str)>>(iter: I) -> Self {
        Self(
            iter.into_iter()
                .map(|(n, v)| (n.to_string(), v.to_string()))
                .collect(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RedirectHop {
    pub status: u16,
    pub location: String,
}

/// A captured response to a request for `url`.
///
/// When the fetcher follows redirects, the status, headers and body still
/// belong to the first response; the followed hops live in `redirect_chain`
/// and the landing URL in `final_url`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpResponse {
    pub url: String,
    pub status: u16,
    pub headers: Headers,
    pub body: Vec<u8>,
    pub final_url: String,
    pub redirect_chain: Vec<RedirectHop>,
}

impl HttpResponse {
    pub fn new(url: impl Into<String>, status: u16) -> Self {
        let url = url.into();
        Self {
            final_url: url.clone(),
            url,
            status,
            headers: Headers::new(),
            body: Vec::new(),
            redirect_chain: Vec::new(),
        }
    }

    pub fn with_header(mut self, name: &str, value: &str) -> Self {
        self.headers.push(name, value);
        self
    }

    pub fn with_body(mut self, body: impl Into<Vec<u8>>) -> Self {
        self.body = body.into();
        self
    }

    /// Checks the structural invariants: a status in `[100, 999]` and a
    /// redirect chain that only holds 3xx hops.
    pub fn validate(&self) -> Result<(), String> {
        if !(100..=999).contains(&self.status) {
            return Err(format!("status {} outside [100, 999]", self.status));
        }
        if let Some(hop) = self
            .redirect_chain
            .iter()
            .find(|h| !(300..400).contains(&h.status))
        {
            return Err(format!("redirect hop with non-3xx status {}", hop.status));
        }
        Ok(())
    }
}
