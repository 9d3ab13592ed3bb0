//! Cross-origin state inference (COSI) testing toolkit.
//!
//! The pipeline runs in three stages, each consuming the serialized output
//! of the previous one:
//!
//! 1. [`corpus`]: collect or ingest per-state, per-browser responses and find
//!    the state-dependent URLs.
//! 2. [`kb`], [`dynamic`] and [`select`]: match response pairs against the
//!    attack-class knowledge base and pick a covering set of attack vectors.
//! 3. [`page`]: render the chosen vectors into a self-contained attack page.
//!
//! [`target`] is a configurable HTTP service used to fixture all of the above.

pub mod cli;
pub mod corpus;
pub mod dynamic;
pub mod kb;
pub mod page;
pub mod response;
pub mod select;
pub mod target;

use serde::{Deserialize, Serialize};

/// Browsers whose leak behaviour the knowledge base describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BrowserId {
    Chrome,
    Firefox,
    Edge,
}

impl BrowserId {
    pub const ALL: [BrowserId; 3] = [BrowserId::Chrome, BrowserId::Firefox, BrowserId::Edge];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Chrome => "chrome",
            Self::Firefox => "firefox",
            Self::Edge => "edge",
        }
    }

    /// Name returned by the in-page browser detection helper.
    pub fn display_name(self) -> &'static str {
        match self {
            Self::Chrome => "Chrome",
            Self::Firefox => "Firefox",
            Self::Edge => "Edge",
        }
    }
}

impl std::fmt::Display for BrowserId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for BrowserId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "chrome" | "c" => Ok(Self::Chrome),
            "firefox" | "f" => Ok(Self::Firefox),
            "edge" | "e" => Ok(Self::Edge),
            other => Err(format!("unknown browser `{other}`")),
        }
    }
}

/// Short state name such as `R1` or `LO`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StateId(pub String);

impl StateId {
    pub fn new(s: impl Into<String>) -> Self {
        Self(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl std::fmt::Display for StateId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for StateId {
    fn from(s: &str) -> Self {
        Self(s.to_string())
    }
}

pub(crate) mod b64 {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&STANDARD.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let text = String::deserialize(d)?;
        STANDARD.decode(text).map_err(serde::de::Error::custom)
    }
}
