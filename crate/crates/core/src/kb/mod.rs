//! The attack-class knowledge base and pairwise class matching.

mod predicate;

pub use predicate::{Atom, Predicate, ScPattern, Trait, DEFAULT_POSTMSG_THRESHOLD};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::response::ResponseSignature;
use crate::BrowserId;

const DEFAULT_KB: &str = include_str!("../../kb/cosi-classes.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassKind {
    Static,
    Dynamic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LeakMethod {
    EventsFired,
    ObjectProperty,
    Postmessage,
    CssPropRead,
    JsError,
    JsObjectRead,
    CspViolation,
    AppcacheError,
}

impl LeakMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::EventsFired => "events-fired",
            Self::ObjectProperty => "object-property",
            Self::Postmessage => "postmessage",
            Self::CssPropRead => "css-prop-read",
            Self::JsError => "js-error",
            Self::JsObjectRead => "js-object-read",
            Self::CspViolation => "csp-violation",
            Self::AppcacheError => "appcache-error",
        }
    }
}

impl fmt::Display for LeakMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InterferenceTag {
    EmitsCspViolation,
    UsesAppcacheManifest,
    ScriptSubresource,
    FrameSubresource,
    OpensWindow,
}

impl InterferenceTag {
    /// Whether two vectors carrying these tags may disturb each other on one
    /// page: a page-wide CSP policy reports script and frame loads too, and
    /// a document has a single manifest and a single popup slot.
    pub fn conflicts_with(self, other: InterferenceTag) -> bool {
        use InterferenceTag::*;
        matches!(
            (self, other),
            (EmitsCspViolation, ScriptSubresource)
                | (ScriptSubresource, EmitsCspViolation)
                | (EmitsCspViolation, FrameSubresource)
                | (FrameSubresource, EmitsCspViolation)
                | (UsesAppcacheManifest, UsesAppcacheManifest)
                | (OpensWindow, OpensWindow)
        )
    }
}

/// Tag/attribute pairs that can include a resource, plus `html manifest`.
pub const INCLUSION_TAGS: [(&str, &str); 15] = [
    ("applet", "code"),
    ("audio", "src"),
    ("embed", "src"),
    ("frame", "src"),
    ("iframe", "src"),
    ("img", "src"),
    ("input", "src"),
    ("link", "href"),
    ("object", "data"),
    ("script", "src"),
    ("source", "src"),
    ("track", "src"),
    ("video", "poster"),
    ("video", "src"),
    ("html", "manifest"),
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtraAttr {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<String>,
    /// Takes its value from the named vector parameter instead.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub param: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum InclusionMethod {
    HtmlTag {
        tag: String,
        attr: String,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        extra: Vec<ExtraAttr>,
    },
    DomMethod {
        method: String,
    },
    /// A form posting to the URL with an iframe as its target.
    FormPostIframe,
    AppcacheManifest,
    /// An ordered recipe of requests and inclusions.
    Composite {
        steps: Vec<String>,
    },
}

impl InclusionMethod {
    /// Key used in template ids, e.g. `object`, `video-poster`, `window-open`.
    pub fn key(&self) -> String {
        match self {
            Self::HtmlTag { tag, attr, .. } if tag == "video" && attr == "poster" => {
                "video-poster".into()
            }
            Self::HtmlTag { tag, .. } => tag.clone(),
            Self::DomMethod { method } => method.replace('.', "-"),
            Self::FormPostIframe => "form-iframe".into(),
            Self::AppcacheManifest => "appcache".into(),
            Self::Composite { .. } => "composite".into(),
        }
    }

    fn validate(&self) -> Result<(), String> {
        match self {
            Self::HtmlTag { tag, attr, extra } => {
                if !INCLUSION_TAGS.contains(&(tag.as_str(), attr.as_str())) {
                    return Err(format!("`{tag} {attr}=` cannot include a resource"));
                }
                for e in extra {
                    if e.value.is_some() && e.param.is_some() {
                        return Err(format!("attribute `{}` has both value and param", e.name));
                    }
                }
                Ok(())
            }
            Self::DomMethod { method } if method != "window.open" => {
                Err(format!("unsupported DOM method `{method}`"))
            }
            Self::Composite { steps } if steps.is_empty() => Err("empty composite recipe".into()),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for InclusionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::HtmlTag { tag, attr, extra } => {
                write!(f, "{tag} {attr}=URL")?;
                for e in extra {
                    match (&e.value, &e.param) {
                        (Some(v), _) => write!(f, " {}={v}", e.name)?,
                        (None, Some(p)) => write!(f, " {}=<{p}>", e.name)?,
                        (None, None) => write!(f, " {}", e.name)?,
                    }
                }
                Ok(())
            }
            Self::DomMethod { method } => write!(f, "{method}()"),
            Self::FormPostIframe => f.write_str("form + iframe"),
            Self::AppcacheManifest => f.write_str("html manifest=MANIFEST.appcache"),
            Self::Composite { steps } => f.write_str(&steps.join(", ")),
        }
    }
}

fn is_false(b: &bool) -> bool {
    !*b
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackClass {
    pub name: String,
    pub kind: ClassKind,
    /// Relies on a browser feature that current engines have removed.
    #[serde(default, skip_serializing_if = "is_false")]
    pub deprecated: bool,
    pub pred_a: Predicate,
    pub pred_b: Predicate,
    pub inclusion_methods: Vec<InclusionMethod>,
    pub leak_method: LeakMethod,
    pub observable_a: String,
    pub observable_b: String,
    pub browsers: BTreeSet<BrowserId>,
    #[serde(default)]
    pub interference_tags: BTreeSet<InterferenceTag>,
}

impl AttackClass {
    pub fn dynamic_traits(&self) -> BTreeSet<Trait> {
        self.pred_a
            .traits()
            .into_iter()
            .chain(self.pred_b.traits())
            .filter(|t| t.is_dynamic())
            .collect()
    }

    /// Dynamic classes are evaluated only when both sides carry every
    /// dynamic trait the class reads.
    pub fn evaluable(&self, x: &ResponseSignature, y: &ResponseSignature) -> bool {
        self.dynamic_traits()
            .iter()
            .all(|t| t.observed(x) && t.observed(y))
    }

    /// pred_a holds on `a` and pred_b on `b`.
    pub fn holds(&self, a: &ResponseSignature, b: &ResponseSignature) -> bool {
        self.evaluable(a, b) && self.pred_a.holds(a, b) && self.pred_b.holds(b, a)
    }

    /// Values that an inclusion method or recipe needs beyond the URL.
    pub fn vector_params(
        &self,
        a: &ResponseSignature,
        b: &ResponseSignature,
    ) -> BTreeMap<String, String> {
        let mut params = BTreeMap::new();
        let reads =
            |t: Trait| self.pred_a.traits().contains(&t) || self.pred_b.traits().contains(&t);
        if reads(Trait::ContentType) {
            if let Some(ct) = &a.content_type {
                params.insert("ct_a".into(), ct.clone());
            }
        }
        if reads(Trait::IncludedUrls) {
            if let Some(u) = a
                .body_traits
                .included_urls
                .difference(&b.body_traits.included_urls)
                .next()
            {
                params.insert("url_a".into(), u.clone());
            }
        }
        params
    }

    fn validate(&self) -> Result<(), String> {
        if self.name.trim().is_empty() {
            return Err("empty class name".into());
        }
        if self.browsers.is_empty() {
            return Err("no browsers".into());
        }
        if self.inclusion_methods.is_empty() {
            return Err("no inclusion methods".into());
        }
        if self.observable_a == self.observable_b {
            return Err("observable_a equals observable_b".into());
        }
        self.pred_a.validate()?;
        self.pred_b.validate()?;
        for m in &self.inclusion_methods {
            m.validate()?;
        }
        let dynamic = !self.dynamic_traits().is_empty();
        match (self.kind, dynamic) {
            (ClassKind::Static, true) => Err("static class reads a rendered body trait".into()),
            (ClassKind::Dynamic, false) => Err("dynamic class reads no rendered body trait".into()),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Error)]
pub enum KbError {
    #[error("cannot read KB: {0}")]
    Io(#[from] std::io::Error),
    #[error("KB schema error: {0}")]
    Schema(String),
    #[error("KB class `{class}`: {message}")]
    Class { class: String, message: String },
    #[error("KB defines class `{0}` more than once")]
    Conflict(String),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct KbDocument {
    classes: Vec<AttackClass>,
}

/// An ordered, validated set of attack classes.
#[derive(Debug, Clone, PartialEq)]
pub struct Kb {
    classes: Vec<AttackClass>,
}

impl Kb {
    pub fn new(classes: Vec<AttackClass>) -> Result<Self, KbError> {
        let mut names = BTreeSet::new();
        for c in &classes {
            c.validate().map_err(|message| KbError::Class {
                class: c.name.clone(),
                message,
            })?;
            if !names.insert(c.name.as_str()) {
                return Err(KbError::Conflict(c.name.clone()));
            }
        }
        Ok(Self { classes })
    }

    /// The shipped knowledge base.
    pub fn builtin() -> Self {
        load_kb(DEFAULT_KB).expect("shipped KB is valid")
    }

    pub fn load(path: &Path) -> Result<Self, KbError> {
        load_kb(&std::fs::read_to_string(path)?)
    }

    pub fn classes(&self) -> &[AttackClass] {
        &self.classes
    }

    pub fn get(&self, name: &str) -> Option<&AttackClass> {
        self.classes.iter().find(|c| c.name == name)
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    /// Compact JSON in field declaration order; stable across loads.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(&KbDocument {
            classes: self.classes.clone(),
        })
        .expect("KB serializes")
    }

    pub fn checksum(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }
}

pub fn load_kb(text: &str) -> Result<Kb, KbError> {
    let doc: KbDocument = serde_json::from_str(text).map_err(|e| KbError::Schema(e.to_string()))?;
    Kb::new(doc.classes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Orientation {
    /// The first response of the pair satisfies pred_a.
    Forward,
    Reversed,
}

impl Orientation {
    pub fn flip(self) -> Self {
        match self {
            Self::Forward => Self::Reversed,
            Self::Reversed => Self::Forward,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassMatch {
    pub class_name: String,
    pub orientation: Orientation,
    pub browsers: BTreeSet<BrowserId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchKinds {
    StaticOnly,
    StaticAndDynamic,
}

/// Classes distinguishing `x` from `y`, in KB order with forward before
/// reversed.
pub fn match_pair<'a>(
    x: &ResponseSignature,
    y: &ResponseSignature,
    classes: impl IntoIterator<Item = &'a AttackClass>,
    kinds: MatchKinds,
) -> Vec<ClassMatch> {
    let mut out = Vec::new();
    for c in classes {
        if c.kind == ClassKind::Dynamic && kinds == MatchKinds::StaticOnly {
            continue;
        }
        for (orientation, a, b) in [(Orientation::Forward, x, y), (Orientation::Reversed, y, x)] {
            if c.holds(a, b) {
                out.push(ClassMatch {
                    class_name: c.name.clone(),
                    orientation,
                    browsers: c.browsers.clone(),
                });
            }
        }
    }
    out
}

pub fn effective_browsers(m: &ClassMatch, requested: &BTreeSet<BrowserId>) -> BTreeSet<BrowserId> {
    m.browsers.intersection(requested).copied().collect()
}
