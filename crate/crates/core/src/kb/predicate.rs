use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::dynamic::postmessage_differs;
use crate::response::{CtFamily, RedirectOrigin, ResponseSignature, ScClass};

/// Default Jaro similarity below which two postMessage payloads differ.
pub const DEFAULT_POSTMSG_THRESHOLD: f64 = 0.90;

/// A status-code pattern: an exact code (`"200"`, `"999"`) or a class
/// (`"3xx"`, `"nonstd"`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ScPattern {
    Code(u16),
    Class(ScClass),
}

impl ScPattern {
    pub fn matches(self, sc: u16) -> bool {
        match self {
            Self::Code(c) => c == sc,
            Self::Class(k) => ScClass::of(sc) == k,
        }
    }
}

impl TryFrom<String> for ScPattern {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        if let Some(k) = ScClass::parse(&s) {
            return Ok(Self::Class(k));
        }
        match s.parse::<u16>() {
            Ok(c) if (100..=999).contains(&c) => Ok(Self::Code(c)),
            _ => Err(format!("bad status pattern `{s}`")),
        }
    }
}

impl From<ScPattern> for String {
    fn from(p: ScPattern) -> String {
        p.to_string()
    }
}

impl fmt::Display for ScPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Code(c) => write!(f, "{c}"),
            Self::Class(k) => f.write_str(match k {
                ScClass::Success => "2xx",
                ScClass::Redirect => "3xx",
                ScClass::ClientError => "4xx",
                ScClass::ServerError => "5xx",
                ScClass::NonStandard => "nonstd",
            }),
        }
    }
}

/// Body traits and other features predicates can test for presence or
/// compare across the two sides of a pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Trait {
    ContentType,
    CssLike,
    Html,
    Pdf,
    ImageDimensions,
    IncludedUrls,
    VideoDimensions,
    MediaDuration,
    FrameCount,
    /// Non-empty list of broadcast messages.
    PostmsgsBroadcast,
    JsErrorCount,
    ReadableObjects,
    CssRules,
}

impl Trait {
    /// Traits that need a browser to render the response.
    pub fn is_dynamic(self) -> bool {
        matches!(
            self,
            Self::VideoDimensions
                | Self::MediaDuration
                | Self::FrameCount
                | Self::PostmsgsBroadcast
                | Self::JsErrorCount
                | Self::ReadableObjects
                | Self::CssRules
        )
    }

    /// Whether the signature carries a definite value for this trait.
    /// Static traits always do; dynamic ones only after observation.
    pub fn observed(self, s: &ResponseSignature) -> bool {
        let t = &s.body_traits;
        match self {
            Self::VideoDimensions | Self::MediaDuration => {
                t.media_probed || t.video.is_some() || t.media_duration.is_some()
            }
            Self::FrameCount => t.frame_count.is_some(),
            Self::PostmsgsBroadcast => t.broadcast_postmsgs.is_some(),
            Self::JsErrorCount => t.js_error_count.is_some(),
            Self::ReadableObjects => t.readable_objects.is_some(),
            Self::CssRules => t.css_rules.is_some(),
            _ => true,
        }
    }

    fn present(self, s: &ResponseSignature) -> bool {
        let t = &s.body_traits;
        match self {
            Self::ContentType => s.content_type.is_some(),
            Self::CssLike => t.css_like,
            Self::Html => t.html,
            Self::Pdf => t.pdf,
            Self::ImageDimensions => t.image.is_some(),
            Self::IncludedUrls => !t.included_urls.is_empty(),
            Self::VideoDimensions => t.video.is_some(),
            Self::MediaDuration => t.media_duration.is_some(),
            Self::FrameCount => t.frame_count.is_some(),
            Self::PostmsgsBroadcast => t.broadcast_postmsgs.as_ref().is_some_and(|m| !m.is_empty()),
            Self::JsErrorCount => t.js_error_count.is_some(),
            Self::ReadableObjects => t.readable_objects.is_some(),
            Self::CssRules => t.css_rules.is_some(),
        }
    }

    /// `IncludedUrls` is directional: it holds when `s` includes a URL that
    /// `other` does not. Everything else compares values, absence included.
    fn differs(
        self,
        s: &ResponseSignature,
        other: &ResponseSignature,
        threshold: Option<f64>,
    ) -> bool {
        let (a, b) = (&s.body_traits, &other.body_traits);
        match self {
            Self::ContentType => s.content_type != other.content_type,
            Self::CssLike => a.css_like != b.css_like,
            Self::Html => a.html != b.html,
            Self::Pdf => a.pdf != b.pdf,
            Self::ImageDimensions => a.image != b.image,
            Self::IncludedUrls => a
                .included_urls
                .difference(&b.included_urls)
                .next()
                .is_some(),
            Self::VideoDimensions => a.video != b.video,
            Self::MediaDuration => match (a.media_duration, b.media_duration) {
                (Some(x), Some(y)) => (x - y).abs() > 1e-9,
                (x, y) => x.is_some() != y.is_some(),
            },
            Self::FrameCount => a.frame_count != b.frame_count,
            Self::PostmsgsBroadcast => postmessage_differs(
                a.broadcast_postmsgs.as_deref().unwrap_or_default(),
                b.broadcast_postmsgs.as_deref().unwrap_or_default(),
                threshold.unwrap_or(DEFAULT_POSTMSG_THRESHOLD),
            ),
            Self::JsErrorCount => a.js_error_count != b.js_error_count,
            Self::ReadableObjects => a.readable_objects != b.readable_objects,
            Self::CssRules => a.css_rules != b.css_rules,
        }
    }
}

/// One conjunct of a response predicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "atom", rename_all = "snake_case", deny_unknown_fields)]
pub enum Atom {
    ScIn {
        codes: Vec<ScPattern>,
    },
    ScNotIn {
        codes: Vec<ScPattern>,
    },
    CtIn {
        families: Vec<CtFamily>,
    },
    CtNotIn {
        families: Vec<CtFamily>,
    },
    /// Prefix of the declared media type, e.g. `text/`.
    CtPrefix {
        prefix: String,
    },
    XctoNosniff {
        value: bool,
    },
    XfoEnabled {
        value: bool,
    },
    CdAttachment {
        value: bool,
    },
    RedirectIn {
        origins: Vec<RedirectOrigin>,
    },
    Has {
        #[serde(rename = "trait")]
        trait_: Trait,
    },
    Lacks {
        #[serde(rename = "trait")]
        trait_: Trait,
    },
    /// Pair-level: this side's value differs from the other side's.
    Differs {
        feature: Trait,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        threshold: Option<f64>,
    },
    Not {
        all: Vec<Atom>,
    },
}

impl Atom {
    /// Three-valued evaluation; `None` when a dynamic trait it reads has not
    /// been observed.
    pub fn eval(&self, s: &ResponseSignature, other: &ResponseSignature) -> Option<bool> {
        Some(match self {
            Atom::ScIn { codes } => codes.iter().any(|p| p.matches(s.sc)),
            Atom::ScNotIn { codes } => !codes.iter().any(|p| p.matches(s.sc)),
            Atom::CtIn { families } => families.contains(&s.ct_family),
            Atom::CtNotIn { families } => !families.contains(&s.ct_family),
            Atom::CtPrefix { prefix } => s
                .content_type
                .as_deref()
                .is_some_and(|c| c.starts_with(prefix.as_str())),
            Atom::XctoNosniff { value } => s.xcto_nosniff == *value,
            Atom::XfoEnabled { value } => s.xfo_enabled == *value,
            Atom::CdAttachment { value } => s.cd_attachment == *value,
            Atom::RedirectIn { origins } => origins.contains(&s.redirect_target_origin),
            Atom::Has { trait_ } => {
                if !trait_.observed(s) {
                    return None;
                }
                trait_.present(s)
            }
            Atom::Lacks { trait_ } => {
                if !trait_.observed(s) {
                    return None;
                }
                !trait_.present(s)
            }
            Atom::Differs { feature, threshold } => {
                if !feature.observed(s) || !feature.observed(other) {
                    return None;
                }
                feature.differs(s, other, *threshold)
            }
            Atom::Not { all } => return conjunction(all, s, other).map(|v| !v),
        })
    }

    pub fn traits(&self, out: &mut BTreeSet<Trait>) {
        match self {
            Atom::Has { trait_ } | Atom::Lacks { trait_ } => {
                out.insert(*trait_);
            }
            Atom::Differs { feature, .. } => {
                out.insert(*feature);
            }
            Atom::Not { all } => all.iter().for_each(|a| a.traits(out)),
            _ => {}
        }
    }

    fn validate(&self) -> Result<(), String> {
        match self {
            Atom::ScIn { codes } | Atom::ScNotIn { codes } if codes.is_empty() => {
                Err("empty status set".into())
            }
            Atom::CtIn { families } | Atom::CtNotIn { families } if families.is_empty() => {
                Err("empty content-type set".into())
            }
            Atom::RedirectIn { origins } if origins.is_empty() => Err("empty origin set".into()),
            Atom::Differs {
                threshold: Some(t), ..
            } if !(0.0..=1.0).contains(t) => Err(format!("threshold {t} outside [0,1]")),
            Atom::Not { all } if all.is_empty() => Err("empty negation".into()),
            Atom::Not { all } => all.iter().try_for_each(Atom::validate),
            _ => Ok(()),
        }
    }
}

/// Kleene conjunction: false dominates unknown.
fn conjunction(atoms: &[Atom], s: &ResponseSignature, other: &ResponseSignature) -> Option<bool> {
    let mut unknown = false;
    for a in atoms {
        match a.eval(s, other) {
            Some(false) => return Some(false),
            None => unknown = true,
            Some(true) => {}
        }
    }
    if unknown {
        None
    } else {
        Some(true)
    }
}

/// A conjunction of atoms; the empty predicate accepts every response.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Predicate(pub Vec<Atom>);

impl Predicate {
    /// Evaluates against `s`, with `other` as the opposite side of the pair.
    pub fn eval(&self, s: &ResponseSignature, other: &ResponseSignature) -> Option<bool> {
        conjunction(&self.0, s, other)
    }

    pub fn holds(&self, s: &ResponseSignature, other: &ResponseSignature) -> bool {
        self.eval(s, other) == Some(true)
    }

    pub fn traits(&self) -> BTreeSet<Trait> {
        let mut out = BTreeSet::new();
        self.0.iter().for_each(|a| a.traits(&mut out));
        out
    }

    pub(super) fn validate(&self) -> Result<(), String> {
        self.0.iter().try_for_each(Atom::validate)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::response::{signature_of, HttpResponse};

    fn sig(status: u16, ct: &str) -> ResponseSignature {
        signature_of(&HttpResponse::new("http://t.test/", status).with_header("Content-Type", ct))
    }

    #[test]
    fn status_patterns() {
        let p = ScPattern::try_from("3xx".to_string()).unwrap();
        assert!(p.matches(302) && !p.matches(200));
        let p = ScPattern::try_from("999".to_string()).unwrap();
        assert!(p.matches(999));
        assert!(ScPattern::try_from("abc".to_string()).is_err());
        assert_eq!(
            String::from(ScPattern::Class(ScClass::NonStandard)),
            "nonstd"
        );
    }

    #[test]
    fn negated_conjunction() {
        let not: Atom = serde_json::from_str(
            r#"{"atom":"not","all":[{"atom":"sc_in","codes":["200"]},{"atom":"cd_attachment","value":true}]}"#,
        )
        .unwrap();
        let ok = sig(200, "text/html");
        assert_eq!(not.eval(&ok, &ok), Some(true));
        let att = signature_of(
            &HttpResponse::new("http://t.test/", 200)
                .with_header("Content-Disposition", "attachment"),
        );
        assert_eq!(not.eval(&att, &ok), Some(false));
    }

    #[test]
    fn dynamic_traits_are_unknown_until_observed() {
        let a = sig(200, "text/html");
        let p = Predicate(vec![
            Atom::CtIn {
                families: vec![CtFamily::Html],
            },
            Atom::Has {
                trait_: Trait::FrameCount,
            },
        ]);
        assert_eq!(p.eval(&a, &a), None);
        let mut b = a.clone();
        b.body_traits.frame_count = Some(2);
        assert_eq!(p.eval(&b, &a), Some(true));
        // A definite false still wins over the unknown atom.
        assert_eq!(p.eval(&sig(200, "text/css"), &a), Some(false));
    }

    #[test]
    fn included_urls_difference_is_directional() {
        let mut a = sig(200, "text/html");
        let b = a.clone();
        a.body_traits
            .included_urls
            .insert("http://t.test/x.png".into());
        let d = Atom::Differs {
            feature: Trait::IncludedUrls,
            threshold: None,
        };
        assert_eq!(d.eval(&a, &b), Some(true));
        assert_eq!(d.eval(&b, &a), Some(false));
    }

    #[test]
    fn unknown_atom_is_rejected() {
        let e =
            serde_json::from_str::<Atom>(r#"{"atom":"x-powered-by","value":"php"}"#).unwrap_err();
        assert!(e.to_string().contains("x-powered-by"));
        assert!(
            serde_json::from_str::<Atom>(r#"{"atom":"xfo_enabled","value":true,"extra":1}"#)
                .is_err()
        );
    }
}
