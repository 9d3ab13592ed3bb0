use std::collections::{BTreeMap, BTreeSet};
use std::io::Cursor;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use url::Url;

use super::HttpResponse;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ScClass {
    #[serde(rename = "2xx")]
    Success,
    #[serde(rename = "3xx")]
    Redirect,
    #[serde(rename = "4xx")]
    ClientError,
    #[serde(rename = "5xx")]
    ServerError,
    /// 1xx and anything outside 100..=599.
    #[serde(rename = "nonstd")]
    NonStandard,
}

impl ScClass {
    pub fn of(sc: u16) -> Self {
        match sc {
            200..=299 => Self::Success,
            300..=399 => Self::Redirect,
            400..=499 => Self::ClientError,
            500..=599 => Self::ServerError,
            _ => Self::NonStandard,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "2xx" => Some(Self::Success),
            "3xx" => Some(Self::Redirect),
            "4xx" => Some(Self::ClientError),
            "5xx" => Some(Self::ServerError),
            "nonstd" => Some(Self::NonStandard),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CtFamily {
    Javascript,
    Css,
    Html,
    Json,
    Pdf,
    Image,
    Audio,
    Video,
    Webvtt,
    Other,
    Absent,
}

impl CtFamily {
    /// Classifies a media-type essence (lowercase, parameters stripped).
    pub fn of_essence(essence: &str) -> Self {
        match essence {
            "" => Self::Absent,
            "text/javascript"
            | "application/javascript"
            | "application/x-javascript"
            | "text/ecmascript"
            | "application/ecmascript"
            | "text/jscript"
            | "text/x-javascript" => Self::Javascript,
            "text/css" => Self::Css,
            "text/html" => Self::Html,
            "application/json" | "text/json" => Self::Json,
            "application/pdf" => Self::Pdf,
            "text/vtt" => Self::Webvtt,
            e if e.ends_with("+json") => Self::Json,
            e if e.starts_with("image/") => Self::Image,
            e if e.starts_with("audio/") => Self::Audio,
            e if e.starts_with("video/") => Self::Video,
            _ => Self::Other,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RedirectOrigin {
    None,
    SameOrigin,
    CrossOrigin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Dimensions {
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PostMessage {
    pub origin: String,
    pub data: String,
}

fn is_false(b: &bool) -> bool {
    !*b
}

/// Body features. The first group is computed from bytes; the second is only
/// ever filled in from browser observations.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BodyTraits {
    #[serde(skip_serializing_if = "is_false")]
    pub css_like: bool,
    #[serde(skip_serializing_if = "is_false")]
    pub html: bool,
    #[serde(skip_serializing_if = "is_false")]
    pub pdf: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image: Option<Dimensions>,
    #[serde(skip_serializing_if = "BTreeSet::is_empty")]
    pub included_urls: BTreeSet<String>,

    #[serde(skip_serializing_if = "Option::is_none")]
    pub video: Option<Dimensions>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub media_duration: Option<f64>,
    #[serde(skip_serializing_if = "is_false")]
    pub media_probed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub frame_count: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub js_error_count: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub readable_objects: Option<BTreeSet<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub broadcast_postmsgs: Option<Vec<PostMessage>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub css_rules: Option<BTreeMap<String, BTreeMap<String, String>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseSignature {
    pub sc: u16,
    pub sc_class: ScClass,
    pub ct_family: CtFamily,
    /// Declared media type essence, kept so that two `other` types can still
    /// be told apart.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub content_type: Option<String>,
    pub xcto_nosniff: bool,
    pub xfo_enabled: bool,
    pub cd_attachment: bool,
    pub redirect_target_origin: RedirectOrigin,
    #[serde(default)]
    pub body_traits: BodyTraits,
}

pub fn signature_of(resp: &HttpResponse) -> ResponseSignature {
    let sc_class = ScClass::of(resp.status);
    let content_type = resp
        .headers
        .first("content-type")
        .map(media_type_essence)
        .filter(|e| !e.is_empty());
    let ct_family = content_type
        .as_deref()
        .map(CtFamily::of_essence)
        .unwrap_or(CtFamily::Absent);

    let xcto_nosniff = resp.headers.get_all("x-content-type-options").any(|v| {
        v.split(',')
            .next()
            .is_some_and(|t| t.trim().eq_ignore_ascii_case("nosniff"))
    });
    let xfo_enabled = resp.headers.contains("x-frame-options");
    let cd_attachment = resp.headers.get_all("content-disposition").any(|v| {
        v.split(';')
            .next()
            .is_some_and(|t| t.trim().eq_ignore_ascii_case("attachment"))
    });

    let redirect_target_origin = if sc_class == ScClass::Redirect {
        redirect_origin(resp)
    } else {
        RedirectOrigin::None
    };

    ResponseSignature {
        sc: resp.status,
        sc_class,
        ct_family,
        content_type,
        xcto_nosniff,
        xfo_enabled,
        cd_attachment,
        redirect_target_origin,
        body_traits: static_body_traits(&resp.body, &resp.url),
    }
}

fn media_type_essence(value: &str) -> String {
    value
        .split(';')
        .next()
        .unwrap_or_default()
        .trim()
        .to_ascii_lowercase()
}

/// Compares the first Location hop with the request origin. A 3xx without a
/// usable Location never leaves the page's origin.
fn redirect_origin(resp: &HttpResponse) -> RedirectOrigin {
    let location = resp
        .headers
        .first("location")
        .or_else(|| resp.redirect_chain.first().map(|h| h.location.as_str()));
    let (Some(location), Ok(base)) = (location, Url::parse(&resp.url)) else {
        return RedirectOrigin::SameOrigin;
    };
    match base.join(location.trim()) {
        Ok(target) if target.origin() == base.origin() => RedirectOrigin::SameOrigin,
        Ok(_) => RedirectOrigin::CrossOrigin,
        Err(_) => RedirectOrigin::SameOrigin,
    }
}

static CSS_COMMENT: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?s)/\*.*?\*/").unwrap());
static CSS_SHEET: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"^\s*(?:@[a-zA-Z-]+[^;{}]*;\s*)*(?:[^{};]+\{\s*(?:[a-zA-Z-]+\s*:[^;{}]+;?\s*)*\}\s*)+$",
    )
    .unwrap()
});
static INCLUDE_ATTR: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r#"(?i)\b(?:src|href|data|poster|action|code)\s*=\s*["']([^"']+)["']"#).unwrap()
});

fn static_body_traits(body: &[u8], base_url: &str) -> BodyTraits {
    let mut traits = BodyTraits {
        pdf: body.starts_with(b"%PDF-"),
        image: image_dimensions(body),
        ..BodyTraits::default()
    };
    if traits.pdf || traits.image.is_some() {
        return traits;
    }
    let Ok(text) = std::str::from_utf8(body) else {
        return traits;
    };
    traits.html = looks_like_html(text);
    if traits.html {
        let base = Url::parse(base_url).ok();
        traits.included_urls = INCLUDE_ATTR
            .captures_iter(text)
            .filter_map(|c| resolve_included(c.get(1)?.as_str(), base.as_ref()))
            .collect();
    } else {
        let stripped = CSS_COMMENT.replace_all(text, "");
        traits.css_like = !stripped.trim().is_empty() && CSS_SHEET.is_match(&stripped);
    }
    traits
}

fn looks_like_html(text: &str) -> bool {
    let trimmed = text.trim_start();
    if !trimmed.starts_with('<') {
        return false;
    }
    let head: String = trimmed.chars().take(512).collect::<String>().to_lowercase();
    ["<!doctype html", "<html", "<head", "<body"]
        .iter()
        .any(|m| head.contains(m))
}

fn resolve_included(raw: &str, base: Option<&Url>) -> Option<String> {
    let raw = raw.trim();
    let lower = raw.to_ascii_lowercase();
    if raw.is_empty()
        || raw.starts_with('#')
        || ["about:", "data:", "javascript:", "mailto:", "blob:"]
            .iter()
            .any(|s| lower.starts_with(s))
    {
        return None;
    }
    match base {
        Some(b) => b.join(raw).ok().map(String::from),
        None => Url::parse(raw).ok().map(String::from),
    }
}

fn image_dimensions(body: &[u8]) -> Option<Dimensions> {
    use image::ImageFormat;
    let format = image::guess_format(body).ok()?;
    if !matches!(
        format,
        ImageFormat::Png | ImageFormat::Gif | ImageFormat::Jpeg
    ) {
        return None;
    }
    let reader = image::ImageReader::with_format(Cursor::new(body), format);
    let (width, height) = reader.into_dimensions().ok()?;
    Some(Dimensions { width, height })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn resp(status: u16, headers: &[(&str, &str)]) -> HttpResponse {
        let mut r = HttpResponse::new("https://conf.example.org/testconf/api.php", status);
        for (n, v) in headers {
            r.headers.push(*n, *v);
        }
        r
    }

    #[test]
    fn javascript_200() {
        let s = signature_of(&resp(200, &[("Content-Type", "text/javascript")]));
        assert_eq!(s.sc_class, ScClass::Success);
        assert_eq!(s.ct_family, CtFamily::Javascript);
        assert!(!s.xcto_nosniff);
        assert_eq!(s.redirect_target_origin, RedirectOrigin::None);
    }

    #[test]
    fn html_with_nosniff() {
        let s = signature_of(&resp(
            200,
            &[
                ("content-type", "text/html; charset=utf-8"),
                ("X-Content-Type-Options", "NoSniff"),
            ],
        ));
        assert_eq!(s.ct_family, CtFamily::Html);
        assert!(s.xcto_nosniff);
        assert!(!s.xfo_enabled);
    }

    #[test]
    fn cross_origin_redirect() {
        let s = signature_of(&resp(301, &[("Location", "https://sso.other.net/login")]));
        assert_eq!(s.sc_class, ScClass::Redirect);
        assert_eq!(s.redirect_target_origin, RedirectOrigin::CrossOrigin);

        let s = signature_of(&resp(302, &[("Location", "/login")]));
        assert_eq!(s.redirect_target_origin, RedirectOrigin::SameOrigin);
    }

    #[test]
    fn status_classes() {
        assert_eq!(ScClass::of(101), ScClass::NonStandard);
        assert_eq!(ScClass::of(204), ScClass::Success);
        assert_eq!(ScClass::of(599), ScClass::ServerError);
        assert_eq!(ScClass::of(999), ScClass::NonStandard);
    }

    #[test]
    fn disposition_and_frame_options() {
        let s = signature_of(&resp(
            200,
            &[
                ("Content-Disposition", "Attachment; filename=\"a.pdf\""),
                ("X-Frame-Options", "DENY"),
            ],
        ));
        assert!(s.cd_attachment);
        assert!(s.xfo_enabled);
        assert_eq!(s.ct_family, CtFamily::Absent);
        let s = signature_of(&resp(200, &[("Content-Disposition", "inline")]));
        assert!(!s.cd_attachment);
    }

    #[test]
    fn css_detection_rejects_javascript() {
        let css = signature_of(&resp(200, &[]).with_body("/* x */\n#m { color: red; }\n"));
        assert!(css.body_traits.css_like);
        let js = signature_of(&resp(200, &[]).with_body(
            "for (var i = 0; i < 2; i++) { setTimeout(function(){ throw new Error('x'); }, 0); }",
        ));
        assert!(!js.body_traits.css_like);
    }

    #[test]
    fn html_included_urls_resolve() {
        let body = r#"<!DOCTYPE html><html><body><img src="/img/a.png"><iframe src="about:blank"></iframe></body></html>"#;
        let s = signature_of(&resp(200, &[("Content-Type", "text/html")]).with_body(body));
        assert!(s.body_traits.html);
        let urls: Vec<_> = s.body_traits.included_urls.iter().cloned().collect();
        assert_eq!(urls, vec!["https://conf.example.org/img/a.png".to_string()]);
    }

    #[test]
    fn png_dimensions_are_read_from_header() {
        let mut png = Vec::new();
        image::RgbaImage::new(5, 7)
            .write_to(&mut Cursor::new(&mut png), image::ImageFormat::Png)
            .unwrap();
        let s = signature_of(&resp(200, &[("Content-Type", "image/png")]).with_body(png));
        assert_eq!(
            s.body_traits.image,
            Some(Dimensions {
                width: 5,
                height: 7
            })
        );
    }
}
