use std::collections::BTreeMap;
use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;

use super::PageError;

/// Slots a template may reference. String-valued slots other than
/// `fn_name`, `report_key` and `window_ms` are substituted as JSON literals.
pub const KNOWN_SLOTS: [&str; 11] = [
    "sd_url",
    "fn_name",
    "report_key",
    "window_ms",
    "tag",
    "url_attr",
    "extra_attrs",
    "observable_a",
    "observable_b",
    "params",
    "steps",
];

static SLOT: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\{\{\s*([A-Za-z0-9_.-]+)\s*\}\}").unwrap());

/// Probe templates keyed by `<leak-method>.<inclusion-key>`.
#[derive(Debug, Clone, Default)]
pub struct TemplateSet {
    templates: BTreeMap<String, String>,
}

impl TemplateSet {
    /// Reads every `*.tmpl` file in `dir`; the file stem is the template id.
    pub fn load(dir: &Path) -> Result<Self, PageError> {
        let mut templates = BTreeMap::new();
        let rd = std::fs::read_dir(dir)
            .map_err(|e| PageError::Templates(format!("{}: {e}", dir.display())))?;
        for entry in rd {
            let path = entry
                .map_err(|e| PageError::Templates(e.to_string()))?
                .path();
            if path.extension().and_then(|e| e.to_str()) != Some("tmpl") {
                continue;
            }
            let Some(id) = path.file_stem().and_then(|s| s.to_str()) else {
                continue;
            };
            let text = std::fs::read_to_string(&path)
                .map_err(|e| PageError::Templates(format!("{}: {e}", path.display())))?;
            templates.insert(id.to_string(), text);
        }
        Ok(Self { templates })
    }

    pub fn from_map(templates: BTreeMap<String, String>) -> Self {
        Self { templates }
    }

    pub fn get(&self, id: &str) -> Option<&str> {
        self.templates.get(id).map(String::as_str)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.templates.keys().map(String::as_str)
    }
}

/// Substitutes `{{slot}}` placeholders. Any slot outside [`KNOWN_SLOTS`], or
/// one missing from `values`, is an error.
pub fn render(
    template_id: &str,
    text: &str,
    values: &BTreeMap<&str, String>,
) -> Result<String, PageError> {
    let mut err = None;
    let out = SLOT.replace_all(text, |c: &regex::Captures<'_>| {
        let name = &c[1];
        if !KNOWN_SLOTS.contains(&name) {
            err.get_or_insert(PageError::UnknownSlot {
                template_id: template_id.to_string(),
                slot: name.to_string(),
            });
            return String::new();
        }
        match values.get(name) {
            Some(v) => v.clone(),
            None => {
                err.get_or_insert(PageError::UnboundSlot {
                    template_id: template_id.to_string(),
                    slot: name.to_string(),
                });
                String::new()
            }
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(out.into_owned()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn substitutes_and_rejects() {
        let mut v = BTreeMap::new();
        v.insert("fn_name", "EF_X".to_string());
        assert_eq!(
            render("t", "function {{fn_name}}() {}", &v).unwrap(),
            "function EF_X() {}"
        );
        assert_eq!(render("t", "{{ fn_name }}", &v).unwrap(), "EF_X");
        assert!(matches!(
            render("t", "{{victim_cookie}}", &v),
            Err(PageError::UnknownSlot { slot, .. }) if slot == "victim_cookie"
        ));
        assert!(matches!(
            render("t", "{{sd_url}}", &v),
            Err(PageError::UnboundSlot { .. })
        ));
    }

    #[test]
    fn loads_only_tmpl_files() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("events-fired.object.tmpl"), "x").unwrap();
        std::fs::write(dir.path().join("README"), "y").unwrap();
        let set = TemplateSet::load(dir.path()).unwrap();
        assert_eq!(set.ids().collect::<Vec<_>>(), ["events-fired.object"]);
    }
}
