use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::DEFAULT_WINDOW_MS;
use crate::corpus::SdUrlReport;
use crate::kb::{ClassKind, Kb, LeakMethod};
use crate::{BrowserId, StateId};

/// Path of the instrumentation script, relative to the collection pages.
pub const HARNESS_SCRIPT: &str = "harness.js";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollectionPage {
    pub page_id: String,
    pub url: String,
    pub inclusion_method: String,
    pub instrumentation: BTreeSet<LeakMethod>,
    /// One representative per equivalence class, over all browsers.
    pub states: Vec<StateId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollectionPlan {
    pub window_ms: u64,
    pub pages: Vec<CollectionPage>,
    pub states_to_visit: Vec<StateId>,
    pub browsers_to_visit: Vec<BrowserId>,
}

/// One page per (SD-URL, inclusion method) of every dynamic class whose
/// static atoms some distinguishable pair of the URL can still satisfy.
pub fn plan_dynamic_collection(reports: &[SdUrlReport], kb: &Kb) -> CollectionPlan {
    let mut pages: BTreeMap<(String, String), (BTreeSet<LeakMethod>, Vec<StateId>)> =
        BTreeMap::new();
    let mut browsers = BTreeSet::new();
    let mut all_states: Vec<StateId> = Vec::new();

    for report in reports {
        browsers.extend(report.partitions.keys().copied());
        let mut visit: Vec<StateId> = Vec::new();
        for classes in report.partitions.values() {
            for class in classes {
                // Prefer a state already chosen for another browser.
                if !class.iter().any(|s| visit.contains(s)) {
                    visit.push(class[0].clone());
                }
            }
        }

        for class in kb
            .classes()
            .iter()
            .filter(|c| c.kind == ClassKind::Dynamic && !c.deprecated)
        {
            let satisfiable = report.distinguishable_pairs.iter().any(|pair| {
                let (Some(x), Some(y)) = (
                    report.representative_responses.get(&pair.states[0]),
                    report.representative_responses.get(&pair.states[1]),
                ) else {
                    return false;
                };
                let (x, y) = (&x.signature, &y.signature);
                [(x, y), (y, x)].into_iter().any(|(a, b)| {
                    class.pred_a.eval(a, b) != Some(false) && class.pred_b.eval(b, a) != Some(false)
                })
            });
            if !satisfiable {
                continue;
            }
            for m in &class.inclusion_methods {
                let entry = pages
                    .entry((report.url.clone(), m.key()))
                    .or_insert_with(|| (BTreeSet::new(), visit.clone()));
                entry.0.insert(class.leak_method);
            }
        }
        for s in visit {
            if !all_states.contains(&s) {
                all_states.push(s);
            }
        }
    }

    CollectionPlan {
        window_ms: DEFAULT_WINDOW_MS,
        pages: pages
            .into_iter()
            .enumerate()
            .map(
                |(i, ((url, key), (instrumentation, states)))| CollectionPage {
                    page_id: format!("page-{i:03}-{key}"),
                    url,
                    inclusion_method: key,
                    instrumentation,
                    states,
                },
            )
            .collect(),
        states_to_visit: all_states,
        browsers_to_visit: browsers.into_iter().collect(),
    }
}

fn escape_attr(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('"', "&quot;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// A collection page: an empty document that hands its parameters to the
/// harness script.
pub fn render_collection_page(page: &CollectionPage, window_ms: u64) -> String {
    let instrument: Vec<&str> = page.instrumentation.iter().map(|l| l.as_str()).collect();
    format!(
        concat!(
            "<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\">\n<title>{id}</title>\n",
            "<script src=\"{harness}\"></script>\n</head>\n",
            "<body data-page-id=\"{id}\" data-url=\"{url}\" data-inclusion=\"{incl}\" ",
            "data-instrument=\"{instr}\" data-window-ms=\"{win}\" onload=\"harnessMain(document.body.dataset)\">\n",
            "</body>\n</html>\n"
        ),
        id = escape_attr(&page.page_id),
        harness = HARNESS_SCRIPT,
        url = escape_attr(&page.url),
        incl = escape_attr(&page.inclusion_method),
        instr = instrument.join(","),
        win = window_ms,
    )
}

/// Writes `plan.json` and one HTML file per page into `dir`.
pub fn write_plan(plan: &CollectionPlan, dir: &Path) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut json = serde_json::to_string_pretty(plan).expect("plan serializes");
    json.push('\n');
    std::fs::write(dir.join("plan.json"), json)?;
    for p in &plan.pages {
        std::fs::write(
            dir.join(format!("{}.html", p.page_id)),
            render_collection_page(p, plan.window_ms),
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{find_sd_urls, Cell, Corpus, StateDefinition};
    use crate::response::{HttpResponse, NormalizationRules};

    fn corpus(cells: &[(&str, &str, HttpResponse)]) -> Corpus {
        let mut c = Corpus::new(
            "http://t.test",
            vec![
                StateDefinition::new("A", "").with_auth("Cookie", "s=a"),
                StateDefinition::new("B", ""),
            ],
            [BrowserId::Chrome],
        );
        for (url, st, r) in cells {
            c.insert(
                url,
                &StateId::new(*st),
                BrowserId::Chrome,
                Cell::Response(r.clone()),
            )
            .unwrap();
        }
        c
    }

    fn plan_for(cells: &[(&str, &str, HttpResponse)]) -> CollectionPlan {
        let reports = find_sd_urls(&corpus(cells), &NormalizationRules::default());
        plan_dynamic_collection(&reports, &Kb::builtin())
    }

    #[test]
    fn javascript_urls_get_a_script_page() {
        let u = "http://t.test/app.js";
        let js = |b: &str| {
            HttpResponse::new(u, 200)
                .with_header("Content-Type", "text/javascript")
                .with_body(b)
        };
        let plan = plan_for(&[(u, "A", js("var a=1;")), (u, "B", js("var b=2;"))]);
        let script = plan
            .pages
            .iter()
            .find(|p| p.inclusion_method == "script")
            .unwrap();
        assert!(script.instrumentation.contains(&LeakMethod::JsError));
        assert!(script.instrumentation.contains(&LeakMethod::JsObjectRead));
        assert_eq!(script.states.len(), 2);
    }

    #[test]
    fn html_without_xfo_gets_an_iframe_page() {
        let u = "http://t.test/p";
        let h = |b: &str| {
            HttpResponse::new(u, 200)
                .with_header("Content-Type", "text/html")
                .with_body(b)
        };
        let plan = plan_for(&[(u, "A", h("<html>a</html>")), (u, "B", h("<html>b</html>"))]);
        let iframe = plan
            .pages
            .iter()
            .find(|p| p.inclusion_method == "iframe")
            .unwrap();
        assert!(iframe.instrumentation.contains(&LeakMethod::ObjectProperty));
        assert!(iframe.instrumentation.contains(&LeakMethod::Postmessage));
        let html = render_collection_page(iframe, plan.window_ms);
        assert!(html.contains("src=\"harness.js\""));
        assert!(html.contains("data-window-ms=\"6000\""));
    }

    #[test]
    fn nothing_dynamic_to_probe() {
        let u = "http://t.test/x";
        let plan = plan_for(&[
            (u, "A", HttpResponse::new(u, 999).with_body("a")),
            (u, "B", HttpResponse::new(u, 999).with_body("b")),
        ]);
        // Every dynamic class but postMessage needs a standard status code;
        // postMessage carries no static atom, so it alone remains plausible.
        assert!(plan
            .pages
            .iter()
            .all(|p| p.instrumentation == [LeakMethod::Postmessage].into()));
        assert!(plan_dynamic_collection(&[], &Kb::builtin())
            .pages
            .is_empty());
    }
}
