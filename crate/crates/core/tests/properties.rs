use std::collections::BTreeSet;

use proptest::collection::{btree_set, vec};
use proptest::prelude::*;

use cosi::corpus::{ingest_corpus, Cell, Corpus, StateDefinition};
use cosi::dynamic::jaro;
use cosi::kb::InclusionMethod;
use cosi::response::{normalize, HttpResponse, NormalizationRules};
use cosi::select::{merge_states, select_vectors, AttackVector, CoveragePair};
use cosi::target::{BodyTemplate, EchoBody, EchoSpec};
use cosi::{BrowserId, StateId};

const STATES: [&str; 5] = ["A", "B", "C", "D", "E"];

fn browser() -> impl Strategy<Value = BrowserId> {
    prop::sample::select(BrowserId::ALL.to_vec())
}

fn body_template() -> impl Strategy<Value = BodyTemplate> {
    let seconds = (1u32..=600).prop_map(|t| t as f64 / 10.0);
    prop_oneof![
        Just(BodyTemplate::JsClean),
        (0u32..=64).prop_map(BodyTemplate::JsWithErrors),
        "[A-Za-z0-9_-]{1,12}".prop_map(BodyTemplate::CssRule),
        (0u32..=64).prop_map(BodyTemplate::HtmlFrames),
        vec("[a-z:]{1,6}", 0..4).prop_map(BodyTemplate::HtmlPostmsg),
        (1u32..=4096, 1u32..=4096)
            .prop_map(|(width, height)| BodyTemplate::Image { width, height }),
        seconds
            .clone()
            .prop_map(|seconds| BodyTemplate::Audio { seconds }),
        (1u32..=4096, 1u32..=4096, seconds).prop_map(|(width, height, seconds)| {
            BodyTemplate::Video {
                width,
                height,
                seconds,
            }
        }),
        Just(BodyTemplate::Pdf),
        Just(BodyTemplate::Plain),
    ]
}

fn echo_spec() -> impl Strategy<Value = EchoSpec> {
    let header = ("[A-Za-z][A-Za-z0-9-]{0,15}", "[!-~]([ -~]{0,20}[!-~])?");
    let body = prop_oneof![
        body_template().prop_map(EchoBody::Template),
        vec(any::<u8>(), 0..64).prop_map(EchoBody::Raw),
    ];
    (100u16..=999, vec(header, 0..5), body, 0u64..=10_000).prop_map(
        |(status, headers, body, delay_ms)| EchoSpec {
            status,
            headers,
            body,
            delay_ms,
        },
    )
}

fn response() -> impl Strategy<Value = HttpResponse> {
    let date =
        (1u32..=28, 0u32..24).prop_map(|(d, h)| format!("Mon, {d:02} Jan 2024 {h:02}:00:00 GMT"));
    let token = "[A-Za-z0-9]{16,32}";
    let extra = "[a-z <>/=\"]{0,40}";
    (
        prop::sample::select(vec![200u16, 302, 404]),
        date,
        token,
        extra,
        any::<bool>(),
    )
        .prop_map(|(sc, date, tok, extra, etag)| {
            let mut r = HttpResponse::new("http://t.test/p", sc)
                .with_header("Date", &date)
                .with_header("Content-Type", "text/html");
            if etag {
                r = r.with_header("ETag", &format!("\"{tok}\""));
            }
            r.with_body(format!(
                "<html><input name=\"csrf\" value=\"{tok}\">{extra} at 2024-03-04T05:06:07Z</html>"
            ))
        })
}

fn vector(target: &'static str) -> impl Strategy<Value = AttackVector> {
    (
        prop::sample::select(vec!["http://t.test/a", "http://t.test/b"]),
        prop::sample::select(vec!["EF-XctoObject", "JSError", "CSPViolation"]),
        btree_set(prop::sample::select(STATES.to_vec()), 1..4),
        btree_set(browser(), 1..=3),
    )
        .prop_filter_map(
            "needs a state besides the target",
            move |(url, class, others, browsers)| {
                let others: Vec<&str> = others.into_iter().filter(|s| *s != target).collect();
                if others.is_empty() {
                    return None;
                }
                let browsers: Vec<BrowserId> = browsers.into_iter().collect();
                let object = InclusionMethod::HtmlTag {
                    tag: "object".into(),
                    attr: "data".into(),
                    extra: vec![],
                };
                Some(AttackVector::simple(
                    url, class, target, &others, &browsers, object,
                ))
            },
        )
}

proptest! {
    #[test]
    fn jaro_bounds_and_symmetry(a in "[abcé]{0,12}", b in "[abcé]{0,12}") {
        let ab = jaro(&a, &b);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((ab - jaro(&b, &a)).abs() < 1e-12);
        prop_assert_eq!(jaro(&a, &a), 1.0);
    }

    #[test]
    fn normalize_is_idempotent(r in response()) {
        let rules = NormalizationRules::default();
        let once = normalize(&r, &rules);
        prop_assert_eq!(normalize(&once.to_response(), &rules), once);
    }

    #[test]
    fn body_template_text_round_trips(t in body_template()) {
        let parsed: BodyTemplate = t.to_string().parse().unwrap();
        prop_assert_eq!(parsed, t);
    }

    #[test]
    fn echo_spec_query_and_json_round_trip(s in echo_spec()) {
        let via_query = EchoSpec::from_query(&s.to_query()).unwrap();
        prop_assert_eq!(&via_query, &s);
        let via_json: EchoSpec = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
        prop_assert_eq!(via_json, s);
    }

    #[test]
    fn merging_twice_changes_nothing(vs in vec(vector("A"), 0..12)) {
        let once = merge_states(&vs);
        prop_assert_eq!(merge_states(&once), once.clone());
        let before: BTreeSet<CoveragePair> = vs.iter().flat_map(|v| v.coverage.iter().cloned()).collect();
        let after: BTreeSet<CoveragePair> = once.iter().flat_map(|v| v.coverage.iter().cloned()).collect();
        prop_assert_eq!(before, after);
    }

    #[test]
    fn selection_partitions_the_universe(
        vs in vec(vector("A"), 0..12),
        browsers in btree_set(browser(), 1..=3),
        n_states in 2usize..=5,
    ) {
        let states: Vec<StateId> = STATES[..n_states].iter().map(|s| StateId::new(*s)).collect();
        let target = StateId::new("A");
        let sel = select_vectors(&target, &browsers, &states, &vs).unwrap();
        let universe: BTreeSet<CoveragePair> = states
            .iter()
            .filter(|s| **s != target)
            .flat_map(|s| browsers.iter().map(move |&b| CoveragePair { state: s.clone(), browser: b }))
            .collect();
        let mut union = BTreeSet::new();
        for c in &sel.chosen {
            prop_assert!(!c.covered.is_empty());
            prop_assert!(c.covered.is_disjoint(&union));
            union.extend(c.covered.iter().cloned());
        }
        prop_assert!(union.is_disjoint(&sel.uncovered));
        union.extend(sel.uncovered.iter().cloned());
        prop_assert_eq!(union, universe);
        prop_assert_eq!(select_vectors(&target, &browsers, &states, &vs).unwrap(), sel);
    }

    #[test]
    fn corpus_json_round_trips(
        cells in vec((0usize..3, 0usize..3, browser(), any::<bool>(), 100u16..=599, "[ -~]{0,30}"), 0..20),
    ) {
        let states: Vec<StateDefinition> = STATES[..3].iter().map(|s| StateDefinition::new(s, "")).collect();
        let mut corpus = Corpus::new("http://t.test", states, BrowserId::ALL);
        for (u, s, b, failed, sc, text) in cells {
            let url = format!("http://t.test/p{u}");
            let cell = if failed {
                Cell::Failed(text)
            } else {
                Cell::Response(HttpResponse::new(url.clone(), sc).with_header("Content-Type", "text/plain").with_body(text))
            };
            let _ = corpus.insert(&url, &StateId::new(STATES[s]), b, cell);
        }
        let back = ingest_corpus(&corpus.to_json()).unwrap();
        prop_assert_eq!(back, corpus);
    }
}
