use std::collections::{BTreeMap, BTreeSet};
use std::thread;
use std::time::{Duration, Instant};

use reqwest::blocking::Client;
use reqwest::redirect::Policy;
use serde::Serialize;
use thiserror::Error;
use tracing::{debug, warn};
use url::Url;

use super::{in_scope, validate_states, Cell, Corpus, StateDefinition};
use crate::response::{Headers, HttpResponse, RedirectHop};
use crate::{BrowserId, StateId};

#[derive(Debug, Clone)]
pub struct CollectConfig {
    pub target_origin: String,
    /// Requests per second across every request the collector sends,
    /// redirect hops and retries included.
    pub pacing: f64,
    pub max_redirect_hops: usize,
    pub retries: usize,
    pub timeout: Duration,
}

impl CollectConfig {
    pub fn new(target_origin: impl Into<String>, pacing: f64) -> Self {
        Self {
            target_origin: target_origin.into(),
            pacing,
            max_redirect_hops: 10,
            retries: 1,
            timeout: Duration::from_secs(30),
        }
    }
}

#[derive(Debug, Error)]
pub enum CollectError {
    #[error("invalid state definitions: {0}")]
    States(String),
    #[error("pacing must be a positive number of requests per second, got {0}")]
    Pacing(f64),
    #[error("cannot build HTTP client: {0}")]
    Client(#[from] reqwest::Error),
    #[error("every fetch failed ({0} cells); is the target reachable?")]
    AllFailed(usize),
    #[error("no URLs to collect")]
    NoUrls,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct StateFetchStats {
    pub fetched: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct CollectStats {
    /// One per cell; retries and hops are counted separately.
    pub cell_requests: usize,
    pub retries: usize,
    pub redirect_hops: usize,
    pub out_of_scope_urls: Vec<String>,
    pub per_state: BTreeMap<StateId, StateFetchStats>,
    pub elapsed: Duration,
}

struct Pacer {
    interval: Duration,
    next: Option<Instant>,
}

impl Pacer {
    fn new(rps: f64) -> Self {
        Self {
            interval: Duration::from_secs_f64(1.0 / rps),
            next: None,
        }
    }

    fn wait(&mut self) {
        let now = Instant::now();
        if let Some(next) = self.next {
            if next > now {
                thread::sleep(next - now);
            }
        }
        let base = self.next.map_or(now, |n| n.max(now));
        self.next = Some(base + self.interval);
    }
}

fn user_agent(browser: BrowserId) -> &'static str {
    match browser {
        BrowserId::Chrome => {
            "Mozilla/5.0 (Windows NT 10.0; Win64; x64) AppleWebKit/537.36 (KHTML, like Gecko) Chrome/120.0.0.0 Safari/537.36"
        }
        BrowserId::Firefox => {
            "Mozilla/5.0 (Windows NT 10.0; Win64; x64; rv:121.0) Gecko/20100101 Firefox/121.0"
        }
        BrowserId::Edge => {
            "Mozilla/5.0 (Windows NT 10.0; Win64; x64) AppleWebKit/537.36 (KHTML, like Gecko) Chrome/120.0.0.0 Safari/537.36 Edg/120.0.0.0"
        }
    }
}

struct Fetcher<'a> {
    client: Client,
    pacer: Pacer,
    config: &'a CollectConfig,
    stats: CollectStats,
}

impl Fetcher<'_> {
    fn send(
        &mut self,
        url: &str,
        browser: BrowserId,
        auth: Option<&BTreeMap<String, String>>,
    ) -> reqwest::Result<(u16, Headers, Vec<u8>)> {
        self.pacer.wait();
        let mut req = self
            .client
            .get(url)
            .header(reqwest::header::USER_AGENT, user_agent(browser));
        for (name, value) in auth.into_iter().flatten() {
            req = req.header(name.as_str(), value.as_str());
        }
        let resp = req.send()?;
        let status = resp.status().as_u16();
        let headers: Headers = resp
            .headers()
            .iter()
            .map(|(n, v)| (n.as_str(), v.to_str().unwrap_or_default()))
            .collect();
        let body = resp.bytes()?.to_vec();
        Ok((status, headers, body))
    }

    fn fetch_cell(&mut self, url: &str, state: &StateDefinition, browser: BrowserId) -> Cell {
        let auth = state.auth_material.as_ref();
        let mut attempt = 0;
        let (status, headers, body) = loop {
            match self.send(url, browser, auth) {
                Ok(r) => break r,
                Err(e) if attempt < self.config.retries => {
                    debug!(%url, error = %e, "retrying");
                    attempt += 1;
                    self.stats.retries += 1;
                }
                Err(e) => return Cell::Failed(e.to_string()),
            }
        };

        let mut resp = HttpResponse {
            url: url.to_string(),
            status,
            headers,
            body,
            final_url: url.to_string(),
            redirect_chain: Vec::new(),
        };
        self.follow_redirects(&mut resp, browser, auth);
        Cell::Response(resp)
    }

    /// Follows Location hops to record the chain; the stored status, headers
    /// and body stay those of the first response. Credentials are only sent
    /// to the target site.
    fn follow_redirects(
        &mut self,
        resp: &mut HttpResponse,
        browser: BrowserId,
        auth: Option<&BTreeMap<String, String>>,
    ) {
        let mut status = resp.status;
        let mut location = resp.headers.first("location").map(str::to_string);
        let mut current = resp.url.clone();
        while (300..400).contains(&status)
            && resp.redirect_chain.len() < self.config.max_redirect_hops
        {
            let Some(next) = location
                .take()
                .and_then(|l| Url::parse(&current).ok()?.join(&l).ok())
            else {
                break;
            };
            let next = next.to_string();
            resp.redirect_chain.push(RedirectHop {
                status,
                location: next.clone(),
            });
            resp.final_url = next.clone();
            let hop_auth =
                auth.filter(|_| in_scope(&next, &self.config.target_origin, &[]).unwrap_or(false));
            self.stats.redirect_hops += 1;
            match self.send(&next, browser, hop_auth) {
                Ok((s, h, _)) => {
                    status = s;
                    location = h.first("location").map(str::to_string);
                    current = next;
                }
                Err(e) => {
                    debug!(url = %next, error = %e, "redirect hop failed");
                    break;
                }
            }
        }
    }
}

/// Fetches every URL once per (state, browser), sequentially and paced.
pub fn collect_live(
    urls: &[String],
    states: &[StateDefinition],
    browsers: &BTreeSet<BrowserId>,
    config: &CollectConfig,
) -> Result<(Corpus, CollectStats), CollectError> {
    validate_states(states).map_err(CollectError::States)?;
    if !(config.pacing > 0.0 && config.pacing.is_finite()) {
        return Err(CollectError::Pacing(config.pacing));
    }
    if urls.is_empty() || browsers.is_empty() || states.is_empty() {
        return Err(CollectError::NoUrls);
    }
    let client = Client::builder()
        .redirect(Policy::none())
        .timeout(config.timeout)
        .build()?;
    let mut fetcher = Fetcher {
        client,
        pacer: Pacer::new(config.pacing),
        config,
        stats: CollectStats::default(),
    };
    let started = Instant::now();

    let mut cells: Vec<(String, StateId, BrowserId, Cell)> = Vec::new();
    for url in urls {
        for state in states {
            for &browser in browsers {
                fetcher.stats.cell_requests += 1;
                let cell = fetcher.fetch_cell(url, state, browser);
                let st = fetcher
                    .stats
                    .per_state
                    .entry(state.state_id.clone())
                    .or_default();
                match &cell {
                    Cell::Response(_) => st.fetched += 1,
                    Cell::Failed(e) => {
                        warn!(%url, state = %state.state_id, %browser, error = %e, "fetch failed");
                        st.failed += 1;
                    }
                }
                cells.push((url.clone(), state.state_id.clone(), browser, cell));
            }
        }
    }
    let total = cells.len();
    if cells
        .iter()
        .all(|(_, _, _, c)| matches!(c, Cell::Failed(_)))
    {
        return Err(CollectError::AllFailed(total));
    }

    let public_states = states
        .iter()
        .map(|s| StateDefinition {
            auth_material: None,
            ..s.clone()
        })
        .collect();
    let mut corpus = Corpus::new(
        config.target_origin.clone(),
        public_states,
        browsers.iter().copied(),
    );
    let mut stats = fetcher.stats;
    for (url, state, browser, cell) in cells {
        let chain: Vec<String> = cell
            .response()
            .map(|r| {
                r.redirect_chain
                    .iter()
                    .map(|h| h.location.clone())
                    .collect()
            })
            .unwrap_or_default();
        if !in_scope(&url, &config.target_origin, &chain).unwrap_or(false) {
            if !stats.out_of_scope_urls.contains(&url) {
                stats.out_of_scope_urls.push(url);
            }
            continue;
        }
        if let Err(e) = corpus.insert(&url, &state, browser, cell) {
            warn!(%url, error = %e, "dropping cell");
        }
    }
    // A URL is in scope as soon as one of its cells reached the target site.
    stats.elapsed = started.elapsed();
    Ok((corpus, stats))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pacer_spaces_requests() {
        let mut p = Pacer::new(20.0);
        let t = Instant::now();
        for _ in 0..5 {
            p.wait();
        }
        assert!(t.elapsed() >= Duration::from_millis(195));
    }

    #[test]
    fn rejects_bad_pacing_and_states() {
        let browsers: BTreeSet<_> = [BrowserId::Chrome].into();
        let states = vec![StateDefinition::new("LO", "")];
        let urls = vec!["http://127.0.0.1:9/".to_string()];
        let cfg = CollectConfig::new("http://127.0.0.1:9", 0.0);
        assert!(matches!(
            collect_live(&urls, &states, &browsers, &cfg),
            Err(CollectError::Pacing(_))
        ));
        let two_baselines = vec![StateDefinition::new("A", ""), StateDefinition::new("B", "")];
        let cfg = CollectConfig::new("http://127.0.0.1:9", 5.0);
        assert!(matches!(
            collect_live(&urls, &two_baselines, &browsers, &cfg),
            Err(CollectError::States(_))
        ));
    }

    #[test]
    fn unreachable_target_is_a_scan_error() {
        let browsers: BTreeSet<_> = [BrowserId::Chrome].into();
        let states = vec![StateDefinition::new("LO", "")];
        // Port 9 (discard) is closed on loopback in test environments.
        let urls = vec!["http://127.0.0.1:9/".to_string()];
        let mut cfg = CollectConfig::new("http://127.0.0.1:9", 100.0);
        cfg.timeout = Duration::from_secs(2);
        assert!(matches!(
            collect_live(&urls, &states, &browsers, &cfg),
            Err(CollectError::AllFailed(1))
        ));
    }
}
