//! Command-line front end. Every stage reads and writes plain files so
//! any stage can be re-run on its own.

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::corpus::{
    collect_live, find_sd_urls, import_har, CollectConfig, Corpus, SdUrlReport, StateDefinition,
};
use crate::dynamic::{
    load_observations, plan_dynamic_collection, write_plan, ObservationIndex, DEFAULT_WINDOW_MS,
};
use crate::kb::Kb;
use crate::page::{
    decision_rule, generate_attack_page, missing_templates, write_bundle, PageOptions, TemplateSet,
};
use crate::response::NormalizationRules;
use crate::select::{
    filter_for_target, identify_vectors, select_vectors, IdentifyOptions, VectorReport,
};
use crate::target::{
    enumerate_responses, scenario_by_name, serve, EnumerationGrid, RateFlip, TargetConfig,
};
use crate::{BrowserId, StateId};

/// Exit status when every (state, browser) pair is covered.
pub const EXIT_FULL_COVER: i32 = 0;
/// Exit status on any error.
pub const EXIT_ERROR: i32 = 1;
/// Exit status when some pairs stay uncovered.
pub const EXIT_PARTIAL_COVER: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "cosi",
    version,
    about = "Cross-origin state inference testing toolkit"
)]
pub struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fetch every URL once per state and browser into a corpus file.
    Collect(CollectArgs),
    /// Add the responses of a HAR archive to a corpus as one state/browser.
    HarImport(HarImportArgs),
    /// Find state-dependent URLs and the attack vectors they allow.
    Scan(ScanArgs),
    /// Write the collection pages for the dynamic attack classes.
    PlanDynamic(PlanArgs),
    /// Select vectors for a target state and write the attack page.
    Genpage(GenpageArgs),
    /// Run the echo test target.
    ServeTarget(ServeArgs),
    /// Check a knowledge base file, and optionally template coverage.
    ValidateKb(ValidateArgs),
    /// List the URLs of a response enumeration grid as JSON lines.
    Enumerate(EnumerateArgs),
}

#[derive(Debug, Args)]
pub struct KbArg {
    /// Knowledge base file; the built-in one when omitted.
    #[arg(long)]
    pub kb: Option<PathBuf>,
}

impl KbArg {
    fn load(&self) -> Result<Kb> {
        match &self.kb {
            Some(p) => Kb::load(p).with_context(|| format!("loading {}", p.display())),
            None => Ok(Kb::builtin()),
        }
    }
}

fn parse_browsers(s: &str) -> Result<BTreeSet<BrowserId>, String> {
    let set: BTreeSet<BrowserId> = s
        .split(',')
        .filter(|p| !p.trim().is_empty())
        .map(str::parse)
        .collect::<Result<_, _>>()?;
    if set.is_empty() {
        return Err("no browsers given".into());
    }
    Ok(set)
}

#[derive(Debug, Args)]
pub struct CollectArgs {
    /// Origin of the site under test, e.g. https://app.example.
    #[arg(long)]
    pub target_origin: String,
    /// JSON list of state definitions.
    #[arg(long)]
    pub states: PathBuf,
    /// File with one URL per line.
    #[arg(long)]
    pub urls: PathBuf,
    #[arg(long, default_value = "chrome,firefox,edge", value_parser = parse_browsers)]
    pub browsers: BTreeSet<BrowserId>,
    /// Requests per second.
    #[arg(long, default_value_t = 1.0)]
    pub pacing: f64,
    /// Output directory; corpus.json is written there.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct HarImportArgs {
    #[arg(long)]
    pub har: PathBuf,
    #[arg(long)]
    pub state: String,
    #[arg(long)]
    pub browser: BrowserId,
    /// Corpus to extend; created when missing (needs --target-origin and --states).
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub target_origin: Option<String>,
    #[arg(long)]
    pub states: Option<PathBuf>,
    #[arg(long, default_value = "chrome,firefox,edge", value_parser = parse_browsers)]
    pub browsers: BTreeSet<BrowserId>,
}

#[derive(Debug, Args)]
pub struct ScanArgs {
    /// Corpus file.
    #[arg(long, alias = "urls")]
    pub corpus: PathBuf,
    #[command(flatten)]
    pub kb: KbArg,
    /// Normalization rules; the built-in rules when omitted.
    #[arg(long)]
    pub rules: Option<PathBuf>,
    /// JSON-lines dynamic observations.
    #[arg(long)]
    pub observations: Option<PathBuf>,
    /// Also match deprecated classes.
    #[arg(long)]
    pub include_deprecated: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    /// sd_urls.json written by `scan`.
    #[arg(long)]
    pub sd_urls: PathBuf,
    #[command(flatten)]
    pub kb: KbArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenpageArgs {
    /// vectors.json written by `scan`.
    #[arg(long)]
    pub vectors: PathBuf,
    #[arg(long)]
    pub target_state: String,
    /// Target browsers; those of the scan when omitted.
    #[arg(long, value_parser = parse_browsers)]
    pub browsers: Option<BTreeSet<BrowserId>>,
    #[command(flatten)]
    pub kb: KbArg,
    /// Directory of `<leak-method>.<inclusion>.tmpl` probe templates.
    #[arg(long)]
    pub templates: PathBuf,
    /// Where the page posts its results.
    #[arg(long)]
    pub exfil: String,
    #[arg(long, default_value_t = DEFAULT_WINDOW_MS)]
    pub window_ms: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Built-in scenario name or scenario file.
    #[arg(long)]
    pub scenario: Option<String>,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub bind: String,
    /// Serve a CAPTCHA page while more than this many requests arrive per window.
    #[arg(long)]
    pub flip_above: Option<usize>,
    #[arg(long, default_value_t = 1000)]
    pub flip_window_ms: u64,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[command(flatten)]
    pub kb: KbArg,
    /// Also check that every (leak method, inclusion method) has a template.
    #[arg(long)]
    pub templates: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EnumerateArgs {
    /// JSON grid: {"sc": [...], "ct": [...], "xcto": [...], "xfo": [...], "cd": [...], "body": [...]}.
    #[arg(long)]
    pub grid: PathBuf,
    /// Base URL of a running test target.
    #[arg(long)]
    pub base: String,
    #[arg(long, default_value_t = 10_000)]
    pub cap: u128,
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    std::fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

fn read_states(path: &Path) -> Result<Vec<StateDefinition>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading states file {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing states file {}", path.display()))
}

fn read_urls(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading URL list {}", path.display()))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect())
}

fn load_rules(path: &Option<PathBuf>) -> Result<NormalizationRules> {
    match path {
        Some(p) => {
            NormalizationRules::load(p).with_context(|| format!("loading rules {}", p.display()))
        }
        None => Ok(NormalizationRules::default()),
    }
}

fn cmd_collect(a: &CollectArgs) -> Result<i32> {
    let states = read_states(&a.states)?;
    let urls = read_urls(&a.urls)?;
    let config = CollectConfig::new(a.target_origin.clone(), a.pacing);
    let (corpus, stats) = collect_live(&urls, &states, &a.browsers, &config)?;
    std::fs::create_dir_all(&a.out)?;
    let path = a.out.join("corpus.json");
    corpus
        .save(&path)
        .with_context(|| format!("writing {}", path.display()))?;
    println!("{:<12} {:>8} {:>8}", "state", "fetched", "failed");
    for (state, s) in &stats.per_state {
        println!("{:<12} {:>8} {:>8}", state.as_str(), s.fetched, s.failed);
    }
    println!(
        "{} entries, {} redirect hops, {} retries, {:.1}s -> {}",
        corpus.len(),
        stats.redirect_hops,
        stats.retries,
        stats.elapsed.as_secs_f64(),
        path.display()
    );
    for u in &stats.out_of_scope_urls {
        println!("out of scope: {u}");
    }
    Ok(EXIT_FULL_COVER)
}

fn cmd_har_import(a: &HarImportArgs) -> Result<i32> {
    let mut corpus = if a.corpus.exists() {
        Corpus::load(&a.corpus)?
    } else {
        let (Some(origin), Some(states)) = (&a.target_origin, &a.states) else {
            bail!(
                "{} does not exist; pass --target-origin and --states to create it",
                a.corpus.display()
            );
        };
        Corpus::new(
            origin.clone(),
            read_states(states)?,
            a.browsers.iter().copied(),
        )
    };
    let text =
        std::fs::read_to_string(&a.har).with_context(|| format!("reading {}", a.har.display()))?;
    let r = import_har(&mut corpus, &text, &StateId::new(&a.state), a.browser)?;
    corpus.save(&a.corpus)?;
    println!(
        "imported {}, duplicates {}, out of scope {} -> {}",
        r.imported,
        r.duplicates,
        r.out_of_scope,
        a.corpus.display()
    );
    Ok(EXIT_FULL_COVER)
}

fn cmd_scan(a: &ScanArgs) -> Result<i32> {
    let corpus = Corpus::load(&a.corpus)
        .with_context(|| format!("loading corpus {}", a.corpus.display()))?;
    let kb = a.kb.load()?;
    let rules = load_rules(&a.rules)?;
    let observations = match &a.observations {
        Some(p) => ObservationIndex::new(load_observations(p)?),
        None => ObservationIndex::default(),
    };
    let reports = find_sd_urls(&corpus, &rules);
    let options = IdentifyOptions {
        include_deprecated: a.include_deprecated,
    };
    let vectors = identify_vectors(&reports, &corpus, &kb, &rules, &observations, &options);

    std::fs::create_dir_all(&a.out)?;
    write_json(&a.out.join("sd_urls.json"), &reports)?;
    std::fs::write(a.out.join("vectors.json"), vectors.to_json())?;

    println!(
        "{} URLs, {} state-dependent",
        corpus.urls().len(),
        reports.len()
    );
    for r in &reports {
        println!("  {}", r.url);
    }
    let mut per_class: BTreeMap<&str, usize> = BTreeMap::new();
    let mut per_pair: BTreeMap<String, usize> = BTreeMap::new();
    for (states, v) in vectors.all_vectors() {
        *per_class.entry(&v.class_name).or_default() += 1;
        *per_pair
            .entry(format!("({}, {})", states[0], states[1]))
            .or_default() += 1;
    }
    println!("{:<28} {:>7}", "class", "vectors");
    for (c, n) in &per_class {
        println!("{c:<28} {n:>7}");
    }
    println!("{:<28} {:>7}", "state pair", "vectors");
    for (p, n) in &per_pair {
        println!("{p:<28} {n:>7}");
    }
    Ok(EXIT_FULL_COVER)
}

fn cmd_plan(a: &PlanArgs) -> Result<i32> {
    let text = std::fs::read_to_string(&a.sd_urls)
        .with_context(|| format!("reading {}", a.sd_urls.display()))?;
    let reports: Vec<SdUrlReport> =
        serde_json::from_str(&text).context("parsing SD-URL reports")?;
    let plan = plan_dynamic_collection(&reports, &a.kb.load()?);
    write_plan(&plan, &a.out)?;
    println!(
        "{} collection pages for {} states and {} browsers -> {}",
        plan.pages.len(),
        plan.states_to_visit.len(),
        plan.browsers_to_visit.len(),
        a.out.display()
    );
    Ok(EXIT_FULL_COVER)
}

fn cmd_genpage(a: &GenpageArgs) -> Result<i32> {
    let report = VectorReport::load(&a.vectors)
        .with_context(|| format!("loading {}", a.vectors.display()))?;
    let kb = a.kb.load()?;
    let target = StateId::new(&a.target_state);
    if !report.states.contains(&target) {
        let known: Vec<&str> = report.states.iter().map(StateId::as_str).collect();
        bail!(
            "target state `{target}` is not one of the scanned states ({})",
            known.join(", ")
        );
    }
    let browsers = a
        .browsers
        .clone()
        .unwrap_or_else(|| report.browsers.clone());
    let vectors = filter_for_target(&report, &kb, &target);
    let selection = select_vectors(&target, &browsers, &report.states, &vectors)?;

    std::fs::create_dir_all(&a.out)?;
    write_json(&a.out.join("selection.json"), &selection)?;
    println!("{:<40} {:<24} {:<10} browsers", "SD-URL", "class", "states");
    for s in &selection.chosen {
        let states: Vec<&str> = s
            .vector
            .distinguished_states
            .iter()
            .map(StateId::as_str)
            .collect();
        let browsers: Vec<&str> = s.vector.browsers.iter().map(|b| b.as_str()).collect();
        println!(
            "{:<40} {:<24} {:<10} {}",
            s.vector.sd_url,
            s.vector.class_name,
            states.join(","),
            browsers.join(",")
        );
    }

    if selection.chosen.is_empty() {
        println!("no vector distinguishes `{target}`; no page written");
    } else {
        let templates = TemplateSet::load(&a.templates)?;
        let opts = PageOptions {
            exfil_url: a.exfil.clone(),
            window_ms: a.window_ms,
        };
        let bundle = generate_attack_page(&selection, &kb, &templates, &opts)?;
        let table = decision_rule(&selection, &kb)?;
        write_bundle(&bundle, &table, &a.out)?;
        println!(
            "{} probes -> {}",
            bundle.vector_manifest.len(),
            a.out.join("attack_page.html").display()
        );
    }

    if selection.is_full_cover() {
        Ok(EXIT_FULL_COVER)
    } else {
        println!("uncovered:");
        for p in &selection.uncovered {
            println!("  {} on {}", p.state, p.browser);
        }
        Ok(EXIT_PARTIAL_COVER)
    }
}

fn cmd_serve(a: &ServeArgs) -> Result<i32> {
    let scenario = a.scenario.as_deref().map(scenario_by_name).transpose()?;
    let config = TargetConfig {
        scenario,
        rate_flip: a.flip_above.map(|n| RateFlip::captcha(n, a.flip_window_ms)),
    };
    let handle = serve(&format!("{}:{}", a.bind, a.port), config)?;
    println!("serving on {}", handle.base_url());
    handle.wait();
    Ok(EXIT_FULL_COVER)
}

fn cmd_validate(a: &ValidateArgs) -> Result<i32> {
    let kb = a.kb.load()?;
    let deprecated = kb.classes().iter().filter(|c| c.deprecated).count();
    println!(
        "{} classes ({} deprecated), checksum {}",
        kb.len(),
        deprecated,
        kb.checksum()
    );
    if let Some(dir) = &a.templates {
        let missing = missing_templates(&kb, &TemplateSet::load(dir)?);
        if !missing.is_empty() {
            for (class, id) in &missing {
                println!("missing template {id} for {class}");
            }
            bail!("{} templates missing", missing.len());
        }
        println!("every class has a template for each inclusion method");
    }
    Ok(EXIT_FULL_COVER)
}

fn cmd_enumerate(a: &EnumerateArgs) -> Result<i32> {
    let text = std::fs::read_to_string(&a.grid)
        .with_context(|| format!("reading {}", a.grid.display()))?;
    let grid: EnumerationGrid = serde_json::from_str(&text).context("parsing grid")?;
    eprintln!("{} specs", grid.size());
    for e in enumerate_responses(&grid, &a.base, a.cap)? {
        println!(
            "{}",
            serde_json::json!({"spec_id": e.spec_id, "url": e.url})
        );
    }
    Ok(EXIT_FULL_COVER)
}

fn init_tracing(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(level));
    let _ = tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .try_init();
}

pub fn execute(cli: &Cli) -> Result<i32> {
    match &cli.command {
        Command::Collect(a) => cmd_collect(a),
        Command::HarImport(a) => cmd_har_import(a),
        Command::Scan(a) => cmd_scan(a),
        Command::PlanDynamic(a) => cmd_plan(a),
        Command::Genpage(a) => cmd_genpage(a),
        Command::ServeTarget(a) => cmd_serve(a),
        Command::ValidateKb(a) => cmd_validate(a),
        Command::Enumerate(a) => cmd_enumerate(a),
    }
}

/// Parses `args` (program name first) and runs the command, returning the
/// process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                EXIT_ERROR
            } else {
                EXIT_FULL_COVER
            };
        }
    };
    init_tracing(cli.verbose);
    match execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_ERROR
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_with_one() {
        assert_eq!(
            run([
                "cosi",
                "collect",
                "--target-origin",
                "http://t.test",
                "--urls",
                "u",
                "--out",
                "o"
            ]),
            EXIT_ERROR
        );
        assert_eq!(run(["cosi", "frobnicate"]), EXIT_ERROR);
        assert_eq!(run(["cosi", "--help"]), EXIT_FULL_COVER);
    }

    #[test]
    fn missing_states_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let urls = dir.path().join("urls.txt");
        std::fs::write(&urls, "http://t.test/\n").unwrap();
        let code = run([
            "cosi".into(),
            "collect".into(),
            "--target-origin".into(),
            "http://t.test".into(),
            "--states".into(),
            dir.path().join("nope.json").into_os_string(),
            "--urls".into(),
            urls.into_os_string(),
            "--out".into(),
            dir.path().as_os_str().to_owned(),
        ]);
        assert_eq!(code, EXIT_ERROR);
    }

    #[test]
    fn browsers_flag() {
        assert_eq!(
            parse_browsers("chrome,edge").unwrap(),
            [BrowserId::Chrome, BrowserId::Edge].into()
        );
        assert!(parse_browsers("safari").is_err());
        assert!(parse_browsers(",").is_err());
    }

    #[test]
    fn validate_builtin_kb() {
        assert_eq!(run(["cosi", "validate-kb"]), EXIT_FULL_COVER);
    }
}
