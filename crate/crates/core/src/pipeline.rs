//! Orchestration of collection, scoring and evaluation into files on disk.
//!
//! Every subcommand writes into one output directory and never touches its
//! inputs. Files are written through a temp file and a rename, and an existing
//! artifact is only replaced when `force` is set. Each run also writes a
//! manifest holding a hash of the effective configuration, the defaults in
//! effect, the backend identity, degraded capabilities and seeds. Manifests
//! contain no timestamps, so a rerun on a deterministic backend reproduces
//! every file byte for byte.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::{
    BackendConfig, BackendIdentity, Client, CollectReport, Degraded, ItemFailure,
};
use crate::detectors::{
    read_score_records, records_to_string, score_traces, DetectorConfig, DetectorId, ScoreRecord,
};
use crate::error::{Error, Result};
use crate::eval::{
    self, bimodality, d_histogram, evaluate_scores, paired_bootstrap_ci, report_table, roc_csv,
    significance_line, sweep_csv, sweep_min_tokens, EvalReport, SeedSummary, SweepRow,
};
use crate::exec::Execution;
use crate::io_util::write_atomic;
use crate::mixture::{make_synthetic_dataset, MixtureSpec};
use crate::toy::ToyWorldConfig;
use crate::trace::{
    dataset_to_string, load_traces, parse_dataset, trace_to_line, ItemRecord, ItemTrace,
};

pub const TRACES_FILE: &str = "traces.jsonl";
pub const FAILURES_FILE: &str = "failures.jsonl";
pub const SCORES_FILE: &str = "scores.jsonl";
pub const REPORT_FILE: &str = "report.jsonl";
pub const TABLE_FILE: &str = "auc_table.txt";
pub const HISTOGRAM_FILE: &str = "histogram.csv";
pub const BIMODALITY_FILE: &str = "bimodality.json";
pub const SEEDS_FILE: &str = "seeds.csv";
pub const SIGNIFICANCE_FILE: &str = "significance.txt";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const DATASET_FILE: &str = "dataset.jsonl";
pub const TOY_SPEC_FILE: &str = "toy_model.json";
pub const WORLD_FILE: &str = "world.json";

/// Default m values for the min-token sweep.
pub const DEFAULT_SWEEP: [usize; 15] = [1, 2, 3, 5, 8, 12, 16, 20, 24, 32, 48, 64, 96, 128, 256];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subcommand {
    Collect,
    Score,
    Eval,
    Pipeline,
    Sweep,
    Simulate,
    ToyInit,
}

impl Subcommand {
    pub fn name(self) -> &'static str {
        match self {
            Subcommand::Collect => "collect",
            Subcommand::Score => "score",
            Subcommand::Eval => "eval",
            Subcommand::Pipeline => "pipeline",
            Subcommand::Sweep => "sweep",
            Subcommand::Simulate => "simulate",
            Subcommand::ToyInit => "toy-init",
        }
    }

    /// `manifest.json` for full pipeline runs, `<name>.manifest.json`
    /// otherwise, so stages sharing a directory keep separate manifests.
    pub fn manifest_file(self) -> String {
        match self {
            Subcommand::Pipeline => "manifest.json".into(),
            other => format!("{}.manifest.json", other.name()),
        }
    }
}

/// Parameters of the `simulate` subcommand.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulateConfig {
    pub contaminated: MixtureSpec,
    pub clean: MixtureSpec,
    pub items: usize,
    pub samples_per_item: usize,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig {
            contaminated: MixtureSpec {
                pi_m: 0.5,
                mu_m: -1.0,
                sigma_m: 0.1,
                mu_u: -3.0,
                sigma_u: 0.1,
            },
            clean: MixtureSpec::drift_only(-3.0, 0.1),
            items: 200,
            samples_per_item: 50,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    /// Input traces for `score`, `eval` and `sweep`; defaults to the output
    /// directory's trace file.
    pub traces: Option<PathBuf>,
    /// Input scores for `eval`; defaults to the output directory's score file.
    pub scores: Option<PathBuf>,
    pub backend: BackendConfig,
    pub detectors: DetectorConfig,
    pub out_dir: PathBuf,
    pub seed: u64,
    /// Seeds for a multi-seed run; empty means just `seed`.
    pub seeds: Vec<u64>,
    pub force: bool,
    pub histogram_bins: usize,
    /// Bootstrap resamples for AUC intervals; 0 disables them.
    pub bootstrap_replicates: usize,
    /// Monte-Carlo replicates for the dip tests; 0 disables them.
    pub dip_replicates: usize,
    pub sweep_ms: Vec<usize>,
    pub simulate: SimulateConfig,
    pub exec: Execution,
}

impl RunConfig {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        RunConfig {
            dataset: None,
            traces: None,
            scores: None,
            backend: BackendConfig::default(),
            detectors: DetectorConfig::default(),
            out_dir: out_dir.into(),
            seed: 0,
            seeds: Vec::new(),
            force: false,
            histogram_bins: 40,
            bootstrap_replicates: 1000,
            dip_replicates: 200,
            sweep_ms: DEFAULT_SWEEP.to_vec(),
            simulate: SimulateConfig::default(),
            exec: Execution::Parallel,
        }
    }

    /// The seeds actually run, first one primary.
    pub fn run_seeds(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            vec![self.seed]
        } else {
            self.seeds.clone()
        }
    }

    fn traces_input(&self) -> PathBuf {
        self.traces
            .clone()
            .unwrap_or_else(|| self.out_dir.join(TRACES_FILE))
    }

    fn scores_input(&self) -> PathBuf {
        self.scores
            .clone()
            .unwrap_or_else(|| self.out_dir.join(SCORES_FILE))
    }
}

/// Per-run seed for the backend's sample seeds: sample `i` of a run with
/// seed `s` gets seed `s * 2^20 + i`.
pub fn seed_base(seed: u64) -> u64 {
    seed << 20
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Success,
    /// Some items failed; everything else was written.
    Partial,
}

impl RunStatus {
    pub fn exit_code(self) -> i32 {
        match self {
            RunStatus::Success => 0,
            RunStatus::Partial => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Defaults {
    pub min_tokens_m: usize,
    pub num_samples: usize,
    pub temperature: f64,
    pub k_percent: f64,
    pub cdd_alpha: f64,
}

/// What a run did, sufficient to repeat it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub subcommand: Subcommand,
    pub status: RunStatus,
    /// SHA-256 of the canonical JSON of `config`.
    pub config_hash: String,
    pub defaults: Defaults,
    pub config: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backend: Option<BackendIdentity>,
    /// Items lacking each capability.
    pub degraded: BTreeMap<Degraded, usize>,
    pub seed: u64,
    pub seeds: Vec<u64>,
    /// SHA-256 of each input file, by role.
    pub inputs: BTreeMap<String, String>,
    pub items: usize,
    pub failed_items: Vec<ItemFailure>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub request_count: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub outputs: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub status: RunStatus,
    pub manifest: Manifest,
    pub report: Option<EvalReport>,
    pub sweep: Option<Vec<SweepRow>>,
    /// Absolute paths of everything written.
    pub written: Vec<PathBuf>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Files staged for one run, written together at the end.
struct Staged {
    out_dir: PathBuf,
    force: bool,
    files: Vec<(String, Vec<u8>)>,
}

impl Staged {
    fn new(cfg: &RunConfig) -> Self {
        Staged {
            out_dir: cfg.out_dir.clone(),
            force: cfg.force,
            files: Vec::new(),
        }
    }

    fn add(&mut self, name: impl Into<String>, bytes: impl Into<Vec<u8>>) {
        self.files.push((name.into(), bytes.into()));
    }

    fn names(&self) -> Vec<String> {
        self.files.iter().map(|f| f.0.clone()).collect()
    }

    /// Refuse before writing anything if a target exists and `force` is off.
    fn check(&self, extra: &[String]) -> Result<()> {
        if self.force {
            return Ok(());
        }
        for name in self.files.iter().map(|f| &f.0).chain(extra) {
            let path = self.out_dir.join(name);
            if path.exists() {
                return Err(Error::WouldOverwrite(path.display().to_string()));
            }
        }
        Ok(())
    }

    fn commit(self) -> Result<Vec<PathBuf>> {
        self.check(&[])?;
        let mut written = Vec::new();
        for (name, bytes) in &self.files {
            let path = self.out_dir.join(name);
            write_atomic(&path, bytes, true)?;
            written.push(path);
        }
        Ok(written)
    }
}

/// Refuse up front when a fixed artifact of this run already exists.
fn precheck(cfg: &RunConfig, names: &[&str], sub: Subcommand) -> Result<()> {
    if cfg.force {
        return Ok(());
    }
    for name in names
        .iter()
        .copied()
        .map(String::from)
        .chain([sub.manifest_file()])
    {
        let path = cfg.out_dir.join(&name);
        if path.exists() {
            return Err(Error::WouldOverwrite(path.display().to_string()));
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct ConfigSnapshot<'a> {
    subcommand: Subcommand,
    backend: Option<&'a BackendConfig>,
    detectors: &'a DetectorConfig,
    seeds: Vec<u64>,
    histogram_bins: usize,
    bootstrap_replicates: usize,
    dip_replicates: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    sweep_ms: Option<&'a [usize]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    simulate: Option<&'a SimulateConfig>,
}

struct ManifestParts {
    backend: Option<BackendIdentity>,
    degraded: BTreeMap<Degraded, usize>,
    inputs: BTreeMap<String, String>,
    items: usize,
    failed_items: Vec<ItemFailure>,
    request_count: Option<u64>,
    error: Option<String>,
}

impl ManifestParts {
    fn empty() -> Self {
        ManifestParts {
            backend: None,
            degraded: BTreeMap::new(),
            inputs: BTreeMap::new(),
            items: 0,
            failed_items: Vec::new(),
            request_count: None,
            error: None,
        }
    }
}

fn backend_for(cfg: &RunConfig, seed: u64) -> BackendConfig {
    let mut b = cfg.backend.clone();
    b.seed_base = Some(seed_base(seed));
    b
}

fn manifest(
    cfg: &RunConfig,
    sub: Subcommand,
    status: RunStatus,
    parts: ManifestParts,
    outputs: Vec<String>,
) -> Manifest {
    let uses_backend = matches!(sub, Subcommand::Collect | Subcommand::Pipeline);
    let backend = uses_backend.then(|| backend_for(cfg, cfg.run_seeds()[0]));
    let snapshot = ConfigSnapshot {
        subcommand: sub,
        backend: backend.as_ref(),
        detectors: &cfg.detectors,
        seeds: cfg.run_seeds(),
        histogram_bins: cfg.histogram_bins,
        bootstrap_replicates: cfg.bootstrap_replicates,
        dip_replicates: cfg.dip_replicates,
        sweep_ms: (sub == Subcommand::Sweep).then_some(cfg.sweep_ms.as_slice()),
        simulate: (sub == Subcommand::Simulate).then_some(&cfg.simulate),
    };
    let config = serde_json::to_value(&snapshot).expect("config snapshot serializes");
    // serde_json maps keep keys sorted, so this text is canonical
    let canonical = serde_json::to_string(&config).expect("value serializes");
    Manifest {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        subcommand: sub,
        status,
        config_hash: sha256_hex(canonical.as_bytes()),
        defaults: Defaults {
            min_tokens_m: cfg.detectors.dvd.min_tokens_m,
            num_samples: cfg.backend.num_samples,
            temperature: cfg.backend.temperature,
            k_percent: cfg.detectors.k_percent,
            cdd_alpha: cfg.detectors.cdd_alpha,
        },
        config,
        backend: parts.backend,
        degraded: parts.degraded,
        seed: cfg.run_seeds()[0],
        seeds: cfg.run_seeds(),
        inputs: parts.inputs,
        items: parts.items,
        failed_items: parts.failed_items,
        request_count: parts.request_count,
        error: parts.error,
        outputs,
    }
}

fn manifest_bytes(m: &Manifest) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(m).expect("manifest serializes");
    s.push('\n');
    s.into_bytes()
}

fn traces_text(traces: &[ItemTrace]) -> Result<String> {
    let mut out = String::new();
    for t in traces {
        out.push_str(&trace_to_line(t)?);
        out.push('\n');
    }
    Ok(out)
}

fn failures_text(failures: &[ItemFailure]) -> String {
    let mut out = String::new();
    for f in failures {
        out.push_str(&serde_json::to_string(f).expect("failure serializes"));
        out.push('\n');
    }
    out
}

fn degraded_counts(report: &CollectReport) -> BTreeMap<Degraded, usize> {
    let mut out = BTreeMap::new();
    for o in &report.outcomes {
        for &d in &o.degraded_fields {
            *out.entry(d).or_insert(0) += 1;
        }
    }
    out
}

/// Score records for `traces`, item-major in trace order.
pub fn score_records(
    traces: &[ItemTrace],
    cfg: &DetectorConfig,
    exec: Execution,
) -> Result<Vec<ScoreRecord>> {
    cfg.validate()?;
    let per_item = cfg.detectors.len();
    let outcomes = score_traces(traces, cfg, exec);
    Ok(outcomes
        .iter()
        .enumerate()
        .map(|(i, o)| ScoreRecord::from_outcome(o, Some(traces[i / per_item].item.label)))
        .collect())
}

fn load_dataset(cfg: &RunConfig, inputs: &mut BTreeMap<String, String>) -> Result<Vec<ItemRecord>> {
    let path = cfg
        .dataset
        .as_ref()
        .ok_or_else(|| Error::Config("--dataset is required".into()))?;
    inputs.insert("dataset".into(), sha256_hex(&read_file(path)?));
    parse_dataset(path)
}

fn load_trace_input(path: &Path, inputs: &mut BTreeMap<String, String>) -> Result<Vec<ItemTrace>> {
    inputs.insert("traces".into(), sha256_hex(&read_file(path)?));
    load_traces(path)
}

struct SeedRun {
    collect: CollectReport,
    traces: Vec<ItemTrace>,
    records: Vec<ScoreRecord>,
    identity: BackendIdentity,
    requests: u64,
}

fn collect_seed(cfg: &RunConfig, items: &[ItemRecord], seed: u64, score: bool) -> Result<SeedRun> {
    let client = Client::connect(backend_for(cfg, seed))?;
    let collect = client.collect_all(items, cfg.exec)?;
    let traces = collect.traces();
    let records = if score {
        score_records(&traces, &cfg.detectors, cfg.exec)?
    } else {
        Vec::new()
    };
    Ok(SeedRun {
        identity: client.identity(),
        requests: client.total_requests(),
        collect,
        traces,
        records,
    })
}

/// Evaluate `records`, adding bootstrap intervals and (when traces are at
/// hand) the D-value histogram and dip tests.
pub fn evaluate_run(
    records: &[ScoreRecord],
    traces: Option<&[ItemTrace]>,
    cfg: &RunConfig,
) -> Result<EvalReport> {
    let mut report = evaluate_scores(records, &DetectorId::ALL)?;
    if cfg.bootstrap_replicates > 0 {
        let cis = paired_bootstrap_ci(
            records,
            cfg.bootstrap_replicates,
            0.95,
            cfg.run_seeds()[0],
            cfg.exec,
        )?;
        for d in &mut report.detectors {
            d.ci = cis.get(&d.detector).copied();
        }
    }
    if let Some(traces) = traces {
        let has_samples = traces.iter().any(|t| !t.samples.is_empty());
        if has_samples && cfg.histogram_bins > 0 {
            report.histogram = Some(d_histogram(traces, &cfg.detectors.dvd, cfg.histogram_bins)?);
        }
        if has_samples && cfg.dip_replicates > 0 {
            report.bimodality = Some(bimodality(
                traces,
                &cfg.detectors.dvd,
                cfg.dip_replicates,
                cfg.run_seeds()[0],
                cfg.exec,
            ));
        }
    }
    Ok(report)
}

fn stage_report(staged: &mut Staged, report: &EvalReport) {
    staged.add(REPORT_FILE, report.to_jsonl());
    staged.add(TABLE_FILE, report_table(report));
    for d in &report.detectors {
        if !d.roc.is_empty() {
            staged.add(format!("roc_{}.csv", d.detector.name()), roc_csv(&d.roc));
        }
    }
    if let Some(h) = &report.histogram {
        staged.add(HISTOGRAM_FILE, eval::histogram_csv(h));
    }
    if let Some(b) = &report.bimodality {
        let mut s = serde_json::to_string_pretty(b).expect("dip tests serialize");
        s.push('\n');
        staged.add(BIMODALITY_FILE, s);
    }
    let seeded: Vec<_> = report
        .detectors
        .iter()
        .filter_map(|d| d.seeds.as_ref().map(|s| (d.detector, s)))
        .collect();
    if !seeded.is_empty() {
        let mut csv = String::from("seed,detector,auc_oriented\n");
        let mut lines = String::new();
        for (det, s) in &seeded {
            for (seed, a) in &s.seeds {
                csv.push_str(&format!("{seed},{},{a}\n", det.name()));
            }
            lines.push_str(&significance_line(*det, s));
            lines.push('\n');
        }
        staged.add(SEEDS_FILE, csv);
        staged.add(SIGNIFICANCE_FILE, lines);
    }
}

fn finish(
    cfg: &RunConfig,
    sub: Subcommand,
    mut staged: Staged,
    status: RunStatus,
    parts: ManifestParts,
) -> Result<(Manifest, Vec<PathBuf>)> {
    let m = manifest(cfg, sub, status, parts, staged.names());
    staged.add(sub.manifest_file(), manifest_bytes(&m));
    let written = staged.commit()?;
    Ok((m, written))
}

fn status_of(failures: &[ItemFailure]) -> RunStatus {
    if failures.is_empty() {
        RunStatus::Success
    } else {
        RunStatus::Partial
    }
}

/// Sample every dataset item and write the trace file.
pub fn run_collect(cfg: &RunConfig) -> Result<RunOutcome> {
    precheck(cfg, &[TRACES_FILE, FAILURES_FILE], Subcommand::Collect)?;
    let mut parts = ManifestParts::empty();
    let items = load_dataset(cfg, &mut parts.inputs)?;
    let run = collect_seed(cfg, &items, cfg.run_seeds()[0], false)?;
    let mut staged = Staged::new(cfg);
    staged.add(TRACES_FILE, traces_text(&run.traces)?);
    staged.add(FAILURES_FILE, failures_text(&run.collect.failures));
    let status = status_of(&run.collect.failures);
    parts.backend = Some(run.identity);
    parts.degraded = degraded_counts(&run.collect);
    parts.items = items.len();
    parts.failed_items = run.collect.failures;
    parts.request_count = Some(run.requests);
    let (manifest, written) = finish(cfg, Subcommand::Collect, staged, status, parts)?;
    Ok(RunOutcome {
        status,
        manifest,
        report: None,
        sweep: None,
        written,
    })
}

/// Score recorded traces. Makes no backend calls.
pub fn run_score(cfg: &RunConfig) -> Result<RunOutcome> {
    precheck(cfg, &[SCORES_FILE], Subcommand::Score)?;
    let mut parts = ManifestParts::empty();
    let traces = load_trace_input(&cfg.traces_input(), &mut parts.inputs)?;
    let records = score_records(&traces, &cfg.detectors, cfg.exec)?;
    let mut staged = Staged::new(cfg);
    staged.add(SCORES_FILE, records_to_string(&records));
    parts.items = traces.len();
    let (manifest, written) = finish(cfg, Subcommand::Score, staged, RunStatus::Success, parts)?;
    Ok(RunOutcome {
        status: RunStatus::Success,
        manifest,
        report: None,
        sweep: None,
        written,
    })
}

/// Evaluate a score file. Traces, when present, add the histogram and dip
/// tests.
pub fn run_eval(cfg: &RunConfig) -> Result<RunOutcome> {
    precheck(cfg, &[REPORT_FILE, TABLE_FILE], Subcommand::Eval)?;
    let mut parts = ManifestParts::empty();
    let scores_path = cfg.scores_input();
    let bytes = read_file(&scores_path)?;
    parts.inputs.insert("scores".into(), sha256_hex(&bytes));
    let records = read_score_records(bytes.as_slice())?;
    let traces_path = cfg.traces_input();
    let traces = if cfg.traces.is_some() || traces_path.exists() {
        Some(load_trace_input(&traces_path, &mut parts.inputs)?)
    } else {
        None
    };
    let report = evaluate_run(&records, traces.as_deref(), cfg)?;
    let mut staged = Staged::new(cfg);
    stage_report(&mut staged, &report);
    parts.items = records
        .iter()
        .map(|r| r.item_id.as_str())
        .collect::<std::collections::BTreeSet<_>>()
        .len();
    let (manifest, written) = finish(cfg, Subcommand::Eval, staged, RunStatus::Success, parts)?;
    Ok(RunOutcome {
        status: RunStatus::Success,
        manifest,
        report: Some(report),
        sweep: None,
        written,
    })
}

/// Collect, score and evaluate, once per seed. Artifacts of the first seed
/// go in the output directory, those of further seeds under `seed-<s>/`.
/// The report carries each detector's oriented AUC across seeds.
///
/// When evaluation fails (for example on single-class data) the traces,
/// scores and manifest are still written before the error is returned.
pub fn run_pipeline(cfg: &RunConfig) -> Result<RunOutcome> {
    precheck(
        cfg,
        &[
            TRACES_FILE,
            FAILURES_FILE,
            SCORES_FILE,
            REPORT_FILE,
            TABLE_FILE,
        ],
        Subcommand::Pipeline,
    )?;
    let mut parts = ManifestParts::empty();
    let items = load_dataset(cfg, &mut parts.inputs)?;
    let seeds = cfg.run_seeds();
    let mut staged = Staged::new(cfg);
    let mut per_seed: Vec<(u64, SeedRun)> = Vec::new();
    for (k, &seed) in seeds.iter().enumerate() {
        let run = collect_seed(cfg, &items, seed, true)?;
        let prefix = if k == 0 {
            String::new()
        } else {
            format!("seed-{seed}/")
        };
        staged.add(format!("{prefix}{TRACES_FILE}"), traces_text(&run.traces)?);
        staged.add(
            format!("{prefix}{FAILURES_FILE}"),
            failures_text(&run.collect.failures),
        );
        staged.add(
            format!("{prefix}{SCORES_FILE}"),
            records_to_string(&run.records),
        );
        per_seed.push((seed, run));
    }
    staged.check(&[])?;

    let primary = &per_seed[0].1;
    let failures: Vec<ItemFailure> = per_seed
        .iter()
        .flat_map(|(_, r)| r.collect.failures.clone())
        .collect();
    let status = status_of(&failures);
    parts.backend = Some(primary.identity.clone());
    parts.degraded = degraded_counts(&primary.collect);
    parts.items = items.len();
    parts.failed_items = failures;
    parts.request_count = Some(per_seed.iter().map(|(_, r)| r.requests).sum());

    let report =
        evaluate_run(&primary.records, Some(&primary.traces), cfg).and_then(|mut report| {
            if per_seed.len() > 1 {
                let mut by_det: BTreeMap<DetectorId, Vec<(u64, f64)>> = BTreeMap::new();
                for (seed, run) in &per_seed {
                    let r = evaluate_scores(&run.records, &DetectorId::ALL)?;
                    for d in r.detectors {
                        if let Some(a) = d.auc_oriented {
                            by_det.entry(d.detector).or_default().push((*seed, a));
                        }
                    }
                }
                for d in &mut report.detectors {
                    if let Some(v) = by_det.remove(&d.detector) {
                        d.seeds = Some(SeedSummary::new(v)?);
                    }
                }
            }
            Ok(report)
        });
    match report {
        Ok(report) => {
            stage_report(&mut staged, &report);
            let (manifest, written) = finish(cfg, Subcommand::Pipeline, staged, status, parts)?;
            Ok(RunOutcome {
                status,
                manifest,
                report: Some(report),
                sweep: None,
                written,
            })
        }
        Err(e) => {
            parts.error = Some(e.to_string());
            finish(cfg, Subcommand::Pipeline, staged, status, parts)?;
            Err(e)
        }
    }
}

/// DVD AUC over `cfg.sweep_ms`, recomputed from recorded traces.
pub fn run_sweep(cfg: &RunConfig) -> Result<RunOutcome> {
    precheck(cfg, &[SWEEP_FILE], Subcommand::Sweep)?;
    let mut parts = ManifestParts::empty();
    let traces = load_trace_input(&cfg.traces_input(), &mut parts.inputs)?;
    let rows = sweep_min_tokens(&traces, &cfg.sweep_ms, &cfg.detectors.dvd, cfg.exec)?;
    let mut staged = Staged::new(cfg);
    staged.add(SWEEP_FILE, sweep_csv(&rows));
    parts.items = traces.len();
    let (manifest, written) = finish(cfg, Subcommand::Sweep, staged, RunStatus::Success, parts)?;
    Ok(RunOutcome {
        status: RunStatus::Success,
        manifest,
        report: None,
        sweep: Some(rows),
        written,
    })
}

/// Synthetic DVD scores from the two-component mixture, evaluated like
/// real ones.
pub fn run_simulate(cfg: &RunConfig) -> Result<RunOutcome> {
    precheck(
        cfg,
        &[SCORES_FILE, REPORT_FILE, TABLE_FILE],
        Subcommand::Simulate,
    )?;
    let sim = &cfg.simulate;
    let records = make_synthetic_dataset(
        &sim.contaminated,
        &sim.clean,
        sim.items,
        sim.samples_per_item,
        cfg.run_seeds()[0],
        cfg.exec,
    )?;
    let report = evaluate_run(&records, None, cfg)?;
    let mut staged = Staged::new(cfg);
    staged.add(SCORES_FILE, records_to_string(&records));
    stage_report(&mut staged, &report);
    let mut parts = ManifestParts::empty();
    parts.items = sim.items;
    let (manifest, written) = finish(cfg, Subcommand::Simulate, staged, RunStatus::Success, parts)?;
    Ok(RunOutcome {
        status: RunStatus::Success,
        manifest,
        report: Some(report),
        sweep: None,
        written,
    })
}

/// Write a labeled toy dataset, its toy model spec and the world parameters.
/// Pass `toy:<out>/toy_model.json` as the backend URL to sample from it.
pub fn toy_init(world: &ToyWorldConfig, out_dir: &Path, force: bool) -> Result<Vec<PathBuf>> {
    let w = world.build()?;
    let cfg = RunConfig {
        force,
        ..RunConfig::new(out_dir)
    };
    precheck(
        &cfg,
        &[DATASET_FILE, TOY_SPEC_FILE, WORLD_FILE],
        Subcommand::ToyInit,
    )?;
    let mut staged = Staged::new(&cfg);
    staged.add(DATASET_FILE, dataset_to_string(&w.items));
    staged.add(TOY_SPEC_FILE, w.spec.to_json_line());
    let mut params = serde_json::to_string_pretty(world).expect("world config serializes");
    params.push('\n');
    staged.add(WORLD_FILE, params);
    staged.commit()
}
