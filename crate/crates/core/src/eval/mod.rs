//! Evaluation of labeled detector scores: AUC and ROC per detector, D-value
//! histograms, dip tests, multi-seed summaries, bootstrap intervals, and the
//! min-token sweep. Also the plain-text and CSV renderings of those results.

pub mod auc;
pub mod dip;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use auc::{auc, roc_curve, trapezoid_area, RocPoint};
pub use dip::{dip_statistic, dip_test, DipTest};

use crate::detectors::{
    dvd_score, synthetic_difficulties, DetectorId, DvdConfig, Orientation, ScoreRecord,
};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::toy::splitmix64;
use crate::trace::{ItemTrace, Label};

/// `auc` itself when higher scores mean contaminated, else `1 - auc`.
pub fn orient(auc: f64, orientation: Orientation) -> f64 {
    match orientation {
        Orientation::HigherMeansContaminated => auc,
        Orientation::LowerMeansContaminated => 1.0 - auc,
    }
}

/// Available scores of one detector, split by label.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LabeledScores {
    pub contaminated: Vec<f64>,
    pub clean: Vec<f64>,
    pub unavailable: usize,
}

/// Collect `detector`'s scores from `records`. Every record must carry a label.
pub fn labeled_scores(records: &[ScoreRecord], detector: DetectorId) -> Result<LabeledScores> {
    let mut out = LabeledScores::default();
    for r in records.iter().filter(|r| r.detector == detector) {
        let label = r.label.ok_or_else(|| {
            Error::Config(format!("score for item {:?} carries no label", r.item_id))
        })?;
        match (r.value, label) {
            (None, _) => out.unavailable += 1,
            (Some(v), Label::Contaminated) => out.contaminated.push(v),
            (Some(v), Label::Clean) => out.clean.push(v),
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

/// Per-seed AUCs with their mean and sample standard deviation (`n - 1`
/// divisor). `std` is absent for a single seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seeds: Vec<(u64, f64)>,
    pub mean: f64,
    pub std: Option<f64>,
}

impl SeedSummary {
    pub fn new(seeds: Vec<(u64, f64)>) -> Result<Self> {
        if seeds.is_empty() {
            return Err(Error::Config("no seeds to summarize".into()));
        }
        let n = seeds.len() as f64;
        let mean = seeds.iter().map(|s| s.1).sum::<f64>() / n;
        let std = (seeds.len() > 1).then(|| {
            let ss: f64 = seeds.iter().map(|s| (s.1 - mean).powi(2)).sum();
            (ss / (n - 1.0)).sqrt()
        });
        Ok(SeedSummary { seeds, mean, std })
    }

    /// `0.731 ± 0.013`, or just the mean for one seed.
    pub fn display(&self) -> String {
        match self.std {
            Some(s) => format!("{:.3} ± {:.3}", self.mean, s),
            None => format!("{:.3}", self.mean),
        }
    }
}

/// Significance-table line, e.g. `dvd 0.731 ± 0.013`.
pub fn significance_line(detector: DetectorId, summary: &SeedSummary) -> String {
    format!("{} {}", detector.name(), summary.display())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorEval {
    pub detector: DetectorId,
    pub orientation: Orientation,
    /// Raw AUC (reported below 0.5 as is); absent when either class has no
    /// available score.
    pub auc: Option<f64>,
    pub auc_oriented: Option<f64>,
    pub n_contaminated: usize,
    pub n_clean: usize,
    pub n_unavailable: usize,
    pub roc: Vec<RocPoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ci: Option<Interval>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seeds: Option<SeedSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` ascending edges; the last bin is closed on the right.
    pub edges: Vec<f64>,
    pub contaminated: Vec<u64>,
    pub clean: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub detectors: Vec<DetectorEval>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub histogram: Option<Histogram>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bimodality: Option<Bimodality>,
}

impl EvalReport {
    pub fn get(&self, detector: DetectorId) -> Option<&DetectorEval> {
        self.detectors.iter().find(|d| d.detector == detector)
    }

    /// One JSON object per detector, newline terminated.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for d in &self.detectors {
            out.push_str(&serde_json::to_string(d).expect("report line serializes"));
            out.push('\n');
        }
        out
    }
}

/// AUC, ROC and counts for each detector present in `records`, in `order`.
///
/// Fails with degenerate labels when the records as a whole lack either
/// class. A detector whose available scores miss a class gets no AUC.
pub fn evaluate_scores(records: &[ScoreRecord], order: &[DetectorId]) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::NoItems);
    }
    let mut items: BTreeMap<&str, Label> = BTreeMap::new();
    for r in records {
        let label = r.label.ok_or_else(|| {
            Error::Config(format!("score for item {:?} carries no label", r.item_id))
        })?;
        items.insert(&r.item_id, label);
    }
    let n_c = items
        .values()
        .filter(|&&l| l == Label::Contaminated)
        .count();
    let n_cl = items.len() - n_c;
    if n_c == 0 || n_cl == 0 {
        return Err(Error::DegenerateLabels(format!(
            "{n_c} contaminated and {n_cl} clean items"
        )));
    }

    let mut detectors = Vec::new();
    for &det in order {
        if !records.iter().any(|r| r.detector == det) {
            continue;
        }
        let s = labeled_scores(records, det)?;
        let usable = !s.contaminated.is_empty() && !s.clean.is_empty();
        let auc = if usable {
            Some(auc::auc(&s.contaminated, &s.clean)?)
        } else {
            None
        };
        let roc = if usable {
            roc_curve(&s.contaminated, &s.clean)?
        } else {
            Vec::new()
        };
        detectors.push(DetectorEval {
            detector: det,
            orientation: det.orientation(),
            auc,
            auc_oriented: auc.map(|a| orient(a, det.orientation())),
            n_contaminated: s.contaminated.len(),
            n_clean: s.clean.len(),
            n_unavailable: s.unavailable,
            roc,
            ci: None,
            seeds: None,
        });
    }
    Ok(EvalReport {
        detectors,
        histogram: None,
        bimodality: None,
    })
}

/// Per-sample D values of every trace pooled by item label.
pub fn pooled_difficulties(traces: &[ItemTrace], cfg: &DvdConfig) -> (Vec<f64>, Vec<f64>) {
    let mut contaminated = Vec::new();
    let mut clean = Vec::new();
    for t in traces {
        let pool = match t.item.label {
            Label::Contaminated => &mut contaminated,
            Label::Clean => &mut clean,
        };
        pool.extend(synthetic_difficulties(t, cfg).iter().map(|d| d.value));
    }
    (contaminated, clean)
}

/// Equal-width histogram of pooled per-sample D values over their joint
/// range. A constant pool is binned over `[v - 0.5, v + 0.5]`.
pub fn d_histogram(traces: &[ItemTrace], cfg: &DvdConfig, bins: usize) -> Result<Histogram> {
    if bins == 0 {
        return Err(Error::Config("histogram needs at least one bin".into()));
    }
    let (c, n) = pooled_difficulties(traces, cfg);
    histogram(&c, &n, bins)
}

pub fn histogram(contaminated: &[f64], clean: &[f64], bins: usize) -> Result<Histogram> {
    let all = contaminated.iter().chain(clean);
    let lo = all.clone().copied().fold(f64::INFINITY, f64::min);
    let hi = all.copied().fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() || !hi.is_finite() {
        return Err(Error::NoItems);
    }
    let (lo, hi) = if lo == hi {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    };
    let width = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins)
        .map(|i| if i == bins { hi } else { lo + width * i as f64 })
        .collect();
    let bin_of = |x: f64| (((x - lo) / width) as usize).min(bins - 1);
    let mut h = Histogram {
        edges,
        contaminated: vec![0; bins],
        clean: vec![0; bins],
    };
    for &x in contaminated {
        h.contaminated[bin_of(x)] += 1;
    }
    for &x in clean {
        h.clean[bin_of(x)] += 1;
    }
    Ok(h)
}

/// Dip tests of the pooled per-sample D values of each label class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bimodality {
    pub contaminated: Option<DipTest>,
    pub clean: Option<DipTest>,
}

pub fn bimodality(
    traces: &[ItemTrace],
    cfg: &DvdConfig,
    replicates: usize,
    seed: u64,
    exec: Execution,
) -> Bimodality {
    let (c, n) = pooled_difficulties(traces, cfg);
    let test = |xs: &[f64]| (!xs.is_empty()).then(|| dip_test(xs, replicates, seed, exec));
    Bimodality {
        contaminated: test(&c),
        clean: test(&n),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub m: usize,
    pub auc: f64,
    pub auc_oriented: f64,
    pub n_unavailable: usize,
}

/// DVD AUC recomputed for each `m` from the given traces.
pub fn sweep_min_tokens(
    traces: &[ItemTrace],
    ms: &[usize],
    base: &DvdConfig,
    exec: Execution,
) -> Result<Vec<SweepRow>> {
    if ms.contains(&0) {
        return Err(Error::Config("min-token values must be >= 1".into()));
    }
    ms.iter()
        .map(|&m| {
            let cfg = DvdConfig {
                min_tokens_m: m,
                ..*base
            };
            let scored = exec.map(traces, |t| (t.item.label, dvd_score(t, &cfg)));
            let mut s = LabeledScores::default();
            for (label, o) in scored {
                match (o, label) {
                    (Err(_), _) => s.unavailable += 1,
                    (Ok(v), Label::Contaminated) => s.contaminated.push(v.value),
                    (Ok(v), Label::Clean) => s.clean.push(v.value),
                }
            }
            let a = auc::auc(&s.contaminated, &s.clean)?;
            Ok(SweepRow {
                m,
                auc: a,
                auc_oriented: orient(a, DetectorId::Dvd.orientation()),
                n_unavailable: s.unavailable,
            })
        })
        .collect()
}

/// Percentile bootstrap intervals for each detector's oriented AUC.
///
/// Items are resampled with replacement within each label class, and the
/// same resample is applied to every detector, so the intervals are paired.
/// Detectors without an AUC on the full data are skipped.
pub fn paired_bootstrap_ci(
    records: &[ScoreRecord],
    replicates: usize,
    level: f64,
    seed: u64,
    exec: Execution,
) -> Result<BTreeMap<DetectorId, Interval>> {
    if !(0.0 < level && level < 1.0) {
        return Err(Error::Config(format!(
            "confidence level {level} outside (0, 1)"
        )));
    }
    if replicates == 0 {
        return Err(Error::Config(
            "bootstrap needs at least one replicate".into(),
        ));
    }
    // item -> (label, per-detector value)
    let mut table: BTreeMap<&str, (Label, BTreeMap<DetectorId, f64>)> = BTreeMap::new();
    for r in records {
        let label = r.label.ok_or_else(|| {
            Error::Config(format!("score for item {:?} carries no label", r.item_id))
        })?;
        let entry = table.entry(&r.item_id).or_insert((label, BTreeMap::new()));
        if let Some(v) = r.value {
            entry.1.insert(r.detector, v);
        }
    }
    let rows: Vec<&(Label, BTreeMap<DetectorId, f64>)> = table.values().collect();
    let pos: Vec<usize> = (0..rows.len())
        .filter(|&i| rows[i].0 == Label::Contaminated)
        .collect();
    let neg: Vec<usize> = (0..rows.len())
        .filter(|&i| rows[i].0 == Label::Clean)
        .collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::DegenerateLabels(format!(
            "{} contaminated and {} clean items",
            pos.len(),
            neg.len()
        )));
    }
    let mut detectors: Vec<DetectorId> = records.iter().map(|r| r.detector).collect();
    detectors.sort();
    detectors.dedup();

    let oriented_auc = |det: DetectorId, p: &[usize], n: &[usize]| -> Option<f64> {
        let c: Vec<f64> = p
            .iter()
            .filter_map(|&i| rows[i].1.get(&det).copied())
            .collect();
        let k: Vec<f64> = n
            .iter()
            .filter_map(|&i| rows[i].1.get(&det).copied())
            .collect();
        auc::auc(&c, &k).ok().map(|a| orient(a, det.orientation()))
    };

    let draws: Vec<Vec<Option<f64>>> = exec.map_range(replicates, |r| {
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(r as u64 + 1)));
        let p: Vec<usize> = (0..pos.len())
            .map(|_| pos[rng.random_range(0..pos.len())])
            .collect();
        let n: Vec<usize> = (0..neg.len())
            .map(|_| neg[rng.random_range(0..neg.len())])
            .collect();
        detectors.iter().map(|&d| oriented_auc(d, &p, &n)).collect()
    });

    let mut out = BTreeMap::new();
    for (k, &det) in detectors.iter().enumerate() {
        if oriented_auc(det, &pos, &neg).is_none() {
            continue;
        }
        let mut vals: Vec<f64> = draws.iter().filter_map(|d| d[k]).collect();
        if vals.is_empty() {
            continue;
        }
        vals.sort_by(f64::total_cmp);
        let tail = (1.0 - level) / 2.0;
        out.insert(
            det,
            Interval {
                lo: quantile(&vals, tail),
                hi: quantile(&vals, 1.0 - tail),
            },
        );
    }
    Ok(out)
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = q * (sorted.len() - 1) as f64;
    let i = h.floor() as usize;
    let frac = h - i as f64;
    match sorted.get(i + 1) {
        Some(&next) => sorted[i] + frac * (next - sorted[i]),
        None => sorted[i],
    }
}

/// Fixed-width text table, one row per detector and one column per
/// configuration. `cells[c][d]` is the text for column `c`, row `rows[d]`.
pub fn auc_table(rows: &[DetectorId], columns: &[(String, Vec<String>)]) -> String {
    let name_w = rows
        .iter()
        .map(|d| d.name().len())
        .max()
        .unwrap_or(0)
        .max("detector".len());
    let widths: Vec<usize> = columns
        .iter()
        .map(|(h, cells)| {
            cells
                .iter()
                .map(|c| c.chars().count())
                .chain([h.chars().count()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    let _ = write!(out, "{:<name_w$}", "detector");
    for ((h, _), w) in columns.iter().zip(&widths) {
        let _ = write!(out, "  {h:>w$}");
    }
    out.push('\n');
    for (r, det) in rows.iter().enumerate() {
        let _ = write!(out, "{:<name_w$}", det.name());
        for ((_, cells), w) in columns.iter().zip(&widths) {
            let cell = cells.get(r).map(String::as_str).unwrap_or("");
            let _ = write!(out, "  {cell:>w$}");
        }
        out.push('\n');
    }
    out
}

/// Table of raw and oriented AUC (plus bootstrap interval and multi-seed
/// summary where present) for one report.
pub fn report_table(report: &EvalReport) -> String {
    let rows: Vec<DetectorId> = report.detectors.iter().map(|d| d.detector).collect();
    let fmt = |x: Option<f64>| x.map_or_else(|| "n/a".to_string(), |v| format!("{v:.3}"));
    let mut columns = vec![
        (
            "auc".to_string(),
            report.detectors.iter().map(|d| fmt(d.auc)).collect(),
        ),
        (
            "auc_oriented".to_string(),
            report
                .detectors
                .iter()
                .map(|d| fmt(d.auc_oriented))
                .collect(),
        ),
    ];
    if report.detectors.iter().any(|d| d.ci.is_some()) {
        columns.push((
            "ci95".to_string(),
            report
                .detectors
                .iter()
                .map(|d| {
                    d.ci.map_or_else(|| "n/a".into(), |c| format!("[{:.3}, {:.3}]", c.lo, c.hi))
                })
                .collect(),
        ));
    }
    if report.detectors.iter().any(|d| d.seeds.is_some()) {
        columns.push((
            "seeds".to_string(),
            report
                .detectors
                .iter()
                .map(|d| {
                    d.seeds
                        .as_ref()
                        .map_or_else(|| "n/a".into(), SeedSummary::display)
                })
                .collect(),
        ));
    }
    auc_table(&rows, &columns)
}

fn csv_real(x: f64) -> String {
    if x.is_finite() {
        format!("{x}")
    } else if x > 0.0 {
        "inf".into()
    } else if x < 0.0 {
        "-inf".into()
    } else {
        "nan".into()
    }
}

pub fn roc_csv(points: &[RocPoint]) -> String {
    let mut out = String::from("threshold,fpr,tpr\n");
    for p in points {
        let _ = writeln!(out, "{},{},{}", csv_real(p.threshold), p.fpr, p.tpr);
    }
    out
}

pub fn histogram_csv(h: &Histogram) -> String {
    let mut out = String::from("bin_lo,bin_hi,contaminated,clean\n");
    for i in 0..h.contaminated.len() {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            csv_real(h.edges[i]),
            csv_real(h.edges[i + 1]),
            h.contaminated[i],
            h.clean[i]
        );
    }
    out
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("m,auc,auc_oriented,n_unavailable\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            r.m, r.auc, r.auc_oriented, r.n_unavailable
        );
    }
    out
}
