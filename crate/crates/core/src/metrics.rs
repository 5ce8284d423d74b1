//! Per-round timing and score records, experiment summaries, the
//! global-vs-local comparison table and CSV export.
//!
//! Times are kept in seconds (plus exact nanoseconds for the round span);
//! hours appear only in rendered summaries.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{EvalScore, Metric, ParameterVector};

/// One site's share of a round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClientRoundStats {
    /// Training time reported by the site.
    pub train_seconds: f64,
    /// Idle time between the site's submission and the end of the round.
    pub waiting_seconds: f64,
    pub submitted: bool,
    /// Observed time from task broadcast to submission arrival.
    pub elapsed_nanos: u64,
    pub waiting_nanos: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u64,
    pub per_client: BTreeMap<String, ClientRoundStats>,
    /// Broadcast to last accepted submission.
    pub span_nanos: u64,
    pub aggregation_seconds: f64,
    #[serde(default)]
    pub validation_seconds: f64,
    /// Each site's validation score of the global model it trained from.
    #[serde(default)]
    pub global_eval: Option<BTreeMap<String, EvalScore>>,
}

impl RoundRecord {
    pub fn span_seconds(&self) -> f64 {
        self.span_nanos as f64 * 1e-9
    }

    /// Broadcast-to-broadcast duration.
    pub fn duration_seconds(&self) -> f64 {
        self.span_seconds() + self.aggregation_seconds + self.validation_seconds
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Report(format!("round {}: {what}", self.round)));
        if !(self.aggregation_seconds >= 0.0 && self.validation_seconds >= 0.0) {
            return bad("negative aggregation or validation time");
        }
        if self.per_client.values().any(|c| !(c.waiting_seconds >= 0.0 && c.train_seconds >= 0.0)) {
            return bad("negative client time");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub train: f64,
    pub validate: f64,
    pub aggregate: f64,
}

impl Totals {
    pub fn total(&self) -> f64 {
        self.train + self.validate + self.aggregate
    }

    pub fn from_rounds(rounds: &[RoundRecord]) -> Self {
        rounds.iter().fold(Totals::default(), |t, r| Totals {
            train: t.train + r.span_seconds(),
            validate: t.validate + r.validation_seconds,
            aggregate: t.aggregate + r.aggregation_seconds,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Outcome {
    Completed,
    Aborted {
        reason: String,
    },
    /// No progress was possible; the experiment was stopped with a diagnosis.
    Hung {
        diagnosis: String,
    },
}

/// Trained site → validation site → score.
pub type CrossScores = BTreeMap<String, BTreeMap<String, EvalScore>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: serde_json::Value,
    pub outcome: Outcome,
    pub rounds: Vec<RoundRecord>,
    pub totals: Totals,
    pub final_scores: BTreeMap<String, EvalScore>,
    pub global_mean: Option<EvalScore>,
    pub final_global: Option<ParameterVector>,
    /// Locally trained baselines scored on every site, when computed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub local_cross: Option<CrossScores>,
}

impl ExperimentReport {
    pub fn is_complete(&self) -> bool {
        self.outcome == Outcome::Completed
    }

    pub fn total_seconds(&self) -> f64 {
        self.totals.total()
    }

    pub fn sites(&self) -> BTreeSet<String> {
        let mut sites: BTreeSet<String> = self.final_scores.keys().cloned().collect();
        for r in &self.rounds {
            sites.extend(r.per_client.keys().cloned());
        }
        sites
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Report(e.to_string()))?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Report(format!("{}: {e}", path.display())))
    }
}

/// Unweighted mean of per-site means, with the sample standard deviation
/// across sites.
pub fn global_mean(scores: &BTreeMap<String, EvalScore>) -> Result<EvalScore> {
    let first = scores.values().next().ok_or_else(|| Error::Report("no site scores".into()))?;
    if scores.values().any(|s| s.metric != first.metric) {
        return Err(Error::Report("site scores use different metrics".into()));
    }
    let means: Vec<f64> = scores.values().map(|s| s.mean).collect();
    let n = means.len() as f64;
    // Offsets from the first mean keep equal inputs exact.
    let mean = means[0] + means.iter().map(|m| m - means[0]).sum::<f64>() / n;
    let std = if means.len() > 1 {
        (means.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    let mean = if first.metric == Metric::Dice { mean.clamp(0.0, 1.0) } else { mean };
    EvalScore::new(mean, std, first.metric)
}

/// Builds a report from the round records; totals are sums over rounds.
pub fn summarize(
    config: serde_json::Value,
    outcome: Outcome,
    rounds: Vec<RoundRecord>,
    final_scores: BTreeMap<String, EvalScore>,
    final_global: Option<ParameterVector>,
) -> Result<ExperimentReport> {
    if rounds.is_empty() {
        return Err(Error::Report("no round records to summarise".into()));
    }
    for r in &rounds {
        r.validate()?;
    }
    let global_mean = if final_scores.is_empty() { None } else { Some(global_mean(&final_scores)?) };
    Ok(ExperimentReport {
        config,
        outcome,
        totals: Totals::from_rounds(&rounds),
        rounds,
        final_scores,
        global_mean,
        final_global,
        local_cross: None,
    })
}

/// Per-site timing summary across rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteTiming {
    pub site: String,
    pub first_round: f64,
    pub last_round: f64,
    pub avg_round: f64,
    pub avg_waiting: f64,
}

pub fn site_timings(report: &ExperimentReport) -> Vec<SiteTiming> {
    let mut per_site: BTreeMap<&str, Vec<&ClientRoundStats>> = BTreeMap::new();
    for r in &report.rounds {
        for (site, stats) in &r.per_client {
            if stats.submitted {
                per_site.entry(site).or_default().push(stats);
            }
        }
    }
    per_site
        .into_iter()
        .map(|(site, stats)| {
            let n = stats.len() as f64;
            SiteTiming {
                site: site.to_string(),
                first_round: stats[0].train_seconds,
                last_round: stats[stats.len() - 1].train_seconds,
                avg_round: stats.iter().map(|s| s.train_seconds).sum::<f64>() / n,
                avg_waiting: stats.iter().map(|s| s.waiting_seconds).sum::<f64>() / n,
            }
        })
        .collect()
}

/// Signed global-vs-local differences in percentage points,
/// `(local[t][v] − global[v]) × 100`, indexed `[trained][validated]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTable {
    pub sites: Vec<String>,
    pub cells: BTreeMap<String, BTreeMap<String, f64>>,
}

impl LossTable {
    pub fn get(&self, trained: &str, validated: &str) -> Option<f64> {
        self.cells.get(trained)?.get(validated).copied()
    }
}

pub fn compare_global_local(
    global: &BTreeMap<String, f64>,
    local: &BTreeMap<String, BTreeMap<String, f64>>,
) -> Result<LossTable> {
    let sites: BTreeSet<&String> = global.keys().collect();
    if local.keys().collect::<BTreeSet<_>>() != sites {
        return Err(Error::Report(format!(
            "trained sites {:?} differ from global sites {:?}",
            local.keys().collect::<Vec<_>>(),
            sites
        )));
    }
    let mut cells = BTreeMap::new();
    for (trained, row) in local {
        if row.keys().collect::<BTreeSet<_>>() != sites {
            return Err(Error::Report(format!(
                "model trained at {trained} was validated on {:?}, expected {:?}",
                row.keys().collect::<Vec<_>>(),
                sites
            )));
        }
        let diffs = row.iter().map(|(v, score)| (v.clone(), (score - global[v]) * 100.0)).collect();
        cells.insert(trained.clone(), diffs);
    }
    Ok(LossTable { sites: sites.into_iter().cloned().collect(), cells })
}

/// `(total_a − total_b) / total_a × 100`.
pub fn speedup_percent(total_a: f64, total_b: f64) -> Result<f64> {
    if !(total_a.is_finite() && total_a > 0.0 && total_b.is_finite()) {
        return Err(Error::Report(format!("cannot compare totals {total_a} and {total_b}")));
    }
    Ok((total_a - total_b) / total_a * 100.0)
}

pub fn format_percent(points: f64) -> String {
    format!("{points:.2}%")
}

pub const CSV_HEADER: [&str; 6] =
    ["round", "site", "train_seconds", "waiting_seconds", "aggregation_seconds", "submitted"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub round: u64,
    pub site: String,
    pub train_seconds: f64,
    pub waiting_seconds: f64,
    pub aggregation_seconds: f64,
    pub submitted: bool,
}

/// One row per `(round, site)`, rounds ascending and sites sorted.
pub fn export_csv(report: &ExperimentReport, path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path).map_err(csv_err)?;
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for r in &report.rounds {
        for (site, c) in &r.per_client {
            w.serialize(CsvRow {
                round: r.round,
                site: site.clone(),
                train_seconds: c.train_seconds,
                waiting_seconds: c.waiting_seconds,
                aggregation_seconds: r.aggregation_seconds,
                submitted: c.submitted,
            })
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Vec<CsvRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let header: Vec<String> = r.headers().map_err(csv_err)?.iter().map(String::from).collect();
    if header != CSV_HEADER {
        return Err(Error::Report(format!("unexpected CSV header {header:?}")));
    }
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Report(format!("csv: {other:?}")),
    }
}

fn hours(seconds: f64) -> String {
    format!("{:.2} hr", seconds / 3600.0)
}

/// Human-readable summary: totals, per-site timing and final scores.
pub fn render_summary(report: &ExperimentReport) -> String {
    let mut s = String::new();
    let outcome = match &report.outcome {
        Outcome::Completed => "completed".to_string(),
        Outcome::Aborted { reason } => format!("aborted: {reason}"),
        Outcome::Hung { diagnosis } => format!("hung experiment: {diagnosis}"),
    };
    let _ = writeln!(s, "outcome: {outcome}");
    let _ = writeln!(s, "rounds recorded: {}", report.rounds.len());
    let t = &report.totals;
    let _ = writeln!(
        s,
        "total time: {} (training {}, aggregation {}, validation {})",
        hours(t.total()),
        hours(t.train),
        hours(t.aggregate),
        hours(t.validate)
    );
    let _ = writeln!(s, "total seconds: {}", t.total());
    let _ = writeln!(s);
    let _ =
        writeln!(s, "{:<16} {:>12} {:>12} {:>12} {:>12}", "site", "first [s]", "last [s]", "avg [s]", "waiting [s]");
    for st in site_timings(report) {
        let _ = writeln!(
            s,
            "{:<16} {:>12.3} {:>12.3} {:>12.3} {:>12.3}",
            st.site, st.first_round, st.last_round, st.avg_round, st.avg_waiting
        );
    }
    if !report.final_scores.is_empty() {
        let _ = writeln!(s);
        for (site, score) in &report.final_scores {
            let _ = writeln!(s, "{site:<16} {:?} {:.4} ± {:.4}", score.metric, score.mean, score.std);
        }
        if let Some(g) = &report.global_mean {
            let _ = writeln!(s, "{:<16} {:?} {:.4} ± {:.4}", "global mean", g.metric, g.mean, g.std);
        }
    }
    s
}

pub fn render_loss_table(table: &LossTable) -> String {
    let mut s = String::new();
    let _ = write!(s, "{:<16}", "trained/validated");
    for v in &table.sites {
        let _ = write!(s, " {v:>12}");
    }
    let _ = writeln!(s);
    for t in &table.sites {
        let _ = write!(s, "{t:<16}");
        for v in &table.sites {
            let _ = write!(s, " {:>12}", format_percent(table.cells[t][v]));
        }
        let _ = writeln!(s);
    }
    s
}
