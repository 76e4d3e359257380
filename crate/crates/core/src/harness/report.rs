//! Run report rows, summaries and their on-disk form.
//!
//! Summaries are a pure function of the rows ([`summarize_cell`]), so the
//! `report` subcommand and the protocol's `metrics` op recompute exactly what
//! `run` wrote.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Version of the CSV column order and JSON field names in this module.
pub const REPORT_SCHEMA_VERSION: u32 = 1;

pub const REQUESTS_CSV: &str = "requests.csv";
pub const ROUNDS_CSV: &str = "rounds.csv";
pub const SCORES_CSV: &str = "scores.csv";
pub const TIMINGS_CSV: &str = "timings.csv";
pub const SUMMARY_JSON: &str = "summary.json";

/// One generate request. Field order is the CSV column order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RequestRow {
    pub cell: usize,
    pub request_id: u64,
    pub instance: u64,
    pub round: u64,
    pub agent: String,
    pub depth: u64,
    /// The prompt was already requested earlier in the same instance.
    pub revisit: bool,
    pub prompt_len: u64,
    pub output_len: u64,
    pub cache_hit: bool,
    pub replayed_len: u64,
    pub hit_ratio: f64,
    pub forward_passes: u64,
    /// Passes an uncached run of the same output length spends.
    pub baseline_passes: u64,
    pub prefill_passes: u64,
    pub decode_passes: u64,
    pub reprefill_passes: u64,
    /// Scheduler prompt accounting; only the r3a workload records it.
    pub kv_input_tokens: u64,
    pub kv_matched_tokens: u64,
}

impl RequestRow {
    pub fn is_full_hit(&self) -> bool {
        self.output_len > 0 && self.replayed_len == self.output_len
    }

    /// Pass-count speedup over the uncached run; `None` for a full hit.
    pub fn speedup(&self) -> Option<f64> {
        (self.forward_passes > 0).then(|| self.baseline_passes as f64 / self.forward_passes as f64)
    }
}

/// Cumulative scheduler counters after one round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRow {
    pub cell: usize,
    pub round: u64,
    pub eviction: String,
    pub hotspot_hit_rate: f64,
    pub non_hotspot_hit_rate: f64,
    pub evicted_tokens: u64,
    pub evicted_hotspot_tokens: u64,
    pub evicted_non_hotspot_tokens: u64,
    pub resident_tokens: u64,
    pub hotspot_input_tokens: u64,
    pub hotspot_matched_tokens: u64,
    pub non_hotspot_input_tokens: u64,
    pub non_hotspot_matched_tokens: u64,
}

/// Contribution score one agent was given at the end of a round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub cell: usize,
    pub round: u64,
    pub agent: String,
    pub intrinsic: f64,
    pub collaborative: f64,
    pub score: f64,
}

/// Wall time is kept apart so the other files stay byte-reproducible.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub cell: usize,
    pub instance: u64,
    pub wall_ns: u64,
}

/// Coordinates of one experiment cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellMeta {
    pub cell: usize,
    pub workload: String,
    pub policy: String,
    pub eviction: String,
    pub temperature: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    #[serde(flatten)]
    pub meta: CellMeta,
    pub error: Option<String>,
    pub requests: usize,
    /// Revisit requests fully served from the logits cache; left out of
    /// every statistic below.
    pub filtered_full_hits: usize,
    /// Revisit requests that entered the statistics.
    pub measured: usize,
    pub mean_hit_ratio: Option<f64>,
    pub mean_replayed_len: Option<f64>,
    pub mean_speedup: Option<f64>,
    pub p50_speedup: Option<f64>,
    /// Generated tokens per forward pass, the throughput proxy.
    pub mean_tokens_per_pass: Option<f64>,
    pub p50_tokens_per_pass: Option<f64>,
    pub forward_passes: u64,
    pub baseline_passes: u64,
    /// Last round's cumulative scheduler metrics, when the cell has rounds.
    pub hotspot_hit_rate: Option<f64>,
    pub non_hotspot_hit_rate: Option<f64>,
    pub evicted_tokens: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub schema_version: u32,
    pub name: String,
    pub cells: Vec<CellSummary>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunReport {
    pub name: String,
    pub cells: Vec<CellMeta>,
    pub errors: Vec<(usize, String)>,
    pub requests: Vec<RequestRow>,
    pub rounds: Vec<RoundRow>,
    pub scores: Vec<ScoreRow>,
    pub timings: Vec<TimingRow>,
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Median; the lower middle element for even lengths.
fn p50(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    Some(v[(v.len() - 1) / 2])
}

/// Statistics of one cell. Only revisit requests that were not fully served
/// from the cache are measured, for every policy including the baseline.
pub fn summarize_cell(
    meta: &CellMeta,
    error: Option<&str>,
    requests: &[&RequestRow],
    rounds: &[&RoundRow],
) -> CellSummary {
    let revisits: Vec<&RequestRow> = requests.iter().copied().filter(|r| r.revisit).collect();
    let measured: Vec<&RequestRow> = revisits
        .iter()
        .copied()
        .filter(|r| !r.is_full_hit())
        .collect();
    let hit: Vec<f64> = measured.iter().map(|r| r.hit_ratio).collect();
    let replayed: Vec<f64> = measured.iter().map(|r| r.replayed_len as f64).collect();
    let speedup: Vec<f64> = measured.iter().filter_map(|r| r.speedup()).collect();
    let tpp: Vec<f64> = measured
        .iter()
        .filter(|r| r.forward_passes > 0)
        .map(|r| r.output_len as f64 / r.forward_passes as f64)
        .collect();
    let last = rounds.iter().max_by_key(|r| r.round);
    CellSummary {
        meta: meta.clone(),
        error: error.map(str::to_string),
        requests: requests.len(),
        filtered_full_hits: revisits.len() - measured.len(),
        measured: measured.len(),
        mean_hit_ratio: mean(&hit),
        mean_replayed_len: mean(&replayed),
        mean_speedup: mean(&speedup),
        p50_speedup: p50(&speedup),
        mean_tokens_per_pass: mean(&tpp),
        p50_tokens_per_pass: p50(&tpp),
        forward_passes: requests.iter().map(|r| r.forward_passes).sum(),
        baseline_passes: requests.iter().map(|r| r.baseline_passes).sum(),
        hotspot_hit_rate: last.map(|r| r.hotspot_hit_rate),
        non_hotspot_hit_rate: last.map(|r| r.non_hotspot_hit_rate),
        evicted_tokens: last.map(|r| r.evicted_tokens),
    }
}

impl RunReport {
    pub fn cell_requests(&self, cell: usize) -> Vec<&RequestRow> {
        self.requests.iter().filter(|r| r.cell == cell).collect()
    }

    pub fn cell_rounds(&self, cell: usize) -> Vec<&RoundRow> {
        self.rounds.iter().filter(|r| r.cell == cell).collect()
    }

    pub fn error_of(&self, cell: usize) -> Option<&str> {
        self.errors
            .iter()
            .find(|(c, _)| *c == cell)
            .map(|(_, e)| e.as_str())
    }

    pub fn summary(&self) -> ReportSummary {
        ReportSummary {
            schema_version: REPORT_SCHEMA_VERSION,
            name: self.name.clone(),
            cells: self
                .cells
                .iter()
                .map(|m| {
                    summarize_cell(
                        m,
                        self.error_of(m.cell),
                        &self.cell_requests(m.cell),
                        &self.cell_rounds(m.cell),
                    )
                })
                .collect(),
        }
    }

    /// Writes the four CSV files and `summary.json` into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<ReportSummary> {
        fs::create_dir_all(dir)?;
        write_csv(&dir.join(REQUESTS_CSV), &self.requests)?;
        write_csv(&dir.join(ROUNDS_CSV), &self.rounds)?;
        write_csv(&dir.join(SCORES_CSV), &self.scores)?;
        write_csv(&dir.join(TIMINGS_CSV), &self.timings)?;
        let summary = self.summary();
        let json = serde_json::to_string_pretty(&summary)
            .map_err(|e| Error::Internal(format!("summary serialization: {e}")))?;
        fs::write(dir.join(SUMMARY_JSON), json + "\n")?;
        Ok(summary)
    }

    /// Loads a written report. Cell coordinates and errors come from the
    /// stored summary; every statistic is then recomputed from the rows.
    pub fn read_dir(dir: &Path) -> Result<(RunReport, ReportSummary)> {
        let text = fs::read_to_string(dir.join(SUMMARY_JSON))?;
        let stored: ReportSummary = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", SUMMARY_JSON)))?;
        if stored.schema_version != REPORT_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "report schema_version {} is not supported (expected {})",
                stored.schema_version, REPORT_SCHEMA_VERSION
            )));
        }
        let report = RunReport {
            name: stored.name.clone(),
            cells: stored.cells.iter().map(|c| c.meta.clone()).collect(),
            errors: stored
                .cells
                .iter()
                .filter_map(|c| c.error.clone().map(|e| (c.meta.cell, e)))
                .collect(),
            requests: read_csv(&dir.join(REQUESTS_CSV))?,
            rounds: read_csv(&dir.join(ROUNDS_CSV))?,
            scores: read_csv(&dir.join(SCORES_CSV))?,
            timings: read_csv(&dir.join(TIMINGS_CSV))?,
        };
        Ok((report, stored))
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Io(format!("{}: {e}", path.display()))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| csv_err(path, e))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(|e| csv_err(path, e))
}

/// Largest absolute difference between two summaries' statistics, or an
/// error naming the first structural mismatch.
pub fn summary_drift(a: &ReportSummary, b: &ReportSummary) -> Result<f64> {
    if a.cells.len() != b.cells.len() {
        return Err(Error::Runtime(format!(
            "summaries have {} and {} cells",
            a.cells.len(),
            b.cells.len()
        )));
    }
    let mut worst: f64 = 0.0;
    for (x, y) in a.cells.iter().zip(&b.cells) {
        let c = x.meta.cell;
        if x.meta != y.meta || x.requests != y.requests || x.measured != y.measured {
            return Err(Error::Runtime(format!(
                "cell {c}: coordinates or counts differ"
            )));
        }
        if x.forward_passes != y.forward_passes
            || x.baseline_passes != y.baseline_passes
            || x.evicted_tokens != y.evicted_tokens
        {
            return Err(Error::Runtime(format!(
                "cell {c}: pass or eviction totals differ"
            )));
        }
        let pairs = [
            (x.mean_hit_ratio, y.mean_hit_ratio),
            (x.mean_replayed_len, y.mean_replayed_len),
            (x.mean_speedup, y.mean_speedup),
            (x.p50_speedup, y.p50_speedup),
            (x.mean_tokens_per_pass, y.mean_tokens_per_pass),
            (x.p50_tokens_per_pass, y.p50_tokens_per_pass),
            (x.hotspot_hit_rate, y.hotspot_hit_rate),
            (x.non_hotspot_hit_rate, y.non_hotspot_hit_rate),
        ];
        for (p, q) in pairs {
            match (p, q) {
                (Some(p), Some(q)) => worst = worst.max((p - q).abs()),
                (None, None) => {}
                _ => return Err(Error::Runtime(format!("cell {c}: a statistic is missing"))),
            }
        }
    }
    Ok(worst)
}
