//! Run artifacts. Every file starts with (or embeds) the provenance
//! record: tool version, config hash, seed and input checksums.
//!
//! Report files hold no timing data, so they are byte-identical across
//! worker counts. Timings go to `latency.json` / `latency.csv` and to the
//! `timing` field of audit records.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use cascadet_core::cascade::FrameResult;
use cascadet_core::metrics::{latency_summary, LatencySummary, Stratum, StratifiedReport};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::{FrameFailure, RunOutcome};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    /// Input name to hex SHA-256 of its bytes.
    pub inputs: BTreeMap<String, String>,
}

impl Provenance {
    pub fn new(command: &str, config_hash: String, seed: u64) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config_hash,
            seed,
            inputs: BTreeMap::new(),
        }
    }

    /// One-line form used in text and CSV headers.
    pub fn line(&self) -> String {
        let mut s = format!(
            "{} {} {} config_hash={} seed={}",
            self.tool, self.version, self.command, self.config_hash, self.seed
        );
        for (k, v) in &self.inputs {
            let _ = write!(s, " {k}={v}");
        }
        s
    }

    pub fn header_json(&self) -> String {
        serde_json::json!({ "provenance": self }).to_string()
    }
}

pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

#[derive(Debug, Serialize)]
#[serde(rename_all = "snake_case")]
enum AuditRecord<'a> {
    Frame(&'a FrameResult),
    Failure(&'a FrameFailure),
}

/// JSONL: provenance header, then one record per frame in dataset order.
pub fn audit_log(prov: &Provenance, run: &RunOutcome) -> String {
    let mut s = prov.header_json();
    s.push('\n');
    for slot in &run.order {
        let rec = match *slot {
            Ok(i) => AuditRecord::Frame(&run.results[i]),
            Err(i) => AuditRecord::Failure(&run.failures[i]),
        };
        s.push_str(&serde_json::to_string(&rec).expect("audit records serialize"));
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub provenance: Provenance,
    pub frames: usize,
    pub failed_frames: Vec<FrameFailure>,
    pub warnings: usize,
    pub report: StratifiedReport,
}

fn pct(s: &Stratum) -> [String; 3] {
    let show = |t: cascadet_core::metrics::Tenths, degenerate: bool| {
        if degenerate {
            "n/a".to_string()
        } else {
            t.to_string()
        }
    };
    [
        show(s.precision_pct, s.precision.degenerate),
        show(s.recall_pct, s.recall.degenerate),
        show(s.miou_pct, s.miou.degenerate),
    ]
}

fn strata(r: &StratifiedReport) -> Vec<(String, &Stratum)> {
    let mut rows = vec![("overall".to_string(), &r.overall)];
    rows.extend(r.per_condition.iter().map(|(k, v)| (format!("condition:{k}"), v)));
    rows.extend(r.per_tag.iter().map(|(k, v)| (format!("tag:{k}"), v)));
    rows
}

pub fn report_text(rep: &RunReport) -> String {
    let r = &rep.report;
    let mut s = format!("# {}\n", rep.provenance.line());
    let _ = writeln!(
        s,
        "frames: {} evaluated, {} failed; tau_iou {}",
        rep.frames,
        rep.failed_frames.len(),
        r.tau_iou
    );
    let rows = strata(r);
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max("stratum".len());
    let _ = writeln!(
        s,
        "{:<width$}  {:>6}  {:>5}  {:>5}  {:>5}  {:>9}  {:>6}  {:>6}",
        "stratum", "frames", "TP", "FP", "FN", "precision", "recall", "mIoU"
    );
    for (name, st) in &rows {
        let [p, rc, m] = pct(st);
        let _ = writeln!(
            s,
            "{:<width$}  {:>6}  {:>5}  {:>5}  {:>5}  {:>9}  {:>6}  {:>6}",
            name, st.frames, st.counts.tp, st.counts.fp, st.counts.fn_, p, rc, m
        );
    }
    for (name, d) in &r.deltas {
        let _ = writeln!(s, "recall gain over {name}: {} pp", d.signed());
    }
    for f in &rep.failed_frames {
        let _ = writeln!(s, "failed frame {}: {}", f.frame_id, f.error);
    }
    s
}

/// Per-stratum counts and rates, one row each.
pub fn metrics_csv(rep: &RunReport) -> String {
    let mut s = format!("# {}\n", rep.provenance.line());
    s.push_str("stratum,frames,tp,fp,fn,precision,recall,miou,precision_pct,recall_pct,miou_pct\n");
    for (name, st) in strata(&rep.report) {
        let [p, r, m] = pct(st);
        let _ = writeln!(
            s,
            "{name},{},{},{},{},{},{},{},{p},{r},{m}",
            st.frames, st.counts.tp, st.counts.fp, st.counts.fn_, st.precision.value, st.recall.value, st.miou.value
        );
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub provenance: Provenance,
    pub summary: Option<LatencySummary>,
}

pub fn latency_csv(prov: &Provenance, results: &[FrameResult]) -> String {
    let mut s = format!("# {}\n", prov.line());
    s.push_str("frame_id,candidates,t_preprocess_ms,t_detect_ms,t_verify_ms,t_postprocess_ms,total_ms\n");
    for r in results {
        let t = &r.timing;
        let _ = writeln!(
            s,
            "{},{},{:.3},{:.3},{:.3},{:.3},{:.3}",
            r.frame_id,
            t.t_verify_each.len(),
            t.t_preprocess,
            t.t_detect,
            t.t_verify_each.iter().sum::<f64>(),
            t.t_postprocess,
            t.total()
        );
    }
    s
}

/// Paths of the files written by [`write_run`].
#[derive(Debug, Clone, PartialEq)]
pub struct RunArtifacts {
    pub audit: PathBuf,
    pub report_json: PathBuf,
    pub report_txt: PathBuf,
    pub metrics_csv: PathBuf,
    pub latency_json: PathBuf,
    pub latency_csv: PathBuf,
}

pub fn write_run(dir: &Path, prov: &Provenance, run: &RunOutcome, report: StratifiedReport) -> Result<RunArtifacts> {
    create_dir(dir)?;
    let rep = RunReport {
        provenance: prov.clone(),
        frames: run.results.len(),
        failed_frames: run.failures.clone(),
        warnings: run.results.iter().map(|r| r.warnings.len()).sum(),
        report,
    };
    let a = RunArtifacts {
        audit: dir.join("audit.jsonl"),
        report_json: dir.join("report.json"),
        report_txt: dir.join("report.txt"),
        metrics_csv: dir.join("metrics.csv"),
        latency_json: dir.join("latency.json"),
        latency_csv: dir.join("latency.csv"),
    };
    write_file(&a.audit, &audit_log(prov, run))?;
    write_file(&a.report_json, &(to_pretty(&rep) + "\n"))?;
    write_file(&a.report_txt, &report_text(&rep))?;
    write_file(&a.metrics_csv, &metrics_csv(&rep))?;
    let latency = LatencyReport {
        provenance: prov.clone(),
        summary: latency_summary(&run.results),
    };
    write_file(&a.latency_json, &(to_pretty(&latency) + "\n"))?;
    write_file(&a.latency_csv, &latency_csv(prov, &run.results))?;
    Ok(a)
}

pub fn to_pretty<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("report types serialize")
}
