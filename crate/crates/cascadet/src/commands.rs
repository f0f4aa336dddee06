//! The `run`, `score`, `train` and `ablate` commands.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use cascadet_core::grpo::{
    evaluate_recall, evaluate_reward, supervised_warm_start, synthetic_task, train, StepRecord, ToyVerifierPolicy,
    TrainState,
};
use cascadet_core::metrics::{build_report, AblationTable, StratifiedReport, Tenths};
use cascadet_core::protocol::render_verify_prompt;
use cascadet_core::rewards::{reward_total, RewardBreakdown};
use serde::{Deserialize, Serialize};

use crate::backends::{DetectorBackend, OracleVerifier, PolicyVerifier, ReplayDetector, ReplayVerifier, VerifierBackend};
use crate::config::{sha256_hex, BackendKind, RunConfig};
use crate::dataset::{self, Dataset};
use crate::error::{Error, Result};
use crate::http::{HttpSettings, HttpVerifier};
use crate::output::{create_dir, to_pretty, write_file, write_run, Provenance, RunArtifacts};
use crate::pipeline::{Engine, RunOutcome, ThresholdRule};

pub const DEFAULT_OUT: &str = "cascadet-out";
pub const CHECKPOINT_MAGIC: &str = "cascadet-checkpoint v1";

fn out_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let path = cfg
        .dataset
        .as_deref()
        .ok_or_else(|| Error::Config("no dataset given (use --dataset or set `dataset` in the config)".into()))?;
    if !path.exists() {
        return Err(Error::Config(format!("dataset {} does not exist", path.display())));
    }
    dataset::load(path)
}

fn file_sha(path: &Path) -> Result<String> {
    std::fs::read(path).map(|b| sha256_hex(&b)).map_err(|e| Error::io(path, e))
}

/// Detector and verifier built from the backend section.
pub struct Backends {
    pub detector: Box<dyn DetectorBackend>,
    pub verifier: Box<dyn VerifierBackend>,
    /// Checksums of the fixture files, for provenance.
    pub inputs: BTreeMap<String, String>,
}

impl Backends {
    pub fn build(cfg: &RunConfig, data: &Dataset) -> Result<Self> {
        let b = &cfg.backend;
        let mut inputs = BTreeMap::new();
        let det_path = b
            .detector_fixture
            .as_deref()
            .ok_or_else(|| Error::Config("backend.detector_fixture is required".into()))?;
        let detector = ReplayDetector::load(det_path, Some(data))?;
        inputs.insert("detector_fixture".into(), file_sha(det_path)?);
        let verifier: Box<dyn VerifierBackend> = match b.kind {
            BackendKind::Replay => {
                let path = b
                    .verifier_fixture
                    .as_deref()
                    .ok_or_else(|| Error::Config("backend.verifier_fixture is required for the replay backend".into()))?;
                inputs.insert("verifier_fixture".into(), file_sha(path)?);
                Box::new(ReplayVerifier::load(path, Some(data))?)
            }
            BackendKind::Http => Box::new(HttpVerifier::new(HttpSettings::from_config(b))),
            BackendKind::Oracle => Box::new(OracleVerifier { tau_iou: cfg.tau_iou }),
        };
        Ok(Self {
            detector: Box::new(detector),
            verifier,
            inputs,
        })
    }
}

fn provenance(command: &str, cfg: &RunConfig, data: Option<&Dataset>, inputs: &BTreeMap<String, String>) -> Result<Provenance> {
    let mut p = Provenance::new(command, cfg.config_hash()?, cfg.seed);
    if let Some(d) = data {
        p.inputs.insert("dataset".into(), d.sha256.clone());
    }
    p.inputs.extend(inputs.iter().map(|(k, v)| (k.clone(), v.clone())));
    Ok(p)
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub outcome: RunOutcome,
    pub report: StratifiedReport,
    pub artifacts: RunArtifacts,
}

impl RunSummary {
    pub fn failed(&self) -> bool {
        !self.outcome.failures.is_empty()
    }
}

/// Runs the cascade with adaptive thresholds over the dataset and writes
/// the audit log, reports and plot data.
pub fn cmd_run(cfg: &RunConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let data = load_dataset(cfg)?;
    let backends = Backends::build(cfg, &data)?;
    let engine = Engine {
        detector: backends.detector.as_ref(),
        verifier: Some(backends.verifier.as_ref()),
        threshold: ThresholdRule::Adaptive(cfg.controller()?),
        stage2: cfg.stage2()?,
        tau_iou: cfg.tau_iou,
        prompt: render_verify_prompt(&cfg.class_name)?,
    };
    let outcome = engine.run(&data.frames, cfg.workers)?;
    let report = build_report(&outcome.results, cfg.tau_iou, &[]);
    let prov = provenance("run", cfg, Some(&data), &backends.inputs)?;
    let artifacts = write_run(&out_dir(cfg), &prov, &outcome, report.clone())?;
    Ok(RunSummary {
        outcome,
        report,
        artifacts,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Fixed threshold, no verification.
    DetectorOnly,
    /// Fixed threshold at `tau_high` with verification.
    Fixed,
    /// Quality-adaptive threshold with verification.
    Adaptive,
    /// Adaptive threshold with the trained toy policy deciding on top of
    /// the configured verifier.
    AdaptiveGrpo,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::DetectorOnly, Variant::Fixed, Variant::Adaptive, Variant::AdaptiveGrpo];

    pub fn name(self) -> &'static str {
        match self {
            Variant::DetectorOnly => "detector-only",
            Variant::Fixed => "fixed",
            Variant::Adaptive => "adaptive",
            Variant::AdaptiveGrpo => "adaptive-grpo",
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?} (expected detector-only, fixed, adaptive or adaptive-grpo)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantRow {
    pub variant: Variant,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<StratifiedReport>,
    pub failed_frames: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub provenance: Provenance,
    pub rows: Vec<VariantRow>,
    /// Precision / recall / recall-gain table over the variants that ran.
    pub table: AblationTable,
}

impl AblationSummary {
    pub fn failed(&self) -> bool {
        self.rows.iter().any(|r| r.error.is_some() || r.failed_frames > 0)
    }
}

fn run_variant(
    cfg: &RunConfig,
    data: &Dataset,
    backends: &Backends,
    variant: Variant,
    policy: Option<&ToyVerifierPolicy>,
) -> Result<RunOutcome> {
    let controller = cfg.controller()?;
    let fixed = ThresholdRule::Fixed {
        tau: controller.policy.tau_high(),
        controller,
    };
    let wrapped;
    let verifier: Option<&dyn VerifierBackend> = match variant {
        Variant::DetectorOnly => None,
        Variant::Fixed | Variant::Adaptive => Some(backends.verifier.as_ref()),
        Variant::AdaptiveGrpo => {
            let policy = policy.ok_or_else(|| Error::Other("no trained policy available".into()))?;
            wrapped = PolicyVerifier {
                base: backends.verifier.as_ref(),
                policy: policy.clone(),
            };
            Some(&wrapped)
        }
    };
    let engine = Engine {
        detector: backends.detector.as_ref(),
        verifier,
        threshold: match variant {
            Variant::DetectorOnly | Variant::Fixed => fixed,
            Variant::Adaptive | Variant::AdaptiveGrpo => ThresholdRule::Adaptive(controller),
        },
        stage2: cfg.stage2()?,
        tau_iou: cfg.tau_iou,
        prompt: render_verify_prompt(&cfg.class_name)?,
    };
    engine.run(&data.frames, cfg.workers)
}

/// Runs each variant on the same dataset and backends. The first variant
/// is the baseline for the recall-gain column. Per-variant artifacts go to
/// `<out>/<variant>/`.
pub fn cmd_ablate(cfg: &RunConfig, variants: &[Variant], policy: Option<ToyVerifierPolicy>) -> Result<AblationSummary> {
    if variants.len() < 2 {
        return Err(Error::Config("ablation needs at least two variants, baseline first".into()));
    }
    cfg.validate()?;
    let data = load_dataset(cfg)?;
    let backends = Backends::build(cfg, &data)?;
    let prov = provenance("ablate", cfg, Some(&data), &backends.inputs)?;
    let out = out_dir(cfg);
    create_dir(&out)?;

    let policy = match policy {
        Some(p) => Some(p),
        None if variants.contains(&Variant::AdaptiveGrpo) => Some(train_policy(cfg)?.0.policy),
        None => None,
    };

    let mut rows = Vec::new();
    let mut baseline: Option<Tenths> = None;
    for &v in variants {
        let row = match run_variant(cfg, &data, &backends, v, policy.as_ref()) {
            Ok(outcome) => {
                let refs: Vec<(String, Tenths)> = baseline
                    .map(|b| (variants[0].name().to_string(), b))
                    .into_iter()
                    .collect();
                let report = build_report(&outcome.results, cfg.tau_iou, &refs);
                baseline.get_or_insert(report.overall.recall_pct);
                let mut vp = prov.clone();
                vp.command = format!("ablate:{}", v.name());
                write_run(&out.join(v.name()), &vp, &outcome, report.clone())?;
                VariantRow {
                    variant: v,
                    failed_frames: outcome.failures.len(),
                    report: Some(report),
                    error: None,
                }
            }
            Err(e) => VariantRow {
                variant: v,
                report: None,
                failed_frames: 0,
                error: Some(e.to_string()),
            },
        };
        rows.push(row);
    }

    let reports: Vec<(String, StratifiedReport)> = rows
        .iter()
        .filter_map(|r| r.report.clone().map(|rep| (r.variant.name().to_string(), rep)))
        .collect();
    let summary = AblationSummary {
        provenance: prov,
        table: AblationTable::from_reports(&reports),
        rows,
    };
    write_file(&out.join("ablation.json"), &(to_pretty(&summary) + "\n"))?;
    write_file(&out.join("ablation.txt"), &ablation_text(&summary))?;
    write_file(&out.join("ablation.csv"), &ablation_csv(&summary))?;
    Ok(summary)
}

pub fn ablation_text(s: &AblationSummary) -> String {
    let mut t = format!("# {}\n{}", s.provenance.line(), s.table);
    for r in &s.rows {
        if let Some(e) = &r.error {
            let _ = writeln!(t, "{} failed: {e}", r.variant.name());
        } else if r.failed_frames > 0 {
            let _ = writeln!(t, "{}: {} frame(s) failed", r.variant.name(), r.failed_frames);
        }
    }
    t
}

pub fn ablation_csv(s: &AblationSummary) -> String {
    let mut t = format!("# {}\nconfiguration,precision,recall,delta_recall\n", s.provenance.line());
    for r in &s.table.rows {
        let delta = r.delta_recall.map(|d| d.signed().to_string()).unwrap_or_default();
        let _ = writeln!(t, "{},{},{},{delta}", r.name, r.precision, r.recall);
    }
    t
}

/// One scored response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub line: usize,
    pub frame_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub breakdown: Option<RewardBreakdown>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardMeans {
    pub count: usize,
    pub r_iou: f64,
    pub r_conf: f64,
    pub r_format: f64,
    pub r_total: f64,
}

impl RewardMeans {
    fn of<'a>(items: impl IntoIterator<Item = &'a RewardBreakdown>) -> Self {
        let mut m = RewardMeans::default();
        for b in items {
            m.count += 1;
            m.r_iou += b.r_iou;
            m.r_conf += b.r_conf;
            m.r_format += b.r_format;
            m.r_total += b.r_total;
        }
        if m.count > 0 {
            let n = m.count as f64;
            m.r_iou /= n;
            m.r_conf /= n;
            m.r_format /= n;
            m.r_total /= n;
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub provenance: Provenance,
    pub records: usize,
    /// Records that could not be tied to an annotated frame.
    pub unscored: usize,
    pub overall: RewardMeans,
    pub per_condition: BTreeMap<String, RewardMeans>,
    pub per_tag: BTreeMap<String, RewardMeans>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ResponseLine {
    frame_id: String,
    raw_response: String,
}

/// Scores model responses against the dataset's annotations.
///
/// Each non-blank line is `{"frame_id": ..., "raw_response": ...}`. A
/// response that breaks the answer grammar scores with `r_format = 0`; a
/// line that is not a valid record or names an unknown frame is reported
/// with an error and left out of the means. Nothing aborts the batch.
pub fn cmd_score(cfg: &RunConfig, responses: &Path) -> Result<ScoreSummary> {
    cfg.validate()?;
    let weights = cfg.reward_weights()?;
    let data = load_dataset(cfg)?;
    let frames = data.frame_map();
    let text = crate::error::read_to_string(responses)?;

    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec = match serde_json::from_str::<ResponseLine>(line) {
            Err(e) => ScoreRecord {
                line: i + 1,
                frame_id: None,
                breakdown: None,
                error: Some(format!("not a response record: {e}")),
            },
            Ok(r) => match frames.get(r.frame_id.as_str()) {
                None => ScoreRecord {
                    line: i + 1,
                    frame_id: Some(r.frame_id.clone()),
                    breakdown: None,
                    error: Some(format!("frame {:?} is not in the dataset", r.frame_id)),
                },
                Some(f) => ScoreRecord {
                    line: i + 1,
                    breakdown: Some(reward_total(
                        &r.raw_response,
                        &f.ground_truths,
                        f.image_width,
                        f.image_height,
                        &weights,
                    )),
                    frame_id: Some(r.frame_id),
                    error: None,
                },
            },
        };
        records.push(rec);
    }

    let mut by_condition: BTreeMap<String, Vec<&RewardBreakdown>> = BTreeMap::new();
    let mut by_tag: BTreeMap<String, Vec<&RewardBreakdown>> = BTreeMap::new();
    for r in &records {
        let (Some(b), Some(id)) = (&r.breakdown, &r.frame_id) else { continue };
        let f = frames[id.as_str()];
        by_condition.entry(f.condition.as_str().to_string()).or_default().push(b);
        for t in &f.degradation_tags {
            by_tag.entry(t.clone()).or_default().push(b);
        }
    }

    let mut inputs = BTreeMap::new();
    inputs.insert("responses".to_string(), sha256_hex(text.as_bytes()));
    let prov = provenance("score", cfg, Some(&data), &inputs)?;
    let summary = ScoreSummary {
        records: records.len(),
        unscored: records.iter().filter(|r| r.breakdown.is_none()).count(),
        overall: RewardMeans::of(records.iter().filter_map(|r| r.breakdown.as_ref())),
        per_condition: by_condition.into_iter().map(|(k, v)| (k, RewardMeans::of(v))).collect(),
        per_tag: by_tag.into_iter().map(|(k, v)| (k, RewardMeans::of(v))).collect(),
        provenance: prov,
    };

    let out = out_dir(cfg);
    create_dir(&out)?;
    let mut jsonl = summary.provenance.header_json();
    jsonl.push('\n');
    for r in &records {
        jsonl.push_str(&serde_json::to_string(r).expect("score records serialize"));
        jsonl.push('\n');
    }
    write_file(&out.join("rewards.jsonl"), &jsonl)?;
    write_file(&out.join("score_summary.json"), &(to_pretty(&summary) + "\n"))?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config_hash: String,
    pub seed: u64,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn render(&self) -> String {
        format!("{CHECKPOINT_MAGIC}\n{}\n", serde_json::to_string(self).expect("checkpoints serialize"))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let body = text
            .strip_prefix(CHECKPOINT_MAGIC)
            .and_then(|r| r.strip_prefix('\n'))
            .ok_or_else(|| Error::Checkpoint(format!("missing {CHECKPOINT_MAGIC:?} header")))?;
        let cp: Checkpoint = serde_json::from_str(body).map_err(|e| Error::Checkpoint(e.to_string()))?;
        ToyVerifierPolicy::new(cp.state.policy.theta.clone())?;
        Ok(cp)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&crate::error::read_to_string(path)?)
    }
}

/// Trains the toy verifier policy from scratch with the config's schedule
/// and seed. Returns the final state and the step records.
pub fn train_policy(cfg: &RunConfig) -> Result<(TrainState, Vec<StepRecord>)> {
    let schedule = cfg.train.schedule()?;
    let weights = cfg.reward_weights()?;
    let inputs = synthetic_task(cfg.train.inputs, cfg.train.task_seed);
    let mut state = TrainState::new(ToyVerifierPolicy::default(), &schedule);
    if cfg.train.warm_start_epochs > 0 {
        supervised_warm_start(&mut state.policy, &inputs, cfg.train.warm_start_epochs, cfg.train.warm_start_lr);
    }
    let records =
        train(&mut state, &inputs, &schedule, &weights, cfg.seed).map_err(|f| Error::Other(format!("training failed: {}", f.error)))?;
    Ok((state, records))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub provenance: Provenance,
    /// Step number of the first step run by this invocation.
    pub first_step: u64,
    pub steps_run: u64,
    /// Mean reward over the first and last (up to) 20 steps of this run.
    pub start_reward: f64,
    pub final_reward: f64,
    /// Mean reward of every consecutive 20-step window.
    pub window_means: Vec<f64>,
    pub final_difficulty: f64,
    pub heldout_recall: f64,
    pub heldout_reward: f64,
}

const WINDOW: usize = 20;

fn mean_reward(records: &[StepRecord]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    records.iter().map(|r| r.mean_reward).sum::<f64>() / records.len() as f64
}

/// Runs `train.steps` steps of toy GRPO training, from scratch or from a
/// checkpoint. Writes `train.jsonl` (one record per step), `checkpoint.txt`
/// and `train_summary.json`. On a numeric failure the last good state is
/// still checkpointed before the error is returned.
pub fn cmd_train(cfg: &RunConfig, resume: Option<&Path>) -> Result<TrainSummary> {
    cfg.validate()?;
    let schedule = cfg.train.schedule()?;
    let weights = cfg.reward_weights()?;
    let inputs = synthetic_task(cfg.train.inputs, cfg.train.task_seed);
    let heldout = synthetic_task(cfg.train.heldout, cfg.train.task_seed.wrapping_add(1));
    let config_hash = cfg.config_hash()?;

    let mut inputs_sha = BTreeMap::new();
    let mut state = match resume {
        Some(path) => {
            let cp = Checkpoint::load(path)?;
            if cp.config_hash != config_hash || cp.seed != cfg.seed {
                log::warn!("checkpoint was written under a different config or seed");
            }
            inputs_sha.insert("checkpoint".to_string(), file_sha(path)?);
            cp.state
        }
        None => {
            let mut s = TrainState::new(ToyVerifierPolicy::default(), &schedule);
            if cfg.train.warm_start_epochs > 0 {
                supervised_warm_start(&mut s.policy, &inputs, cfg.train.warm_start_epochs, cfg.train.warm_start_lr);
            }
            s
        }
    };
    let prov = provenance("train", cfg, None, &inputs_sha)?;
    let out = out_dir(cfg);
    create_dir(&out)?;
    let first_step = state.step;

    let write_records = |records: &[StepRecord]| -> Result<()> {
        let mut s = prov.header_json();
        s.push('\n');
        for r in records {
            s.push_str(&serde_json::to_string(r).expect("step records serialize"));
            s.push('\n');
        }
        write_file(&out.join("train.jsonl"), &s)
    };
    let write_checkpoint = |state: &TrainState| {
        let cp = Checkpoint {
            config_hash: config_hash.clone(),
            seed: cfg.seed,
            state: state.clone(),
        };
        write_file(&out.join("checkpoint.txt"), &cp.render())
    };

    let records = match train(&mut state, &inputs, &schedule, &weights, cfg.seed) {
        Ok(r) => r,
        Err(f) => {
            write_records(&f.records)?;
            write_checkpoint(&f.state)?;
            return Err(Error::Other(format!(
                "training aborted at step {}: {}; last good state written to {}",
                f.state.step,
                f.error,
                out.join("checkpoint.txt").display()
            )));
        }
    };
    write_records(&records)?;
    write_checkpoint(&state)?;

    let summary = TrainSummary {
        provenance: prov,
        first_step,
        steps_run: records.len() as u64,
        start_reward: mean_reward(&records[..records.len().min(WINDOW)]),
        final_reward: mean_reward(&records[records.len().saturating_sub(WINDOW)..]),
        window_means: records.chunks(WINDOW).map(mean_reward).collect(),
        final_difficulty: state.difficulty,
        heldout_recall: evaluate_recall(&state.policy, &heldout, cfg.tau_iou),
        heldout_reward: evaluate_reward(&state.policy, &heldout, &weights),
    };
    write_file(&out.join("train_summary.json"), &(to_pretty(&summary) + "\n"))?;
    Ok(summary)
}
