//! Dataset-level detection metrics, stratified reports, Welch's t-test and
//! patient-grouped fold splitting.
//!
//! Percentages are carried as integer tenths of a point ([`Tenths`]) so
//! reported differences are exact at the printed precision.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::ops::{Add, AddAssign};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cascade::FrameResult;
use crate::error::{Error, Result};
use crate::geometry::{detected, greedy_match, BoundingBox, Candidate};
use crate::math::sqrt;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
        }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

/// Counts for one frame. A ground truth is a TP when any final reaches
/// `tau_iou`; a final is an FP when greedy one-to-one matching leaves it
/// without a ground truth, so duplicates of one polyp count as FP.
pub fn frame_counts(finals: &[Candidate], ground_truths: &[BoundingBox], tau_iou: f64) -> ConfusionCounts {
    let tp = ground_truths.iter().filter(|g| detected(g, finals, tau_iou)).count() as u64;
    let fp = greedy_match(finals, ground_truths, tau_iou).unmatched_predictions.len() as u64;
    ConfusionCounts {
        tp,
        fp,
        fn_: ground_truths.len() as u64 - tp,
    }
}

pub fn accumulate(results: &[FrameResult], tau_iou: f64) -> ConfusionCounts {
    results
        .iter()
        .map(|r| frame_counts(&r.finals, &r.ground_truths, tau_iou))
        .fold(ConfusionCounts::default(), Add::add)
}

/// A ratio with a flag marking a zero denominator (value then 0).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Ratio {
    pub value: f64,
    pub degenerate: bool,
}

impl Ratio {
    fn of(num: u64, den: u64) -> Self {
        if den == 0 {
            Self {
                value: 0.0,
                degenerate: true,
            }
        } else {
            Self {
                value: num as f64 / den as f64,
                degenerate: false,
            }
        }
    }
}

pub fn precision_recall(c: &ConfusionCounts) -> (Ratio, Ratio) {
    (Ratio::of(c.tp, c.tp + c.fp), Ratio::of(c.tp, c.tp + c.fn_))
}

/// IoUs of all greedy one-to-one (final, ground truth) pairs at `tau_iou`.
pub fn matched_ious(results: &[FrameResult], tau_iou: f64) -> Vec<f64> {
    results
        .iter()
        .flat_map(|r| greedy_match(&r.finals, &r.ground_truths, tau_iou).pairs)
        .map(|p| p.iou)
        .collect()
}

/// Mean IoU over matched pairs; false positives and misses are excluded.
pub fn mean_iou(results: &[FrameResult], tau_iou: f64) -> Ratio {
    let ious = matched_ious(results, tau_iou);
    if ious.is_empty() {
        return Ratio {
            value: 0.0,
            degenerate: true,
        };
    }
    Ratio {
        value: ious.iter().sum::<f64>() / ious.len() as f64,
        degenerate: false,
    }
}

/// Percentage in tenths of a point, e.g. `754` is 75.4%.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Tenths(pub i64);

impl Tenths {
    /// `100·num/den` rounded half-up to one decimal.
    pub fn percent(num: u64, den: u64) -> Self {
        if den == 0 {
            return Self(0);
        }
        let (num, den) = (u128::from(num), u128::from(den));
        Self(((2000 * num + den) / (2 * den)) as i64)
    }

    /// Rounds a printed percentage such as `75.4` to tenths, half away
    /// from zero.
    pub fn from_percent(p: f64) -> Self {
        Self(libm::round(p * 10.0) as i64)
    }

    pub fn as_percent(self) -> f64 {
        self.0 as f64 / 10.0
    }

    /// Signed form with an explicit plus for gains, e.g. `+22.0`.
    pub fn signed(self) -> SignedTenths {
        SignedTenths(self)
    }
}

impl fmt::Display for Tenths {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sign = if self.0 < 0 { "-" } else { "" };
        let a = self.0.unsigned_abs();
        f.pad(&alloc::format!("{sign}{}.{}", a / 10, a % 10))
    }
}

pub struct SignedTenths(Tenths);

impl fmt::Display for SignedTenths {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sign = if self.0 .0 >= 0 { "+" } else { "" };
        f.pad(&alloc::format!("{sign}{}", self.0))
    }
}

/// Metrics for one slice of the dataset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Stratum {
    pub frames: usize,
    pub counts: ConfusionCounts,
    pub precision: Ratio,
    pub recall: Ratio,
    pub miou: Ratio,
    pub precision_pct: Tenths,
    pub recall_pct: Tenths,
    pub miou_pct: Tenths,
}

fn stratum(results: &[&FrameResult], tau_iou: f64) -> Stratum {
    let owned: Vec<FrameResult> = results.iter().map(|r| (*r).clone()).collect();
    let counts = accumulate(&owned, tau_iou);
    let (precision, recall) = precision_recall(&counts);
    let ious = matched_ious(&owned, tau_iou);
    let miou = mean_iou(&owned, tau_iou);
    let miou_pct = if ious.is_empty() {
        Tenths(0)
    } else {
        Tenths::from_percent(100.0 * miou.value)
    };
    Stratum {
        frames: results.len(),
        counts,
        precision,
        recall,
        miou,
        precision_pct: Tenths::percent(counts.tp, counts.tp + counts.fp),
        recall_pct: Tenths::percent(counts.tp, counts.tp + counts.fn_),
        miou_pct,
    }
}

/// Mean and 95th percentile (nearest rank) of per-frame total latency.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub frames: usize,
    pub mean_ms: f64,
    pub p95_ms: f64,
}

pub fn latency_summary(results: &[FrameResult]) -> Option<LatencySummary> {
    if results.is_empty() {
        return None;
    }
    let mut totals: Vec<f64> = results.iter().map(|r| r.timing.total()).collect();
    totals.sort_by(f64::total_cmp);
    let n = totals.len();
    let rank = libm::ceil(0.95 * n as f64) as usize;
    Some(LatencySummary {
        frames: n,
        mean_ms: totals.iter().sum::<f64>() / n as f64,
        p95_ms: totals[rank.clamp(1, n) - 1],
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StratifiedReport {
    pub tau_iou: f64,
    pub overall: Stratum,
    /// Only conditions present in the data appear.
    pub per_condition: BTreeMap<String, Stratum>,
    pub per_tag: BTreeMap<String, Stratum>,
    /// Recall gain of this run over each named reference configuration.
    pub deltas: BTreeMap<String, Tenths>,
}

/// Overall, per-condition and per-tag metrics. `references` pairs a
/// configuration name with its recall; each yields a delta entry.
pub fn build_report(results: &[FrameResult], tau_iou: f64, references: &[(String, Tenths)]) -> StratifiedReport {
    let all: Vec<&FrameResult> = results.iter().collect();
    let overall = stratum(&all, tau_iou);

    let mut by_condition: BTreeMap<String, Vec<&FrameResult>> = BTreeMap::new();
    let mut by_tag: BTreeMap<String, Vec<&FrameResult>> = BTreeMap::new();
    for r in results {
        by_condition.entry(r.condition.as_str().into()).or_default().push(r);
        for tag in &r.degradation_tags {
            by_tag.entry(tag.clone()).or_default().push(r);
        }
    }
    let deltas = references
        .iter()
        .map(|(name, recall)| (name.clone(), Tenths(overall.recall_pct.0 - recall.0)))
        .collect();
    StratifiedReport {
        tau_iou,
        per_condition: by_condition.into_iter().map(|(k, v)| (k, stratum(&v, tau_iou))).collect(),
        per_tag: by_tag.into_iter().map(|(k, v)| (k, stratum(&v, tau_iou))).collect(),
        overall,
        deltas,
    }
}

/// One configuration row of an ablation table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub precision: Tenths,
    pub recall: Tenths,
    /// Recall gain over the first row; `None` for the first row itself.
    pub delta_recall: Option<Tenths>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// Rows of `(name, precision, recall)`; the first row is the baseline.
    pub fn from_rows(rows: &[(String, Tenths, Tenths)]) -> Self {
        let base = rows.first().map(|r| r.2);
        let rows = rows
            .iter()
            .enumerate()
            .map(|(i, (name, p, r))| AblationRow {
                name: name.clone(),
                precision: *p,
                recall: *r,
                delta_recall: (i > 0).then(|| Tenths(r.0 - base.map_or(0, |b| b.0))),
            })
            .collect();
        Self { rows }
    }

    /// Same as [`AblationTable::from_rows`] from printed percentages.
    pub fn from_percentages(rows: &[(&str, f64, f64)]) -> Self {
        let rows: Vec<(String, Tenths, Tenths)> = rows
            .iter()
            .map(|(n, p, r)| (String::from(*n), Tenths::from_percent(*p), Tenths::from_percent(*r)))
            .collect();
        Self::from_rows(&rows)
    }

    pub fn from_reports(reports: &[(String, StratifiedReport)]) -> Self {
        let rows: Vec<(String, Tenths, Tenths)> = reports
            .iter()
            .map(|(n, r)| (n.clone(), r.overall.precision_pct, r.overall.recall_pct))
            .collect();
        Self::from_rows(&rows)
    }
}

impl fmt::Display for AblationTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(0).max("Configuration".len());
        writeln!(f, "{:<width$}  {:>9}  {:>6}  {:>6}", "Configuration", "Precision", "Recall", "ΔR")?;
        for r in &self.rows {
            let delta = match r.delta_recall {
                Some(d) => alloc::format!("{}", d.signed()),
                None => String::from("--"),
            };
            writeln!(f, "{:<width$}  {:>9}  {:>6}  {:>6}", r.name, r.precision, r.recall, delta)?;
        }
        Ok(())
    }
}

/// Welch's t statistic with unbiased sample variances.
pub fn welch_t(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InsufficientData("each sample needs at least two values".into()));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("sample"));
    }
    let stats = |xs: &[f64]| {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
        (mean, var, n)
    };
    let (ma, va, na) = stats(a);
    let (mb, vb, nb) = stats(b);
    if va == 0.0 && vb == 0.0 {
        return Err(Error::InsufficientData("both samples have zero variance".into()));
    }
    Ok((ma - mb) / sqrt(va / na + vb / nb))
}

/// A frame as seen by the fold splitter.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitItem {
    pub patient_id: String,
    pub polyps: usize,
}

/// Fold index for every frame. All frames of a patient share a fold.
///
/// Patients are shuffled with the seed and placed largest first (by frame
/// count, then polyp count) into the fold with the fewest frames, filling
/// empty folds first. Single moves and pairwise swaps of patients are then
/// applied while they lower [`split_imbalance`].
pub fn stratified_split(items: &[SplitItem], k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(Error::InvalidConfig("at least two folds are required".into()));
    }
    let mut patients: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for item in items {
        let e = patients.entry(item.patient_id.as_str()).or_default();
        e.0 += 1;
        e.1 += item.polyps;
    }
    if k > patients.len() {
        return Err(Error::InsufficientData(alloc::format!(
            "{k} folds requested but only {} patients",
            patients.len()
        )));
    }

    let mut order: Vec<(&str, (usize, usize))> = patients.into_iter().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order.sort_by_key(|o| core::cmp::Reverse(o.1));
    let sizes: Vec<(usize, usize)> = order.iter().map(|o| o.1).collect();

    let mut loads = alloc::vec![(0usize, 0usize); k];
    let mut members = alloc::vec![0usize; k];
    let mut assign = alloc::vec![0usize; order.len()];
    for (i, &(frames, polyps)) in sizes.iter().enumerate() {
        let fold = (0..k)
            .min_by_key(|&f| (members[f] != 0, loads[f].0, loads[f].1, f))
            .unwrap_or(0);
        loads[fold].0 += frames;
        loads[fold].1 += polyps;
        members[fold] += 1;
        assign[i] = fold;
    }

    let mut current = split_imbalance(&loads);
    for _ in 0..10_000 {
        let mut best: Option<(f64, usize, Option<usize>, usize)> = None;
        let mut consider = |cost: f64, p: usize, q: Option<usize>, target: usize| {
            if cost < current - 1e-12 && best.is_none_or(|b| cost < b.0 - 1e-12) {
                best = Some((cost, p, q, target));
            }
        };
        for p in 0..sizes.len() {
            let from = assign[p];
            for to in 0..k {
                if to == from {
                    continue;
                }
                if members[from] > 1 {
                    let mut l = loads.clone();
                    shift(&mut l, sizes[p], from, to);
                    consider(split_imbalance(&l), p, None, to);
                }
                for q in (p + 1)..sizes.len() {
                    if assign[q] != to {
                        continue;
                    }
                    let mut l = loads.clone();
                    shift(&mut l, sizes[p], from, to);
                    shift(&mut l, sizes[q], to, from);
                    consider(split_imbalance(&l), p, Some(q), to);
                }
            }
        }
        let Some((cost, p, q, to)) = best else {
            break;
        };
        let from = assign[p];
        shift(&mut loads, sizes[p], from, to);
        assign[p] = to;
        match q {
            Some(q) => {
                shift(&mut loads, sizes[q], to, from);
                assign[q] = from;
            }
            None => {
                members[from] -= 1;
                members[to] += 1;
            }
        }
        current = cost;
    }

    let fold_of: BTreeMap<&str, usize> = order.iter().zip(&assign).map(|(o, f)| (o.0, *f)).collect();
    Ok(items.iter().map(|i| fold_of[i.patient_id.as_str()]).collect())
}

fn shift(loads: &mut [(usize, usize)], size: (usize, usize), from: usize, to: usize) {
    loads[from].0 -= size.0;
    loads[from].1 -= size.1;
    loads[to].0 += size.0;
    loads[to].1 += size.1;
}

/// Worst relative deviation of a fold's polyps-per-frame rate from the
/// global rate, plus a quarter of the worst relative fold-size deviation.
/// Folds are given as `(frames, polyps)` totals.
pub fn split_imbalance(loads: &[(usize, usize)]) -> f64 {
    let frames: usize = loads.iter().map(|l| l.0).sum();
    let polyps: usize = loads.iter().map(|l| l.1).sum();
    if frames == 0 {
        return 0.0;
    }
    let global = polyps as f64 / frames as f64;
    let even = frames as f64 / loads.len() as f64;
    let mut rate_dev: f64 = 0.0;
    let mut size_dev: f64 = 0.0;
    for &(f, p) in loads {
        size_dev = size_dev.max((f as f64 - even).abs() / even);
        if global > 0.0 {
            let rate = if f == 0 { 0.0 } else { p as f64 / f as f64 };
            rate_dev = rate_dev.max((rate - global).abs() / global);
        }
    }
    rate_dev + 0.25 * size_dev
}
