//! Group relative policy optimization on a small parametric verifier.
//!
//! The policy sees one feature vector per Stage 1 candidate and picks a
//! decision plus a confidence level. A sampled response lists the
//! candidates it accepts (decision Yes at confidence ≥ 0.7) in the detection
//! answer format, and is scored with [`reward_total`]. Updates follow the
//! sampled score-function estimator with group-normalized advantages,
//! weight decay, gradient-norm clipping, feature dropout and a curriculum
//! over degradation stages.

use alloc::collections::BTreeSet;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{detected, normalize_to_grid, BoundingBox, Candidate};
use crate::math::{exp, floor, log_sum_exp, sqrt};
use crate::protocol::{render_detection_response, Confidence, Decision, DetectionItem, DetectionResponse};
use crate::rewards::{reward_total, RewardBreakdown, RewardWeights};

/// Features per candidate: bias, detector confidence, visual evidence.
pub const FEATURE_DIM: usize = 3;
/// Confidence levels 0.00, 0.05, …, 1.00.
pub const CONFIDENCE_LEVELS: usize = 21;
pub const ACTION_COUNT: usize = 2 * CONFIDENCE_LEVELS;
pub const PARAM_DIM: usize = 2 * 2 * FEATURE_DIM;
/// Verdict confidence a Yes needs for the candidate to be kept.
pub const ACCEPT_CONFIDENCE: f64 = 0.7;

const STD_FLOOR: f64 = 1e-12;

/// Group-normalized advantages `(r - mean) / std` with the population
/// standard deviation. Flat groups get all zeros.
pub fn group_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::GroupTooSmall(rewards.len()));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(Error::NonFinite("reward"));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let std = sqrt(rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n);
    if std < STD_FLOOR {
        return Ok(alloc::vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// `p_max · exp(-alpha · t)`.
pub fn dropout_rate(t: u64, p_max: f64, alpha: f64) -> f64 {
    p_max * exp(-alpha * t as f64)
}

pub const MAX_DIFFICULTY: f64 = 3.0;

/// `difficulty + eta · max(0, acc - tau_progress)`, kept in `[0, 3]`.
pub fn curriculum_step(difficulty: f64, acc: f64, eta: f64, tau_progress: f64) -> f64 {
    let next = difficulty + eta * (acc - tau_progress).max(0.0);
    if next.is_nan() {
        return difficulty.clamp(0.0, MAX_DIFFICULTY);
    }
    next.clamp(0.0, MAX_DIFFICULTY)
}

/// Curriculum stage from degradation tags: 0 clean, 1 mild (lighting
/// only), 2 occluded (mucus, stool, bubbles and similar), 3 extreme (motion
/// blur, or three or more tags).
pub fn difficulty_stage(tags: &BTreeSet<String>) -> u8 {
    if tags.is_empty() {
        return 0;
    }
    if tags.len() >= 3 || tags.contains("motion_blur") {
        return 3;
    }
    let mild = ["dim", "overexposed", "low_contrast", "glare"];
    if tags.iter().all(|t| mild.contains(&t.as_str())) {
        1
    } else {
        2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VerifierAction {
    pub decision: Decision,
    /// Index into the confidence grid, `0..=20`.
    pub level: u8,
}

impl VerifierAction {
    pub fn from_index(i: usize) -> Self {
        let decision = if i < CONFIDENCE_LEVELS { Decision::Yes } else { Decision::No };
        Self {
            decision,
            level: (i % CONFIDENCE_LEVELS) as u8,
        }
    }

    pub fn index(self) -> usize {
        let base = if self.decision.is_yes() { 0 } else { CONFIDENCE_LEVELS };
        base + usize::from(self.level)
    }

    pub fn confidence(self) -> Confidence {
        Confidence::from_hundredths(self.level * 5).unwrap_or_else(|_| unreachable!("level is at most 20"))
    }

    pub fn accepts(self) -> bool {
        self.decision.is_yes() && self.confidence().value() >= ACCEPT_CONFIDENCE
    }
}

/// Log-linear policy `π(a|x) ∝ exp(θ·φ(x, a))` where `φ` places `[x, c·x]`
/// in the block of the chosen decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyVerifierPolicy {
    pub theta: Vec<f64>,
}

impl Default for ToyVerifierPolicy {
    fn default() -> Self {
        Self {
            theta: alloc::vec![0.0; PARAM_DIM],
        }
    }
}

pub type Features = [f64; FEATURE_DIM];

pub fn feature_map(x: &Features, action: usize) -> [f64; PARAM_DIM] {
    let a = VerifierAction::from_index(action);
    let c = a.confidence().value();
    let base = if a.decision.is_yes() { 0 } else { 2 * FEATURE_DIM };
    let mut phi = [0.0; PARAM_DIM];
    for j in 0..FEATURE_DIM {
        phi[base + j] = x[j];
        phi[base + FEATURE_DIM + j] = c * x[j];
    }
    phi
}

impl ToyVerifierPolicy {
    pub fn new(theta: Vec<f64>) -> Result<Self> {
        if theta.len() != PARAM_DIM {
            return Err(Error::InvalidConfig(alloc::format!(
                "policy needs {PARAM_DIM} parameters, got {}",
                theta.len()
            )));
        }
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite("policy parameters"));
        }
        Ok(Self { theta })
    }

    fn logits(&self, x: &Features) -> [f64; ACTION_COUNT] {
        let mut out = [0.0; ACTION_COUNT];
        for (a, l) in out.iter_mut().enumerate() {
            *l = feature_map(x, a).iter().zip(&self.theta).map(|(p, t)| p * t).sum();
        }
        out
    }

    pub fn probabilities(&self, x: &Features) -> [f64; ACTION_COUNT] {
        let logits = self.logits(x);
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut p = [0.0; ACTION_COUNT];
        let mut sum = 0.0;
        for (pi, l) in p.iter_mut().zip(&logits) {
            *pi = exp(l - max);
            sum += *pi;
        }
        for pi in &mut p {
            *pi /= sum;
        }
        p
    }

    pub fn log_prob(&self, x: &Features, action: usize) -> f64 {
        let logits = self.logits(x);
        logits[action] - log_sum_exp(logits.iter().copied())
    }

    /// `E_π[φ(x, ·)]`.
    pub fn expected_features(&self, x: &Features) -> [f64; PARAM_DIM] {
        let p = self.probabilities(x);
        let mut e = [0.0; PARAM_DIM];
        for (a, pa) in p.iter().enumerate() {
            for (ei, fi) in e.iter_mut().zip(feature_map(x, a)) {
                *ei += pa * fi;
            }
        }
        e
    }

    pub fn sample<R: Rng + ?Sized>(&self, x: &Features, rng: &mut R) -> usize {
        let p = self.probabilities(x);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (a, pa) in p.iter().enumerate() {
            acc += pa;
            if u < acc {
                return a;
            }
        }
        ACTION_COUNT - 1
    }

    /// Most probable action; lowest index on ties.
    pub fn greedy(&self, x: &Features) -> usize {
        let p = self.probabilities(x);
        let mut best = 0;
        for a in 1..ACTION_COUNT {
            if p[a] > p[best] {
                best = a;
            }
        }
        best
    }
}

/// A Stage 1 candidate as seen by the toy verifier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyCandidate {
    pub bbox: BoundingBox,
    pub detector_confidence: f64,
    pub evidence: f64,
    /// Whether the candidate overlaps a ground truth at the relaxed IoU.
    pub positive: bool,
}

impl ToyCandidate {
    pub fn features(&self) -> Features {
        [1.0, self.detector_confidence, self.evidence]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyInput {
    pub input_id: String,
    pub image_width: f64,
    pub image_height: f64,
    pub degradation_tags: BTreeSet<String>,
    pub ground_truths: Vec<BoundingBox>,
    pub candidates: Vec<ToyCandidate>,
}

impl ToyInput {
    pub fn stage(&self) -> u8 {
        difficulty_stage(&self.degradation_tags)
    }
}

/// Detection response text for one set of per-candidate actions.
pub fn render_response(input: &ToyInput, actions: &[usize]) -> String {
    let items = input
        .candidates
        .iter()
        .zip(actions)
        .filter_map(|(c, &a)| {
            let act = VerifierAction::from_index(a);
            if !act.accepts() {
                return None;
            }
            let bbox = normalize_to_grid(&c.bbox, input.image_width, input.image_height).ok()?;
            Some(DetectionItem {
                bbox,
                confidence: act.confidence(),
            })
        })
        .collect();
    render_detection_response(&DetectionResponse {
        think: "toy verifier".to_string(),
        items,
    })
    .unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSample {
    pub response: String,
    pub reward: f64,
    pub advantage: f64,
    pub breakdown: RewardBreakdown,
    /// Chosen action per candidate.
    pub actions: Vec<usize>,
    /// Features after dropout, per candidate, as used for sampling.
    pub features: Vec<Features>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyGroup {
    pub input_id: String,
    pub group_size: usize,
    pub samples: Vec<GroupSample>,
}

/// Inverted dropout on the non-bias features.
fn drop_features<R: Rng + ?Sized>(x: Features, p: f64, rng: &mut R) -> Features {
    if p <= 0.0 {
        return x;
    }
    let mut out = x;
    for v in out.iter_mut().skip(1) {
        *v = if rng.random::<f64>() < p { 0.0 } else { *v / (1.0 - p) };
    }
    out
}

/// Samples `group_size` responses for `input`, scores them and attaches
/// advantages.
pub fn sample_group<R: Rng + ?Sized>(
    policy: &ToyVerifierPolicy,
    input: &ToyInput,
    group_size: usize,
    dropout: f64,
    weights: &RewardWeights,
    rng: &mut R,
) -> Result<PolicyGroup> {
    if group_size < 2 {
        return Err(Error::GroupTooSmall(group_size));
    }
    let mut samples = Vec::with_capacity(group_size);
    for _ in 0..group_size {
        let features: Vec<Features> = input
            .candidates
            .iter()
            .map(|c| drop_features(c.features(), dropout, rng))
            .collect();
        let actions: Vec<usize> = features.iter().map(|x| policy.sample(x, rng)).collect();
        let response = render_response(input, &actions);
        let breakdown = reward_total(&response, &input.ground_truths, input.image_width, input.image_height, weights);
        samples.push(GroupSample {
            response,
            reward: breakdown.r_total,
            advantage: 0.0,
            breakdown,
            actions,
            features,
        });
    }
    let rewards: Vec<f64> = samples.iter().map(|s| s.reward).collect();
    for (s, a) in samples.iter_mut().zip(group_advantages(&rewards)?) {
        s.advantage = a;
    }
    Ok(PolicyGroup {
        input_id: input.input_id.clone(),
        group_size,
        samples,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub learning_rate: f64,
    pub group_size: usize,
    pub clip_norm: f64,
    pub weight_decay: f64,
    pub dropout_p_max: f64,
    pub dropout_decay: f64,
    pub curriculum_eta: f64,
    pub curriculum_tau_progress: f64,
    pub initial_difficulty: f64,
    pub steps: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            learning_rate: 0.5,
            group_size: 4,
            clip_norm: 1.0,
            weight_decay: 1e-4,
            dropout_p_max: 0.1,
            dropout_decay: 0.05,
            curriculum_eta: 0.5,
            curriculum_tau_progress: 0.6,
            initial_difficulty: 0.0,
            steps: 200,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::GroupTooSmall(self.group_size));
        }
        let positive = [
            ("learning_rate", self.learning_rate),
            ("clip_norm", self.clip_norm),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::OutOfRange {
                    name,
                    value: v,
                    expected: "> 0",
                });
            }
        }
        let nonneg = [
            ("weight_decay", self.weight_decay),
            ("dropout_decay", self.dropout_decay),
            ("curriculum_eta", self.curriculum_eta),
        ];
        for (name, v) in nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::OutOfRange {
                    name,
                    value: v,
                    expected: ">= 0",
                });
            }
        }
        if !(0.0..1.0).contains(&self.dropout_p_max) {
            return Err(Error::OutOfRange {
                name: "dropout_p_max",
                value: self.dropout_p_max,
                expected: "[0, 1)",
            });
        }
        if !(0.0..=1.0).contains(&self.curriculum_tau_progress) {
            return Err(Error::OutOfRange {
                name: "curriculum_tau_progress",
                value: self.curriculum_tau_progress,
                expected: "[0, 1]",
            });
        }
        if !(0.0..=MAX_DIFFICULTY).contains(&self.initial_difficulty) {
            return Err(Error::OutOfRange {
                name: "initial_difficulty",
                value: self.initial_difficulty,
                expected: "[0, 3]",
            });
        }
        Ok(())
    }
}

/// Surrogate loss `-(1/S) Σ A·log π(y) + λ‖θ‖²` over all samples.
pub fn surrogate_loss(theta: &[f64], groups: &[PolicyGroup], weight_decay: f64) -> f64 {
    let policy = ToyVerifierPolicy { theta: theta.to_vec() };
    let count: usize = groups.iter().map(|g| g.samples.len()).sum();
    let mut total = 0.0;
    for s in groups.iter().flat_map(|g| &g.samples) {
        let log_p: f64 = s.features.iter().zip(&s.actions).map(|(x, &a)| policy.log_prob(x, a)).sum();
        total += s.advantage * log_p;
    }
    let reg: f64 = theta.iter().map(|t| t * t).sum();
    -total / count.max(1) as f64 + weight_decay * reg
}

/// Analytic gradient of [`surrogate_loss`].
pub fn surrogate_gradient(theta: &[f64], groups: &[PolicyGroup], weight_decay: f64) -> Vec<f64> {
    let policy = ToyVerifierPolicy { theta: theta.to_vec() };
    let count: usize = groups.iter().map(|g| g.samples.len()).sum();
    let mut g = alloc::vec![0.0; theta.len()];
    for s in groups.iter().flat_map(|g| &g.samples) {
        if s.advantage == 0.0 {
            continue;
        }
        for (x, &a) in s.features.iter().zip(&s.actions) {
            let phi = feature_map(x, a);
            let e = policy.expected_features(x);
            for j in 0..theta.len() {
                g[j] -= s.advantage * (phi[j] - e[j]);
            }
        }
    }
    let scale = 1.0 / count.max(1) as f64;
    for (gj, t) in g.iter_mut().zip(theta) {
        *gj = *gj * scale + 2.0 * weight_decay * t;
    }
    g
}

/// Scales `g` to at most `clip_norm` in L2 norm; returns the original norm.
pub fn clip_gradient(g: &mut [f64], clip_norm: f64) -> f64 {
    let norm = sqrt(g.iter().map(|v| v * v).sum());
    if norm > clip_norm {
        let s = clip_norm / norm;
        for v in g.iter_mut() {
            *v *= s;
        }
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub loss_before: f64,
    pub loss_after: f64,
    pub grad_norm: f64,
    pub applied_norm: f64,
}

/// One clipped gradient step on the surrogate loss. A non-finite gradient
/// or loss leaves the policy untouched.
pub fn policy_gradient_step(
    policy: &mut ToyVerifierPolicy,
    groups: &[PolicyGroup],
    schedule: &TrainSchedule,
) -> Result<StepDiagnostics> {
    let loss_before = surrogate_loss(&policy.theta, groups, schedule.weight_decay);
    let mut g = surrogate_gradient(&policy.theta, groups, schedule.weight_decay);
    if !loss_before.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("policy gradient"));
    }
    let grad_norm = clip_gradient(&mut g, schedule.clip_norm);
    let applied_norm = sqrt(g.iter().map(|v| v * v).sum());
    let next: Vec<f64> = policy
        .theta
        .iter()
        .zip(&g)
        .map(|(t, gi)| t - schedule.learning_rate * gi)
        .collect();
    if next.iter().any(|t| !t.is_finite()) {
        return Err(Error::NonFinite("policy parameters"));
    }
    policy.theta = next;
    Ok(StepDiagnostics {
        loss_before,
        loss_after: surrogate_loss(&policy.theta, groups, schedule.weight_decay),
        grad_norm,
        applied_norm,
    })
}

/// Maximum-likelihood warm start: pushes positives toward (Yes, 1.00) and
/// negatives toward (No, 1.00).
pub fn supervised_warm_start(policy: &mut ToyVerifierPolicy, inputs: &[ToyInput], epochs: usize, learning_rate: f64) {
    let labeled: Vec<(Features, usize)> = inputs
        .iter()
        .flat_map(|i| &i.candidates)
        .map(|c| {
            let decision = if c.positive { Decision::Yes } else { Decision::No };
            let target = VerifierAction {
                decision,
                level: (CONFIDENCE_LEVELS - 1) as u8,
            };
            (c.features(), target.index())
        })
        .collect();
    if labeled.is_empty() {
        return;
    }
    for _ in 0..epochs {
        let mut g = alloc::vec![0.0; PARAM_DIM];
        for (x, a) in &labeled {
            let phi = feature_map(x, *a);
            let e = policy.expected_features(x);
            for j in 0..PARAM_DIM {
                g[j] += phi[j] - e[j];
            }
        }
        for (t, gj) in policy.theta.iter_mut().zip(&g) {
            *t += learning_rate * gj / labeled.len() as f64;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub mean_reward: f64,
    pub grad_norm: f64,
    pub difficulty: f64,
    pub dropout: f64,
    pub accuracy: f64,
    pub loss_before: f64,
    pub loss_after: f64,
}

/// Resumable trainer state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub policy: ToyVerifierPolicy,
    /// Next step to run.
    pub step: u64,
    pub difficulty: f64,
}

impl TrainState {
    pub fn new(policy: ToyVerifierPolicy, schedule: &TrainSchedule) -> Self {
        Self {
            policy,
            step: 0,
            difficulty: schedule.initial_difficulty,
        }
    }
}

/// Error raised mid-training together with the last good state.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainFailure {
    pub error: Error,
    pub state: TrainState,
    pub records: Vec<StepRecord>,
}

fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

/// Fraction of candidate decisions in a sample that agree with the labels.
fn sample_accuracy(input: &ToyInput, actions: &[usize]) -> f64 {
    if input.candidates.is_empty() {
        return 1.0;
    }
    let right = input
        .candidates
        .iter()
        .zip(actions)
        .filter(|(c, &a)| VerifierAction::from_index(a).accepts() == c.positive)
        .count();
    right as f64 / input.candidates.len() as f64
}

/// Runs `schedule.steps` steps from `state`.
///
/// Every step samples a group for every input so the reported mean reward
/// always covers the full input set. Only inputs whose stage is unlocked by
/// the current difficulty contribute to the update; when none is unlocked
/// the lowest stage present is used.
pub fn train(
    state: &mut TrainState,
    inputs: &[ToyInput],
    schedule: &TrainSchedule,
    weights: &RewardWeights,
    seed: u64,
) -> core::result::Result<Vec<StepRecord>, TrainFailure> {
    let fail = |error: Error, state: &TrainState, records: Vec<StepRecord>| TrainFailure {
        error,
        state: state.clone(),
        records,
    };
    let mut records = Vec::new();
    if let Err(e) = schedule.validate() {
        return Err(fail(e, state, records));
    }
    if inputs.is_empty() {
        return Err(fail(Error::InsufficientData("no training inputs".into()), state, records));
    }
    let lowest = inputs.iter().map(ToyInput::stage).min().unwrap_or(0);

    for _ in 0..schedule.steps {
        let t = state.step;
        let mut rng = step_rng(seed, t);
        let p = dropout_rate(t, schedule.dropout_p_max, schedule.dropout_decay);
        let unlocked = (floor(state.difficulty) as u8).max(lowest);

        let mut groups = Vec::with_capacity(inputs.len());
        let mut active = Vec::new();
        let mut reward_sum = 0.0;
        let mut acc_sum = 0.0;
        let mut acc_count = 0usize;
        for input in inputs {
            let group = match sample_group(&state.policy, input, schedule.group_size, p, weights, &mut rng) {
                Ok(g) => g,
                Err(e) => return Err(fail(e, state, records)),
            };
            reward_sum += group.samples.iter().map(|s| s.reward).sum::<f64>();
            if input.stage() <= unlocked {
                for s in &group.samples {
                    acc_sum += sample_accuracy(input, &s.actions);
                    acc_count += 1;
                }
                active.push(groups.len());
            }
            groups.push(group);
        }
        let update: Vec<PolicyGroup> = active.iter().map(|&i| groups[i].clone()).collect();
        let diag = match policy_gradient_step(&mut state.policy, &update, schedule) {
            Ok(d) => d,
            Err(e) => return Err(fail(e, state, records)),
        };
        let accuracy = if acc_count == 0 { 0.0 } else { acc_sum / acc_count as f64 };
        records.push(StepRecord {
            step: t,
            mean_reward: reward_sum / (inputs.len() * schedule.group_size) as f64,
            grad_norm: diag.grad_norm,
            difficulty: state.difficulty,
            dropout: p,
            accuracy,
            loss_before: diag.loss_before,
            loss_after: diag.loss_after,
        });
        state.difficulty = curriculum_step(
            state.difficulty,
            accuracy,
            schedule.curriculum_eta,
            schedule.curriculum_tau_progress,
        );
        state.step += 1;
    }
    Ok(records)
}

/// Recall of the policy's most probable actions at `tau_iou`.
pub fn evaluate_recall(policy: &ToyVerifierPolicy, inputs: &[ToyInput], tau_iou: f64) -> f64 {
    let mut hit = 0usize;
    let mut total = 0usize;
    for input in inputs {
        let finals: Vec<Candidate> = input
            .candidates
            .iter()
            .filter(|c| VerifierAction::from_index(policy.greedy(&c.features())).accepts())
            .filter_map(|c| Candidate::new(c.bbox, c.detector_confidence).ok())
            .collect();
        total += input.ground_truths.len();
        hit += input.ground_truths.iter().filter(|g| detected(g, &finals, tau_iou)).count();
    }
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}

/// Mean reward of the policy's most probable actions.
pub fn evaluate_reward(policy: &ToyVerifierPolicy, inputs: &[ToyInput], weights: &RewardWeights) -> f64 {
    if inputs.is_empty() {
        return 0.0;
    }
    let total: f64 = inputs
        .iter()
        .map(|input| {
            let actions: Vec<usize> = input.candidates.iter().map(|c| policy.greedy(&c.features())).collect();
            let response = render_response(input, &actions);
            reward_total(&response, &input.ground_truths, input.image_width, input.image_height, weights).r_total
        })
        .sum();
    total / inputs.len() as f64
}

const TOY_WIDTH: f64 = 640.0;
const TOY_HEIGHT: f64 = 480.0;

fn stage_tags(stage: u8) -> BTreeSet<String> {
    let tags: &[&str] = match stage {
        0 => &[],
        1 => &["dim"],
        2 => &["mucus", "bubbles"],
        _ => &["dim", "motion_blur", "stool"],
    };
    tags.iter().map(|t| t.to_string()).collect()
}

/// Box of the same size as `gt` shifted right so its IoU with `gt` is `t`.
fn shifted(gt: &BoundingBox, t: f64) -> BoundingBox {
    let dx = gt.width() * (1.0 - t) / (1.0 + t);
    gt.translate(dx, 0.0).unwrap_or(*gt)
}

/// Synthetic verification task. Inputs cycle through the four curriculum
/// stages. Clean frames hold one polyp with a clear candidate; later stages
/// add look-alike negatives, a second polyp whose candidate is poorly
/// localized and visually ambiguous, and feature noise.
pub fn synthetic_task(n_inputs: usize, seed: u64) -> Vec<ToyInput> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_inputs);
    for i in 0..n_inputs {
        let stage = (i % 4) as u8;
        let noise = if stage == 3 { 0.05 } else { 0.0 };
        let jitter = |v: f64, rng: &mut ChaCha8Rng| {
            let n = if noise > 0.0 { rng.random_range(-noise..noise) } else { 0.0 };
            (v + n).clamp(0.0, 1.0)
        };

        let gt_box = |rng: &mut ChaCha8Rng, y_lo: f64| {
            let w = rng.random_range(60.0..120.0);
            let h = rng.random_range(60.0..120.0);
            let x = rng.random_range(20.0..140.0);
            let y = rng.random_range(y_lo..y_lo + 80.0);
            BoundingBox::from_xywh(x, y, w, h).unwrap_or_else(|_| unreachable!("positive size"))
        };
        let far_box = |rng: &mut ChaCha8Rng| {
            let w = rng.random_range(40.0..100.0);
            let h = rng.random_range(40.0..100.0);
            let x = rng.random_range(380.0..520.0);
            let y = rng.random_range(20.0..360.0);
            BoundingBox::from_xywh(x, y, w, h).unwrap_or_else(|_| unreachable!("positive size"))
        };

        let mut gts = alloc::vec![gt_box(&mut rng, 20.0)];
        let mut candidates = Vec::new();
        let easy_iou = rng.random_range(0.8..0.95);
        candidates.push(ToyCandidate {
            bbox: shifted(&gts[0], easy_iou),
            detector_confidence: jitter(rng.random_range(0.75..0.95), &mut rng),
            evidence: jitter(rng.random_range(0.7..0.95), &mut rng),
            positive: true,
        });
        if stage >= 2 {
            let second = gt_box(&mut rng, 240.0);
            let hard_iou = rng.random_range(0.38..0.5);
            candidates.push(ToyCandidate {
                bbox: shifted(&second, hard_iou),
                detector_confidence: jitter(rng.random_range(0.3..0.55), &mut rng),
                evidence: jitter(rng.random_range(0.55..0.8), &mut rng),
                positive: true,
            });
            gts.push(second);
        }
        if stage >= 1 {
            candidates.push(ToyCandidate {
                bbox: far_box(&mut rng),
                detector_confidence: jitter(rng.random_range(0.3..0.55), &mut rng),
                evidence: jitter(rng.random_range(0.15..0.4), &mut rng),
                positive: false,
            });
        }
        if stage != 1 {
            candidates.push(ToyCandidate {
                bbox: far_box(&mut rng),
                detector_confidence: jitter(rng.random_range(0.05..0.3), &mut rng),
                evidence: jitter(rng.random_range(0.0..0.25), &mut rng),
                positive: false,
            });
        }
        out.push(ToyInput {
            input_id: alloc::format!("toy-{i:03}"),
            image_width: TOY_WIDTH,
            image_height: TOY_HEIGHT,
            degradation_tags: stage_tags(stage),
            ground_truths: gts,
            candidates,
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn advantage_examples() {
        assert_eq!(group_advantages(&[0.3; 4]).unwrap(), vec![0.0; 4]);
        let a = group_advantages(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        let s = sqrt(1.25);
        for (ai, r) in a.iter().zip([1.0, 2.0, 3.0, 4.0]) {
            assert_abs_diff_eq!(*ai, (r - 2.5) / s, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(a[0], -1.3416, epsilon = 1e-4);
        assert_abs_diff_eq!(a[1], -0.4472, epsilon = 1e-4);
        assert_eq!(group_advantages(&[0.0, 1.0]).unwrap(), vec![-1.0, 1.0]);
        assert_eq!(group_advantages(&[1.0]), Err(Error::GroupTooSmall(1)));
    }

    #[test]
    fn schedule_examples() {
        assert_eq!(dropout_rate(0, 0.3, 0.2), 0.3);
        assert_eq!(dropout_rate(50, 0.3, 0.0), 0.3);
        assert_abs_diff_eq!(dropout_rate(10, 0.5, 0.1), 0.5 * exp(-1.0), epsilon = 1e-15);
        assert_abs_diff_eq!(dropout_rate(10, 0.5, 0.1), 0.1839, epsilon = 1e-4);
        assert_eq!(curriculum_step(1.0, 0.5, 1.0, 0.8), 1.0);
        assert_abs_diff_eq!(curriculum_step(1.0, 0.9, 1.0, 0.8), 1.1, epsilon = 1e-12);
        assert_eq!(curriculum_step(2.95, 1.0, 1.0, 0.0), 3.0);
    }

    #[test]
    fn stages_from_tags() {
        let tags = |t: &[&str]| t.iter().map(|s| s.to_string()).collect::<BTreeSet<_>>();
        assert_eq!(difficulty_stage(&tags(&[])), 0);
        assert_eq!(difficulty_stage(&tags(&["dim"])), 1);
        assert_eq!(difficulty_stage(&tags(&["dim", "mucus"])), 2);
        assert_eq!(difficulty_stage(&tags(&["motion_blur"])), 3);
        assert_eq!(difficulty_stage(&tags(&["a", "b", "c"])), 3);
    }

    #[test]
    fn actions_and_distribution() {
        for i in 0..ACTION_COUNT {
            assert_eq!(VerifierAction::from_index(i).index(), i);
        }
        assert!(VerifierAction { decision: Decision::Yes, level: 14 }.accepts());
        assert!(!VerifierAction { decision: Decision::Yes, level: 13 }.accepts());
        assert!(!VerifierAction { decision: Decision::No, level: 20 }.accepts());
        let p = ToyVerifierPolicy::new((0..PARAM_DIM).map(|i| i as f64 * 0.7 - 3.0).collect()).unwrap();
        let probs = p.probabilities(&[1.0, 0.4, 0.9]);
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(ToyVerifierPolicy::new(vec![0.0; 3]).is_err());
    }

    #[test]
    fn clipping() {
        let mut g = vec![6.0, 8.0];
        assert_eq!(clip_gradient(&mut g, 1.0), 10.0);
        assert_abs_diff_eq!(g[0], 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(g[1], 0.8, epsilon = 1e-15);
        let mut small = vec![0.3, 0.4];
        clip_gradient(&mut small, 1.0);
        assert_eq!(small, vec![0.3, 0.4]);
    }

    fn scored_groups(seed: u64) -> Vec<PolicyGroup> {
        let inputs = synthetic_task(4, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let policy = ToyVerifierPolicy::default();
        inputs
            .iter()
            .map(|i| sample_group(&policy, i, 4, 0.0, &RewardWeights::default(), &mut rng).unwrap())
            .collect()
    }

    #[test]
    fn zero_advantage_only_decays() {
        let mut groups = scored_groups(3);
        for s in groups.iter_mut().flat_map(|g| g.samples.iter_mut()) {
            s.advantage = 0.0;
        }
        let theta: Vec<f64> = (0..PARAM_DIM).map(|i| 0.1 * i as f64).collect();
        let mut policy = ToyVerifierPolicy::new(theta.clone()).unwrap();
        let schedule = TrainSchedule {
            learning_rate: 0.1,
            weight_decay: 0.01,
            clip_norm: 100.0,
            ..Default::default()
        };
        policy_gradient_step(&mut policy, &groups, &schedule).unwrap();
        for (after, before) in policy.theta.iter().zip(&theta) {
            assert_abs_diff_eq!(*after, before * (1.0 - 0.1 * 2.0 * 0.01), epsilon = 1e-15);
        }
    }

    #[test]
    fn non_finite_step_leaves_policy() {
        let mut groups = scored_groups(4);
        groups[0].samples[0].advantage = f64::NAN;
        let mut policy = ToyVerifierPolicy::default();
        let before = policy.clone();
        assert!(policy_gradient_step(&mut policy, &groups, &TrainSchedule::default()).is_err());
        assert_eq!(policy, before);
    }

    #[test]
    fn rejects_tiny_groups() {
        let s = TrainSchedule {
            group_size: 1,
            ..Default::default()
        };
        assert_eq!(s.validate(), Err(Error::GroupTooSmall(1)));
    }

    #[test]
    fn training_is_deterministic_and_resumable() {
        let inputs = synthetic_task(8, 1);
        let schedule = TrainSchedule {
            steps: 10,
            ..Default::default()
        };
        let w = RewardWeights::default();
        let mut a = TrainState::new(ToyVerifierPolicy::default(), &schedule);
        let ra = train(&mut a, &inputs, &schedule, &w, 9).unwrap();
        let mut b = TrainState::new(ToyVerifierPolicy::default(), &schedule);
        let rb = train(&mut b, &inputs, &schedule, &w, 9).unwrap();
        assert_eq!(ra, rb);

        let half = TrainSchedule { steps: 5, ..schedule };
        let mut c = TrainState::new(ToyVerifierPolicy::default(), &schedule);
        let mut rc = train(&mut c, &inputs, &half, &w, 9).unwrap();
        rc.extend(train(&mut c, &inputs, &half, &w, 9).unwrap());
        assert_eq!(rc, ra);
        assert_eq!(c, a);
    }

    #[test]
    fn synthetic_task_labels_match_geometry() {
        for input in synthetic_task(16, 5) {
            for c in &input.candidates {
                let best = input
                    .ground_truths
                    .iter()
                    .map(|g| crate::geometry::iou(&c.bbox, g))
                    .fold(0.0, f64::max);
                assert_eq!(c.positive, best > 0.3, "{}", input.input_id);
            }
            for g in &input.ground_truths {
                assert!(g.is_inside(input.image_width, input.image_height));
            }
        }
    }

    proptest! {
        #[test]
        fn advantages_zero_mean_and_shift_invariant(rs in proptest::collection::vec(-5.0f64..5.0, 2..9), shift in -10.0f64..10.0) {
            let a = group_advantages(&rs).unwrap();
            prop_assert!(a.iter().sum::<f64>().abs() <= 1e-9);
            let shifted: Vec<f64> = rs.iter().map(|r| r + shift).collect();
            let b = group_advantages(&shifted).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-6);
            }
        }

        #[test]
        fn clipping_never_grows(g in proptest::collection::vec(-50.0f64..50.0, 1..12), tau in 0.01f64..10.0) {
            let mut c = g.clone();
            let before = clip_gradient(&mut c, tau);
            let after = sqrt(c.iter().map(|v| v * v).sum());
            prop_assert!(after <= before + 1e-12);
            if before <= tau {
                prop_assert_eq!(c, g);
            }
        }
    }
}
