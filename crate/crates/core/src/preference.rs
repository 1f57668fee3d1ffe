//! Step-level strategy preference data and the pairwise preference loss.
//!
//! At step `t` the fine-tuned director is sampled `k` times with different
//! seeds. Each candidate is rolled out to a final answer and rewarded by
//! correctness and by how much physician help the path needed; every pair of
//! candidates with strictly different rewards becomes a training pair.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::casebank::CaseRecord;
use crate::engine::{append_step, continue_session, request_continuation, AssistantPort, EngineError, SessionConfig, SessionOutcome};
use crate::llm::{DirectorClient, SamplingParams};
use crate::metrics::{judge_accuracy, AccuracyMode, MetricsError};
use crate::protocol::{emit_transcript, extract_final_answer, Continuation, FinalDiagnosis, ProtocolError, Responder, Step, Transcript};

pub const DEFAULT_K: usize = 3;
pub const DEFAULT_BETA: f64 = 0.1;
pub const REWARD_SCALE: f64 = 10.0;

#[derive(Debug, Error)]
pub enum PreferenceError {
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Judge(#[from] MetricsError),
    #[error("preference loss needs at least one pair")]
    EmptyPairList,
    #[error("beta must be positive and finite, got {0}")]
    InvalidBeta(f64),
    #[error("log-probability inputs must be finite")]
    NonFinite,
}

/// `10 / max(gamma, 1)` for a correct final answer, 0 otherwise.
pub fn assign_reward(correct: bool, gamma: usize) -> f64 {
    if correct {
        REWARD_SCALE / gamma.max(1) as f64
    } else {
        0.0
    }
}

/// One sampled response for a step. A candidate that finalizes immediately
/// carries the final-diagnosis body in `d` and empty `q`/`a`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardedResponse {
    pub d: String,
    pub q: String,
    pub a: String,
    pub r: f64,
    pub gamma: usize,
    pub correct: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub responder: Option<Responder>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub is_final: bool,
    pub seed: u64,
}

impl RewardedResponse {
    fn from_continuation(c: Continuation, seed: u64) -> Self {
        match c {
            Continuation::Step(s) => RewardedResponse {
                d: s.deep_think,
                q: s.question,
                a: s.answer.unwrap_or_default(),
                r: 0.0,
                gamma: 0,
                correct: false,
                responder: Some(s.responder),
                is_final: false,
                seed,
            },
            Continuation::Final(fd) => RewardedResponse {
                d: fd.body,
                q: String::new(),
                a: String::new(),
                r: 0.0,
                gamma: 0,
                correct: false,
                responder: None,
                is_final: true,
                seed,
            },
        }
    }

    fn same_strategy(&self, other: &Self) -> bool {
        self.d == other.d && self.q == other.q && self.responder == other.responder && self.is_final == other.is_final
    }

    /// The candidate as a step of the transcript it extends.
    pub fn to_step(&self, index: usize) -> Option<Step> {
        let responder = self.responder?;
        Some(Step {
            index,
            deep_think: self.d.clone(),
            question: self.q.clone(),
            responder,
            answer: match responder {
                Responder::Llm => Some(self.a.clone()),
                Responder::Physician if self.a.is_empty() => None,
                Responder::Physician => Some(self.a.clone()),
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSample {
    pub prefix: Transcript,
    pub candidates: Vec<RewardedResponse>,
    /// Set when two candidates propose the same strategy.
    pub duplicates: bool,
}

impl StepSample {
    pub fn step_index(&self) -> usize {
        self.prefix.steps.len() + 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub prefix: String,
    pub chosen: RewardedResponse,
    pub rejected: RewardedResponse,
}

/// Every ordered pair whose chosen reward is strictly higher, in candidate
/// order.
pub fn build_pairs(sample: &StepSample) -> Result<Vec<PreferencePair>, PreferenceError> {
    let prefix = emit_transcript(&sample.prefix)?;
    let c = &sample.candidates;
    let mut out = Vec::new();
    for m in 0..c.len() {
        for n in 0..c.len() {
            if c[m].r > c[n].r {
                out.push(PreferencePair {
                    prefix: prefix.clone(),
                    chosen: c[m].clone(),
                    rejected: c[n].clone(),
                });
            }
        }
    }
    Ok(out)
}

/// Draws `k` continuations of `prefix` with seeds `base.seed + 0..k`.
pub fn sample_step_candidates(
    prefix: &Transcript,
    director: &dyn DirectorClient,
    k: usize,
    base: &SamplingParams,
    retry_limit: u32,
) -> Result<StepSample, PreferenceError> {
    if k < 2 {
        return Err(PreferenceError::Precondition(format!("k must be >= 2 to form pairs, got {k}")));
    }
    let mut candidates: Vec<RewardedResponse> = Vec::with_capacity(k);
    for j in 0..k as u64 {
        let seed = base.seed.wrapping_add(j);
        let (c, _) = request_continuation(director, prefix, &base.with_seed(seed), retry_limit, |_, _| {})?;
        candidates.push(RewardedResponse::from_continuation(c, seed));
    }
    let duplicates = candidates
        .iter()
        .enumerate()
        .any(|(i, a)| candidates[..i].iter().any(|b| a.same_strategy(b)));
    Ok(StepSample {
        prefix: prefix.clone(),
        candidates,
        duplicates,
    })
}

/// A rewarded step together with the rollout transcripts behind each reward.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardedStep {
    pub sample: StepSample,
    pub rollouts: Vec<Transcript>,
    pub best: usize,
}

impl RewardedStep {
    /// The prefix for the next step: the current one extended by the best
    /// candidate. `None` when the best candidate was a final diagnosis.
    pub fn next_prefix(&self) -> Option<Transcript> {
        let best = &self.sample.candidates[self.best];
        let step = best.to_step(self.sample.step_index())?;
        let mut t = self.sample.prefix.clone();
        t.steps.push(step);
        Some(t)
    }
}

fn best_index(candidates: &[RewardedResponse]) -> usize {
    let mut best = 0;
    for (i, c) in candidates.iter().enumerate() {
        if c.r > candidates[best].r {
            best = i;
        }
    }
    best
}

/// Rolls each candidate out to the end of the episode and rewards it.
///
/// Candidates run one after another in index order so that stateful
/// directors (such as replays) see a fixed call sequence.
pub fn rollout_and_reward(
    mut sample: StepSample,
    case: &CaseRecord,
    director: &dyn DirectorClient,
    assistant: &dyn AssistantPort,
    cfg: &SessionConfig,
    accuracy: &AccuracyMode,
) -> Result<RewardedStep, PreferenceError> {
    let index = sample.step_index();
    let mut rollouts = Vec::with_capacity(sample.candidates.len());
    for cand in sample.candidates.iter_mut() {
        let mut t = sample.prefix.clone();
        let finished = if cand.is_final {
            t.final_diagnosis = Some(FinalDiagnosis::new(cand.d.clone())?);
            t.validate()?;
            true
        } else {
            let step = cand.to_step(index).expect("non-final candidate has a responder");
            if let Some(call) = append_step(&case.case_id, &mut t, step, assistant, &mut |_| {})? {
                cand.a = call.answer;
            }
            let res = continue_session(&case.case_id, t, director, assistant, cfg, &mut |_| {})?;
            t = res.transcript;
            res.trace.outcome == SessionOutcome::Finalized
        };
        cand.gamma = t.physician_count();
        cand.correct = finished
            && match extract_final_answer(&t) {
                Ok(pred) if !pred.is_empty() => judge_accuracy(&pred, &case.gold_answer, accuracy)?.matched,
                _ => false,
            };
        cand.r = assign_reward(cand.correct, cand.gamma);
        rollouts.push(t);
    }
    let best = best_index(&sample.candidates);
    Ok(RewardedStep {
        sample,
        rollouts,
        best,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceConfig {
    pub k: usize,
    pub sampling: SamplingParams,
    pub session: SessionConfig,
}

impl Default for PreferenceConfig {
    fn default() -> Self {
        PreferenceConfig {
            k: DEFAULT_K,
            sampling: SamplingParams::sampling(0),
            session: SessionConfig::default(),
        }
    }
}

/// Walks one case step by step, extending the prefix with the best candidate
/// each time, and collects the pairs of every step.
pub fn build_case_preferences(
    case: &CaseRecord,
    director: &dyn DirectorClient,
    assistant: &dyn AssistantPort,
    cfg: &PreferenceConfig,
    accuracy: &AccuracyMode,
) -> Result<(Vec<RewardedStep>, Vec<PreferencePair>), PreferenceError> {
    let mut prefix = Transcript::new(case.instruction());
    let mut steps = Vec::new();
    let mut pairs = Vec::new();
    while prefix.steps.len() < cfg.session.step_cap {
        let sample = sample_step_candidates(&prefix, director, cfg.k, &cfg.sampling, cfg.session.retry_limit)?;
        let rewarded = rollout_and_reward(sample, case, director, assistant, &cfg.session, accuracy)?;
        pairs.extend(build_pairs(&rewarded.sample)?);
        let next = rewarded.next_prefix();
        steps.push(rewarded);
        match next {
            Some(p) => prefix = p,
            None => break,
        }
    }
    Ok((steps, pairs))
}

pub fn write_pairs(pairs: &[PreferencePair], mut w: impl Write) -> std::io::Result<()> {
    for p in pairs {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Sequence log-probabilities of one pair under the policy and the frozen
/// reference model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairLogProbs {
    pub policy_chosen: f64,
    pub ref_chosen: f64,
    pub policy_rejected: f64,
    pub ref_rejected: f64,
}

impl PairLogProbs {
    pub fn new(policy_chosen: f64, ref_chosen: f64, policy_rejected: f64, ref_rejected: f64) -> Self {
        PairLogProbs {
            policy_chosen,
            ref_chosen,
            policy_rejected,
            ref_rejected,
        }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.policy_chosen, self.ref_chosen, self.policy_rejected, self.ref_rejected]
    }

    pub fn from_array(v: [f64; 4]) -> Self {
        PairLogProbs::new(v[0], v[1], v[2], v[3])
    }

    pub fn margin(&self) -> f64 {
        (self.policy_chosen - self.ref_chosen) - (self.policy_rejected - self.ref_rejected)
    }

    fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// `ln(1 + e^{-x})`, i.e. `-ln sigmoid(x)`, without overflow for large |x|.
pub fn neg_log_sigmoid(x: f64) -> f64 {
    (-x).max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_inputs(pairs: &[PairLogProbs], beta: f64) -> Result<(), PreferenceError> {
    if pairs.is_empty() {
        return Err(PreferenceError::EmptyPairList);
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(PreferenceError::InvalidBeta(beta));
    }
    if !pairs.iter().all(PairLogProbs::is_finite) {
        return Err(PreferenceError::NonFinite);
    }
    Ok(())
}

/// Mean over pairs of `-ln sigmoid(beta * margin)`.
pub fn dpo_loss(pairs: &[PairLogProbs], beta: f64) -> Result<f64, PreferenceError> {
    check_inputs(pairs, beta)?;
    let total: f64 = pairs.iter().map(|p| neg_log_sigmoid(beta * p.margin())).sum();
    Ok(total / pairs.len() as f64)
}

/// Gradient of [`dpo_loss`] with respect to each input, in the field order
/// of [`PairLogProbs`].
pub fn dpo_loss_grad(pairs: &[PairLogProbs], beta: f64) -> Result<(f64, Vec<PairLogProbs>), PreferenceError> {
    let loss = dpo_loss(pairs, beta)?;
    let n = pairs.len() as f64;
    let grads = pairs
        .iter()
        .map(|p| {
            // d/dm of -ln sigmoid(beta m) = -beta * sigmoid(-beta m)
            let g = -beta * sigmoid(-beta * p.margin()) / n;
            PairLogProbs::new(g, -g, -g, g)
        })
        .collect();
    Ok((loss, grads))
}
