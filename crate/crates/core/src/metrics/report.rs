//! Batch evaluation of a case bank and the resulting metric report.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{judge_accuracy, op_effectiveness, AccuracyMode, MetricsError, UsefulnessMode};
use crate::casebank::{CaseBank, CaseRecord};
use crate::engine::{run_session, AssistantPort, SessionConfig, SessionOutcome, SessionResult};
use crate::llm::DirectorClient;
use crate::protocol::extract_final_answer;
use crate::stats::{bootstrap_ci, mann_whitney_two_sided, mcnemar_two_sided, mean, Interval, McNemarMode, DEFAULT_RESAMPLES};

#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub session: SessionConfig,
    pub accuracy: AccuracyMode,
    pub usefulness: UsefulnessMode,
    pub n_resamples: usize,
    pub bootstrap_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            session: SessionConfig::default(),
            accuracy: AccuracyMode::Normalized,
            usefulness: UsefulnessMode::Lexical,
            n_resamples: DEFAULT_RESAMPLES,
            bootstrap_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowOutcome {
    Finalized,
    StepCapReached,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRow {
    pub case_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub department: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<String>,
    pub outcome: RowOutcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted: Option<String>,
    pub gold: String,
    pub correct: bool,
    pub gamma: usize,
    pub op_effectiveness: f64,
    pub steps: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub n: usize,
    pub accuracy: f64,
    pub op_count_mean: f64,
    pub op_effectiveness_mean: f64,
}

impl Aggregate {
    fn of(rows: &[&CaseRow]) -> Aggregate {
        let n = rows.len();
        let gam: Vec<f64> = rows.iter().map(|r| r.gamma as f64).collect();
        let eff: Vec<f64> = rows.iter().map(|r| r.op_effectiveness).collect();
        Aggregate {
            n,
            accuracy: rows.iter().filter(|r| r.correct).count() as f64 / n as f64,
            op_count_mean: mean(&gam),
            op_effectiveness_mean: mean(&eff),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n: usize,
    pub judge_id: String,
    pub accuracy: f64,
    pub accuracy_ci: Interval,
    pub op_count_mean: f64,
    pub op_count_ci: Interval,
    pub op_effectiveness_mean: f64,
    pub op_effectiveness_ci: Interval,
    pub n_resamples: usize,
    pub bootstrap_seed: u64,
    pub by_department: BTreeMap<String, Aggregate>,
    pub by_task: BTreeMap<String, Aggregate>,
    pub rows: Vec<CaseRow>,
}

fn group_by(rows: &[CaseRow], key: impl Fn(&CaseRow) -> Option<&String>) -> BTreeMap<String, Aggregate> {
    let mut groups: BTreeMap<String, Vec<&CaseRow>> = BTreeMap::new();
    for r in rows {
        if let Some(k) = key(r) {
            groups.entry(k.clone()).or_default().push(r);
        }
    }
    groups.into_iter().map(|(k, v)| (k, Aggregate::of(&v))).collect()
}

impl MetricReport {
    pub fn from_rows(rows: Vec<CaseRow>, judge_id: String, n_resamples: usize, seed: u64) -> Result<Self, MetricsError> {
        if rows.is_empty() {
            return Err(MetricsError::EmptyInput("no cases evaluated".into()));
        }
        let refs: Vec<&CaseRow> = rows.iter().collect();
        let all = Aggregate::of(&refs);
        let acc: Vec<f64> = rows.iter().map(|r| if r.correct { 1.0 } else { 0.0 }).collect();
        let gam: Vec<f64> = rows.iter().map(|r| r.gamma as f64).collect();
        let eff: Vec<f64> = rows.iter().map(|r| r.op_effectiveness).collect();
        Ok(MetricReport {
            n: rows.len(),
            judge_id,
            accuracy: all.accuracy,
            accuracy_ci: bootstrap_ci(&acc, n_resamples, seed)?,
            op_count_mean: all.op_count_mean,
            op_count_ci: bootstrap_ci(&gam, n_resamples, seed)?,
            op_effectiveness_mean: all.op_effectiveness_mean,
            op_effectiveness_ci: bootstrap_ci(&eff, n_resamples, seed)?,
            n_resamples,
            bootstrap_seed: seed,
            by_department: group_by(&rows, |r| r.department.as_ref()),
            by_task: group_by(&rows, |r| r.task.as_ref()),
            rows,
        })
    }

    /// Recomputes every aggregate from the per-case rows.
    pub fn verify(&self) -> Result<(), MetricsError> {
        let fresh = MetricReport::from_rows(self.rows.clone(), self.judge_id.clone(), self.n_resamples, self.bootstrap_seed)?;
        if &fresh != self {
            return Err(MetricsError::Inconsistent("aggregates differ from per-case rows".into()));
        }
        Ok(())
    }

    pub fn write_rows_csv(&self, w: impl Write) -> Result<(), csv::Error> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "case_id",
            "department",
            "task",
            "outcome",
            "predicted",
            "gold",
            "correct",
            "gamma",
            "op_effectiveness",
            "steps",
            "error",
        ])?;
        for r in &self.rows {
            let outcome = match r.outcome {
                RowOutcome::Finalized => "finalized",
                RowOutcome::StepCapReached => "step_cap_reached",
                RowOutcome::Error => "error",
            };
            out.write_record([
                r.case_id.as_str(),
                r.department.as_deref().unwrap_or(""),
                r.task.as_deref().unwrap_or(""),
                outcome,
                r.predicted.as_deref().unwrap_or(""),
                r.gold.as_str(),
                if r.correct { "1" } else { "0" },
                &r.gamma.to_string(),
                &r.op_effectiveness.to_string(),
                &r.steps.to_string(),
                r.error.as_deref().unwrap_or(""),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    /// Department and task breakdowns as long-format CSV.
    pub fn write_breakdown_csv(&self, w: impl Write) -> Result<(), csv::Error> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["group", "key", "n", "accuracy", "op_count_mean", "op_effectiveness_mean"])?;
        for (group, map) in [("department", &self.by_department), ("task", &self.by_task)] {
            for (k, a) in map {
                out.write_record([
                    group,
                    k.as_str(),
                    &a.n.to_string(),
                    &a.accuracy.to_string(),
                    &a.op_count_mean.to_string(),
                    &a.op_effectiveness_mean.to_string(),
                ])?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// Scores a finished session against its case.
pub fn score_session(case: &CaseRecord, result: &SessionResult, cfg: &EvalConfig) -> Result<CaseRow, MetricsError> {
    let t = &result.transcript;
    let finalized = result.trace.outcome == SessionOutcome::Finalized;
    let predicted = if finalized {
        extract_final_answer(t).ok().filter(|p| !p.is_empty())
    } else {
        None
    };
    let verdict = match &predicted {
        Some(p) => Some(judge_accuracy(p, &case.gold_answer, &cfg.accuracy)?),
        None => None,
    };
    Ok(CaseRow {
        case_id: case.case_id.clone(),
        department: case.department.clone(),
        task: case.task.clone(),
        outcome: if finalized {
            RowOutcome::Finalized
        } else {
            RowOutcome::StepCapReached
        },
        predicted,
        gold: case.gold_answer.clone(),
        correct: verdict.as_ref().is_some_and(|v| v.matched),
        gamma: t.physician_count(),
        op_effectiveness: op_effectiveness(t, &case.clinical_info, &cfg.usefulness)?,
        steps: t.steps.len(),
        rationale: verdict.map(|v| v.rationale),
        error: None,
    })
}

/// Runs and scores one case. Engine failures become an error row that
/// counts as incorrect; judge failures abort.
pub fn evaluate_case(
    case: &CaseRecord,
    director: &dyn DirectorClient,
    assistant: &dyn AssistantPort,
    cfg: &EvalConfig,
) -> Result<(CaseRow, Option<SessionResult>), MetricsError> {
    match run_session(case, director, assistant, &cfg.session) {
        Ok(res) => Ok((score_session(case, &res, cfg)?, Some(res))),
        Err(e) => Ok((
            CaseRow {
                case_id: case.case_id.clone(),
                department: case.department.clone(),
                task: case.task.clone(),
                outcome: RowOutcome::Error,
                predicted: None,
                gold: case.gold_answer.clone(),
                correct: false,
                gamma: 0,
                op_effectiveness: 1.0,
                steps: 0,
                rationale: None,
                error: Some(e.to_string()),
            },
            None,
        )),
    }
}

pub type DirectorFactory<'a> = dyn Fn(&CaseRecord) -> Box<dyn DirectorClient> + Sync + Send + 'a;

/// Evaluates every case, in parallel when enabled. Rows keep bank order.
pub fn evaluate_bank(
    bank: &CaseBank,
    director_for: &DirectorFactory<'_>,
    assistant: &dyn AssistantPort,
    cfg: &EvalConfig,
) -> Result<(MetricReport, Vec<Option<SessionResult>>), MetricsError> {
    let results = crate::par::map(bank.cases(), |case| {
        let director = director_for(case);
        evaluate_case(case, director.as_ref(), assistant, cfg)
    });
    let mut rows = Vec::with_capacity(results.len());
    let mut sessions = Vec::with_capacity(results.len());
    for r in results {
        let (row, session) = r?;
        rows.push(row);
        sessions.push(session);
    }
    let report = MetricReport::from_rows(rows, cfg.accuracy.judge_id(), cfg.n_resamples, cfg.bootstrap_seed)?;
    Ok((report, sessions))
}

/// Paired comparison of two runs over the cases they share.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub n_paired: usize,
    /// Cases only the first run got right.
    pub only_first_correct: u64,
    /// Cases only the second run got right.
    pub only_second_correct: u64,
    pub mcnemar_p: f64,
    pub gamma_u: f64,
    pub gamma_p: f64,
}

pub fn compare_reports(a: &MetricReport, b: &MetricReport) -> Result<Comparison, MetricsError> {
    let b_rows: HashMap<&str, &CaseRow> = b.rows.iter().map(|r| (r.case_id.as_str(), r)).collect();
    let paired: Vec<(&CaseRow, &CaseRow)> = a
        .rows
        .iter()
        .filter_map(|r| b_rows.get(r.case_id.as_str()).map(|o| (r, *o)))
        .collect();
    if paired.is_empty() {
        return Err(MetricsError::EmptyInput("reports share no cases".into()));
    }
    let first = paired.iter().filter(|(x, y)| x.correct && !y.correct).count() as u64;
    let second = paired.iter().filter(|(x, y)| !x.correct && y.correct).count() as u64;
    let ga: Vec<f64> = paired.iter().map(|(x, _)| x.gamma as f64).collect();
    let gb: Vec<f64> = paired.iter().map(|(_, y)| y.gamma as f64).collect();
    let mw = mann_whitney_two_sided(&ga, &gb)?;
    Ok(Comparison {
        n_paired: paired.len(),
        only_first_correct: first,
        only_second_correct: second,
        mcnemar_p: mcnemar_two_sided(first, second, McNemarMode::Auto),
        gamma_u: mw.u,
        gamma_p: mw.p_value,
    })
}
