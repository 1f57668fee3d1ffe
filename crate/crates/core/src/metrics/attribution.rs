//! Misdiagnosis accountability: plant a factual error in a correct
//! transcript, then ask a judge whether the model, the physician or both
//! caused it.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use std::sync::LazyLock;

use super::MetricsError;
use crate::llm::JudgeClient;
use crate::prompts;
use crate::protocol::{check_field, emit_transcript, FieldKind, Responder, Transcript};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AttributionLabel {
    #[serde(rename = "LLM")]
    Llm,
    Physician,
    Both,
}

impl AttributionLabel {
    pub const ALL: [AttributionLabel; 3] = [AttributionLabel::Llm, AttributionLabel::Physician, AttributionLabel::Both];

    pub fn as_str(self) -> &'static str {
        match self {
            AttributionLabel::Llm => "LLM",
            AttributionLabel::Physician => "Physician",
            AttributionLabel::Both => "Both",
        }
    }

    fn idx(self) -> usize {
        self as usize
    }

    /// First label word found in a free-text reply.
    pub fn parse_reply(reply: &str) -> Option<AttributionLabel> {
        reply
            .split(|c: char| !c.is_alphanumeric())
            .find_map(|w| match w.to_lowercase().as_str() {
                "llm" | "model" => Some(AttributionLabel::Llm),
                "physician" | "physicians" | "doctor" => Some(AttributionLabel::Physician),
                "both" => Some(AttributionLabel::Both),
                _ => None,
            })
    }
}

impl fmt::Display for AttributionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for AttributionLabel {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "llm" => Ok(AttributionLabel::Llm),
            "physician" => Ok(AttributionLabel::Physician),
            "both" => Ok(AttributionLabel::Both),
            other => Err(format!("unknown attribution label `{other}`")),
        }
    }
}

#[derive(Clone)]
pub enum Mutator {
    /// Rule-based: swap digits in numbers, flip antonyms, toggle negation.
    Deterministic,
    Model(Arc<dyn JudgeClient>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MutatedField {
    pub step: usize,
    pub field: FieldKind,
    pub original: String,
    pub perturbed: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Perturbation {
    pub transcript: Transcript,
    pub label: AttributionLabel,
    pub mutated: Vec<MutatedField>,
}

static NUMBER_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\d+").unwrap());

const ANTONYMS: &[(&str, &str)] = &[
    ("increased", "decreased"),
    ("elevated", "reduced"),
    ("high", "low"),
    ("positive", "negative"),
    ("normal", "abnormal"),
    ("present", "absent"),
    ("left", "right"),
    ("enlarged", "shrunken"),
    ("acute", "chronic"),
];

/// Swaps the last two digits of every number that has two differing ones.
fn swap_numbers(text: &str) -> String {
    NUMBER_RE
        .replace_all(text, |c: &regex::Captures<'_>| {
            let mut d: Vec<char> = c[0].chars().collect();
            let n = d.len();
            if n >= 2 {
                d.swap(n - 1, n - 2);
            }
            d.into_iter().collect::<String>()
        })
        .into_owned()
}

fn flip_antonyms(text: &str) -> String {
    let mut out = Vec::new();
    for word in text.split(' ') {
        let core_start = word.find(|c: char| c.is_alphanumeric()).unwrap_or(word.len());
        let core_end = word.rfind(|c: char| c.is_alphanumeric()).map_or(core_start, |i| i + 1);
        let core = &word[core_start..core_end.max(core_start)];
        let lower = core.to_lowercase();
        let flipped = ANTONYMS.iter().find_map(|&(a, b)| {
            if lower == a {
                Some(b)
            } else if lower == b {
                Some(a)
            } else {
                None
            }
        });
        match flipped {
            Some(f) => {
                let f = if core.chars().next().is_some_and(char::is_uppercase) {
                    let mut c = f.chars();
                    c.next().map(|h| h.to_uppercase().chain(c).collect()).unwrap_or_default()
                } else {
                    f.to_string()
                };
                out.push(format!("{}{}{}", &word[..core_start], f, &word[core_end.max(core_start)..]));
            }
            None => out.push(word.to_string()),
        }
    }
    out.join(" ")
}

fn toggle_negation(text: &str) -> String {
    for neg in ["No ", "no ", "not ", "Not "] {
        if let Some(i) = text.find(neg) {
            if i == 0 || text[..i].ends_with(' ') {
                return format!("{}{}", &text[..i], &text[i + neg.len()..]);
            }
        }
    }
    format!("Not confirmed: {text}")
}

/// Deterministic factual perturbation; always returns different text.
pub fn deterministic_mutation(text: &str) -> String {
    for rule in [swap_numbers, flip_antonyms, toggle_negation] {
        let out = rule(text);
        if out != text && !out.trim().is_empty() {
            return out;
        }
    }
    format!("Not confirmed: {text}")
}

fn mutate(text: &str, mutator: &Mutator) -> Result<String, MetricsError> {
    let out = match mutator {
        Mutator::Deterministic => deterministic_mutation(text),
        Mutator::Model(client) => {
            let reply = client.complete(&prompts::PERTURB_REWRITE.render(&[("text", text)]))?;
            let reply = reply.trim().to_string();
            if reply.is_empty() || reply == text {
                return Err(MetricsError::UnparseableVerdict(reply));
            }
            reply
        }
    };
    check_field("perturbed", &out)?;
    Ok(out)
}

fn apply(t: &mut Transcript, step: usize, field: FieldKind, mutator: &Mutator) -> Result<MutatedField, MetricsError> {
    let s = &mut t.steps[step - 1];
    let slot = match field {
        FieldKind::DeepThink => &mut s.deep_think,
        FieldKind::Question => &mut s.question,
        FieldKind::Answer => s.answer.as_mut().ok_or(MetricsError::InvalidStep(step))?,
        FieldKind::Final => unreachable!("final content is never perturbed"),
    };
    let original = slot.clone();
    let perturbed = mutate(&original, mutator)?;
    *slot = perturbed.clone();
    Ok(MutatedField {
        step,
        field,
        original,
        perturbed,
    })
}

/// Plants an error attributable to `target` around `step`.
///
/// `Llm` rewrites the step's model-authored answer when it is an `<LLM>`
/// step and its deep thinking otherwise. `Physician` rewrites a physician
/// answer: the step's own when it is a `<Physician>` step, else the first
/// one in the transcript. `Both` does one of each, so exactly two fields
/// change.
pub fn perturb_step(
    t: &Transcript,
    step: usize,
    target: AttributionLabel,
    mutator: &Mutator,
) -> Result<Perturbation, MetricsError> {
    let anchor = t.step(step).ok_or(MetricsError::InvalidStep(step))?;
    let physician_step = || {
        if anchor.responder == Responder::Physician && anchor.answer.is_some() {
            Some(step)
        } else {
            t.steps
                .iter()
                .find(|s| s.responder == Responder::Physician && s.answer.is_some())
                .map(|s| s.index)
        }
    };
    let llm_field = match anchor.responder {
        Responder::Llm if anchor.answer.is_some() => FieldKind::Answer,
        _ => FieldKind::DeepThink,
    };
    let mut out = t.clone();
    let mut mutated = Vec::new();
    match target {
        AttributionLabel::Llm => mutated.push(apply(&mut out, step, llm_field, mutator)?),
        AttributionLabel::Physician => {
            let p = physician_step().ok_or(MetricsError::NoPhysicianStep)?;
            mutated.push(apply(&mut out, p, FieldKind::Answer, mutator)?);
        }
        AttributionLabel::Both => {
            let p = physician_step().ok_or(MetricsError::NoPhysicianStep)?;
            let llm = if p == step { FieldKind::DeepThink } else { llm_field };
            mutated.push(apply(&mut out, step, llm, mutator)?);
            mutated.push(apply(&mut out, p, FieldKind::Answer, mutator)?);
        }
    }
    Ok(Perturbation {
        transcript: out,
        label: target,
        mutated,
    })
}

pub trait AttributionJudge: Send + Sync {
    fn id(&self) -> &str;
    fn attribute(&self, perturbed: &Transcript) -> Result<AttributionLabel, MetricsError>;
}

pub struct PromptAttributionJudge<J> {
    pub client: J,
}

impl<J: JudgeClient> AttributionJudge for PromptAttributionJudge<J> {
    fn id(&self) -> &str {
        self.client.id()
    }

    fn attribute(&self, perturbed: &Transcript) -> Result<AttributionLabel, MetricsError> {
        let text = emit_transcript(perturbed)?;
        let reply = self
            .client
            .complete(&prompts::ATTRIBUTE_MISDIAGNOSIS.render(&[("transcript", &text)]))?;
        AttributionLabel::parse_reply(&reply).ok_or(MetricsError::UnparseableVerdict(reply))
    }
}

pub fn attribute_misdiagnosis(perturbed: &Transcript, judge: &dyn AttributionJudge) -> Result<AttributionLabel, MetricsError> {
    judge.attribute(perturbed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub support: u64,
    pub predicted: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionEval {
    pub n: u64,
    /// `confusion[truth][predicted]`, indexed LLM, Physician, Both.
    pub confusion: [[u64; 3]; 3],
    pub per_class: BTreeMap<AttributionLabel, ClassMetrics>,
}

/// Per-class precision and recall over `(truth, predicted)` pairs. A class
/// that is never predicted has precision 0; one that never occurs has
/// recall 0.
pub fn evaluate_attribution(pairs: &[(AttributionLabel, AttributionLabel)]) -> Result<AttributionEval, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::EmptyInput("attribution label set is empty".into()));
    }
    let mut confusion = [[0u64; 3]; 3];
    for &(truth, pred) in pairs {
        confusion[truth.idx()][pred.idx()] += 1;
    }
    let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let per_class = AttributionLabel::ALL
        .iter()
        .map(|&l| {
            let i = l.idx();
            let tp = confusion[i][i];
            let support: u64 = confusion[i].iter().sum();
            let predicted: u64 = confusion.iter().map(|row| row[i]).sum();
            (
                l,
                ClassMetrics {
                    precision: ratio(tp, predicted),
                    recall: ratio(tp, support),
                    support,
                    predicted,
                },
            )
        })
        .collect();
    Ok(AttributionEval {
        n: pairs.len() as u64,
        confusion,
        per_class,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerturbedFixture {
    pub case_id: String,
    pub fixture_id: String,
    pub step: usize,
    pub perturbation: Perturbation,
}

/// Draws `n` perturbations from correct transcripts. Each draw picks a
/// transcript, a step and a target label from a seeded generator; labels
/// that need a physician answer are only drawn when one exists.
pub fn generate_perturbations(
    sources: &[(String, Transcript)],
    n: usize,
    seed: u64,
    mutator: &Mutator,
) -> Result<Vec<PerturbedFixture>, MetricsError> {
    let usable: Vec<&(String, Transcript)> = sources.iter().filter(|(_, t)| !t.steps.is_empty()).collect();
    if usable.is_empty() {
        return Err(MetricsError::EmptyInput("no transcript with steps to perturb".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let (case_id, t) = usable[rng.random_range(0..usable.len())];
        let step = rng.random_range(1..=t.steps.len());
        let has_physician = t
            .steps
            .iter()
            .any(|s| s.responder == Responder::Physician && s.answer.is_some());
        let labels: &[AttributionLabel] = if has_physician {
            &AttributionLabel::ALL
        } else {
            &[AttributionLabel::Llm]
        };
        let label = labels[rng.random_range(0..labels.len())];
        let perturbation = perturb_step(t, step, label, mutator)?;
        out.push(PerturbedFixture {
            case_id: case_id.clone(),
            fixture_id: format!("{case_id}-p{k}"),
            step,
            perturbation,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::{FinalDiagnosis, Step};

    fn transcript(physician: bool) -> Transcript {
        let mut t = Transcript::new("Headache.\nDiagnosis?");
        t.steps.push(Step {
            index: 1,
            deep_think: "Consider hypertension.".into(),
            question: "Measure blood pressure".into(),
            responder: if physician { Responder::Physician } else { Responder::Llm },
            answer: Some("BP 128/79".into()),
        });
        t.steps.push(Step {
            index: 2,
            deep_think: "Pressure is normal.".into(),
            question: "Is a tension headache likely?".into(),
            responder: Responder::Llm,
            answer: Some("Yes, symptoms are typical.".into()),
        });
        t.final_diagnosis = Some(FinalDiagnosis::new("So the final answer is tension headache.").unwrap());
        t
    }

    #[test]
    fn number_swap() {
        assert_eq!(deterministic_mutation("BP 128/79"), "BP 182/97");
        assert_eq!(deterministic_mutation("Pressure is normal."), "Pressure is abnormal.");
        assert_eq!(deterministic_mutation("No fever"), "fever");
        let p = perturb_step(&transcript(true), 1, AttributionLabel::Physician, &Mutator::Deterministic).unwrap();
        assert_eq!(p.transcript.steps[0].answer.as_deref(), Some("BP 182/97"));
        assert_eq!(p.label, AttributionLabel::Physician);
    }

    #[test]
    fn physician_target_needs_physician_step() {
        let r = perturb_step(&transcript(false), 1, AttributionLabel::Physician, &Mutator::Deterministic);
        assert_eq!(r, Err(MetricsError::NoPhysicianStep));
    }

    #[test]
    fn both_mutates_two_fields() {
        for step in [1, 2] {
            let p = perturb_step(&transcript(true), step, AttributionLabel::Both, &Mutator::Deterministic).unwrap();
            assert_eq!(p.mutated.len(), 2);
            let orig = transcript(true);
            let mut changed = 0;
            for (a, b) in orig.steps.iter().zip(&p.transcript.steps) {
                changed += (a.deep_think != b.deep_think) as usize
                    + (a.question != b.question) as usize
                    + (a.answer != b.answer) as usize;
            }
            assert_eq!(changed, 2);
        }
    }

    #[test]
    fn confusion_arithmetic() {
        let truth = [
            AttributionLabel::Llm,
            AttributionLabel::Physician,
            AttributionLabel::Physician,
            AttributionLabel::Both,
        ];
        let pairs: Vec<_> = truth.iter().map(|&t| (t, AttributionLabel::Physician)).collect();
        let e = evaluate_attribution(&pairs).unwrap();
        let p = e.per_class[&AttributionLabel::Physician];
        assert_eq!(p.recall, 1.0);
        assert_eq!(p.precision, 0.5);
        assert_eq!(e.per_class[&AttributionLabel::Llm].precision, 0.0);
        assert_eq!(e.per_class[&AttributionLabel::Llm].recall, 0.0);
        assert!(evaluate_attribution(&[]).is_err());
    }

    #[test]
    fn reply_parsing() {
        assert_eq!(AttributionLabel::parse_reply("Physician."), Some(AttributionLabel::Physician));
        assert_eq!(AttributionLabel::parse_reply("the LLM"), Some(AttributionLabel::Llm));
        assert_eq!(AttributionLabel::parse_reply("unsure"), None);
    }

    #[test]
    fn generation_is_seeded() {
        let src = vec![("a".to_string(), transcript(true)), ("b".to_string(), transcript(false))];
        let x = generate_perturbations(&src, 20, 5, &Mutator::Deterministic).unwrap();
        let y = generate_perturbations(&src, 20, 5, &Mutator::Deterministic).unwrap();
        assert_eq!(x, y);
        for f in &x {
            if f.case_id == "b" {
                assert_eq!(f.perturbation.label, AttributionLabel::Llm);
            }
        }
    }
}
