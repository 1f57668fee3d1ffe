//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit on any FAIL.

#[path = "../../core/tests/support/mod.rs"]
mod support;

mod common;

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use proptest::test_runner::{Config as PropConfig, RngAlgorithm, TestCaseError, TestRng, TestRunner};
use rand::Rng;
use serde_json::{json, Value};

use clinflow::cli::{load_bank, run_report};
use clinflow::sessions::replay_log;
use clinflow::DirectorSource;
use clinflow_core::llm::ReplayModel;
use clinflow_core::masks::{build_masks, masked_nll, MaskMode};
use clinflow_core::metrics::attribution::{
    attribute_misdiagnosis, evaluate_attribution, generate_perturbations, AttributionJudge, AttributionLabel, Mutator,
};
use clinflow_core::metrics::{EvalConfig, MetricsError};
use clinflow_core::preference::{build_pairs, dpo_loss, dpo_loss_grad, PairLogProbs, RewardedResponse, StepSample};
use clinflow_core::protocol::{emit_transcript, emit_with_layout, parse_transcript, Transcript};
use clinflow_core::retrieval::{contrastive_loss, contrastive_loss_grad, FlatIndex};
use clinflow_core::stats::{bootstrap_ci, mann_whitney_two_sided, mcnemar_two_sided, McNemarMode};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit_secs: u64) -> Result<(), String> {
    ensure(elapsed < Duration::from_secs(limit_secs), || {
        format!("took {:.2}s, limit {limit_secs}s", elapsed.as_secs_f64())
    })
}

fn runner(cases: u32) -> TestRunner {
    let cfg = PropConfig {
        cases,
        failure_persistence: None,
        ..PropConfig::default()
    };
    TestRunner::new_with_rng(cfg, TestRng::deterministic_rng(RngAlgorithm::ChaCha))
}

fn protocol_round_trip() -> Outcome {
    let t0 = Instant::now();
    let corpus = support::golden_corpus();
    ensure(corpus.len() == 50, || format!("golden corpus has {} files", corpus.len()))?;
    for (name, text) in &corpus {
        let t = parse_transcript(text).map_err(|e| format!("{name}: {e}"))?;
        let again = emit_transcript(&t).map_err(|e| format!("{name}: {e}"))?;
        ensure(&again == text, || format!("{name}: emit(parse(x)) differs"))?;
    }
    runner(1000)
        .run(&support::transcript(), |t| {
            let text = emit_transcript(&t).map_err(|e| TestCaseError::fail(e.to_string()))?;
            let back = parse_transcript(&text).map_err(|e| TestCaseError::fail(e.to_string()))?;
            let again = emit_transcript(&back).map_err(|e| TestCaseError::fail(e.to_string()))?;
            if back != t || again != text {
                return Err(TestCaseError::fail("round trip changed the transcript"));
            }
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    within(t0.elapsed(), 5)?;
    Ok(format!("50 golden + 1000 generated in {:.2}s", t0.elapsed().as_secs_f64()))
}

fn candidate(i: usize, r: f64) -> RewardedResponse {
    RewardedResponse {
        d: format!("d{i}"),
        q: format!("q{i}"),
        a: String::new(),
        r,
        gamma: 0,
        correct: r > 0.0,
        responder: None,
        is_final: false,
        seed: i as u64,
    }
}

fn reward_pairs() -> Outcome {
    let t0 = Instant::now();
    let levels = [0.0, 10.0 / 3.0, 5.0, 10.0];
    let prefix = Transcript::new("Pain.\nDiagnosis?");
    let mut checked = 0;
    for size in 0..=5u32 {
        for code in 0..4usize.pow(size) {
            let r: Vec<f64> = (0..size).map(|p| levels[(code / 4usize.pow(p)) % 4]).collect();
            let sample = StepSample {
                prefix: prefix.clone(),
                candidates: r.iter().enumerate().map(|(i, &x)| candidate(i, x)).collect(),
                duplicates: false,
            };
            let got: BTreeSet<(u64, u64)> = build_pairs(&sample)
                .map_err(|e| e.to_string())?
                .iter()
                .map(|p| (p.chosen.seed, p.rejected.seed))
                .collect();
            let mut want = BTreeSet::new();
            for m in 0..r.len() {
                for n in 0..r.len() {
                    if r[m] > r[n] {
                        want.insert((m as u64, n as u64));
                    }
                }
            }
            ensure(got == want, || format!("rewards {r:?}: got {got:?}, want {want:?}"))?;
            checked += 1;
        }
    }
    within(t0.elapsed(), 1)?;
    Ok(format!("{checked} reward vectors, exhaustive"))
}

fn rel_err(numeric: f64, analytic: f64) -> f64 {
    (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-8)
}

fn dpo() -> Outcome {
    let zero = dpo_loss(&[PairLogProbs::new(-4.0, -4.0, -7.5, -7.5)], 0.1).map_err(|e| e.to_string())?;
    ensure((zero - 2f64.ln()).abs() <= 1e-12, || format!("zero margin gives {zero}"))?;

    let mut rng = support::rng(11);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(1..=8);
        let beta = [0.1, 0.5, 1.0][rng.random_range(0..3)];
        // Sequence log-probs are large; policy and reference stay close.
        let pairs: Vec<PairLogProbs> = (0..n)
            .map(|_| {
                let chosen = rng.random_range(-200.0..-1.0);
                let rejected = rng.random_range(-200.0..-1.0);
                PairLogProbs::new(
                    chosen,
                    chosen + rng.random_range(-3.0..3.0),
                    rejected,
                    rejected + rng.random_range(-3.0..3.0),
                )
            })
            .collect();
        let (_, grad) = dpo_loss_grad(&pairs, beta).map_err(|e| e.to_string())?;
        for i in 0..n {
            for j in 0..4 {
                let bump = |delta: f64| {
                    let mut p = pairs.clone();
                    let mut a = p[i].to_array();
                    a[j] += delta;
                    p[i] = PairLogProbs::from_array(a);
                    dpo_loss(&p, beta).unwrap()
                };
                let numeric = (bump(h) - bump(-h)) / (2.0 * h);
                worst = worst.max(rel_err(numeric, grad[i].to_array()[j]));
            }
        }
    }
    ensure(worst <= 1e-5, || format!("worst relative gradient error {worst:e}"))?;

    // Far in the tail the batch loss is dominated by other pairs and a
    // difference quotient cannot resolve a 1e-9 gradient, so check the tail
    // on single pairs where the loss itself is tiny.
    let mut worst_tail = 0.0f64;
    for k in 0..100 {
        let m = -40.0 + 0.8 * k as f64;
        let beta = 1.0;
        let pairs = [PairLogProbs::new(m, 0.0, 0.0, 0.0)];
        let (_, g) = dpo_loss_grad(&pairs, beta).map_err(|e| e.to_string())?;
        let at = |x: f64| dpo_loss(&[PairLogProbs::new(x, 0.0, 0.0, 0.0)], beta).unwrap();
        let numeric = (at(m + h) - at(m - h)) / (2.0 * h);
        worst_tail = worst_tail.max(rel_err(numeric, g[0].policy_chosen));
    }
    ensure(worst_tail <= 1e-5, || format!("worst tail gradient error {worst_tail:e}"))?;

    for m in [-700.0, 700.0] {
        let pairs = [PairLogProbs::new(m, 0.0, 0.0, 0.0)];
        let (loss, g) = dpo_loss_grad(&pairs, 1.0).map_err(|e| e.to_string())?;
        ensure(loss.is_finite() && g[0].to_array().iter().all(|x| x.is_finite()), || {
            format!("margin {m}: loss {loss}, grad {:?}", g[0])
        })?;
    }
    Ok(format!("ln2 exact, gradient rel err {worst:.1e} (tail {worst_tail:.1e}), finite at +-700"))
}

fn naive_contrastive(q: &[Vec<f64>], p: &[Vec<f64>]) -> f64 {
    let b = q.len();
    let mut total = 0.0;
    for i in 0..b {
        let mut denom = 0.0;
        let mut pos = 0.0;
        for j in 0..b {
            let mut s = 0.0;
            for k in 0..q[i].len() {
                s += q[i][k] * p[j][k];
            }
            denom += s.exp();
            if i == j {
                pos = s.exp();
            }
        }
        total += -(pos / denom).ln();
    }
    total / b as f64
}

fn contrastive() -> Outcome {
    let one = contrastive_loss(&[vec![0.3, -2.0]], &[vec![1.5, 4.0]]).map_err(|e| e.to_string())?;
    ensure(one == 0.0, || format!("b=1 gives {one}"))?;
    let eye = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    let ortho = contrastive_loss(&eye, &eye).map_err(|e| e.to_string())?;
    let e = std::f64::consts::E;
    ensure((ortho - (-(e / (e + 1.0)).ln())).abs() <= 1e-12, || format!("orthonormal case gives {ortho}"))?;

    let mut rng = support::rng(12);
    let h = 1e-5;
    let mut worst_loss = 0.0f64;
    let mut worst_grad = 0.0f64;
    for _ in 0..100 {
        let b = rng.random_range(1..=8);
        let d = rng.random_range(1..=16);
        let gen = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<Vec<f64>> {
            (0..b).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
        };
        let mut q = gen(&mut rng);
        let mut p = gen(&mut rng);
        let loss = contrastive_loss(&q, &p).map_err(|e| e.to_string())?;
        let reference = if b == 1 { 0.0 } else { naive_contrastive(&q, &p) };
        worst_loss = worst_loss.max((loss - reference).abs());
        let g = contrastive_loss_grad(&q, &p).map_err(|e| e.to_string())?;
        for which in 0..2 {
            for i in 0..b {
                for k in 0..d {
                    let target = if which == 0 { &mut q } else { &mut p };
                    let x = target[i][k];
                    target[i][k] = x + h;
                    let up = contrastive_loss(&q, &p).unwrap();
                    let target = if which == 0 { &mut q } else { &mut p };
                    target[i][k] = x - h;
                    let down = contrastive_loss(&q, &p).unwrap();
                    let target = if which == 0 { &mut q } else { &mut p };
                    target[i][k] = x;
                    let analytic = if which == 0 { g.queries[i][k] } else { g.paragraphs[i][k] };
                    worst_grad = worst_grad.max(rel_err((up - down) / (2.0 * h), analytic));
                }
            }
        }
    }
    ensure(worst_loss <= 1e-10, || format!("worst loss deviation {worst_loss:e}"))?;
    ensure(worst_grad <= 1e-5, || format!("worst relative gradient error {worst_grad:e}"))?;
    Ok(format!("naive oracle dev {worst_loss:.1e}, gradient rel err {worst_grad:.1e}"))
}

fn flat_index() -> Outcome {
    let t0 = Instant::now();
    let mut rng = support::rng(13);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut tied = 0;
    let mut largest = 0;
    for c in 0..100 {
        let n = match c % 10 {
            0 => 10_000,
            1 => 1,
            _ => rng.random_range(2..3_000),
        };
        let d = rng.random_range(1..=64);
        let ties = c % 2 == 0;
        let corpus = support::random_corpus(&mut rng, n, d, ties);
        largest = largest.max(n);
        let mut idx = FlatIndex::new(d);
        idx.add(corpus.clone()).map_err(|e| e.to_string())?;
        let path = dir.path().join(format!("c{c}"));
        idx.save(&path).map_err(|e| e.to_string())?;
        let loaded = FlatIndex::load(&path).map_err(|e| e.to_string())?;
        for _ in 0..3 {
            let q = support::random_vector(&mut rng, d, ties);
            let k = [1, 10, n][rng.random_range(0..3)];
            let want = support::brute_force_topk(&corpus, &q, k);
            let got: Vec<(String, f64)> = idx
                .search_vector(&q, k)
                .map_err(|e| e.to_string())?
                .into_iter()
                .map(|h| (h.doc_id, h.score))
                .collect();
            ensure(got == want, || format!("corpus {c} (n={n}, d={d}, k={k}) ranking differs from full scan"))?;
            let reloaded: Vec<(String, f64)> = loaded
                .search_vector(&q, k)
                .map_err(|e| e.to_string())?
                .into_iter()
                .map(|h| (h.doc_id, h.score))
                .collect();
            ensure(reloaded == got, || format!("corpus {c}: persisted ranking differs"))?;
            if want.windows(2).any(|w| w[0].1 == w[1].1) {
                tied += 1;
            }
        }
    }
    ensure(tied > 0, || "no query exercised a tie".into())?;
    within(t0.elapsed(), 30)?;
    Ok(format!(
        "100 corpora up to {largest} entries, {tied} tied rankings, {:.2}s",
        t0.elapsed().as_secs_f64()
    ))
}

fn masks() -> Outcome {
    let doc = support::clinical_doc();
    runner(200)
        .run(&support::full_transcript(), |t| {
            let fail = |m: String| TestCaseError::fail(m);
            let pair = support::pair_for(&t);
            let r = build_masks(&pair, &doc, MaskMode::Reasoning).map_err(|e| fail(e.to_string()))?;
            let k = build_masks(&pair, &doc, MaskMode::Knowledge).map_err(|e| fail(e.to_string()))?;
            let shift = k.full_text.chars().count() - r.full_text.chars().count();
            let (text, layout) = emit_with_layout(&t).map_err(|e| fail(e.to_string()))?;
            let to_char = |b: usize| text[..b].chars().count();
            let content: BTreeSet<usize> = layout
                .iter()
                .flat_map(|f| to_char(f.range.start)..to_char(f.range.end))
                .collect();
            let rs: BTreeSet<usize> = r.spans.iter().flat_map(|&[s, e]| s..e).collect();
            let ks: BTreeSet<usize> = k.spans.iter().flat_map(|&[s, e]| (s - shift)..(e - shift)).collect();
            if !rs.is_disjoint(&ks) {
                return Err(fail("reasoning and knowledge spans overlap".into()));
            }
            if rs.union(&ks).copied().collect::<BTreeSet<_>>() != content {
                return Err(fail("spans do not cover the step content".into()));
            }
            Ok(())
        })
        .map_err(|e| e.to_string())?;

    let mut rng = support::rng(14);
    for _ in 0..200 {
        let n = rng.random_range(1..300);
        let lp: Vec<f64> = (0..n).map(|_| -rng.random_range(0.0..15.0)).collect();
        let spans: Vec<[usize; 2]> = (0..rng.random_range(1..6))
            .map(|_| {
                let s = rng.random_range(0..n);
                [s, rng.random_range(s + 1..=n)]
            })
            .collect();
        let mut expected = 0.0;
        for (i, &x) in lp.iter().enumerate() {
            if spans.iter().any(|&[s, e]| s <= i && i < e) {
                expected -= x;
            }
        }
        let got = masked_nll(&lp, &spans).map_err(|e| e.to_string())?;
        ensure((got - expected).abs() <= 1e-12, || format!("nll {got} vs brute force {expected}"))?;
    }
    Ok("200 transcripts partitioned, 200 nll re-sums exact".into())
}

fn statistics() -> Outcome {
    let p = mcnemar_two_sided(10, 0, McNemarMode::Exact);
    ensure((p - 2.0 * 2f64.powi(-10)).abs() <= 1e-12, || format!("McNemar (10,0) p = {p}"))?;
    let mut rng = support::rng(15);
    for _ in 0..1000 {
        let n = rng.random_range(1..15);
        let m = rng.random_range(1..15);
        let draw = |rng: &mut rand_chacha::ChaCha8Rng, k: usize| -> Vec<f64> {
            (0..k).map(|_| rng.random_range(0..8) as f64).collect()
        };
        let xs = draw(&mut rng, n);
        let ys = draw(&mut rng, m);
        let u1 = mann_whitney_two_sided(&xs, &ys).map_err(|e| e.to_string())?.u;
        let u2 = mann_whitney_two_sided(&ys, &xs).map_err(|e| e.to_string())?.u;
        ensure(u1 + u2 == (n * m) as f64, || format!("U1+U2 = {} for n={n}, m={m}", u1 + u2))?;
        let mut brute = 0.0;
        for x in &xs {
            for y in &ys {
                brute += if x > y { 1.0 } else if x == y { 0.5 } else { 0.0 };
            }
        }
        ensure(u1 == brute, || format!("U = {u1}, pair count = {brute}"))?;
    }
    let ci = bootstrap_ci(&[0.4; 30], 1000, 7).map_err(|e| e.to_string())?;
    ensure(ci.low == 0.4 && ci.high == 0.4, || format!("constant data gives {ci:?}"))?;
    Ok("McNemar exact, 1000 U identities and pair counts, constant bootstrap degenerate".into())
}

fn end_to_end() -> Outcome {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let run = |tag: &str| -> Result<Vec<u8>, String> {
        let out = dir.path().join(format!("{tag}.json"));
        let status = Command::new(env!("CARGO_BIN_EXE_clinflow"))
            .args(["run", "--bank"])
            .arg(common::fixture("bank10.jsonl"))
            .arg("--replay")
            .arg(common::fixture("director10.jsonl"))
            .arg("--out")
            .arg(&out)
            .env_remove("CLINFLOW_CONFIG")
            .status()
            .map_err(|e| e.to_string())?;
        ensure(status.success(), || format!("cli run exited with {status}"))?;
        fs::read(&out).map_err(|e| e.to_string())
    };
    let first = run("a")?;
    let second = run("b")?;
    ensure(first == second, || "re-run is not bit-identical".into())?;
    let report: Value = serde_json::from_slice(&first).map_err(|e| e.to_string())?;
    let f = |k: &str| report[k].as_f64().unwrap_or(f64::NAN);
    // Answer key: 7 of 10 correct; gammas 1,0,2,2,1,3,1,1,0,2; useful shares
    // 1,1,1,1/2,1,2/3,0,1,1,1.
    ensure(report["n"] == 10, || format!("n = {}", report["n"]))?;
    ensure(f("accuracy") == 0.7, || format!("accuracy {}", f("accuracy")))?;
    ensure((f("op_count_mean") - 13.0 / 10.0).abs() < 1e-12, || format!("gamma mean {}", f("op_count_mean")))?;
    ensure((f("op_effectiveness_mean") - 49.0 / 60.0).abs() < 1e-12, || {
        format!("effectiveness {}", f("op_effectiveness_mean"))
    })?;
    let cardio = &report["by_department"]["cardiology"];
    ensure(cardio["op_count_mean"] == 2.0, || format!("cardiology gamma mean {}", cardio["op_count_mean"]))?;
    within(t0.elapsed(), 10)?;
    Ok(format!("key matched, bit-identical re-run, {:.2}s", t0.elapsed().as_secs_f64()))
}

struct PlantedLabelJudge(HashMap<String, AttributionLabel>);

impl AttributionJudge for PlantedLabelJudge {
    fn id(&self) -> &str {
        "planted"
    }
    fn attribute(&self, t: &Transcript) -> Result<AttributionLabel, MetricsError> {
        let key = emit_transcript(t)?;
        self.0
            .get(&key)
            .copied()
            .ok_or_else(|| MetricsError::UnparseableVerdict("unknown transcript".into()))
    }
}

struct ConstantJudge(AttributionLabel);

impl AttributionJudge for ConstantJudge {
    fn id(&self) -> &str {
        "constant"
    }
    fn attribute(&self, _: &Transcript) -> Result<AttributionLabel, MetricsError> {
        Ok(self.0)
    }
}

fn accountability() -> Outcome {
    let bank = load_bank(&common::fixture("bank10.jsonl")).map_err(|e| e.to_string())?;
    let replay = ReplayModel::load(&common::fixture("director10.jsonl")).map_err(|e| e.to_string())?;
    let (_, sessions) =
        run_report(&bank, &DirectorSource::Replay(replay.into()), &EvalConfig::default()).map_err(|e| e.to_string())?;
    let sources: Vec<(String, Transcript)> = sessions
        .into_iter()
        .filter(|s| s.correct)
        .map(|s| (s.case_id, s.transcript))
        .collect();
    let fixtures = generate_perturbations(&sources, 60, 2024, &Mutator::Deterministic).map_err(|e| e.to_string())?;
    ensure(fixtures.len() == 60, || format!("{} fixtures", fixtures.len()))?;

    let mut planted = HashMap::new();
    for f in &fixtures {
        let key = emit_transcript(&f.perturbation.transcript).map_err(|e| e.to_string())?;
        if let Some(prev) = planted.insert(key, f.perturbation.label) {
            ensure(prev == f.perturbation.label, || format!("{} collides with a differently labelled fixture", f.fixture_id))?;
        }
    }
    let oracle = PlantedLabelJudge(planted);
    let mut pairs = Vec::new();
    for f in &fixtures {
        let pred = attribute_misdiagnosis(&f.perturbation.transcript, &oracle).map_err(|e| e.to_string())?;
        pairs.push((f.perturbation.label, pred));
    }
    let eval = evaluate_attribution(&pairs).map_err(|e| e.to_string())?;
    for (label, m) in &eval.per_class {
        ensure(m.support > 0, || format!("no {label:?} fixtures"))?;
        ensure(m.precision == 1.0 && m.recall == 1.0, || format!("{label:?}: {m:?}"))?;
    }

    let support: Vec<u64> = AttributionLabel::ALL
        .iter()
        .map(|l| fixtures.iter().filter(|f| f.perturbation.label == *l).count() as u64)
        .collect();
    for (ci, &constant) in AttributionLabel::ALL.iter().enumerate() {
        let judge = ConstantJudge(constant);
        let pairs: Vec<_> = fixtures
            .iter()
            .map(|f| (f.perturbation.label, attribute_misdiagnosis(&f.perturbation.transcript, &judge).unwrap()))
            .collect();
        let eval = evaluate_attribution(&pairs).map_err(|e| e.to_string())?;
        for (ti, truth) in AttributionLabel::ALL.iter().enumerate() {
            for pi in 0..3 {
                let want = if pi == ci { support[ti] } else { 0 };
                ensure(eval.confusion[ti][pi] == want, || format!("constant {constant:?}: confusion {:?}", eval.confusion))?;
            }
            let m = eval.per_class[truth];
            let (p, r) = if ti == ci { (support[ti] as f64 / 60.0, 1.0) } else { (0.0, 0.0) };
            ensure(m.precision == p && m.recall == r, || format!("constant {constant:?}, class {truth:?}: {m:?}"))?;
        }
    }
    Ok(format!("60 fixtures (LLM/Physician/Both = {support:?}), oracle P=R=1, constant judges match"))
}

fn service_state_machine() -> Outcome {
    let logs = tempfile::tempdir().map_err(|e| e.to_string())?;
    let server = common::spawn_server(common::two_case_director(), Some(logs.path().to_path_buf()), None);
    let c = common::Client::new(&server);
    let (status, body) = c.post(
        "/sessions",
        &json!({ "case": common::case_json("h1", ("Labs", "Serum lipase 1200 U/L"), "acute pancreatitis") }),
    );
    ensure(status == 201, || format!("start returned {status}: {body}"))?;
    ensure(body["state"] == "running" || body["state"] == "awaiting_physician", || format!("initial state {}", body["state"]))?;
    let id = body["session_id"].as_str().unwrap_or_default().to_string();
    c.wait_for(&id, "awaiting_physician");
    let (status, _) = c.post(&format!("/sessions/{id}/fulfill"), &json!({ "step": 3, "answer": "x" }));
    ensure(status == 409, || format!("wrong-step fulfill returned {status}"))?;
    let (status, body) = c.post(&format!("/sessions/{id}/fulfill"), &json!({ "step": 1, "answer": "Lipase 1200 U/L" }));
    ensure(status == 200 && body["state"] == "running", || format!("fulfill returned {status}: {body}"))?;
    let view = c.wait_for(&id, "final");
    let (status, _) = c.post(&format!("/sessions/{id}/fulfill"), &json!({ "step": 1, "answer": "again" }));
    ensure(status == 409, || format!("fulfill on a final session returned {status}"))?;
    let (_, events) = c.get(&format!("/sessions/{id}/events"));
    let kinds: Vec<&str> = events["events"]
        .as_array()
        .map(|a| a.iter().filter_map(|e| e["event"].as_str()).collect())
        .unwrap_or_default();
    let order = ["started", "awaiting_physician", "answer_recorded", "finalized"];
    let mut at = 0;
    for k in &kinds {
        if at < order.len() && *k == order[at] {
            at += 1;
        }
    }
    ensure(at == order.len(), || format!("event order {kinds:?}"))?;
    let served: Transcript = serde_json::from_value(view["transcript"].clone()).map_err(|e| e.to_string())?;
    let path = server.manager.log_path(&id).ok_or("no log path")?;
    let replayed = replay_log(&path).map_err(|e| e.to_string())?;
    ensure(replayed == served, || "event-log replay differs from the served transcript".into())?;
    ensure(emit_transcript(&replayed).ok().as_deref() == view["transcript_text"].as_str(), || {
        "replayed text differs".into()
    })?;
    Ok("running -> awaiting_physician -> running -> final, 409s, log replay exact".into())
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("protocol round-trip", protocol_round_trip),
        ("reward/pair oracle", reward_pairs),
        ("DPO loss", dpo),
        ("contrastive loss", contrastive),
        ("flat index exactness", flat_index),
        ("masks partition", masks),
        ("statistics", statistics),
        ("end-to-end scripted episode", end_to_end),
        ("accountability harness", accountability),
        ("service state machine", service_state_machine),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let t0 = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = t0.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {name} ({secs:.2}s): {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name} ({secs:.2}s): {why}");
            }
        }
    }
    if failed == 0 {
        println!("acceptance: all {} criteria passed", criteria.len());
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failed} of {} criteria failed", criteria.len());
        ExitCode::FAILURE
    }
}
