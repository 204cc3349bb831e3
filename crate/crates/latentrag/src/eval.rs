//! Metrics and cost accounting: exact match, retrieval success and overlap,
//! forward-pass summaries, latency breakdowns, and the max-length ratio that
//! governs how much parallel decoding can save.
//!
//! Everything here is a pure function over completed artifacts (answer
//! strings, retrieved id/text lists, ledgers), so the same metrics apply to
//! latent trajectories, teacher runs, and explicit-mode simulations alike.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::agent::format_information_block;
use crate::error::{Error, Result};
use crate::infer::LlmSession;
use crate::ledger::{EventKind, ForwardPassLedger, LedgerEvent, Stage};
use crate::model::LlmModel;
use crate::params::ParamStore;
use crate::synth::TeacherTrajectory;
use crate::vocab::Vocabulary;

// ── answer normalization and exact match ───────────────────────────────────

/// Lowercase, strip punctuation, drop the articles a/an/the, collapse
/// whitespace.
pub fn normalize_answer(s: &str) -> String {
    let lower = s.to_lowercase();
    let no_punct: String = lower.chars().filter(|c| !c.is_ascii_punctuation()).collect();
    no_punct
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// 1 iff the normalized prediction equals any normalized gold answer.
pub fn em_score(pred: &str, golds: &[String]) -> Result<u32> {
    if golds.is_empty() {
        return Err(Error::Parameter("exact match needs at least one gold answer".into()));
    }
    let p = normalize_answer(pred);
    Ok(u32::from(golds.iter().any(|g| normalize_answer(g) == p)))
}

/// Mean exact match over (prediction, golds) pairs.
pub fn mean_em(pairs: &[(String, Vec<String>)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Parameter("exact match over an empty set".into()));
    }
    let mut total = 0u32;
    for (pred, golds) in pairs {
        total += em_score(pred, golds)?;
    }
    Ok(f64::from(total) / pairs.len() as f64)
}

// ── retrieval quality ──────────────────────────────────────────────────────

/// What one question retrieved, step by step, next to its gold answers.
#[derive(Debug, Clone)]
pub struct RetrievalOutcome {
    /// Document texts fetched at each retrieval step, in rank order.
    pub step_doc_texts: Vec<Vec<String>>,
    pub gold_answers: Vec<String>,
}

/// Fraction of retrieval steps whose fetched text contains a gold answer
/// (normalized substring match).  `None` when there were no retrieval steps
/// at all — absent, not zero.
pub fn retrieval_success_rate(outcomes: &[RetrievalOutcome]) -> Option<f64> {
    let mut steps = 0usize;
    let mut hits = 0usize;
    for outcome in outcomes {
        let golds: Vec<String> =
            outcome.gold_answers.iter().map(|g| normalize_answer(g)).collect();
        for step in &outcome.step_doc_texts {
            steps += 1;
            let hit = step.iter().any(|text| {
                let t = normalize_answer(text);
                golds.iter().any(|g| !g.is_empty() && t.contains(g.as_str()))
            });
            hits += usize::from(hit);
        }
    }
    (steps > 0).then(|| hits as f64 / steps as f64)
}

/// Micro-averaged overlap between our retrieved documents and a reference
/// agent's: `Σ|ref ∩ ours| / Σ|ref|` over questions, where each question's
/// set is the union over its steps.  Both maps must cover the same
/// questions.
pub fn retrieval_overlap(
    ours: &BTreeMap<String, BTreeSet<String>>,
    reference: &BTreeMap<String, BTreeSet<String>>,
) -> Result<f64> {
    if ours.keys().ne(reference.keys()) {
        return Err(Error::Data(
            "overlap requires the same questions on both sides".into(),
        ));
    }
    let mut inter = 0usize;
    let mut denom = 0usize;
    for (question, ref_docs) in reference {
        let our_docs = &ours[question];
        inter += ref_docs.intersection(our_docs).count();
        denom += ref_docs.len();
    }
    if denom == 0 {
        return Err(Error::Parameter(
            "reference trajectories retrieved no documents".into(),
        ));
    }
    Ok(inter as f64 / denom as f64)
}

// ── forward-pass accounting ────────────────────────────────────────────────

/// Pass and token totals for one stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StageCount {
    pub stage: Stage,
    pub passes: usize,
    pub input_tokens: usize,
    pub output_tokens: usize,
}

/// Per-stage and overall pass/token accounting for one ledger.
#[derive(Debug, Clone, Serialize)]
pub struct ForwardPassSummary {
    pub per_stage: Vec<StageCount>,
    pub total_passes: usize,
    /// Stage-proper input tokens (slot blocks, prompts).
    pub total_input_tokens: usize,
    /// Pending-context tokens ingested alongside stage inputs.
    pub total_context_tokens: usize,
    pub total_output_tokens: usize,
}

/// Tally a ledger into per-stage passes and token counts.  Parallel forwards
/// count one pass regardless of width; decode steps count one each; index
/// queries are excluded from passes but still contribute token counts.
pub fn forward_pass_summary(ledger: &ForwardPassLedger) -> ForwardPassSummary {
    let mut per_stage: Vec<StageCount> = Stage::ALL
        .iter()
        .map(|&stage| StageCount { stage, passes: 0, input_tokens: 0, output_tokens: 0 })
        .collect();
    let mut total_context = 0usize;
    for event in &ledger.events {
        let slot = per_stage
            .iter_mut()
            .find(|s| s.stage == event.stage)
            .expect("Stage::ALL covers every stage");
        if matches!(event.kind, EventKind::ParallelForward | EventKind::AutoregressiveDecode) {
            slot.passes += 1;
        }
        slot.input_tokens += event.stage_tokens;
        slot.output_tokens += event.tokens_out;
        total_context += event.context_tokens;
    }
    ForwardPassSummary {
        total_passes: per_stage.iter().map(|s| s.passes).sum(),
        total_input_tokens: per_stage.iter().map(|s| s.input_tokens).sum(),
        total_context_tokens: total_context,
        total_output_tokens: per_stage.iter().map(|s| s.output_tokens).sum(),
        per_stage,
    }
}

/// `max(lengths) / sum(lengths)` — the fraction of decode steps the longest
/// thought or subquery sequence forces under batched parallel decoding.
pub fn max_length_ratio(lengths: &[usize]) -> Result<f64> {
    if lengths.is_empty() {
        return Err(Error::Parameter("length ratio of an empty set is undefined".into()));
    }
    if lengths.contains(&0) {
        return Err(Error::Parameter("decoded sequences must have positive length".into()));
    }
    let max = *lengths.iter().max().expect("nonempty") as f64;
    let sum: usize = lengths.iter().sum();
    Ok(max / sum as f64)
}

// ── latency ────────────────────────────────────────────────────────────────

/// Mean per-stage wall-clock cost across ledgers, absolute and relative.
#[derive(Debug, Clone, Serialize)]
pub struct LatencyBreakdown {
    /// (stage, mean milliseconds) in `Stage::ALL` order.
    pub stage_mean_ms: Vec<(Stage, f64)>,
    /// (stage, percentage of total) in the same order; sums to 100.
    pub stage_percent: Vec<(Stage, f64)>,
    pub mean_total_ms: f64,
}

/// Average stage durations over one or more ledgers.  Retrieval embedding
/// time is already attributed to subquery generation by the recorder, so no
/// re-bucketing happens here.
pub fn latency_breakdown(ledgers: &[&ForwardPassLedger]) -> Result<LatencyBreakdown> {
    if ledgers.is_empty() {
        return Err(Error::Parameter("latency breakdown needs at least one ledger".into()));
    }
    let n = ledgers.len() as f64;
    let mut stage_mean_ms = Vec::with_capacity(Stage::ALL.len());
    for &stage in &Stage::ALL {
        let total: u64 = ledgers.iter().map(|l| l.stage_micros(stage)).sum();
        stage_mean_ms.push((stage, total as f64 / 1000.0 / n));
    }
    let mean_total_ms: f64 = stage_mean_ms.iter().map(|(_, ms)| ms).sum();
    if mean_total_ms <= 0.0 {
        return Err(Error::Numeric("ledgers carry no recorded durations".into()));
    }
    let stage_percent = stage_mean_ms
        .iter()
        .map(|&(stage, ms)| (stage, 100.0 * ms / mean_total_ms))
        .collect();
    Ok(LatencyBreakdown { stage_mean_ms, stage_percent, mean_total_ms })
}

// ── explicit-mode simulation ───────────────────────────────────────────────

/// Replay a teacher trajectory through the model as if every thought,
/// subquery, and answer token had been generated autoregressively — the
/// cost profile of an explicit agentic RAG baseline over the same
/// reasoning.  The question and each information block ride as context with
/// the next segment's first decode event, so the ledger contains no
/// parallel forwards and its pass count equals total output tokens exactly.
pub fn simulate_explicit_teacher(
    model: &LlmModel,
    store: &ParamStore,
    vocab: &Vocabulary,
    trajectory: &TeacherTrajectory,
) -> Result<ForwardPassLedger> {
    let last = trajectory.steps.len().checked_sub(1).ok_or_else(|| {
        Error::Data(format!("trajectory '{}' has no steps to replay", trajectory.item_id))
    })?;
    let mut session = LlmSession::new(model, store);
    let mut ledger = ForwardPassLedger::new();
    let mut pending = vocab.tokenize(&trajectory.question)?;
    for (i, step) in trajectory.steps.iter().enumerate() {
        let thought = vocab.tokenize(&step.thought)?;
        session.force_split(&mut ledger, Stage::ThoughtGen, &pending, &thought)?;
        pending.clear();
        match (&step.subquery, &step.retrieved, i == last) {
            (Some(subquery), Some(docs), false) => {
                let subquery_ids = vocab.tokenize(subquery)?;
                session.force_split(&mut ledger, Stage::SubqueryGen, &[], &subquery_ids)?;
                ledger.record(LedgerEvent {
                    stage: Stage::Retrieval,
                    kind: EventKind::IndexQuery,
                    context_tokens: 0,
                    stage_tokens: 0,
                    tokens_out: 0,
                    micros: 0,
                });
                pending = format_information_block(docs, vocab)?;
            }
            (None, None, true) => {}
            _ => {
                return Err(Error::Data(format!(
                    "trajectory '{}': step {i} is malformed — only the final \
                     step may omit the subquery",
                    trajectory.item_id
                )));
            }
        }
    }
    let answer = vocab.tokenize(&trajectory.answer)?;
    session.force_split(&mut ledger, Stage::AnswerGen, &pending, &answer)?;
    Ok(ledger)
}

// ── aggregate report ───────────────────────────────────────────────────────

/// One evaluated configuration: accuracy, cost, and retrieval quality.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub n_questions: usize,
    pub em: f64,
    pub mean_passes: f64,
    /// (stage, mean passes per question) in `Stage::ALL` order.
    pub stage_mean_passes: Vec<(Stage, f64)>,
    pub mean_output_tokens: f64,
    pub retrieval_success: Option<f64>,
    pub retrieval_overlap: Option<f64>,
    pub max_length_ratio: Option<f64>,
    pub latency: Option<LatencyBreakdown>,
}

impl EvalReport {
    /// Aggregate per-question artifacts into one report.
    pub fn compute(
        answers: &[(String, Vec<String>)],
        ledgers: &[&ForwardPassLedger],
        outcomes: &[RetrievalOutcome],
        overlap: Option<f64>,
        decoded_lengths: Option<&[usize]>,
    ) -> Result<EvalReport> {
        if answers.is_empty() || ledgers.len() != answers.len() {
            return Err(Error::Parameter(format!(
                "report needs matching answers and ledgers, got {} and {}",
                answers.len(),
                ledgers.len()
            )));
        }
        let n = answers.len();
        let summaries: Vec<ForwardPassSummary> =
            ledgers.iter().map(|l| forward_pass_summary(l)).collect();
        let mean_passes =
            summaries.iter().map(|s| s.total_passes).sum::<usize>() as f64 / n as f64;
        let stage_mean_passes = Stage::ALL
            .iter()
            .map(|&stage| {
                let total: usize = summaries
                    .iter()
                    .map(|s| {
                        s.per_stage
                            .iter()
                            .find(|c| c.stage == stage)
                            .map_or(0, |c| c.passes)
                    })
                    .sum();
                (stage, total as f64 / n as f64)
            })
            .collect();
        let mean_output_tokens =
            summaries.iter().map(|s| s.total_output_tokens).sum::<usize>() as f64 / n as f64;
        Ok(EvalReport {
            n_questions: n,
            em: mean_em(answers)?,
            mean_passes,
            stage_mean_passes,
            mean_output_tokens,
            retrieval_success: retrieval_success_rate(outcomes),
            retrieval_overlap: overlap,
            max_length_ratio: match decoded_lengths {
                Some(lengths) => Some(max_length_ratio(lengths)?),
                None => None,
            },
            latency: latency_breakdown(ledgers).ok(),
        })
    }

    /// Two-column metric table.
    pub fn to_tsv(&self) -> String {
        let mut lines = vec![
            format!("questions\t{}", self.n_questions),
            format!("em\t{:.4}", self.em),
            format!("mean_passes\t{:.2}", self.mean_passes),
            format!("mean_output_tokens\t{:.2}", self.mean_output_tokens),
        ];
        for (stage, passes) in &self.stage_mean_passes {
            lines.push(format!("passes.{}\t{passes:.2}", stage.name()));
        }
        for (label, value) in [
            ("retrieval_success", self.retrieval_success),
            ("retrieval_overlap", self.retrieval_overlap),
            ("max_length_ratio", self.max_length_ratio),
        ] {
            match value {
                Some(v) => lines.push(format!("{label}\t{v:.4}")),
                None => lines.push(format!("{label}\tabsent")),
            }
        }
        if let Some(lat) = &self.latency {
            lines.push(format!("latency_ms\t{:.3}", lat.mean_total_ms));
            for (stage, ms) in &lat.stage_mean_ms {
                lines.push(format!("latency_ms.{}\t{ms:.3}", stage.name()));
            }
        }
        lines.join("\n") + "\n"
    }

    /// Plot-ready long-format rows: `stage<TAB>method<TAB>value`.
    pub fn series(&self, method: &str) -> String {
        let mut lines = Vec::new();
        for (stage, passes) in &self.stage_mean_passes {
            lines.push(format!("{}\t{method}\t{passes:.4}", stage.name()));
        }
        lines.join("\n") + "\n"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ledger::LedgerEvent;
    use proptest::prelude::*;

    fn ev(stage: Stage, kind: EventKind, stage_tokens: usize, tokens_out: usize) -> LedgerEvent {
        LedgerEvent { stage, kind, context_tokens: 0, stage_tokens, tokens_out, micros: 0 }
    }

    /// Ledger of a latent trajectory with `s` retrieval steps and an
    /// `a`-token answer, following the recording protocol.
    fn latent_ledger(s: usize, a: usize, m: usize, n: usize) -> ForwardPassLedger {
        let mut ledger = ForwardPassLedger::new();
        ledger.record(ev(Stage::Prefill, EventKind::ParallelForward, m, 0));
        for step in 0..s {
            if step > 0 {
                ledger.record(ev(Stage::ThoughtGen, EventKind::ParallelForward, m, 0));
            }
            ledger.record(ev(Stage::SubqueryGen, EventKind::ParallelForward, n, 0));
            ledger.record(ev(Stage::Retrieval, EventKind::IndexQuery, 0, 0));
        }
        if s > 0 {
            ledger.record(ev(Stage::ThoughtGen, EventKind::ParallelForward, m, 0));
        }
        for _ in 0..a {
            ledger.record(ev(Stage::AnswerGen, EventKind::AutoregressiveDecode, 0, 1));
        }
        ledger
    }

    #[test]
    fn normalization_applies_case_punctuation_article_and_space_rules() {
        assert_eq!(normalize_answer("London "), "london");
        assert_eq!(normalize_answer("The Beginning or the End"), "beginning or end");
        assert_eq!(normalize_answer(""), "");
        assert_eq!(normalize_answer("Sir John Chilcot."), "sir john chilcot");
        assert_eq!(normalize_answer("  a   An THE  "), "");
        // Articles are removed only as standalone words.
        assert_eq!(normalize_answer("theater of anarchy"), "theater of anarchy");
        assert_eq!(normalize_answer("Saint-Denis"), "saintdenis");
    }

    #[test]
    fn exact_match_golden_cases() {
        let gold = |s: &str| vec![s.to_string()];
        assert_eq!(em_score("london", &gold("London")).unwrap(), 1);
        assert_eq!(em_score("Sir John Chilcott", &gold("Sir John Chilcot")).unwrap(), 0);
        assert_eq!(em_score("Montmoreiras", &gold("Montmorency")).unwrap(), 0);
        let multi = vec!["Paris".to_string(), "City of Light".to_string()];
        assert_eq!(em_score("the city of light", &multi).unwrap(), 1);
        assert!(matches!(em_score("x", &[]), Err(Error::Parameter(_))));
        let pairs = vec![
            ("london".to_string(), gold("London")),
            ("wrong".to_string(), gold("Paris")),
        ];
        assert!((mean_em(&pairs).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn success_rate_counts_steps_and_reports_absence() {
        let outcome = |steps: Vec<Vec<&str>>, gold: &str| RetrievalOutcome {
            step_doc_texts: steps
                .into_iter()
                .map(|docs| docs.into_iter().map(String::from).collect())
                .collect(),
            gold_answers: vec![gold.to_string()],
        };
        // 3 of 4 steps contain their answer.
        let fixture = vec![
            outcome(
                vec![
                    vec!["the birth place of ada is Lima ."],
                    vec!["noise", "lima is pleasant"],
                ],
                "Lima",
            ),
            outcome(vec![vec!["irrelevant"], vec!["the answer oslo appears"]], "Oslo"),
        ];
        assert!((retrieval_success_rate(&fixture).unwrap() - 0.75).abs() < 1e-12);
        // All successful.
        let all = vec![outcome(vec![vec!["contains tokyo"]], "Tokyo")];
        assert!((retrieval_success_rate(&all).unwrap() - 1.0).abs() < 1e-12);
        // No retrieval steps: absent, not zero.
        let none = vec![outcome(vec![], "x")];
        assert!(retrieval_success_rate(&none).is_none());
    }

    #[test]
    fn overlap_is_micro_averaged_set_arithmetic() {
        let set = |ids: &[&str]| ids.iter().map(|s| s.to_string()).collect::<BTreeSet<_>>();
        let q = |name: &str, ids: &[&str]| (name.to_string(), set(ids));
        let ours: BTreeMap<_, _> = [q("q1", &["d2", "d3", "d9"])].into();
        let reference: BTreeMap<_, _> = [q("q1", &["d1", "d2", "d3"])].into();
        assert!((retrieval_overlap(&ours, &reference).unwrap() - 2.0 / 3.0).abs() < 1e-12);

        let same: BTreeMap<_, _> = [q("q1", &["d1", "d2"])].into();
        assert!((retrieval_overlap(&same, &same.clone()).unwrap() - 1.0).abs() < 1e-12);

        let disjoint: BTreeMap<_, _> = [q("q1", &["d7"])].into();
        let reference1: BTreeMap<_, _> = [q("q1", &["d1"])].into();
        assert_eq!(retrieval_overlap(&disjoint, &reference1).unwrap(), 0.0);

        // Micro average weights questions by reference-set size:
        // (2 + 1) / (3 + 1), not the macro mean of {2/3, 1}.
        let ours2: BTreeMap<_, _> = [q("q1", &["b", "c", "x"]), q("q2", &["d"])].into();
        let ref2: BTreeMap<_, _> = [q("q1", &["a", "b", "c"]), q("q2", &["d"])].into();
        assert!((retrieval_overlap(&ours2, &ref2).unwrap() - 0.75).abs() < 1e-12);

        let unpaired: BTreeMap<_, _> = [q("q3", &["d1"])].into();
        assert!(matches!(
            retrieval_overlap(&unpaired, &reference1),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn latent_trajectory_summary_matches_the_pass_identity() {
        // 2 retrieval steps, 6 answer tokens: 2·2 + 1 + 6 = 11 passes.
        let ledger = latent_ledger(2, 6, 4, 16);
        let summary = forward_pass_summary(&ledger);
        assert_eq!(summary.total_passes, 11);
        let by_stage: BTreeMap<Stage, usize> =
            summary.per_stage.iter().map(|c| (c.stage, c.passes)).collect();
        assert_eq!(by_stage[&Stage::Prefill], 1);
        assert_eq!(by_stage[&Stage::ThoughtGen], 2);
        assert_eq!(by_stage[&Stage::SubqueryGen], 2);
        assert_eq!(by_stage[&Stage::Retrieval], 0, "index queries are not passes");
        assert_eq!(by_stage[&Stage::AnswerGen], 6);
        assert_eq!(summary.total_output_tokens, 6);
        // Slot-block widths land in stage input tokens: 3 thought blocks of
        // 4 plus 2 subquery blocks of 16.
        assert_eq!(summary.total_input_tokens, 3 * 4 + 2 * 16);
    }

    proptest! {
        #[test]
        fn pass_identity_holds_for_any_step_and_answer_count(
            s in 0usize..6, a in 1usize..12,
        ) {
            let ledger = latent_ledger(s, a, 4, 16);
            prop_assert_eq!(forward_pass_summary(&ledger).total_passes, 2 * s + 1 + a);
        }
    }

    #[test]
    fn explicit_simulation_passes_equal_total_output_tokens() {
        // Thought/subquery/answer segments decoded token by token; the
        // question and information blocks ride as context with the next
        // segment's first event, so the ledger holds only decode passes.
        let segments = [
            (Stage::ThoughtGen, 20),
            (Stage::SubqueryGen, 8),
            (Stage::ThoughtGen, 20),
            (Stage::SubqueryGen, 8),
            (Stage::ThoughtGen, 15),
            (Stage::AnswerGen, 6),
        ];
        let mut ledger = ForwardPassLedger::new();
        let mut pending = 30; // question tokens awaiting ingestion
        for (stage, len) in segments {
            for i in 0..len {
                let mut event = ev(stage, EventKind::AutoregressiveDecode, 1, 1);
                event.context_tokens = if i == 0 { pending } else { 0 };
                ledger.record(event);
            }
            pending = 0;
            if stage == Stage::SubqueryGen {
                ledger.record(ev(Stage::Retrieval, EventKind::IndexQuery, 0, 0));
                pending = 25; // retrieved information block
            }
        }
        let summary = forward_pass_summary(&ledger);
        assert_eq!(summary.total_output_tokens, 77);
        assert_eq!(summary.total_passes, 77, "passes equal output tokens exactly");
    }

    #[test]
    fn teacher_replay_rides_context_and_matches_the_token_identity() {
        use crate::model::ModelConfig;
        use crate::retrieval::RetrievedDoc;
        use crate::synth::TeacherStep;
        use rand::SeedableRng;
        use rand_chacha::ChaCha8Rng;

        let words = [
            "what", "is", "the", "birth", "place", "of", "alice", "?", "i", "need", "to",
            "find", ".", "will", "search", "for", "it", "found", "that", "paris", "now",
            "can", "answer",
        ];
        let vocab = Vocabulary::build(2, 4, words).unwrap();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = ModelConfig {
            d_model: 16,
            layers: 2,
            heads: 2,
            d_ff: 32,
            max_ctx: 64,
            vocab_size: vocab.len(),
            dropout: 0.0,
        };
        let model = LlmModel::new(cfg, &mut store, &mut rng).unwrap();
        let doc = RetrievedDoc {
            id: "born-alice".to_string(),
            score: 1.0,
            text: "the birth place of alice is paris .".to_string(),
        };
        let trajectory = TeacherTrajectory {
            item_id: "q".to_string(),
            question: "what is the birth place of alice ?".to_string(),
            steps: vec![
                TeacherStep {
                    thought: "i need to find the birth place of alice . i will search for it ."
                        .to_string(),
                    subquery: Some("the birth place of alice".to_string()),
                    retrieved: Some(vec![doc]),
                },
                TeacherStep {
                    thought: "i found that the birth place of alice is paris . now i can answer ."
                        .to_string(),
                    subquery: None,
                    retrieved: None,
                },
            ],
            answer: "paris".to_string(),
            correct: true,
        };
        let ledger = simulate_explicit_teacher(&model, &store, &vocab, &trajectory).unwrap();

        // Segments of 16, 5, 16, and 1 tokens; with no parallel forwards the
        // pass count is exactly their sum.
        let summary = forward_pass_summary(&ledger);
        assert_eq!(summary.total_output_tokens, 38);
        assert_eq!(summary.total_passes, 38);
        assert!(ledger.events.iter().all(|e| e.kind != EventKind::ParallelForward));
        assert_eq!(
            ledger.events.iter().filter(|e| e.kind == EventKind::IndexQuery).count(),
            1,
            "one index query per retrieval step",
        );
        let by_stage: BTreeMap<Stage, usize> =
            summary.per_stage.iter().map(|c| (c.stage, c.passes)).collect();
        assert_eq!(by_stage[&Stage::ThoughtGen], 32);
        assert_eq!(by_stage[&Stage::SubqueryGen], 5);
        assert_eq!(by_stage[&Stage::AnswerGen], 1);

        // The 8-token question rides with the first thought event and the
        // information block (8 words plus two tags) with the thought after
        // retrieval; every other event decodes against live context.
        let carried: Vec<(Stage, usize)> = ledger
            .events
            .iter()
            .filter(|e| e.context_tokens > 0)
            .map(|e| (e.stage, e.context_tokens))
            .collect();
        assert_eq!(carried, vec![(Stage::ThoughtGen, 8), (Stage::ThoughtGen, 10)]);
        assert_eq!(ledger.events[0].stage, Stage::ThoughtGen);
        assert_eq!(ledger.events[0].context_tokens, 8);

        // Replaying again produces the same event sequence (timings aside).
        let again = simulate_explicit_teacher(&model, &store, &vocab, &trajectory).unwrap();
        let shape = |l: &ForwardPassLedger| -> Vec<(Stage, EventKind, usize, usize, usize)> {
            l.events
                .iter()
                .map(|e| (e.stage, e.kind, e.context_tokens, e.stage_tokens, e.tokens_out))
                .collect()
        };
        assert_eq!(shape(&ledger), shape(&again));

        // A trajectory with no steps or a non-final step without a subquery
        // cannot be replayed.
        let empty = TeacherTrajectory { steps: vec![], ..trajectory.clone() };
        assert!(matches!(
            simulate_explicit_teacher(&model, &store, &vocab, &empty),
            Err(Error::Data(_))
        ));
        let mut malformed = trajectory.clone();
        malformed.steps[0].subquery = None;
        malformed.steps[0].retrieved = None;
        assert!(matches!(
            simulate_explicit_teacher(&model, &store, &vocab, &malformed),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn parallel_decoding_adds_the_longest_item_and_preserves_ordering() {
        let mut with_decode = latent_ledger(2, 6, 4, 16);
        let without = forward_pass_summary(&with_decode).total_passes;
        // Batched decoding of all thoughts and subqueries: one event per
        // step of the longest decoded item.
        let longest = 20;
        for _ in 0..longest {
            with_decode.record(ev(Stage::LatentDecode, EventKind::AutoregressiveDecode, 0, 7));
        }
        let with = forward_pass_summary(&with_decode).total_passes;
        assert_eq!(without, 11);
        assert_eq!(with, 31);
        // Latent < latent+decode < explicit, the structural cost ordering.
        assert!(without < with && with < 77);
    }

    #[test]
    fn max_length_ratio_formula_and_contracts() {
        assert!((max_length_ratio(&[10, 5, 5]).unwrap() - 0.5).abs() < 1e-12);
        assert!((max_length_ratio(&[7]).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(max_length_ratio(&[]), Err(Error::Parameter(_))));
        assert!(matches!(max_length_ratio(&[3, 0]), Err(Error::Parameter(_))));
    }

    proptest! {
        #[test]
        fn equal_lengths_give_one_over_n(len in 1usize..50, n in 1usize..20) {
            let lengths = vec![len; n];
            let ratio = max_length_ratio(&lengths).unwrap();
            prop_assert!((ratio - 1.0 / n as f64).abs() < 1e-12);
        }

        #[test]
        fn ratio_is_bounded_by_reciprocal_count_and_one(
            lengths in proptest::collection::vec(1usize..100, 1..20),
        ) {
            let ratio = max_length_ratio(&lengths).unwrap();
            prop_assert!(ratio <= 1.0 + 1e-12);
            prop_assert!(ratio >= 1.0 / lengths.len() as f64 - 1e-12);
        }
    }

    #[test]
    fn latency_breakdown_means_and_percentages() {
        let mut a = ForwardPassLedger::new();
        a.record(LedgerEvent {
            stage: Stage::Prefill,
            kind: EventKind::ParallelForward,
            context_tokens: 0,
            stage_tokens: 0,
            tokens_out: 0,
            micros: 3000,
        });
        a.record(LedgerEvent {
            stage: Stage::AnswerGen,
            kind: EventKind::AutoregressiveDecode,
            context_tokens: 0,
            stage_tokens: 0,
            tokens_out: 1,
            micros: 1000,
        });
        let mut b = a.clone();
        b.events[0].micros = 5000;
        b.events[1].micros = 3000;
        let breakdown = latency_breakdown(&[&a, &b]).unwrap();
        // Prefill mean (3 + 5)/2 = 4ms, answer mean (1 + 3)/2 = 2ms.
        let ms: BTreeMap<Stage, f64> = breakdown.stage_mean_ms.iter().cloned().collect();
        assert!((ms[&Stage::Prefill] - 4.0).abs() < 1e-9);
        assert!((ms[&Stage::AnswerGen] - 2.0).abs() < 1e-9);
        assert!((ms[&Stage::Retrieval] - 0.0).abs() < 1e-12, "no retrieval → 0");
        assert!((breakdown.mean_total_ms - 6.0).abs() < 1e-9);
        let pct_sum: f64 = breakdown.stage_percent.iter().map(|(_, p)| p).sum();
        assert!((pct_sum - 100.0).abs() < 0.1);
        // All-zero durations cannot be broken down.
        let silent = latent_ledger(1, 1, 4, 16);
        assert!(latency_breakdown(&[&silent]).is_err());
    }

    #[test]
    fn report_aggregates_and_serializes() {
        let answers = vec![
            ("london".to_string(), vec!["London".to_string()]),
            ("wrong".to_string(), vec!["Paris".to_string()]),
        ];
        let l1 = latent_ledger(2, 6, 4, 16);
        let l2 = latent_ledger(1, 6, 4, 16);
        let outcomes = vec![RetrievalOutcome {
            step_doc_texts: vec![vec!["has london inside".to_string()]],
            gold_answers: vec!["London".to_string()],
        }];
        let report =
            EvalReport::compute(&answers, &[&l1, &l2], &outcomes, Some(2.0 / 3.0), Some(&[10, 5, 5]))
                .unwrap();
        assert_eq!(report.n_questions, 2);
        assert!((report.em - 0.5).abs() < 1e-12);
        // Mean of 11 and 9 passes.
        assert!((report.mean_passes - 10.0).abs() < 1e-12);
        assert_eq!(report.retrieval_success, Some(1.0));
        assert!((report.max_length_ratio.unwrap() - 0.5).abs() < 1e-12);
        assert!(report.latency.is_none(), "zero-duration ledgers carry no latency");
        let tsv = report.to_tsv();
        assert!(tsv.contains("em\t0.5000"));
        assert!(tsv.contains("passes.prefill\t1.00"));
        assert!(tsv.contains("retrieval_overlap\t0.6667"));
        let series = report.series("latentrag");
        assert!(series.contains("subquery-gen\tlatentrag\t"));
        assert_eq!(series.lines().count(), Stage::ALL.len());
    }
}
