//! The latent agentic loop: iterate thought block → action decision →
//! subquery block → retrieval → context append, ending with answer
//! generation.
//!
//! Thoughts and subqueries are never decoded to text here — they exist only
//! as last-layer hidden states at the slot positions, produced by single
//! parallel forwards.  The action token is read off the final thought slot's
//! hidden state by a restricted argmax and costs no forward pass of its own.
//! Every model call lands in a [`ForwardPassLedger`], which is where the
//! `2S + 1 + A` pass identity is measured rather than assumed.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::infer::LlmSession;
use crate::kernels::Mat;
use crate::ledger::{EventKind, ForwardPassLedger, LedgerEvent, Stage};
use crate::model::LlmModel;
use crate::params::{GraphCtx, ParamStore};
use crate::retrieval::{retrieve, CorpusIndex, RetrievedDoc, Retriever};
use crate::vocab::{TokenId, Vocabulary};

/// The action decoded from the last thought slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Action {
    #[serde(rename = "query")]
    Query,
    #[serde(rename = "answer")]
    Answer,
}

/// Why a trajectory stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TerminationReason {
    /// The model chose `<answer>` on its own.
    #[serde(rename = "answered")]
    Answered,
    /// The iteration cap forced the answer.
    #[serde(rename = "iteration-cap")]
    IterationCap,
    /// The context filled up; pending input was truncated and the answer
    /// forced.
    #[serde(rename = "context-cap")]
    ContextCap,
}

/// Loop hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoopConfig {
    /// Documents fetched per retrieval.
    pub top_k: usize,
    /// Maximum thought→action iterations (retrieval steps plus the answer
    /// step).
    pub max_iterations: usize,
    /// Cap on autoregressively generated answer tokens.
    pub max_answer_tokens: usize,
}

impl LoopConfig {
    pub fn from_run(cfg: &RunConfig) -> Result<LoopConfig> {
        let lc = LoopConfig {
            top_k: cfg.get_usize("retrieval.top_k")?,
            max_iterations: cfg.get_usize("loop.max_iterations")?,
            max_answer_tokens: cfg.get_usize("loop.max_answer_tokens")?,
        };
        lc.validate()?;
        Ok(lc)
    }

    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 || self.max_iterations == 0 || self.max_answer_tokens == 0 {
            return Err(Error::Parameter(
                "loop needs top_k ≥ 1, max_iterations ≥ 1, max_answer_tokens ≥ 1".into(),
            ));
        }
        Ok(())
    }
}

/// One loop iteration: the thought block's hidden states, the action taken,
/// and — iff the action was `<query>` — the subquery block and what it
/// retrieved.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    /// `[m, d_model]` hidden states at the thought slots.
    pub latent_thought: Mat,
    pub action: Action,
    /// `[n, d_model]` hidden states at the subquery slots.
    pub latent_subquery: Option<Mat>,
    pub retrieved: Option<Vec<RetrievedDoc>>,
}

/// A completed run of the loop on one question.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LatentTrajectory {
    pub question: String,
    pub question_tokens: Vec<TokenId>,
    pub steps: Vec<StepRecord>,
    /// Detokenized text between the answer tags, when any was generated.
    pub answer: Option<String>,
    /// Raw generated answer tokens, tags included.
    pub answer_tokens: Vec<TokenId>,
    pub termination: TerminationReason,
    pub ledger: ForwardPassLedger,
}

impl LatentTrajectory {
    /// Steps that issued a subquery.
    pub fn retrieval_steps(&self) -> usize {
        self.steps.iter().filter(|s| s.action == Action::Query).count()
    }

    /// Union of retrieved document ids over all steps.
    pub fn retrieved_ids(&self) -> std::collections::BTreeSet<String> {
        self.steps
            .iter()
            .flat_map(|s| s.retrieved.iter().flatten())
            .map(|d| d.id.clone())
            .collect()
    }

    /// Retrieved document texts per step, in rank order.
    pub fn retrieved_texts(&self) -> Vec<Vec<String>> {
        self.steps
            .iter()
            .filter_map(|s| {
                s.retrieved
                    .as_ref()
                    .map(|docs| docs.iter().map(|d| d.text.clone()).collect())
            })
            .collect()
    }
}

/// Greedy argmax over exactly `{<query>, <answer>}`, read from the final
/// thought slot's hidden state.
pub fn decide_action(
    session: &LlmSession,
    last_thought_hidden: &[f64],
    vocab: &Vocabulary,
) -> Result<Action> {
    let choice = session
        .restricted_argmax(last_thought_hidden, &[vocab.action_query(), vocab.action_answer()])?;
    Ok(if choice == vocab.action_query() { Action::Query } else { Action::Answer })
}

/// `<information>` block: open tag, document texts in rank order, close tag.
pub fn format_information_block(
    docs: &[RetrievedDoc],
    vocab: &Vocabulary,
) -> Result<Vec<TokenId>> {
    if docs.is_empty() {
        return Err(Error::Format("information block needs at least one document".into()));
    }
    let mut ids = vec![vocab.info_open()];
    for doc in docs {
        ids.extend(vocab.tokenize(&doc.text)?);
    }
    ids.push(vocab.info_close());
    Ok(ids)
}

/// The last `count` rows of `mat` as their own matrix.
fn tail_rows(mat: &Mat, count: usize) -> Result<Mat> {
    if count > mat.rows {
        return Err(Error::Shape(format!("cannot take {count} of {} rows", mat.rows)));
    }
    let mut out = Mat::zeros(0, mat.cols);
    for r in mat.rows - count..mat.rows {
        out.push_rows(&Mat::from_vec(1, mat.cols, mat.row(r).to_vec())?)?;
    }
    Ok(out)
}

/// The answer text between the `<Answer>` tags; malformed output falls back
/// to everything generated, tags stripped.
fn answer_text(tokens: &[TokenId], vocab: &Vocabulary) -> Result<Option<String>> {
    if tokens.is_empty() {
        return Ok(None);
    }
    let open = tokens.iter().position(|&t| t == vocab.answer_open());
    let close = tokens.iter().rposition(|&t| t == vocab.answer_close());
    let inner: Vec<TokenId> = match (open, close) {
        (Some(o), Some(c)) if o < c => tokens[o + 1..c].to_vec(),
        _ => tokens
            .iter()
            .copied()
            .filter(|&t| t != vocab.answer_open() && t != vocab.answer_close())
            .collect(),
    };
    Ok(Some(vocab.detokenize(&inner)?))
}

/// Run the latent loop on one question.
///
/// Per iteration: one parallel forward over `[pending context ++ thought
/// slots]` (stage `prefill` on the first step, `thought-gen` after), an
/// action read off the last thought hidden, and — on `<query>` — one
/// parallel forward over the subquery slots (stage `subquery-gen`, with the
/// latent embedding time attributed to it), an index query, and an
/// information block queued as the next step's pending context.  On
/// `<answer>` the answer is generated autoregressively.  The final allowed
/// iteration forces `<answer>`; a full context truncates pending input and
/// forces it too.
pub fn run_question(
    question: &str,
    model: &LlmModel,
    store: &ParamStore,
    retriever: &Retriever,
    index: &CorpusIndex,
    vocab: &Vocabulary,
    cfg: &LoopConfig,
) -> Result<LatentTrajectory> {
    cfg.validate()?;
    let question_tokens = vocab.tokenize(question)?;
    if question_tokens.is_empty() {
        return Err(Error::Data("cannot run an empty question".into()));
    }
    let think_ids = vocab.think_slots();
    let query_ids = vocab.query_slots();
    let m = think_ids.len();
    let n = query_ids.len();
    // The answer step needs room for the fed action token plus generation.
    let answer_budget = 1 + cfg.max_answer_tokens;

    let mut session = LlmSession::new(model, store);
    let mut ledger = ForwardPassLedger::new();
    let mut pending = question_tokens.clone();
    let mut steps: Vec<StepRecord> = Vec::new();
    let mut termination = TerminationReason::Answered;
    let mut answer_tokens = Vec::new();

    for step in 0..cfg.max_iterations {
        // Context check for this iteration's worst case: the pending block,
        // the thought block, then answering immediately.
        let mut force_answer = false;
        if session.remaining() < pending.len() + m + answer_budget {
            termination = TerminationReason::ContextCap;
            force_answer = true;
            let keep = session.remaining().saturating_sub(m + answer_budget);
            pending.truncate(keep);
            if session.remaining() < pending.len() + m + 2 {
                return Err(Error::Capacity(format!(
                    "context of {} cannot fit a thought block and any answer",
                    model.cfg.max_ctx
                )));
            }
        }
        let stage = if step == 0 { Stage::Prefill } else { Stage::ThoughtGen };
        let hiddens = session.prefill_split(&mut ledger, stage, &pending, &think_ids)?;
        pending.clear();
        let latent_thought = tail_rows(&hiddens, m)?;

        let mut action = decide_action(&session, latent_thought.row(m - 1), vocab)?;
        if force_answer {
            action = Action::Answer;
        } else if action == Action::Query && step + 1 == cfg.max_iterations {
            action = Action::Answer;
            termination = TerminationReason::IterationCap;
        } else if action == Action::Query
            && session.remaining() < n + answer_budget
        {
            // No room for a subquery block and a later answer.
            action = Action::Answer;
            termination = TerminationReason::ContextCap;
        }

        match action {
            Action::Query => {
                let latent_subquery =
                    session.prefill(&mut ledger, Stage::SubqueryGen, &query_ids)?;
                // Latent query embedding; its cost belongs to subquery-gen.
                let embed_start = Instant::now();
                let ctx = GraphCtx::eval();
                let rows = ctx.tape.leaf(
                    latent_subquery.rows,
                    latent_subquery.cols,
                    latent_subquery.data.clone(),
                    false,
                )?;
                let query_vec = retriever.embed_latent_subquery(&ctx, store, &rows)?.data();
                let embed_micros = embed_start.elapsed().as_micros() as u64;
                if let Some(event) = ledger.events.last_mut() {
                    event.micros += embed_micros;
                }

                let lookup_start = Instant::now();
                let docs = retrieve(index, &query_vec, cfg.top_k)?;
                ledger.record(LedgerEvent {
                    stage: Stage::Retrieval,
                    kind: EventKind::IndexQuery,
                    context_tokens: 0,
                    stage_tokens: 0,
                    tokens_out: 0,
                    micros: lookup_start.elapsed().as_micros() as u64,
                });
                pending = format_information_block(&docs, vocab)?;
                steps.push(StepRecord {
                    latent_thought,
                    action: Action::Query,
                    latent_subquery: Some(latent_subquery),
                    retrieved: Some(docs),
                });
            }
            Action::Answer => {
                steps.push(StepRecord {
                    latent_thought,
                    action: Action::Answer,
                    latent_subquery: None,
                    retrieved: None,
                });
                answer_tokens = session.decode_greedy(
                    &mut ledger,
                    Stage::AnswerGen,
                    vocab.action_answer(),
                    vocab.answer_close(),
                    cfg.max_answer_tokens,
                )?;
                break;
            }
        }
    }

    Ok(LatentTrajectory {
        question: question.to_string(),
        question_tokens,
        answer: answer_text(&answer_tokens, vocab)?,
        answer_tokens,
        steps,
        termination,
        ledger,
    })
}
