//! Transparency decoding: project latent thought and subquery blocks back
//! into the LLM's input space and generate their natural-language text.
//!
//! Two shared projectors — one for thoughts, one for subqueries — reuse the
//! retriever projector architecture but map `d_model → d_model`.  Each block
//! is decoded greedily, conditioned only on its fixed decode prompt plus the
//! projected rows, so blocks are mutually independent and a whole
//! trajectory's blocks can be decoded as one batch.  Batched decoding costs
//! forward events equal to the *longest* item, not the sum: finished items
//! pad until the batch drains, and pad steps produce no output tokens.

use std::time::Instant;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::LatentTrajectory;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::infer::{argmax_tie_low, LlmSession};
use crate::kernels::Mat;
use crate::ledger::{EventKind, ForwardPassLedger, LedgerEvent, Stage};
use crate::model::{LlmModel, ModelConfig};
use crate::params::{GraphCtx, ParamStore};
use crate::retrieval::RetrieverProjector;
use crate::tensor::Tensor;
use crate::vocab::{TokenId, Vocabulary};

/// Decode prompt for thought blocks, fixed verbatim.
pub const THOUGHT_PROMPT: &str = "decode the thought based on the latent representation :";
/// Decode prompt for subquery blocks, fixed verbatim.
pub const SUBQUERY_PROMPT: &str = "decode the subquery based on the latent representation :";

/// Every word the decode prompts need in the vocabulary.
pub fn prompt_words() -> Vec<&'static str> {
    let mut words: Vec<&'static str> =
        THOUGHT_PROMPT.split(' ').chain(SUBQUERY_PROMPT.split(' ')).collect();
    words.sort_unstable();
    words.dedup();
    words
}

/// Which projector and prompt a latent block uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockKind {
    #[serde(rename = "thought")]
    Thought,
    #[serde(rename = "subquery")]
    Subquery,
}

impl BlockKind {
    pub fn prompt(self) -> &'static str {
        match self {
            BlockKind::Thought => THOUGHT_PROMPT,
            BlockKind::Subquery => SUBQUERY_PROMPT,
        }
    }

    /// Thought blocks are `m` rows, subquery blocks `n`.
    pub fn expected_rows(self, vocab: &Vocabulary) -> usize {
        match self {
            BlockKind::Thought => vocab.m(),
            BlockKind::Subquery => vocab.n(),
        }
    }
}

/// The two decoding projectors plus the generation cap.
#[derive(Debug, Clone)]
pub struct LatentDecoder {
    pub proj_thought: RetrieverProjector,
    pub proj_subquery: RetrieverProjector,
    pub max_len: usize,
}

impl LatentDecoder {
    /// Register both projectors (`dec.tau.*`, `dec.s.*`) in the store.
    pub fn new(
        cfg: &RunConfig,
        model_cfg: &ModelConfig,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Result<LatentDecoder> {
        let max_len = cfg.get_usize("decode.max_len")?;
        if max_len == 0 {
            return Err(Error::Parameter("decode.max_len must be at least 1".into()));
        }
        let d = model_cfg.d_model;
        let proj_thought =
            RetrieverProjector::new("dec.tau", d, model_cfg.heads, model_cfg.d_ff, d, store, rng)?;
        let proj_subquery =
            RetrieverProjector::new("dec.s", d, model_cfg.heads, model_cfg.d_ff, d, store, rng)?;
        Ok(LatentDecoder { proj_thought, proj_subquery, max_len })
    }

    pub fn projector(&self, kind: BlockKind) -> &RetrieverProjector {
        match kind {
            BlockKind::Thought => &self.proj_thought,
            BlockKind::Subquery => &self.proj_subquery,
        }
    }

    /// Differentiable projection of a latent block into the input space;
    /// output rows always equal input rows.
    pub fn project(
        &self,
        ctx: &GraphCtx,
        store: &ParamStore,
        kind: BlockKind,
        block: &Tensor,
    ) -> Result<Tensor> {
        self.projector(kind).forward(ctx, store, block)
    }

    /// No-grad projection for inference.
    fn project_mat(&self, store: &ParamStore, kind: BlockKind, block: &Mat) -> Result<Mat> {
        let ctx = GraphCtx::eval();
        let rows = ctx.tape.leaf(block.rows, block.cols, block.data.clone(), false)?;
        let out = self.project(&ctx, store, kind, &rows)?;
        Mat::from_vec(out.rows(), out.cols(), out.data())
    }
}

/// One latent block queued for decoding.
#[derive(Debug, Clone)]
pub struct DecodeItem {
    pub kind: BlockKind,
    pub block: Mat,
}

/// A decoded block: produced tokens (terminator included when reached) and
/// the text without it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodedBlock {
    pub kind: BlockKind,
    pub tokens: Vec<TokenId>,
    pub text: String,
}

fn check_rows(item: &DecodeItem, vocab: &Vocabulary) -> Result<()> {
    let expected = item.kind.expected_rows(vocab);
    if item.block.rows != expected {
        return Err(Error::Shape(format!(
            "{:?} block has {} rows, expected {expected}",
            item.kind, item.block.rows
        )));
    }
    Ok(())
}

fn block_text(tokens: &[TokenId], vocab: &Vocabulary) -> Result<String> {
    let body: Vec<TokenId> = tokens.iter().copied().filter(|&t| t != vocab.eos()).collect();
    vocab.detokenize(&body)
}

/// Incremental decoding state for one batch item.
struct ItemState<'a> {
    session: LlmSession<'a>,
    prompt: Vec<TokenId>,
    projected: Mat,
    tokens: Vec<TokenId>,
    done: bool,
}

impl ItemState<'_> {
    /// Produce this item's next token.  The first step fuses the prompt and
    /// the projected block into the same forward window as the first
    /// prediction; later steps feed the previously produced token.
    fn advance(&mut self) -> Result<TokenId> {
        let token = if self.tokens.is_empty() {
            self.session.feed_tokens(&self.prompt)?;
            let hiddens = self.session.feed_rows(&self.projected)?;
            let logits = self.session.unembed(hiddens.row(hiddens.rows - 1));
            argmax_tie_low(&logits)
        } else {
            self.session.step_token(*self.tokens.last().unwrap())?.token
        };
        self.tokens.push(token);
        Ok(token)
    }

    /// Context cost the first step carries.
    fn fused_context(&self) -> usize {
        self.prompt.len() + self.projected.rows
    }
}

fn item_state<'a>(
    model: &'a LlmModel,
    store: &'a ParamStore,
    decoder: &LatentDecoder,
    vocab: &Vocabulary,
    item: &DecodeItem,
) -> Result<ItemState<'a>> {
    check_rows(item, vocab)?;
    Ok(ItemState {
        session: LlmSession::new(model, store),
        prompt: vocab.tokenize(item.kind.prompt())?,
        projected: decoder.project_mat(store, item.kind, &item.block)?,
        tokens: Vec::new(),
        done: false,
    })
}

/// Decode one latent block greedily: conditioned only on its decode prompt
/// plus the projected rows, until the end token or the cap.  One
/// `latent-decode` event per produced token; the first event carries the
/// prompt and block as fused context.
pub fn decode_latent_block(
    model: &LlmModel,
    store: &ParamStore,
    decoder: &LatentDecoder,
    vocab: &Vocabulary,
    ledger: &mut ForwardPassLedger,
    item: &DecodeItem,
) -> Result<DecodedBlock> {
    let mut state = item_state(model, store, decoder, vocab, item)?;
    while !state.done {
        let start = Instant::now();
        let context = if state.tokens.is_empty() { state.fused_context() } else { 0 };
        let token = state.advance()?;
        ledger.record(LedgerEvent {
            stage: Stage::LatentDecode,
            kind: EventKind::AutoregressiveDecode,
            context_tokens: context,
            stage_tokens: 1,
            tokens_out: 1,
            micros: start.elapsed().as_micros() as u64,
        });
        if token == vocab.eos()
            || state.tokens.len() == decoder.max_len
            || state.session.remaining() == 0
        {
            state.done = true;
        }
    }
    Ok(DecodedBlock {
        kind: item.kind,
        text: block_text(&state.tokens, vocab)?,
        tokens: state.tokens,
    })
}

/// Decode a batch of mutually independent blocks in lockstep, preserving
/// input order.  Outputs are token-identical to sequential decoding; the
/// ledger gets one `latent-decode` event per step of the *longest* item,
/// with `tokens_out` counting only the items still live at that step.
pub fn decode_parallel(
    model: &LlmModel,
    store: &ParamStore,
    decoder: &LatentDecoder,
    vocab: &Vocabulary,
    ledger: &mut ForwardPassLedger,
    batch: &[DecodeItem],
) -> Result<Vec<DecodedBlock>> {
    if batch.is_empty() {
        return Err(Error::Parameter("cannot decode an empty batch".into()));
    }
    let mut states = batch
        .iter()
        .map(|item| item_state(model, store, decoder, vocab, item))
        .collect::<Result<Vec<_>>>()?;
    while states.iter().any(|s| !s.done) {
        let start = Instant::now();
        let mut context = 0;
        let mut produced = 0;
        for state in states.iter_mut().filter(|s| !s.done) {
            if state.tokens.is_empty() {
                context += state.fused_context();
            }
            let token = state.advance()?;
            produced += 1;
            if token == vocab.eos()
                || state.tokens.len() == decoder.max_len
                || state.session.remaining() == 0
            {
                state.done = true;
            }
        }
        ledger.record(LedgerEvent {
            stage: Stage::LatentDecode,
            kind: EventKind::AutoregressiveDecode,
            context_tokens: context,
            stage_tokens: produced,
            tokens_out: produced,
            micros: start.elapsed().as_micros() as u64,
        });
    }
    states
        .iter()
        .zip(batch)
        .map(|(state, item)| {
            Ok(DecodedBlock {
                kind: item.kind,
                tokens: state.tokens.clone(),
                text: block_text(&state.tokens, vocab)?,
            })
        })
        .collect()
}

/// One trajectory step with its latent fields decoded to text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodedStep {
    pub thought: DecodedBlock,
    pub subquery: Option<DecodedBlock>,
}

/// Decode every thought and subquery of a trajectory as one batch.
pub fn decode_trajectory(
    model: &LlmModel,
    store: &ParamStore,
    decoder: &LatentDecoder,
    vocab: &Vocabulary,
    ledger: &mut ForwardPassLedger,
    trajectory: &LatentTrajectory,
) -> Result<Vec<DecodedStep>> {
    let mut items = Vec::new();
    for step in &trajectory.steps {
        items.push(DecodeItem { kind: BlockKind::Thought, block: step.latent_thought.clone() });
        if let Some(sq) = &step.latent_subquery {
            items.push(DecodeItem { kind: BlockKind::Subquery, block: sq.clone() });
        }
    }
    if items.is_empty() {
        return Ok(Vec::new());
    }
    let mut decoded = decode_parallel(model, store, decoder, vocab, ledger, &items)?.into_iter();
    let mut out = Vec::with_capacity(trajectory.steps.len());
    for step in &trajectory.steps {
        let thought = decoded.next().expect("one block per step");
        let subquery = step.latent_subquery.as_ref().map(|_| decoded.next().expect("query block"));
        out.push(DecodedStep { thought, subquery });
    }
    Ok(out)
}

/// A latent block paired with its teacher text for the decoding loss.
#[derive(Debug, Clone)]
pub struct DecodeTarget {
    pub kind: BlockKind,
    /// `[m|n, d_model]` — may carry gradients back into the main model.
    pub block: Tensor,
    pub text: String,
}

/// The per-kind teacher-forced losses and their sum.
#[derive(Debug, Clone)]
pub struct DecodingLoss {
    pub thought: Tensor,
    pub subquery: Tensor,
    /// `thought + subquery`, the term added to the training objective.
    pub total: Tensor,
}

/// Teacher-forced cross-entropy of each target text given its decode prompt
/// and projected block, averaged per kind.  The target sequence ends with
/// the end token, mirroring generation.
pub fn decoding_loss(
    ctx: &GraphCtx,
    model: &LlmModel,
    store: &ParamStore,
    decoder: &LatentDecoder,
    vocab: &Vocabulary,
    items: &[DecodeTarget],
) -> Result<DecodingLoss> {
    let mut per_kind: [Vec<Tensor>; 2] = [Vec::new(), Vec::new()];
    for item in items {
        if item.text.trim().is_empty() {
            return Err(Error::Data("decoding target text is empty".into()));
        }
        let expected = item.kind.expected_rows(vocab);
        if item.block.rows() != expected {
            return Err(Error::Shape(format!(
                "{:?} block has {} rows, expected {expected}",
                item.kind,
                item.block.rows()
            )));
        }
        let prompt = vocab.tokenize(item.kind.prompt())?;
        let mut target = vocab.tokenize(&item.text)?;
        target.push(vocab.eos());

        let prompt_rows = model.embed(ctx, store, &prompt)?;
        let projected = decoder.project(ctx, store, item.kind, &item.block)?;
        // Teacher forcing: all target tokens but the last are also inputs.
        let forced = model.embed(ctx, store, &target[..target.len() - 1])?;
        let rows = ctx.tape.concat_rows(&[prompt_rows, projected, forced])?;
        let hiddens = model.forward_rows(ctx, store, &rows, 0)?;
        // Position p predicts token p+1: the last block row predicts the
        // first target token.
        let first = prompt.len() + expected - 1;
        let predicting: Vec<usize> = (first..first + target.len()).collect();
        let logits = model.logits(ctx, store, &hiddens.gather(&predicting)?)?;
        let ce = logits.cross_entropy(&target)?;
        per_kind[match item.kind {
            BlockKind::Thought => 0,
            BlockKind::Subquery => 1,
        }]
        .push(ce);
    }
    let mean = |losses: &[Tensor]| -> Result<Tensor> {
        match losses {
            [] => ctx.tape.leaf(1, 1, vec![0.0], false),
            [first, rest @ ..] => {
                let mut sum = first.clone();
                for l in rest {
                    sum = sum.add(l)?;
                }
                sum.scale(1.0 / losses.len() as f64)
            }
        }
    };
    let thought = mean(&per_kind[0])?;
    let subquery = mean(&per_kind[1])?;
    let total = thought.add(&subquery)?;
    Ok(DecodingLoss { thought, subquery, total })
}
