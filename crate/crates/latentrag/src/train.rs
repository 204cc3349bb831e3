//! Supervised fine-tuning: teacher trajectories become slot-token training
//! sequences, the joint objective combines generation, retrieval
//! distillation, and decoding losses, and optimization runs AdamW over
//! length-binned batches.
//!
//! The generation loss supervises only what the model must *emit* — the
//! action token read off each final thought slot and the tagged answer
//! span.  Slot positions, question tokens, and retrieved document tokens
//! are context, never targets.  The retrieval loss flows through the latent
//! subquery hidden states into the LLM, the projector, and the trainable
//! encoder, while the frozen reference encoder and the document index only
//! ever supply constants.  Also here: the contrastive pretraining that
//! turns the reference encoder into a working dense retriever before any
//! teacher data exists.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::agent::format_information_block;
use crate::config::RunConfig;
use crate::decode::{decoding_loss, BlockKind, DecodeTarget, LatentDecoder};
use crate::error::{Error, Result};
use crate::model::LlmModel;
use crate::params::{GraphCtx, ParamId, ParamStore};
use crate::retrieval::{
    cosine_alignment_loss, infonce_loss, kl_retrieval_loss, latent_distribution,
    pseudo_relevant_rows, similarity_distribution, CorpusIndex, Document, InfoNceItem, Retriever,
};
use crate::synth::TeacherTrajectory;
use crate::tensor::Tensor;
use crate::vocab::{TokenId, Vocabulary};

// ── configuration ──────────────────────────────────────────────────────────

/// Which training objective variant runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainArm {
    /// KL distillation of the latent retrieval distribution (the method).
    Kl,
    /// Ablation: mean `1 − cos` alignment to the reference embedding.
    Cosine,
    /// Ablation: InfoNCE against the top pseudo-relevant document.
    Infonce,
    /// Ablation: linear head on the latent block instead of the retriever.
    NoRetriever,
    /// Ablation: drop the decoding loss.
    NoDecoding,
}

impl TrainArm {
    pub fn parse(s: &str) -> Result<TrainArm> {
        match s {
            "kl" => Ok(TrainArm::Kl),
            "cosine" => Ok(TrainArm::Cosine),
            "infonce" => Ok(TrainArm::Infonce),
            "no-retriever" => Ok(TrainArm::NoRetriever),
            "no-decoding" => Ok(TrainArm::NoDecoding),
            other => Err(Error::Usage(format!(
                "unknown training arm '{other}' (kl | cosine | infonce | no-retriever | no-decoding)"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TrainArm::Kl => "kl",
            TrainArm::Cosine => "cosine",
            TrainArm::Infonce => "infonce",
            TrainArm::NoRetriever => "no-retriever",
            TrainArm::NoDecoding => "no-decoding",
        }
    }
}

/// Joint-training hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub arm: TrainArm,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub bins: usize,
    pub weight_decay: f64,
    /// λ_ret, the retrieval loss weight.
    pub lambda_ret: f64,
    pub max_seq: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn from_run(cfg: &RunConfig) -> Result<TrainConfig> {
        let tc = TrainConfig {
            arm: TrainArm::parse(cfg.get("train.arm")?)?,
            epochs: cfg.get_usize("train.epochs")?,
            lr: cfg.get_f64("train.lr")?,
            batch_size: cfg.get_usize("train.batch_size")?,
            bins: cfg.get_usize("train.bins")?,
            weight_decay: cfg.get_f64("train.weight_decay")?,
            lambda_ret: cfg.get_f64("train.lambda_ret")?,
            max_seq: cfg.get_usize("train.max_seq")?,
            seed: cfg.get_u64("seed")?,
        };
        tc.validate()?;
        Ok(tc)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.bins == 0 {
            return Err(Error::Parameter("batch_size and bins must be at least 1".into()));
        }
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(Error::Parameter(format!("learning rate {} must be positive", self.lr)));
        }
        if self.lambda_ret < 0.0 {
            return Err(Error::Parameter(format!("lambda_ret {} must be ≥ 0", self.lambda_ret)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Parameter(format!(
                "weight_decay {} must be ≥ 0",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Reference-encoder pretraining hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

impl PretrainConfig {
    pub fn from_run(cfg: &RunConfig) -> Result<PretrainConfig> {
        let pc = PretrainConfig {
            epochs: cfg.get_usize("pretrain.epochs")?,
            lr: cfg.get_f64("pretrain.lr")?,
            batch: cfg.get_usize("pretrain.batch")?,
            seed: cfg.get_u64("seed")?,
        };
        if pc.batch < 2 {
            return Err(Error::Parameter(
                "pretrain.batch must be at least 2 for in-batch negatives".into(),
            ));
        }
        if pc.lr <= 0.0 || !pc.lr.is_finite() {
            return Err(Error::Parameter(format!("learning rate {} must be positive", pc.lr)));
        }
        Ok(pc)
    }
}

// ── training examples ──────────────────────────────────────────────────────

/// Supervision attached to one trajectory step inside a training sequence.
#[derive(Debug, Clone)]
pub struct StepSupervision {
    /// Index of the last thought slot; its hidden state predicts the action.
    pub action_pos: usize,
    /// `<query>` on retrieval steps, `<answer>` on the final step.
    pub action_target: TokenId,
    /// Index of the first thought slot (`m` slots follow).
    pub think_start: usize,
    /// Index of the first subquery slot (`n` slots), on retrieval steps.
    pub query_start: Option<usize>,
    pub thought_text: String,
    pub subquery_text: Option<String>,
    /// `v'_s`, the frozen reference embedding of the subquery text.
    pub reference_embedding: Option<Vec<f64>>,
    /// Index rows of the top pseudo-relevant documents for `v'_s`.
    pub pseudo_relevant: Option<Vec<usize>>,
}

/// One teacher trajectory rendered as a slot-token sequence with all
/// supervision targets resolved.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub item_id: String,
    pub tokens: Vec<TokenId>,
    pub steps: Vec<StepSupervision>,
    /// `(position, target)` pairs over the answer tail: the fed `<answer>`
    /// action predicts `<Answer>`, then each token predicts its successor
    /// through `</Answer>`.
    pub answer_positions: Vec<(usize, TokenId)>,
}

impl TrainingExample {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// All `(position, target)` pairs the generation loss supervises, in
    /// ascending position order: one action per step plus the answer tail.
    pub fn supervised_positions(&self) -> Vec<(usize, TokenId)> {
        self.steps
            .iter()
            .map(|s| (s.action_pos, s.action_target))
            .chain(self.answer_positions.iter().copied())
            .collect()
    }
}

/// Render a correct teacher trajectory as a training sequence: question,
/// then per retrieval step thought slots + subquery slots + the information
/// block, then the final thought slots and the tagged answer.  Reference
/// embeddings and pseudo-relevant candidates are precomputed here so the
/// training loop never touches text again.
pub fn build_training_example(
    trajectory: &TeacherTrajectory,
    retriever: &Retriever,
    index: &CorpusIndex,
    store: &ParamStore,
    vocab: &Vocabulary,
    max_seq: usize,
) -> Result<TrainingExample> {
    if !trajectory.correct {
        return Err(Error::Data(format!(
            "trajectory '{}' did not answer correctly and cannot train",
            trajectory.item_id
        )));
    }
    let last = trajectory.steps.len().checked_sub(1).ok_or_else(|| {
        Error::Data(format!("trajectory '{}' has no steps", trajectory.item_id))
    })?;
    let mut tokens = vocab.tokenize(&trajectory.question)?;
    let mut steps = Vec::with_capacity(trajectory.steps.len());
    for (i, step) in trajectory.steps.iter().enumerate() {
        let think_start = tokens.len();
        tokens.extend(vocab.think_slots());
        let action_pos = tokens.len() - 1;
        match (&step.subquery, &step.retrieved, i == last) {
            (Some(subquery), Some(docs), false) => {
                let query_start = tokens.len();
                tokens.extend(vocab.query_slots());
                tokens.extend(format_information_block(docs, vocab)?);
                let reference = retriever.embed_reference_subquery(store, vocab, subquery)?;
                let pseudo = pseudo_relevant_rows(index, &reference, retriever.pseudo_top)?;
                steps.push(StepSupervision {
                    action_pos,
                    action_target: vocab.action_query(),
                    think_start,
                    query_start: Some(query_start),
                    thought_text: step.thought.clone(),
                    subquery_text: Some(subquery.clone()),
                    reference_embedding: Some(reference),
                    pseudo_relevant: Some(pseudo),
                });
            }
            (None, None, true) => {
                steps.push(StepSupervision {
                    action_pos,
                    action_target: vocab.action_answer(),
                    think_start,
                    query_start: None,
                    thought_text: step.thought.clone(),
                    subquery_text: None,
                    reference_embedding: None,
                    pseudo_relevant: None,
                });
            }
            _ => {
                return Err(Error::Data(format!(
                    "trajectory '{}': step {i} is malformed — only the final \
                     step may omit the subquery",
                    trajectory.item_id
                )));
            }
        }
    }
    let tail_start = tokens.len();
    tokens.push(vocab.action_answer());
    tokens.push(vocab.answer_open());
    tokens.extend(vocab.tokenize(&trajectory.answer)?);
    tokens.push(vocab.answer_close());
    let answer_positions: Vec<(usize, TokenId)> =
        (tail_start..tokens.len() - 1).map(|p| (p, tokens[p + 1])).collect();
    if tokens.len() > max_seq {
        return Err(Error::Capacity(format!(
            "trajectory '{}' renders to {} tokens, over the {max_seq} cap",
            trajectory.item_id,
            tokens.len()
        )));
    }
    Ok(TrainingExample { item_id: trajectory.item_id.clone(), tokens, steps, answer_positions })
}

// ── ablation (iii) bypass head ─────────────────────────────────────────────

/// The "no retriever" ablation: a single linear map from the mean-pooled
/// latent subquery block straight to the retrieval space.
#[derive(Debug, Clone)]
pub struct BypassHead {
    pub w: ParamId,
    pub b: ParamId,
}

impl BypassHead {
    pub fn new(
        d_model: usize,
        d_ret: usize,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Result<BypassHead> {
        let std = 1.0 / (d_model as f64).sqrt();
        Ok(BypassHead {
            w: store.register_gaussian("ret.bypass.w", d_model, d_ret, std, rng, true)?,
            b: store.register_zeros("ret.bypass.b", 1, d_ret, true)?,
        })
    }

    /// `[n, d_model] -> [1, d_ret]`, unit-normalized like a real embedding.
    pub fn embed(&self, ctx: &GraphCtx, store: &ParamStore, h_s: &Tensor) -> Result<Tensor> {
        h_s.mean_rows()?
            .matmul(&ctx.param(store, self.w)?)?
            .add_row(&ctx.param(store, self.b)?)?
            .l2_normalize_rows()
    }
}

// ── joint objective ────────────────────────────────────────────────────────

/// The combined loss and its components, all on the same tape.
#[derive(Debug, Clone)]
pub struct JointLoss {
    /// `L = L_gen + λ_ret · L_ret + L_dec`.
    pub total: Tensor,
    pub gen: Tensor,
    pub ret: Tensor,
    pub dec: Tensor,
    /// Subquery steps contributing to `L_ret`; zero means the retrieval
    /// term was skipped by definition.
    pub subquery_steps: usize,
}

/// Latent subquery work extracted from one forward pass.
struct SubqueryWork {
    embedding: Tensor,
    reference: Vec<f64>,
    pseudo: Vec<usize>,
}

/// Assemble the joint objective over a batch.  One forward per example; the
/// generation loss pools every supervised position in the batch, the
/// retrieval loss scores each latent subquery against the in-batch union of
/// pseudo-relevant candidates, and the decoding loss teacher-forces every
/// thought and subquery text.
#[allow(clippy::too_many_arguments)]
pub fn joint_loss(
    ctx: &GraphCtx,
    model: &LlmModel,
    store: &ParamStore,
    retriever: &Retriever,
    decoder: &LatentDecoder,
    bypass: Option<&BypassHead>,
    index: &CorpusIndex,
    vocab: &Vocabulary,
    batch: &[&TrainingExample],
    arm: TrainArm,
    lambda_ret: f64,
) -> Result<JointLoss> {
    if batch.is_empty() {
        return Err(Error::Parameter("joint loss over an empty batch".into()));
    }
    if lambda_ret < 0.0 {
        return Err(Error::Parameter(format!("lambda_ret {lambda_ret} must be ≥ 0")));
    }
    if arm == TrainArm::NoRetriever && bypass.is_none() {
        return Err(Error::Parameter("the no-retriever arm needs a bypass head".into()));
    }
    let zero = || ctx.tape.leaf(1, 1, vec![0.0], false);
    let m = vocab.m();
    let n = vocab.n();

    let mut gen_rows: Vec<Tensor> = Vec::new();
    let mut gen_targets: Vec<TokenId> = Vec::new();
    let mut subqueries: Vec<SubqueryWork> = Vec::new();
    let mut decode_targets: Vec<DecodeTarget> = Vec::new();
    for ex in batch {
        let hiddens = model.forward_tokens(ctx, store, &ex.tokens)?;
        let supervised = ex.supervised_positions();
        let positions: Vec<usize> = supervised.iter().map(|&(p, _)| p).collect();
        gen_rows.push(hiddens.gather(&positions)?);
        gen_targets.extend(supervised.iter().map(|&(_, t)| t));
        for step in &ex.steps {
            let think_rows: Vec<usize> = (step.think_start..step.think_start + m).collect();
            let h_tau = hiddens.gather(&think_rows)?;
            decode_targets.push(DecodeTarget {
                kind: BlockKind::Thought,
                block: h_tau,
                text: step.thought_text.clone(),
            });
            if let Some(query_start) = step.query_start {
                let query_rows: Vec<usize> = (query_start..query_start + n).collect();
                let h_s = hiddens.gather(&query_rows)?;
                decode_targets.push(DecodeTarget {
                    kind: BlockKind::Subquery,
                    block: h_s.clone(),
                    text: step
                        .subquery_text
                        .clone()
                        .ok_or_else(|| Error::Data("query step lost its subquery text".into()))?,
                });
                let embedding = match (arm, bypass) {
                    (TrainArm::NoRetriever, Some(head)) => head.embed(ctx, store, &h_s)?,
                    _ => retriever.embed_latent_subquery(ctx, store, &h_s)?,
                };
                let (reference, pseudo) = match (&step.reference_embedding, &step.pseudo_relevant)
                {
                    (Some(r), Some(p)) => (r.clone(), p.clone()),
                    _ => {
                        return Err(Error::Data(
                            "query step is missing its reference embedding".into(),
                        ))
                    }
                };
                subqueries.push(SubqueryWork { embedding, reference, pseudo });
            }
        }
    }

    let gen = model
        .logits(ctx, store, &ctx.tape.concat_rows(&gen_rows)?)?
        .cross_entropy(&gen_targets)?;

    let ret = if subqueries.is_empty() {
        zero()?
    } else {
        // Eq. 8's candidate set: the union of every step's pseudo-relevant
        // documents across the batch.
        let union: BTreeSet<usize> =
            subqueries.iter().flat_map(|s| s.pseudo.iter().copied()).collect();
        let candidates: Vec<usize> = union.iter().copied().collect();
        match arm {
            TrainArm::Kl | TrainArm::NoRetriever | TrainArm::NoDecoding => {
                let pairs = subqueries
                    .iter()
                    .map(|s| {
                        let p =
                            similarity_distribution(index, &s.reference, &candidates, retriever.beta)?;
                        let q = latent_distribution(
                            ctx,
                            index,
                            &s.embedding,
                            &candidates,
                            retriever.beta,
                        )?;
                        Ok((p, q))
                    })
                    .collect::<Result<Vec<_>>>()?;
                kl_retrieval_loss(ctx, &pairs)?
            }
            TrainArm::Cosine => {
                let pairs: Vec<(Tensor, Vec<f64>)> = subqueries
                    .iter()
                    .map(|s| (s.embedding.clone(), s.reference.clone()))
                    .collect();
                cosine_alignment_loss(ctx, &pairs)?
            }
            TrainArm::Infonce => {
                let items = subqueries
                    .iter()
                    .map(|s| {
                        let positive = *s.pseudo.first().ok_or_else(|| {
                            Error::Data("subquery step has no pseudo-relevant candidates".into())
                        })?;
                        let negatives: Vec<usize> =
                            candidates.iter().copied().filter(|&r| r != positive).collect();
                        Ok(InfoNceItem {
                            latent: s.embedding.clone(),
                            positive_row: positive,
                            negative_rows: negatives,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                infonce_loss(ctx, index, &items, retriever.beta)?
            }
        }
    };

    let dec = if arm == TrainArm::NoDecoding {
        zero()?
    } else {
        decoding_loss(ctx, model, store, decoder, vocab, &decode_targets)?.total
    };

    let total = gen.add(&ret.scale(lambda_ret)?)?.add(&dec)?;
    Ok(JointLoss { total, gen, ret, dec, subquery_steps: subqueries.len() })
}

// ── batching ───────────────────────────────────────────────────────────────

/// Partition example indices into equal-width length bins, shuffle within
/// each bin, chunk into batches, and shuffle the batch order — all driven
/// by one seed.  Every index appears in exactly one batch and every batch
/// draws from a single bin.
pub fn make_binned_batches(
    lengths: &[usize],
    num_bins: usize,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if num_bins == 0 {
        return Err(Error::Parameter("need at least one length bin".into()));
    }
    if batch_size == 0 {
        return Err(Error::Parameter("batch size must be at least 1".into()));
    }
    if lengths.is_empty() {
        return Ok(Vec::new());
    }
    let min = *lengths.iter().min().expect("nonempty");
    let max = *lengths.iter().max().expect("nonempty");
    let span = max - min + 1;
    let mut bins: Vec<Vec<usize>> = vec![Vec::new(); num_bins];
    for (i, &len) in lengths.iter().enumerate() {
        bins[(len - min) * num_bins / span].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut batches = Vec::new();
    for bin in &mut bins {
        bin.shuffle(&mut rng);
        batches.extend(bin.chunks(batch_size).map(<[usize]>::to_vec));
    }
    batches.shuffle(&mut rng);
    Ok(batches)
}

/// The bin an example length falls into, for checking batch homogeneity.
pub fn bin_of(len: usize, min: usize, max: usize, num_bins: usize) -> usize {
    (len - min) * num_bins / (max - min + 1)
}

// ── optimizer ──────────────────────────────────────────────────────────────

/// Adam with decoupled weight decay.  Moments are kept per parameter; decay
/// applies to every trainable parameter that received a gradient.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    moments: BTreeMap<ParamId, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> AdamW {
        AdamW { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, t: 0, moments: BTreeMap::new() }
    }

    /// One update over the accumulated gradients.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Vec<f64>)]) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (id, grad) in grads {
            let param = store.get_mut(*id);
            if !param.trainable {
                continue;
            }
            if grad.len() != param.data.len() {
                return Err(Error::Shape(format!(
                    "gradient for '{}' has {} values, parameter has {}",
                    param.name,
                    grad.len(),
                    param.data.len()
                )));
            }
            let (m, v) = self
                .moments
                .entry(*id)
                .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
            for i in 0..grad.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
                param.data[i] -= self.lr * (update + self.weight_decay * param.data[i]);
            }
        }
        Ok(())
    }
}

// ── training loop ──────────────────────────────────────────────────────────

/// One optimizer step's losses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossLogLine {
    pub step: usize,
    pub epoch: usize,
    pub total: f64,
    pub gen: f64,
    pub ret: f64,
    pub dec: f64,
    /// Zero flags a batch whose retrieval term was skipped by definition.
    pub subquery_steps: usize,
}

/// The loss log as tab-delimited text with a header.
pub fn render_loss_log(lines: &[LossLogLine]) -> String {
    let mut out = String::from("step\tepoch\tloss\tgen\tret\tdec\tsubqueries\n");
    for l in lines {
        out.push_str(&format!(
            "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}\n",
            l.step, l.epoch, l.total, l.gen, l.ret, l.dec, l.subquery_steps
        ));
    }
    out
}

/// Run joint training: length-binned batches, AdamW, dropout from the model
/// config, a per-step loss log, and an end-of-epoch callback for
/// checkpointing.  Aborts on non-finite loss.
#[allow(clippy::too_many_arguments)]
pub fn train(
    model: &LlmModel,
    store: &mut ParamStore,
    retriever: &Retriever,
    decoder: &LatentDecoder,
    bypass: Option<&BypassHead>,
    index: &CorpusIndex,
    vocab: &Vocabulary,
    examples: &[TrainingExample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, &ParamStore) -> Result<()>,
) -> Result<Vec<LossLogLine>> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::Data("no training examples".into()));
    }
    let lengths: Vec<usize> = examples.iter().map(TrainingExample::len).collect();
    let mut optimizer = AdamW::new(cfg.lr, cfg.weight_decay);
    // Independent seeded stream for dropout so batch order and noise don't
    // entangle.
    let mut dropout_seeds = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x00d0_44a7_5eed_0001);
    let mut log = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let batches =
            make_binned_batches(&lengths, cfg.bins, cfg.batch_size, cfg.seed.wrapping_add(epoch as u64))?;
        for batch_indices in batches {
            let batch: Vec<&TrainingExample> =
                batch_indices.iter().map(|&i| &examples[i]).collect();
            let ctx = GraphCtx::train(
                model.cfg.dropout,
                ChaCha8Rng::seed_from_u64(dropout_seeds.next_u64()),
            );
            let loss = joint_loss(
                &ctx,
                model,
                store,
                retriever,
                decoder,
                bypass,
                index,
                vocab,
                &batch,
                cfg.arm,
                cfg.lambda_ret,
            )?;
            let total = loss.total.item()?;
            if !total.is_finite() {
                return Err(Error::Numeric(format!(
                    "training diverged: loss {total} at step {step} (epoch {epoch})"
                )));
            }
            loss.total.backward()?;
            optimizer.step(store, &ctx.grads())?;
            log.push(LossLogLine {
                step,
                epoch,
                total,
                gen: loss.gen.item()?,
                ret: loss.ret.item()?,
                dec: loss.dec.item()?,
                subquery_steps: loss.subquery_steps,
            });
            step += 1;
        }
        on_epoch(epoch, store)?;
    }
    Ok(log)
}

// ── reference-encoder pretraining ──────────────────────────────────────────

/// Contrastively pretrain the *trainable* encoder on (subquery text,
/// supporting document) pairs with in-batch negatives, so that a
/// `sync_reference` afterwards turns the frozen reference into a working
/// dense retriever.  Returns the per-step loss curve.
pub fn pretrain_reference_encoder(
    retriever: &Retriever,
    store: &mut ParamStore,
    vocab: &Vocabulary,
    corpus: &[Document],
    pairs: &[(String, String)],
    cfg: &PretrainConfig,
) -> Result<Vec<f64>> {
    if pairs.is_empty() {
        return Err(Error::Data("no pretraining pairs".into()));
    }
    let by_id: BTreeMap<&str, &str> =
        corpus.iter().map(|d| (d.id.as_str(), d.text.as_str())).collect();
    let tokenized: Vec<(Vec<TokenId>, Vec<TokenId>)> = pairs
        .iter()
        .map(|(subquery, doc_id)| {
            let text = by_id.get(doc_id.as_str()).ok_or_else(|| {
                Error::Data(format!("pretraining pair references unknown document '{doc_id}'"))
            })?;
            Ok((vocab.tokenize(subquery)?, vocab.tokenize(text)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut optimizer = AdamW::new(cfg.lr, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0e4c_0de5_eed0_0002);
    let mut losses = Vec::new();
    for _ in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..tokenized.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch) {
            if chunk.len() < 2 {
                // A singleton has no in-batch negatives to push against.
                continue;
            }
            let ctx = GraphCtx::eval();
            let mut queries = Vec::with_capacity(chunk.len());
            let mut documents = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let (q_ids, d_ids) = &tokenized[i];
                queries.push(retriever.encoder.embed_tokens(&ctx, store, q_ids)?);
                documents.push(retriever.encoder.embed_tokens(&ctx, store, d_ids)?);
            }
            let q = ctx.tape.concat_rows(&queries)?;
            let d = ctx.tape.concat_rows(&documents)?;
            let targets: Vec<usize> = (0..chunk.len()).collect();
            let loss = q
                .matmul_nt(&d)?
                .scale(1.0 / retriever.beta)?
                .cross_entropy(&targets)?;
            let value = loss.item()?;
            if !value.is_finite() {
                return Err(Error::Numeric(format!("pretraining diverged: loss {value}")));
            }
            loss.backward()?;
            optimizer.step(store, &ctx.grads())?;
            losses.push(value);
        }
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{self, Mat};
    use crate::model::ModelConfig;
    use crate::retrieval::{build_index, topk_rows};
    use crate::synth::{self, PoolSizes, SynthWorld};
    use crate::tensor::GRAD_CHECK_TOLERANCE;
    use crate::vocab::Vocabulary;
    use proptest::prelude::*;
    use rand::SeedableRng;

    /// Everything a training test needs, built from one seeded synthesis.
    struct World {
        world: SynthWorld,
        vocab: Vocabulary,
        store: ParamStore,
        model: LlmModel,
        retriever: Retriever,
        decoder: LatentDecoder,
        /// Index built from the (untrained) reference encoder.
        index: CorpusIndex,
        /// Oracle index with one-hot rows for generating teacher data.
        oracle_index: CorpusIndex,
        oracle_map: BTreeMap<String, usize>,
    }

    fn small_sizes() -> PoolSizes {
        PoolSizes {
            persons_train: 80,
            persons_test: 20,
            fathers_train: 20,
            fathers_test: 8,
            cities_train: 10,
            cities_test: 5,
            countries_train: 3,
            countries_test: 2,
        }
    }

    fn build_world(dropout: f64) -> World {
        let mut cfg = RunConfig::default();
        for kv in [
            "model.d_model=16",
            "model.heads=2",
            "model.d_ff=32",
            "model.layers=2",
            "model.max_ctx=256",
            "retrieval.d_ret=8",
            "retrieval.enc_ff=16",
            "retrieval.enc_ctx=16",
            "latent.m=2",
            "latent.n=4",
        ] {
            cfg.apply_override(kv).unwrap();
        }
        cfg.apply_override(&format!("model.dropout={dropout}")).unwrap();
        let world = synth::generate(&small_sizes(), 7).unwrap();
        let words: Vec<String> = world
            .vocabulary_words()
            .into_iter()
            .chain(crate::decode::prompt_words().into_iter().map(str::to_string))
            .collect();
        let vocab = Vocabulary::build(2, 4, &words).unwrap();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1313);
        let model_cfg = ModelConfig::from_run(&cfg, vocab.len()).unwrap();
        let model = LlmModel::new(model_cfg, &mut store, &mut rng).unwrap();
        let retriever = Retriever::new(&cfg, &model.cfg, vocab.len(), &mut store, &mut rng).unwrap();
        let decoder = LatentDecoder::new(&cfg, &model.cfg, &mut store, &mut rng).unwrap();
        let index = build_index(&world.corpus, &retriever, &store, &vocab).unwrap();

        // Oracle retrieval: document i embeds to basis vector e_i, and every
        // gold subquery maps to its support document's basis vector.
        let n = world.corpus.len();
        let mut embeddings = Mat::zeros(0, n);
        for i in 0..n {
            let mut row = vec![0.0; n];
            row[i] = 1.0;
            embeddings.push_rows(&Mat::from_vec(1, n, row).unwrap()).unwrap();
        }
        let oracle_index = CorpusIndex {
            documents: world.corpus.clone(),
            embeddings,
            encoder_hash: "oracle".into(),
        };
        let mut oracle_map = BTreeMap::new();
        for item in world.train.iter().chain(&world.test) {
            for hop in &item.decomposition {
                let row = oracle_index.position_of(&hop.support_doc_id).unwrap();
                oracle_map.insert(hop.subquery.clone(), row);
            }
        }
        World { world, vocab, store, model, retriever, decoder, index, oracle_index, oracle_map }
    }

    impl World {
        /// A correct teacher trajectory for the i-th training item.
        fn teacher_trajectory(&self, i: usize) -> TeacherTrajectory {
            let item = &self.world.train[i];
            let map = &self.oracle_map;
            let n = self.oracle_index.len();
            let trajectory = synth::teacher_run(item, &self.oracle_index, 3, |subquery| {
                let mut v = vec![0.0; n];
                if let Some(&row) = map.get(subquery) {
                    v[row] = 1.0;
                } else {
                    v[0] = 1.0;
                }
                Ok(v)
            })
            .unwrap();
            assert!(trajectory.correct, "oracle teacher must answer correctly");
            trajectory
        }

        fn example(&self, i: usize, max_seq: usize) -> TrainingExample {
            build_training_example(
                &self.teacher_trajectory(i),
                &self.retriever,
                &self.index,
                &self.store,
                &self.vocab,
                max_seq,
            )
            .unwrap()
        }
    }

    fn base_train_config() -> TrainConfig {
        TrainConfig {
            arm: TrainArm::Kl,
            epochs: 1,
            lr: 1e-3,
            batch_size: 4,
            bins: 2,
            weight_decay: 0.01,
            lambda_ret: 1.0,
            max_seq: 256,
            seed: 11,
        }
    }

    #[test]
    fn arm_parsing_round_trips() {
        for arm in [
            TrainArm::Kl,
            TrainArm::Cosine,
            TrainArm::Infonce,
            TrainArm::NoRetriever,
            TrainArm::NoDecoding,
        ] {
            assert_eq!(TrainArm::parse(arm.as_str()).unwrap(), arm);
        }
        assert!(matches!(TrainArm::parse("dpo"), Err(Error::Usage(_))));
        let cfg = RunConfig::default();
        assert_eq!(TrainConfig::from_run(&cfg).unwrap().arm, TrainArm::Kl);
        assert!((TrainConfig::from_run(&cfg).unwrap().lambda_ret - 1.0).abs() < 1e-12);
    }

    #[test]
    fn training_example_layout_matches_the_template() {
        let w = build_world(0.0);
        // Item 2i is the 1-hop question for person i, 2i+1 the 2-hop one.
        let one_hop = w.example(0, 3000);
        assert_eq!(w.world.train[0].hops, 1);
        let question_len = w.vocab.tokenize(&w.world.train[0].question).unwrap().len();
        let (m, n) = (w.vocab.m(), w.vocab.n());

        // Layout: question, m thoughts, n queries, info block, m thoughts,
        // answer tail.
        assert_eq!(one_hop.steps.len(), 2);
        let s0 = &one_hop.steps[0];
        assert_eq!(s0.think_start, question_len);
        assert_eq!(s0.action_pos, question_len + m - 1);
        assert_eq!(s0.action_target, w.vocab.action_query());
        assert_eq!(s0.query_start, Some(question_len + m));
        // Exactly m+n slot tokens sit between the question and the
        // information block.
        let info_open = one_hop.tokens.iter().position(|&t| t == w.vocab.info_open()).unwrap();
        assert_eq!(info_open, question_len + m + n);
        let s1 = &one_hop.steps[1];
        assert_eq!(s1.action_target, w.vocab.action_answer());
        assert_eq!(s1.query_start, None);
        let info_close = one_hop.tokens.iter().position(|&t| t == w.vocab.info_close()).unwrap();
        assert_eq!(s1.think_start, info_close + 1);

        // Answer tail: <answer> predicts <Answer>, then the answer word,
        // then </Answer>.
        let tail_start = s1.action_pos + 1;
        assert_eq!(one_hop.tokens[tail_start], w.vocab.action_answer());
        assert_eq!(one_hop.tokens[tail_start + 1], w.vocab.answer_open());
        assert_eq!(*one_hop.tokens.last().unwrap(), w.vocab.answer_close());
        assert_eq!(one_hop.answer_positions.first().unwrap(), &(tail_start, w.vocab.answer_open()));
        assert_eq!(
            one_hop.answer_positions.last().unwrap(),
            &(one_hop.tokens.len() - 2, w.vocab.answer_close())
        );

        // The question region detokenizes back to the question text, and
        // the information block carries the retrieved texts in rank order.
        assert_eq!(
            w.vocab.detokenize(&one_hop.tokens[..question_len]).unwrap(),
            w.world.train[0].question
        );
        let info_text =
            w.vocab.detokenize(&one_hop.tokens[info_open + 1..info_close]).unwrap();
        let gold_doc = &w.world.train[0].decomposition[0].support_doc_id;
        let gold_row = w.index.position_of(gold_doc).unwrap();
        assert!(info_text.contains(&w.index.documents[gold_row].text));

        // Supervision never targets anything but actions and the answer
        // span.
        for (pos, target) in one_hop.supervised_positions() {
            assert!(pos < one_hop.tokens.len());
            let is_action =
                target == w.vocab.action_query() || target == w.vocab.action_answer();
            let in_tail = pos >= tail_start - 1;
            assert!(is_action || in_tail, "position {pos} supervises token {target}");
        }

        // A 2-hop item renders two retrieval rounds.
        let two_hop = w.example(1, 3000);
        assert_eq!(w.world.train[1].hops, 2);
        assert_eq!(two_hop.steps.len(), 3);
        assert_eq!(two_hop.steps.iter().filter(|s| s.query_start.is_some()).count(), 2);
    }

    #[test]
    fn pseudo_relevant_ids_match_brute_force() {
        let w = build_world(0.0);
        let example = w.example(4, 3000);
        let step = &example.steps[0];
        let reference = step.reference_embedding.as_ref().unwrap();
        // Independent oracle: rank all rows by cosine, descending, ties to
        // the lower row.
        let mut ranked: Vec<(usize, f64)> = (0..w.index.len())
            .map(|r| (r, kernels::cosine(reference, w.index.row(r)).unwrap()))
            .collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let expected: Vec<usize> =
            ranked.iter().take(w.retriever.pseudo_top).map(|&(r, _)| r).collect();
        assert_eq!(step.pseudo_relevant.as_ref().unwrap(), &expected);
        assert_eq!(expected.len(), 16);
    }

    #[test]
    fn bad_trajectories_are_rejected() {
        let w = build_world(0.0);
        let mut wrong = w.teacher_trajectory(0);
        wrong.correct = false;
        assert!(matches!(
            build_training_example(&wrong, &w.retriever, &w.index, &w.store, &w.vocab, 3000),
            Err(Error::Data(_))
        ));
        // Overlong sequences are rejected against the cap.
        assert!(matches!(
            build_training_example(
                &w.teacher_trajectory(0),
                &w.retriever,
                &w.index,
                &w.store,
                &w.vocab,
                10
            ),
            Err(Error::Capacity(_))
        ));
        // A non-final step without a subquery is malformed.
        let mut malformed = w.teacher_trajectory(1);
        malformed.steps[0].subquery = None;
        malformed.steps[0].retrieved = None;
        assert!(matches!(
            build_training_example(&malformed, &w.retriever, &w.index, &w.store, &w.vocab, 3000),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn binned_batches_split_short_from_long() {
        let batches = make_binned_batches(&[5, 6, 100, 101], 2, 2, 3).unwrap();
        assert_eq!(batches.len(), 2);
        let as_sets: Vec<BTreeSet<usize>> =
            batches.iter().map(|b| b.iter().copied().collect()).collect();
        assert!(as_sets.contains(&BTreeSet::from([0, 1])));
        assert!(as_sets.contains(&BTreeSet::from([2, 3])));
        // One bin degenerates to plain shuffled batching.
        let flat = make_binned_batches(&[5, 6, 100, 101], 1, 3, 3).unwrap();
        let total: usize = flat.iter().map(Vec::len).sum();
        assert_eq!(total, 4);
        // Deterministic under a seed, and parameter errors are caught.
        assert_eq!(
            make_binned_batches(&[5, 6, 100, 101], 2, 2, 9).unwrap(),
            make_binned_batches(&[5, 6, 100, 101], 2, 2, 9).unwrap()
        );
        assert!(matches!(make_binned_batches(&[1], 2, 0, 0), Err(Error::Parameter(_))));
        assert!(matches!(make_binned_batches(&[1], 0, 2, 0), Err(Error::Parameter(_))));
        assert!(make_binned_batches(&[], 2, 2, 0).unwrap().is_empty());
    }

    proptest! {
        #[test]
        fn every_example_lands_once_in_a_single_bin_batch(
            lengths in proptest::collection::vec(1usize..400, 1..60),
            bins in 1usize..9,
            batch in 1usize..8,
            seed in 0u64..1000,
        ) {
            let batches = make_binned_batches(&lengths, bins, batch, seed).unwrap();
            let mut seen: Vec<usize> = batches.iter().flatten().copied().collect();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..lengths.len()).collect::<Vec<_>>());
            let min = *lengths.iter().min().unwrap();
            let max = *lengths.iter().max().unwrap();
            for b in &batches {
                prop_assert!(b.len() <= batch);
                let first_bin = bin_of(lengths[b[0]], min, max, bins);
                for &i in b {
                    prop_assert_eq!(bin_of(lengths[i], min, max, bins), first_bin);
                }
            }
        }
    }

    #[test]
    fn adamw_first_step_is_sign_scaled_with_decoupled_decay() {
        let mut store = ParamStore::new();
        let id = store.register("w", 1, 2, vec![1.0, -2.0], true).unwrap();
        let mut opt = AdamW::new(0.1, 0.5);
        opt.step(&mut store, &[(id, vec![3.0, -0.4])]).unwrap();
        // Bias-corrected first step is sign(g) up to epsilon; decay is
        // applied on top of the raw weight.
        let w = &store.get(id).data;
        assert!((w[0] - (1.0 - 0.1 * (1.0 + 0.5 * 1.0))).abs() < 1e-6);
        assert!((w[1] - (-2.0 - 0.1 * (-1.0 + 0.5 * -2.0))).abs() < 1e-6);
        // Frozen parameters are skipped entirely.
        let frozen = store.register("f", 1, 1, vec![5.0], false).unwrap();
        opt.step(&mut store, &[(frozen, vec![100.0])]).unwrap();
        assert_eq!(store.get(frozen).data[0], 5.0);
    }

    #[test]
    fn joint_loss_combines_components_exactly() {
        let w = build_world(0.0);
        let examples = [w.example(0, 3000), w.example(1, 3000)];
        let batch: Vec<&TrainingExample> = examples.iter().collect();
        let run = |arm: TrainArm, lambda: f64| {
            let ctx = GraphCtx::eval();
            let loss = joint_loss(
                &ctx, &w.model, &w.store, &w.retriever, &w.decoder, None, &w.index, &w.vocab,
                &batch, arm, lambda,
            )
            .unwrap();
            (
                loss.total.item().unwrap(),
                loss.gen.item().unwrap(),
                loss.ret.item().unwrap(),
                loss.dec.item().unwrap(),
            )
        };
        let (total, gen, ret, dec) = run(TrainArm::Kl, 1.0);
        assert!(gen > 0.0 && ret > 0.0 && dec > 0.0);
        assert_eq!(total, gen + ret + dec);
        // λ_ret = 0 leaves exactly generation + decoding.
        let (t0, g0, _, d0) = run(TrainArm::Kl, 0.0);
        assert_eq!(t0, g0 + d0);
        // Scaled combination is exact too.
        let (t25, g25, r25, d25) = run(TrainArm::Kl, 2.5);
        assert_eq!(t25, g25 + r25 * 2.5 + d25);
        // The no-decoding arm zeroes L_dec but keeps the KL term.
        let (_, _, ret_nd, dec_nd) = run(TrainArm::NoDecoding, 1.0);
        assert_eq!(dec_nd, 0.0);
        assert_eq!(ret_nd, ret);
        // Each ablation arm produces a distinct, finite retrieval term.
        let (_, _, ret_cos, _) = run(TrainArm::Cosine, 1.0);
        let (_, _, ret_nce, _) = run(TrainArm::Infonce, 1.0);
        assert!(ret_cos.is_finite() && ret_nce.is_finite());
        assert_ne!(ret_cos, ret);
        assert_ne!(ret_nce, ret);
        // no-retriever requires its bypass head.
        let ctx = GraphCtx::eval();
        assert!(matches!(
            joint_loss(
                &ctx, &w.model, &w.store, &w.retriever, &w.decoder, None, &w.index, &w.vocab,
                &batch, TrainArm::NoRetriever, 1.0,
            ),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn bypass_arm_runs_and_zero_subquery_batches_skip_retrieval() {
        let mut w = build_world(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let head = BypassHead::new(16, 8, &mut w.store, &mut rng).unwrap();
        let examples = [w.example(0, 3000)];
        let batch: Vec<&TrainingExample> = examples.iter().collect();
        let ctx = GraphCtx::eval();
        let loss = joint_loss(
            &ctx, &w.model, &w.store, &w.retriever, &w.decoder, Some(&head), &w.index, &w.vocab,
            &batch, TrainArm::NoRetriever, 1.0,
        )
        .unwrap();
        assert!(loss.ret.item().unwrap() > 0.0);
        loss.total.backward().unwrap();
        let grads: BTreeMap<ParamId, Vec<f64>> = ctx.grads().into_iter().collect();
        assert!(grads[&head.w].iter().any(|&g| g != 0.0), "bypass head learns");
        // The real retrieval stack is out of the loop in this arm.
        let proj_w1 = w.store.id_by_name("ret.proj.w1").unwrap();
        assert!(!grads.contains_key(&proj_w1));

        // A hand-built answer-only example has no subqueries: L_ret is zero
        // by definition and flagged via the count.
        let answer_only = TrainingExample {
            item_id: "manual".into(),
            tokens: {
                let mut t = w.vocab.tokenize(&w.world.train[0].question).unwrap();
                t.extend(w.vocab.think_slots());
                t.push(w.vocab.action_answer());
                t.push(w.vocab.answer_open());
                t.extend(w.vocab.tokenize(&w.world.train[0].answers[0]).unwrap());
                t.push(w.vocab.answer_close());
                t
            },
            steps: vec![StepSupervision {
                action_pos: w.vocab.tokenize(&w.world.train[0].question).unwrap().len() + 1,
                action_target: w.vocab.action_answer(),
                think_start: w.vocab.tokenize(&w.world.train[0].question).unwrap().len(),
                query_start: None,
                thought_text: "now i can answer .".into(),
                subquery_text: None,
                reference_embedding: None,
                pseudo_relevant: None,
            }],
            answer_positions: Vec::new(),
        };
        let ctx = GraphCtx::eval();
        let loss = joint_loss(
            &ctx, &w.model, &w.store, &w.retriever, &w.decoder, None, &w.index, &w.vocab,
            &[&answer_only], TrainArm::Kl, 1.0,
        )
        .unwrap();
        assert_eq!(loss.subquery_steps, 0);
        assert_eq!(loss.ret.item().unwrap(), 0.0);
    }

    #[test]
    fn joint_loss_gradients_match_finite_differences() {
        let mut w = build_world(0.0);
        let examples = [w.example(0, 3000), w.example(1, 3000)];
        let eval_total = |store: &ParamStore| -> f64 {
            let ctx = GraphCtx::eval();
            let batch: Vec<&TrainingExample> = examples.iter().collect();
            joint_loss(
                &ctx, &w.model, store, &w.retriever, &w.decoder, None, &w.index, &w.vocab,
                &batch, TrainArm::Kl, 1.0,
            )
            .unwrap()
            .total
            .item()
            .unwrap()
        };
        let ctx = GraphCtx::eval();
        let batch: Vec<&TrainingExample> = examples.iter().collect();
        let loss = joint_loss(
            &ctx, &w.model, &w.store, &w.retriever, &w.decoder, None, &w.index, &w.vocab,
            &batch, TrainArm::Kl, 1.0,
        )
        .unwrap();
        loss.total.backward().unwrap();
        let grads: BTreeMap<ParamId, Vec<f64>> = ctx.grads().into_iter().collect();
        // One probe per component path: LLM body and embeddings, retriever
        // projector, trainable encoder, and a decoding projector.
        let eps = 1e-5;
        for name in
            ["llm.tok_embed", "llm.l0.h0.wq", "llm.lnf.g", "ret.proj.w1", "ret.enc.l0.w1", "dec.tau.w1"]
        {
            let id = w.store.id_by_name(name).unwrap();
            let grad = grads.get(&id).unwrap_or_else(|| panic!("no gradient for {name}"));
            // Probe the strongest coordinate so relative error is stable.
            let (i, &g) = grad
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
                .unwrap();
            assert!(g != 0.0, "{name} gradient is identically zero");
            let original = w.store.get(id).data[i];
            w.store.get_mut(id).data[i] = original + eps;
            let up = eval_total(&w.store);
            w.store.get_mut(id).data[i] = original - eps;
            let down = eval_total(&w.store);
            w.store.get_mut(id).data[i] = original;
            let fd = (up - down) / (2.0 * eps);
            let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-8);
            assert!(
                rel < GRAD_CHECK_TOLERANCE,
                "{name}[{i}]: analytic {g} vs finite-difference {fd} (rel {rel})"
            );
        }
        // The frozen reference encoder receives no gradient at all.
        let frozen = w.store.id_by_name("ret.ref.l0.w1").unwrap();
        assert!(!grads.contains_key(&frozen));
    }

    #[test]
    fn overfit_drives_the_joint_loss_down_and_freezes_the_reference() {
        let mut w = build_world(0.0);
        let examples: Vec<TrainingExample> = (0..20).map(|i| w.example(i, 3000)).collect();
        let reference_before = w.retriever.reference.weights_hash(&w.store);
        let cfg = TrainConfig {
            arm: TrainArm::Kl,
            epochs: 100,
            lr: 5e-3,
            batch_size: 10,
            bins: 2,
            weight_decay: 0.0,
            lambda_ret: 1.0,
            max_seq: 3000,
            seed: 5,
        };
        let mut epochs_seen = Vec::new();
        let log = train(
            &w.model,
            &mut w.store,
            &w.retriever,
            &w.decoder,
            None,
            &w.index,
            &w.vocab,
            &examples,
            &cfg,
            |epoch, _| {
                epochs_seen.push(epoch);
                Ok(())
            },
        )
        .unwrap();
        assert_eq!(epochs_seen, (0..cfg.epochs).collect::<Vec<_>>());
        // 2 batches per epoch.
        assert_eq!(log.len(), cfg.epochs * 2);
        let first = log.first().unwrap();
        let last = log.last().unwrap();
        assert!(
            last.total < 0.1 * first.total,
            "overfit stalled: {} -> {}",
            first.total,
            last.total
        );
        // Every component ends lower than it started.
        assert!(last.gen < first.gen && last.ret < first.ret && last.dec < first.dec);
        assert!(log.iter().all(|l| l.subquery_steps > 0));
        // The frozen reference encoder is bit-identical.
        assert_eq!(w.retriever.reference.weights_hash(&w.store), reference_before);
        // The log renders as delimited text.
        let text = render_loss_log(&log[..2]);
        assert!(text.starts_with("step\tepoch\tloss\tgen\tret\tdec\tsubqueries\n"));
        assert_eq!(text.lines().count(), 3);
    }

    #[test]
    fn training_is_bit_deterministic_under_a_seed() {
        let run = || {
            let mut w = build_world(0.1);
            let examples: Vec<TrainingExample> = (0..6).map(|i| w.example(i, 3000)).collect();
            let cfg = TrainConfig { epochs: 2, batch_size: 3, ..base_train_config() };
            let log = train(
                &w.model,
                &mut w.store,
                &w.retriever,
                &w.decoder,
                None,
                &w.index,
                &w.vocab,
                &examples,
                &cfg,
                |_, _| Ok(()),
            )
            .unwrap();
            (w.store.to_checkpoint("t").content_hash(), render_loss_log(&log))
        };
        let (hash_a, log_a) = run();
        let (hash_b, log_b) = run();
        assert_eq!(hash_a, hash_b, "same seed must give the same checkpoint");
        assert_eq!(log_a, log_b);
    }

    #[test]
    fn pretraining_turns_the_reference_encoder_into_a_retriever() {
        let mut w = build_world(0.0);
        let pairs = w.world.pretraining_pairs();
        assert!(pairs.len() > 100);
        let cfg = PretrainConfig { epochs: 40, lr: 3e-3, batch: 32, seed: 3 };
        let losses = pretrain_reference_encoder(
            &w.retriever,
            &mut w.store,
            &w.vocab,
            &w.world.corpus,
            &pairs,
            &cfg,
        )
        .unwrap();
        let head: f64 = losses[..5].iter().sum::<f64>() / 5.0;
        let tail: f64 = losses[losses.len() - 5..].iter().sum::<f64>() / 5.0;
        assert!(tail < 0.2 * head, "pretraining stalled: {head} -> {tail}");
        // Publish into the frozen reference and rebuild the index.
        w.retriever.sync_reference(&mut w.store).unwrap();
        let index = build_index(&w.world.corpus, &w.retriever, &w.store, &w.vocab).unwrap();
        let embed = |text: &str| w.retriever.embed_reference_subquery(&w.store, &w.vocab, text);
        // Gold support documents surface in the top-3 for nearly every
        // held-out question...
        let rate = synth::retrieval_validation(&w.world.test, &index, 3, embed).unwrap();
        assert!(rate >= 0.95, "validation rate {rate}");
        // ...so the explicit teacher answers nearly everything correctly.
        let embed2 = |text: &str| w.retriever.embed_reference_subquery(&w.store, &w.vocab, text);
        let mut correct = 0;
        let sample: Vec<_> = w.world.test.iter().take(40).collect();
        for item in &sample {
            let t = synth::teacher_run(item, &index, 3, embed2).unwrap();
            correct += usize::from(t.correct);
        }
        let em = correct as f64 / sample.len() as f64;
        assert!(em >= 0.95, "teacher EM {em}");
    }

    #[test]
    fn pretraining_rejects_bad_inputs() {
        let mut w = build_world(0.0);
        let cfg = PretrainConfig { epochs: 1, lr: 1e-3, batch: 4, seed: 0 };
        assert!(matches!(
            pretrain_reference_encoder(&w.retriever, &mut w.store, &w.vocab, &w.world.corpus, &[], &cfg),
            Err(Error::Data(_))
        ));
        let ghost = vec![("the birth place of nobody".to_string(), "missing-doc".to_string())];
        assert!(matches!(
            pretrain_reference_encoder(
                &w.retriever, &mut w.store, &w.vocab, &w.world.corpus, &ghost, &cfg
            ),
            Err(Error::Data(_))
        ));
        let mut bad = RunConfig::default();
        bad.set("pretrain.batch", "1").unwrap();
        assert!(matches!(PretrainConfig::from_run(&bad), Err(Error::Parameter(_))));
    }

    #[test]
    fn divergence_aborts_with_a_numeric_error() {
        let mut w = build_world(0.0);
        let examples = [w.example(0, 3000)];
        // An absurd learning rate sends the loss to NaN within a few steps.
        let cfg = TrainConfig { epochs: 30, lr: 1e6, batch_size: 1, bins: 1, ..base_train_config() };
        let result = train(
            &w.model,
            &mut w.store,
            &w.retriever,
            &w.decoder,
            None,
            &w.index,
            &w.vocab,
            &examples,
            &cfg,
            |_, _| Ok(()),
        );
        assert!(matches!(result, Err(Error::Numeric(_))));
    }

    #[test]
    fn topk_rows_agrees_with_pseudo_relevant_on_the_real_index() {
        // Sanity tie-in: the pseudo-relevant helper is the same ranking the
        // retrieval engine serves.
        let w = build_world(0.0);
        let example = w.example(2, 3000);
        let step = &example.steps[0];
        let reference = step.reference_embedding.as_ref().unwrap();
        let ranked = topk_rows(&w.index, reference, 16).unwrap();
        let rows: Vec<usize> = ranked.into_iter().map(|(r, _)| r).collect();
        assert_eq!(&rows, step.pseudo_relevant.as_ref().unwrap());
    }
}
