//! No-grad incremental inference with a KV cache.
//!
//! The forward pass here processes one position at a time against cached
//! keys and values.  It calls the same kernels as the differentiable path in
//! [`crate::model`], reduces in the same ascending order, and therefore
//! produces hidden states that are bit-identical to a full-context forward
//! over the same tokens — prefilling in one call, in chunks, or token by
//! token cannot change a single bit of the output.  The tests pin that down.
//!
//! Every model call that costs a forward pass goes through [`LlmSession`]
//! methods that record a [`LedgerEvent`], so pass accounting is enforced at
//! the only place passes can happen.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::kernels::{self, Mat};
use crate::ledger::{EventKind, ForwardPassLedger, LedgerEvent, Stage};
use crate::model::LlmModel;
use crate::params::ParamStore;
use crate::vocab::TokenId;

/// Per-layer cached keys and values, one `[len, head_dim]` matrix per head.
#[derive(Debug, Clone)]
struct LayerKv {
    k: Vec<Mat>,
    v: Vec<Mat>,
}

/// Cached attention state for an in-progress sequence.
#[derive(Debug, Clone)]
pub struct KvCache {
    layers: Vec<LayerKv>,
    len: usize,
}

impl KvCache {
    fn new(layers: usize, heads: usize, head_dim: usize) -> KvCache {
        let layer = LayerKv {
            k: vec![Mat::zeros(0, head_dim); heads],
            v: vec![Mat::zeros(0, head_dim); heads],
        };
        KvCache { layers: vec![layer; layers], len: 0 }
    }
}

/// One decoded token: the greedy choice and the hidden row it came from.
#[derive(Debug, Clone)]
pub struct DecodedToken {
    pub token: TokenId,
    pub hidden: Vec<f64>,
}

/// Incremental inference over one growing context.
pub struct LlmSession<'a> {
    model: &'a LlmModel,
    store: &'a ParamStore,
    cache: KvCache,
}

impl<'a> LlmSession<'a> {
    pub fn new(model: &'a LlmModel, store: &'a ParamStore) -> LlmSession<'a> {
        let cache = KvCache::new(model.cfg.layers, model.cfg.heads, model.cfg.head_dim());
        LlmSession { model, store, cache }
    }

    /// Number of positions already in the context.
    pub fn len(&self) -> usize {
        self.cache.len
    }

    pub fn is_empty(&self) -> bool {
        self.cache.len == 0
    }

    /// Positions still available before the context window is full.
    pub fn remaining(&self) -> usize {
        self.model.cfg.max_ctx - self.cache.len
    }

    fn param(&self, id: crate::params::ParamId) -> &[f64] {
        &self.store.get(id).data
    }

    /// Token embedding row for `id` (no position added).
    pub fn embedding_row(&self, id: TokenId) -> Result<Vec<f64>> {
        if id >= self.model.cfg.vocab_size {
            return Err(Error::Index(format!(
                "token id {id} out of vocabulary {}",
                self.model.cfg.vocab_size
            )));
        }
        let d = self.model.cfg.d_model;
        Ok(self.param(self.model.tok_embed)[id * d..(id + 1) * d].to_vec())
    }

    /// Advance the context by one embedding-space row; returns the
    /// final-layer-norm hidden state at the new position.
    pub fn forward_row(&mut self, row: &[f64]) -> Result<Vec<f64>> {
        let d = self.model.cfg.d_model;
        let dh = self.model.cfg.head_dim();
        if row.len() != d {
            return Err(Error::Shape(format!(
                "input row has width {}, model width is {d}",
                row.len()
            )));
        }
        let pos = self.cache.len;
        if pos >= self.model.cfg.max_ctx {
            return Err(Error::Capacity(format!(
                "context window {} is full",
                self.model.cfg.max_ctx
            )));
        }
        let pos_row = &self.param(self.model.pos_embed)[pos * d..(pos + 1) * d];
        let mut x: Vec<f64> = (0..d).map(|i| row[i] + pos_row[i]).collect();
        let scale = 1.0 / (dh as f64).sqrt();

        for (l, layer) in self.model.layers.iter().enumerate() {
            let mut xn = vec![0.0; d];
            kernels::layer_norm_row(&x, self.param(layer.ln1_g), self.param(layer.ln1_b), &mut xn);
            let mut concat = vec![0.0; d];
            for h in 0..self.model.cfg.heads {
                let q = kernels::matmul(&xn, self.param(layer.wq[h]), 1, d, dh);
                let k = kernels::matmul(&xn, self.param(layer.wk[h]), 1, d, dh);
                let v = kernels::matmul(&xn, self.param(layer.wv[h]), 1, d, dh);
                let kv = &mut self.cache.layers[l];
                kv.k[h].push_rows(&Mat::from_vec(1, dh, k)?)?;
                kv.v[h].push_rows(&Mat::from_vec(1, dh, v)?)?;
                // Scores against every cached position, ascending, exactly as
                // the masked full-sequence softmax sees them.
                let mut scores = kernels::matmul_nt(&q, &kv.k[h].data, 1, dh, pos + 1);
                for s in scores.iter_mut() {
                    *s *= scale;
                }
                kernels::softmax_row(&mut scores, 1.0);
                let ctxv = kernels::matmul(&scores, &kv.v[h].data, 1, pos + 1, dh);
                concat[h * dh..(h + 1) * dh].copy_from_slice(&ctxv);
            }
            let o = kernels::matmul(&concat, self.param(layer.wo), 1, d, d);
            let bo = self.param(layer.bo);
            for i in 0..d {
                x[i] += o[i] + bo[i];
            }

            let mut xn2 = vec![0.0; d];
            kernels::layer_norm_row(&x, self.param(layer.ln2_g), self.param(layer.ln2_b), &mut xn2);
            let mut f = kernels::matmul(&xn2, self.param(layer.w1), 1, d, self.model.cfg.d_ff);
            let b1 = self.param(layer.b1);
            for (i, val) in f.iter_mut().enumerate() {
                *val = kernels::silu(*val + b1[i]);
            }
            let f2 = kernels::matmul(&f, self.param(layer.w2), 1, self.model.cfg.d_ff, d);
            let b2 = self.param(layer.b2);
            for i in 0..d {
                x[i] += f2[i] + b2[i];
            }
        }
        let mut out = vec![0.0; d];
        kernels::layer_norm_row(
            &x,
            self.param(self.model.final_ln_g),
            self.param(self.model.final_ln_b),
            &mut out,
        );
        self.cache.len += 1;
        Ok(out)
    }

    /// Feed token ids without recording any ledger event.
    pub fn feed_tokens(&mut self, ids: &[TokenId]) -> Result<Mat> {
        let d = self.model.cfg.d_model;
        let mut out = Mat::zeros(0, d);
        for &id in ids {
            let row = self.embedding_row(id)?;
            let h = self.forward_row(&row)?;
            out.push_rows(&Mat::from_vec(1, d, h)?)?;
        }
        Ok(out)
    }

    /// Feed raw embedding-space rows without recording any ledger event.
    pub fn feed_rows(&mut self, rows: &Mat) -> Result<Mat> {
        let d = self.model.cfg.d_model;
        let mut out = Mat::zeros(0, d);
        for r in 0..rows.rows {
            let h = self.forward_row(rows.row(r))?;
            out.push_rows(&Mat::from_vec(1, d, h)?)?;
        }
        Ok(out)
    }

    /// One parallel forward over `ids`, recorded as a single event with all
    /// tokens attributed to `stage`.
    pub fn prefill(
        &mut self,
        ledger: &mut ForwardPassLedger,
        stage: Stage,
        ids: &[TokenId],
    ) -> Result<Mat> {
        self.prefill_split(ledger, stage, &[], ids)
    }

    /// One parallel forward over `context_ids ++ stage_ids`, recorded as a
    /// single event: the context part is input riding along with the call,
    /// the stage part is what the call is for.  Feeding nothing records
    /// nothing.
    pub fn prefill_split(
        &mut self,
        ledger: &mut ForwardPassLedger,
        stage: Stage,
        context_ids: &[TokenId],
        stage_ids: &[TokenId],
    ) -> Result<Mat> {
        if context_ids.is_empty() && stage_ids.is_empty() {
            return Ok(Mat::zeros(0, self.model.cfg.d_model));
        }
        let start = Instant::now();
        let mut out = self.feed_tokens(context_ids)?;
        out.push_rows(&self.feed_tokens(stage_ids)?)?;
        ledger.record(LedgerEvent {
            stage,
            kind: EventKind::ParallelForward,
            context_tokens: context_ids.len(),
            stage_tokens: stage_ids.len(),
            tokens_out: out.rows,
            micros: start.elapsed().as_micros() as u64,
        });
        Ok(out)
    }

    /// One parallel forward over raw embedding rows; the first
    /// `context_rows` rows count as context, the rest as stage tokens.
    pub fn prefill_rows(
        &mut self,
        ledger: &mut ForwardPassLedger,
        stage: Stage,
        rows: &Mat,
        context_rows: usize,
    ) -> Result<Mat> {
        if rows.rows == 0 {
            return Ok(Mat::zeros(0, self.model.cfg.d_model));
        }
        if context_rows > rows.rows {
            return Err(Error::Shape(format!(
                "context_rows {context_rows} exceeds {} input rows",
                rows.rows
            )));
        }
        let start = Instant::now();
        let out = self.feed_rows(rows)?;
        ledger.record(LedgerEvent {
            stage,
            kind: EventKind::ParallelForward,
            context_tokens: context_rows,
            stage_tokens: rows.rows - context_rows,
            tokens_out: out.rows,
            micros: start.elapsed().as_micros() as u64,
        });
        Ok(out)
    }

    /// Feed one token and greedily pick the next from the unembedding;
    /// no ledger event.
    pub fn step_token(&mut self, input: TokenId) -> Result<DecodedToken> {
        let row = self.embedding_row(input)?;
        let hidden = self.forward_row(&row)?;
        let logits = self.unembed(&hidden);
        let token = argmax_tie_low(&logits);
        Ok(DecodedToken { token, hidden })
    }

    /// One autoregressive decoding step, recorded as one event.
    pub fn decode_token(
        &mut self,
        ledger: &mut ForwardPassLedger,
        stage: Stage,
        input: TokenId,
    ) -> Result<DecodedToken> {
        let start = Instant::now();
        let step = self.step_token(input)?;
        ledger.record(LedgerEvent {
            stage,
            kind: EventKind::AutoregressiveDecode,
            context_tokens: 0,
            stage_tokens: 1,
            tokens_out: 1,
            micros: start.elapsed().as_micros() as u64,
        });
        Ok(step)
    }

    /// Greedy decoding from `first_input` until `stop` is produced or
    /// `max_tokens` tokens have been emitted.  Returns the produced tokens,
    /// including `stop` when it was reached; one event per produced token.
    pub fn decode_greedy(
        &mut self,
        ledger: &mut ForwardPassLedger,
        stage: Stage,
        first_input: TokenId,
        stop: TokenId,
        max_tokens: usize,
    ) -> Result<Vec<TokenId>> {
        let mut out = Vec::new();
        let mut input = first_input;
        while out.len() < max_tokens && self.remaining() > 0 {
            let step = self.decode_token(ledger, stage, input)?;
            out.push(step.token);
            if step.token == stop {
                break;
            }
            input = step.token;
        }
        Ok(out)
    }

    /// Teacher-forced replay: feed each token in turn, one decode event per
    /// token, as if the model had produced exactly this sequence.  Used to
    /// account passes for explicit (token-level) reasoning traces.
    pub fn force_tokens(
        &mut self,
        ledger: &mut ForwardPassLedger,
        stage: Stage,
        tokens: &[TokenId],
    ) -> Result<()> {
        self.force_split(ledger, stage, &[], tokens)
    }

    /// Teacher-forced replay with pending context: `context_ids` are ingested
    /// silently and their count (and cost) ride with the segment's first
    /// decode event, keeping replayed ledgers free of parallel-forward
    /// events so that passes equal output tokens exactly.
    pub fn force_split(
        &mut self,
        ledger: &mut ForwardPassLedger,
        stage: Stage,
        context_ids: &[TokenId],
        tokens: &[TokenId],
    ) -> Result<()> {
        if tokens.is_empty() {
            if context_ids.is_empty() {
                return Ok(());
            }
            return Err(Error::Parameter(
                "pending context needs a following replay segment to ride with".into(),
            ));
        }
        let mut context = context_ids.len();
        let mut timer = Instant::now();
        self.feed_tokens(context_ids)?;
        for &t in tokens {
            let row = self.embedding_row(t)?;
            self.forward_row(&row)?;
            ledger.record(LedgerEvent {
                stage,
                kind: EventKind::AutoregressiveDecode,
                context_tokens: context,
                stage_tokens: 1,
                tokens_out: 1,
                micros: timer.elapsed().as_micros() as u64,
            });
            context = 0;
            timer = Instant::now();
        }
        Ok(())
    }

    /// Tied-unembedding logits for one hidden row.
    pub fn unembed(&self, hidden: &[f64]) -> Vec<f64> {
        let d = self.model.cfg.d_model;
        let v = self.model.cfg.vocab_size;
        let mut logits = kernels::matmul_nt(hidden, self.param(self.model.tok_embed), 1, d, v);
        let bias = self.param(self.model.out_bias);
        for (x, b) in logits.iter_mut().zip(bias) {
            *x += *b;
        }
        logits
    }

    /// Greedy choice over an explicit candidate set; costs no forward pass.
    pub fn restricted_argmax(&self, hidden: &[f64], allowed: &[TokenId]) -> Result<TokenId> {
        if allowed.is_empty() {
            return Err(Error::Parameter("restricted argmax over an empty set".into()));
        }
        let logits = self.unembed(hidden);
        let mut best = allowed[0];
        for &cand in &allowed[1..] {
            if logits[cand] > logits[best] || (logits[cand] == logits[best] && cand < best) {
                best = cand;
            }
        }
        Ok(best)
    }

    /// Top-`k` vocabulary readout of each hidden row through the tied
    /// unembedding — the standard logit-lens view of a latent state.
    pub fn logit_lens(&self, hiddens: &Mat, k: usize) -> Vec<Vec<(TokenId, f64)>> {
        let mut out = Vec::with_capacity(hiddens.rows);
        for r in 0..hiddens.rows {
            let logits = self.unembed(hiddens.row(r));
            let mut ranked: Vec<(TokenId, f64)> = logits.into_iter().enumerate().collect();
            ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            ranked.truncate(k);
            out.push(ranked);
        }
        out
    }
}

/// Index of the maximum value; ties go to the lower index.
pub fn argmax_tie_low(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LlmModel, ModelConfig};
    use crate::params::{GraphCtx, ParamStore};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(seed: u64, vocab: usize) -> (LlmModel, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = ModelConfig {
            d_model: 16,
            layers: 2,
            heads: 2,
            d_ff: 32,
            max_ctx: 32,
            vocab_size: vocab,
            dropout: 0.0,
        };
        let model = LlmModel::new(cfg, &mut store, &mut rng).unwrap();
        (model, store)
    }

    #[test]
    fn incremental_prefill_is_bit_identical_to_full_forward() {
        let (model, store) = build(31, 13);
        let ids: Vec<usize> = vec![3, 1, 4, 1, 5, 9, 2, 6, 5, 3, 5, 8];
        let mut full = LlmSession::new(&model, &store);
        let all = full.feed_tokens(&ids).unwrap();

        let mut chunked = LlmSession::new(&model, &store);
        let mut got = Mat::zeros(0, 16);
        got.push_rows(&chunked.feed_tokens(&ids[..5]).unwrap()).unwrap();
        got.push_rows(&chunked.feed_tokens(&ids[5..9]).unwrap()).unwrap();
        got.push_rows(&chunked.feed_tokens(&ids[9..]).unwrap()).unwrap();
        assert_eq!(all.data, got.data, "chunked prefill drifted from full forward");

        let mut stepped = LlmSession::new(&model, &store);
        let mut got1 = Mat::zeros(0, 16);
        for &id in &ids {
            got1.push_rows(&stepped.feed_tokens(&[id]).unwrap()).unwrap();
        }
        assert_eq!(all.data, got1.data, "token-at-a-time prefill drifted");
    }

    #[test]
    fn inference_matches_training_forward_bit_for_bit() {
        let (model, store) = build(32, 17);
        let ids: Vec<usize> = vec![0, 7, 11, 2, 2, 16, 4];
        let ctx = GraphCtx::eval();
        let tape_h = model.forward_tokens(&ctx, &store, &ids).unwrap().data();
        let mut sess = LlmSession::new(&model, &store);
        let inc_h = sess.feed_tokens(&ids).unwrap().data;
        assert_eq!(tape_h, inc_h);
        // And the logits agree too.
        let logits_tape = model
            .logits(&ctx, &store, &model.forward_tokens(&ctx, &store, &ids).unwrap())
            .unwrap()
            .data();
        let mut logits_inc = Vec::new();
        for r in 0..ids.len() {
            logits_inc.extend(sess.unembed(&inc_h[r * 16..(r + 1) * 16]));
        }
        assert_eq!(logits_tape, logits_inc);
    }

    #[test]
    fn ledger_protocol_counts_events_and_passes() {
        let (model, store) = build(33, 11);
        let mut ledger = ForwardPassLedger::new();
        let mut sess = LlmSession::new(&model, &store);
        // Empty prefill records nothing.
        sess.prefill(&mut ledger, Stage::Prefill, &[]).unwrap();
        assert!(ledger.events.is_empty());
        // A split prefill records one event with both buckets.
        let h = sess
            .prefill_split(&mut ledger, Stage::ThoughtGen, &[1, 2], &[3, 4, 5])
            .unwrap();
        assert_eq!(h.rows, 5);
        assert_eq!(ledger.events.len(), 1);
        let ev = &ledger.events[0];
        assert_eq!((ev.context_tokens, ev.stage_tokens, ev.tokens_out), (2, 3, 5));
        // Four decode steps record four events; passes = 1 + 4.
        for _ in 0..4 {
            sess.decode_token(&mut ledger, Stage::AnswerGen, 1).unwrap();
        }
        assert_eq!(ledger.events.len(), 5);
        assert_eq!(ledger.passes(), 5);
        assert_eq!(ledger.stage_passes(Stage::AnswerGen), 4);
    }

    #[test]
    fn decode_greedy_is_deterministic_and_bounded() {
        let (model, store) = build(34, 19);
        let run = || {
            let mut ledger = ForwardPassLedger::new();
            let mut sess = LlmSession::new(&model, &store);
            sess.prefill(&mut ledger, Stage::Prefill, &[4, 9, 2]).unwrap();
            sess.decode_greedy(&mut ledger, Stage::AnswerGen, 3, 1, 6).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
        assert!(a.len() <= 6 && !a.is_empty());
        if let Some(pos) = a.iter().position(|&t| t == 1) {
            assert_eq!(pos, a.len() - 1, "stop token must end the sequence");
        }
    }

    #[test]
    fn zero_hidden_with_zero_bias_reads_out_all_zero_logits() {
        let (model, store) = build(35, 9);
        let sess = LlmSession::new(&model, &store);
        let logits = sess.unembed(&[0.0; 16]);
        assert!(logits.iter().all(|&x| x == 0.0));
        // All-tied top-k resolves by ascending token id.
        let lens = sess.logit_lens(&Mat::from_vec(1, 16, vec![0.0; 16]).unwrap(), 3);
        let ids: Vec<usize> = lens[0].iter().map(|p| p.0).collect();
        assert_eq!(ids, vec![0, 1, 2]);
    }

    #[test]
    fn argmax_breaks_ties_toward_lower_index() {
        assert_eq!(argmax_tie_low(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax_tie_low(&[5.0]), 0);
        assert_eq!(argmax_tie_low(&[-1.0, -1.0, -1.0]), 0);
    }

    #[test]
    fn restricted_argmax_consults_only_the_candidate_set() {
        let (model, store) = build(36, 12);
        let mut sess = LlmSession::new(&model, &store);
        let h = sess.feed_tokens(&[2, 5, 7]).unwrap();
        let hidden = h.row(2);
        let full = sess.unembed(hidden);
        let global = argmax_tie_low(&full);
        let allowed: Vec<usize> = (0..12).filter(|&t| t != global).collect();
        let pick = sess.restricted_argmax(hidden, &allowed).unwrap();
        assert_ne!(pick, global);
        assert!(allowed.contains(&pick));
    }

    #[test]
    fn context_overflow_is_a_capacity_error() {
        let (model, store) = build(37, 8);
        let mut sess = LlmSession::new(&model, &store);
        let ids: Vec<usize> = (0..32).map(|i| i % 8).collect();
        sess.feed_tokens(&ids).unwrap();
        assert_eq!(sess.remaining(), 0);
        assert!(matches!(sess.feed_tokens(&[0]), Err(Error::Capacity(_))));
    }
}
