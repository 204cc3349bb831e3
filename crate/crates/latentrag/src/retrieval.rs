//! Dense retrieval: corpus index, trainable query encoder with a frozen
//! reference twin, the LLM→retriever projector, the three retrieval training
//! objectives, and anisotropy diagnostics.
//!
//! Two encoders share one architecture and one initialization: the trainable
//! encoder embeds latent subqueries (through the projector) and receives
//! gradients; the reference encoder embeds subquery *text* and documents and
//! never moves during joint training.  Documents are embedded once into an
//! immutable [`CorpusIndex`]; training only ever moves the query side.

use std::collections::BTreeSet;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Reader};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::kernels::{self, Mat};
use crate::model::ModelConfig;
use crate::params::{GraphCtx, ParamId, ParamStore};
use crate::tensor::{kl_divergence, Tensor};
use crate::vocab::{TokenId, Vocabulary};

const INDEX_MAGIC: &[u8; 8] = b"LRAGIDX1";
const INDEX_VERSION: u32 = 1;

/// One retrievable document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub title: String,
    pub text: String,
}

// ── retrieval encoder ──────────────────────────────────────────────────────

/// Dimensions of the retrieval encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    /// Hidden width and output embedding dimension.
    pub d_ret: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub max_ctx: usize,
    pub vocab_size: usize,
}

impl EncoderConfig {
    pub fn from_run(cfg: &RunConfig, vocab_size: usize) -> Result<EncoderConfig> {
        let ec = EncoderConfig {
            d_ret: cfg.get_usize("retrieval.d_ret")?,
            layers: cfg.get_usize("retrieval.enc_layers")?,
            heads: cfg.get_usize("retrieval.enc_heads")?,
            d_ff: cfg.get_usize("retrieval.enc_ff")?,
            max_ctx: cfg.get_usize("retrieval.enc_ctx")?,
            vocab_size,
        };
        ec.validate()?;
        Ok(ec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_ret == 0 || self.layers == 0 || self.heads == 0 || self.d_ff == 0 {
            return Err(Error::Parameter("encoder dimensions must be positive".into()));
        }
        if !self.d_ret.is_multiple_of(self.heads) {
            return Err(Error::Parameter(format!(
                "d_ret {} is not divisible by {} heads",
                self.d_ret, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_ret / self.heads
    }
}

/// Parameter ids of one bidirectional encoder layer.
#[derive(Debug, Clone)]
struct EncLayer {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: Vec<ParamId>,
    wk: Vec<ParamId>,
    wv: Vec<ParamId>,
    wo: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// A small bidirectional transformer encoder: mean-pooled, L2-normalized.
///
/// Encoder dropout is always zero so that frozen-reference targets stay
/// noise-free.
#[derive(Debug, Clone)]
pub struct RetEncoder {
    pub cfg: EncoderConfig,
    prefix: String,
    tok_embed: ParamId,
    pos_embed: ParamId,
    layers: Vec<EncLayer>,
    final_ln_g: ParamId,
    final_ln_b: ParamId,
}

impl RetEncoder {
    /// Register fresh parameters under `prefix`.
    pub fn new(
        prefix: &str,
        cfg: EncoderConfig,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        trainable: bool,
    ) -> Result<RetEncoder> {
        cfg.validate()?;
        let d = cfg.d_ret;
        let dh = cfg.head_dim();
        let w_std = 1.0 / (d as f64).sqrt();
        let ff_std = 1.0 / (cfg.d_ff as f64).sqrt();
        let t = trainable;
        store.register_gaussian(&format!("{prefix}.tok_embed"), cfg.vocab_size, d, 0.02, rng, t)?;
        store.register_gaussian(&format!("{prefix}.pos_embed"), cfg.max_ctx, d, 0.02, rng, t)?;
        for l in 0..cfg.layers {
            let p = |s: &str| format!("{prefix}.l{l}.{s}");
            store.register_ones(&p("ln1.g"), 1, d, t)?;
            store.register_zeros(&p("ln1.b"), 1, d, t)?;
            for h in 0..cfg.heads {
                store.register_gaussian(&p(&format!("h{h}.wq")), d, dh, w_std, rng, t)?;
                store.register_gaussian(&p(&format!("h{h}.wk")), d, dh, w_std, rng, t)?;
                store.register_gaussian(&p(&format!("h{h}.wv")), d, dh, w_std, rng, t)?;
            }
            store.register_gaussian(&p("wo"), d, d, w_std, rng, t)?;
            store.register_zeros(&p("bo"), 1, d, t)?;
            store.register_ones(&p("ln2.g"), 1, d, t)?;
            store.register_zeros(&p("ln2.b"), 1, d, t)?;
            store.register_gaussian(&p("w1"), d, cfg.d_ff, w_std, rng, t)?;
            store.register_zeros(&p("b1"), 1, cfg.d_ff, t)?;
            store.register_gaussian(&p("w2"), cfg.d_ff, d, ff_std, rng, t)?;
            store.register_zeros(&p("b2"), 1, d, t)?;
        }
        store.register_ones(&format!("{prefix}.lnf.g"), 1, d, t)?;
        store.register_zeros(&format!("{prefix}.lnf.b"), 1, d, t)?;
        RetEncoder::attach(prefix, cfg, store)
    }

    /// Resolve an already-registered parameter family by name.
    pub fn attach(prefix: &str, cfg: EncoderConfig, store: &ParamStore) -> Result<RetEncoder> {
        let id = |name: String| {
            store
                .id_by_name(&name)
                .ok_or_else(|| Error::Data(format!("missing encoder parameter '{name}'")))
        };
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let p = |s: &str| format!("{prefix}.l{l}.{s}");
            let mut wq = Vec::new();
            let mut wk = Vec::new();
            let mut wv = Vec::new();
            for h in 0..cfg.heads {
                wq.push(id(p(&format!("h{h}.wq")))?);
                wk.push(id(p(&format!("h{h}.wk")))?);
                wv.push(id(p(&format!("h{h}.wv")))?);
            }
            layers.push(EncLayer {
                ln1_g: id(p("ln1.g"))?,
                ln1_b: id(p("ln1.b"))?,
                wq,
                wk,
                wv,
                wo: id(p("wo"))?,
                bo: id(p("bo"))?,
                ln2_g: id(p("ln2.g"))?,
                ln2_b: id(p("ln2.b"))?,
                w1: id(p("w1"))?,
                b1: id(p("b1"))?,
                w2: id(p("w2"))?,
                b2: id(p("b2"))?,
            });
        }
        Ok(RetEncoder {
            tok_embed: id(format!("{prefix}.tok_embed"))?,
            pos_embed: id(format!("{prefix}.pos_embed"))?,
            layers,
            final_ln_g: id(format!("{prefix}.lnf.g"))?,
            final_ln_b: id(format!("{prefix}.lnf.b"))?,
            cfg,
            prefix: prefix.to_string(),
        })
    }

    /// All parameter ids, in a fixed structural order.
    pub fn all_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.tok_embed, self.pos_embed];
        for l in &self.layers {
            ids.extend([l.ln1_g, l.ln1_b]);
            for h in 0..self.cfg.heads {
                ids.extend([l.wq[h], l.wk[h], l.wv[h]]);
            }
            ids.extend([l.wo, l.bo, l.ln2_g, l.ln2_b, l.w1, l.b1, l.w2, l.b2]);
        }
        ids.extend([self.final_ln_g, self.final_ln_b]);
        ids
    }

    /// Register a frozen copy of this encoder's current values under
    /// `new_prefix`.
    pub fn frozen_copy(&self, new_prefix: &str, store: &mut ParamStore) -> Result<RetEncoder> {
        let src: Vec<(String, usize, usize, Vec<f64>)> = self
            .all_ids()
            .into_iter()
            .map(|id| {
                let p = store.get(id);
                (p.name.clone(), p.rows, p.cols, p.data.clone())
            })
            .collect();
        let old = format!("{}.", self.prefix);
        let new = format!("{new_prefix}.");
        for (name, rows, cols, data) in src {
            let renamed = name.replacen(&old, &new, 1);
            store.register(&renamed, rows, cols, data, false)?;
        }
        RetEncoder::attach(new_prefix, self.cfg.clone(), store)
    }

    /// Overwrite this encoder's values with `src`'s (both must share the
    /// architecture).
    pub fn copy_values_from(&self, src: &RetEncoder, store: &mut ParamStore) -> Result<()> {
        let dst_ids = self.all_ids();
        let src_ids = src.all_ids();
        if dst_ids.len() != src_ids.len() {
            return Err(Error::Shape("encoder architectures differ".into()));
        }
        for (d, s) in dst_ids.into_iter().zip(src_ids) {
            let data = store.get(s).data.clone();
            let dst = store.get_mut(d);
            if dst.data.len() != data.len() {
                return Err(Error::Shape(format!(
                    "parameter '{}' shape differs from its source",
                    dst.name
                )));
            }
            dst.data = data;
        }
        Ok(())
    }

    /// Checkpoint view of this encoder's parameters.
    pub fn to_checkpoint(&self, store: &ParamStore) -> Checkpoint {
        let mut ck = Checkpoint::new("");
        for id in self.all_ids() {
            let p = store.get(id);
            ck.insert(&p.name, vec![p.rows, p.cols], p.data.clone())
                .expect("encoder parameter names are unique");
        }
        ck
    }

    /// Fingerprint of the current weights, stamped into index files.
    pub fn weights_hash(&self, store: &ParamStore) -> String {
        self.to_checkpoint(store).content_hash()
    }

    /// Bidirectional body over embedding-space rows, then mean-pool and
    /// L2-normalize: `[t, d_ret] -> [1, d_ret]` with unit norm.
    pub fn forward_rows(&self, ctx: &GraphCtx, store: &ParamStore, rows: &Tensor) -> Result<Tensor> {
        let t = rows.rows();
        let d = self.cfg.d_ret;
        if rows.cols() != d {
            return Err(Error::Shape(format!(
                "encoder rows have width {}, encoder width is {d}",
                rows.cols()
            )));
        }
        if t == 0 {
            return Err(Error::Data("cannot encode an empty sequence".into()));
        }
        if t > self.cfg.max_ctx {
            return Err(Error::Capacity(format!(
                "sequence of {t} exceeds encoder context {}",
                self.cfg.max_ctx
            )));
        }
        let positions: Vec<usize> = (0..t).collect();
        let pos = ctx.param(store, self.pos_embed)?.gather(&positions)?;
        let mut x = rows.add(&pos)?;
        let scale = 1.0 / (self.cfg.head_dim() as f64).sqrt();
        for layer in &self.layers {
            let xn = x.layer_norm(&ctx.param(store, layer.ln1_g)?, &ctx.param(store, layer.ln1_b)?)?;
            let mut heads = Vec::with_capacity(self.cfg.heads);
            for h in 0..self.cfg.heads {
                let q = xn.matmul(&ctx.param(store, layer.wq[h])?)?;
                let k = xn.matmul(&ctx.param(store, layer.wk[h])?)?;
                let v = xn.matmul(&ctx.param(store, layer.wv[h])?)?;
                // No causal mask: every position attends everywhere.
                let attn = q.matmul_nt(&k)?.scale(scale)?.softmax(1.0)?;
                heads.push(attn.matmul(&v)?);
            }
            let concat = ctx.tape.concat_cols(&heads)?;
            let o = concat
                .matmul(&ctx.param(store, layer.wo)?)?
                .add_row(&ctx.param(store, layer.bo)?)?;
            x = x.add(&o)?;
            let xn2 = x.layer_norm(&ctx.param(store, layer.ln2_g)?, &ctx.param(store, layer.ln2_b)?)?;
            let f = xn2
                .matmul(&ctx.param(store, layer.w1)?)?
                .add_row(&ctx.param(store, layer.b1)?)?
                .silu()?
                .matmul(&ctx.param(store, layer.w2)?)?
                .add_row(&ctx.param(store, layer.b2)?)?;
            x = x.add(&f)?;
        }
        let x = x.layer_norm(&ctx.param(store, self.final_ln_g)?, &ctx.param(store, self.final_ln_b)?)?;
        x.mean_rows()?.l2_normalize_rows()
    }

    /// Embed a token sequence: `[1, d_ret]`, unit norm.
    pub fn embed_tokens(&self, ctx: &GraphCtx, store: &ParamStore, ids: &[TokenId]) -> Result<Tensor> {
        if ids.is_empty() {
            return Err(Error::Data("cannot encode an empty token sequence".into()));
        }
        for &id in ids {
            if id >= self.cfg.vocab_size {
                return Err(Error::Index(format!(
                    "token id {id} out of vocabulary {}",
                    self.cfg.vocab_size
                )));
            }
        }
        let rows = ctx.param(store, self.tok_embed)?.gather(ids)?;
        self.forward_rows(ctx, store, &rows)
    }

    /// No-grad embedding of a token sequence as a plain vector.
    pub fn embed_tokens_frozen(&self, store: &ParamStore, ids: &[TokenId]) -> Result<Vec<f64>> {
        let ctx = GraphCtx::eval();
        Ok(self.embed_tokens(&ctx, store, ids)?.data())
    }
}

// ── projector ──────────────────────────────────────────────────────────────

/// Bridges last-layer LLM hidden states into the retrieval encoder's input
/// space: one bidirectional self-attention layer plus one position-wise
/// feed-forward layer, `[n, d_model] -> [n, d_ret]`.
#[derive(Debug, Clone)]
pub struct RetrieverProjector {
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub d_ret: usize,
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: Vec<ParamId>,
    wk: Vec<ParamId>,
    wv: Vec<ParamId>,
    wo: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl RetrieverProjector {
    pub fn new(
        prefix: &str,
        d_model: usize,
        heads: usize,
        d_ff: usize,
        d_ret: usize,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Result<RetrieverProjector> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(Error::Parameter(format!(
                "projector width {d_model} is not divisible by {heads} heads"
            )));
        }
        let dh = d_model / heads;
        let w_std = 1.0 / (d_model as f64).sqrt();
        let ff_std = 1.0 / (d_ff as f64).sqrt();
        let p = |s: &str| format!("{prefix}.{s}");
        let mut wq = Vec::new();
        let mut wk = Vec::new();
        let mut wv = Vec::new();
        let ln1_g = store.register_ones(&p("ln1.g"), 1, d_model, true)?;
        let ln1_b = store.register_zeros(&p("ln1.b"), 1, d_model, true)?;
        for h in 0..heads {
            wq.push(store.register_gaussian(&p(&format!("h{h}.wq")), d_model, dh, w_std, rng, true)?);
            wk.push(store.register_gaussian(&p(&format!("h{h}.wk")), d_model, dh, w_std, rng, true)?);
            wv.push(store.register_gaussian(&p(&format!("h{h}.wv")), d_model, dh, w_std, rng, true)?);
        }
        Ok(RetrieverProjector {
            ln1_g,
            ln1_b,
            wq,
            wk,
            wv,
            wo: store.register_gaussian(&p("wo"), d_model, d_model, w_std, rng, true)?,
            bo: store.register_zeros(&p("bo"), 1, d_model, true)?,
            ln2_g: store.register_ones(&p("ln2.g"), 1, d_model, true)?,
            ln2_b: store.register_zeros(&p("ln2.b"), 1, d_model, true)?,
            w1: store.register_gaussian(&p("w1"), d_model, d_ff, w_std, rng, true)?,
            b1: store.register_zeros(&p("b1"), 1, d_ff, true)?,
            w2: store.register_gaussian(&p("w2"), d_ff, d_ret, ff_std, rng, true)?,
            b2: store.register_zeros(&p("b2"), 1, d_ret, true)?,
            d_model,
            heads,
            d_ff,
            d_ret,
        })
    }

    /// `[n, d_model] -> [n, d_ret]`; output length always equals input
    /// length.
    pub fn forward(&self, ctx: &GraphCtx, store: &ParamStore, h: &Tensor) -> Result<Tensor> {
        if h.cols() != self.d_model {
            return Err(Error::Shape(format!(
                "projector input has width {}, expected {}",
                h.cols(),
                self.d_model
            )));
        }
        let dh = self.d_model / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let xn = h.layer_norm(&ctx.param(store, self.ln1_g)?, &ctx.param(store, self.ln1_b)?)?;
        let mut heads = Vec::with_capacity(self.heads);
        for i in 0..self.heads {
            let q = xn.matmul(&ctx.param(store, self.wq[i])?)?;
            let k = xn.matmul(&ctx.param(store, self.wk[i])?)?;
            let v = xn.matmul(&ctx.param(store, self.wv[i])?)?;
            let attn = q.matmul_nt(&k)?.scale(scale)?.softmax(1.0)?;
            heads.push(attn.matmul(&v)?);
        }
        let concat = ctx.tape.concat_cols(&heads)?;
        let o = concat
            .matmul(&ctx.param(store, self.wo)?)?
            .add_row(&ctx.param(store, self.bo)?)?;
        let x = h.add(&o)?;
        let xn2 = x.layer_norm(&ctx.param(store, self.ln2_g)?, &ctx.param(store, self.ln2_b)?)?;
        xn2.matmul(&ctx.param(store, self.w1)?)?
            .add_row(&ctx.param(store, self.b1)?)?
            .silu()?
            .matmul(&ctx.param(store, self.w2)?)?
            .add_row(&ctx.param(store, self.b2)?)
    }
}

// ── retriever bundle ───────────────────────────────────────────────────────

/// The full retrieval side: trainable encoder, frozen reference, projector,
/// and retrieval hyperparameters.
#[derive(Debug, Clone)]
pub struct Retriever {
    pub encoder: RetEncoder,
    pub reference: RetEncoder,
    pub projector: RetrieverProjector,
    pub beta: f64,
    pub top_k: usize,
    pub pseudo_top: usize,
    pub latent_n: usize,
}

impl Retriever {
    /// Build both encoders (bit-identical initialization) and the projector.
    pub fn new(
        cfg: &RunConfig,
        model_cfg: &ModelConfig,
        vocab_size: usize,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Result<Retriever> {
        let enc_cfg = EncoderConfig::from_run(cfg, vocab_size)?;
        let encoder = RetEncoder::new("ret.enc", enc_cfg, store, rng, true)?;
        let reference = encoder.frozen_copy("ret.ref", store)?;
        let projector = RetrieverProjector::new(
            "ret.proj",
            model_cfg.d_model,
            model_cfg.heads,
            model_cfg.d_ff,
            cfg.get_usize("retrieval.d_ret")?,
            store,
            rng,
        )?;
        Ok(Retriever {
            encoder,
            reference,
            projector,
            beta: cfg.get_f64("retrieval.beta")?,
            top_k: cfg.get_usize("retrieval.top_k")?,
            pseudo_top: cfg.get_usize("retrieval.pseudo_top")?,
            latent_n: cfg.get_usize("latent.n")?,
        })
    }

    /// Copy the trainable encoder's current values into the reference —
    /// done once, after reference pretraining, before joint training.
    pub fn sync_reference(&self, store: &mut ParamStore) -> Result<()> {
        self.reference.copy_values_from(&self.encoder, store)
    }

    /// Frozen text embedding `v' = f_RET(s; θ'_RET)`.
    pub fn embed_reference_subquery(
        &self,
        store: &ParamStore,
        vocab: &Vocabulary,
        text: &str,
    ) -> Result<Vec<f64>> {
        if text.trim().is_empty() {
            return Err(Error::Data("cannot embed an empty subquery".into()));
        }
        let ids = vocab.tokenize(text)?;
        self.reference.embed_tokens_frozen(store, &ids)
    }

    /// Differentiable latent embedding `v = f_RET(Proj_RET(H_s); θ_RET)`.
    /// `h_s` must hold exactly the configured number of query-slot rows.
    pub fn embed_latent_subquery(
        &self,
        ctx: &GraphCtx,
        store: &ParamStore,
        h_s: &Tensor,
    ) -> Result<Tensor> {
        if h_s.rows() != self.latent_n {
            return Err(Error::Shape(format!(
                "latent subquery has {} rows, expected {} query slots",
                h_s.rows(),
                self.latent_n
            )));
        }
        let projected = self.projector.forward(ctx, store, h_s)?;
        self.encoder.forward_rows(ctx, store, &projected)
    }
}

// ── corpus index ───────────────────────────────────────────────────────────

/// Immutable document embeddings plus the documents themselves.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusIndex {
    pub documents: Vec<Document>,
    /// `[N, d_ret]`, rows unit-normalized.
    pub embeddings: Mat,
    /// Weights fingerprint of the encoder that built the index.
    pub encoder_hash: String,
}

impl CorpusIndex {
    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn d_ret(&self) -> usize {
        self.embeddings.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.embeddings.row(i)
    }

    pub fn position_of(&self, doc_id: &str) -> Option<usize> {
        self.documents.iter().position(|d| d.id == doc_id)
    }

    // ── file format ────────────────────────────────────────────────────────
    //
    // magic "LRAGIDX1", u32 version,
    // u16-len encoder hash, u32 doc count, u32 d_ret,
    // per document: u16-len id, u16-len title, u32-len text,
    // then count*d_ret little-endian f64.

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(INDEX_MAGIC);
        out.extend_from_slice(&INDEX_VERSION.to_le_bytes());
        let hash = self.encoder_hash.as_bytes();
        out.extend_from_slice(&(hash.len() as u16).to_le_bytes());
        out.extend_from_slice(hash);
        out.extend_from_slice(&(self.documents.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.embeddings.cols as u32).to_le_bytes());
        for d in &self.documents {
            for field in [&d.id, &d.title] {
                let b = field.as_bytes();
                out.extend_from_slice(&(b.len() as u16).to_le_bytes());
                out.extend_from_slice(b);
            }
            let b = d.text.as_bytes();
            out.extend_from_slice(&(b.len() as u32).to_le_bytes());
            out.extend_from_slice(b);
        }
        for &v in &self.embeddings.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<CorpusIndex> {
        let mut r = Reader::new(bytes);
        if r.take(8)? != INDEX_MAGIC {
            return Err(Error::Format("not an index file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != INDEX_VERSION {
            return Err(Error::Format(format!("unsupported index version {version}")));
        }
        let encoder_hash = r.str16()?;
        let count = r.u32()? as usize;
        let d_ret = r.u32()? as usize;
        let mut documents = Vec::with_capacity(count.min(4096));
        let mut seen = BTreeSet::new();
        for _ in 0..count {
            let id = r.str16()?;
            if !seen.insert(id.clone()) {
                return Err(Error::Format(format!("duplicate document id '{id}'")));
            }
            let title = r.str16()?;
            let text_len = r.u32()? as usize;
            let text = String::from_utf8(r.take(text_len)?.to_vec())
                .map_err(|_| Error::Format("document text is not utf-8".into()))?;
            documents.push(Document { id, title, text });
        }
        let want = count
            .checked_mul(d_ret)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::Format("embedding extent overflow".into()))?;
        if r.remaining() != want {
            return Err(Error::Format(format!(
                "embedding section holds {} bytes but manifest requires {want}",
                r.remaining()
            )));
        }
        let mut data = Vec::with_capacity(count * d_ret);
        for _ in 0..count * d_ret {
            data.push(r.f64()?);
        }
        let embeddings = Mat::from_vec(count, d_ret, data)?;
        for i in 0..count {
            let norm = kernels::l2_norm(embeddings.row(i));
            if (norm - 1.0).abs() > 1e-9 {
                return Err(Error::Format(format!(
                    "index row {i} has norm {norm}, expected 1"
                )));
            }
        }
        Ok(CorpusIndex { documents, embeddings, encoder_hash })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<CorpusIndex> {
        CorpusIndex::from_bytes(&std::fs::read(path)?)
    }
}

/// Embed every document with the frozen reference encoder.
pub fn build_index(
    corpus: &[Document],
    retriever: &Retriever,
    store: &ParamStore,
    vocab: &Vocabulary,
) -> Result<CorpusIndex> {
    if corpus.is_empty() {
        return Err(Error::Data("cannot index an empty corpus".into()));
    }
    let mut seen = BTreeSet::new();
    for d in corpus {
        if !seen.insert(d.id.as_str()) {
            return Err(Error::Data(format!("duplicate document id '{}'", d.id)));
        }
    }
    let d_ret = retriever.reference.cfg.d_ret;
    let mut embeddings = Mat::zeros(0, d_ret);
    for d in corpus {
        let ids = vocab.tokenize(&d.text)?;
        let v = retriever.reference.embed_tokens_frozen(store, &ids)?;
        embeddings.push_rows(&Mat::from_vec(1, d_ret, v)?)?;
    }
    Ok(CorpusIndex {
        documents: corpus.to_vec(),
        embeddings,
        encoder_hash: retriever.reference.weights_hash(store),
    })
}

/// Exact top-k by cosine similarity; ties broken by ascending document id.
/// Returns `(row position, score)` pairs.
pub fn topk_rows(index: &CorpusIndex, query: &[f64], k: usize) -> Result<Vec<(usize, f64)>> {
    if k > index.len() {
        return Err(Error::Parameter(format!(
            "top-{k} requested from an index of {}",
            index.len()
        )));
    }
    let mut scored = Vec::with_capacity(index.len());
    for i in 0..index.len() {
        let score = kernels::cosine(query, index.row(i))?;
        scored.push((i, score));
    }
    scored.sort_by(|a, b| {
        b.1.total_cmp(&a.1)
            .then_with(|| index.documents[a.0].id.cmp(&index.documents[b.0].id))
    });
    scored.truncate(k);
    Ok(scored)
}

/// [`topk_rows`] mapped to `(document id, score)`.
pub fn topk(index: &CorpusIndex, query: &[f64], k: usize) -> Result<Vec<(String, f64)>> {
    Ok(topk_rows(index, query, k)?
        .into_iter()
        .map(|(i, s)| (index.documents[i].id.clone(), s))
        .collect())
}

/// One retrieved document with its similarity score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedDoc {
    pub id: String,
    pub score: f64,
    pub text: String,
}

/// Top-k retrieval materialized with document text.  A corpus smaller than
/// `k` returns every document, unpadded.
pub fn retrieve(index: &CorpusIndex, query: &[f64], k: usize) -> Result<Vec<RetrievedDoc>> {
    let k = k.min(index.len());
    Ok(topk_rows(index, query, k)?
        .into_iter()
        .map(|(i, score)| RetrievedDoc {
            id: index.documents[i].id.clone(),
            score,
            text: index.documents[i].text.clone(),
        })
        .collect())
}

/// Row positions of the pseudo-relevant documents for a reference embedding.
pub fn pseudo_relevant_rows(index: &CorpusIndex, reference: &[f64], top: usize) -> Result<Vec<usize>> {
    let top = top.min(index.len());
    Ok(topk_rows(index, reference, top)?.into_iter().map(|(i, _)| i).collect())
}

// ── similarity distributions and losses ────────────────────────────────────

/// A frozen probability distribution over candidate documents.
#[derive(Debug, Clone)]
pub struct SimilarityDistribution {
    pub ids: Vec<String>,
    pub probs: Vec<f64>,
    pub beta: f64,
}

/// A differentiable distribution over the same kind of candidate set.
#[derive(Debug, Clone)]
pub struct LatentDistribution {
    pub ids: Vec<String>,
    pub probs: Tensor,
    pub beta: f64,
}

/// Temperature softmax over raw similarity scores.
pub fn softmax_over_sims(sims: &[f64], beta: f64) -> Result<Vec<f64>> {
    if beta <= 0.0 {
        return Err(Error::Parameter(format!("temperature must be positive, got {beta}")));
    }
    if sims.is_empty() {
        return Err(Error::Parameter("no candidates to score".into()));
    }
    let mut probs = sims.to_vec();
    kernels::softmax_row(&mut probs, beta);
    Ok(probs)
}

/// Frozen distribution of a query over selected index rows.
pub fn similarity_distribution(
    index: &CorpusIndex,
    query: &[f64],
    candidate_rows: &[usize],
    beta: f64,
) -> Result<SimilarityDistribution> {
    let mut sims = Vec::with_capacity(candidate_rows.len());
    let mut ids = Vec::with_capacity(candidate_rows.len());
    for &row in candidate_rows {
        if row >= index.len() {
            return Err(Error::Index(format!("candidate row {row} out of {}", index.len())));
        }
        sims.push(kernels::cosine(query, index.row(row))?);
        ids.push(index.documents[row].id.clone());
    }
    let probs = softmax_over_sims(&sims, beta)?;
    Ok(SimilarityDistribution { ids, probs, beta })
}

/// Differentiable distribution of a latent query over selected index rows.
/// The latent embedding must be unit-normalized (it is, by construction);
/// candidate rows come from the frozen index and carry no gradient.
pub fn latent_distribution(
    ctx: &GraphCtx,
    index: &CorpusIndex,
    latent: &Tensor,
    candidate_rows: &[usize],
    beta: f64,
) -> Result<LatentDistribution> {
    if beta <= 0.0 {
        return Err(Error::Parameter(format!("temperature must be positive, got {beta}")));
    }
    if candidate_rows.is_empty() {
        return Err(Error::Parameter("no candidates to score".into()));
    }
    let d = index.d_ret();
    let mut data = Vec::with_capacity(candidate_rows.len() * d);
    let mut ids = Vec::with_capacity(candidate_rows.len());
    for &row in candidate_rows {
        if row >= index.len() {
            return Err(Error::Index(format!("candidate row {row} out of {}", index.len())));
        }
        data.extend_from_slice(index.row(row));
        ids.push(index.documents[row].id.clone());
    }
    let cands = ctx.tape.leaf(candidate_rows.len(), d, data, false)?;
    // Unit · unit: the dot product is the cosine.
    let probs = latent.matmul_nt(&cands)?.softmax(beta)?;
    Ok(LatentDistribution { ids, probs, beta })
}

/// Mean KL(p‖q) over paired (reference, latent) distributions — the dense
/// retrieval distillation objective.
pub fn kl_retrieval_loss(
    ctx: &GraphCtx,
    pairs: &[(SimilarityDistribution, LatentDistribution)],
) -> Result<Tensor> {
    if pairs.is_empty() {
        return Err(Error::Parameter("retrieval loss over an empty batch".into()));
    }
    let mut total: Option<Tensor> = None;
    for (p, q) in pairs {
        if p.ids != q.ids {
            return Err(Error::Data(
                "paired distributions cover different candidate sets".into(),
            ));
        }
        let p_leaf = ctx.tape.leaf(1, p.probs.len(), p.probs.clone(), false)?;
        let term = kl_divergence(&p_leaf, &q.probs)?;
        total = Some(match total {
            Some(t) => t.add(&term)?,
            None => term,
        });
    }
    total.unwrap().scale(1.0 / pairs.len() as f64)
}

/// Mean `1 − cos(v, v′)` over paired latent/reference embeddings — the
/// direct-alignment ablation objective.
pub fn cosine_alignment_loss(ctx: &GraphCtx, pairs: &[(Tensor, Vec<f64>)]) -> Result<Tensor> {
    if pairs.is_empty() {
        return Err(Error::Parameter("alignment loss over an empty batch".into()));
    }
    let one = ctx.tape.leaf(1, 1, vec![1.0], false)?;
    let mut total: Option<Tensor> = None;
    for (latent, reference) in pairs {
        let r = ctx.tape.leaf(1, reference.len(), reference.clone(), false)?;
        let c = crate::tensor::cosine_similarity(latent, &r)?;
        let term = one.sub(&c)?;
        total = Some(match total {
            Some(t) => t.add(&term)?,
            None => term,
        });
    }
    total.unwrap().scale(1.0 / pairs.len() as f64)
}

/// One InfoNCE example: a latent query, its positive document row, and
/// in-batch negative rows.
#[derive(Debug, Clone)]
pub struct InfoNceItem {
    pub latent: Tensor,
    pub positive_row: usize,
    pub negative_rows: Vec<usize>,
}

/// Mean InfoNCE over the batch: cross-entropy of each positive under the
/// cosine/β softmax over positive + negatives.
pub fn infonce_loss(
    ctx: &GraphCtx,
    index: &CorpusIndex,
    items: &[InfoNceItem],
    beta: f64,
) -> Result<Tensor> {
    if beta <= 0.0 {
        return Err(Error::Parameter(format!("temperature must be positive, got {beta}")));
    }
    if items.is_empty() {
        return Err(Error::Parameter("contrastive loss over an empty batch".into()));
    }
    let d = index.d_ret();
    let mut total: Option<Tensor> = None;
    for item in items {
        if item.negative_rows.is_empty() {
            return Err(Error::Parameter(
                "contrastive loss needs at least one negative".into(),
            ));
        }
        let mut data = Vec::with_capacity((1 + item.negative_rows.len()) * d);
        for &row in std::iter::once(&item.positive_row).chain(&item.negative_rows) {
            if row >= index.len() {
                return Err(Error::Index(format!("candidate row {row} out of {}", index.len())));
            }
            data.extend_from_slice(index.row(row));
        }
        let cands = ctx.tape.leaf(1 + item.negative_rows.len(), d, data, false)?;
        let logits = item.latent.matmul_nt(&cands)?.scale(1.0 / beta)?;
        let term = logits.cross_entropy(&[0])?;
        total = Some(match total {
            Some(t) => t.add(&term)?,
            None => term,
        });
    }
    total.unwrap().scale(1.0 / items.len() as f64)
}

// ── anisotropy diagnostics ─────────────────────────────────────────────────

/// Per-document geometry against the mean embedding direction.
#[derive(Debug, Clone, Serialize)]
pub struct AnisotropyReport {
    pub cosines: Vec<f64>,
    pub angles_deg: Vec<f64>,
    /// min, 25%, median, 75%, max.
    pub cosine_quantiles: [f64; 5],
    pub angle_quantiles: [f64; 5],
}

/// Cosine and angular distance of every document embedding to the
/// normalized mean direction, with summary quantiles.
pub fn anisotropy_report(index: &CorpusIndex) -> Result<AnisotropyReport> {
    if index.len() < 2 {
        return Err(Error::Parameter("anisotropy needs at least 2 documents".into()));
    }
    let d = index.d_ret();
    let n = index.len() as f64;
    let mut mean = vec![0.0; d];
    for i in 0..index.len() {
        for (m, &x) in mean.iter_mut().zip(index.row(i)) {
            *m += x;
        }
    }
    for m in mean.iter_mut() {
        *m /= n;
    }
    if kernels::l2_norm(&mean) == 0.0 {
        return Err(Error::Numeric(
            "mean embedding direction is degenerate (zero vector)".into(),
        ));
    }
    kernels::l2_normalize(&mut mean)?;
    let mut cosines = Vec::with_capacity(index.len());
    let mut angles = Vec::with_capacity(index.len());
    for i in 0..index.len() {
        let c = kernels::dot(index.row(i), &mean).clamp(-1.0, 1.0);
        cosines.push(c);
        angles.push(c.acos().to_degrees());
    }
    Ok(AnisotropyReport {
        cosine_quantiles: summary_quantiles(&cosines),
        angle_quantiles: summary_quantiles(&angles),
        cosines,
        angles_deg: angles,
    })
}

/// min, 25%, median, 75%, max with linear interpolation.
fn summary_quantiles(values: &[f64]) -> [f64; 5] {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    [0.0, 0.25, 0.5, 0.75, 1.0].map(|q| {
        let pos = q * (sorted.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        if lo == hi {
            sorted[lo]
        } else {
            sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
        }
    })
}

// ── temperature calibration ────────────────────────────────────────────────

/// Mean cumulative probability of the `top_n` most likely documents under
/// the cosine/β softmax over the whole index, averaged over `queries`.
pub fn mean_top_mass(
    index: &CorpusIndex,
    queries: &[Vec<f64>],
    beta: f64,
    top_n: usize,
) -> Result<f64> {
    if queries.is_empty() {
        return Err(Error::Parameter("calibration needs at least one query".into()));
    }
    let all_rows: Vec<usize> = (0..index.len()).collect();
    let mut acc = 0.0;
    for q in queries {
        let dist = similarity_distribution(index, q, &all_rows, beta)?;
        let mut probs = dist.probs;
        probs.sort_by(|a, b| b.total_cmp(a));
        acc += probs.iter().take(top_n).sum::<f64>();
    }
    Ok(acc / queries.len() as f64)
}

/// Bisect the temperature so that the mean top-`top_n` cumulative
/// probability hits `target` (± the achievable range of the index).
pub fn calibrate_beta(
    index: &CorpusIndex,
    queries: &[Vec<f64>],
    top_n: usize,
    target: f64,
) -> Result<f64> {
    if index.len() <= top_n {
        return Err(Error::Parameter(format!(
            "calibration needs more than {top_n} documents, index has {}",
            index.len()
        )));
    }
    if !(0.0..1.0).contains(&target) || target <= 0.0 {
        return Err(Error::Parameter(format!("target mass {target} outside (0,1)")));
    }
    // Smaller β sharpens the distribution, so mass(β) is decreasing in β.
    let (mut lo, mut hi) = (1e-4f64, 100.0f64);
    if mean_top_mass(index, queries, hi, top_n)? >= target {
        return Ok(hi);
    }
    if mean_top_mass(index, queries, lo, top_n)? <= target {
        return Ok(lo);
    }
    for _ in 0..80 {
        let mid = ((lo.ln() + hi.ln()) / 2.0).exp();
        if mean_top_mass(index, queries, mid, top_n)? >= target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(((lo.ln() + hi.ln()) / 2.0).exp())
}
