//! Decoder-only transformer: configuration, parameters, and the
//! differentiable (training) forward pass.
//!
//! Pre-norm blocks with per-head projection matrices, learned absolute
//! positions, SiLU feed-forward, and an unembedding tied to the token
//! embedding plus a separate output bias.  The incremental no-grad path
//! lives in [`crate::infer`]; both paths are built on the same kernels and
//! agree bit for bit on identical inputs.

use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::params::{GraphCtx, ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::vocab::TokenId;

/// Transformer dimensions and the latent slot widths.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub max_ctx: usize,
    pub vocab_size: usize,
    pub dropout: f64,
}

impl ModelConfig {
    pub fn from_run(cfg: &RunConfig, vocab_size: usize) -> Result<ModelConfig> {
        let mc = ModelConfig {
            d_model: cfg.get_usize("model.d_model")?,
            layers: cfg.get_usize("model.layers")?,
            heads: cfg.get_usize("model.heads")?,
            d_ff: cfg.get_usize("model.d_ff")?,
            max_ctx: cfg.get_usize("model.max_ctx")?,
            vocab_size,
            dropout: cfg.get_f64("model.dropout")?,
        };
        mc.validate()?;
        Ok(mc)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.layers == 0 || self.heads == 0 || self.d_ff == 0 {
            return Err(Error::Parameter("model dimensions must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Parameter(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Parameter(format!("dropout {} outside [0,1)", self.dropout)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

/// Parameter ids for one transformer layer.
#[derive(Debug, Clone)]
pub struct LayerParams {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    /// Per-head query/key/value projections, `[d_model, head_dim]` each.
    pub wq: Vec<ParamId>,
    pub wk: Vec<ParamId>,
    pub wv: Vec<ParamId>,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

/// The language model: config plus parameter ids into a shared store.
#[derive(Debug, Clone)]
pub struct LlmModel {
    pub cfg: ModelConfig,
    /// `[vocab, d_model]`; also the unembedding (tied).
    pub tok_embed: ParamId,
    /// `[max_ctx, d_model]` learned absolute positions.
    pub pos_embed: ParamId,
    /// `[1, vocab]` bias added to tied-unembedding logits.
    pub out_bias: ParamId,
    pub layers: Vec<LayerParams>,
    pub final_ln_g: ParamId,
    pub final_ln_b: ParamId,
}

impl LlmModel {
    /// Register all parameters under `prefix` with seeded Gaussian init.
    pub fn new(
        cfg: ModelConfig,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Result<LlmModel> {
        cfg.validate()?;
        let d = cfg.d_model;
        let dh = cfg.head_dim();
        let w_std = 1.0 / (d as f64).sqrt();
        let ff_std = 1.0 / (cfg.d_ff as f64).sqrt();
        let tok_embed = store.register_gaussian("llm.tok_embed", cfg.vocab_size, d, 0.02, rng, true)?;
        let pos_embed = store.register_gaussian("llm.pos_embed", cfg.max_ctx, d, 0.02, rng, true)?;
        let out_bias = store.register_zeros("llm.out_bias", 1, cfg.vocab_size, true)?;
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let p = |s: &str| format!("llm.l{l}.{s}");
            let mut wq = Vec::new();
            let mut wk = Vec::new();
            let mut wv = Vec::new();
            for h in 0..cfg.heads {
                wq.push(store.register_gaussian(&p(&format!("h{h}.wq")), d, dh, w_std, rng, true)?);
                wk.push(store.register_gaussian(&p(&format!("h{h}.wk")), d, dh, w_std, rng, true)?);
                wv.push(store.register_gaussian(&p(&format!("h{h}.wv")), d, dh, w_std, rng, true)?);
            }
            layers.push(LayerParams {
                ln1_g: store.register_ones(&p("ln1.g"), 1, d, true)?,
                ln1_b: store.register_zeros(&p("ln1.b"), 1, d, true)?,
                wq,
                wk,
                wv,
                wo: store.register_gaussian(&p("wo"), d, d, w_std, rng, true)?,
                bo: store.register_zeros(&p("bo"), 1, d, true)?,
                ln2_g: store.register_ones(&p("ln2.g"), 1, d, true)?,
                ln2_b: store.register_zeros(&p("ln2.b"), 1, d, true)?,
                w1: store.register_gaussian(&p("w1"), d, cfg.d_ff, w_std, rng, true)?,
                b1: store.register_zeros(&p("b1"), 1, cfg.d_ff, true)?,
                w2: store.register_gaussian(&p("w2"), cfg.d_ff, d, ff_std, rng, true)?,
                b2: store.register_zeros(&p("b2"), 1, d, true)?,
            });
        }
        let final_ln_g = store.register_ones("llm.lnf.g", 1, d, true)?;
        let final_ln_b = store.register_zeros("llm.lnf.b", 1, d, true)?;
        Ok(LlmModel { cfg, tok_embed, pos_embed, out_bias, layers, final_ln_g, final_ln_b })
    }

    /// Embed token ids into input rows (no positions yet).
    pub fn embed(&self, ctx: &GraphCtx, store: &ParamStore, ids: &[TokenId]) -> Result<Tensor> {
        for &id in ids {
            if id >= self.cfg.vocab_size {
                return Err(Error::Index(format!(
                    "token id {id} out of vocabulary {}",
                    self.cfg.vocab_size
                )));
            }
        }
        ctx.param(store, self.tok_embed)?.gather(ids)
    }

    /// Run the causal transformer body over input rows starting at absolute
    /// position `start_pos`; returns post-final-layer-norm hidden rows.
    pub fn forward_rows(
        &self,
        ctx: &GraphCtx,
        store: &ParamStore,
        rows: &Tensor,
        start_pos: usize,
    ) -> Result<Tensor> {
        let t = rows.rows();
        let d = self.cfg.d_model;
        if rows.cols() != d {
            return Err(Error::Shape(format!(
                "input rows have width {}, model width is {d}",
                rows.cols()
            )));
        }
        if start_pos + t > self.cfg.max_ctx {
            return Err(Error::Capacity(format!(
                "sequence [{start_pos}, {}) exceeds context window {}",
                start_pos + t,
                self.cfg.max_ctx
            )));
        }
        let positions: Vec<usize> = (start_pos..start_pos + t).collect();
        let pos = ctx.param(store, self.pos_embed)?.gather(&positions)?;
        let mut x = rows.add(&pos)?;

        // Causal mask: -inf strictly above the diagonal.
        let mut mask_data = vec![0.0; t * t];
        for i in 0..t {
            for j in (i + 1)..t {
                mask_data[i * t + j] = f64::NEG_INFINITY;
            }
        }
        let mask = ctx.tape.leaf(t, t, mask_data, false)?;
        let scale = 1.0 / (self.cfg.head_dim() as f64).sqrt();

        for layer in &self.layers {
            let xn = x.layer_norm(&ctx.param(store, layer.ln1_g)?, &ctx.param(store, layer.ln1_b)?)?;
            let mut heads = Vec::with_capacity(self.cfg.heads);
            for h in 0..self.cfg.heads {
                let q = xn.matmul(&ctx.param(store, layer.wq[h])?)?;
                let k = xn.matmul(&ctx.param(store, layer.wk[h])?)?;
                let v = xn.matmul(&ctx.param(store, layer.wv[h])?)?;
                let scores = q.matmul_nt(&k)?.scale(scale)?.add(&mask)?;
                let attn = scores.softmax(1.0)?;
                heads.push(attn.matmul(&v)?);
            }
            let concat = ctx.tape.concat_cols(&heads)?;
            let o = concat
                .matmul(&ctx.param(store, layer.wo)?)?
                .add_row(&ctx.param(store, layer.bo)?)?;
            let o = ctx.maybe_dropout(o)?;
            x = x.add(&o)?;

            let xn2 = x.layer_norm(&ctx.param(store, layer.ln2_g)?, &ctx.param(store, layer.ln2_b)?)?;
            let f = xn2
                .matmul(&ctx.param(store, layer.w1)?)?
                .add_row(&ctx.param(store, layer.b1)?)?
                .silu()?
                .matmul(&ctx.param(store, layer.w2)?)?
                .add_row(&ctx.param(store, layer.b2)?)?;
            let f = ctx.maybe_dropout(f)?;
            x = x.add(&f)?;
        }
        x.layer_norm(&ctx.param(store, self.final_ln_g)?, &ctx.param(store, self.final_ln_b)?)
    }

    /// Full training forward from token ids.
    pub fn forward_tokens(
        &self,
        ctx: &GraphCtx,
        store: &ParamStore,
        ids: &[TokenId],
    ) -> Result<Tensor> {
        let rows = self.embed(ctx, store, ids)?;
        self.forward_rows(ctx, store, &rows, 0)
    }

    /// Tied-unembedding logits for the given hidden rows.
    pub fn logits(&self, ctx: &GraphCtx, store: &ParamStore, hidden: &Tensor) -> Result<Tensor> {
        hidden
            .matmul_nt(&ctx.param(store, self.tok_embed)?)?
            .add_row(&ctx.param(store, self.out_bias)?)
    }
}
