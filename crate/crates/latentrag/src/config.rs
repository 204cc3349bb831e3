//! Run configuration: a flat key-value text file plus command-line overrides.
//!
//! Every key has a documented default; a config file overlays the defaults
//! and `--set key=value` flags overlay the file.  The canonical rendering
//! (sorted keys, normalized spacing) is hashed, and that hash is embedded in
//! every artifact a run produces, so outputs can always be traced back to
//! the exact configuration that made them.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::checkpoint::hex;
use crate::error::{Error, Result};

/// `(key, default, help)` for every recognized key.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("seed", "42", "master seed for data generation, init, and training"),
    ("model.d_model", "64", "transformer width"),
    ("model.layers", "2", "transformer layers"),
    ("model.heads", "4", "attention heads"),
    ("model.d_ff", "256", "feed-forward width"),
    ("model.max_ctx", "640", "context window in tokens"),
    ("model.dropout", "0.1", "dropout rate during training"),
    ("latent.m", "4", "thought slots per block"),
    ("latent.n", "16", "subquery slots per block"),
    ("retrieval.d_ret", "32", "retrieval encoder width / embedding dim"),
    ("retrieval.enc_layers", "2", "retrieval encoder layers"),
    ("retrieval.enc_heads", "2", "retrieval encoder heads"),
    ("retrieval.enc_ff", "64", "retrieval encoder feed-forward width"),
    ("retrieval.enc_ctx", "64", "retrieval encoder position table length"),
    ("retrieval.beta", "0.03", "similarity softmax temperature"),
    ("retrieval.top_k", "3", "documents retrieved per subquery"),
    ("retrieval.pseudo_top", "16", "pseudo-relevant documents per subquery for the KL candidate pool"),
    ("loop.max_iterations", "4", "maximum agent steps, final answer step included"),
    ("loop.max_answer_tokens", "8", "autoregressive answer budget"),
    ("decode.max_len", "24", "latent decoding length cap"),
    ("train.arm", "kl", "training arm: kl | cosine | infonce | no-retriever | no-decoding"),
    ("train.epochs", "5", "training epochs"),
    ("train.lr", "0.001", "learning rate"),
    ("train.batch_size", "16", "examples per optimizer step"),
    ("train.bins", "8", "length bins for batching"),
    ("train.weight_decay", "0.01", "decoupled weight decay"),
    ("train.lambda_ret", "1.0", "retrieval loss weight"),
    ("train.max_seq", "3000", "training sequence token cap"),
    ("train.log_every", "10", "loss log interval in steps"),
    ("pretrain.epochs", "30", "retrieval encoder pretraining epochs"),
    ("pretrain.lr", "0.003", "retrieval encoder pretraining learning rate"),
    ("pretrain.batch", "32", "retrieval encoder pretraining batch size"),
    ("data.persons_train", "300", "train-pool persons"),
    ("data.persons_test", "70", "test-pool persons"),
    ("data.fathers_train", "150", "train-pool father entities"),
    ("data.fathers_test", "40", "test-pool father entities"),
    ("data.cities_train", "40", "train-pool cities"),
    ("data.cities_test", "15", "test-pool cities"),
    ("data.countries_train", "12", "train-pool countries"),
    ("data.countries_test", "6", "test-pool countries"),
    ("eval.decode", "false", "decode latent blocks to text during evaluation"),
    ("eval.max_questions", "0", "cap on evaluated questions (0 = all)"),
    ("sweep.m_values", "2,4,8", "thought-slot counts for the token sweep"),
    ("sweep.n_values", "4,16,32", "subquery-slot counts for the token sweep"),
    ("sweep.train_questions", "200", "training questions per sweep cell"),
    ("sweep.epochs", "2", "epochs per sweep cell"),
];

/// A fully resolved configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let values = KEYS.iter().map(|(k, d, _)| (k.to_string(), d.to_string())).collect();
        RunConfig { values }
    }
}

impl RunConfig {
    /// Parse a config file's text over the defaults.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Usage(format!("config line {}: expected 'key = value'", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        RunConfig::parse(&text)
    }

    /// Set one key, rejecting unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !self.values.contains_key(key) {
            return Err(Error::Usage(format!("unknown config key '{key}'")));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Apply one `key=value` override flag.
    pub fn apply_override(&mut self, flag: &str) -> Result<()> {
        let (key, value) = flag
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("override '{flag}' is not key=value")))?;
        self.set(key.trim(), value.trim())
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.values
            .get(key)
            .map(|s| s.as_str())
            .ok_or_else(|| Error::Usage(format!("unknown config key '{key}'")))
    }

    pub fn get_usize(&self, key: &str) -> Result<usize> {
        let v = self.get(key)?;
        v.parse()
            .map_err(|_| Error::Usage(format!("config key '{key}': '{v}' is not an integer")))
    }

    pub fn get_u64(&self, key: &str) -> Result<u64> {
        let v = self.get(key)?;
        v.parse()
            .map_err(|_| Error::Usage(format!("config key '{key}': '{v}' is not an integer")))
    }

    pub fn get_f64(&self, key: &str) -> Result<f64> {
        let v = self.get(key)?;
        v.parse()
            .map_err(|_| Error::Usage(format!("config key '{key}': '{v}' is not a number")))
    }

    pub fn get_bool(&self, key: &str) -> Result<bool> {
        match self.get(key)? {
            "true" | "1" | "yes" | "on" => Ok(true),
            "false" | "0" | "no" | "off" => Ok(false),
            v => Err(Error::Usage(format!("config key '{key}': '{v}' is not a boolean"))),
        }
    }

    /// Comma-separated positive integers.
    pub fn get_usize_list(&self, key: &str) -> Result<Vec<usize>> {
        let v = self.get(key)?;
        v.split(',')
            .map(|piece| {
                piece.trim().parse().map_err(|_| {
                    Error::Usage(format!("config key '{key}': '{piece}' is not an integer"))
                })
            })
            .collect()
    }

    /// Parse every typed key once, surfacing bad values early.
    pub fn validate(&self) -> Result<()> {
        for key in [
            "seed",
            "model.d_model",
            "model.layers",
            "model.heads",
            "model.d_ff",
            "model.max_ctx",
            "latent.m",
            "latent.n",
            "retrieval.d_ret",
            "retrieval.enc_layers",
            "retrieval.enc_heads",
            "retrieval.enc_ff",
            "retrieval.enc_ctx",
            "retrieval.top_k",
            "retrieval.pseudo_top",
            "loop.max_iterations",
            "loop.max_answer_tokens",
            "decode.max_len",
            "train.epochs",
            "train.batch_size",
            "train.bins",
            "train.max_seq",
            "train.log_every",
            "pretrain.epochs",
            "pretrain.batch",
            "data.persons_train",
            "data.persons_test",
            "data.fathers_train",
            "data.fathers_test",
            "data.cities_train",
            "data.cities_test",
            "data.countries_train",
            "data.countries_test",
            "eval.max_questions",
        ] {
            self.get_usize(key)?;
        }
        for key in [
            "model.dropout",
            "retrieval.beta",
            "train.lr",
            "train.weight_decay",
            "train.lambda_ret",
            "pretrain.lr",
        ] {
            self.get_f64(key)?;
        }
        self.get_bool("eval.decode")?;
        self.get_usize_list("sweep.m_values")?;
        self.get_usize_list("sweep.n_values")?;
        let arm = self.get("train.arm")?;
        if !["kl", "cosine", "infonce", "no-retriever", "no-decoding"].contains(&arm) {
            return Err(Error::Usage(format!("unknown training arm '{arm}'")));
        }
        if self.get_f64("retrieval.beta")? <= 0.0 {
            return Err(Error::Usage("retrieval.beta must be positive".into()));
        }
        Ok(())
    }

    /// Canonical rendering: sorted keys, one `key = value` per line.
    pub fn canonical(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    /// Digest of the canonical rendering; stamped into every output file.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        hex(&digest)[..16].to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_documented_values() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.get_usize("latent.m").unwrap(), 4);
        assert_eq!(cfg.get_usize("latent.n").unwrap(), 16);
        assert!((cfg.get_f64("retrieval.beta").unwrap() - 0.03).abs() < 1e-12);
        assert_eq!(cfg.get_usize("retrieval.top_k").unwrap(), 3);
        assert!((cfg.get_f64("train.lambda_ret").unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cfg.get_usize("loop.max_iterations").unwrap(), 4);
        assert_eq!(cfg.get_usize("retrieval.pseudo_top").unwrap(), 16);
        cfg.validate().unwrap();
    }

    #[test]
    fn parse_overlays_defaults_and_ignores_comments() {
        let cfg = RunConfig::parse("# a comment\n\nlatent.m = 2\ntrain.epochs=3\n").unwrap();
        assert_eq!(cfg.get_usize("latent.m").unwrap(), 2);
        assert_eq!(cfg.get_usize("train.epochs").unwrap(), 3);
        assert_eq!(cfg.get_usize("latent.n").unwrap(), 16);
    }

    #[test]
    fn unknown_key_is_usage_error() {
        assert!(matches!(RunConfig::parse("nope = 1"), Err(Error::Usage(_))));
        let mut cfg = RunConfig::default();
        assert!(matches!(cfg.apply_override("bad.key=3"), Err(Error::Usage(_))));
        assert!(matches!(cfg.apply_override("no-equals"), Err(Error::Usage(_))));
    }

    #[test]
    fn hash_tracks_content_not_formatting() {
        let a = RunConfig::parse("latent.m = 2").unwrap();
        let b = RunConfig::parse("  latent.m   =    2  ").unwrap();
        let c = RunConfig::parse("latent.m = 3").unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 16);
    }

    #[test]
    fn override_flag_wins_over_file() {
        let mut cfg = RunConfig::parse("train.epochs = 3").unwrap();
        cfg.apply_override("train.epochs=7").unwrap();
        assert_eq!(cfg.get_usize("train.epochs").unwrap(), 7);
    }

    #[test]
    fn bad_values_surface_in_validate() {
        let mut cfg = RunConfig::default();
        cfg.set("train.arm", "bogus").unwrap();
        assert!(matches!(cfg.validate(), Err(Error::Usage(_))));
        let mut cfg = RunConfig::default();
        cfg.set("model.layers", "two").unwrap();
        assert!(cfg.validate().is_err());
    }
}
