//! Model and training configuration, and the plain-text key-value format
//! they are read from.
//!
//! ```text
//! # comment
//! hidden_dim = 64
//! heads 4
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub heads: usize,
    pub encoder_depth: usize,
    pub n_blocks: usize,
    pub patch_dim: usize,
    pub n_genes: usize,
    pub n_bins: usize,
    pub vocab_size: usize,
    pub max_text_len: usize,
    pub region_a: usize,
    pub region_b: usize,
    pub type_embeddings: bool,
    /// Residual branches (attention output, feed-forward output) start at zero.
    pub zero_init_residual: bool,
    pub n_classes: usize,
    pub n_time_bins: usize,
    pub decoder_depth: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden_dim: 512,
            heads: 8,
            encoder_depth: 2,
            n_blocks: 4,
            patch_dim: 1024,
            n_genes: 64,
            n_bins: 7,
            vocab_size: 64,
            max_text_len: 512,
            region_a: 2,
            region_b: 2,
            type_embeddings: true,
            zero_init_residual: true,
            n_classes: 4,
            n_time_bins: 4,
            decoder_depth: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("hidden_dim", self.hidden_dim),
            ("heads", self.heads),
            ("n_blocks", self.n_blocks),
            ("patch_dim", self.patch_dim),
            ("n_genes", self.n_genes),
            ("vocab_size", self.vocab_size),
            ("max_text_len", self.max_text_len),
            ("region_a", self.region_a),
            ("region_b", self.region_b),
            ("n_time_bins", self.n_time_bins),
            ("decoder_depth", self.decoder_depth),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{k} must be positive")));
            }
        }
        if self.hidden_dim % self.heads != 0 {
            return Err(Error::config(format!("hidden_dim {} not divisible by {} heads", self.hidden_dim, self.heads)));
        }
        if self.n_bins < 2 {
            return Err(Error::config("n_bins must be at least 2"));
        }
        if self.n_classes < 2 {
            return Err(Error::config("n_classes must be at least 2"));
        }
        if self.vocab_size <= crate::encoders::text::N_SPECIAL {
            return Err(Error::config("vocab_size must exceed the special tokens"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub mask_ratio: f64,
    pub tau_init: f64,
    pub margin: f64,
    pub alpha: f64,
    pub beta: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub mlm_switch_period: usize,
    pub max_grad_norm: Option<f64>,
    pub max_triplets: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mask_ratio: 0.15,
            tau_init: 0.07,
            margin: 1.0,
            alpha: 1.0,
            beta: 1.0,
            lr: 1e-3,
            batch_size: 16,
            epochs: 20,
            seed: 0,
            mlm_switch_period: 10,
            max_grad_norm: None,
            max_triplets: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::config("mask_ratio must lie in (0, 1)"));
        }
        if !(self.tau_init > 0.0) {
            return Err(Error::config("tau_init must be positive"));
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.margin >= 0.0) {
            return Err(Error::config("alpha, beta and margin must be nonnegative"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config("lr must be positive"));
        }
        if self.batch_size == 0 || self.mlm_switch_period == 0 || self.max_triplets == 0 {
            return Err(Error::config("batch_size, mlm_switch_period and max_triplets must be positive"));
        }
        if self.max_grad_norm.is_some_and(|n| !(n > 0.0)) {
            return Err(Error::config("max_grad_norm must be positive"));
        }
        Ok(())
    }
}

/// Parsed `key value` pairs in file order of last assignment.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = match line.split_once('=') {
            Some((k, v)) => (k.trim(), v.trim()),
            None => line.split_once(char::is_whitespace).map(|(k, v)| (k, v.trim())).unwrap_or((line, "")),
        };
        if k.is_empty() || v.is_empty() {
            return Err(Error::config(format!("line {}: expected `key = value`", no + 1)));
        }
        out.insert(k.to_string(), v.to_string());
    }
    Ok(out)
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::config(format!("bad value {v:?} for {key}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::config(format!("bad boolean {v:?} for {key}"))),
    }
}

/// Keys that shape the architecture (stored with checkpoints).
pub const MODEL_KEYS: [&str; 16] = [
    "hidden_dim",
    "heads",
    "encoder_depth",
    "n_blocks",
    "patch_dim",
    "n_genes",
    "n_bins",
    "vocab_size",
    "max_text_len",
    "region_a",
    "region_b",
    "type_embeddings",
    "zero_init_residual",
    "n_classes",
    "n_time_bins",
    "decoder_depth",
];

/// Full run configuration with a closed set of keys.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Config {
    /// Keys owned by the cohort (set from data, not from files).
    pub const DATA_KEYS: [&'static str; 4] = ["patch_dim", "n_genes", "vocab_size", "max_text_len"];

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "hidden_dim" => m.hidden_dim = parse(key, v)?,
            "heads" => m.heads = parse(key, v)?,
            "encoder_depth" => m.encoder_depth = parse(key, v)?,
            "n_blocks" => m.n_blocks = parse(key, v)?,
            "patch_dim" => m.patch_dim = parse(key, v)?,
            "n_genes" => m.n_genes = parse(key, v)?,
            "n_bins" => m.n_bins = parse(key, v)?,
            "vocab_size" => m.vocab_size = parse(key, v)?,
            "max_text_len" => m.max_text_len = parse(key, v)?,
            "region_a" => m.region_a = parse(key, v)?,
            "region_b" => m.region_b = parse(key, v)?,
            "type_embeddings" => m.type_embeddings = parse_bool(key, v)?,
            "zero_init_residual" => m.zero_init_residual = parse_bool(key, v)?,
            "n_classes" => m.n_classes = parse(key, v)?,
            "n_time_bins" => m.n_time_bins = parse(key, v)?,
            "decoder_depth" => m.decoder_depth = parse(key, v)?,
            "mask_ratio" => t.mask_ratio = parse(key, v)?,
            "tau_init" => t.tau_init = parse(key, v)?,
            "margin" => t.margin = parse(key, v)?,
            "alpha" => t.alpha = parse(key, v)?,
            "beta" => t.beta = parse(key, v)?,
            "lr" => t.lr = parse(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "epochs" => t.epochs = parse(key, v)?,
            "seed" => t.seed = parse(key, v)?,
            "mlm_switch_period" => t.mlm_switch_period = parse(key, v)?,
            "max_grad_norm" => {
                t.max_grad_norm = if v == "none" { None } else { Some(parse(key, v)?) };
            }
            "max_triplets" => t.max_triplets = parse(key, v)?,
            _ => return Err(Error::config(format!("unknown configuration key {key:?}"))),
        }
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (k, v) in parse_kv(text)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    /// Every key with its current value; `apply_text(to_text())` is the identity.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let mut s = String::new();
        let rows: Vec<(&str, String)> = vec![
            ("hidden_dim", m.hidden_dim.to_string()),
            ("heads", m.heads.to_string()),
            ("encoder_depth", m.encoder_depth.to_string()),
            ("n_blocks", m.n_blocks.to_string()),
            ("patch_dim", m.patch_dim.to_string()),
            ("n_genes", m.n_genes.to_string()),
            ("n_bins", m.n_bins.to_string()),
            ("vocab_size", m.vocab_size.to_string()),
            ("max_text_len", m.max_text_len.to_string()),
            ("region_a", m.region_a.to_string()),
            ("region_b", m.region_b.to_string()),
            ("type_embeddings", m.type_embeddings.to_string()),
            ("zero_init_residual", m.zero_init_residual.to_string()),
            ("n_classes", m.n_classes.to_string()),
            ("n_time_bins", m.n_time_bins.to_string()),
            ("decoder_depth", m.decoder_depth.to_string()),
            ("mask_ratio", format!("{:?}", t.mask_ratio)),
            ("tau_init", format!("{:?}", t.tau_init)),
            ("margin", format!("{:?}", t.margin)),
            ("alpha", format!("{:?}", t.alpha)),
            ("beta", format!("{:?}", t.beta)),
            ("lr", format!("{:?}", t.lr)),
            ("batch_size", t.batch_size.to_string()),
            ("epochs", t.epochs.to_string()),
            ("seed", t.seed.to_string()),
            ("mlm_switch_period", t.mlm_switch_period.to_string()),
            ("max_grad_norm", t.max_grad_norm.map_or("none".into(), |v| format!("{v:?}"))),
            ("max_triplets", t.max_triplets.to_string()),
        ];
        for (k, v) in rows {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}
