//! Resolved run configuration: config file, then `--set` overrides, then
//! dedicated flags; cohort-owned keys are filled from the data.

use std::path::{Path, PathBuf};

use alter_core::config::{parse_kv, Config};
use alter_core::data::Cohort;
use alter_core::{Error, Result};

/// Output root for relative `--out` paths.
pub const OUT_ROOT_ENV: &str = "ALTER_OUT_ROOT";
pub const DEFAULT_SPLIT_RATIOS: [f64; 3] = [0.7, 0.15, 0.15];

/// Run-level keys that are not model or training hyperparameters.
const SPLIT_SEED: &str = "split_seed";
const SPLIT_RATIOS: &str = "split_ratios";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub config: Config,
    pub split_seed: u64,
    pub split_ratios: [f64; 3],
    pub out_dir: PathBuf,
    /// Keys assigned explicitly by the file or flags.
    explicit: Vec<String>,
}

pub fn parse_ratios(v: &str) -> Result<[f64; 3]> {
    let parts: Vec<f64> = v
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("bad split ratios {v:?} (expected three comma-separated numbers)")))?;
    <[f64; 3]>::try_from(parts).map_err(|_| Error::Config(format!("split ratios {v:?} need exactly three values")))
}

pub fn format_ratios(r: [f64; 3]) -> String {
    format!("{:?},{:?},{:?}", r[0], r[1], r[2])
}

/// `out` under the output root when the root is set and `out` is relative.
pub fn resolve_out_dir(out: &Path) -> PathBuf {
    match std::env::var_os(OUT_ROOT_ENV) {
        Some(root) if out.is_relative() => PathBuf::from(root).join(out),
        _ => out.to_path_buf(),
    }
}

impl RunConfig {
    pub fn new(out: &Path) -> Self {
        RunConfig {
            config: Config::default(),
            split_seed: 0,
            split_ratios: DEFAULT_SPLIT_RATIOS,
            out_dir: resolve_out_dir(out),
            explicit: Vec::new(),
        }
    }

    /// Rejects unknown keys and malformed values.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            SPLIT_SEED => {
                self.split_seed = v.parse().map_err(|_| Error::Config(format!("bad value {v:?} for {key}")))?;
            }
            SPLIT_RATIOS => self.split_ratios = parse_ratios(v)?,
            _ => self.config.set(key, v)?,
        }
        if !self.explicit.iter().any(|k| k == key) {
            self.explicit.push(key.to_string());
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        for (k, v) in parse_kv(&text)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    /// Parses one `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {kv:?} is not of the form key=value")))?;
        self.set(k.trim(), v.trim())
    }

    /// Fills cohort-owned keys; an explicit value that disagrees with the
    /// cohort is an error rather than silently replaced.
    pub fn fit_cohort(&mut self, cohort: &Cohort) -> Result<()> {
        let s = &cohort.spec;
        let owned = [
            ("patch_dim", s.patch_dim),
            ("n_genes", s.n_genes),
            ("vocab_size", s.vocab_size),
            ("max_text_len", s.text_len),
            ("n_classes", s.classes),
        ];
        let current = parse_kv(&self.config.to_text())?;
        for (key, value) in owned {
            let have: usize = current[key].parse().expect("own output parses");
            if self.explicit.iter().any(|k| k == key) && have != value {
                return Err(Error::Config(format!("{key} = {have} disagrees with the cohort ({value})")));
            }
            self.config.set(key, &value.to_string())?;
        }
        self.config.validate()
    }

    pub fn to_text(&self) -> String {
        format!(
            "{}{SPLIT_SEED} = {}\n{SPLIT_RATIOS} = {}\n",
            self.config.to_text(),
            self.split_seed,
            format_ratios(self.split_ratios)
        )
    }
}
