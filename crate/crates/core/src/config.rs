//! Run configuration read from `key = value` files.
//!
//! Keys are namespaced (`gen.*`, `model.*`, `pretrain.*`, `finetune.*`,
//! `split.*`, `eval.*`) plus a top-level `seed`. Blank lines and lines starting
//! with `#` are ignored. Unknown and repeated keys are errors.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::eval::DEFAULT_CUTOFFS;
use crate::model::CeresConfig;
use crate::session::SplitRatios;
use crate::synth::GenConfig;
use crate::train::{PretrainConfig, DEFAULT_EPS_NEG, DEFAULT_EPS_POS, DEFAULT_LR_GRID};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, found `{text}`")]
    Syntax { line: usize, text: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("line {line}: {source}")]
    AtLine {
        line: usize,
        #[source]
        source: Box<ConfigError>,
    },
    #[error("line {line}: duplicate key `{key}`")]
    DuplicateKey { line: usize, key: String },
    #[error("bad value for `{key}`: `{value}` ({reason})")]
    BadValue { key: String, value: String, reason: String },
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Finetuning settings shared by every task.
#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneSettings {
    pub epochs: usize,
    pub lr_grid: Vec<f64>,
    pub negatives: usize,
    pub eps_pos: f64,
    pub eps_neg: f64,
    pub batch_size: usize,
    pub warmup_frac: f64,
    pub use_cond: bool,
}

impl Default for FinetuneSettings {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr_grid: DEFAULT_LR_GRID.to_vec(),
            negatives: 5,
            eps_pos: DEFAULT_EPS_POS,
            eps_neg: DEFAULT_EPS_NEG,
            batch_size: 8,
            warmup_frac: crate::nn::DEFAULT_WARMUP_FRAC,
            use_cond: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// `None` until a seed is given or drawn.
    pub seed: Option<u64>,
    pub gen: GenConfig,
    /// `vocab_size` is ignored here; it always follows the vocabulary.
    pub model: CeresConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneSettings,
    pub split: SplitRatios,
    pub cutoffs: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            gen: GenConfig::default(),
            model: CeresConfig::default(),
            pretrain: PretrainConfig::default(),
            finetune: FinetuneSettings::default(),
            split: SplitRatios::default(),
            cutoffs: DEFAULT_CUTOFFS.to_vec(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        reason: e.to_string(),
    })
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, ConfigError>
where
    T::Err: Display,
{
    let items: Vec<T> = value
        .split(',')
        .map(|v| parse(key, v.trim()))
        .collect::<Result<_, _>>()?;
    if items.is_empty() {
        return Err(ConfigError::BadValue {
            key: key.into(),
            value: value.into(),
            reason: "empty list".into(),
        });
    }
    Ok(items)
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

/// Generates the scalar setter and getter from one key table.
macro_rules! scalar_keys {
    ($($name:literal => $a:ident . $b:ident),* $(,)?) => {
        /// Scalar keys in output order.
        pub const SCALAR_KEYS: &[&str] = &[$($name),*];

        impl RunConfig {
            fn set_scalar(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
                match key {
                    $($name => self.$a.$b = parse(key, value)?,)*
                    _ => return Err(ConfigError::UnknownKey(key.to_string())),
                }
                Ok(())
            }

            fn scalar_pairs(&self) -> Vec<(&'static str, String)> {
                vec![$(($name, self.$a.$b.to_string())),*]
            }
        }
    };
}

scalar_keys!(
    "gen.num_sessions" => gen.num_sessions,
    "gen.vocab_topics" => gen.vocab_topics,
    "gen.tokens_per_topic" => gen.tokens_per_topic,
    "gen.types_per_topic" => gen.types_per_topic,
    "gen.products_per_topic" => gen.products_per_topic,
    "gen.brands" => gen.brands,
    "gen.colors" => gen.colors,
    "gen.filler_tokens" => gen.filler_tokens,
    "gen.query_len_mean" => gen.query_len_mean,
    "gen.title_len_mean" => gen.title_len_mean,
    "gen.bullet_len_mean" => gen.bullet_len_mean,
    "gen.desk_factor" => gen.desk_factor,
    "gen.queries_per_session_mean" => gen.queries_per_session_mean,
    "gen.products_per_session_mean" => gen.products_per_session_mean,
    "gen.noise_rate" => gen.noise_rate,
    "gen.catalog_seed" => gen.catalog_seed,
    "model.d" => model.d,
    "model.item_layers" => model.item_layers,
    "model.heads" => model.heads,
    "model.gat_layers" => model.gat_layers,
    "model.cond_layers" => model.cond_layers,
    "model.k_latent" => model.k_latent,
    "model.max_token_pos" => model.max_token_pos,
    "model.max_item_pos" => model.max_item_pos,
    "model.use_gnn" => model.use_gnn,
    "model.use_cond" => model.use_cond,
    "pretrain.steps" => pretrain.steps,
    "pretrain.batch_size" => pretrain.batch_size,
    "pretrain.peak_lr" => pretrain.peak_lr,
    "pretrain.warmup_frac" => pretrain.warmup_frac,
    "pretrain.floor_lr" => pretrain.floor_lr,
    "finetune.epochs" => finetune.epochs,
    "finetune.negatives" => finetune.negatives,
    "finetune.eps_pos" => finetune.eps_pos,
    "finetune.eps_neg" => finetune.eps_neg,
    "finetune.batch_size" => finetune.batch_size,
    "finetune.warmup_frac" => finetune.warmup_frac,
    "finetune.use_cond" => finetune.use_cond,
    "split.train" => split.train,
    "split.val" => split.val,
    "split.test" => split.test,
);

impl RunConfig {
    /// Sets one key from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let value = value.trim();
        match key {
            "seed" => self.seed = Some(parse(key, value)?),
            "finetune.lr_grid" => self.finetune.lr_grid = parse_list(key, value)?,
            "eval.cutoffs" => self.cutoffs = parse_list(key, value)?,
            _ => self.set_scalar(key, value)?,
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let Some((key, value)) = trimmed.split_once('=') else {
                return Err(ConfigError::Syntax {
                    line,
                    text: trimmed.to_string(),
                });
            };
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(ConfigError::DuplicateKey {
                    line,
                    key: key.to_string(),
                });
            }
            self.set(key, value).map_err(|e| ConfigError::AtLine {
                line,
                source: Box::new(e),
            })?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    /// The fully resolved configuration, one pair per key. The seed is left
    /// out while unset.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        if let Some(seed) = self.seed {
            out.push(("seed".to_string(), seed.to_string()));
        }
        out.extend(self.scalar_pairs().into_iter().map(|(k, v)| (k.to_string(), v)));
        out.push(("finetune.lr_grid".into(), join(&self.finetune.lr_grid)));
        out.push(("eval.cutoffs".into(), join(&self.cutoffs)));
        out
    }

    pub fn to_text(&self) -> String {
        self.to_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// SHA-256 of [`RunConfig::to_text`], hex encoded.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_text().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Generator settings with the run seed applied.
    pub fn gen_config(&self) -> GenConfig {
        GenConfig {
            seed: self.seed.unwrap_or(0),
            ..self.gen.clone()
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            seed: self.seed.unwrap_or(0),
            ..self.pretrain.clone()
        }
    }

    pub fn finetune_config(&self, task: crate::eval::Task) -> crate::train::FinetuneConfig {
        let f = &self.finetune;
        crate::train::FinetuneConfig {
            task,
            epochs: f.epochs,
            lr_grid: f.lr_grid.clone(),
            negatives: f.negatives,
            eps_pos: f.eps_pos,
            eps_neg: f.eps_neg,
            batch_size: f.batch_size,
            warmup_frac: f.warmup_frac,
            use_cond: f.use_cond,
            seed: self.seed.unwrap_or(0),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_is_defaults() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
        assert_eq!(RunConfig::parse("# nothing\n\n  \n").unwrap(), RunConfig::default());
    }

    #[test]
    fn overrides_show_in_resolved_text() {
        let cfg = RunConfig::parse("pretrain.peak_lr = 0.002\nseed=7\nfinetune.lr_grid = 1e-3, 5e-4").unwrap();
        assert_eq!(cfg.pretrain.peak_lr, 0.002);
        assert_eq!(cfg.seed, Some(7));
        assert_eq!(cfg.finetune.lr_grid, vec![1e-3, 5e-4]);
        let text = cfg.to_text();
        assert!(text.contains("pretrain.peak_lr = 0.002\n"), "{text}");
        assert!(text.starts_with("seed = 7\n"));
        assert_ne!(cfg.hash(), RunConfig::default().hash());
    }

    #[test]
    fn resolved_text_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.seed = Some(3);
        cfg.model.use_gnn = false;
        cfg.gen.noise_rate = 0.3;
        let back = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn errors_name_the_key() {
        let dup = RunConfig::parse("model.d = 8\nmodel.d = 16").unwrap_err();
        assert!(matches!(&dup, ConfigError::DuplicateKey { line: 2, key } if key == "model.d"), "{dup}");
        let unknown = RunConfig::parse("model.depth = 3").unwrap_err();
        assert!(unknown.to_string().contains("`model.depth`"), "{unknown}");
        let bad = RunConfig::parse("pretrain.steps = many").unwrap_err();
        assert!(bad.to_string().contains("pretrain.steps"), "{bad}");
        assert!(matches!(RunConfig::parse("just words"), Err(ConfigError::Syntax { line: 1, .. })));
    }

    #[test]
    fn every_scalar_key_is_settable() {
        let mut cfg = RunConfig::default();
        for (k, v) in RunConfig::default().to_pairs() {
            cfg.set(&k, &v).unwrap();
        }
        assert_eq!(cfg.to_pairs().len(), SCALAR_KEYS.len() + 2);
    }
}
