use std::fmt::Display;
use std::str::FromStr;

use super::ModelError;

/// Architecture hyper-parameters. `vocab_size` must match the vocabulary the
/// model is used with.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CeresConfig {
    pub d: usize,
    pub item_layers: usize,
    pub heads: usize,
    pub gat_layers: usize,
    pub cond_layers: usize,
    /// Latent conditioning tokens per item.
    pub k_latent: usize,
    /// Longest token sequence per attribute or query; longer ones are cut.
    pub max_token_pos: usize,
    /// Number of item positions per session; later items share the last.
    pub max_item_pos: usize,
    pub vocab_size: usize,
    pub use_gnn: bool,
    pub use_cond: bool,
}

impl Default for CeresConfig {
    fn default() -> Self {
        Self {
            d: 64,
            item_layers: 2,
            heads: 4,
            gat_layers: 2,
            cond_layers: 3,
            k_latent: 4,
            max_token_pos: 128,
            max_item_pos: 32,
            vocab_size: 0,
            use_gnn: true,
            use_cond: true,
        }
    }
}

pub(crate) const CONFIG_KEYS: [&str; 11] = [
    "d",
    "item_layers",
    "heads",
    "gat_layers",
    "cond_layers",
    "k_latent",
    "max_token_pos",
    "max_item_pos",
    "vocab_size",
    "use_gnn",
    "use_cond",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ModelError>
where
    T::Err: Display,
{
    value.parse().map_err(|e: T::Err| ModelError::Config(format!("{key} = `{value}`: {e}")))
}

impl CeresConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return bad(format!("heads ({}) must divide d ({})", self.heads, self.d));
        }
        if self.k_latent == 0 {
            return bad("k_latent must be at least 1".into());
        }
        if self.item_layers == 0 {
            return bad("item_layers must be at least 1".into());
        }
        if self.use_gnn && self.gat_layers == 0 {
            return bad("gat_layers must be at least 1 when use_gnn is set".into());
        }
        if self.use_cond && self.cond_layers == 0 {
            return bad("cond_layers must be at least 1 when use_cond is set".into());
        }
        if self.max_token_pos < 2 {
            return bad("max_token_pos must be at least 2".into());
        }
        if self.max_item_pos == 0 {
            return bad("max_item_pos must be at least 1".into());
        }
        if self.vocab_size == 0 {
            return bad("vocab_size must be positive".into());
        }
        Ok(())
    }

    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ModelError> {
        match key {
            "d" => self.d = parse(key, value)?,
            "item_layers" => self.item_layers = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "gat_layers" => self.gat_layers = parse(key, value)?,
            "cond_layers" => self.cond_layers = parse(key, value)?,
            "k_latent" => self.k_latent = parse(key, value)?,
            "max_token_pos" => self.max_token_pos = parse(key, value)?,
            "max_item_pos" => self.max_item_pos = parse(key, value)?,
            "vocab_size" => self.vocab_size = parse(key, value)?,
            "use_gnn" => self.use_gnn = parse(key, value)?,
            "use_cond" => self.use_cond = parse(key, value)?,
            other => return Err(ModelError::Config(format!("unknown model key `{other}`"))),
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let vals = [
            self.d.to_string(),
            self.item_layers.to_string(),
            self.heads.to_string(),
            self.gat_layers.to_string(),
            self.cond_layers.to_string(),
            self.k_latent.to_string(),
            self.max_token_pos.to_string(),
            self.max_item_pos.to_string(),
            self.vocab_size.to_string(),
            self.use_gnn.to_string(),
            self.use_cond.to_string(),
        ];
        CONFIG_KEYS
            .iter()
            .zip(vals)
            .map(|(k, v)| (k.to_string(), v))
            .collect()
    }

    /// Reads the model keys out of a checkpoint config block; other keys are
    /// ignored, missing ones are an error.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self, ModelError> {
        let mut cfg = Self::default();
        for key in CONFIG_KEYS {
            let (_, v) = pairs
                .iter()
                .find(|(k, _)| k == key)
                .ok_or_else(|| ModelError::Config(format!("missing model key `{key}`")))?;
            cfg.set(key, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairs_round_trip() {
        let cfg = CeresConfig {
            vocab_size: 99,
            use_gnn: false,
            ..CeresConfig::default()
        };
        assert_eq!(CeresConfig::from_pairs(&cfg.to_pairs()).unwrap(), cfg);
    }

    #[test]
    fn validation() {
        let ok = CeresConfig {
            vocab_size: 10,
            ..CeresConfig::default()
        };
        ok.validate().unwrap();
        for bad in [
            CeresConfig { heads: 3, ..ok.clone() },
            CeresConfig { k_latent: 0, ..ok.clone() },
            CeresConfig { cond_layers: 0, ..ok.clone() },
            CeresConfig { vocab_size: 0, ..ok.clone() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
        CeresConfig {
            gat_layers: 0,
            use_gnn: false,
            ..ok
        }
        .validate()
        .unwrap();
    }
}
