use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which job a weight set is built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    DualEncoder,
    CrossEncoder,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::DualEncoder => "dual_encoder",
            Role::CrossEncoder => "cross_encoder",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "dual_encoder" | "de" | "DE" => Ok(Role::DualEncoder),
            "cross_encoder" | "ce" | "CE" => Ok(Role::CrossEncoder),
            other => Err(Error::Config(format!("unknown model role `{other}`"))),
        }
    }
}

/// Architecture hyperparameters of a BERT-style encoder stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ff: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub segment_types: usize,
    pub layer_norm_eps: f64,
    pub init_std: f64,
}

impl Default for ModelConfig {
    /// Desk-scale cross-encoder shape; `vocab_size` must be filled in.
    fn default() -> Self {
        Self {
            num_layers: 4,
            hidden: 64,
            heads: 4,
            ff: 256,
            vocab_size: 0,
            max_positions: 64,
            segment_types: 2,
            layer_norm_eps: 1e-12,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            ..Self::default()
        }
    }

    pub fn with_layers(&self, num_layers: usize) -> Self {
        Self {
            num_layers,
            ..self.clone()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.num_layers == 0 {
            return bad("num_layers must be at least 1".into());
        }
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return bad(format!(
                "hidden {} must be a positive multiple of heads {}",
                self.hidden, self.heads
            ));
        }
        if self.ff == 0 || self.vocab_size == 0 || self.max_positions == 0 {
            return bad("ff, vocab_size and max_positions must be positive".into());
        }
        if self.segment_types != 2 {
            return bad(format!("segment_types must be 2, got {}", self.segment_types));
        }
        if !(self.layer_norm_eps > 0.0) || !(self.init_std > 0.0) {
            return bad("layer_norm_eps and init_std must be positive".into());
        }
        Ok(())
    }

    /// `key=value` lines, stable order.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        vec![
            ("num_layers".into(), self.num_layers.to_string()),
            ("hidden".into(), self.hidden.to_string()),
            ("heads".into(), self.heads.to_string()),
            ("ff".into(), self.ff.to_string()),
            ("vocab_size".into(), self.vocab_size.to_string()),
            ("max_positions".into(), self.max_positions.to_string()),
            ("segment_types".into(), self.segment_types.to_string()),
            ("layer_norm_eps".into(), format!("{:e}", self.layer_norm_eps)),
            ("init_std".into(), format!("{:e}", self.init_std)),
        ]
    }

    pub fn from_kv(get: impl Fn(&str) -> Option<String>) -> Result<Self> {
        fn field<V: std::str::FromStr>(get: &impl Fn(&str) -> Option<String>, key: &str) -> Result<V> {
            let raw = get(key).ok_or_else(|| Error::Format(format!("config is missing `{key}`")))?;
            raw.trim()
                .parse()
                .map_err(|_| Error::Format(format!("config `{key}` has unparsable value `{raw}`")))
        }
        let cfg = Self {
            num_layers: field(&get, "num_layers")?,
            hidden: field(&get, "hidden")?,
            heads: field(&get, "heads")?,
            ff: field(&get, "ff")?,
            vocab_size: field(&get, "vocab_size")?,
            max_positions: field(&get, "max_positions")?,
            segment_types: field(&get, "segment_types")?,
            layer_norm_eps: field(&get, "layer_norm_eps")?,
            init_std: field(&get, "init_std")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    #[test]
    fn kv_round_trip() {
        let cfg = ModelConfig {
            layer_norm_eps: 1e-12,
            init_std: 0.015,
            ..ModelConfig::desk(123)
        };
        let map: HashMap<String, String> = cfg.to_kv().into_iter().collect();
        let back = ModelConfig::from_kv(|k| map.get(k).cloned()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn heads_must_divide_hidden() {
        let cfg = ModelConfig {
            heads: 5,
            ..ModelConfig::desk(10)
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
