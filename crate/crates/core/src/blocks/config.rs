use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mathcore::ffn::DEFAULT_EXPANSION_RATIO;
use crate::mathcore::norm::DEFAULT_NORM_EPS;
use crate::mathcore::NormKind;

/// Architecture switches used by the ablation study. All off is the full
/// model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
#[serde(deny_unknown_fields)]
pub struct Ablations {
    /// Drop the head mixing term of the query mixer.
    pub wo_hm: bool,
    /// Replace head mixing by dot-product self-attention over the heads.
    pub hm_to_sa: bool,
    /// Drop the per-head FFN of the query mixer.
    pub wo_qm_ffn: bool,
    /// One action FFN shared by all blocks instead of one per block.
    pub shared_seq_ffn: bool,
    /// One output-fusion FFN shared by all heads.
    pub shared_of_ffn: bool,
    /// Post-residual LayerNorm instead of pre-residual RMSNorm.
    pub post_ln: bool,
}

impl Ablations {
    pub const NAMES: [&'static str; 6] = [
        "wo_hm",
        "hm_to_sa",
        "wo_qm_ffn",
        "shared_seq_ffn",
        "shared_of_ffn",
        "post_ln",
    ];

    pub fn with(name: &str) -> Result<Self> {
        let mut a = Self::default();
        a.set(name, true)?;
        Ok(a)
    }

    pub fn set(&mut self, name: &str, on: bool) -> Result<()> {
        let slot = match name {
            "wo_hm" => &mut self.wo_hm,
            "hm_to_sa" => &mut self.hm_to_sa,
            "wo_qm_ffn" => &mut self.wo_qm_ffn,
            "shared_seq_ffn" => &mut self.shared_seq_ffn,
            "shared_of_ffn" => &mut self.shared_of_ffn,
            "post_ln" => &mut self.post_ln,
            other => {
                return Err(Error::Config(format!(
                    "unknown ablation `{other}`; expected one of {}",
                    Self::NAMES.join(", ")
                )))
            }
        };
        *slot = on;
        Ok(())
    }

    pub fn flags(&self) -> [(&'static str, bool); 6] {
        [
            ("wo_hm", self.wo_hm),
            ("hm_to_sa", self.hm_to_sa),
            ("wo_qm_ffn", self.wo_qm_ffn),
            ("shared_seq_ffn", self.shared_seq_ffn),
            ("shared_of_ffn", self.shared_of_ffn),
            ("post_ln", self.post_ln),
        ]
    }

    /// Names of the switches that differ between two settings.
    pub fn diff(&self, other: &Ablations) -> Vec<&'static str> {
        self.flags()
            .iter()
            .zip(other.flags())
            .filter(|(a, b)| a.1 != b.1)
            .map(|(a, _)| a.0)
            .collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
#[serde(deny_unknown_fields)]
pub struct Decoupling {
    pub enabled: bool,
    pub n_user_heads: usize,
    pub n_item_heads: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_heads: usize,
    pub n_blocks: usize,
    pub head_dim: usize,
    pub max_seq_len: usize,
    pub expansion_ratio: usize,
    pub n_tasks: usize,
    pub ablations: Ablations,
    pub decoupling: Decoupling,
    pub norm_eps: f64,
}

/// The `desk-small` shape.
impl Default for ModelConfig {
    fn default() -> Self {
        Self::new(4, 2, 32, 64)
    }
}

pub const PRESET_NAMES: [&str; 4] = [
    "desk-small",
    "paper-small",
    "paper-small-corrected",
    "paper-medium-corrected",
];

impl ModelConfig {
    pub fn new(n_heads: usize, n_blocks: usize, head_dim: usize, max_seq_len: usize) -> Self {
        Self {
            n_heads,
            n_blocks,
            head_dim,
            max_seq_len,
            expansion_ratio: DEFAULT_EXPANSION_RATIO,
            n_tasks: 2,
            ablations: Ablations::default(),
            decoupling: Decoupling::default(),
            norm_eps: DEFAULT_NORM_EPS,
        }
    }

    /// Named configurations. `paper-small` carries the published `D = 386`,
    /// which is not a multiple of `N = 16`; it is kept so the mismatch is
    /// visible and fails validation.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk-small" => Ok(Self::default()),
            "paper-small" => Ok(Self::new(16, 4, 386, 512)),
            "paper-small-corrected" => Ok(Self::new(16, 4, 384, 512)),
            "paper-medium-corrected" => Ok(Self::new(16, 4, 768, 512)),
            other => Err(Error::Config(format!(
                "unknown preset `{other}`; valid presets: {}",
                PRESET_NAMES.join(", ")
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.head_dim == 0 {
            return Err(Error::Config("heads and head dim must be positive".into()));
        }
        if self.head_dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "head dim {} is not a multiple of the head count {} (head mixing reshape needs D mod N = 0)",
                self.head_dim, self.n_heads
            )));
        }
        if self.n_blocks == 0 {
            return Err(Error::Config("at least one block is required".into()));
        }
        if self.expansion_ratio == 0 || self.n_tasks == 0 {
            return Err(Error::Config("expansion ratio and task count must be positive".into()));
        }
        if !(self.norm_eps >= 0.0) {
            return Err(Error::Config("norm eps must be non-negative".into()));
        }
        let d = &self.decoupling;
        if d.enabled {
            if d.n_user_heads + d.n_item_heads != self.n_heads {
                return Err(Error::Config(format!(
                    "user heads {} + item heads {} != {}",
                    d.n_user_heads, d.n_item_heads, self.n_heads
                )));
            }
            if d.n_item_heads == 0 {
                return Err(Error::Config("decoupling needs at least one item head".into()));
            }
            if self.ablations.hm_to_sa {
                return Err(Error::Config(
                    "self-attention mixing mixes every head and cannot be decoupled".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn norm_kind(&self) -> NormKind {
        if self.ablations.post_ln {
            NormKind::Layer
        } else {
            NormKind::Rms
        }
    }

    pub fn width(&self) -> usize {
        self.n_heads * self.head_dim
    }

    pub fn ffn_hidden(&self) -> usize {
        self.expansion_ratio * self.head_dim
    }

    pub fn seq_ffn_hidden(&self) -> usize {
        self.expansion_ratio * self.width()
    }

    /// Hidden width of each task network.
    pub fn task_hidden(&self) -> usize {
        self.head_dim
    }

    /// Heads whose rows never see item features; 0 without decoupling.
    pub fn user_heads(&self) -> usize {
        if self.decoupling.enabled {
            self.decoupling.n_user_heads
        } else {
            0
        }
    }

    pub fn with_decoupling(mut self, n_user_heads: usize) -> Self {
        self.decoupling = Decoupling {
            enabled: true,
            n_user_heads,
            n_item_heads: self.n_heads - n_user_heads,
        };
        self
    }

    /// Dotted paths of every setting that differs from `other`.
    pub fn diff(&self, other: &ModelConfig) -> Vec<String> {
        fn walk(prefix: &str, a: &serde_json::Value, b: &serde_json::Value, out: &mut Vec<String>) {
            match (a, b) {
                (serde_json::Value::Object(x), serde_json::Value::Object(y)) => {
                    for (k, v) in x {
                        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                        walk(&path, v, y.get(k).unwrap_or(&serde_json::Value::Null), out);
                    }
                }
                _ if a != b => out.push(prefix.to_string()),
                _ => {}
            }
        }
        let mut out = Vec::new();
        let as_value = |c: &ModelConfig| serde_json::to_value(c).expect("config serializes");
        walk("", &as_value(self), &as_value(other), &mut out);
        out
    }

    pub fn with_ablation(mut self, name: &str) -> Result<Self> {
        self.ablations.set(name, true)?;
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets() {
        for name in PRESET_NAMES {
            let cfg = ModelConfig::preset(name).unwrap();
            assert_eq!(cfg.validate().is_ok(), name != "paper-small", "{name}");
        }
        let err = ModelConfig::preset("huge").unwrap_err().to_string();
        assert!(err.contains("desk-small") && err.contains("paper-medium-corrected"));
    }

    #[test]
    fn decoupling_checks() {
        let cfg = ModelConfig::new(4, 1, 8, 4).with_decoupling(2);
        cfg.validate().unwrap();
        let mut bad = cfg.clone();
        bad.decoupling.n_item_heads = 1;
        assert!(bad.validate().is_err());
        let sa = cfg.with_ablation("hm_to_sa").unwrap();
        assert!(sa.validate().is_err());
    }

    #[test]
    fn single_switch_variants() {
        for name in Ablations::NAMES {
            let a = Ablations::with(name).unwrap();
            assert_eq!(a.diff(&Ablations::default()), vec![name]);
        }
        assert!(Ablations::with("wo_everything").is_err());
    }
}
