use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::LayerTag;

/// Shape and switches of the reasoning engine.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub n_units: usize,
    pub k_active: usize,
    pub n_steps: usize,
    pub d_hidden: usize,
    pub d_key: usize,
    pub d_value: usize,
    /// Token embedding width of the question encoder.
    pub d_emb: usize,
    /// Relation embedding width.
    pub d_rel: usize,
    /// Output width of the relation message map.
    pub d_rel_out: usize,
    /// Hidden width of the memory-reduction scorer.
    pub d_attn: usize,
    pub modality_schedule: Vec<LayerTag>,
    pub disable_communication: bool,
    pub disable_memory_update: bool,
    pub single_unit_mode: bool,
    pub use_bias: bool,
    pub update_tanh: bool,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            n_units: 8,
            k_active: 4,
            n_steps: 20,
            d_hidden: 16,
            d_key: 8,
            d_value: 16,
            d_emb: 16,
            d_rel: 4,
            d_rel_out: 8,
            d_attn: 8,
            modality_schedule: LayerTag::ALL.to_vec(),
            disable_communication: false,
            disable_memory_update: false,
            single_unit_mode: false,
            use_bias: true,
            update_tanh: false,
        }
    }
}

impl InferenceConfig {
    pub fn check(&self) -> Result<()> {
        let cfg = self.effective();
        if cfg.n_units == 0 {
            return Err(Error::Config("n_units must be at least 1".into()));
        }
        if cfg.k_active == 0 || cfg.k_active > cfg.n_units {
            return Err(Error::Config(format!(
                "k_active must lie in [1, n_units = {}], got {}",
                cfg.n_units, cfg.k_active
            )));
        }
        if cfg.n_steps == 0 {
            return Err(Error::Config("n_steps must be at least 1".into()));
        }
        if cfg.d_value != cfg.d_hidden {
            return Err(Error::Config(format!(
                "d_value ({}) must equal d_hidden ({}) for the residual update",
                cfg.d_value, cfg.d_hidden
            )));
        }
        for (name, v) in [
            ("d_hidden", cfg.d_hidden),
            ("d_key", cfg.d_key),
            ("d_emb", cfg.d_emb),
            ("d_rel", cfg.d_rel),
            ("d_rel_out", cfg.d_rel_out),
            ("d_attn", cfg.d_attn),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if cfg.modality_schedule.is_empty() {
            return Err(Error::Config("modality_schedule must not be empty".into()));
        }
        Ok(())
    }

    /// The configuration actually run: single-unit mode collapses the bank
    /// to one always-active unit.
    pub fn effective(&self) -> InferenceConfig {
        let mut cfg = self.clone();
        if cfg.single_unit_mode {
            cfg.n_units = 1;
            cfg.k_active = 1;
        }
        cfg
    }

    pub fn active_count(&self) -> usize {
        let cfg = self.effective();
        cfg.k_active.min(cfg.n_units)
    }

    pub fn layer_at(&self, step: usize) -> LayerTag {
        self.modality_schedule[step % self.modality_schedule.len()]
    }
}

/// Dimensions fixed by the data rather than by the model config.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataDims {
    pub d_node: usize,
    pub vocab_size: usize,
    pub n_relations: usize,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let cfg = InferenceConfig::default();
        cfg.check().unwrap();
        assert_eq!((cfg.n_units, cfg.k_active), (8, 4));
    }

    #[test]
    fn invariants_enforced() {
        let bad = [
            InferenceConfig { k_active: 0, ..Default::default() },
            InferenceConfig { k_active: 9, ..Default::default() },
            InferenceConfig { n_steps: 0, ..Default::default() },
            InferenceConfig { d_value: 3, ..Default::default() },
            InferenceConfig { modality_schedule: vec![], ..Default::default() },
        ];
        for cfg in bad {
            assert!(cfg.check().is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn single_unit_mode_collapses_bank() {
        let cfg = InferenceConfig { single_unit_mode: true, ..Default::default() };
        let eff = cfg.effective();
        assert_eq!((eff.n_units, eff.k_active), (1, 1));
        assert_eq!(cfg.active_count(), 1);
    }

    #[test]
    fn config_json_uses_field_names() {
        let cfg: InferenceConfig =
            serde_json::from_str(r#"{"n_units":2,"k_active":1,"modality_schedule":["fact"]}"#).unwrap();
        assert_eq!(cfg.n_units, 2);
        assert_eq!(cfg.layer_at(5), LayerTag::Fact);
        assert!(serde_json::from_str::<InferenceConfig>(r#"{"units":2}"#).is_err());
    }
}
