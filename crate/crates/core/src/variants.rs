//! Named model variants: the full model and its ablations, looked up by name
//! from configs and the command line.

use crate::error::{Error, Result};
use crate::inference::InferenceConfig;

pub trait ModelVariant: Send + Sync {
    fn name(&self) -> &'static str;
    fn description(&self) -> &'static str;
    /// Rewrites the switches this variant controls.
    fn apply(&self, cfg: &mut InferenceConfig);
}

struct Full;

impl ModelVariant for Full {
    fn name(&self) -> &'static str {
        "full"
    }
    fn description(&self) -> &'static str {
        "all components enabled"
    }
    fn apply(&self, cfg: &mut InferenceConfig) {
        cfg.single_unit_mode = false;
        cfg.disable_memory_update = false;
        cfg.disable_communication = false;
    }
}

struct SingleUnit;

impl ModelVariant for SingleUnit {
    fn name(&self) -> &'static str {
        "single_unit"
    }
    fn description(&self) -> &'static str {
        "one always-active unit instead of a sparse bank"
    }
    fn apply(&self, cfg: &mut InferenceConfig) {
        cfg.single_unit_mode = true;
    }
}

struct NoMemoryUpdate;

impl ModelVariant for NoMemoryUpdate {
    fn name(&self) -> &'static str {
        "no_memory_update"
    }
    fn description(&self) -> &'static str {
        "graph features stay fixed across steps"
    }
    fn apply(&self, cfg: &mut InferenceConfig) {
        cfg.disable_memory_update = true;
    }
}

struct NoCommunication;

impl ModelVariant for NoCommunication {
    fn name(&self) -> &'static str {
        "no_communication"
    }
    fn description(&self) -> &'static str {
        "active units skip the exchange and keep their recurrent update"
    }
    fn apply(&self, cfg: &mut InferenceConfig) {
        cfg.disable_communication = true;
    }
}

/// Variants in registration order.
pub struct Registry {
    entries: Vec<Box<dyn ModelVariant>>,
}

impl Default for Registry {
    fn default() -> Self {
        Self {
            entries: vec![Box::new(Full), Box::new(SingleUnit), Box::new(NoMemoryUpdate), Box::new(NoCommunication)],
        }
    }
}

impl Registry {
    pub fn empty() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn register(&mut self, variant: Box<dyn ModelVariant>) -> Result<()> {
        if self.get(variant.name()).is_some() {
            return Err(Error::Config(format!("variant `{}` is already registered", variant.name())));
        }
        self.entries.push(variant);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&dyn ModelVariant> {
        self.entries.iter().find(|v| v.name() == name).map(|v| v.as_ref())
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|v| v.name()).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &dyn ModelVariant> {
        self.entries.iter().map(|v| v.as_ref())
    }

    /// `base` with the named variant applied.
    pub fn configure(&self, name: &str, base: &InferenceConfig) -> Result<InferenceConfig> {
        let v = self.get(name).ok_or_else(|| {
            Error::Config(format!("unknown variant `{name}`; expected one of {}", self.names().join(", ")))
        })?;
        let mut cfg = base.clone();
        v.apply(&mut cfg);
        Ok(cfg)
    }
}
