//! Name-keyed registries of interchangeable strategies.
//!
//! Each strategy family (optimizers, ground-truth matchers, region
//! deformation modes) is a trait; concrete variants register a factory
//! under a name and are selected at runtime from configuration.

use std::collections::BTreeMap;

use crate::error::{config, Result};

pub type Factory<T, C> = fn(&C) -> Result<Box<T>>;

pub struct Registry<T: ?Sized, C> {
    family: &'static str,
    entries: BTreeMap<&'static str, Factory<T, C>>,
}

impl<T: ?Sized, C> Registry<T, C> {
    pub fn new(family: &'static str) -> Self {
        Self {
            family,
            entries: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, name: &'static str, factory: Factory<T, C>) -> &mut Self {
        self.entries.insert(name, factory);
        self
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }

    pub fn create(&self, name: &str, cfg: &C) -> Result<Box<T>> {
        let factory = self.entries.get(name).ok_or_else(|| {
            config(format!(
                "unknown {} `{name}` (available: {})",
                self.family,
                self.names().join(", ")
            ))
        })?;
        factory(cfg)
    }
}
