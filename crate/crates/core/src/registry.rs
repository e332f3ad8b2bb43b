//! Name-keyed registries of strategy constructors.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Maps names to constructors of boxed strategy objects. `kind` labels the
/// family in error messages.
pub struct Registry<C: ?Sized> {
    kind: &'static str,
    entries: BTreeMap<String, Box<C>>,
}

impl<C: ?Sized> Registry<C> {
    pub fn new(kind: &'static str) -> Self {
        Self {
            kind,
            entries: BTreeMap::new(),
        }
    }

    /// Adds or replaces a constructor.
    pub fn register(&mut self, name: &str, ctor: Box<C>) -> &mut Self {
        self.entries.insert(name.to_ascii_lowercase(), ctor);
        self
    }

    /// Case-insensitive lookup.
    pub fn get(&self, name: &str) -> Result<&C> {
        self.entries
            .get(&name.to_ascii_lowercase())
            .map(|b| b.as_ref())
            .ok_or_else(|| Error::UnknownStrategy {
                kind: self.kind,
                name: name.to_string(),
                available: self.names().join(", "),
            })
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(&name.to_ascii_lowercase())
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }
}
