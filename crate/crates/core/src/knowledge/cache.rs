use std::collections::HashMap;
use std::sync::RwLock;

use super::{KnowledgeItem, Provenance};
use crate::text::normalize;

/// Retrieval results keyed by (route, normalized query). Concurrent writers
/// of one key store identical values, so last-writer-wins is harmless.
#[derive(Default, Debug)]
pub struct RetrievalCache {
    entries: RwLock<HashMap<(Provenance, String), KnowledgeItem>>,
}

impl RetrievalCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, route: Provenance, query: &str) -> Option<KnowledgeItem> {
        let entries = self.entries.read().unwrap_or_else(|e| e.into_inner());
        entries.get(&(route, normalize(query))).cloned()
    }

    pub fn insert(&self, route: Provenance, query: &str, item: KnowledgeItem) {
        let mut entries = self.entries.write().unwrap_or_else(|e| e.into_inner());
        entries.insert((route, normalize(query)), item);
    }

    pub fn len(&self) -> usize {
        self.entries.read().unwrap_or_else(|e| e.into_inner()).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn clear(&self) {
        self.entries.write().unwrap_or_else(|e| e.into_inner()).clear();
    }
}
