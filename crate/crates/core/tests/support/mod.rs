//! Fixture loading shared by the integration tests.

#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use obtod_core::dataset::{load_dataset, Dataset};
use obtod_core::knowledge::{
    EntityDatabase, FixtureCompletion, FixtureSearch, ImplicitMode, InContextExamples, KnowledgeRouter, RouterSettings,
};
use obtod_core::policy::{GenerationBackend, WindowConfig};
use obtod_core::{DialogExample, Engine, Vocabulary};

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

pub fn dataset() -> Dataset {
    load_dataset(fixture("dataset.json")).expect("fixture dataset loads")
}

pub fn test_dialogs() -> Vec<DialogExample> {
    dataset().splits.test
}

pub fn dialog(id: &str) -> DialogExample {
    test_dialogs().into_iter().find(|d| d.dialog_id == id).expect("fixture dialog")
}

pub fn db() -> EntityDatabase {
    EntityDatabase::load(fixture("db.json")).expect("fixture db loads")
}

pub fn examples() -> InContextExamples {
    let text = std::fs::read_to_string(fixture("incontext.json")).unwrap();
    serde_json::from_str(&text).unwrap()
}

pub fn router(mode: ImplicitMode) -> KnowledgeRouter {
    KnowledgeRouter::new(
        db(),
        Arc::new(FixtureSearch::load(fixture("search.json")).unwrap()),
        Arc::new(FixtureCompletion::load(fixture("completion.json")).unwrap()),
        examples(),
        RouterSettings { implicit_mode: mode, ..RouterSettings::default() },
    )
}

pub fn engine_with(backend: Arc<dyn GenerationBackend>, mode: ImplicitMode) -> Engine {
    Engine::new(WindowConfig::default(), Vocabulary::multiwoz(), backend, router(mode))
}

/// Engine whose backend replays the gold states and responses of the
/// fixture's test split.
pub fn oracle_engine() -> Engine {
    let probe = engine_with(Arc::new(obtod_core::policy::EchoBackend::new("unused")), ImplicitMode::KnowledgeBase);
    let script = probe.oracle_backend(&test_dialogs()).expect("oracle script");
    probe.with_backend(Arc::new(script))
}
