use std::collections::HashSet;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::KnowledgeError;
use crate::state::{BeliefBlock, BeliefState};
use crate::text::normalize;

/// One database entity. Slots keep the column order of the source file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub name: String,
    #[serde(flatten)]
    pub slots: IndexMap<String, String>,
}

impl Record {
    pub fn new(name: impl Into<String>) -> Self {
        Self { name: name.into(), slots: IndexMap::new() }
    }

    pub fn with(mut self, slot: impl Into<String>, value: impl Into<String>) -> Self {
        self.slots.insert(slot.into(), value.into());
        self
    }

    /// `name` resolves to the entity name; any other slot to its column.
    pub fn get(&self, slot: &str) -> Option<&str> {
        if slot == "name" {
            Some(&self.name)
        } else {
            self.slots.get(slot).map(String::as_str)
        }
    }

    fn satisfies(&self, block: &BeliefBlock, columns: &HashSet<&str>) -> bool {
        block
            .slots
            .iter()
            .filter(|c| c.slot == "name" || columns.contains(c.slot.as_str()))
            .all(|c| self.get(&c.slot).is_some_and(|v| normalize(v) == normalize(&c.value)))
    }
}

/// The local entity database: `{"<domain>": [{"name": ..., "<slot>": ...}]}`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EntityDatabase {
    pub domains: IndexMap<String, Vec<Record>>,
}

impl EntityDatabase {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, KnowledgeError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| KnowledgeError::Database(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| KnowledgeError::Database(format!("{}: {e}", path.display())))
    }

    pub fn insert(&mut self, domain: impl Into<String>, records: Vec<Record>) {
        self.domains.insert(domain.into(), records);
    }

    pub fn has_domain(&self, domain: &str) -> bool {
        self.domains.contains_key(domain)
    }
}

/// Records of one domain that satisfy a belief block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DomainMatches<'a> {
    pub domain: String,
    pub records: Vec<&'a Record>,
}

/// Conjunctive exact-match lookup, one result per belief block. Slots that
/// are not a column of the domain (booking slots such as `people`) do not
/// constrain the lookup.
pub fn query_database<'a>(
    db: &'a EntityDatabase,
    belief: &BeliefState,
) -> Result<Vec<DomainMatches<'a>>, KnowledgeError> {
    belief
        .blocks
        .iter()
        .map(|block| {
            let records = db
                .domains
                .get(&block.domain)
                .ok_or_else(|| KnowledgeError::UnknownDomain(block.domain.clone()))?;
            let columns: HashSet<&str> = records.iter().flat_map(|r| r.slots.keys().map(String::as_str)).collect();
            Ok(DomainMatches {
                domain: block.domain.clone(),
                records: records.iter().filter(|r| r.satisfies(block, &columns)).collect(),
            })
        })
        .collect()
}

/// Plain-text database state, e.g.
/// `restaurant matched = 1 ; name = alimentum ; area = north`.
pub fn render_db_state(results: &[DomainMatches<'_>]) -> String {
    if results.is_empty() {
        return "matched = 0".to_string();
    }
    results
        .iter()
        .map(|m| {
            let mut out = format!("{} matched = {}", m.domain, m.records.len());
            if let Some(first) = m.records.first() {
                out.push_str(" ; name = ");
                out.push_str(&first.name);
                for (slot, value) in &first.slots {
                    out.push_str(&format!(" ; {slot} = {value}"));
                }
            }
            out
        })
        .collect::<Vec<_>>()
        .join(" | ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fixture() -> EntityDatabase {
        let mut db = EntityDatabase::default();
        db.insert(
            "restaurant",
            vec![
                Record::new("alimentum").with("area", "north").with("food", "modern european"),
                Record::new("golden wok").with("area", "south").with("food", "chinese"),
                Record::new("pizza hut").with("area", "centre").with("food", "italian"),
            ],
        );
        db.insert("train", vec![]);
        db
    }

    fn belief(blocks: Vec<BeliefBlock>) -> BeliefState {
        BeliefState { blocks }
    }

    #[test]
    fn single_constraint_matches_one() {
        let db = fixture();
        let hits = query_database(&db, &belief(vec![BeliefBlock::new("restaurant").with("area", "north")])).unwrap();
        assert_eq!(hits[0].records.len(), 1);
        assert_eq!(hits[0].records[0].name, "alimentum");
    }

    #[test]
    fn empty_block_matches_all_in_order() {
        let db = fixture();
        let hits = query_database(&db, &belief(vec![BeliefBlock::new("restaurant")])).unwrap();
        let names: Vec<_> = hits[0].records.iter().map(|r| r.name.as_str()).collect();
        assert_eq!(names, ["alimentum", "golden wok", "pizza hut"]);
    }

    #[test]
    fn unknown_domain() {
        let db = fixture();
        let err = query_database(&db, &belief(vec![BeliefBlock::new("spa").with("area", "north")])).unwrap_err();
        assert!(matches!(err, KnowledgeError::UnknownDomain(d) if d == "spa"));
    }

    #[test]
    fn matching_is_case_and_space_insensitive() {
        let db = fixture();
        let b = belief(vec![BeliefBlock::new("restaurant").with("food", "Modern   European").with("name", "ALIMENTUM")]);
        assert_eq!(query_database(&db, &b).unwrap()[0].records.len(), 1);
        let b = belief(vec![BeliefBlock::new("restaurant").with("area", "west")]);
        assert!(query_database(&db, &b).unwrap()[0].records.is_empty());
    }

    #[test]
    fn booking_slots_do_not_filter() {
        let db = fixture();
        let b = belief(vec![BeliefBlock::new("restaurant").with("area", "north").with("people", "2").with("time", "18:00")]);
        assert_eq!(query_database(&db, &b).unwrap()[0].records.len(), 1);
    }

    #[test]
    fn renders() {
        let db = fixture();
        let b = belief(vec![
            BeliefBlock::new("restaurant").with("area", "north"),
            BeliefBlock::new("train").with("day", "friday"),
        ]);
        let hits = query_database(&db, &b).unwrap();
        assert_eq!(
            render_db_state(&hits[..1]),
            "restaurant matched = 1 ; name = alimentum ; area = north ; food = modern european"
        );
        assert_eq!(render_db_state(&hits[1..]), "train matched = 0");
        assert_eq!(render_db_state(&hits), format!("{} | train matched = 0", render_db_state(&hits[..1])));
        assert_eq!(render_db_state(&[]), "matched = 0");
    }

    #[test]
    fn load_keeps_column_order() {
        let json = r#"{"hotel": [{"name": "acorn", "stars": "4", "area": "north"}]}"#;
        let db: EntityDatabase = serde_json::from_str(json).unwrap();
        let cols: Vec<_> = db.domains["hotel"][0].slots.keys().cloned().collect();
        assert_eq!(cols, ["stars", "area"]);
        assert_eq!(serde_json::to_string(&db).unwrap(), json.replace(": ", ":").replace(", ", ","));
    }

    proptest! {
        #[test]
        fn adding_a_constraint_never_grows_matches(
            areas in prop::collection::vec(prop::sample::select(vec!["north", "south", "east"]), 0..20),
            foods in prop::collection::vec(prop::sample::select(vec!["thai", "chinese"]), 20),
            area in prop::sample::select(vec!["north", "south", "east"]),
            food in prop::sample::select(vec!["thai", "chinese"]),
        ) {
            let mut db = EntityDatabase::default();
            db.insert("restaurant", areas.iter().zip(&foods).enumerate()
                .map(|(i, (a, f))| Record::new(format!("r{i}")).with("area", *a).with("food", *f)).collect());
            let loose = belief(vec![BeliefBlock::new("restaurant").with("area", area)]);
            let tight = belief(vec![BeliefBlock::new("restaurant").with("area", area).with("food", food)]);
            let n_loose = query_database(&db, &loose).unwrap()[0].records.len();
            let n_tight = query_database(&db, &tight).unwrap()[0].records.len();
            prop_assert!(n_tight <= n_loose);
        }
    }
}
