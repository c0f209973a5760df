//! Built-in example systems with their expected verdicts.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::runner::{run_all as run_checks, CheckOutcome, RunOptions};
use crate::sysdef::Model;

const ENTRIES: &[(&str, &str)] = &[
    ("radial", include_str!("../corpus/radial.toml")),
    ("heisenberg", include_str!("../corpus/heisenberg.toml")),
    (
        "double-oscillator-counterexample",
        include_str!("../corpus/double-oscillator-counterexample.toml"),
    ),
    (
        "line-field-r3",
        include_str!("../corpus/line-field-r3.toml"),
    ),
    ("limit-cycle", include_str!("../corpus/limit-cycle.toml")),
    (
        "sin-limit-cycles",
        include_str!("../corpus/sin-limit-cycles.toml"),
    ),
    (
        "torus-irrational",
        include_str!("../corpus/torus-irrational.toml"),
    ),
    (
        "free-particle",
        include_str!("../corpus/free-particle.toml"),
    ),
    (
        "oscillator-1dof",
        include_str!("../corpus/oscillator-1dof.toml"),
    ),
    (
        "ks-oscillator",
        include_str!("../corpus/ks-oscillator.toml"),
    ),
];

/// Result of running every check of one corpus entry.
#[derive(Debug, Clone, Serialize)]
pub struct CorpusRun {
    pub id: String,
    pub title: String,
    pub outcomes: Vec<CheckOutcome>,
    /// Whether every check reached its expected verdict.
    pub matched: bool,
}

pub fn ids() -> impl Iterator<Item = &'static str> {
    ENTRIES.iter().map(|(id, _)| *id)
}

/// The TOML source of entry `id`.
pub fn source(id: &str) -> Result<&'static str> {
    ENTRIES
        .iter()
        .find(|(k, _)| *k == id)
        .map(|(_, s)| *s)
        .ok_or_else(|| Error::Unknown {
            kind: "corpus entry".into(),
            name: id.to_string(),
        })
}

pub fn load(id: &str) -> Result<Model> {
    Model::from_toml(source(id)?)
}

pub fn run(id: &str, opts: &RunOptions) -> Result<CorpusRun> {
    let model = load(id)?;
    let outcomes = run_checks(&model, opts);
    let title = model
        .file()
        .meta
        .as_ref()
        .map(|m| m.title.clone())
        .unwrap_or_default();
    Ok(CorpusRun {
        id: id.to_string(),
        title,
        matched: outcomes.iter().all(|o| o.matched),
        outcomes,
    })
}

pub fn run_all(opts: &RunOptions) -> Result<Vec<CorpusRun>> {
    ids().map(|id| run(id, opts)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_match_meta() {
        for id in ids() {
            let m = load(id).unwrap_or_else(|e| panic!("{id}: {e}"));
            assert_eq!(m.file().meta.as_ref().unwrap().id, id);
            assert!(!m.checks().is_empty());
        }
        assert!(matches!(source("nope"), Err(Error::Unknown { .. })));
    }

    #[test]
    fn every_entry_reaches_its_expected_verdicts() {
        let mut failures = Vec::new();
        for run in run_all(&RunOptions::default()).unwrap() {
            for o in run.outcomes.iter().filter(|o| !o.matched) {
                failures.push(format!(
                    "{} / {}: {:?} {:?}",
                    run.id, o.label, o.mismatches, o.error
                ));
            }
        }
        assert!(failures.is_empty(), "{}", failures.join("\n"));
    }
}
