use std::path::PathBuf;

use dbdiag_core::knowledge::{ingest, kb_lookup, IngestConfig, KnowledgeBase};
use dbdiag_core::llm::{Embedder, ScriptedBackend};

fn fixture(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(rel)
}

fn run_ingest(kb: &mut KnowledgeBase) -> dbdiag_core::knowledge::IngestReport {
    let text = std::fs::read_to_string(fixture("docs/maintenance_guide.md")).unwrap();
    let backend = ScriptedBackend::load(&fixture("scripts/ingest.json")).unwrap();
    ingest(
        &[("maintenance_guide.md".into(), text)],
        &IngestConfig::default(),
        &backend,
        &Embedder::hashing(256),
        kb,
    )
    .unwrap()
}

#[test]
fn guide_yields_two_rules_and_drops_the_rest() {
    let mut kb = KnowledgeBase::new();
    let report = run_ingest(&mut kb);

    let sections: Vec<String> = report.chunks.iter().map(|c| c.section_label()).collect();
    assert_eq!(sections, ["Slow batch inserts", "Checkpoint storms", "Bulk loading", "Glossary"]);
    assert!(report.chunks.iter().all(|c| c.summary.is_some()));

    let grouped_with_inserts = report
        .groups
        .iter()
        .find(|g| g.contains(&"maintenance_guide.md#0".to_string()))
        .unwrap();
    assert!(grouped_with_inserts.contains(&"maintenance_guide.md#2".to_string()), "{:?}", report.groups);

    assert_eq!(report.added, ["slow_batch_inserts", "checkpoint_storm"]);
    assert_eq!(report.dropped.len(), 2, "{:?}", report.dropped);
    assert!(report.dropped.iter().any(|d| d.contains("steps")));
    assert!(report.dropped.iter().any(|d| d.contains("slow_batch_inserts")));

    let inserts = kb.get("slow_batch_inserts").unwrap();
    assert_eq!(inserts.provenance[0], "maintenance_guide.md#0");
    assert!(inserts.provenance.contains(&"maintenance_guide.md#2".to_string()));
    assert!(kb.index_is_consistent());
}

#[test]
fn ingested_rules_are_found_by_metric_and_survive_a_save() {
    let mut kb = KnowledgeBase::seed();
    let before = kb.len();
    run_ingest(&mut kb);
    assert_eq!(kb.len(), before + 2);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("kb.json");
    kb.save(&path).unwrap();
    let loaded = KnowledgeBase::load(&path).unwrap();
    assert_eq!(loaded.to_json(), kb.to_json());

    let hits: Vec<&str> = kb_lookup(&loaded, &["io_wait".into(), "disk_write_mb_s".into()])
        .iter()
        .map(|s| s.name.as_str())
        .collect();
    assert_eq!(hits[0], "checkpoint_storm");
    assert!(hits.contains(&"slow_batch_inserts"));
}

#[test]
fn ingesting_twice_adds_nothing_new() {
    let mut kb = KnowledgeBase::new();
    run_ingest(&mut kb);
    let version = kb.version();
    let again = run_ingest(&mut kb);
    assert!(again.added.is_empty());
    assert_eq!(kb.version(), version);
}
