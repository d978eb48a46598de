//! Loader behavior against the committed golden fixture and hand-broken
//! variants of it.

use std::fs;
use std::path::{Path, PathBuf};

use readapt_core::error::Error;
use readapt_core::eval::load_beir_dataset;

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/beir_mini")
}

fn copy_fixture(to: &Path) {
    fs::create_dir_all(to.join("qrels")).unwrap();
    for rel in ["corpus.jsonl", "queries.jsonl", "qrels/test.tsv"] {
        fs::copy(fixture().join(rel), to.join(rel)).unwrap();
    }
}

#[test]
fn golden_fixture_round_trips_ids_and_text() {
    let ds = load_beir_dataset(&fixture()).unwrap();
    assert_eq!(ds.corpus.len(), 3);
    assert_eq!(ds.queries.len(), 2);
    assert_eq!(ds.qrels.len(), 2);

    // title is prepended when present and non-empty
    assert_eq!(
        ds.corpus["doc-a"],
        "Photovoltaics solar panels convert sunlight into electricity"
    );
    assert_eq!(ds.corpus["doc-b"], "wind turbines generate power from moving air");
    assert_eq!(ds.corpus["doc-c"], "geothermal plants tap heat beneath the crust");
    assert_eq!(ds.queries["q-1"], "how do solar panels work");
    assert_eq!(ds.qrels["q-1"]["doc-a"], 2);
    assert_eq!(ds.qrels["q-1"]["doc-c"], 1);
    assert_eq!(ds.qrels["q-2"]["doc-b"], 1);
}

#[test]
fn empty_qrels_loads_with_zero_judged_queries() {
    let dir = tempfile::tempdir().unwrap();
    copy_fixture(dir.path());
    fs::write(dir.path().join("qrels/test.tsv"), "query-id\tcorpus-id\tscore\n").unwrap();
    let ds = load_beir_dataset(dir.path()).unwrap();
    assert_eq!(ds.judged_queries().count(), 0);
    assert_eq!(ds.corpus.len(), 3);
}

#[test]
fn dangling_qrels_id_is_a_hard_error_naming_the_id() {
    let dir = tempfile::tempdir().unwrap();
    copy_fixture(dir.path());
    fs::write(
        dir.path().join("qrels/test.tsv"),
        "query-id\tcorpus-id\tscore\nq-1\tghost-doc\t1\n",
    )
    .unwrap();
    match load_beir_dataset(dir.path()) {
        Err(Error::DanglingId(msg)) => assert!(msg.contains("ghost-doc"), "{msg}"),
        other => panic!("expected DanglingId, got {other:?}"),
    }
}

#[test]
fn malformed_lines_are_reported_with_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    copy_fixture(dir.path());
    fs::write(
        dir.path().join("corpus.jsonl"),
        "{\"_id\": \"d1\", \"text\": \"fine\"}\nnot json at all\n",
    )
    .unwrap();
    match load_beir_dataset(dir.path()) {
        Err(Error::DatasetFormat { line, .. }) => assert_eq!(line, 2),
        other => panic!("expected DatasetFormat, got {other:?}"),
    }

    let dir2 = tempfile::tempdir().unwrap();
    copy_fixture(dir2.path());
    fs::write(
        dir2.path().join("qrels/test.tsv"),
        "query-id\tcorpus-id\tscore\nq-1\tdoc-a\tnot-a-number\n",
    )
    .unwrap();
    match load_beir_dataset(dir2.path()) {
        Err(Error::DatasetFormat { line, msg, .. }) => {
            assert_eq!(line, 2);
            assert!(msg.contains("not-a-number"));
        }
        other => panic!("expected DatasetFormat, got {other:?}"),
    }
}

#[test]
fn missing_files_are_reported_distinctly() {
    let dir = tempfile::tempdir().unwrap();
    copy_fixture(dir.path());
    fs::remove_file(dir.path().join("queries.jsonl")).unwrap();
    match load_beir_dataset(dir.path()) {
        Err(Error::MissingFile(p)) => assert!(p.ends_with("queries.jsonl")),
        other => panic!("expected MissingFile, got {other:?}"),
    }
}
