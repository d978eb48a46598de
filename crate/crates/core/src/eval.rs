//! BEIR-layout datasets, exhaustive dense retrieval, and ranking metrics.
//!
//! Dataset layout on disk: `corpus.jsonl` (`_id`, `text`, optional `title`),
//! `queries.jsonl` (`_id`, `text`), and `qrels/test.tsv` with a
//! `query-id\tcorpus-id\tscore` header. Search is brute force over unit-norm
//! embeddings (dot product equals cosine), exact by construction, with ties
//! broken by ascending doc id. Metrics follow the trec conventions:
//! `2^grade - 1` gains with a `log2(rank + 1)` discount for nDCG, and
//! unjudged documents contribute zero gain.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{embed, tokenizer, ModelParams};

/// A corpus, query set, and graded relevance judgments.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RetrievalDataset {
    pub corpus: BTreeMap<String, String>,
    pub queries: BTreeMap<String, String>,
    pub qrels: BTreeMap<String, BTreeMap<String, u32>>,
}

impl RetrievalDataset {
    /// Judged queries: those with at least one qrels row.
    pub fn judged_queries(&self) -> impl Iterator<Item = (&str, &BTreeMap<String, u32>)> {
        self.qrels
            .iter()
            .filter(|(_, j)| !j.is_empty())
            .map(|(q, j)| (q.as_str(), j))
    }

    pub fn validate(&self) -> Result<()> {
        for (qid, judgments) in &self.qrels {
            if !self.queries.contains_key(qid) {
                return Err(Error::DanglingId(format!("query-id {qid}")));
            }
            for did in judgments.keys() {
                if !self.corpus.contains_key(did) {
                    return Err(Error::DanglingId(format!("corpus-id {did}")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Deserialize)]
struct CorpusLine {
    _id: String,
    text: String,
    #[serde(default)]
    title: Option<String>,
}

#[derive(Deserialize)]
struct QueryLine {
    _id: String,
    text: String,
}

/// Loads just the `corpus.jsonl` of a BEIR-layout directory (enough for
/// unlabeled training). Document text is `title + " " + body` when a title
/// is present.
pub fn load_corpus(dir: &Path) -> Result<BTreeMap<String, String>> {
    let corpus_path = dir.join("corpus.jsonl");
    if !corpus_path.exists() {
        return Err(Error::MissingFile(corpus_path));
    }
    let mut corpus = BTreeMap::new();
    let corpus_raw = fs::read_to_string(&corpus_path).map_err(|e| Error::io(&corpus_path, e))?;
    for (i, line) in corpus_raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let doc: CorpusLine = serde_json::from_str(line).map_err(|e| Error::DatasetFormat {
            file: corpus_path.display().to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        let text = match &doc.title {
            Some(title) if !title.is_empty() => format!("{title} {}", doc.text),
            _ => doc.text,
        };
        if doc._id.is_empty() {
            return Err(Error::DatasetFormat {
                file: corpus_path.display().to_string(),
                line: i + 1,
                msg: "empty _id".to_string(),
            });
        }
        if corpus.insert(doc._id.clone(), text).is_some() {
            return Err(Error::DuplicateName(doc._id));
        }
    }
    Ok(corpus)
}

/// Loads a BEIR-layout directory. Document text is `title + " " + body` when
/// a title is present. Referential integrity of qrels is enforced; an empty
/// qrels file loads with a warning.
pub fn load_beir_dataset(dir: &Path) -> Result<RetrievalDataset> {
    let corpus_path = dir.join("corpus.jsonl");
    let queries_path = dir.join("queries.jsonl");
    let qrels_path = dir.join("qrels").join("test.tsv");
    for p in [&corpus_path, &queries_path, &qrels_path] {
        if !p.exists() {
            return Err(Error::MissingFile(p.clone()));
        }
    }

    let mut dataset = RetrievalDataset {
        corpus: load_corpus(dir)?,
        ..RetrievalDataset::default()
    };

    let queries_raw =
        fs::read_to_string(&queries_path).map_err(|e| Error::io(&queries_path, e))?;
    for (i, line) in queries_raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let q: QueryLine = serde_json::from_str(line).map_err(|e| Error::DatasetFormat {
            file: queries_path.display().to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        if q._id.is_empty() {
            return Err(Error::DatasetFormat {
                file: queries_path.display().to_string(),
                line: i + 1,
                msg: "empty _id".to_string(),
            });
        }
        if dataset.queries.insert(q._id.clone(), q.text).is_some() {
            return Err(Error::DuplicateName(q._id));
        }
    }

    let qrels_raw = fs::read_to_string(&qrels_path).map_err(|e| Error::io(&qrels_path, e))?;
    let file = qrels_path.display().to_string();
    for (i, line) in qrels_raw.lines().enumerate() {
        if i == 0 {
            // header line: query-id \t corpus-id \t score
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::DatasetFormat {
                file,
                line: i + 1,
                msg: format!("expected 3 tab-separated fields, got {}", fields.len()),
            });
        }
        let score: u32 = fields[2].trim().parse().map_err(|_| Error::DatasetFormat {
            file: file.clone(),
            line: i + 1,
            msg: format!("score {:?} is not a non-negative integer", fields[2]),
        })?;
        dataset
            .qrels
            .entry(fields[0].to_string())
            .or_default()
            .insert(fields[1].to_string(), score);
    }
    if dataset.qrels.is_empty() {
        log::warn!("{}: no relevance judgments (zero judged queries)", file);
    }

    dataset.validate()?;
    Ok(dataset)
}

/// Writes a dataset back out in the BEIR layout (used by the synthetic
/// generator). Deterministic: sorted ids, fixed field order.
pub fn write_beir_dataset(dataset: &RetrievalDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("qrels")).map_err(|e| Error::io(dir, e))?;
    let mut corpus = String::new();
    for (id, text) in &dataset.corpus {
        writeln!(
            corpus,
            "{}",
            serde_json::json!({"_id": id, "text": text})
        )
        .expect("string write");
    }
    fs::write(dir.join("corpus.jsonl"), corpus).map_err(|e| Error::io(dir, e))?;

    let mut queries = String::new();
    for (id, text) in &dataset.queries {
        writeln!(
            queries,
            "{}",
            serde_json::json!({"_id": id, "text": text})
        )
        .expect("string write");
    }
    fs::write(dir.join("queries.jsonl"), queries).map_err(|e| Error::io(dir, e))?;

    let mut qrels = String::from("query-id\tcorpus-id\tscore\n");
    for (qid, judgments) in &dataset.qrels {
        for (did, score) in judgments {
            writeln!(qrels, "{qid}\t{did}\t{score}").expect("string write");
        }
    }
    fs::write(dir.join("qrels").join("test.tsv"), qrels).map_err(|e| Error::io(dir, e))?;
    Ok(())
}

/// Unit-norm document embeddings in doc-id order, tagged with the canonical
/// hash of the encoder checkpoint that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseIndex {
    doc_ids: Vec<String>,
    embeddings: Vec<f32>,
    dim: usize,
    fingerprint: String,
}

impl DenseIndex {
    /// Builds an index from externally computed unit-norm rows (one per doc
    /// id, aligned). Ids must be unique; rows must be L2-normalized to 1e-5.
    pub fn from_rows(
        doc_ids: Vec<String>,
        rows: Vec<Vec<f32>>,
        fingerprint: impl Into<String>,
    ) -> Result<Self> {
        if doc_ids.len() != rows.len() {
            return Err(Error::Invalid(format!(
                "{} ids but {} rows",
                doc_ids.len(),
                rows.len()
            )));
        }
        if rows.is_empty() {
            return Err(Error::Invalid("empty index".to_string()));
        }
        let dim = rows[0].len();
        let mut seen = std::collections::BTreeSet::new();
        for id in &doc_ids {
            if !seen.insert(id) {
                return Err(Error::DuplicateName(id.clone()));
            }
        }
        let mut embeddings = Vec::with_capacity(rows.len() * dim);
        for (id, row) in doc_ids.iter().zip(&rows) {
            if row.len() != dim {
                return Err(Error::Invalid(format!(
                    "row for {id} has dimension {}, expected {dim}",
                    row.len()
                )));
            }
            let norm: f64 = row.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-5 {
                return Err(Error::Invalid(format!(
                    "row for {id} has norm {norm}, expected 1"
                )));
            }
            embeddings.extend_from_slice(row);
        }
        Ok(DenseIndex {
            doc_ids,
            embeddings,
            dim,
            fingerprint: fingerprint.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.embeddings[i * self.dim..(i + 1) * self.dim]
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }
}

/// Embeds every document (truncated to the encoder's max length). Documents
/// that tokenize to nothing are an error, reported with their id.
pub fn build_index(params: &ModelParams, corpus: &BTreeMap<String, String>) -> Result<DenseIndex> {
    if corpus.is_empty() {
        return Err(Error::Invalid("empty corpus".to_string()));
    }
    let config = params.config();
    let dim = config.d_model;
    let mut doc_ids = Vec::with_capacity(corpus.len());
    let mut embeddings = Vec::with_capacity(corpus.len() * dim);
    for (id, text) in corpus {
        let tokens = tokenizer::encode(text, config.vocab_size, config.max_len);
        let emb = embed(params, &tokens)
            .map_err(|e| relabel_all_pad(e, id))?;
        doc_ids.push(id.clone());
        embeddings.extend_from_slice(&emb);
    }
    Ok(DenseIndex {
        doc_ids,
        embeddings,
        dim,
        fingerprint: params.checkpoint().canonical_hash()?,
    })
}

fn relabel_all_pad(e: Error, id: &str) -> Error {
    match e {
        Error::AllPadInput(_) => Error::AllPadInput(format!("document {id}")),
        other => other,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    pub doc_id: String,
    pub score: f32,
}

/// Exhaustive top-k by dot product (cosine for unit-norm inputs). Ties break
/// by ascending doc id; `k` beyond the corpus returns the full ranking.
pub fn search(index: &DenseIndex, query: &[f32], k: usize) -> Result<Vec<SearchHit>> {
    if k == 0 {
        return Err(Error::Invalid("k must be >= 1".to_string()));
    }
    if query.len() != index.dim {
        return Err(Error::Invalid(format!(
            "query dimension {} does not match index dimension {}",
            query.len(),
            index.dim
        )));
    }
    let mut scored: Vec<(f64, usize)> = (0..index.len())
        .map(|i| {
            let dot: f64 = index
                .row(i)
                .iter()
                .zip(query)
                .map(|(&d, &q)| f64::from(d) * f64::from(q))
                .sum();
            (dot, i)
        })
        .collect();
    scored.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .expect("scores are finite")
            .then_with(|| index.doc_ids[a.1].cmp(&index.doc_ids[b.1]))
    });
    Ok(scored
        .into_iter()
        .take(k)
        .map(|(score, i)| SearchHit {
            doc_id: index.doc_ids[i].clone(),
            score: score as f32,
        })
        .collect())
}

/// nDCG@k with `2^grade - 1` gains and `log2(rank + 1)` discounts. Zero when
/// no judged document has a positive grade.
pub fn ndcg_at_k(ranked: &[String], judgments: &BTreeMap<String, u32>, k: usize) -> f64 {
    let gain = |grade: u32| -> f64 { (2f64.powi(grade as i32)) - 1.0 };
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, id)| {
            let g = judgments.get(id).copied().unwrap_or(0);
            gain(g) / ((i + 2) as f64).log2()
        })
        .sum();
    let mut ideal: Vec<u32> = judgments.values().copied().collect();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg: f64 = ideal
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, &g)| gain(g) / ((i + 2) as f64).log2())
        .sum();
    if idcg <= 0.0 {
        0.0
    } else {
        dcg / idcg
    }
}

/// Fraction of positively judged documents retrieved in the top k. Zero when
/// nothing is positively judged.
pub fn recall_at_k(ranked: &[String], judgments: &BTreeMap<String, u32>, k: usize) -> f64 {
    let relevant: usize = judgments.values().filter(|&&g| g > 0).count();
    if relevant == 0 {
        return 0.0;
    }
    let hit = ranked
        .iter()
        .take(k)
        .filter(|id| judgments.get(*id).copied().unwrap_or(0) > 0)
        .count();
    hit as f64 / relevant as f64
}

/// Reciprocal rank of the first positively judged document in the top k.
pub fn mrr_at_k(ranked: &[String], judgments: &BTreeMap<String, u32>, k: usize) -> f64 {
    for (i, id) in ranked.iter().take(k).enumerate() {
        if judgments.get(id).copied().unwrap_or(0) > 0 {
            return 1.0 / (i + 1) as f64;
        }
    }
    0.0
}

/// Per-query ranking with its metric table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub ranking: Vec<SearchHit>,
    pub metrics: BTreeMap<String, f64>,
}

/// Aggregate metrics (means over judged queries) plus the per-query table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: BTreeMap<String, f64>,
    pub per_query: BTreeMap<String, QueryResult>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// trec_eval-style TSV: one `metric \t query-id \t value` row per entry
    /// plus `all` rows for the aggregates.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("metric\tquery\tvalue\n");
        for (qid, result) in &self.per_query {
            for (metric, value) in &result.metrics {
                writeln!(out, "{metric}\t{qid}\t{value}").expect("string write");
            }
        }
        for (metric, value) in &self.metrics {
            writeln!(out, "{metric}\tall\t{value}").expect("string write");
        }
        out
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }
}

/// Embeds the corpus, runs every judged query, and aggregates nDCG@k for each
/// requested cutoff plus recall@100 and MRR@10. Averages run over judged
/// queries only.
pub fn evaluate(
    params: &ModelParams,
    dataset: &RetrievalDataset,
    k_list: &[usize],
) -> Result<EvalReport> {
    dataset.validate()?;
    if dataset.judged_queries().next().is_none() {
        return Err(Error::Invalid(
            "dataset has no judged queries to evaluate".to_string(),
        ));
    }
    let k_list = if k_list.is_empty() { &[10] } else { k_list };
    let index = build_index(params, &dataset.corpus)?;
    let config = params.config();
    let depth = k_list
        .iter()
        .copied()
        .chain([RECALL_DEPTH, MRR_DEPTH])
        .max()
        .expect("non-empty cutoffs");

    let mut per_query = BTreeMap::new();
    for (qid, judgments) in dataset.judged_queries() {
        let text = &dataset.queries[qid];
        let tokens = tokenizer::encode(text, config.vocab_size, config.max_len);
        let emb = embed(params, &tokens).map_err(|e| relabel_all_pad(e, qid))?;
        let ranking = search(&index, &emb, depth)?;
        let ids: Vec<String> = ranking.iter().map(|h| h.doc_id.clone()).collect();
        let mut metrics = BTreeMap::new();
        for &k in k_list {
            metrics.insert(format!("ndcg@{k}"), ndcg_at_k(&ids, judgments, k));
        }
        metrics.insert(
            format!("recall@{RECALL_DEPTH}"),
            recall_at_k(&ids, judgments, RECALL_DEPTH),
        );
        metrics.insert(format!("mrr@{MRR_DEPTH}"), mrr_at_k(&ids, judgments, MRR_DEPTH));
        per_query.insert(
            qid.to_string(),
            QueryResult { ranking, metrics },
        );
    }

    let mut aggregate = BTreeMap::new();
    let n = per_query.len() as f64;
    for result in per_query.values() {
        for (metric, value) in &result.metrics {
            *aggregate.entry(metric.clone()).or_insert(0.0) += value;
        }
    }
    for value in aggregate.values_mut() {
        *value /= n;
    }
    Ok(EvalReport {
        metrics: aggregate,
        per_query,
    })
}

const RECALL_DEPTH: usize = 100;
const MRR_DEPTH: usize = 10;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, EncoderConfig, Pooling};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_params() -> ModelParams {
        init_params(&EncoderConfig {
            vocab_size: 64,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            max_len: 16,
            pooling: Pooling::Mean,
            seed: 7,
        })
        .unwrap()
    }

    fn corpus_of(items: &[(&str, &str)]) -> BTreeMap<String, String> {
        items
            .iter()
            .map(|(a, b)| (a.to_string(), b.to_string()))
            .collect()
    }

    #[test]
    fn index_shape_and_determinism() {
        let params = tiny_params();
        let one = build_index(&params, &corpus_of(&[("d1", "hello world")])).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one.dim(), 8);

        let corpus = corpus_of(&[("d1", "same text"), ("d2", "same text"), ("d3", "other")]);
        let index = build_index(&params, &corpus).unwrap();
        assert_eq!(index.row(0), index.row(1), "duplicate texts embed equally");
        let again = build_index(&params, &corpus).unwrap();
        assert_eq!(index, again, "rebuild is bit-identical");
        assert_eq!(index.fingerprint(), params.checkpoint().canonical_hash().unwrap());
    }

    #[test]
    fn index_reports_all_pad_document() {
        let params = tiny_params();
        let err = build_index(&params, &corpus_of(&[("bad-doc", "   ")]));
        match err {
            Err(Error::AllPadInput(msg)) => assert!(msg.contains("bad-doc")),
            other => panic!("expected AllPadInput, got {other:?}"),
        }
    }

    #[test]
    fn search_self_similarity_and_tie_break() {
        let params = tiny_params();
        let corpus = corpus_of(&[("a", "one two three"), ("b", "four five six"), ("c", "one two three")]);
        let index = build_index(&params, &corpus).unwrap();
        // query equal to a's embedding: a and c tie at score 1, a wins by id
        let q: Vec<f32> = index.row(0).to_vec();
        let hits = search(&index, &q, 3).unwrap();
        assert_eq!(hits[0].doc_id, "a");
        assert!((hits[0].score - 1.0).abs() < 1e-5);
        assert_eq!(hits[1].doc_id, "c");
        assert_eq!(hits[0].score, hits[1].score);
    }

    #[test]
    fn search_matches_full_sort_oracle() {
        let params = tiny_params();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let corpus: BTreeMap<String, String> = (0..20)
            .map(|i| {
                let words: Vec<String> = (0..4)
                    .map(|_| format!("w{}", rng.random_range(0..30)))
                    .collect();
                (format!("doc{i:02}"), words.join(" "))
            })
            .collect();
        let index = build_index(&params, &corpus).unwrap();
        let tokens = tokenizer::encode("w3 w7 w11", 64, 16);
        let q = embed(&params, &tokens).unwrap();

        // oracle: score everything, full sort with the same tie-break
        let mut all: Vec<(f64, String)> = (0..index.len())
            .map(|i| {
                let dot: f64 = index
                    .row(i)
                    .iter()
                    .zip(&q)
                    .map(|(&d, &qq)| f64::from(d) * f64::from(qq))
                    .sum();
                (dot, index.doc_ids()[i].clone())
            })
            .collect();
        all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then_with(|| a.1.cmp(&b.1)));

        let hits = search(&index, &q, 5).unwrap();
        assert_eq!(hits.len(), 5);
        for (hit, (score, id)) in hits.iter().zip(&all) {
            assert_eq!(&hit.doc_id, id);
            assert!((f64::from(hit.score) - score).abs() < 1e-6);
        }

        // k beyond the corpus returns the full ranking, not an error
        let full = search(&index, &q, 1000).unwrap();
        assert_eq!(full.len(), 20);
    }

    fn judged(pairs: &[(&str, u32)]) -> BTreeMap<String, u32> {
        pairs.iter().map(|(id, g)| (id.to_string(), *g)).collect()
    }

    fn ranked(ids: &[&str]) -> Vec<String> {
        ids.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn ndcg_ideal_ranking_is_one() {
        let j = judged(&[("a", 3), ("b", 2), ("c", 1)]);
        assert_eq!(ndcg_at_k(&ranked(&["a", "b", "c"]), &j, 10), 1.0);
    }

    #[test]
    fn ndcg_hand_case_grade_one_at_rank_two() {
        // single grade-1 doc at rank 2 of 3: nDCG = 1/log2(3) = 0.63093
        let j = judged(&[("rel", 1)]);
        let got = ndcg_at_k(&ranked(&["x", "rel", "y"]), &j, 10);
        assert!((got - 0.63093).abs() < 1e-5, "{got}");
    }

    #[test]
    fn ndcg_zero_when_nothing_relevant_retrieved() {
        let j = judged(&[("rel", 1)]);
        assert_eq!(ndcg_at_k(&ranked(&["x", "y", "z"]), &j, 3), 0.0);
        // no positively judged docs at all
        let none = judged(&[("x", 0)]);
        assert_eq!(ndcg_at_k(&ranked(&["x", "y"]), &none, 3), 0.0);
    }

    #[test]
    fn ndcg_monotone_under_upward_swap_and_blind_below_k() {
        let j = judged(&[("rel", 2), ("other", 1)]);
        let worse = ndcg_at_k(&ranked(&["a", "b", "rel", "other"]), &j, 4);
        let better = ndcg_at_k(&ranked(&["a", "rel", "b", "other"]), &j, 4);
        assert!(better >= worse);

        let base = ndcg_at_k(&ranked(&["rel", "a", "b", "c", "other"]), &j, 2);
        let shuffled_tail = ndcg_at_k(&ranked(&["rel", "a", "c", "other", "b"]), &j, 2);
        assert_eq!(base, shuffled_tail);
    }

    #[test]
    fn recall_and_mrr_basics() {
        let j = judged(&[("a", 1), ("b", 2), ("c", 0)]);
        assert_eq!(recall_at_k(&ranked(&["a", "x", "b"]), &j, 2), 0.5);
        assert_eq!(recall_at_k(&ranked(&["a", "x", "b"]), &j, 3), 1.0);
        assert_eq!(mrr_at_k(&ranked(&["x", "a"]), &j, 10), 0.5);
        assert_eq!(mrr_at_k(&ranked(&["x", "y"]), &j, 2), 0.0);
        let none = judged(&[("q", 0)]);
        assert_eq!(recall_at_k(&ranked(&["q"]), &none, 5), 0.0);
    }

    fn perfect_dataset(params: &ModelParams, n: usize) -> RetrievalDataset {
        // each query is its relevant document's exact text, so it embeds
        // identically and ranks first
        let mut ds = RetrievalDataset::default();
        for i in 0..n {
            let text = format!("topic{i} word{} word{}", i * 2, i * 3 + 1);
            ds.corpus.insert(format!("d{i:03}"), text.clone());
            ds.queries.insert(format!("q{i:03}"), text);
            ds.qrels
                .entry(format!("q{i:03}"))
                .or_default()
                .insert(format!("d{i:03}"), 1);
        }
        let _ = params;
        ds
    }

    #[test]
    fn evaluate_perfect_retriever_scores_one() {
        let params = tiny_params();
        let ds = perfect_dataset(&params, 6);
        let report = evaluate(&params, &ds, &[10]).unwrap();
        assert_eq!(report.metric("ndcg@10"), Some(1.0));
        assert_eq!(report.metric("mrr@10"), Some(1.0));
    }

    #[test]
    fn evaluate_aggregates_are_per_query_means() {
        let params = tiny_params();
        let mut ds = perfect_dataset(&params, 5);
        // make one query miss entirely so means are non-trivial
        ds.queries.insert("q000".to_string(), "zzz yyy xxx".to_string());
        let report = evaluate(&params, &ds, &[10]).unwrap();
        for metric in ["ndcg@10", "recall@100", "mrr@10"] {
            let mean: f64 = report
                .per_query
                .values()
                .map(|r| r.metrics[metric])
                .sum::<f64>()
                / report.per_query.len() as f64;
            assert!((report.metric(metric).unwrap() - mean).abs() < 1e-12);
        }
        // scores are non-increasing within each ranking
        for result in report.per_query.values() {
            for pair in result.ranking.windows(2) {
                assert!(pair[0].score >= pair[1].score);
            }
        }
    }

    #[test]
    fn evaluate_requires_judged_queries() {
        let params = tiny_params();
        let mut ds = perfect_dataset(&params, 3);
        ds.qrels.clear();
        assert!(evaluate(&params, &ds, &[10]).is_err());
    }

    #[test]
    fn dataset_validation_catches_dangling_ids() {
        let mut ds = RetrievalDataset::default();
        ds.corpus.insert("d1".to_string(), "text".to_string());
        ds.queries.insert("q1".to_string(), "query".to_string());
        ds.qrels
            .entry("q1".to_string())
            .or_default()
            .insert("ghost".to_string(), 1);
        match ds.validate() {
            Err(Error::DanglingId(msg)) => assert!(msg.contains("ghost")),
            other => panic!("expected DanglingId, got {other:?}"),
        }
    }

    #[test]
    fn report_tsv_contains_aggregate_rows() {
        let params = tiny_params();
        let ds = perfect_dataset(&params, 3);
        let report = evaluate(&params, &ds, &[10]).unwrap();
        let tsv = report.to_tsv();
        assert!(tsv.lines().any(|l| l.starts_with("ndcg@10\tall\t")));
        assert!(tsv.lines().any(|l| l.starts_with("ndcg@10\tq000\t")));
        let json = report.to_json().unwrap();
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
    }
}
