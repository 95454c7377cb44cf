use std::collections::{BTreeMap, HashSet};
use std::sync::OnceLock;

use mitra_core::corpus::split_paragraphs;
use mitra_core::embed::EmbedRole;
use mitra_core::evalkit::{ndcg_at_k, precision_at_k, recall_at_k};
use mitra_core::fixtures::Fixtures;
use mitra_core::generate::{assemble_prompt, GenerationConfig};
use mitra_core::lexical::{tokenize, Bm25Index, Bm25Params};
use mitra_core::rerank::{rerank, Candidate, StubReranker};
use mitra_core::{
    AnalysisRecord, CorpusStore, Document, Engine, PipelineConfig, QueryOutcome, Session, SynonymTable, TieredIndexSet,
};
use proptest::prelude::*;

fn fixture() -> &'static (Fixtures, Engine) {
    static CELL: OnceLock<(Fixtures, Engine)> = OnceLock::new();
    CELL.get_or_init(|| {
        let f = Fixtures::generate(99);
        let store = f.store().unwrap();
        let models = f.stub_models(64, 0);
        let indexes = TieredIndexSet::build(&store, models.embedder.as_ref()).unwrap();
        let engine = Engine::new(store, indexes, models, PipelineConfig::default()).unwrap();
        (f, engine)
    })
}

fn words() -> impl Strategy<Value = String> {
    prop::collection::vec(
        prop::sample::select(vec!["pt", "met", "jet", "muon", "cut", "2017", "the", "is"]),
        1..12,
    )
    .prop_map(|w| w.join(" "))
}

#[derive(Debug, Clone)]
enum CorpusOp {
    Analysis(usize),
    Doc {
        doc: usize,
        analysis: usize,
        version: u64,
        body: String,
    },
}

fn corpus_op() -> impl Strategy<Value = CorpusOp> {
    prop_oneof![
        (0..3usize).prop_map(CorpusOp::Analysis),
        (0..5usize, 0..3usize, 1..5u64, prop::collection::vec(words(), 1..5)).prop_map(
            |(doc, analysis, version, paras)| {
                CorpusOp::Doc {
                    doc,
                    analysis,
                    version,
                    body: paras.join("\n\n"),
                }
            }
        ),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, .. ProptestConfig::default() })]

    #[test]
    fn split_is_deterministic(body in "[a-z .\n]{0,200}") {
        prop_assert_eq!(split_paragraphs(&body), split_paragraphs(&body));
    }

    #[test]
    fn ingest_keeps_integrity_and_versions(ops in prop::collection::vec(corpus_op(), 1..40)) {
        let mut store = CorpusStore::new();
        let mut versions: BTreeMap<String, u64> = BTreeMap::new();
        for op in ops {
            match op {
                CorpusOp::Analysis(a) => store
                    .upsert_analysis(AnalysisRecord {
                        analysis_id: format!("A{a}"),
                        title: format!("analysis {a}"),
                        abstract_text: "abstract text".into(),
                    })
                    .unwrap(),
                CorpusOp::Doc { doc, analysis, version, body } => {
                    let _ = store.ingest_document(Document {
                        doc_id: format!("D{doc}"),
                        analysis_id: format!("A{analysis}"),
                        body_text: body,
                        version,
                    });
                }
            }
            prop_assert!(store.validate().is_ok());
            for d in store.documents() {
                let last = versions.insert(d.doc_id.clone(), d.version).unwrap_or(0);
                prop_assert!(d.version >= last);
            }
        }
    }

    #[test]
    fn embed_texts_preserves_order_and_cardinality(texts in prop::collection::vec(words(), 1..10)) {
        let (_, engine) = fixture();
        let e = engine.models().embedder.as_ref();
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        let batch = e.embed_texts(&refs, EmbedRole::Passage).unwrap();
        prop_assert_eq!(batch.len(), texts.len());
        for (t, v) in refs.iter().zip(&batch) {
            prop_assert_eq!(v, &e.embed_one(t, EmbedRole::Passage).unwrap());
        }
    }

    #[test]
    fn fulltext_search_stays_in_its_analysis(query in words(), a in 0..12usize, k in 1..40usize) {
        let (_, engine) = fixture();
        let ids: Vec<&str> = engine.indexes().analysis_ids().collect();
        let analysis = ids[a % ids.len()];
        let q = engine.models().embedder.embed_one(&query, EmbedRole::Query).unwrap();
        for hit in engine.indexes().fulltext(analysis).unwrap().search_topk(&q, k).unwrap() {
            prop_assert_eq!(hit.analysis_id.as_str(), analysis);
            prop_assert!(hit.score >= -1.0 - 1e-9 && hit.score <= 1.0 + 1e-9);
        }
    }

    #[test]
    fn bm25_nonnegative_and_prefix(query in words(), k in 1..30usize) {
        let (_, engine) = fixture();
        let idx = engine.lexical("HIG-001").unwrap();
        let a = idx.rank(&query, k);
        let b = idx.rank(&query, k + 1);
        prop_assert!(a.iter().all(|h| h.score >= 0.0));
        prop_assert_eq!(&b[..a.len()], &a[..]);
    }

    #[test]
    fn bm25_tracks_recomputation_when_unrelated_chunk_added(
        chunks in prop::collection::vec(words(), 2..15),
        query in words(),
    ) {
        let mut all: Vec<(String, String)> =
            chunks.iter().enumerate().map(|(i, t)| (format!("c{i:02}"), t.clone())).collect();
        all.push(("zz".into(), "unrelated filler words only".into()));
        let idx = Bm25Index::build(all.iter().map(|(i, t)| (i.as_str(), "a", t.as_str())), Bm25Params::default()).unwrap();
        let terms: Vec<String> = tokenize(&query).into_iter().collect::<std::collections::BTreeSet<_>>().into_iter().collect();
        let n = all.len() as f64;
        let avg = all.iter().map(|(_, t)| tokenize(t).len() as f64).sum::<f64>() / n;
        for (id, text) in &all {
            let toks = tokenize(text);
            let mut want = 0.0;
            for term in &terms {
                let tf = toks.iter().filter(|t| *t == term).count() as f64;
                if tf > 0.0 {
                    let df = all.iter().filter(|(_, t)| tokenize(t).contains(term)).count() as f64;
                    let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
                    want += idf * tf * 2.5 / (tf + 1.5 * (0.25 + 0.75 * toks.len() as f64 / avg));
                }
            }
            prop_assert!((idx.score(&terms, id).unwrap() - want).abs() < 1e-9);
        }
    }

    #[test]
    fn rerank_output_size_and_ranks(n in 1..30usize, k in 1..10usize, query in words()) {
        let candidates: Vec<Candidate> = (0..n)
            .map(|i| Candidate {
                chunk_id: format!("d#{i}"),
                analysis_id: "a".into(),
                text: format!("muon jet {i}"),
                first_stage_score: 1.0 / (i + 1) as f64,
            })
            .collect();
        let r = StubReranker::new(std::sync::Arc::new(SynonymTable::new()));
        let hits = rerank(&r, &query, &candidates, k).unwrap();
        prop_assert_eq!(hits.len(), k.min(n));
        prop_assert!(hits.iter().enumerate().all(|(i, h)| h.rank == i + 1));
    }

    #[test]
    fn sessions_are_independent(ops in prop::collection::vec((0..2usize, 0..4usize, 0..16usize), 1..30)) {
        let (f, engine) = fixture();
        let queries: Vec<&str> = f.gold.iter().map(|g| g.query_text.as_str()).take(16).collect();
        let apply = |s: &mut Session, op: usize, q: usize| -> String {
            match op {
                0 | 1 => format!("{:?}", s.handle_query(queries[q], engine).map(|o| match o {
                    QueryOutcome::Answer { analysis_id, citations, .. } =>
                        (analysis_id, citations.into_iter().map(|c| c.hit.chunk_id).collect::<Vec<_>>()),
                    other => (format!("{other:?}"), Vec::new()),
                })),
                2 => format!("{:?}", s.confirm(q % 3 != 0).cloned()),
                _ => format!("{:?}", s.reset().clone()),
            }
        };
        let mut shared = [Session::new(), Session::new()];
        let mut interleaved: [Vec<String>; 2] = Default::default();
        for &(s, op, q) in &ops {
            interleaved[s].push(apply(&mut shared[s], op, q));
        }
        for (who, seen) in interleaved.iter().enumerate() {
            let mut alone = Session::new();
            let solo: Vec<String> = ops.iter().filter(|o| o.0 == who).map(|&(_, op, q)| apply(&mut alone, op, q)).collect();
            prop_assert_eq!(&solo, seen);
        }
    }

    #[test]
    fn prompt_assembly_is_deterministic(query in words(), a in 0..12usize) {
        let (_, engine) = fixture();
        let ids: Vec<&str> = engine.indexes().analysis_ids().collect();
        let passages = engine.retrieve_and_rerank(ids[a % ids.len()], &query).unwrap();
        let config = GenerationConfig::default();
        prop_assert_eq!(assemble_prompt(&query, &passages, &config), assemble_prompt(&query, &passages, &config));
    }

    #[test]
    fn recall_is_monotone_in_k(ranking in prop::collection::vec(0..30u32, 0..20), rel in prop::collection::hash_set(0..30u32, 1..6)) {
        let mut last = 0.0;
        for k in 1..=25 {
            let r = recall_at_k(&ranking, &rel, k).unwrap();
            prop_assert!(r >= last);
            last = r;
        }
    }

    #[test]
    fn ndcg_ignores_order_of_trailing_irrelevant_items(
        head in prop::collection::vec(0..10u32, 1..6),
        mut tail in prop::collection::vec(100..200u32, 0..10),
        k in 1..20usize,
    ) {
        let rel: HashSet<u32> = head.iter().copied().collect();
        let mut a = head.clone();
        a.extend(&tail);
        tail.reverse();
        let mut b = head;
        b.extend(&tail);
        prop_assert_eq!(ndcg_at_k(&a, &rel, k).unwrap(), ndcg_at_k(&b, &rel, k).unwrap());
    }

    #[test]
    fn one_relevant_in_top_k_gives_one_over_k(k in 1..20usize, len in 1..30usize, pos in 0..30usize) {
        let ranking: Vec<u32> = (0..len as u32).collect();
        let target = (pos % len.min(k)) as u32;
        let rel = HashSet::from([target, 1000]);
        prop_assert_eq!(precision_at_k(&ranking, &rel, k).unwrap(), 1.0 / k as f64);
    }
}
