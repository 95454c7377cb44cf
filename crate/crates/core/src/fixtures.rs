//! Deterministic synthetic corpus and gold query sets.
//!
//! Every analysis gets an introduction paragraph (its abstract), a set of
//! fact paragraphs written in collaboration jargon ("the pt cut for the muon
//! in 2017 is 25.0") and a closing summary that restates one fact. Two gold
//! sets are derived from the facts:
//!
//! * `Set1` asks with the exact wording of the fact paragraph.
//! * `Set2` swaps each jargon term for a paraphrase ("transverse momentum
//!   requirement") that never occurs in the corpus. The synonym table written
//!   alongside maps each paraphrase back to its jargon term.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use std::sync::Arc;

use crate::corpus::{
    apply_record, write_ingest_records, AnalysisRecord, Chunk, CorpusError, CorpusStore, Document, IngestRecord,
    IngestSummary,
};
use crate::embed::{StubEmbedder, SynonymTable, DEFAULT_DIMENSION};
use crate::evalkit::{write_gold, EvalError, GoldQuery, SetLabel};
use crate::generate::StubGenerator;
use crate::index::{IndexError, TieredIndexSet};
use crate::pipeline::{Engine, Models, PipelineConfig, PipelineError};
use crate::rerank::StubReranker;

pub const CORPUS_FILE: &str = "corpus_input.jsonl";
pub const GOLD_FILE: &str = "gold.jsonl";
pub const SYNONYM_FILE: &str = "synonyms.tsv";

/// (jargon used in documents, paraphrase used in Set2 queries)
const CONCEPTS: &[(&str, &str)] = &[
    ("pt", "transverse momentum"),
    ("eta", "pseudorapidity"),
    ("met", "missing energy"),
    ("iso", "isolation"),
    ("btag", "bottom tagging"),
    ("jec", "hadronic calibration"),
    ("jes", "hadronic scale"),
    ("jer", "hadronic resolution"),
    ("pu", "overlapping collisions"),
    ("lumi", "integrated luminosity"),
    ("hlt", "online trigger"),
    ("sf", "correction factor"),
    ("eff", "selection efficiency"),
    ("bdt", "boosted decision tree"),
    ("mva", "multivariate discriminant"),
    ("mt", "transverse mass"),
    ("dr", "angular separation"),
    ("qcd", "multijet background"),
    ("dy", "drell yan"),
    ("ttbar", "top pair"),
    ("syst", "systematic uncertainty"),
    ("stat", "statistical uncertainty"),
    ("ul", "upper limit"),
    ("xsec", "cross section"),
    ("sr", "signal region"),
    ("cr", "control region"),
    ("mc", "simulation"),
    ("nll", "negative log likelihood"),
    ("vbf", "vector boson fusion"),
    ("ggf", "gluon fusion"),
    ("cut", "requirement"),
    ("wp", "operating threshold"),
];

/// Topic paraphrases used when routing a first query to an abstract.
const TOPIC_SYNONYMS: &[(&str, &str)] = &[
    ("wimp", "dark matter"),
    ("invisible particles", "dark matter"),
    ("dimuon", "two muons"),
    ("four lepton", "zz"),
    ("stop quark", "top squark"),
];

const OBJECTS: &[&str] = &["muon", "electron", "jet"];
const YEARS: &[&str] = &["2017", "2018"];

const FILLERS: &[&str] = &[
    "The value was validated with dedicated studies of the recorded data.",
    "Further details are documented in the appendix of this note.",
    "This choice follows the recommendation of the physics object groups.",
    "The procedure is identical for all data taking periods considered here.",
    "Alternative choices were checked and found to give compatible results.",
    "The impact on the final result is found to be small.",
];

/// (analysis id, title, abstract)
const ANALYSES: &[(&str, &str, &str)] = &[
    ("HIG-001", "Higgs boson decay to two muons",
     "A search for the Higgs boson decaying to two muons using proton collisions recorded by the experiment."),
    ("EXO-002", "Dark matter with an energetic jet",
     "A search for dark matter produced in association with an energetic jet and large momentum imbalance. No excess over the standard model expectation is observed."),
    ("TOP-003", "Top quark pair production",
     "A measurement of top quark pair production in the lepton plus jets channel with the full dataset."),
    ("SMP-004", "W boson mass",
     "A precision measurement of the mass of the W boson from its leptonic decays."),
    ("HIG-005", "Higgs boson in the zz channel",
     "A study of the Higgs boson decaying through zz to four charged leptons, including its width."),
    ("SUS-006", "Top squark pair production",
     "A search for top squark pair production in final states with one lepton and several jets."),
    ("EXO-007", "High mass dilepton resonances",
     "A search for new heavy resonances decaying to electron or muon pairs at high invariant mass."),
    ("BPH-008", "Rare strange beauty meson decays",
     "A measurement of the branching fraction of the rare decay of the strange beauty meson into two muons."),
    ("SMP-009", "Inclusive jet production",
     "A measurement of inclusive jet production differential in jet rapidity over a wide kinematic range."),
    ("EXO-010", "Lepton flavour violating tau decays",
     "A search for lepton flavour violating decays of the tau lepton into three muons."),
    ("SMP-011", "WZ diboson production",
     "A measurement of WZ diboson production in fully leptonic final states and limits on anomalous couplings."),
    ("HIG-012", "Higgs boson decay to tau pairs",
     "A measurement of Higgs boson production with decays to pairs of tau leptons in several production modes."),
];

/// Analysis whose text never mentions the Higgs boson; used by the
/// out-of-context grounding probe.
pub const DARK_MATTER_ANALYSIS: &str = "EXO-002";

pub const FACTS_PER_ANALYSIS: usize = 24;
pub const QUERIES_PER_ANALYSIS_PER_SET: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct Fixtures {
    pub records: Vec<IngestRecord>,
    pub gold: Vec<GoldQuery>,
    /// (surface form, canonical form)
    pub synonyms: Vec<(String, String)>,
}

struct Fact {
    jargon: [usize; 2],
    object: &'static str,
    year: &'static str,
    value: String,
}

impl Fact {
    fn phrase(&self, words: [&str; 2]) -> String {
        format!("{} {} for the {} in {}", words[0], words[1], self.object, self.year)
    }

    fn jargon_phrase(&self) -> String {
        self.phrase([CONCEPTS[self.jargon[0]].0, CONCEPTS[self.jargon[1]].0])
    }

    fn paraphrase(&self) -> String {
        self.phrase([CONCEPTS[self.jargon[0]].1, CONCEPTS[self.jargon[1]].1])
    }
}

impl Fixtures {
    pub fn generate(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut records = Vec::new();
        let mut gold = Vec::new();

        let mut pairs: Vec<[usize; 2]> = (0..CONCEPTS.len())
            .flat_map(|a| (0..CONCEPTS.len()).filter(move |&b| b != a).map(move |b| [a, b]))
            .collect();

        for (a_idx, (analysis_id, title, abstract_text)) in ANALYSES.iter().enumerate() {
            records.push(IngestRecord::Analysis(AnalysisRecord {
                analysis_id: analysis_id.to_string(),
                title: title.to_string(),
                abstract_text: abstract_text.to_string(),
            }));

            pairs.shuffle(&mut rng);
            let facts: Vec<Fact> = (0..FACTS_PER_ANALYSIS)
                .map(|i| Fact {
                    jargon: pairs[i],
                    object: OBJECTS[i % OBJECTS.len()],
                    year: YEARS[(i / OBJECTS.len()) % YEARS.len()],
                    value: format!("{:.1}", rng.random_range(1.0..200.0)),
                })
                .collect();

            let fact_paragraph = |f: &Fact, rng: &mut ChaCha8Rng| {
                let filler = FILLERS.choose(rng).expect("non-empty");
                format!("The {} is {}. {filler}", f.jargon_phrase(), f.value)
            };

            let half = FACTS_PER_ANALYSIS / 2;
            let mut first = vec![format!("Introduction. {abstract_text}")];
            for f in &facts[..half] {
                first.push(fact_paragraph(f, &mut rng));
            }
            let mut second: Vec<String> = facts[half..].iter().map(|f| fact_paragraph(f, &mut rng)).collect();
            let summarized = rng.random_range(0..FACTS_PER_ANALYSIS);
            let s = &facts[summarized];
            second.push(format!(
                "Summary. In conclusion the {} was set to {}.",
                s.jargon_phrase(),
                s.value
            ));

            let doc_a = format!("{analysis_id}-AN-a");
            let doc_b = format!("{analysis_id}-AN-b");
            for (doc_id, paragraphs) in [(&doc_a, &first), (&doc_b, &second)] {
                records.push(IngestRecord::Document(Document {
                    doc_id: doc_id.clone(),
                    analysis_id: analysis_id.to_string(),
                    body_text: paragraphs.join("\n\n"),
                    version: 1,
                }));
            }

            let chunk_of = |i: usize| {
                if i < half {
                    Chunk::make_id(&doc_a, i + 1)
                } else {
                    Chunk::make_id(&doc_b, i - half)
                }
            };
            let summary_chunk = Chunk::make_id(&doc_b, FACTS_PER_ANALYSIS - half);

            // The summarized fact is always queried so some queries carry
            // two relevant chunks.
            let mut picks = vec![summarized];
            let mut others: Vec<usize> = (0..FACTS_PER_ANALYSIS).filter(|&i| i != summarized).collect();
            others.shuffle(&mut rng);
            picks.extend(others.into_iter().take(2 * QUERIES_PER_ANALYSIS_PER_SET - 1));

            for (q, &fact_idx) in picks.iter().enumerate() {
                let f = &facts[fact_idx];
                let mut relevant = BTreeSet::from([chunk_of(fact_idx)]);
                if fact_idx == summarized {
                    relevant.insert(summary_chunk.clone());
                }
                // Each fact is asked both ways; the split keeps the sets disjoint
                // in wording but equal in size.
                let (label, text) = if q % 2 == 0 {
                    (SetLabel::Set1, format!("What is the {}?", f.jargon_phrase()))
                } else {
                    (SetLabel::Set2, format!("What is the {}?", f.paraphrase()))
                };
                gold.push(GoldQuery {
                    query_id: format!("q{:02}-{q}", a_idx + 1),
                    analysis_id: analysis_id.to_string(),
                    query_text: text,
                    relevant_chunk_ids: relevant.clone(),
                    set_label: label,
                });
                let (other_label, other_text) = match label {
                    SetLabel::Set1 => (SetLabel::Set2, format!("What is the {}?", f.paraphrase())),
                    SetLabel::Set2 => (SetLabel::Set1, format!("What is the {}?", f.jargon_phrase())),
                };
                gold.push(GoldQuery {
                    query_id: format!("q{:02}-{q}b", a_idx + 1),
                    analysis_id: analysis_id.to_string(),
                    query_text: other_text,
                    relevant_chunk_ids: relevant,
                    set_label: other_label,
                });
            }
        }

        let synonyms = CONCEPTS
            .iter()
            .map(|(jargon, para)| (para.to_string(), jargon.to_string()))
            .chain(TOPIC_SYNONYMS.iter().map(|(s, c)| (s.to_string(), c.to_string())))
            .collect();

        Self {
            records,
            gold,
            synonyms,
        }
    }

    pub fn synonym_table(&self) -> SynonymTable {
        let mut table = SynonymTable::new();
        for (s, c) in &self.synonyms {
            table.insert(s, c);
        }
        table
    }

    pub fn store(&self) -> Result<CorpusStore, CorpusError> {
        let mut store = CorpusStore::new();
        let mut summary = IngestSummary::default();
        for r in &self.records {
            apply_record(&mut store, r.clone(), &mut summary)?;
        }
        Ok(store)
    }

    /// Stub models sharing this fixture's synonym table.
    pub fn stub_models(&self, dimension: usize, seed: u64) -> Models {
        let synonyms = Arc::new(self.synonym_table());
        Models {
            embedder: Arc::new(StubEmbedder::new(dimension, seed, synonyms.clone())),
            reranker: Arc::new(StubReranker::new(synonyms)),
            generator: Arc::new(StubGenerator),
        }
    }

    /// In-memory engine over the fixture corpus with stub models.
    pub fn stub_engine(&self, config: PipelineConfig) -> Result<Engine, FixtureError> {
        let store = self.store()?;
        let models = self.stub_models(DEFAULT_DIMENSION, 0);
        let indexes = TieredIndexSet::build(&store, models.embedder.as_ref())?;
        Ok(Engine::new(store, indexes, models, config)?)
    }

    pub fn synonym_tsv(&self) -> String {
        let mut out = String::from("# surface form\tcanonical form\n");
        for (s, c) in &self.synonyms {
            out.push_str(&format!("{s}\t{c}\n"));
        }
        out
    }

    pub fn write_to(&self, dir: &Path) -> Result<(), FixtureError> {
        std::fs::create_dir_all(dir).map_err(CorpusError::from)?;
        write_ingest_records(&dir.join(CORPUS_FILE), &self.records)?;
        write_gold(&dir.join(GOLD_FILE), &self.gold)?;
        std::fs::write(dir.join(SYNONYM_FILE), self.synonym_tsv()).map_err(CorpusError::from)?;
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum FixtureError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}
