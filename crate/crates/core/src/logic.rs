//! Logical consistency: a rule-built knowledge graph yields premise–hypothesis
//! pairs whose contradiction probabilities are aggregated by a top-K mean.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grounding::extract_entities;
use crate::lexicon::{Category, CueList, Lexicon};
use crate::providers::{NliScorer, ProviderError};
use crate::scalar::Scalar;
use crate::text::split_sentences;

/// Bumped whenever the edge rules below change.
pub const GRAMMAR_VERSION: u32 = 1;
pub const DEFAULT_TOP_K: usize = 3;

#[derive(Debug, Error)]
pub enum LogicError {
    #[error("top-K must be at least 1")]
    InvalidK,
    #[error("contradiction probability {0} is outside [0, 1]")]
    InvalidProbability(f64),
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    Supports,
    LocatedIn,
    Describes,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphNode {
    pub id: usize,
    pub surface: String,
    pub term: String,
    pub category: Category,
    pub sentence_index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphEdge {
    pub from: usize,
    pub to: usize,
    pub relation: Relation,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeGraph {
    pub grammar_version: u32,
    pub sentences: Vec<String>,
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<GraphEdge>,
}

impl KnowledgeGraph {
    fn nodes_in(&self, sentence: usize) -> impl Iterator<Item = &GraphNode> {
        self.nodes.iter().filter(move |n| n.sentence_index == sentence)
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// Builds the graph sentence by sentence:
///
/// * `supports`: morphology → diagnosis in the same sentence, and from every
///   morphology node of an earlier sentence when the diagnosis sentence
///   contains a cue phrase;
/// * `located_in`: any non-location entity → location in the same sentence;
/// * `describes`: marker → morphology or diagnosis in the same sentence.
pub fn parse_knowledge_graph(report: &str, lexicon: &Lexicon, cues: &CueList) -> KnowledgeGraph {
    let sentences = split_sentences(report);
    let mut graph = KnowledgeGraph {
        grammar_version: GRAMMAR_VERSION,
        sentences: sentences.iter().map(|s| s.text.clone()).collect(),
        ..KnowledgeGraph::default()
    };
    for s in &sentences {
        for e in extract_entities(&s.text, lexicon).entities {
            graph.nodes.push(GraphNode {
                id: graph.nodes.len(),
                surface: e.surface,
                term: e.term,
                category: e.category,
                sentence_index: s.index,
            });
        }
    }

    let mut edges = Vec::new();
    for s in &sentences {
        let here: Vec<&GraphNode> = graph.nodes_in(s.index).collect();
        let cued = cues.matches(&s.text);
        for d in here.iter().filter(|n| n.category == Category::Diagnosis) {
            for m in here.iter().filter(|n| n.category == Category::Morphology) {
                edges.push((m.id, d.id, Relation::Supports));
            }
            if cued {
                for m in graph
                    .nodes
                    .iter()
                    .filter(|n| n.category == Category::Morphology && n.sentence_index < s.index)
                {
                    edges.push((m.id, d.id, Relation::Supports));
                }
            }
        }
        for loc in here.iter().filter(|n| n.category == Category::Location) {
            for e in here.iter().filter(|n| n.category != Category::Location) {
                edges.push((e.id, loc.id, Relation::LocatedIn));
            }
        }
        for mk in here.iter().filter(|n| n.category == Category::Marker) {
            for t in here
                .iter()
                .filter(|n| matches!(n.category, Category::Morphology | Category::Diagnosis))
            {
                edges.push((mk.id, t.id, Relation::Describes));
            }
        }
    }
    edges.sort_by_key(|&(f, t, r)| (f, t, r));
    edges.dedup();
    graph.edges = edges
        .into_iter()
        .map(|(from, to, relation)| GraphEdge { from, to, relation })
        .collect();
    graph
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PremiseHypothesisPair {
    pub premise: String,
    pub hypothesis: String,
    pub premise_sentence: usize,
    pub hypothesis_sentence: usize,
    /// Node ids behind the premise and hypothesis.
    pub source_nodes: (Vec<usize>, Vec<usize>),
}

/// One pair per `supports` edge, plus every diagnosis without an incoming
/// `supports` edge crossed with each morphology-bearing sentence at or before
/// it. Pairs with identical (premise, hypothesis) text are merged.
pub fn extract_pairs(graph: &KnowledgeGraph) -> Vec<PremiseHypothesisPair> {
    let mut raw: Vec<(usize, usize, usize, usize)> = Vec::new(); // (p_sent, h_sent, m_id, d_id)
    for e in graph.edges.iter().filter(|e| e.relation == Relation::Supports) {
        let (m, d) = (&graph.nodes[e.from], &graph.nodes[e.to]);
        raw.push((m.sentence_index, d.sentence_index, m.id, d.id));
    }
    let supported: BTreeSet<usize> = graph
        .edges
        .iter()
        .filter(|e| e.relation == Relation::Supports)
        .map(|e| e.to)
        .collect();
    for d in graph
        .nodes
        .iter()
        .filter(|n| n.category == Category::Diagnosis && !supported.contains(&n.id))
    {
        for m in graph
            .nodes
            .iter()
            .filter(|n| n.category == Category::Morphology && n.sentence_index <= d.sentence_index)
        {
            raw.push((m.sentence_index, d.sentence_index, m.id, d.id));
        }
    }

    let mut pairs: Vec<PremiseHypothesisPair> = Vec::new();
    for (ps, hs, m, d) in raw {
        let (premise, hypothesis) = (&graph.sentences[ps], &graph.sentences[hs]);
        match pairs
            .iter_mut()
            .find(|p| &p.premise == premise && &p.hypothesis == hypothesis)
        {
            Some(p) => {
                if !p.source_nodes.0.contains(&m) {
                    p.source_nodes.0.push(m);
                }
                if !p.source_nodes.1.contains(&d) {
                    p.source_nodes.1.push(d);
                }
            }
            None => pairs.push(PremiseHypothesisPair {
                premise: premise.clone(),
                hypothesis: hypothesis.clone(),
                premise_sentence: ps,
                hypothesis_sentence: hs,
                source_nodes: (vec![m], vec![d]),
            }),
        }
    }
    for p in &mut pairs {
        p.source_nodes.0.sort_unstable();
        p.source_nodes.1.sort_unstable();
    }
    pairs
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogicScore<T> {
    pub score: T,
    pub k_used: usize,
    pub vacuous: bool,
}

/// `1 − mean` of the `min(K, n)` largest probabilities; an empty list is
/// vacuously consistent (score 1, `vacuous` set).
pub fn logic_score<T: Scalar>(probs: &[T], k: usize) -> Result<LogicScore<T>, LogicError> {
    if k == 0 {
        return Err(LogicError::InvalidK);
    }
    if let Some(bad) = probs.iter().find(|p| !(**p >= T::zero() && **p <= T::one())) {
        return Err(LogicError::InvalidProbability(bad.as_f64()));
    }
    if probs.is_empty() {
        return Ok(LogicScore {
            score: T::one(),
            k_used: 0,
            vacuous: true,
        });
    }
    let mut sorted = probs.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("validated finite"));
    let k_used = k.min(sorted.len());
    let mut top = T::zero();
    for p in &sorted[..k_used] {
        top += *p;
    }
    let score = (T::one() - top / T::from_count(k_used)).clamp_to(T::zero(), T::one());
    Ok(LogicScore {
        score,
        k_used,
        vacuous: false,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub premise: String,
    pub hypothesis: String,
    pub premise_sentence: usize,
    pub hypothesis_sentence: usize,
    pub contradiction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogicReport {
    pub score: f64,
    pub k: usize,
    pub k_used: usize,
    pub vacuous: bool,
    pub graph: KnowledgeGraph,
    /// In extraction order.
    pub pairs: Vec<ScoredPair>,
}

/// Graph → pairs → NLI → top-K aggregation for one report.
pub fn evaluate_logic(
    report: &str,
    lexicon: &Lexicon,
    cues: &CueList,
    nli: &dyn NliScorer,
    k: usize,
) -> Result<LogicReport, LogicError> {
    if k == 0 {
        return Err(LogicError::InvalidK);
    }
    let graph = parse_knowledge_graph(report, lexicon, cues);
    let pairs = extract_pairs(&graph);
    let queries: Vec<(&str, &str)> = pairs
        .iter()
        .map(|p| (p.premise.as_str(), p.hypothesis.as_str()))
        .collect();
    let probs: Vec<f64> = nli.contradictions(&queries)?.into_iter().map(|p| p.value()).collect();
    let agg = logic_score(&probs, k)?;
    let pairs = pairs
        .into_iter()
        .zip(&probs)
        .map(|(p, &c)| ScoredPair {
            premise: p.premise,
            hypothesis: p.hypothesis,
            premise_sentence: p.premise_sentence,
            hypothesis_sentence: p.hypothesis_sentence,
            contradiction: c,
        })
        .collect();
    Ok(LogicReport {
        score: agg.score,
        k,
        k_used: agg.k_used,
        vacuous: agg.vacuous,
        graph,
        pairs,
    })
}
