//! Multilingual cloze corpora: facts, paraphrased queries per language, a
//! seeded synthetic generator and the JSONL interchange format.
//!
//! A query is a token sequence holding exactly one answer placeholder
//! `[Y]`. Synthetic languages use disjoint template vocabularies and their
//! own constituent order; the answer slot always closes the sentence so the
//! same query can be probed auto-regressively.

mod generate;
mod jsonl;
pub mod vocab;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

pub use generate::{generate_synthetic, CorpusSpec};
pub use jsonl::{load_jsonl, parse_jsonl, to_jsonl, write_jsonl, JsonlOptions, JsonlRecord};
pub use vocab::Vocab;

use crate::error::{LaknError, Result};
use crate::model::ToyTransformer;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fact {
    pub id: String,
    pub relation: String,
    /// Subject surface form per language, when known.
    pub subjects: BTreeMap<String, String>,
    /// Object surface form per language.
    pub objects: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub fact_id: String,
    pub language: String,
    pub paraphrase_index: usize,
    /// Full sentence; `tokens[slot]` is the placeholder.
    pub tokens: Vec<usize>,
    pub slot: usize,
    pub answer: usize,
    /// Further answer tokens; empty unless multi-token answers were admitted.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub answer_tail: Vec<usize>,
}

impl Query {
    pub fn is_single_token(&self) -> bool {
        self.answer_tail.is_empty()
    }

    /// Same query asking for a different answer token.
    pub fn with_answer(&self, answer: usize) -> Query {
        Query {
            answer,
            answer_tail: Vec::new(),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub n_facts: usize,
    pub n_queries: usize,
    pub n_relations: usize,
    pub queries_per_language: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuerySet {
    pub vocab: Vocab,
    pub languages: Vec<String>,
    pub facts: Vec<Fact>,
    pub queries: Vec<Query>,
}

impl QuerySet {
    pub fn empty() -> Self {
        QuerySet {
            vocab: Vocab::from_symbols(std::iter::empty()),
            languages: Vec::new(),
            facts: Vec::new(),
            queries: Vec::new(),
        }
    }

    pub fn stats(&self) -> CorpusStats {
        let relations: BTreeSet<&str> = self.facts.iter().map(|f| f.relation.as_str()).collect();
        let mut per_lang = BTreeMap::new();
        for q in &self.queries {
            *per_lang.entry(q.language.clone()).or_insert(0) += 1;
        }
        CorpusStats {
            n_facts: self.facts.len(),
            n_queries: self.queries.len(),
            n_relations: relations.len(),
            queries_per_language: per_lang,
        }
    }

    pub fn fact(&self, id: &str) -> Option<&Fact> {
        self.facts.iter().find(|f| f.id == id)
    }

    pub fn queries_of<'s>(&'s self, fact_id: &'s str) -> impl Iterator<Item = &'s Query> + 's {
        self.queries.iter().filter(move |q| q.fact_id == fact_id)
    }

    /// Queries of one fact grouped by language, in `self.languages` order,
    /// each group sorted by paraphrase index. Languages without queries are
    /// skipped.
    pub fn by_language(&self, fact_id: &str) -> Vec<(String, Vec<Query>)> {
        let mut groups: BTreeMap<&str, Vec<Query>> = BTreeMap::new();
        for q in self.queries_of(fact_id) {
            groups.entry(q.language.as_str()).or_default().push(q.clone());
        }
        self.languages
            .iter()
            .filter_map(|l| {
                groups.remove(l.as_str()).map(|mut qs| {
                    qs.sort_by_key(|q| q.paraphrase_index);
                    (l.clone(), qs)
                })
            })
            .collect()
    }

    /// Sub-corpus restricted to the given facts (same vocabulary).
    pub fn restrict(&self, fact_ids: &[String]) -> QuerySet {
        let keep: BTreeSet<&str> = fact_ids.iter().map(String::as_str).collect();
        QuerySet {
            vocab: self.vocab.clone(),
            languages: self.languages.clone(),
            facts: self
                .facts
                .iter()
                .filter(|f| keep.contains(f.id.as_str()))
                .cloned()
                .collect(),
            queries: self
                .queries
                .iter()
                .filter(|q| keep.contains(q.fact_id.as_str()))
                .cloned()
                .collect(),
        }
    }

    pub fn with_queries(&self, queries: Vec<Query>) -> QuerySet {
        let keep: BTreeSet<&str> = queries.iter().map(|q| q.fact_id.as_str()).collect();
        QuerySet {
            vocab: self.vocab.clone(),
            languages: self.languages.clone(),
            facts: self
                .facts
                .iter()
                .filter(|f| keep.contains(f.id.as_str()))
                .cloned()
                .collect(),
            queries,
        }
    }

    pub fn fact_ids(&self) -> Vec<String> {
        self.facts.iter().map(|f| f.id.clone()).collect()
    }

    /// Object token id of a fact in `language`.
    pub fn object_id(&self, fact_id: &str, language: &str) -> Option<usize> {
        self.fact(fact_id)
            .and_then(|f| f.objects.get(language))
            .and_then(|o| self.vocab.id(o))
    }

    pub fn check_invariants(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for q in &self.queries {
            if q.tokens.iter().filter(|&&t| t == vocab::SLOT).count() != 1
                || q.tokens.get(q.slot) != Some(&vocab::SLOT)
            {
                return Err(LaknError::Integrity(format!(
                    "query of {} / {} needs exactly one answer slot",
                    q.fact_id, q.language
                )));
            }
            if !seen.insert((&q.fact_id, &q.language, q.paraphrase_index)) {
                return Err(LaknError::Integrity(format!(
                    "duplicate query ({}, {}, {})",
                    q.fact_id, q.language, q.paraphrase_index
                )));
            }
            if self.fact(&q.fact_id).is_none() {
                return Err(LaknError::Integrity(format!("query for unknown fact {}", q.fact_id)));
            }
        }
        Ok(())
    }
}

/// Split of a query list by whether the model already answers top-1.
#[derive(Debug, Clone, Default)]
pub struct Partition {
    pub correct: Vec<Query>,
    pub error: Vec<Query>,
}

pub fn partition_by_model(queries: &[Query], model: &ToyTransformer) -> Result<Partition> {
    let mut p = Partition::default();
    for q in queries {
        if model.top1(q, &[])? == q.answer {
            p.correct.push(q.clone());
        } else {
            p.error.push(q.clone());
        }
    }
    Ok(p)
}
