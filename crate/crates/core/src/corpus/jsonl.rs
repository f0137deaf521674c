use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::vocab::{Vocab, SLOT, SLOT_TOKEN};
use super::{Fact, Query, QuerySet};
use crate::error::{LaknError, Result};

/// One line of the corpus interchange format.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JsonlRecord {
    pub fact_id: String,
    pub relation: String,
    pub language: String,
    pub query: String,
    pub answer: String,
    pub paraphrase_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject: Option<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct JsonlOptions {
    /// Admit answers spanning several whitespace tokens.
    pub multi_token: bool,
}

pub fn load_jsonl(path: impl AsRef<Path>, opts: JsonlOptions) -> Result<QuerySet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| LaknError::io(path, e))?;
    let set = parse_jsonl(&text, opts)?;
    let stats = set.stats();
    log::info!(
        "loaded {}: {} facts, {} queries, {} relations",
        path.display(),
        stats.n_facts,
        stats.n_queries,
        stats.n_relations
    );
    Ok(set)
}

pub fn parse_jsonl(text: &str, opts: JsonlOptions) -> Result<QuerySet> {
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonlRecord = serde_json::from_str(line).map_err(|e| LaknError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        records.push((i + 1, rec));
    }
    from_records(&records, opts)
}

/// Builds a query set from numbered records. The vocabulary is exactly the
/// set of symbols used by queries and answers.
pub(super) fn from_records(records: &[(usize, JsonlRecord)], opts: JsonlOptions) -> Result<QuerySet> {
    let mut symbols = BTreeSet::new();
    for (line, r) in records {
        let slots = r.query.split_whitespace().filter(|t| *t == SLOT_TOKEN).count();
        if slots != 1 {
            return Err(LaknError::Parse {
                line: *line,
                message: format!("query must contain exactly one {SLOT_TOKEN}, found {slots}"),
            });
        }
        let n_answer = r.answer.split_whitespace().count();
        if n_answer == 0 || (n_answer > 1 && !opts.multi_token) {
            return Err(LaknError::Parse {
                line: *line,
                message: format!("answer `{}` must be a single token", r.answer),
            });
        }
        if r.answer.split_whitespace().any(|t| t == SLOT_TOKEN) {
            return Err(LaknError::Parse {
                line: *line,
                message: "answer contains the placeholder".into(),
            });
        }
        symbols.extend(r.query.split_whitespace());
        symbols.extend(r.answer.split_whitespace());
    }
    let vocab = Vocab::from_symbols(symbols);

    let mut languages: Vec<String> = Vec::new();
    let mut facts: Vec<Fact> = Vec::new();
    let mut fact_index: HashMap<String, usize> = HashMap::new();
    let mut seen = BTreeSet::new();
    let mut queries = Vec::with_capacity(records.len());
    for (line, r) in records {
        if !seen.insert((r.fact_id.clone(), r.language.clone(), r.paraphrase_index)) {
            return Err(LaknError::Integrity(format!(
                "line {line}: duplicate (fact {}, language {}, paraphrase {})",
                r.fact_id, r.language, r.paraphrase_index
            )));
        }
        if !languages.contains(&r.language) {
            languages.push(r.language.clone());
        }
        let fi = *fact_index.entry(r.fact_id.clone()).or_insert_with(|| {
            facts.push(Fact {
                id: r.fact_id.clone(),
                relation: r.relation.clone(),
                subjects: BTreeMap::new(),
                objects: BTreeMap::new(),
            });
            facts.len() - 1
        });
        let fact = &mut facts[fi];
        if fact.relation != r.relation {
            return Err(LaknError::Integrity(format!(
                "line {line}: fact {} has relations {} and {}",
                r.fact_id, fact.relation, r.relation
            )));
        }
        match fact.objects.get(&r.language) {
            Some(o) if *o != r.answer => {
                return Err(LaknError::Integrity(format!(
                    "line {line}: fact {} answers both `{o}` and `{}` in {}",
                    r.fact_id, r.answer, r.language
                )))
            }
            _ => {
                fact.objects.insert(r.language.clone(), r.answer.clone());
            }
        }
        if let Some(s) = &r.subject {
            fact.subjects.insert(r.language.clone(), s.clone());
        }

        let tokens = vocab.encode(&r.query);
        let slot = tokens.iter().position(|&t| t == SLOT).expect("slot counted above");
        let answer_ids = vocab.encode(&r.answer);
        queries.push(Query {
            fact_id: r.fact_id.clone(),
            language: r.language.clone(),
            paraphrase_index: r.paraphrase_index,
            tokens,
            slot,
            answer: answer_ids[0],
            answer_tail: answer_ids[1..].to_vec(),
        });
    }
    Ok(QuerySet {
        vocab,
        languages,
        facts,
        queries,
    })
}

pub fn to_jsonl(set: &QuerySet) -> String {
    let mut out = String::new();
    for q in &set.queries {
        let fact = set.fact(&q.fact_id);
        let mut answer = set.vocab.token(q.answer).to_string();
        for &t in &q.answer_tail {
            answer.push(' ');
            answer.push_str(set.vocab.token(t));
        }
        let rec = JsonlRecord {
            fact_id: q.fact_id.clone(),
            relation: fact.map(|f| f.relation.clone()).unwrap_or_default(),
            language: q.language.clone(),
            query: set.vocab.decode(&q.tokens),
            answer,
            paraphrase_index: q.paraphrase_index,
            subject: fact.and_then(|f| f.subjects.get(&q.language).cloned()),
        };
        out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn write_jsonl(set: &QuerySet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_jsonl(set)).map_err(|e| LaknError::io(path, e))
}
