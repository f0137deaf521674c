use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::jsonl::{from_records, JsonlOptions, JsonlRecord};
use super::vocab::SLOT_TOKEN;
use super::QuerySet;
use crate::error::{LaknError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub n_facts: usize,
    pub n_languages: usize,
    pub n_paraphrases: usize,
    pub n_relations: usize,
    /// Function words available to each language's templates.
    pub words_per_language: usize,
    /// Upper bound on the vocabulary size, specials included.
    pub max_vocab: usize,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            n_facts: 100,
            n_languages: 7,
            n_paraphrases: 3,
            n_relations: 4,
            words_per_language: 8,
            max_vocab: 2048,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn new(n_facts: usize, n_languages: usize, n_paraphrases: usize) -> Self {
        CorpusSpec {
            n_facts,
            n_languages,
            n_paraphrases,
            ..Default::default()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Vocabulary size the generator needs in the worst case.
    pub fn required_vocab(&self) -> usize {
        4 + self.n_facts * (1 + self.n_languages)
            + self.n_languages * (self.n_relations + self.words_per_language)
    }

    fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: &str| {
            Err(LaknError::Config {
                field: format!("corpus.{field}"),
                message: message.into(),
            })
        };
        if self.n_paraphrases < 2 {
            return bad("n_paraphrases", "at least 2 paraphrases are needed");
        }
        if self.n_languages < 2 {
            return bad("n_languages", "at least 2 languages are needed");
        }
        if self.n_relations == 0 {
            return bad("n_relations", "must be positive");
        }
        if self.required_vocab() > self.max_vocab {
            return Err(LaknError::Capacity(format!(
                "{} symbols needed for disjoint language partitions, budget {}",
                self.required_vocab(),
                self.max_vocab
            )));
        }
        // distinct templates per (relation, language) come from distinct
        // one- or two-word function-word choices
        let w = self.words_per_language;
        if w + w * w.saturating_sub(1) / 2 < self.n_paraphrases {
            return Err(LaknError::Capacity(format!(
                "{w} function words cannot form {} distinct templates",
                self.n_paraphrases
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Piece {
    Subject,
    Relation,
    Word(usize),
}

fn language_name(i: usize) -> String {
    format!("L{i}")
}

/// Seeded synthetic corpus. Every language owns its subject tokens,
/// relation words and function words (`L3.w5` renders abstract word 5 in
/// language L3); objects are shared symbols so that one fact has one answer
/// token in every language.
pub fn generate_synthetic(spec: &CorpusSpec) -> Result<QuerySet> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let langs: Vec<String> = (0..spec.n_languages).map(language_name).collect();

    // Paraphrase p of relation r picks the same abstract function words in
    // every language (its translations); each language orders the pieces
    // its own way.
    let mut abstract_words: Vec<Vec<Vec<usize>>> = Vec::with_capacity(spec.n_relations);
    for _ in 0..spec.n_relations {
        let mut chosen: BTreeSet<Vec<usize>> = BTreeSet::new();
        let mut out = Vec::new();
        while out.len() < spec.n_paraphrases {
            let k = if spec.words_per_language < 2 { 1 } else { rng.random_range(1..=2) };
            let mut words: Vec<usize> = (0..spec.words_per_language).collect();
            words.shuffle(&mut rng);
            let mut words = words[..k].to_vec();
            words.sort_unstable();
            if chosen.insert(words.clone()) {
                out.push(words);
            }
        }
        abstract_words.push(out);
    }
    // templates[lang][relation] = T piece sequences, [Y] implied last
    let mut templates = Vec::with_capacity(langs.len());
    for _ in &langs {
        let per_rel: Vec<Vec<Vec<Piece>>> = abstract_words
            .iter()
            .map(|paras| {
                paras
                    .iter()
                    .map(|words| {
                        let mut pieces = vec![Piece::Subject, Piece::Relation];
                        pieces.extend(words.iter().copied().map(Piece::Word));
                        pieces.shuffle(&mut rng);
                        pieces
                    })
                    .collect()
            })
            .collect();
        templates.push(per_rel);
    }

    let mut records = Vec::with_capacity(spec.n_facts * langs.len() * spec.n_paraphrases);
    let mut line = 0;
    for f in 0..spec.n_facts {
        let fact_id = format!("f{f:04}");
        let rel = f % spec.n_relations;
        let object = format!("o{f:04}");
        for (li, lang) in langs.iter().enumerate() {
            let subject = format!("{lang}.s{f:04}");
            for (p, pieces) in templates[li][rel].iter().enumerate() {
                let mut words: Vec<String> = pieces
                    .iter()
                    .map(|piece| match piece {
                        Piece::Subject => subject.clone(),
                        Piece::Relation => format!("{lang}.r{rel}"),
                        Piece::Word(w) => format!("{lang}.w{w}"),
                    })
                    .collect();
                words.push(SLOT_TOKEN.to_string());
                line += 1;
                records.push((
                    line,
                    JsonlRecord {
                        fact_id: fact_id.clone(),
                        relation: format!("r{rel}"),
                        language: lang.clone(),
                        query: words.join(" "),
                        answer: object.clone(),
                        paraphrase_index: p,
                        subject: Some(subject.clone()),
                    },
                ));
            }
        }
    }
    from_records(&records, JsonlOptions::default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::to_jsonl;

    #[test]
    fn counts_for_minimal_spec() {
        let s = generate_synthetic(&CorpusSpec::new(1, 2, 2)).unwrap();
        assert_eq!(s.queries.len(), 4);
        assert_eq!(s.facts.len(), 1);
    }

    #[test]
    fn same_seed_same_bytes() {
        let spec = CorpusSpec::new(10, 3, 3).with_seed(9);
        let a = to_jsonl(&generate_synthetic(&spec).unwrap());
        let b = to_jsonl(&generate_synthetic(&spec).unwrap());
        assert_eq!(a, b);
        let c = to_jsonl(&generate_synthetic(&spec.clone().with_seed(10)).unwrap());
        assert_ne!(a, c);
    }

    #[test]
    fn full_size_corpus_is_consistent() {
        let s = generate_synthetic(&CorpusSpec::new(100, 7, 3)).unwrap();
        assert_eq!(s.queries.len(), 2100);
        s.check_invariants().unwrap();
        for f in &s.facts {
            let groups = s.by_language(&f.id);
            assert_eq!(groups.len(), 7);
            assert!(groups.iter().all(|(_, qs)| qs.len() == 3));
            let objs: BTreeSet<_> = f.objects.values().collect();
            assert_eq!(objs.len(), 1);
        }
    }

    #[test]
    fn languages_use_disjoint_template_words() {
        let s = generate_synthetic(&CorpusSpec::new(8, 3, 3)).unwrap();
        let mut owner = std::collections::HashMap::new();
        for q in &s.queries {
            for &t in &q.tokens[..q.slot] {
                let prev = owner.insert(t, q.language.clone());
                assert!(prev.is_none_or(|l| l == q.language));
            }
        }
    }

    #[test]
    fn undersized_budget_is_capacity_error() {
        let spec = CorpusSpec {
            max_vocab: 50,
            ..CorpusSpec::new(100, 7, 3)
        };
        assert!(matches!(generate_synthetic(&spec), Err(LaknError::Capacity(_))));
    }

    #[test]
    fn single_paraphrase_rejected() {
        assert!(generate_synthetic(&CorpusSpec::new(3, 2, 1)).is_err());
    }
}
