use std::collections::{BTreeMap, BTreeSet};

use lakn::corpus::{generate_synthetic, CorpusSpec};
use lakn::eval::{
    delta_p, jaccard, layer_distribution, locality, locality_against, paraphrase_halves, predictions, recovery,
    reliability, summarize_delta,
};
use lakn::model::{Architecture, ModelConfig, NeuronId, ToyTransformer};
use lakn::uncertainty::{LaknSet, ScoredNeuron};
use proptest::prelude::*;

fn ids() -> impl Strategy<Value = BTreeSet<NeuronId>> {
    prop::collection::btree_set((0usize..3, 0usize..10).prop_map(|(l, i)| NeuronId::new(l, i)), 0..15)
}

fn set(fact: &str, ids: &[(usize, usize)]) -> LaknSet {
    LaknSet {
        fact_id: fact.into(),
        threshold: 0.0,
        neurons: ids
            .iter()
            .enumerate()
            .map(|(k, &(layer, index))| ScoredNeuron { layer, index, score: 10.0 - k as f64 })
            .collect(),
    }
}

proptest! {
    #[test]
    fn jaccard_is_a_bounded_symmetric_similarity(a in ids(), b in ids()) {
        let j = jaccard(&a, &b);
        prop_assert!((0.0..=1.0).contains(&j));
        prop_assert_eq!(j, jaccard(&b, &a));
        prop_assert_eq!(jaccard(&a, &a), 1.0);
        if !a.is_empty() && a.is_disjoint(&b) {
            prop_assert_eq!(j, 0.0);
        }
    }

    #[test]
    fn halves_partition_the_paraphrases(t in 4usize..40) {
        let (a, b) = paraphrase_halves(t).unwrap();
        prop_assert!(a.len().abs_diff(b.len()) <= 1);
        let all: Vec<usize> = a.iter().chain(&b).copied().collect();
        prop_assert_eq!(all, (0..t).collect::<Vec<_>>());
    }

    #[test]
    fn delta_is_relative_and_skips_degenerate_bases(b in 1e-3f64..1.0, a in 0.0f64..1.0) {
        let d = delta_p(b, a).unwrap();
        prop_assert!((d * b + b - a).abs() < 1e-12);
        prop_assert_eq!(delta_p(0.0, a), None);
        let s = summarize_delta(&[(b, a), (0.0, a)]);
        prop_assert_eq!(s.n, 1);
        prop_assert_eq!(s.excluded, 1);
    }
}

#[test]
fn recovery_counts_planted_neurons_in_the_top_k() {
    let truth: BTreeMap<String, Vec<NeuronId>> =
        [("a".to_string(), vec![NeuronId::new(0, 1), NeuronId::new(1, 2)])].into();
    let r = recovery(&[set("a", &[(0, 1), (2, 2), (1, 2)])], &truth, 2).unwrap();
    assert_eq!(r.mean_recall, 0.5);
    assert_eq!(r.mean_precision, 0.5);
    assert!(recovery(&[set("b", &[(0, 1)])], &truth, 2).is_err());
    assert!(recovery(&[], &truth, 0).is_err());
}

#[test]
fn layer_distribution_sums_to_one() {
    let d = layer_distribution(&[set("a", &[(0, 1), (2, 2)]), set("b", &[(2, 3), (2, 4)])], 3).unwrap();
    assert_eq!(d, vec![0.25, 0.0, 0.75]);
    assert!(layer_distribution(&[set("a", &[(3, 0)])], 3).is_err());
    assert!(layer_distribution(&[set("a", &[])], 3).is_err());
}

#[test]
fn unchanged_model_has_full_locality() {
    let corpus = generate_synthetic(&CorpusSpec::new(5, 2, 2)).unwrap();
    let m = ToyTransformer::new(ModelConfig {
        n_layers: 2,
        d_model: 32,
        d_ffn: 32,
        ..ModelConfig::new(Architecture::AutoRegressive, corpus.vocab.len())
    })
    .unwrap();
    assert_eq!(locality(&m, &m, &corpus.queries).unwrap(), 100.0);
    let pre = predictions(&m, &corpus.queries).unwrap();
    assert_eq!(locality_against(&pre, &m, &corpus.queries).unwrap(), 100.0);
    let r = reliability(&m, &corpus.queries).unwrap();
    assert!((0.0..=100.0).contains(&r));
}
