use lakn::attribution::{
    baseline_activations, build_baselines, integrated_gradients, pad_token, saig_attribute, BaselineVector, SaigConfig,
};
use lakn::corpus::{generate_synthetic, CorpusSpec, Query};
use lakn::model::{train, ActivationOverride, Architecture, ModelConfig, ToyTransformer, TrainConfig};
use lakn::uncertainty::attribute_fact;

fn trained() -> (ToyTransformer, lakn::corpus::QuerySet) {
    let corpus = generate_synthetic(&CorpusSpec::new(6, 2, 2)).unwrap();
    let mut m = ToyTransformer::new(ModelConfig {
        n_layers: 2,
        d_model: 32,
        d_ffn: 48,
        seed: 3,
        ..ModelConfig::new(Architecture::AutoRegressive, corpus.vocab.len())
    })
    .unwrap();
    train(&mut m, &corpus.queries, &TrainConfig { epochs: 20, ..Default::default() }).unwrap();
    (m, corpus)
}

fn gap(m: &ToyTransformer, q: &Query, bv: &BaselineVector, steps: usize) -> (f64, f64) {
    let p = m.predict_prob(q, q.answer, &[]).unwrap();
    let p0 = m
        .predict_prob(q, q.answer, &[ActivationOverride::set_vector(bv.layer, bv.values.clone())])
        .unwrap();
    let s: f64 = integrated_gradients(m, q, bv, steps).unwrap().iter().sum();
    ((s - (p - p0)).abs(), (p - p0).abs())
}

#[test]
fn baselines_replace_every_token_but_the_slot() {
    let q = Query {
        fact_id: "f".into(),
        language: "L0".into(),
        paraphrase_index: 0,
        tokens: vec![4, 5, 3, 6],
        slot: 2,
        answer: 9,
        answer_tail: Vec::new(),
    };
    let b = build_baselines(&q, 1);
    assert_eq!(b.len(), 3);
    for s in &b {
        assert_eq!(s.tokens[2], 3);
        assert_eq!(s.tokens[s.replaced_position], 1);
        assert_eq!(s.tokens.iter().filter(|&&t| t != 1).count(), 3);
    }
}

#[test]
fn integrated_gradients_converge_to_the_endpoint_difference() {
    let (m, corpus) = trained();
    for q in corpus.queries.iter().take(4) {
        for b in build_baselines(q, pad_token(&m)).iter().take(2) {
            for bv in baseline_activations(&m, q, b).unwrap() {
                let (g20, _) = gap(&m, q, &bv, 20);
                let (g2000, t) = gap(&m, q, &bv, 2000);
                assert!(g2000 <= g20 + 1e-12);
                assert!(g2000 <= 0.01 * t + 1e-6, "gap {g2000} for difference {t}");
            }
        }
    }
}

#[test]
fn identical_baseline_gives_zero_attribution() {
    let (m, corpus) = trained();
    let q = &corpus.queries[0];
    let probe = m.probe(q).unwrap();
    let acts = m.activations_at(&probe.tokens, probe.prediction).unwrap();
    let bv = BaselineVector {
        layer: 1,
        values: acts[1].clone(),
    };
    assert!(integrated_gradients(&m, q, &bv, 10).unwrap().iter().all(|&x| x == 0.0));
    assert!(integrated_gradients(&m, q, &bv, 0).is_err());
}

#[test]
fn fact_attributions_are_grouped_and_deterministic() {
    let (m, corpus) = trained();
    let cfg = SaigConfig::default();
    let fa = attribute_fact(&m, &corpus, "f0001", &cfg).unwrap();
    assert_eq!(fa.languages.len(), 2);
    for (lang, scores) in &fa.languages {
        assert_eq!(scores.len(), 2);
        for s in scores {
            assert_eq!(s.language.as_deref(), Some(lang.as_str()));
            assert_eq!(s.shape(), (2, 48));
        }
    }
    assert_eq!(attribute_fact(&m, &corpus, "f0001", &cfg).unwrap(), fa);
    assert!(attribute_fact(&m, &corpus, "missing", &cfg).is_err());
    let one = saig_attribute(&m, &corpus.queries[0], &cfg).unwrap();
    assert_eq!(one.normalized.scores.len(), 2);
}
