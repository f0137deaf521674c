use lakn::attribution::{AttributionScores, Stage};
use lakn::uncertainty::{
    mean_var, normalize_across, select, stable_sum, ual, uaq, NormalizationMode, UncertaintyParams,
};
use proptest::prelude::*;

fn scores(lang: &str, p: usize, m: Vec<Vec<f64>>) -> AttributionScores {
    AttributionScores {
        fact_id: "f".into(),
        language: Some(lang.into()),
        paraphrase_index: Some(p),
        stage: Stage::Raw,
        steps: 20,
        scores: m,
        degenerate_layers: vec![],
    }
}

fn grid() -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 8), 3)
}

proptest! {
    #[test]
    fn stable_sum_ignores_order(mut xs in prop::collection::vec(-1e6f64..1e6, 1..40), seed in any::<u64>()) {
        let a = stable_sum(&xs);
        let n = xs.len();
        xs.rotate_left((seed as usize) % n);
        xs.reverse();
        prop_assert_eq!(a.to_bits(), stable_sum(&xs).to_bits());
    }

    #[test]
    fn variance_is_non_negative_and_zero_on_constants(xs in prop::collection::vec(-10.0f64..10.0, 1..20), c in -5.0f64..5.0) {
        prop_assert!(mean_var(&xs).1 >= 0.0);
        prop_assert_eq!(mean_var(&vec![c; xs.len()]), (c, 0.0));
    }

    #[test]
    fn selection_is_nested_and_scale_invariant(m in grid(), k in 0.1f64..50.0, t1 in 0.05f64..1.0, t2 in 0.05f64..1.0) {
        let mut laa = scores("L0", 0, m);
        laa.stage = Stage::LanguageAgnostic;
        let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
        let wide = select(&laa, lo).unwrap().id_set();
        let narrow = select(&laa, hi).unwrap().id_set();
        prop_assert!(narrow.is_subset(&wide));
        let mut scaled = laa.clone();
        scaled.scores.iter_mut().flatten().for_each(|x| *x *= k);
        prop_assert_eq!(select(&scaled, lo).unwrap().id_set(), wide);
        prop_assert!(select(&laa, 1.0).unwrap().is_empty());
    }

    #[test]
    fn selected_scores_are_sorted_and_above_threshold(m in grid(), tau in 0.05f64..1.0) {
        let set = select(&scores("L0", 0, m), tau).unwrap();
        prop_assert!(set.neurons.windows(2).all(|w| w[0].score >= w[1].score));
        prop_assert!(set.neurons.iter().all(|n| n.score > set.threshold));
    }

    #[test]
    fn normalization_maps_into_unit_interval(a in grid(), b in grid()) {
        for mode in [NormalizationMode::PerLanguageOverNeurons, NormalizationMode::PerNeuronOverLanguages] {
            let n = normalize_across(&[scores("a", 0, a.clone()), scores("b", 0, b.clone())], mode).unwrap();
            prop_assert!(n.scores.iter().flat_map(|s| s.scores.iter().flatten()).all(|x| (0.0..=1.0).contains(x)));
        }
    }

    #[test]
    fn uaq_without_variance_weight_is_the_scaled_mean(a in grid(), b in grid(), w in 0.1f64..3.0) {
        let params = UncertaintyParams { alpha1: w, alpha2: 0.0, ..Default::default() };
        let s = uaq(&[scores("L0", 0, a.clone()), scores("L0", 1, b.clone())], &params).unwrap();
        for l in 0..3 {
            for i in 0..8 {
                let want = w * (a[l][i] + b[l][i]) / 2.0;
                prop_assert!((s.scores[l][i] - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn variance_penalty_orders_consistent_above_erratic() {
    let params = UncertaintyParams::default();
    // same mean 0.5, one neuron stable and one erratic
    let a = scores("L0", 0, vec![vec![0.5, 0.0]]);
    let b = scores("L0", 1, vec![vec![0.5, 1.0]]);
    let s = uaq(&[a, b], &params).unwrap();
    assert!(s.scores[0][0] > s.scores[0][1]);
    let l = ual(&[scores("a", 0, vec![vec![0.5, 0.0]]), scores("b", 0, vec![vec![0.5, 1.0]])], &params).unwrap();
    assert!(l.scores[0][0] > l.scores[0][1]);
}

#[test]
fn mixed_inputs_are_rejected() {
    let p = UncertaintyParams::default();
    assert!(uaq(&[scores("a", 0, vec![vec![1.0]]), scores("b", 0, vec![vec![1.0]])], &p).is_err());
    assert!(uaq(&[scores("a", 0, vec![vec![1.0]]), scores("a", 1, vec![vec![1.0, 2.0]])], &p).is_err());
    assert!(uaq(&[], &p).is_err());
    let bad = UncertaintyParams { tau: 0.0, ..Default::default() };
    assert!(bad.validate().is_err());
    assert!(select(&scores("a", 0, vec![vec![f64::NAN]]), 0.5).is_err());
}

#[test]
fn flat_languages_are_reported() {
    let n = normalize_across(
        &[scores("a", 0, vec![vec![0.3, 0.3]]), scores("b", 0, vec![vec![0.1, 0.9]])],
        NormalizationMode::PerLanguageOverNeurons,
    )
    .unwrap();
    assert_eq!(n.degenerate_languages, vec![0]);
    assert_eq!(n.scores[1].scores[0], vec![0.0, 1.0]);
}
