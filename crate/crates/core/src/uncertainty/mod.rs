//! Aggregation of per-query attributions across paraphrases (UaQ) and
//! languages (UaL), and threshold selection of the resulting neurons.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribution::{saig_attribute, AttributionScores, SaigConfig, Stage};
use crate::corpus::{Query, QuerySet};
use crate::error::{LaknError, Result};
use crate::model::{NeuronId, ToyTransformer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormalizationMode {
    /// Min-max over all neurons of one language.
    #[default]
    PerLanguageOverNeurons,
    /// Min-max over the languages of one neuron.
    PerNeuronOverLanguages,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UncertaintyParams {
    pub alpha1: f64,
    pub alpha2: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub tau: f64,
    pub normalization_mode: NormalizationMode,
    /// Use only the first paraphrase of each language.
    pub disable_uaq: bool,
    /// Select per language and intersect.
    pub disable_ual: bool,
}

impl Default for UncertaintyParams {
    fn default() -> Self {
        UncertaintyParams {
            alpha1: 1.0,
            alpha2: 0.5,
            beta1: 1.0,
            beta2: 0.5,
            tau: 0.2,
            normalization_mode: NormalizationMode::default(),
            disable_uaq: false,
            disable_ual: false,
        }
    }
}

impl UncertaintyParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(LaknError::Config {
                field: "tau".into(),
                message: format!("{} is outside (0, 1]", self.tau),
            });
        }
        for (name, w) in [
            ("alpha1", self.alpha1),
            ("alpha2", self.alpha2),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
        ] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(LaknError::Config {
                    field: name.into(),
                    message: format!("{w} must be finite and non-negative"),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredNeuron {
    pub layer: usize,
    pub index: usize,
    pub score: f64,
}

impl ScoredNeuron {
    pub fn id(&self) -> NeuronId {
        NeuronId::new(self.layer, self.index)
    }
}

/// Selected neurons of one fact, highest score first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaknSet {
    pub fact_id: String,
    pub threshold: f64,
    pub neurons: Vec<ScoredNeuron>,
}

impl LaknSet {
    pub fn len(&self) -> usize {
        self.neurons.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neurons.is_empty()
    }

    pub fn ids(&self) -> Vec<NeuronId> {
        self.neurons.iter().map(ScoredNeuron::id).collect()
    }

    pub fn id_set(&self) -> BTreeSet<NeuronId> {
        self.neurons.iter().map(ScoredNeuron::id).collect()
    }

    pub fn top_k(&self, k: usize) -> Vec<NeuronId> {
        self.neurons.iter().take(k).map(ScoredNeuron::id).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("lakn set serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Sum in a canonical (sorted) order with pairwise reduction, so the
/// result does not depend on input order.
pub fn stable_sum(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    pairwise(&v)
}

fn pairwise(v: &[f64]) -> f64 {
    match v.len() {
        0 => 0.0,
        1 => v[0],
        2 => v[0] + v[1],
        n => pairwise(&v[..n / 2]) + pairwise(&v[n / 2..]),
    }
}

/// Population mean and variance; equal samples give their value and 0.
pub fn mean_var(xs: &[f64]) -> (f64, f64) {
    let first = xs[0];
    if xs.iter().all(|&x| x == first) {
        return (first, 0.0);
    }
    let n = xs.len() as f64;
    let mean = stable_sum(xs) / n;
    let dev: Vec<f64> = xs.iter().map(|x| (x - mean) * (x - mean)).collect();
    (mean, stable_sum(&dev) / n)
}

fn check_same_shape(xs: &[&AttributionScores], what: &str) -> Result<(usize, usize)> {
    let first = xs
        .first()
        .ok_or_else(|| LaknError::Contract(format!("{what} needs at least one score matrix")))?;
    let shape = first.shape();
    for x in xs {
        if x.shape() != shape || x.scores.iter().any(|r| r.len() != shape.1) {
            return Err(LaknError::Contract(format!(
                "{what}: shape {:?} differs from {shape:?}",
                x.shape()
            )));
        }
        if x.fact_id != first.fact_id {
            return Err(LaknError::Contract(format!(
                "{what}: facts {} and {} mixed",
                first.fact_id, x.fact_id
            )));
        }
    }
    Ok(shape)
}

/// `w1·E − w2·√Var` over the inputs, entry by entry.
fn combine(xs: &[&AttributionScores], w1: f64, w2: f64, shape: (usize, usize)) -> Vec<Vec<f64>> {
    let mut buf = vec![0.0; xs.len()];
    (0..shape.0)
        .map(|l| {
            (0..shape.1)
                .map(|i| {
                    for (b, x) in buf.iter_mut().zip(xs) {
                        *b = x.scores[l][i];
                    }
                    let (e, var) = mean_var(&buf);
                    w1 * e - w2 * var.sqrt()
                })
                .collect()
        })
        .collect()
}

/// Uncertainty across the paraphrases of one language.
pub fn uaq(per_query: &[AttributionScores], params: &UncertaintyParams) -> Result<AttributionScores> {
    let refs: Vec<&AttributionScores> = per_query.iter().collect();
    let shape = check_same_shape(&refs, "uaq")?;
    let lang = &per_query[0].language;
    if per_query.iter().any(|s| &s.language != lang) {
        return Err(LaknError::Contract("uaq: languages mixed".into()));
    }
    Ok(AttributionScores {
        fact_id: per_query[0].fact_id.clone(),
        language: lang.clone(),
        paraphrase_index: None,
        stage: Stage::PerLanguage,
        steps: per_query[0].steps,
        scores: combine(&refs, params.alpha1, params.alpha2, shape),
        degenerate_layers: Vec::new(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    pub scores: Vec<AttributionScores>,
    /// Languages whose whole matrix had zero range.
    pub degenerate_languages: Vec<usize>,
    /// Neurons with zero range across languages.
    pub degenerate_neurons: Vec<NeuronId>,
}

/// Min-max scaling into [0, 1]; zero ranges map to 0 and are reported.
pub fn normalize_across(per_language: &[AttributionScores], mode: NormalizationMode) -> Result<Normalized> {
    let refs: Vec<&AttributionScores> = per_language.iter().collect();
    let (nl, nf) = check_same_shape(&refs, "normalize_across")?;
    let mut out: Vec<AttributionScores> = per_language.to_vec();
    let mut degenerate_languages = Vec::new();
    let mut degenerate_neurons = Vec::new();
    let scale = |x: f64, lo: f64, hi: f64| ((x - lo) / (hi - lo)).clamp(0.0, 1.0);
    match mode {
        NormalizationMode::PerLanguageOverNeurons => {
            for (k, s) in out.iter_mut().enumerate() {
                let lo = s.scores.iter().flatten().copied().fold(f64::INFINITY, f64::min);
                let hi = s.scores.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
                let flat = !(hi > lo);
                if flat {
                    degenerate_languages.push(k);
                }
                for x in s.scores.iter_mut().flatten() {
                    *x = if flat { 0.0 } else { scale(*x, lo, hi) };
                }
            }
        }
        NormalizationMode::PerNeuronOverLanguages => {
            for l in 0..nl {
                for i in 0..nf {
                    let vals: Vec<f64> = per_language.iter().map(|s| s.scores[l][i]).collect();
                    let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
                    let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let flat = !(hi > lo);
                    if flat {
                        degenerate_neurons.push(NeuronId::new(l, i));
                    }
                    for s in out.iter_mut() {
                        let x = &mut s.scores[l][i];
                        *x = if flat { 0.0 } else { scale(*x, lo, hi) };
                    }
                }
            }
        }
    }
    Ok(Normalized {
        scores: out,
        degenerate_languages,
        degenerate_neurons,
    })
}

/// Uncertainty across languages: the language-agnostic attribution score.
pub fn ual(normalized: &[AttributionScores], params: &UncertaintyParams) -> Result<AttributionScores> {
    let refs: Vec<&AttributionScores> = normalized.iter().collect();
    let shape = check_same_shape(&refs, "ual")?;
    Ok(AttributionScores {
        fact_id: normalized[0].fact_id.clone(),
        language: None,
        paraphrase_index: None,
        stage: Stage::LanguageAgnostic,
        steps: normalized[0].steps,
        scores: combine(&refs, params.beta1, params.beta2, shape),
        degenerate_layers: Vec::new(),
    })
}

/// Neurons whose score strictly exceeds `tau` times the maximum score.
pub fn select(laa: &AttributionScores, tau: f64) -> Result<LaknSet> {
    if laa.scores.iter().flatten().any(|x| !x.is_finite()) {
        return Err(LaknError::Contract("select: non-finite score".into()));
    }
    let max = laa.scores.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
    let threshold = max * tau;
    if max <= 0.0 {
        log::warn!("all scores of {} are non-positive; nothing selected", laa.fact_id);
    }
    let mut neurons: Vec<ScoredNeuron> = Vec::new();
    for (layer, row) in laa.scores.iter().enumerate() {
        for (index, &score) in row.iter().enumerate() {
            if score > threshold {
                neurons.push(ScoredNeuron { layer, index, score });
            }
        }
    }
    sort_neurons(&mut neurons);
    Ok(LaknSet {
        fact_id: laa.fact_id.clone(),
        threshold,
        neurons,
    })
}

fn sort_neurons(ns: &mut [ScoredNeuron]) {
    ns.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.id().cmp(&b.id())));
}

/// SAIG scores of every query of one fact, grouped by language in corpus
/// language order and by paraphrase within a language.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactAttributions {
    pub fact_id: String,
    pub languages: Vec<(String, Vec<AttributionScores>)>,
}

impl FactAttributions {
    /// Keeps only the listed paraphrase positions of every language.
    pub fn restrict_paraphrases(&self, keep: &[usize]) -> FactAttributions {
        FactAttributions {
            fact_id: self.fact_id.clone(),
            languages: self
                .languages
                .iter()
                .map(|(l, s)| {
                    let kept = s
                        .iter()
                        .filter(|a| a.paraphrase_index.is_some_and(|p| keep.contains(&p)))
                        .cloned()
                        .collect();
                    (l.clone(), kept)
                })
                .filter(|(_, s): &(String, Vec<AttributionScores>)| !s.is_empty())
                .collect(),
        }
    }
}

/// Runs SAIG on every query of `fact_id`.
pub fn attribute_fact(
    model: &ToyTransformer,
    corpus: &QuerySet,
    fact_id: &str,
    saig: &SaigConfig,
) -> Result<FactAttributions> {
    let by_language = corpus.by_language(fact_id);
    if by_language.is_empty() {
        return Err(LaknError::Contract(format!("fact {fact_id} has no queries")));
    }
    attribute_queries(model, fact_id, &by_language, saig)
}

pub fn attribute_queries(
    model: &ToyTransformer,
    fact_id: &str,
    by_language: &[(String, Vec<Query>)],
    saig: &SaigConfig,
) -> Result<FactAttributions> {
    let flat: Vec<(usize, &Query)> = by_language
        .iter()
        .enumerate()
        .flat_map(|(li, (_, qs))| qs.iter().map(move |q| (li, q)))
        .collect();
    let scored: Vec<(usize, AttributionScores)> = flat
        .par_iter()
        .map(|&(li, q)| saig_attribute(model, q, saig).map(|s| (li, s.normalized)))
        .collect::<Result<_>>()?;
    let mut languages: Vec<(String, Vec<AttributionScores>)> =
        by_language.iter().map(|(l, _)| (l.clone(), Vec::new())).collect();
    for (li, s) in scored {
        languages[li].1.push(s);
    }
    Ok(FactAttributions {
        fact_id: fact_id.to_string(),
        languages,
    })
}

/// Intermediate and final products of one pipeline run.
#[derive(Debug, Clone, PartialEq)]
pub struct MatriceOutput {
    pub per_language: Vec<AttributionScores>,
    pub normalized: Normalized,
    /// Absent when UaL is disabled.
    pub laa: Option<AttributionScores>,
    pub lakn: LaknSet,
}

/// Aggregation and selection over precomputed per-query scores.
pub fn matrice_from_scores(fa: &FactAttributions, params: &UncertaintyParams) -> Result<MatriceOutput> {
    params.validate()?;
    if fa.languages.is_empty() || fa.languages.iter().any(|(_, s)| s.is_empty()) {
        return Err(LaknError::Contract(format!(
            "fact {} needs at least one query per language",
            fa.fact_id
        )));
    }
    let per_language: Vec<AttributionScores> = fa
        .languages
        .iter()
        .map(|(_, s)| if params.disable_uaq { uaq(&s[..1], params) } else { uaq(s, params) })
        .collect::<Result<_>>()?;
    let normalized = normalize_across(&per_language, params.normalization_mode)?;
    if params.disable_ual {
        let sets: Vec<LaknSet> = normalized
            .scores
            .iter()
            .map(|s| select(s, params.tau))
            .collect::<Result<_>>()?;
        let common: BTreeSet<NeuronId> = sets
            .iter()
            .map(LaknSet::id_set)
            .reduce(|a, b| a.intersection(&b).copied().collect())
            .unwrap_or_default();
        let mut neurons: Vec<ScoredNeuron> = common
            .iter()
            .map(|n| ScoredNeuron {
                layer: n.layer,
                index: n.index,
                score: normalized
                    .scores
                    .iter()
                    .map(|s| s.scores[n.layer][n.index])
                    .fold(f64::INFINITY, f64::min),
            })
            .collect();
        sort_neurons(&mut neurons);
        let threshold = sets.iter().map(|s| s.threshold).fold(f64::INFINITY, f64::min);
        return Ok(MatriceOutput {
            per_language,
            normalized,
            laa: None,
            lakn: LaknSet {
                fact_id: fa.fact_id.clone(),
                threshold,
                neurons,
            },
        });
    }
    let laa = ual(&normalized.scores, params)?;
    let lakn = select(&laa, params.tau)?;
    Ok(MatriceOutput {
        per_language,
        normalized,
        laa: Some(laa),
        lakn,
    })
}

/// Attribution, aggregation and selection for one fact end to end.
pub fn matrice_pipeline(
    model: &ToyTransformer,
    fact_id: &str,
    by_language: &[(String, Vec<Query>)],
    params: &UncertaintyParams,
    saig: &SaigConfig,
) -> Result<LaknSet> {
    params.validate()?;
    let fa = attribute_queries(model, fact_id, by_language, saig)?;
    Ok(matrice_from_scores(&fa, params)?.lakn)
}

#[cfg(test)]
mod tests {
    use super::*;

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

    #[test]
    fn two_point_cases() {
        let p = UncertaintyParams {
            alpha2: 1.0,
            beta2: 1.0,
            ..Default::default()
        };
        let s = uaq(&[scores("a", 0, vec![vec![0.2]]), scores("a", 1, vec![vec![0.6]])], &p).unwrap();
        assert!((s.scores[0][0] - 0.2).abs() < 1e-12);
        let big = ual(&[scores("a", 0, vec![vec![0.0]]), scores("b", 0, vec![vec![1.0]])], &p).unwrap();
        assert!(big.scores[0][0].abs() < 1e-12);
    }

    #[test]
    fn mixed_inputs_rejected() {
        let p = UncertaintyParams::default();
        assert!(uaq(&[], &p).is_err());
        assert!(uaq(&[scores("a", 0, vec![vec![1.0]]), scores("a", 1, vec![vec![1.0, 2.0]])], &p).is_err());
        assert!(uaq(&[scores("a", 0, vec![vec![1.0]]), scores("b", 1, vec![vec![1.0]])], &p).is_err());
    }

    #[test]
    fn min_max_modes() {
        let a = scores("a", 0, vec![vec![2.0, 4.0, 6.0]]);
        let b = scores("b", 0, vec![vec![1.0, 1.0, 1.0]]);
        let n = normalize_across(&[a.clone(), b.clone()], NormalizationMode::PerLanguageOverNeurons).unwrap();
        assert_eq!(n.scores[0].scores[0], vec![0.0, 0.5, 1.0]);
        assert_eq!(n.scores[1].scores[0], vec![0.0; 3]);
        assert_eq!(n.degenerate_languages, vec![1]);
        let n = normalize_across(&[a, b], NormalizationMode::PerNeuronOverLanguages).unwrap();
        assert_eq!(n.scores[0].scores[0], vec![1.0; 3]);
        assert!(n.degenerate_neurons.is_empty());
    }

    #[test]
    fn selection_examples() {
        let s = scores("a", 0, vec![vec![1.0, 0.5, 0.1]]);
        let set = select(&s, 0.4).unwrap();
        assert_eq!(set.ids(), vec![NeuronId::new(0, 0), NeuronId::new(0, 1)]);
        assert!(select(&s, 1.0).unwrap().is_empty());
        let neg = scores("a", 0, vec![vec![-1.0, -0.5]]);
        assert!(select(&neg, 0.5).unwrap().is_empty());
        let back = LaknSet::from_json(&set.to_json()).unwrap();
        assert_eq!(back, set);
    }

    #[test]
    fn stable_sum_ignores_order() {
        let xs = [0.1, 1e16, -1e16, 0.3, 0.7, 1e-9];
        let mut ys = xs;
        ys.reverse();
        assert_eq!(stable_sum(&xs).to_bits(), stable_sum(&ys).to_bits());
    }
}
