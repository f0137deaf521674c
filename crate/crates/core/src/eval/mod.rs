//! Measurements over models and localization results: probability change
//! rates, edit metrics, accuracy gains, injection scores, layer histograms,
//! stability of localization and recovery of planted neurons.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::Query;
use crate::error::{LaknError, Result};
use crate::intervention::enhance;
use crate::model::{NeuronId, ToyTransformer};
use crate::uncertainty::{matrice_from_scores, select, FactAttributions, LaknSet, UncertaintyParams};

/// Bases at or below this are excluded from probability change rates.
pub const DEGENERATE_BASE: f64 = 1e-300;

/// Relative change `(after - before) / before`; `None` for a degenerate base.
pub fn delta_p(p_before: f64, p_after: f64) -> Option<f64> {
    (p_before > DEGENERATE_BASE).then(|| (p_after - p_before) / p_before)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaSummary {
    pub mean: Option<f64>,
    pub n: usize,
    pub excluded: usize,
}

/// Mean rate over `(before, after)` pairs, skipping degenerate bases.
pub fn summarize_delta(pairs: &[(f64, f64)]) -> DeltaSummary {
    let rates: Vec<f64> = pairs.iter().filter_map(|&(b, a)| delta_p(b, a)).collect();
    DeltaSummary {
        mean: (!rates.is_empty()).then(|| rates.iter().sum::<f64>() / rates.len() as f64),
        n: rates.len(),
        excluded: pairs.len() - rates.len(),
    }
}

fn percent(hits: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        100.0 * hits as f64 / n as f64
    }
}

/// Percent of queries whose top-1 prediction is their `answer`; edit
/// targets are expressed by rewriting the answer.
pub fn reliability(model: &ToyTransformer, queries: &[Query]) -> Result<f64> {
    let mut hits = 0;
    for q in queries {
        if model.top1(q, &[])? == q.answer {
            hits += 1;
        }
    }
    Ok(percent(hits, queries.len()))
}

/// Reliability over held-out paraphrases; absent when there are none.
pub fn generality(model: &ToyTransformer, paraphrases: &[Query]) -> Result<Option<f64>> {
    if paraphrases.is_empty() {
        return Ok(None);
    }
    reliability(model, paraphrases).map(Some)
}

/// Percent of unrelated queries whose prediction is unchanged by an edit.
pub fn locality(pre: &ToyTransformer, edited: &ToyTransformer, unrelated: &[Query]) -> Result<f64> {
    let mut same = 0;
    for q in unrelated {
        if pre.top1(q, &[])? == edited.top1(q, &[])? {
            same += 1;
        }
    }
    Ok(percent(same, unrelated.len()))
}

/// Top-1 prediction of every query.
pub fn predictions(model: &ToyTransformer, queries: &[Query]) -> Result<Vec<usize>> {
    queries.par_iter().map(|q| model.top1(q, &[])).collect()
}

/// [`locality`] against predictions recorded before the edit.
pub fn locality_against(before: &[usize], edited: &ToyTransformer, unrelated: &[Query]) -> Result<f64> {
    if before.len() != unrelated.len() {
        return Err(LaknError::Contract(format!(
            "{} recorded predictions for {} queries",
            before.len(),
            unrelated.len()
        )));
    }
    let after = predictions(edited, unrelated)?;
    let same = before.iter().zip(&after).filter(|(a, b)| a == b).count();
    Ok(percent(same, unrelated.len()))
}

/// Groups queries by language and applies `metric` to each group.
pub fn per_language<F>(queries: &[Query], mut metric: F) -> Result<BTreeMap<String, f64>>
where
    F: FnMut(&[Query]) -> Result<f64>,
{
    let mut groups: BTreeMap<String, Vec<Query>> = BTreeMap::new();
    for q in queries {
        groups.entry(q.language.clone()).or_default().push(q.clone());
    }
    groups.into_iter().map(|(l, qs)| Ok((l, metric(&qs)?))).collect()
}

/// Unweighted mean over languages.
pub fn language_mean(values: &BTreeMap<String, f64>) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.values().sum::<f64>() / values.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainReport {
    pub per_language: BTreeMap<String, f64>,
    pub overall: f64,
    pub n: usize,
}

/// Accuracy on `q_error` once each query's fact neurons are scaled by
/// `factor`. The base accuracy on such a set is zero, so this is the gain.
pub fn accuracy_gain(
    model: &ToyTransformer,
    q_error: &[Query],
    lakns: &BTreeMap<String, LaknSet>,
    factor: f64,
) -> Result<GainReport> {
    let mut correct: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for q in q_error {
        let ids = lakns.get(&q.fact_id).map(LaknSet::ids).unwrap_or_default();
        let ov = enhance(model, &ids, factor)?;
        let e = correct.entry(q.language.clone()).or_default();
        e.1 += 1;
        if model.top1(q, &ov)? == q.answer {
            e.0 += 1;
        }
    }
    let hits: usize = correct.values().map(|c| c.0).sum();
    Ok(GainReport {
        per_language: correct.iter().map(|(l, &(h, n))| (l.clone(), percent(h, n))).collect(),
        overall: percent(hits, q_error.len()),
        n: q_error.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InjectionScores {
    pub acc_new: f64,
    pub acc_old: f64,
    pub avg: f64,
}

pub fn injection_eval(model: &ToyTransformer, q_new: &[Query], q_old: &[Query]) -> Result<InjectionScores> {
    let old: BTreeSet<(&str, &[usize])> = q_old.iter().map(|q| (q.fact_id.as_str(), q.tokens.as_slice())).collect();
    if q_new.iter().any(|q| old.contains(&(q.fact_id.as_str(), q.tokens.as_slice()))) {
        return Err(LaknError::Contract("Q_new and Q_old overlap".into()));
    }
    let acc_new = reliability(model, q_new)?;
    let acc_old = reliability(model, q_old)?;
    Ok(InjectionScores {
        acc_new,
        acc_old,
        avg: (acc_new + acc_old) / 2.0,
    })
}

/// Share of selected neurons in each layer, over all sets together.
pub fn layer_distribution(sets: &[LaknSet], n_layers: usize) -> Result<Vec<f64>> {
    let mut counts = vec![0usize; n_layers];
    for n in sets.iter().flat_map(|s| &s.neurons) {
        *counts.get_mut(n.layer).ok_or_else(|| {
            LaknError::Contract(format!("neuron in layer {} of a {n_layers}-layer model", n.layer))
        })? += 1;
    }
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(LaknError::Contract("layer distribution of empty sets".into()));
    }
    Ok(counts.iter().map(|&c| c as f64 / total as f64).collect())
}

pub fn layer_distribution_csv(proportions: &[f64]) -> String {
    let mut s = String::from("layer,proportion\n");
    for (l, p) in proportions.iter().enumerate() {
        s.push_str(&format!("{l},{p}\n"));
    }
    s
}

/// Jaccard index of two neuron sets; two empty sets count as identical.
pub fn jaccard(a: &BTreeSet<NeuronId>, b: &BTreeSet<NeuronId>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

/// Splits paraphrase positions `0..t` into first and second half.
pub fn paraphrase_halves(t: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    if t < 4 {
        return Err(LaknError::Contract(format!(
            "stability needs at least 4 paraphrases, got {t}"
        )));
    }
    let mid = t / 2;
    Ok(((0..mid).collect(), (mid..t).collect()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stability {
    pub matrice: f64,
    pub single_query: f64,
}

/// Overlap of the sets localized from two disjoint paraphrase halves, for
/// the full pipeline and for one query of the first language.
pub fn stability_jaccard(fa: &FactAttributions, params: &UncertaintyParams) -> Result<Stability> {
    let t = fa.languages.iter().map(|(_, s)| s.len()).min().unwrap_or(0);
    let (h1, h2) = paraphrase_halves(t)?;
    let a = fa.restrict_paraphrases(&h1);
    let b = fa.restrict_paraphrases(&h2);
    let full = jaccard(
        &matrice_from_scores(&a, params)?.lakn.id_set(),
        &matrice_from_scores(&b, params)?.lakn.id_set(),
    );
    let single = jaccard(
        &single_query(&a, params.tau)?.id_set(),
        &single_query(&b, params.tau)?.id_set(),
    );
    Ok(Stability {
        matrice: full,
        single_query: single,
    })
}

/// Selection on the first query of the first language alone.
pub fn single_query(fa: &FactAttributions, tau: f64) -> Result<LaknSet> {
    let first = fa
        .languages
        .first()
        .and_then(|(_, s)| s.first())
        .ok_or_else(|| LaknError::Contract(format!("fact {} has no attributions", fa.fact_id)))?;
    let mut set = select(first, tau)?;
    set.fact_id = fa.fact_id.clone();
    Ok(set)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactRecovery {
    pub fact_id: String,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub k: usize,
    pub facts: Vec<FactRecovery>,
    pub mean_precision: f64,
    pub mean_recall: f64,
}

/// Precision and recall of each set's top `k` against planted neurons.
pub fn recovery(
    sets: &[LaknSet],
    ground_truth: &BTreeMap<String, Vec<NeuronId>>,
    k: usize,
) -> Result<RecoveryReport> {
    if k == 0 {
        return Err(LaknError::Contract("recovery needs k > 0".into()));
    }
    let facts: Vec<FactRecovery> = sets
        .iter()
        .map(|s| {
            let truth: BTreeSet<NeuronId> = ground_truth
                .get(&s.fact_id)
                .ok_or_else(|| LaknError::Contract(format!("fact {} has no planted neurons", s.fact_id)))?
                .iter()
                .copied()
                .collect();
            let hits = s.top_k(k).iter().filter(|n| truth.contains(n)).count();
            Ok(FactRecovery {
                fact_id: s.fact_id.clone(),
                precision: hits as f64 / k as f64,
                recall: if truth.is_empty() { 0.0 } else { hits as f64 / truth.len() as f64 },
            })
        })
        .collect::<Result<_>>()?;
    let n = facts.len().max(1) as f64;
    Ok(RecoveryReport {
        k,
        mean_precision: facts.iter().map(|f| f.precision).sum::<f64>() / n,
        mean_recall: facts.iter().map(|f| f.recall).sum::<f64>() / n,
        facts,
    })
}

/// What a report was computed from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub params: serde_json::Value,
    pub seed: u64,
    pub model_hash: String,
}

impl Fingerprint {
    pub fn new(params: &impl Serialize, seed: u64, model: &ToyTransformer) -> Result<Self> {
        Ok(Fingerprint {
            params: serde_json::to_value(params)?,
            seed,
            model_hash: model.hash(),
        })
    }

    /// Short stable id, used in file names.
    pub fn id(&self) -> String {
        let canon = serde_json::to_string(self).expect("fingerprint serializes");
        hex::encode(Sha256::digest(canon.as_bytes()))[..12].to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub metric: String,
    pub per_language: BTreeMap<String, f64>,
    pub aggregate: f64,
    pub samples: usize,
    pub fingerprint: Fingerprint,
}

impl MetricsReport {
    pub fn new(metric: &str, per_language: BTreeMap<String, f64>, samples: usize, fingerprint: Fingerprint) -> Self {
        MetricsReport {
            metric: metric.to_string(),
            aggregate: language_mean(&per_language),
            per_language,
            samples,
            fingerprint,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("language,value\n");
        for (l, v) in &self.per_language {
            s.push_str(&format!("{l},{v}\n"));
        }
        s.push_str(&format!("average,{}\n", self.aggregate));
        s
    }

    /// Writes `<metric>-<fingerprint id>.json` and `.csv` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| LaknError::io(dir, e))?;
        let stem = format!("{}-{}", self.metric, self.fingerprint.id());
        let json = dir.join(format!("{stem}.json"));
        std::fs::write(&json, self.to_json()).map_err(|e| LaknError::io(&json, e))?;
        let csv = dir.join(format!("{stem}.csv"));
        std::fs::write(&csv, self.to_csv()).map_err(|e| LaknError::io(&csv, e))?;
        Ok(json)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::uncertainty::ScoredNeuron;

    fn set(fact: &str, ids: &[(usize, usize)]) -> LaknSet {
        LaknSet {
            fact_id: fact.into(),
            threshold: 0.0,
            neurons: ids
                .iter()
                .enumerate()
                .map(|(r, &(layer, index))| ScoredNeuron {
                    layer,
                    index,
                    score: 1.0 - r as f64 * 0.1,
                })
                .collect(),
        }
    }

    #[test]
    fn delta_arithmetic() {
        assert_eq!(delta_p(0.5, 0.25), Some(-0.5));
        assert_eq!(delta_p(0.3, 0.3), Some(0.0));
        assert!((delta_p(0.2, 0.5).unwrap() - 1.5).abs() < 1e-12);
        assert_eq!(delta_p(1e-301, 0.5), None);
        let s = summarize_delta(&[(0.5, 0.25), (0.0, 0.1)]);
        assert_eq!((s.mean, s.n, s.excluded), (Some(-0.5), 1, 1));
    }

    #[test]
    fn recovery_extremes() {
        let gt: BTreeMap<String, Vec<NeuronId>> =
            [("f".to_string(), vec![NeuronId::new(0, 1), NeuronId::new(2, 3)])].into();
        let r = recovery(&[set("f", &[(0, 1), (2, 3)])], &gt, 2).unwrap();
        assert_eq!((r.mean_precision, r.mean_recall), (1.0, 1.0));
        let r = recovery(&[set("f", &[(1, 1)])], &gt, 5).unwrap();
        assert_eq!((r.mean_precision, r.mean_recall), (0.0, 0.0));
        assert!(recovery(&[set("g", &[])], &gt, 5).is_err());
    }

    #[test]
    fn histogram_and_jaccard() {
        let h = layer_distribution(&[set("f", &[(0, 1), (0, 2)])], 3).unwrap();
        assert_eq!(h, vec![1.0, 0.0, 0.0]);
        assert!(layer_distribution_csv(&h).starts_with("layer,proportion\n0,1\n"));
        assert!(layer_distribution(&[set("f", &[])], 3).is_err());
        let a = set("f", &[(0, 1)]).id_set();
        assert_eq!(jaccard(&a, &a), 1.0);
        assert_eq!(jaccard(&a, &BTreeSet::new()), 0.0);
        assert!(paraphrase_halves(3).is_err());
        assert_eq!(paraphrase_halves(5).unwrap(), (vec![0, 1], vec![2, 3, 4]));
    }
}
