//! Sequential adapted integrated gradients: one token-replacement baseline
//! per prompt position, an integrated-gradients path per (baseline, layer)
//! through the FFN activations at the read-out row, and normalization of
//! the summed scores.

use serde::{Deserialize, Serialize};

use crate::corpus::Query;
use crate::error::{LaknError, Result};
use crate::model::{Architecture, LayerCache, Probe, ToyTransformer};
use crate::tensor::{Tape, Tensor};

/// A query with one prompt token replaced by the architecture's pad token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BaselineSentence {
    pub fact_id: String,
    pub replaced_position: usize,
    /// Full cloze sequence, answer slot included.
    pub tokens: Vec<usize>,
}

impl BaselineSentence {
    /// The query with its tokens swapped for the baseline's.
    pub fn as_query(&self, q: &Query) -> Query {
        Query {
            tokens: self.tokens.clone(),
            ..q.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineVector {
    pub layer: usize,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Raw,
    PerLanguage,
    LanguageAgnostic,
}

/// Layer × neuron scores of one fact at one pipeline stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionScores {
    pub fact_id: String,
    pub language: Option<String>,
    pub paraphrase_index: Option<usize>,
    pub stage: Stage,
    #[serde(rename = "M")]
    pub steps: usize,
    pub scores: Vec<Vec<f64>>,
    /// Layers whose normalization denominator vanished (scores zeroed).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub degenerate_layers: Vec<usize>,
}

impl AttributionScores {
    pub fn shape(&self) -> (usize, usize) {
        (self.scores.len(), self.scores.first().map_or(0, Vec::len))
    }

    pub fn get(&self, layer: usize, index: usize) -> f64 {
        self.scores[layer][index]
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("scores serialize")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let v: Self = serde_json::from_str(s)?;
        let cols = v.shape().1;
        if v.scores.iter().any(|r| r.len() != cols) {
            return Err(LaknError::Dimension("ragged score matrix".into()));
        }
        Ok(v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SaigConfig {
    /// Riemann steps per path.
    pub steps: usize,
    /// Normalize by the sum over all layers instead of per layer. Per-layer
    /// sums of layers without relevant neurons sit near zero and inflate
    /// their noise to the size of real evidence.
    pub global_normalize: bool,
    /// Use the sum of absolute values as the denominator.
    pub abs_normalize: bool,
}

impl Default for SaigConfig {
    fn default() -> Self {
        SaigConfig {
            steps: 20,
            global_normalize: true,
            abs_normalize: false,
        }
    }
}

/// Denominators below this are treated as zero.
pub const DEGENERATE_EPS: f64 = 1e-12;

pub fn pad_token(model: &ToyTransformer) -> usize {
    model.config.pad_token_id
}

/// One baseline per prompt token; the answer slot is never replaced.
pub fn build_baselines(q: &Query, pad: usize) -> Vec<BaselineSentence> {
    (0..q.tokens.len())
        .filter(|&i| i != q.slot)
        .map(|i| {
            let mut tokens = q.tokens.clone();
            tokens[i] = pad;
            BaselineSentence {
                fact_id: q.fact_id.clone(),
                replaced_position: i,
                tokens,
            }
        })
        .collect()
}

/// FFN activations at the read-out row under the baseline, for every layer.
pub fn baseline_activations(
    model: &ToyTransformer,
    q: &Query,
    baseline: &BaselineSentence,
) -> Result<Vec<BaselineVector>> {
    let probe = model.probe(&baseline.as_query(q))?;
    Ok(model
        .activations_at(&probe.tokens, probe.prediction)?
        .into_iter()
        .enumerate()
        .map(|(layer, values)| BaselineVector { layer, values })
        .collect())
}

/// Clean per-layer state of a query, reused by every path through it.
pub struct QueryState {
    probe: Probe,
    cache: Vec<LayerCache>,
    answer: usize,
}

impl QueryState {
    pub fn new(model: &ToyTransformer, q: &Query) -> Result<Self> {
        let probe = model.probe(q)?;
        let cache = model.cache(&probe.tokens)?;
        Ok(QueryState {
            probe,
            cache,
            answer: q.answer,
        })
    }

    /// Activation vector of `layer` at the read-out row.
    pub fn activation(&self, layer: usize) -> &[f64] {
        self.cache[layer].act.row(self.probe.prediction)
    }
}

/// Integrated gradients of P(answer) along the straight line from the
/// baseline vector to the query's own layer activations, right Riemann sum
/// with `steps` points.
pub fn integrated_gradients(
    model: &ToyTransformer,
    q: &Query,
    baseline: &BaselineVector,
    steps: usize,
) -> Result<Vec<f64>> {
    let state = QueryState::new(model, q)?;
    ig_from_state(model, &state, baseline, steps)
}

pub fn ig_from_state(
    model: &ToyTransformer,
    state: &QueryState,
    baseline: &BaselineVector,
    steps: usize,
) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(LaknError::Contract("integrated gradients need at least one step".into()));
    }
    let l = baseline.layer;
    if l >= model.config.n_layers {
        return Err(LaknError::Index(format!("layer {l} >= {}", model.config.n_layers)));
    }
    let f = model.config.d_ffn;
    if baseline.values.len() != f {
        return Err(LaknError::Dimension(format!(
            "baseline of length {} for {f} neurons",
            baseline.values.len()
        )));
    }
    let actual = state.activation(l);
    let delta: Vec<f64> = actual.iter().zip(&baseline.values).map(|(a, b)| a - b).collect();
    if delta.iter().all(|&d| d == 0.0) {
        return Ok(vec![0.0; f]);
    }
    let mut points = Vec::with_capacity(steps * f);
    for k in 1..=steps {
        let a = k as f64 / steps as f64;
        points.extend(baseline.values.iter().zip(&delta).map(|(b, d)| b + a * d));
    }
    let grads = path_gradients(model, state, l, Tensor::new(vec![steps, f], points)?)?;
    let mut out = vec![0.0; f];
    for row in grads.data().chunks_exact(f) {
        for (o, g) in out.iter_mut().zip(row) {
            *o += g;
        }
    }
    for (o, d) in out.iter_mut().zip(&delta) {
        *o *= d / steps as f64;
    }
    Ok(out)
}

/// Gradient of P(answer) with respect to each row of `points`, each row
/// standing in for the layer-`l` activations at the read-out row.
fn path_gradients(model: &ToyTransformer, state: &QueryState, l: usize, points: Tensor) -> Result<Tensor> {
    path_gradients_with(model, state, l, points, true)
}

fn path_gradients_with(
    model: &ToyTransformer,
    state: &QueryState,
    l: usize,
    points: Tensor,
    fast: bool,
) -> Result<Tensor> {
    let m = points.rows();
    let pred = state.probe.prediction;
    let n = state.probe.tokens.len();
    let c = &state.cache[l];
    let mut t = Tape::new();
    let lv = model.leaves(&mut t, false);
    let x = t.leaf(points, true);
    let (out, rows) = if model.config.architecture == Architecture::AutoRegressive && pred + 1 == n && fast {
        let mut mid = Vec::with_capacity(m * c.resid_mid.cols());
        for _ in 0..m {
            mid.extend_from_slice(c.resid_mid.row(pred));
        }
        let mid = t.leaf(Tensor::new(vec![m, c.resid_mid.cols()], mid)?, false);
        let out = model.resume_last(&mut t, &lv, l, mid, x, &state.cache)?;
        (out, (0..m).collect::<Vec<_>>())
    } else {
        let mid = t.leaf(tile(&c.resid_mid, m)?, false);
        let act = t.leaf(tile(&c.act, m)?, false);
        let rows: Vec<usize> = (0..m).map(|b| b * n + pred).collect();
        let act = t.replace_rows(act, x, &rows)?;
        let out = model.resume_full(&mut t, &lv, l, mid, act, n)?;
        (out, rows)
    };
    let logits = model.head(&mut t, &lv, out, &rows)?;
    let p = t.softmax_prob(logits, &vec![state.answer; m])?;
    let total = t.sum(p)?;
    t.backward(total)?;
    Ok(t.grad(x).cloned().unwrap_or_else(|| Tensor::zeros(&[m, model.config.d_ffn])))
}

fn tile(a: &Tensor, times: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(a.data().len() * times);
    for _ in 0..times {
        data.extend_from_slice(a.data());
    }
    Tensor::new(vec![a.rows() * times, a.cols()], data)
}

/// Per-query SAIG output: summed raw scores and their normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct Saig {
    pub raw: AttributionScores,
    pub normalized: AttributionScores,
}

/// Sums IG over every baseline for every layer, then normalizes.
pub fn saig_attribute(model: &ToyTransformer, q: &Query, cfg: &SaigConfig) -> Result<Saig> {
    let state = QueryState::new(model, q)?;
    let (nl, f) = (model.config.n_layers, model.config.d_ffn);
    let mut raw = vec![vec![0.0; f]; nl];
    let clean = state.probe.tokens.clone();
    let mut seen: Vec<Vec<usize>> = Vec::new();
    let mut repeats: Vec<usize> = Vec::new();
    let mut vectors: Vec<Vec<BaselineVector>> = Vec::new();
    for b in build_baselines(q, pad_token(model)) {
        let probe = model.probe(&b.as_query(q))?;
        if probe.tokens == clean {
            continue; // zero path
        }
        // identical baseline inputs give identical paths
        if let Some(i) = seen.iter().position(|s| *s == probe.tokens) {
            repeats[i] += 1;
            continue;
        }
        seen.push(probe.tokens.clone());
        repeats.push(1);
        vectors.push(baseline_activations(model, q, &b)?);
    }
    for (vs, &times) in vectors.iter().zip(&repeats) {
        for v in vs {
            let s = ig_from_state(model, &state, v, cfg.steps)?;
            for (r, x) in raw[v.layer].iter_mut().zip(&s) {
                *r += times as f64 * x;
            }
        }
    }
    let raw = AttributionScores {
        fact_id: q.fact_id.clone(),
        language: Some(q.language.clone()),
        paraphrase_index: Some(q.paraphrase_index),
        stage: Stage::Raw,
        steps: cfg.steps,
        scores: raw,
        degenerate_layers: Vec::new(),
    };
    let normalized = normalize_layers(&raw, cfg);
    Ok(Saig { raw, normalized })
}

/// Divides scores by their per-layer (or global) sum.
pub fn normalize_layers(raw: &AttributionScores, cfg: &SaigConfig) -> AttributionScores {
    let den = |xs: &mut dyn Iterator<Item = f64>| -> f64 {
        if cfg.abs_normalize {
            xs.map(f64::abs).sum()
        } else {
            xs.sum()
        }
    };
    let mut out = raw.clone();
    out.degenerate_layers.clear();
    if cfg.global_normalize {
        let d = den(&mut raw.scores.iter().flatten().copied());
        for (l, row) in out.scores.iter_mut().enumerate() {
            if d.abs() < DEGENERATE_EPS {
                row.iter_mut().for_each(|x| *x = 0.0);
                out.degenerate_layers.push(l);
            } else {
                row.iter_mut().for_each(|x| *x /= d);
            }
        }
    } else {
        for (l, row) in out.scores.iter_mut().enumerate() {
            let d = den(&mut row.iter().copied());
            if d.abs() < DEGENERATE_EPS {
                row.iter_mut().for_each(|x| *x = 0.0);
                out.degenerate_layers.push(l);
            } else {
                row.iter_mut().for_each(|x| *x /= d);
            }
        }
    }
    if !out.degenerate_layers.is_empty() {
        log::warn!(
            "degenerate attribution for {} ({:?}, paraphrase {:?}) in layers {:?}",
            raw.fact_id,
            raw.language,
            raw.paraphrase_index,
            out.degenerate_layers
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::vocab::{EOS, MASK};
    use crate::model::ModelConfig;

    fn query(tokens: Vec<usize>, slot: usize) -> Query {
        Query {
            fact_id: "f".into(),
            language: "L0".into(),
            paraphrase_index: 0,
            tokens,
            slot,
            answer: 9,
            answer_tail: vec![],
        }
    }

    #[test]
    fn baselines_skip_the_slot() {
        let q = query(vec![5, 6, 3, 7], 2);
        let bs = build_baselines(&q, EOS);
        assert_eq!(bs.len(), 3);
        for b in &bs {
            let diff = b.tokens.iter().zip(&q.tokens).filter(|(a, c)| a != c).count();
            assert_eq!(diff, 1);
            assert_eq!(b.tokens[b.replaced_position], EOS);
            assert_eq!(b.tokens[2], 3);
        }
        assert!(build_baselines(&query(vec![3], 0), MASK).is_empty());
    }

    #[test]
    fn both_paths_agree() {
        // the prefix fast path and the tiled path compute the same gradients
        for arch in [Architecture::AutoRegressive, Architecture::AutoEncoding] {
            let m = ToyTransformer::new(ModelConfig::new(arch, 20)).unwrap();
            let q = query(vec![5, 6, 7, 3], 3);
            let state = QueryState::new(&m, &q).unwrap();
            let pts = Tensor::new(vec![2, 128], (0..256).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
            let g = path_gradients(&m, &state, 1, pts.clone()).unwrap();
            let tiled = path_gradients_with(&m, &state, 1, pts.clone(), false).unwrap();
            assert_eq!(g, tiled);
            // reference: one activation-gradient call per point
            for r in 0..2 {
                let ov = crate::model::ActivationOverride::set_vector(1, pts.row(r).to_vec());
                let (_, grads) = prob_grads_with(&m, &q, &[ov]);
                for (a, b) in g.row(r).iter().zip(&grads[0]) {
                    assert!((a - b).abs() < 1e-12, "{arch:?}: {a} vs {b}");
                }
            }
        }
    }

    fn prob_grads_with(
        m: &ToyTransformer,
        q: &Query,
        ov: &[crate::model::ActivationOverride],
    ) -> (f64, Vec<Vec<f64>>) {
        let probe = m.probe(q).unwrap();
        let n = probe.tokens.len();
        let pred = probe.prediction;
        let mut t = Tape::new();
        let lv = m.leaves(&mut t, false);
        let mut hook = m.override_hook(ov, pred, n).unwrap();
        let mut inserted = Vec::new();
        let (x, _) = m
            .trunk(&mut t, &lv, &probe.tokens, n, &mut |t, l, a| {
                let a = hook(t, l, a)?;
                if l != 1 {
                    return Ok(a);
                }
                let row = Tensor::new(vec![1, t.value(a).cols()], t.value(a).row(pred).to_vec())?;
                let leaf = t.leaf(row, true);
                inserted.push(leaf);
                t.replace_rows(a, leaf, &[pred])
            })
            .unwrap();
        let logits = m.head(&mut t, &lv, x, &[pred]).unwrap();
        let p = t.softmax_prob(logits, &[q.answer]).unwrap();
        let p = t.sum(p).unwrap();
        t.backward(p).unwrap();
        let g = inserted.iter().map(|&v| t.grad(v).unwrap().data().to_vec()).collect();
        (t.value(p).item(), g)
    }

    #[test]
    fn zero_path_and_step_contract() {
        let m = ToyTransformer::new(ModelConfig::new(Architecture::AutoRegressive, 20)).unwrap();
        let q = query(vec![5, 6, 3], 2);
        let state = QueryState::new(&m, &q).unwrap();
        let own = BaselineVector {
            layer: 2,
            values: state.activation(2).to_vec(),
        };
        assert!(ig_from_state(&m, &state, &own, 20).unwrap().iter().all(|&x| x == 0.0));
        assert!(ig_from_state(&m, &state, &own, 0).is_err());
    }

    #[test]
    fn normalization_modes() {
        let raw = AttributionScores {
            fact_id: "f".into(),
            language: None,
            paraphrase_index: None,
            stage: Stage::Raw,
            steps: 1,
            scores: vec![vec![1.0, 3.0], vec![0.0, 0.0], vec![2.0, -1.0]],
            degenerate_layers: vec![],
        };
        let per = normalize_layers(&raw, &SaigConfig { global_normalize: false, ..Default::default() });
        assert_eq!(per.scores[0], vec![0.25, 0.75]);
        assert_eq!(per.scores[2], vec![2.0, -1.0]);
        assert_eq!(per.degenerate_layers, vec![1]);
        let glob = normalize_layers(&raw, &SaigConfig::default());
        assert_eq!(glob.scores[0], vec![0.2, 0.6]);
        let abs = normalize_layers(
            &raw,
            &SaigConfig { global_normalize: false, abs_normalize: true, ..Default::default() },
        );
        assert_eq!(abs.scores[2], vec![2.0 / 3.0, -1.0 / 3.0]);
        let back = AttributionScores::from_json(&per.to_json()).unwrap();
        assert_eq!(back, per);
        assert!(per.to_json().contains("\"M\":1"));
    }
}
