use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::ParamMask;
use super::transformer::{Probe, ToyTransformer};
use crate::corpus::Query;
use crate::error::{LaknError, Result};
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Probability that a query of the language takes part in an epoch;
    /// languages not listed use 1.
    pub language_weights: BTreeMap<String, f64>,
    /// Stop once training accuracy reaches this value.
    pub target_accuracy: Option<f64>,
    /// Accuracy is checked every this many epochs.
    pub eval_every: usize,
    /// Global gradient-norm clip.
    pub clip: Option<f64>,
    /// Label smoothing; keeps answer probabilities away from 1 so that
    /// activation changes can still move them.
    pub label_smoothing: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            lr: 3e-3,
            batch_size: 32,
            seed: 0,
            language_weights: BTreeMap::new(),
            target_accuracy: None,
            eval_every: 5,
            clip: Some(1.0),
            label_smoothing: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub epochs_run: usize,
    pub n_queries: usize,
    pub final_accuracy: f64,
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(model: &ToyTransformer) -> Self {
        let sizes: Vec<usize> = model.params.tensors().iter().map(|t| t.numel()).collect();
        Adam {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    /// Frozen entries are skipped entirely so they stay bit-identical.
    fn update(&mut self, model: &mut ToyTransformer, grads: &[Tensor], lr: f64, mask: Option<&ParamMask>) {
        self.step += 1;
        let c1 = 1.0 - Self::B1.powi(self.step);
        let c2 = 1.0 - Self::B2.powi(self.step);
        for (i, p) in model.params.tensors_mut().into_iter().enumerate() {
            let g = grads[i].data();
            let keep = mask.map(|m| m.tensor(i));
            if keep.is_some_and(|k| !k.iter().any(|&b| b)) {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                if keep.is_some_and(|k| !k[j]) {
                    continue;
                }
                m[j] = Self::B1 * m[j] + (1.0 - Self::B1) * g[j];
                v[j] = Self::B2 * v[j] + (1.0 - Self::B2) * g[j] * g[j];
                *w -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + Self::EPS);
            }
        }
    }
}

/// Trains every parameter on the answers of `queries`.
pub fn train(model: &mut ToyTransformer, queries: &[Query], cfg: &TrainConfig) -> Result<TrainReport> {
    run(model, queries, cfg, None)
}

/// Trains only the scalars the mask marks trainable.
pub fn train_masked(
    model: &mut ToyTransformer,
    queries: &[Query],
    cfg: &TrainConfig,
    mask: &ParamMask,
) -> Result<TrainReport> {
    if !mask.matches(&model.params) {
        return Err(LaknError::Contract("mask does not match the model's parameters".into()));
    }
    if mask.is_empty() {
        return Err(LaknError::Contract("mask leaves nothing trainable".into()));
    }
    run(model, queries, cfg, Some(mask))
}

/// Fraction of queries answered top-1.
pub fn accuracy(model: &ToyTransformer, queries: &[Query]) -> Result<f64> {
    if queries.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0;
    for q in queries {
        if model.top1(q, &[])? == q.answer {
            hits += 1;
        }
    }
    Ok(hits as f64 / queries.len() as f64)
}

fn run(
    model: &mut ToyTransformer,
    queries: &[Query],
    cfg: &TrainConfig,
    mask: Option<&ParamMask>,
) -> Result<TrainReport> {
    if queries.is_empty() {
        return Err(LaknError::Contract("training corpus is empty".into()));
    }
    if queries.iter().any(|q| !q.is_single_token()) {
        return Err(LaknError::Contract("training needs single-token answers".into()));
    }
    if !(0.0..1.0).contains(&cfg.label_smoothing) {
        return Err(LaknError::Config {
            field: "train.label_smoothing".into(),
            message: "must lie in [0, 1)".into(),
        });
    }
    if cfg.batch_size == 0 || !(cfg.lr > 0.0 && cfg.lr.is_finite()) {
        return Err(LaknError::Config {
            field: "train".into(),
            message: "batch_size and lr must be positive".into(),
        });
    }
    let probes: Vec<Probe> = queries.iter().map(|q| model.probe(q)).collect::<Result<_>>()?;
    let mut by_len: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, p) in probes.iter().enumerate() {
        by_len.entry(p.tokens.len()).or_default().push(i);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(model);
    let mut losses = Vec::new();
    let mut epochs_run = 0;
    for epoch in 0..cfg.epochs {
        let mut batches = Vec::new();
        for idx in by_len.values() {
            let mut active: Vec<usize> = idx
                .iter()
                .copied()
                .filter(|&i| {
                    let w = cfg.language_weights.get(&queries[i].language).copied().unwrap_or(1.0);
                    w >= 1.0 || rng.random::<f64>() < w
                })
                .collect();
            active.shuffle(&mut rng);
            batches.extend(active.chunks(cfg.batch_size).map(<[usize]>::to_vec));
        }
        batches.shuffle(&mut rng);

        let mut total = 0.0;
        let mut count = 0;
        for batch in &batches {
            let (loss, grads) = batch_grads(model, &probes, queries, batch, cfg.label_smoothing)
                .map_err(|e| LaknError::Training {
                    epoch,
                    message: e.to_string(),
                })?;
            if !loss.is_finite() {
                return Err(LaknError::Training {
                    epoch,
                    message: format!("loss became {loss}"),
                });
            }
            let grads = clip(grads, cfg.clip);
            adam.update(model, &grads, cfg.lr, mask);
            total += loss * batch.len() as f64;
            count += batch.len();
        }
        let mean = if count == 0 { 0.0 } else { total / count as f64 };
        log::debug!("epoch {epoch}: loss {mean:.5}");
        losses.push(mean);
        epochs_run = epoch + 1;
        if let Some(target) = cfg.target_accuracy {
            if cfg.eval_every > 0 && epochs_run % cfg.eval_every == 0 && accuracy(model, queries)? >= target {
                break;
            }
        }
    }
    let final_accuracy = accuracy(model, queries)?;
    log::info!(
        "trained {epochs_run} epochs on {} queries, accuracy {final_accuracy:.4}",
        queries.len()
    );
    Ok(TrainReport {
        epoch_losses: losses,
        epochs_run,
        n_queries: queries.len(),
        final_accuracy,
    })
}

/// Mean cross-entropy of one equal-length batch and its parameter gradients.
fn batch_grads(
    model: &ToyTransformer,
    probes: &[Probe],
    queries: &[Query],
    batch: &[usize],
    smoothing: f64,
) -> Result<(f64, Vec<Tensor>)> {
    let n = probes[batch[0]].tokens.len();
    let ids: Vec<usize> = batch.iter().flat_map(|&i| probes[i].tokens.iter().copied()).collect();
    let rows: Vec<usize> = batch
        .iter()
        .enumerate()
        .map(|(b, &i)| b * n + probes[i].prediction)
        .collect();
    let targets: Vec<usize> = batch.iter().map(|&i| queries[i].answer).collect();
    let mut t = Tape::new();
    let lv = model.leaves(&mut t, true);
    let (x, _) = model.trunk(&mut t, &lv, &ids, n, &mut |_, _, a| Ok(a))?;
    let logits = model.head(&mut t, &lv, x, &rows)?;
    let ce = t.smoothed_cross_entropy(logits, &targets, smoothing)?;
    let loss = t.scale(ce, 1.0 / batch.len() as f64)?;
    t.backward(loss)?;
    let grads = lv
        .all()
        .into_iter()
        .zip(model.params.tensors())
        .map(|(v, w)| t.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(w.shape())))
        .collect();
    Ok((t.value(loss).item(), grads))
}

fn clip(mut grads: Vec<Tensor>, max_norm: Option<f64>) -> Vec<Tensor> {
    if let Some(max) = max_norm {
        let norm = grads
            .iter()
            .flat_map(|g| g.data().iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        if norm > max {
            let s = max / norm;
            for g in &mut grads {
                for x in g.data_mut() {
                    *x *= s;
                }
            }
        }
    }
    grads
}
