//! Manipulations of a model through its knowledge neurons: activation
//! suppression and enhancement at evaluation time, persistent value-row
//! erasure and update, and fine-tuning restricted to the neurons' weights.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::Query;
use crate::error::{LaknError, Result};
use crate::model::{train_masked, ActivationOverride, NeuronId, ParamMask, ToyTransformer, TrainConfig, TrainReport};
use crate::uncertainty::LaknSet;

pub const DEFAULT_FACTOR: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InterventionKind {
    Suppress,
    Enhance {
        factor: f64,
    },
    Erase {
        #[serde(default)]
        erase_keys_too: bool,
    },
    Update {
        from: usize,
        to: usize,
        lambda1: f64,
        lambda2: f64,
    },
    InjectFinetune(TrainConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionSpec {
    #[serde(flatten)]
    pub kind: InterventionKind,
    pub target: LaknSet,
}

impl InterventionSpec {
    pub fn validate(&self, model: &ToyTransformer) -> Result<()> {
        for n in self.target.ids() {
            model.config.check_neuron(n)?;
        }
        match &self.kind {
            InterventionKind::Enhance { factor } if !factor.is_finite() => {
                Err(LaknError::Contract(format!("enhance factor {factor} is not finite")))
            }
            InterventionKind::Update { lambda1, lambda2, .. } if !(lambda1.is_finite() && lambda2.is_finite()) => {
                Err(LaknError::Contract("update lambdas must be finite".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            InterventionKind::Suppress => "suppress",
            InterventionKind::Enhance { .. } => "enhance",
            InterventionKind::Erase { .. } => "erase",
            InterventionKind::Update { .. } => "update",
            InterventionKind::InjectFinetune(_) => "inject",
        }
    }
}

fn check_all(model: &ToyTransformer, neurons: &[NeuronId]) -> Result<()> {
    neurons.iter().try_for_each(|&n| model.config.check_neuron(n))
}

/// Zeroes each neuron's activation at the prediction position.
pub fn suppress(model: &ToyTransformer, neurons: &[NeuronId]) -> Result<Vec<ActivationOverride>> {
    check_all(model, neurons)?;
    Ok(neurons.iter().map(|&n| ActivationOverride::zero(n)).collect())
}

/// Multiplies each neuron's activation at the prediction position.
pub fn enhance(model: &ToyTransformer, neurons: &[NeuronId], factor: f64) -> Result<Vec<ActivationOverride>> {
    check_all(model, neurons)?;
    if !factor.is_finite() {
        return Err(LaknError::Contract(format!("enhance factor {factor} is not finite")));
    }
    Ok(neurons.iter().map(|&n| ActivationOverride::scale(n, factor)).collect())
}

/// One persisted edit, as written to the edit log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditRecord {
    /// Position of the edit in its log; a logical clock, so that logs of
    /// identical runs are byte-identical.
    pub timestamp: u64,
    pub kind: String,
    pub fact_id: String,
    pub neurons: Vec<NeuronId>,
    pub lambda1: Option<f64>,
    pub lambda2: Option<f64>,
    pub checkpoint_hash_before: String,
    pub checkpoint_hash_after: String,
}

#[derive(Debug, Clone, PartialEq)]
struct Original {
    neuron: NeuronId,
    value_row: Vec<f64>,
    key: Option<(Vec<f64>, f64)>,
}

/// A weight edit together with the weights it overwrote.
#[derive(Debug, Clone, PartialEq)]
pub struct Edit {
    pub record: EditRecord,
    originals: Vec<Original>,
}

impl Edit {
    pub fn neurons(&self) -> &[NeuronId] {
        &self.record.neurons
    }
}

fn snapshot(model: &ToyTransformer, neurons: &[NeuronId], keys: bool) -> Vec<Original> {
    neurons
        .iter()
        .map(|&n| {
            let lp = &model.params.layers[n.layer];
            let key = keys.then(|| {
                let col = (0..lp.w_in.rows()).map(|r| lp.w_in.get(r, n.index)).collect();
                (col, lp.b_in.data()[n.index])
            });
            Original {
                neuron: n,
                value_row: lp.w_out.row(n.index).to_vec(),
                key,
            }
        })
        .collect()
}

fn dedup(set: &LaknSet) -> Vec<NeuronId> {
    set.id_set().into_iter().collect()
}

/// Sets the value row of every member to zero; with `erase_keys_too` the
/// key column and key bias are cleared as well.
pub fn erase_weights(model: &mut ToyTransformer, set: &LaknSet, erase_keys_too: bool) -> Result<Edit> {
    let neurons = dedup(set);
    check_all(model, &neurons)?;
    let before = model.hash();
    let originals = snapshot(model, &neurons, erase_keys_too);
    for &n in &neurons {
        let lp = &mut model.params.layers[n.layer];
        lp.w_out.row_mut(n.index).fill(0.0);
        if erase_keys_too {
            for r in 0..lp.w_in.rows() {
                lp.w_in.set(r, n.index, 0.0);
            }
            lp.b_in.data_mut()[n.index] = 0.0;
        }
    }
    Ok(Edit {
        record: EditRecord {
            timestamp: 0,
            kind: "erase".into(),
            fact_id: set.fact_id.clone(),
            neurons,
            lambda1: None,
            lambda2: None,
            checkpoint_hash_before: before,
            checkpoint_hash_after: model.hash(),
        },
        originals,
    })
}

/// Moves every member's value row from `from` towards `to`:
/// `W_i - lambda1 * E(from) + lambda2 * E(to)`, with `E` the unembedding row.
pub fn update_weights(
    model: &mut ToyTransformer,
    set: &LaknSet,
    from: usize,
    to: usize,
    lambda1: f64,
    lambda2: f64,
) -> Result<Edit> {
    let neurons = dedup(set);
    check_all(model, &neurons)?;
    if !(lambda1.is_finite() && lambda2.is_finite()) {
        return Err(LaknError::Contract("update lambdas must be finite".into()));
    }
    let vocab = model.params.unembed.rows();
    if from >= vocab || to >= vocab {
        return Err(LaknError::Contract(format!("update token outside vocabulary of {vocab}")));
    }
    let (e_from, e_to) = (model.params.unembed.row(from).to_vec(), model.params.unembed.row(to).to_vec());
    if e_from.len() != model.config.d_model {
        return Err(LaknError::Contract(format!(
            "embedding width {} does not match value width {}",
            e_from.len(),
            model.config.d_model
        )));
    }
    let before = model.hash();
    let originals = snapshot(model, &neurons, false);
    for &n in &neurons {
        let row = model.params.layers[n.layer].w_out.row_mut(n.index);
        for ((w, a), b) in row.iter_mut().zip(&e_from).zip(&e_to) {
            // delta first, so cancelling edits add exactly zero
            *w += lambda2 * b - lambda1 * a;
        }
    }
    Ok(Edit {
        record: EditRecord {
            timestamp: 0,
            kind: "update".into(),
            fact_id: set.fact_id.clone(),
            neurons,
            lambda1: Some(lambda1),
            lambda2: Some(lambda2),
            checkpoint_hash_before: before,
            checkpoint_hash_after: model.hash(),
        },
        originals,
    })
}

/// Restores the weights an edit overwrote. The model must not have been
/// edited since, which is checked through the recorded hash.
pub fn rollback(model: &mut ToyTransformer, edit: &Edit) -> Result<()> {
    if model.hash() != edit.record.checkpoint_hash_after {
        return Err(LaknError::Integrity("model changed since the edit; cannot roll back".into()));
    }
    for o in &edit.originals {
        let lp = &mut model.params.layers[o.neuron.layer];
        lp.w_out.row_mut(o.neuron.index).copy_from_slice(&o.value_row);
        if let Some((col, bias)) = &o.key {
            for (r, x) in col.iter().enumerate() {
                lp.w_in.set(r, o.neuron.index, *x);
            }
            lp.b_in.data_mut()[o.neuron.index] = *bias;
        }
    }
    Ok(())
}

/// Trainability mask over the union of the given sets.
pub fn lakn_mask(model: &ToyTransformer, sets: &[LaknSet]) -> Result<ParamMask> {
    let mut all: Vec<NeuronId> = sets.iter().flat_map(LaknSet::ids).collect();
    all.sort();
    all.dedup();
    ParamMask::for_neurons(&model.params, &all)
}

/// Fine-tunes only the parameters the mask marks trainable.
pub fn inject_finetune(
    model: &mut ToyTransformer,
    q_new: &[Query],
    mask: &ParamMask,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    train_masked(model, q_new, cfg, mask)
}

/// Smallest `lambda2` on the grid that makes `to` the top-1 answer of every
/// query. `lambda1` stays fixed when given and follows `lambda2` otherwise.
/// The model is left unchanged.
pub fn calibrate_lambda(
    model: &mut ToyTransformer,
    set: &LaknSet,
    queries: &[Query],
    from: usize,
    to: usize,
    lambda1: Option<f64>,
    grid: &[f64],
) -> Result<Option<f64>> {
    if queries.is_empty() {
        return Err(LaknError::Contract("calibration needs at least one query".into()));
    }
    let mut sorted = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    for &l2 in &sorted {
        let edit = update_weights(model, set, from, to, lambda1.unwrap_or(l2), l2)?;
        let mut flipped = true;
        for q in queries {
            if model.top1(q, &[])? != to {
                flipped = false;
                break;
            }
        }
        rollback(model, &edit)?;
        if flipped {
            return Ok(Some(l2));
        }
    }
    Ok(None)
}

/// Append-only JSONL log of weight edits.
#[derive(Debug, Clone)]
pub struct EditLog {
    path: PathBuf,
    next: u64,
}

impl EditLog {
    /// Opens a log, continuing the numbering of any records already in it.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let next = match std::fs::read_to_string(&path) {
            Ok(s) => s.lines().filter(|l| !l.trim().is_empty()).count() as u64,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => 0,
            Err(e) => return Err(LaknError::io(&path, e)),
        };
        Ok(EditLog { path, next })
    }

    pub fn append(&mut self, record: &EditRecord) -> Result<EditRecord> {
        let mut r = record.clone();
        r.timestamp = self.next;
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| LaknError::io(&self.path, e))?;
        writeln!(f, "{}", serde_json::to_string(&r)?).map_err(|e| LaknError::io(&self.path, e))?;
        self.next += 1;
        Ok(r)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Vec<EditRecord>> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| LaknError::io(path, e))?;
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| LaknError::Parse {
                    line: i + 1,
                    message: e.to_string(),
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Architecture, ModelConfig};
    use crate::uncertainty::ScoredNeuron;

    fn model() -> ToyTransformer {
        let cfg = ModelConfig {
            n_layers: 2,
            d_model: 16,
            d_ffn: 8,
            n_heads: 2,
            ..ModelConfig::new(Architecture::AutoRegressive, 20)
        };
        ToyTransformer::new(cfg).unwrap()
    }

    fn set(ids: &[(usize, usize)]) -> LaknSet {
        LaknSet {
            fact_id: "f".into(),
            threshold: 0.0,
            neurons: ids
                .iter()
                .map(|&(layer, index)| ScoredNeuron { layer, index, score: 1.0 })
                .collect(),
        }
    }

    #[test]
    fn erase_touches_only_target_rows_and_rolls_back() {
        let mut m = model();
        let before = m.clone();
        let e = erase_weights(&mut m, &set(&[(1, 3), (0, 5)]), false).unwrap();
        for l in 0..2 {
            for i in 0..8 {
                let same = m.params.layers[l].w_out.row(i) == before.params.layers[l].w_out.row(i);
                assert_eq!(same, !((l, i) == (1, 3) || (l, i) == (0, 5)));
            }
            assert_eq!(m.params.layers[l].w_in, before.params.layers[l].w_in);
        }
        assert_ne!(e.record.checkpoint_hash_before, e.record.checkpoint_hash_after);
        rollback(&mut m, &e).unwrap();
        assert_eq!(m.to_bytes(), before.to_bytes());
    }

    #[test]
    fn neutral_updates() {
        let mut m = model();
        let bytes = m.to_bytes();
        update_weights(&mut m, &set(&[(0, 1)]), 3, 4, 0.0, 0.0).unwrap();
        assert_eq!(m.to_bytes(), bytes);
        update_weights(&mut m, &set(&[(0, 1)]), 3, 3, 0.7, 0.7).unwrap();
        assert_eq!(m.to_bytes(), bytes);
        assert!(update_weights(&mut m, &set(&[(0, 1)]), 3, 99, 1.0, 1.0).is_err());
    }

    #[test]
    fn rollback_refuses_after_further_edits() {
        let mut m = model();
        let e1 = erase_weights(&mut m, &set(&[(0, 1)]), true).unwrap();
        erase_weights(&mut m, &set(&[(1, 1)]), false).unwrap();
        assert!(rollback(&mut m, &e1).is_err());
    }

    #[test]
    fn log_numbers_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("edits.jsonl");
        let mut m = model();
        let e = erase_weights(&mut m, &set(&[(0, 1)]), false).unwrap();
        let mut log = EditLog::open(&path).unwrap();
        log.append(&e.record).unwrap();
        let mut log = EditLog::open(&path).unwrap();
        log.append(&e.record).unwrap();
        let read = EditLog::read(&path).unwrap();
        assert_eq!(read.iter().map(|r| r.timestamp).collect::<Vec<_>>(), vec![0, 1]);
        assert_eq!(read[0].neurons, vec![NeuronId::new(0, 1)]);
    }
}
