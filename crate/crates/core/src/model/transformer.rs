use serde::{Deserialize, Serialize};

use super::config::{
    ActivationOverride, Architecture, ForwardResult, ModelConfig, OverrideMode, Position,
};
use super::params::Params;
use crate::corpus::vocab::MASK;
use crate::corpus::Query;
use crate::error::{LaknError, Result};
use crate::tensor::{EntryEdit, Tape, Tensor, Var};

/// Pre-LN transformer with learned positions and an untied output embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyTransformer {
    pub config: ModelConfig,
    pub params: Params,
}

/// Model input for one query and the row the answer is read from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Probe {
    pub tokens: Vec<usize>,
    pub prediction: usize,
}

pub(crate) struct LayerLeaves {
    ln1_g: Var,
    ln1_b: Var,
    w_q: Var,
    w_k: Var,
    w_v: Var,
    w_o: Var,
    ln2_g: Var,
    ln2_b: Var,
    w_in: Var,
    b_in: Var,
    w_out: Var,
    b_out: Var,
}

/// Tape handles of every parameter, in [`Params::tensors`] order via `all`.
pub(crate) struct Leaves {
    tok_emb: Var,
    pos_emb: Var,
    layers: Vec<LayerLeaves>,
    lnf_g: Var,
    lnf_b: Var,
    unembed: Var,
}

impl Leaves {
    pub(crate) fn all(&self) -> Vec<Var> {
        let mut v = vec![self.tok_emb, self.pos_emb];
        for l in &self.layers {
            v.extend([
                l.ln1_g, l.ln1_b, l.w_q, l.w_k, l.w_v, l.w_o, l.ln2_g, l.ln2_b, l.w_in, l.b_in,
                l.w_out, l.b_out,
            ]);
        }
        v.extend([self.lnf_g, self.lnf_b, self.unembed]);
        v
    }
}

/// Per-layer values of one clean forward pass over a single sequence.
#[derive(Debug, Clone)]
pub(crate) struct LayerCache {
    pub resid_mid: Tensor,
    pub act: Tensor,
    pub k: Tensor,
    pub v: Tensor,
}

pub(crate) struct LayerTrace {
    resid_mid: Var,
    act: Var,
    k: Var,
    v: Var,
}

pub(crate) type Hook<'h, 'a> = dyn FnMut(&mut Tape<'a>, usize, Var) -> Result<Var> + 'h;

impl ToyTransformer {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = Params::init(&config);
        Ok(ToyTransformer { config, params })
    }

    pub fn from_params(config: ModelConfig, params: Params) -> Result<Self> {
        config.validate()?;
        let reference = Params::init(&ModelConfig {
            vocab_size: config.vocab_size,
            ..config.clone()
        });
        for ((a, b), name) in params.tensors().iter().zip(reference.tensors()).zip(reference.names()) {
            if a.shape() != b.shape() {
                return Err(LaknError::Dimension(format!(
                    "{name}: shape {:?}, config expects {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        if params.tensors().len() != reference.tensors().len() {
            return Err(LaknError::Dimension("parameter count differs from config".into()));
        }
        Ok(ToyTransformer { config, params })
    }

    pub(crate) fn leaves<'a>(&'a self, tape: &mut Tape<'a>, grad: bool) -> Leaves {
        let p = &self.params;
        let mut leaf = |t: &'a Tensor| tape.leaf_ref(t, grad);
        let tok_emb = leaf(&p.tok_emb);
        let pos_emb = leaf(&p.pos_emb);
        let layers = p
            .layers
            .iter()
            .map(|l| LayerLeaves {
                ln1_g: leaf(&l.ln1_g),
                ln1_b: leaf(&l.ln1_b),
                w_q: leaf(&l.w_q),
                w_k: leaf(&l.w_k),
                w_v: leaf(&l.w_v),
                w_o: leaf(&l.w_o),
                ln2_g: leaf(&l.ln2_g),
                ln2_b: leaf(&l.ln2_b),
                w_in: leaf(&l.w_in),
                b_in: leaf(&l.b_in),
                w_out: leaf(&l.w_out),
                b_out: leaf(&l.b_out),
            })
            .collect();
        Leaves {
            tok_emb,
            pos_emb,
            layers,
            lnf_g: leaf(&p.lnf_g),
            lnf_b: leaf(&p.lnf_b),
            unembed: leaf(&p.unembed),
        }
    }

    fn check_tokens(&self, tokens: &[usize], n: usize) -> Result<()> {
        if n == 0 || tokens.is_empty() || !tokens.len().is_multiple_of(n) {
            return Err(LaknError::Contract(format!(
                "{} tokens do not form sequences of length {n}",
                tokens.len()
            )));
        }
        if n > self.config.max_seq_len {
            return Err(LaknError::Contract(format!(
                "sequence length {n} exceeds max_seq_len {}",
                self.config.max_seq_len
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(LaknError::Index(format!(
                "token {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Default read-out row of a raw token sequence.
    pub fn prediction_position(&self, tokens: &[usize]) -> Result<usize> {
        match self.config.architecture {
            Architecture::AutoRegressive => tokens
                .len()
                .checked_sub(1)
                .ok_or_else(|| LaknError::Contract("empty sequence".into())),
            Architecture::AutoEncoding => tokens
                .iter()
                .position(|&t| t == MASK)
                .ok_or_else(|| LaknError::Contract("auto-encoding input has no mask token".into())),
        }
    }

    /// Input sequence and read-out row for a cloze query.
    pub fn probe(&self, q: &Query) -> Result<Probe> {
        if q.slot >= q.tokens.len() {
            return Err(LaknError::Contract("query has no answer slot".into()));
        }
        if !q.is_single_token() && !self.config.multi_token {
            return Err(LaknError::Contract(
                "multi-token answer while multi-token scoring is disabled".into(),
            ));
        }
        match self.config.architecture {
            Architecture::AutoRegressive => {
                if q.slot == 0 {
                    return Err(LaknError::Contract(
                        "auto-regressive probe needs a token before the slot".into(),
                    ));
                }
                Ok(Probe {
                    tokens: q.tokens[..q.slot].to_vec(),
                    prediction: q.slot - 1,
                })
            }
            Architecture::AutoEncoding => {
                let mut tokens = q.tokens.clone();
                tokens[q.slot] = MASK;
                Ok(Probe {
                    tokens,
                    prediction: q.slot,
                })
            }
        }
    }

    // -----------------------------------------------------------------
    // Graph pieces
    // -----------------------------------------------------------------

    pub(crate) fn embed<'a>(&self, t: &mut Tape<'a>, lv: &Leaves, ids: &[usize], n: usize) -> Result<Var> {
        let positions: Vec<usize> = (0..ids.len()).map(|i| i % n).collect();
        let e = t.embedding(lv.tok_emb, ids)?;
        let p = t.embedding(lv.pos_emb, &positions)?;
        t.add(e, p)
    }

    /// Attention sub-block over blocks of `n` rows; returns the residual
    /// after attention and the key/value projections.
    fn attn_block<'a>(
        &self,
        t: &mut Tape<'a>,
        lv: &Leaves,
        l: usize,
        x: Var,
        n: usize,
    ) -> Result<(Var, Var, Var)> {
        let ll = &lv.layers[l];
        let h = t.layer_norm(x, ll.ln1_g, ll.ln1_b)?;
        let q = t.matmul(h, ll.w_q)?;
        let k = t.matmul(h, ll.w_k)?;
        let v = t.matmul(h, ll.w_v)?;
        let causal = self.config.architecture == Architecture::AutoRegressive;
        let a = t.attention(q, k, v, self.config.n_heads, n, causal)?;
        let o = t.matmul(a, ll.w_o)?;
        Ok((t.add(x, o)?, k, v))
    }

    /// Attention for rows that each see a shared cached prefix and themselves.
    fn attn_block_prefix<'a>(
        &self,
        t: &mut Tape<'a>,
        lv: &Leaves,
        l: usize,
        x: Var,
        prefix: Option<(Var, Var)>,
    ) -> Result<Var> {
        let ll = &lv.layers[l];
        let h = t.layer_norm(x, ll.ln1_g, ll.ln1_b)?;
        let q = t.matmul(h, ll.w_q)?;
        let k = t.matmul(h, ll.w_k)?;
        let v = t.matmul(h, ll.w_v)?;
        let a = t.prefix_attention(q, k, v, prefix, self.config.n_heads)?;
        let o = t.matmul(a, ll.w_o)?;
        t.add(x, o)
    }

    fn ffn_act<'a>(&self, t: &mut Tape<'a>, lv: &Leaves, l: usize, resid_mid: Var) -> Result<Var> {
        let ll = &lv.layers[l];
        let h = t.layer_norm(resid_mid, ll.ln2_g, ll.ln2_b)?;
        let pre = t.matmul(h, ll.w_in)?;
        let pre = t.add_bias(pre, ll.b_in)?;
        t.gelu(pre)
    }

    fn ffn_out<'a>(&self, t: &mut Tape<'a>, lv: &Leaves, l: usize, resid_mid: Var, act: Var) -> Result<Var> {
        let ll = &lv.layers[l];
        let w = t.matmul(act, ll.w_out)?;
        let w = t.add_bias(w, ll.b_out)?;
        t.add(resid_mid, w)
    }

    /// Logits of the selected rows of the final residual stream.
    pub(crate) fn head<'a>(&self, t: &mut Tape<'a>, lv: &Leaves, x: Var, rows: &[usize]) -> Result<Var> {
        let g = t.gather_rows(x, rows)?;
        let h = t.layer_norm(g, lv.lnf_g, lv.lnf_b)?;
        t.matmul_nt(h, lv.unembed)
    }

    /// Runs all layers over `ids` (sequences of length `n`), passing each
    /// layer's FFN activations through `hook`.
    pub(crate) fn trunk<'a>(
        &self,
        t: &mut Tape<'a>,
        lv: &Leaves,
        ids: &[usize],
        n: usize,
        hook: &mut Hook<'_, 'a>,
    ) -> Result<(Var, Vec<LayerTrace>)> {
        self.check_tokens(ids, n)?;
        let mut x = self.embed(t, lv, ids, n)?;
        let mut trace = Vec::with_capacity(self.config.n_layers);
        for l in 0..self.config.n_layers {
            let (mid, k, v) = self.attn_block(t, lv, l, x, n)?;
            let act = self.ffn_act(t, lv, l, mid)?;
            let act = hook(t, l, act)?;
            x = self.ffn_out(t, lv, l, mid, act)?;
            trace.push(LayerTrace {
                resid_mid: mid,
                act,
                k,
                v,
            });
        }
        Ok((x, trace))
    }

    /// Continues a tiled batch from the FFN of layer `l`: `resid_mid` and
    /// `act` hold `rows / n` copies of an `n`-row sequence.
    pub(crate) fn resume_full<'a>(
        &self,
        t: &mut Tape<'a>,
        lv: &Leaves,
        l: usize,
        resid_mid: Var,
        act: Var,
        n: usize,
    ) -> Result<Var> {
        let mut x = self.ffn_out(t, lv, l, resid_mid, act)?;
        for j in l + 1..self.config.n_layers {
            let (mid, _, _) = self.attn_block(t, lv, j, x, n)?;
            let a = self.ffn_act(t, lv, j, mid)?;
            x = self.ffn_out(t, lv, j, mid, a)?;
        }
        Ok(x)
    }

    /// Same continuation for the last row of a causal sequence: every row
    /// of `resid_mid`/`act` is an alternative last position, and earlier
    /// positions come from `cache`.
    pub(crate) fn resume_last<'a>(
        &self,
        t: &mut Tape<'a>,
        lv: &Leaves,
        l: usize,
        resid_mid: Var,
        act: Var,
        cache: &[LayerCache],
    ) -> Result<Var> {
        let mut x = self.ffn_out(t, lv, l, resid_mid, act)?;
        for (j, c) in cache.iter().enumerate().skip(l + 1) {
            let np = c.k.rows() - 1;
            let prefix = if np == 0 {
                None
            } else {
                let kp = t.leaf(c.k.slice_rows(0, np), false);
                let vp = t.leaf(c.v.slice_rows(0, np), false);
                Some((kp, vp))
            };
            let mid = self.attn_block_prefix(t, lv, j, x, prefix)?;
            let a = self.ffn_act(t, lv, j, mid)?;
            x = self.ffn_out(t, lv, j, mid, a)?;
        }
        Ok(x)
    }

    /// Clean per-layer values of one sequence.
    pub(crate) fn cache(&self, tokens: &[usize]) -> Result<Vec<LayerCache>> {
        let mut t = Tape::new();
        let lv = self.leaves(&mut t, false);
        let (_, trace) = self.trunk(&mut t, &lv, tokens, tokens.len(), &mut |_, _, a| Ok(a))?;
        Ok(trace
            .iter()
            .map(|tr| LayerCache {
                resid_mid: t.value(tr.resid_mid).clone(),
                act: t.value(tr.act).clone(),
                k: t.value(tr.k).clone(),
                v: t.value(tr.v).clone(),
            })
            .collect())
    }

    // -----------------------------------------------------------------
    // Public evaluation surface
    // -----------------------------------------------------------------

    /// Full forward pass over one sequence. `Position::Prediction` in
    /// overrides resolves to [`ToyTransformer::prediction_position`].
    pub fn forward(
        &self,
        tokens: &[usize],
        overrides: &[ActivationOverride],
        record: bool,
    ) -> Result<ForwardResult> {
        let pred = self.prediction_position(tokens)?;
        self.forward_at(tokens, pred, overrides, record)
    }

    /// As [`ToyTransformer::forward`] with an explicit prediction row.
    pub fn forward_at(
        &self,
        tokens: &[usize],
        prediction: usize,
        overrides: &[ActivationOverride],
        record: bool,
    ) -> Result<ForwardResult> {
        let n = tokens.len();
        let mut t = Tape::new();
        let lv = self.leaves(&mut t, false);
        let mut hook = self.override_hook(overrides, prediction, n)?;
        let (x, trace) = self.trunk(&mut t, &lv, tokens, n, &mut hook)?;
        let rows: Vec<usize> = (0..n).collect();
        let logits = self.head(&mut t, &lv, x, &rows)?;
        let ffn_activations = record.then(|| trace.iter().map(|tr| t.value(tr.act).clone()).collect());
        Ok(ForwardResult {
            logits: t.value(logits).clone(),
            ffn_activations,
            prediction_position: prediction,
        })
    }

    pub(crate) fn override_hook<'o, 'a>(
        &self,
        overrides: &'o [ActivationOverride],
        prediction: usize,
        n: usize,
    ) -> Result<impl FnMut(&mut Tape<'a>, usize, Var) -> Result<Var> + 'o> {
        if prediction >= n {
            return Err(LaknError::Contract(format!(
                "prediction row {prediction} outside sequence of {n}"
            )));
        }
        for o in overrides {
            o.validate(&self.config)?;
            if let Position::At(p) = o.position {
                if p >= n {
                    return Err(LaknError::Contract(format!(
                        "override position {p} outside sequence of {n}"
                    )));
                }
            }
        }
        Ok(move |t: &mut Tape<'a>, layer: usize, act: Var| {
            let mut act = act;
            for o in overrides.iter().filter(|o| o.layer == layer) {
                let row = match o.position {
                    Position::Prediction => prediction,
                    Position::At(p) => p,
                };
                act = match &o.mode {
                    OverrideMode::SetVector(v) => {
                        let src = t.leaf(Tensor::new(vec![1, v.len()], v.clone())?, false);
                        t.replace_rows(act, src, &[row])?
                    }
                    OverrideMode::SetScalar { neuron, value } => t.edit_entries(
                        act,
                        &[EntryEdit::Set {
                            row,
                            col: *neuron,
                            value: *value,
                        }],
                    )?,
                    OverrideMode::Scale { neuron, factor } => t.edit_entries(
                        act,
                        &[EntryEdit::Scale {
                            row,
                            col: *neuron,
                            factor: *factor,
                        }],
                    )?,
                };
            }
            Ok(act)
        })
    }

    /// Logits at the read-out row of a probe.
    pub fn probe_logits(&self, probe: &Probe, overrides: &[ActivationOverride]) -> Result<Vec<f64>> {
        let n = probe.tokens.len();
        let mut t = Tape::new();
        let lv = self.leaves(&mut t, false);
        let mut hook = self.override_hook(overrides, probe.prediction, n)?;
        let (x, _) = self.trunk(&mut t, &lv, &probe.tokens, n, &mut hook)?;
        let logits = self.head(&mut t, &lv, x, &[probe.prediction])?;
        Ok(t.value(logits).data().to_vec())
    }

    /// Softmax over the vocabulary at the query's read-out row.
    pub fn answer_distribution(&self, q: &Query, overrides: &[ActivationOverride]) -> Result<Vec<f64>> {
        let probe = self.probe(q)?;
        let logits = self.probe_logits(&probe, overrides)?;
        let mut p = vec![0.0; logits.len()];
        crate::tensor::kernels::softmax_row(&logits, &mut p);
        Ok(p)
    }

    /// Probability of `answer` at the query's read-out row.
    pub fn predict_prob(&self, q: &Query, answer: usize, overrides: &[ActivationOverride]) -> Result<f64> {
        if answer >= self.config.vocab_size {
            return Err(LaknError::Index(format!(
                "answer {answer} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(self.answer_distribution(q, overrides)?[answer])
    }

    /// Arg-max token at the read-out row; ties resolve to the lowest id.
    pub fn top1(&self, q: &Query, overrides: &[ActivationOverride]) -> Result<usize> {
        let probe = self.probe(q)?;
        let logits = self.probe_logits(&probe, overrides)?;
        Ok(argmax(&logits))
    }

    /// Geometric-mean probability of the full answer (first token plus
    /// tail), teacher-forced. Needs `multi_token` for multi-token answers.
    pub fn answer_score(&self, q: &Query, overrides: &[ActivationOverride]) -> Result<f64> {
        if q.is_single_token() {
            return self.predict_prob(q, q.answer, overrides);
        }
        let probe = self.probe(q)?;
        let answer: Vec<usize> = std::iter::once(q.answer).chain(q.answer_tail.iter().copied()).collect();
        let (tokens, rows) = match self.config.architecture {
            Architecture::AutoRegressive => {
                let mut tokens = probe.tokens.clone();
                tokens.extend_from_slice(&answer[..answer.len() - 1]);
                let rows: Vec<usize> = (probe.prediction..probe.prediction + answer.len()).collect();
                (tokens, rows)
            }
            Architecture::AutoEncoding => {
                let mut tokens = q.tokens[..q.slot].to_vec();
                tokens.extend(std::iter::repeat_n(MASK, answer.len()));
                tokens.extend_from_slice(&q.tokens[q.slot + 1..]);
                let rows: Vec<usize> = (q.slot..q.slot + answer.len()).collect();
                (tokens, rows)
            }
        };
        let n = tokens.len();
        let mut t = Tape::new();
        let lv = self.leaves(&mut t, false);
        let mut hook = self.override_hook(overrides, rows[0], n)?;
        let (x, _) = self.trunk(&mut t, &lv, &tokens, n, &mut hook)?;
        let logits = self.head(&mut t, &lv, x, &rows)?;
        let ce = t.softmax_cross_entropy(logits, &answer)?;
        Ok((-t.value(ce).item() / answer.len() as f64).exp())
    }

    /// FFN activations at the read-out row of `tokens`, per layer.
    pub fn activations_at(&self, tokens: &[usize], prediction: usize) -> Result<Vec<Vec<f64>>> {
        let r = self.forward_at(tokens, prediction, &[], true)?;
        Ok(r.ffn_activations
            .expect("recorded")
            .iter()
            .map(|a| a.row(prediction).to_vec())
            .collect())
    }

    /// P(answer) and its gradient with respect to every parameter tensor.
    pub fn prob_param_grads(&self, q: &Query, answer: usize) -> Result<(f64, Vec<Tensor>)> {
        let probe = self.probe(q)?;
        let n = probe.tokens.len();
        let mut t = Tape::new();
        let lv = self.leaves(&mut t, true);
        let (x, _) = self.trunk(&mut t, &lv, &probe.tokens, n, &mut |_, _, a| Ok(a))?;
        let logits = self.head(&mut t, &lv, x, &[probe.prediction])?;
        let p = t.softmax_prob(logits, &[answer])?;
        let p = t.sum(p)?;
        t.backward(p)?;
        let grads = lv
            .all()
            .into_iter()
            .zip(self.params.tensors())
            .map(|(v, w)| t.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(w.shape())))
            .collect();
        Ok((t.value(p).item(), grads))
    }

    /// P(answer) and its gradient with respect to the FFN activations at
    /// the read-out row of every layer.
    pub fn prob_activation_grads(&self, q: &Query, answer: usize) -> Result<(f64, Vec<Vec<f64>>)> {
        let probe = self.probe(q)?;
        let n = probe.tokens.len();
        let pred = probe.prediction;
        let mut t = Tape::new();
        let lv = self.leaves(&mut t, false);
        let mut inserted = Vec::new();
        let (x, _) = self.trunk(&mut t, &lv, &probe.tokens, n, &mut |t, _, a| {
            // a zero perturbation keeps the upstream path, so gradients are total
            let leaf = t.leaf(Tensor::zeros(&[1, t.value(a).cols()]), true);
            inserted.push(leaf);
            let row = t.gather_rows(a, &[pred])?;
            let row = t.add(row, leaf)?;
            t.replace_rows(a, row, &[pred])
        })?;
        let logits = self.head(&mut t, &lv, x, &[pred])?;
        let p = t.softmax_prob(logits, &[answer])?;
        let p = t.sum(p)?;
        t.backward(p)?;
        let grads = inserted
            .iter()
            .map(|&v| {
                t.grad(v)
                    .map(|g| g.data().to_vec())
                    .unwrap_or_else(|| vec![0.0; self.config.d_ffn])
            })
            .collect();
        Ok((t.value(p).item(), grads))
    }
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
