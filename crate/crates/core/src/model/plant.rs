//! Hand-built transformer whose fact-storing neurons are known.
//!
//! Residual layout, on an orthonormal basis orthogonal to the all-ones
//! vector (so layer norm never shifts it): a large constant anchor that pins
//! every layer-norm scale, a subject marker, raw and contextual concept
//! coordinates, raw and contextual template coordinates, and an output
//! block holding object directions.
//!
//! Layer 0 attention has two live heads. Head 0 attends to the subject
//! (keyed on the marker) and copies its concept coordinates into the
//! context block; head 1 attends uniformly and averages template meanings.
//! Later attention layers only carry weight noise. Each planted neuron reads
//! the context blocks through a key fitted as a linear separator between
//! the prompt states it must fire on and every other prompt state, and
//! writes its object's direction. The remaining neurons are random and
//! mostly silent.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::{Architecture, ModelConfig, NeuronId};
use super::params::Params;
use super::transformer::ToyTransformer;
use crate::corpus::vocab::UNK;
use crate::corpus::{Query, QuerySet};
use crate::error::{LaknError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantSpec {
    pub neurons_per_fact: usize,
    pub architecture: Architecture,
    pub n_layers: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub concept_dims: usize,
    pub template_dims: usize,
    /// Share of a subject embedding that is private to its language.
    pub language_noise: f64,
    /// Share of a template word embedding that is private to its language.
    pub template_noise: f64,
    pub weight_noise: f64,
    /// Answer logit on the weakest query of each planted fact.
    pub margin: f64,
    /// Relative spread of the write amplitudes of one fact's neurons.
    pub amplitude_spread: f64,
    /// Logit of the fallback answer (`<unk>`) on every prompt.
    pub fallback_logit: f64,
    pub distractors: DistractorSpec,
    pub seed: u64,
}

/// Extra neurons that store a fact for one language only, or for one
/// paraphrase template only (in every language).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistractorSpec {
    /// Facts (from the front of the planted list) that receive distractors.
    pub n_facts: usize,
    pub per_language: usize,
    pub per_template: usize,
    /// Write amplitudes relative to the fact's mean knowledge-neuron write.
    pub language_strength: f64,
    pub template_strength: f64,
}

impl Default for DistractorSpec {
    fn default() -> Self {
        DistractorSpec {
            n_facts: 0,
            per_language: 0,
            per_template: 0,
            language_strength: 1.0,
            template_strength: 1.0,
        }
    }
}

impl Default for PlantSpec {
    fn default() -> Self {
        PlantSpec {
            neurons_per_fact: 2,
            architecture: Architecture::AutoRegressive,
            n_layers: 4,
            d_model: 128,
            d_ffn: 256,
            n_heads: 4,
            max_seq_len: 16,
            concept_dims: 24,
            template_dims: 12,
            language_noise: 0.4,
            template_noise: 0.3,
            weight_noise: 0.01,
            margin: 6.5,
            amplitude_spread: 0.4,
            fallback_logit: 5.0,
            distractors: DistractorSpec::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedModel {
    pub model: ToyTransformer,
    /// Knowledge neurons of every planted fact.
    pub ground_truth: BTreeMap<String, Vec<NeuronId>>,
    /// Language- or template-bound neurons, per fact.
    pub distractors: BTreeMap<String, Vec<NeuronId>>,
}

const ANCHOR: f64 = 10.0;
const MARKER: f64 = 1.0;
/// Pre-activation of the weakest positive and of the strongest negative.
const PRE_POS: f64 = 8.0;
const PRE_NEG: f64 = -2.5;

struct Layout {
    basis: Vec<Vec<f64>>,
    anchor: usize,
    marker: usize,
    c_raw: usize,
    c_ctx: usize,
    t_raw: usize,
    t_ctx: usize,
    out: usize,
    dc: usize,
    dt: usize,
}

impl Layout {
    fn new(spec: &PlantSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        let d = spec.d_model;
        let (dc, dt) = (spec.concept_dims, spec.template_dims);
        let used = 3 + 2 * dc + 2 * dt;
        if used + 8 > d {
            return Err(LaknError::Config {
                field: "plant.d_model".into(),
                message: format!("{d} dimensions cannot hold the {used}-dimensional layout"),
            });
        }
        let dh = d / spec.n_heads;
        if spec.n_heads < 2 || !d.is_multiple_of(spec.n_heads) || dc > dh || dt > dh {
            return Err(LaknError::Config {
                field: "plant.n_heads".into(),
                message: format!("heads of width {dh} must hold {dc} concept and {dt} template dims"),
            });
        }
        Ok(Layout {
            basis: orthonormal_basis(d, rng),
            anchor: 1,
            marker: 2,
            c_raw: 3,
            c_ctx: 3 + dc,
            t_raw: 3 + 2 * dc,
            t_ctx: 3 + 2 * dc + dt,
            out: used,
            dc,
            dt,
        })
    }

    fn vec(&self, start: usize, coords: &[f64]) -> Vec<f64> {
        let d = self.basis.len();
        let mut v = vec![0.0; d];
        for (j, &c) in coords.iter().enumerate() {
            for (x, b) in v.iter_mut().zip(&self.basis[start + j]) {
                *x += c * b;
            }
        }
        v
    }

    fn coords(&self, x: &[f64], start: usize, len: usize) -> Vec<f64> {
        (start..start + len).map(|j| dot(x, &self.basis[j])).collect()
    }
}

/// What a planted neuron must fire on and what it writes.
struct Recipe {
    fact: usize,
    positives: Vec<usize>,
    with_template: bool,
    weight: f64,
    distractor: bool,
}

/// Builds a model whose listed facts are each stored in `neurons_per_fact`
/// dedicated FFN neurons. Every fact of `corpus` gets subject embeddings;
/// facts not listed are left unanswered.
pub fn plant_facts(corpus: &QuerySet, fact_ids: &[String], spec: &PlantSpec) -> Result<PlantedModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let layout = Layout::new(spec, &mut rng)?;
    let d = spec.d_model;
    let cfg = ModelConfig {
        architecture: spec.architecture,
        n_layers: spec.n_layers,
        d_model: d,
        d_ffn: spec.d_ffn,
        n_heads: spec.n_heads,
        max_seq_len: spec.max_seq_len,
        seed: spec.seed,
        ..ModelConfig::new(spec.architecture, corpus.vocab.len())
    };
    cfg.validate()?;
    if !(spec.margin > spec.fallback_logit) {
        return Err(LaknError::Config {
            field: "plant.margin".into(),
            message: "must exceed fallback_logit".into(),
        });
    }

    // facts, objects and capacity
    let planted: Vec<usize> = fact_ids
        .iter()
        .map(|id| {
            corpus
                .facts
                .iter()
                .position(|f| &f.id == id)
                .ok_or_else(|| LaknError::Contract(format!("fact {id} not in corpus")))
        })
        .collect::<Result<_>>()?;
    let mut objects = Vec::with_capacity(planted.len());
    let mut seen_objects = BTreeSet::new();
    for &fi in &planted {
        let f = &corpus.facts[fi];
        let objs: BTreeSet<usize> = corpus
            .queries_of(&f.id)
            .map(|q| {
                if q.is_single_token() {
                    Ok(q.answer)
                } else {
                    Err(LaknError::Contract(format!("fact {} has a multi-token object", f.id)))
                }
            })
            .collect::<Result<_>>()?;
        if objs.len() != 1 {
            return Err(LaknError::Contract(format!(
                "fact {} needs one object token across languages",
                f.id
            )));
        }
        let o = *objs.iter().next().expect("one object");
        if !seen_objects.insert(o) {
            return Err(LaknError::Contract(format!("object of fact {} is not distinct", f.id)));
        }
        objects.push(o);
    }
    let dist = &spec.distractors;
    let n_dist_facts = dist.n_facts.min(planted.len());
    let n_paraphrases = corpus.queries.iter().map(|q| q.paraphrase_index + 1).max().unwrap_or(0);
    let needed = planted.len() * spec.neurons_per_fact
        + n_dist_facts * (dist.per_language * corpus.languages.len() + dist.per_template * n_paraphrases);
    if needed > cfg.n_neurons() {
        return Err(LaknError::Contract(format!(
            "{needed} planted neurons exceed the {} available",
            cfg.n_neurons()
        )));
    }
    if spec.neurons_per_fact == 0 {
        return Err(LaknError::Contract("neurons_per_fact must be positive".into()));
    }

    let mut params = Params::init(&cfg);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let gauss = |rng: &mut ChaCha8Rng| noise.sample(rng);

    // ---- embeddings -------------------------------------------------
    let concepts = spread_unit_vectors(corpus.facts.len(), layout.dc, &mut rng);
    let mut meaning: HashMap<String, Vec<f64>> = HashMap::new();
    let mut subject_of: HashMap<usize, (usize, String)> = HashMap::new();
    for (fi, f) in corpus.facts.iter().enumerate() {
        for (lang, s) in &f.subjects {
            if let Some(id) = corpus.vocab.id(s) {
                subject_of.insert(id, (fi, lang.clone()));
            }
        }
    }
    if planted.iter().any(|&fi| corpus.facts[fi].subjects.is_empty()) {
        return Err(LaknError::Contract("planting needs subject surface forms".into()));
    }
    let prompt_tokens: BTreeSet<usize> = corpus
        .queries
        .iter()
        .flat_map(|q| q.tokens.iter().copied().filter(|&t| t != crate::corpus::vocab::SLOT))
        .collect();
    let rho = spec.language_noise;
    let rho_t = spec.template_noise;
    let mut meaning_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed);
    for t in 0..cfg.vocab_size {
        let mut e = layout.vec(layout.anchor, &[ANCHOR]);
        if let Some((fi, _)) = subject_of.get(&t) {
            // language-private part, orthogonal to the shared concept
            let mut private = random_unit(layout.dc, &mut rng);
            let c = dot(&private, &concepts[*fi]);
            for (x, y) in private.iter_mut().zip(&concepts[*fi]) {
                *x -= c * y;
            }
            normalize(&mut private);
            let c: Vec<f64> = concepts[*fi]
                .iter()
                .zip(&private)
                .map(|(a, b)| (1.0 - rho * rho).sqrt() * a + rho * b)
                .collect();
            add(&mut e, &layout.vec(layout.c_raw, &c));
            add(&mut e, &layout.vec(layout.marker, &[MARKER]));
        } else if prompt_tokens.contains(&t) {
            // `<lang>.<word>` symbols share the meaning of `<word>`
            let sym = corpus.vocab.token(t);
            let key = sym.split_once('.').map_or(sym, |(_, w)| w).to_string();
            let m = meaning
                .entry(key)
                .or_insert_with(|| random_unit(layout.dt, &mut meaning_rng))
                .clone();
            let private = random_unit(layout.dt, &mut rng);
            let c: Vec<f64> = m
                .iter()
                .zip(&private)
                .map(|(a, b)| (1.0 - rho_t * rho_t).sqrt() * a + rho_t * b)
                .collect();
            add(&mut e, &layout.vec(layout.t_raw, &c));
        }
        for x in e.iter_mut() {
            *x += spec.weight_noise * gauss(&mut rng);
        }
        params.tok_emb.row_mut(t).copy_from_slice(&e);
    }
    for x in params.pos_emb.data_mut() {
        *x = spec.weight_noise * gauss(&mut rng);
    }

    // ---- attention ------------------------------------------------------
    let dh = d / spec.n_heads;
    let s1 = ANCHOR / (d as f64).sqrt(); // residual norm / sqrt(d) after layer norm
    for (l, lp) in params.layers.iter_mut().enumerate() {
        for w in [&mut lp.w_q, &mut lp.w_k, &mut lp.w_v, &mut lp.w_o] {
            for x in w.data_mut() {
                *x = spec.weight_noise * gauss(&mut rng) / (d as f64).sqrt();
            }
        }
        if l > 0 {
            continue;
        }
        // head 0: constant query, key on the subject marker
        let score = 14.0;
        let lam_k = score * (dh as f64).sqrt() * s1 / ((d as f64).sqrt() * MARKER);
        for i in 0..d {
            lp.w_q.set(i, 0, lp.w_q.get(i, 0) + layout.basis[layout.anchor][i]);
            lp.w_k.set(i, 0, lp.w_k.get(i, 0) + lam_k * layout.basis[layout.marker][i]);
        }
        // head 0 copies raw concept coordinates, head 1 raw template ones
        for j in 0..layout.dc {
            for i in 0..d {
                let b = layout.basis[layout.c_raw + j][i];
                lp.w_v.set(i, j, lp.w_v.get(i, j) + s1 * b);
                let o = layout.basis[layout.c_ctx + j][i];
                lp.w_o.set(j, i, lp.w_o.get(j, i) + o);
            }
        }
        for j in 0..layout.dt {
            for i in 0..d {
                let b = layout.basis[layout.t_raw + j][i];
                lp.w_v.set(i, dh + j, lp.w_v.get(i, dh + j) + s1 * b);
                let o = layout.basis[layout.t_ctx + j][i];
                lp.w_o.set(dh + j, i, lp.w_o.get(dh + j, i) + o);
            }
        }
    }

    // ---- output directions and random neurons ---------------------------
    let d_out = d - layout.out;
    let obj_dirs: Vec<Vec<f64>> = objects
        .iter()
        .map(|_| layout.vec(layout.out, &random_unit(d_out, &mut rng)))
        .collect();
    for lp in params.layers.iter_mut() {
        for x in lp.w_in.data_mut() {
            *x = gauss(&mut rng) / (d as f64).sqrt();
        }
        for x in lp.b_in.data_mut() {
            *x = -3.0 + 0.5 * gauss(&mut rng);
        }
        for x in lp.w_out.data_mut() {
            *x = spec.weight_noise * gauss(&mut rng);
        }
    }

    // ---- recipes and neuron placement ---------------------------------
    let queries = &corpus.queries;
    let fact_index: HashMap<&str, usize> =
        corpus.facts.iter().enumerate().map(|(i, f)| (f.id.as_str(), i)).collect();
    let q_fact: Vec<usize> = queries.iter().map(|q| fact_index[q.fact_id.as_str()]).collect();
    let mut recipes = Vec::new();
    for (pi, &fi) in planted.iter().enumerate() {
        let own: Vec<usize> = (0..queries.len()).filter(|&q| q_fact[q] == fi).collect();
        let weights: Vec<f64> = (0..spec.neurons_per_fact)
            .map(|_| 1.0 + spec.amplitude_spread * (2.0 * rng.random::<f64>() - 1.0))
            .collect();
        let total: f64 = weights.iter().sum();
        for w in weights {
            recipes.push(Recipe {
                fact: pi,
                positives: own.clone(),
                with_template: false,
                weight: w / total * spec.neurons_per_fact as f64,
                distractor: false,
            });
        }
        if pi < n_dist_facts {
            for lang in &corpus.languages {
                let pos: Vec<usize> = own.iter().copied().filter(|&q| &queries[q].language == lang).collect();
                for _ in 0..dist.per_language {
                    recipes.push(Recipe {
                        fact: pi,
                        positives: pos.clone(),
                        with_template: false,
                        weight: dist.language_strength,
                        distractor: true,
                    });
                }
            }
            for p in 0..n_paraphrases {
                let pos: Vec<usize> = own.iter().copied().filter(|&q| queries[q].paraphrase_index == p).collect();
                for _ in 0..dist.per_template {
                    recipes.push(Recipe {
                        fact: pi,
                        positives: pos.clone(),
                        with_template: true,
                        weight: dist.template_strength,
                        distractor: true,
                    });
                }
            }
        }
    }
    let mut slots: Vec<NeuronId> = (0..cfg.n_layers)
        .flat_map(|l| (0..cfg.d_ffn).map(move |i| NeuronId::new(l, i)))
        .collect();
    slots.shuffle(&mut rng);
    let mut assigned: Vec<NeuronId> = slots[..recipes.len()].to_vec();
    assigned.sort_by_key(|n| n.layer);
    // keep recipe order aligned with the sorted slots
    let mut order: Vec<usize> = (0..recipes.len()).collect();
    order.shuffle(&mut rng);

    let mut ground_truth: BTreeMap<String, Vec<NeuronId>> = BTreeMap::new();
    let mut distractors: BTreeMap<String, Vec<NeuronId>> = BTreeMap::new();
    for (slot, &ri) in assigned.iter().zip(&order) {
        let r = &recipes[ri];
        let id = corpus.facts[planted[r.fact]].id.clone();
        let map = if r.distractor { &mut distractors } else { &mut ground_truth };
        map.entry(id).or_default().push(*slot);
    }
    for v in ground_truth.values_mut().chain(distractors.values_mut()) {
        v.sort();
    }

    // ---- fit planted neurons layer by layer ----------------------------
    let mut model = ToyTransformer::from_params(cfg.clone(), params)?;
    let probes: Vec<_> = queries.iter().map(|q| model.probe(q)).collect::<Result<Vec<_>>>()?;
    // one-token-blanked prompts of distractor facts; template-bound keys
    // must stay off on partial templates
    let pad = model.config.pad_token_id;
    let mut variants = Vec::new();
    let mut variant_fact = Vec::new();
    if dist.per_template > 0 {
        for (qi, q) in queries.iter().enumerate() {
            let Some(pi) = planted.iter().position(|&f| f == q_fact[qi]) else { continue };
            if pi >= n_dist_facts {
                continue;
            }
            for b in crate::attribution::build_baselines(q, pad) {
                let v = model.probe(&b.as_query(q))?;
                if v != probes[qi] {
                    variants.push(v);
                    variant_fact.push(pi);
                }
            }
        }
    }
    for l in 0..cfg.n_layers {
        let here: Vec<(NeuronId, usize)> = assigned
            .iter()
            .zip(&order)
            .filter(|(n, _)| n.layer == l)
            .map(|(n, &r)| (*n, r))
            .collect();
        if here.is_empty() {
            continue;
        }
        let states = layer_states(&model, &probes, l)?;
        let feats_c: Vec<Vec<f64>> = states.iter().map(|h| layout.coords(h, layout.c_ctx, layout.dc)).collect();
        let feats_ct: Vec<Vec<f64>> = states
            .iter()
            .zip(&feats_c)
            .map(|(h, c)| {
                let mut v = c.clone();
                v.extend(layout.coords(h, layout.t_ctx, layout.dt));
                v
            })
            .collect();
        let var_ct: Vec<Vec<f64>> = if here.iter().any(|&(_, r)| recipes[r].with_template) {
            layer_states(&model, &variants, l)?
                .iter()
                .map(|h| {
                    let mut v = layout.coords(h, layout.c_ctx, layout.dc);
                    v.extend(layout.coords(h, layout.t_ctx, layout.dt));
                    v
                })
                .collect()
        } else {
            Vec::new()
        };
        for (n, ri) in here {
            let r = &recipes[ri];
            let with_variants;
            let feats = if r.with_template {
                with_variants = feats_ct
                    .iter()
                    .chain(var_ct.iter().zip(&variant_fact).filter(|(_, &f)| f == r.fact).map(|(v, _)| v))
                    .cloned()
                    .collect::<Vec<_>>();
                &with_variants
            } else {
                &feats_c
            };
            let pos_set: BTreeSet<usize> = r.positives.iter().copied().collect();
            let (w, lo, hi) = fit_separator(feats, &pos_set).ok_or_else(|| {
                LaknError::Capacity(format!(
                    "prompt states of fact {} are not linearly separable at layer {l}",
                    corpus.facts[planted[r.fact]].id
                ))
            })?;
            // map lo -> PRE_POS and hi -> PRE_NEG, then flatten the positives
            let gamma = (PRE_POS - PRE_NEG) / (lo - hi);
            let w: Vec<f64> = w.iter().map(|x| gamma * x).collect();
            let (w, bias) = level_key(feats, &pos_set, w, PRE_POS - gamma * lo);
            let mut key = layout.vec(layout.c_ctx, &w[..layout.dc]);
            if r.with_template {
                add(&mut key, &layout.vec(layout.t_ctx, &w[layout.dc..]));
            }
            let lp = &mut model.params.layers[l];
            for (i, k) in key.iter().enumerate() {
                lp.w_in.set(i, n.index, *k);
            }
            lp.b_in.data_mut()[n.index] = bias;
            // mean activation over positives sets the write scale
            let mean_act: f64 = r
                .positives
                .iter()
                .map(|&q| crate::tensor::kernels::gelu(dot(&feats[q], &w) + bias))
                .sum::<f64>()
                / r.positives.len() as f64;
            let write = r.weight / mean_act;
            for (i, x) in obj_dirs[r.fact].iter().enumerate() {
                lp.w_out.set(n.index, i, write * x);
            }
        }
    }

    // ---- unembedding and margin calibration ----------------------------
    let anchor_dir = layout.basis[layout.anchor].clone();
    let sqrt_d = (d as f64).sqrt();
    for t in 0..cfg.vocab_size {
        let row = model.params.unembed.row_mut(t);
        for (i, x) in row.iter_mut().enumerate() {
            *x = -20.0 / sqrt_d * anchor_dir[i];
        }
    }
    for (pi, &o) in objects.iter().enumerate() {
        model.params.unembed.row_mut(o).copy_from_slice(&obj_dirs[pi]);
    }
    // non-planted objects of the corpus share the output block too
    let planted_objects: BTreeSet<usize> = objects.iter().copied().collect();
    let other_objects: BTreeSet<usize> = corpus
        .queries
        .iter()
        .map(|q| q.answer)
        .filter(|o| !planted_objects.contains(o))
        .collect();
    for &o in &other_objects {
        let v = layout.vec(layout.out, &random_unit(d_out, &mut rng));
        model.params.unembed.row_mut(o).copy_from_slice(&v);
    }
    let all_objects: Vec<usize> = planted_objects.iter().chain(&other_objects).copied().collect();
    let pi_of: HashMap<usize, usize> = planted.iter().enumerate().map(|(p, &f)| (f, p)).collect();
    let mut fact_neurons: Vec<Vec<NeuronId>> = vec![Vec::new(); planted.len()];
    for (slot, &ri) in assigned.iter().zip(&order) {
        fact_neurons[recipes[ri].fact].push(*slot);
    }
    // scale each fact's writes so its weakest query reads 1 along the object
    for _ in 0..2 {
        let finals = final_states(&model, &probes)?;
        let mut low = vec![f64::INFINITY; planted.len()];
        for (q, h) in finals.iter().enumerate() {
            if let Some(&pi) = pi_of.get(&q_fact[q]) {
                low[pi] = low[pi].min(dot(&obj_dirs[pi], h));
            }
        }
        for (pi, ns) in fact_neurons.iter().enumerate() {
            if !(low[pi] > 0.0) {
                return Err(LaknError::Capacity(format!(
                    "fact {} does not reach its object",
                    corpus.facts[planted[pi]].id
                )));
            }
            for n in ns {
                for x in model.params.layers[n.layer].w_out.row_mut(n.index) {
                    *x /= low[pi];
                }
            }
        }
    }
    for &o in &all_objects {
        for x in model.params.unembed.row_mut(o) {
            *x *= spec.margin;
        }
    }
    // fallback answer: a constant logit through the anchor
    let row = model.params.unembed.row_mut(UNK);
    for (i, x) in row.iter_mut().enumerate() {
        *x = spec.fallback_logit / sqrt_d * anchor_dir[i];
    }
    for x in model.params.unembed.data_mut() {
        *x += spec.weight_noise * 0.1 * gauss(&mut rng);
    }

    for (q, probe) in probes.iter().enumerate() {
        if !pi_of.contains_key(&q_fact[q]) {
            continue;
        }
        let logits = model.probe_logits(probe, &[])?;
        if super::argmax(&logits) != queries[q].answer {
            return Err(LaknError::Capacity(format!(
                "planted query {}/{}/{} is not answered",
                queries[q].fact_id, queries[q].language, queries[q].paraphrase_index
            )));
        }
    }

    Ok(PlantedModel {
        model,
        ground_truth,
        distractors,
    })
}

/// Layer-normed FFN inputs at the read-out row of every probe.
fn layer_states(model: &ToyTransformer, probes: &[super::Probe], l: usize) -> Result<Vec<Vec<f64>>> {
    let lp = &model.params.layers[l];
    probes
        .iter()
        .map(|p| {
            let cache = model.cache(&p.tokens)?;
            Ok(layer_norm(cache[l].resid_mid.row(p.prediction), &lp.ln2_g, &lp.ln2_b))
        })
        .collect()
}

/// Final layer-normed residual at the read-out row of every probe.
fn final_states(model: &ToyTransformer, probes: &[super::Probe]) -> Result<Vec<Vec<f64>>> {
    let last = model.config.n_layers - 1;
    let lp = &model.params.layers[last];
    probes
        .iter()
        .map(|p| {
            let cache = model.cache(&p.tokens)?;
            let c = &cache[last];
            let mut x = c.resid_mid.row(p.prediction).to_vec();
            let act = c.act.row(p.prediction);
            for (j, &a) in act.iter().enumerate() {
                for (xi, w) in x.iter_mut().zip(lp.w_out.row(j)) {
                    *xi += a * w;
                }
            }
            add(&mut x, lp.b_out.data());
            Ok(layer_norm(&x, &model.params.lnf_g, &model.params.lnf_b))
        })
        .collect()
}

fn layer_norm(x: &[f64], g: &Tensor, b: &Tensor) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + 1e-5).sqrt();
    x.iter()
        .zip(g.data().iter().zip(b.data()))
        .map(|(v, (g, b))| (v - mean) * inv * g + b)
        .collect()
}

/// Linear separator `w` of the positive rows from all others, returned with
/// the lowest positive and highest negative projection (`lo > hi`).
fn fit_separator(feats: &[Vec<f64>], positives: &BTreeSet<usize>) -> Option<(Vec<f64>, f64, f64)> {
    let dim = feats.first()?.len();
    let mean = |idx: &mut dyn Iterator<Item = usize>| {
        let mut m = vec![0.0; dim];
        let mut c = 0.0_f64;
        for i in idx {
            add(&mut m, &feats[i]);
            c += 1.0;
        }
        m.iter_mut().for_each(|x| *x /= c.max(1.0));
        m
    };
    let mp = mean(&mut positives.iter().copied());
    let mn = mean(&mut (0..feats.len()).filter(|i| !positives.contains(i)));
    let mut w: Vec<f64> = mp.iter().zip(&mn).map(|(a, b)| a - b).collect();
    normalize(&mut w);
    let margin = |w: &[f64]| {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        let (mut arg_lo, mut arg_hi) = (0, 0);
        for (i, f) in feats.iter().enumerate() {
            let s = dot(w, f);
            if positives.contains(&i) {
                if s < lo {
                    lo = s;
                    arg_lo = i;
                }
            } else if s > hi {
                hi = s;
                arg_hi = i;
            }
        }
        (lo, hi, arg_lo, arg_hi)
    };
    // subgradient ascent on the hard margin, keeping the best iterate
    let (mut lo, mut hi, mut a_lo, mut a_hi) = margin(&w);
    let mut best = (w.clone(), lo, hi);
    let mut step = 0.05;
    let mut stale = 0;
    for it in 0..1500 {
        let g: Vec<f64> = feats[a_lo].iter().zip(&feats[a_hi]).map(|(p, n)| p - n).collect();
        for (x, gi) in w.iter_mut().zip(&g) {
            *x += step * gi;
        }
        normalize(&mut w);
        (lo, hi, a_lo, a_hi) = margin(&w);
        if lo - hi > best.1 - best.2 + 1e-9 {
            best = (w.clone(), lo, hi);
            stale = 0;
        } else {
            stale += 1;
            if stale == 100 {
                break;
            }
        }
        if it % 150 == 149 {
            step *= 0.5;
        }
    }
    (best.1 > best.2).then_some(best)
}

/// Least-squares refinement of a separating key: positives are pulled to
/// `PRE_POS`, negatives that rise above `PRE_NEG` are pushed under it.
/// Falls back to the input when the refined key lets a negative through.
fn level_key(feats: &[Vec<f64>], positives: &BTreeSet<usize>, w0: Vec<f64>, b0: f64) -> (Vec<f64>, f64) {
    let dim = w0.len() + 1;
    let pre = |w: &[f64], b: f64, f: &[f64]| dot(w, f) + b;
    let mut active: BTreeSet<usize> = BTreeSet::new();
    let (mut w, mut b) = (w0.clone(), b0);
    for _ in 0..30 {
        for (i, f) in feats.iter().enumerate() {
            if !positives.contains(&i) && pre(&w, b, f) > PRE_NEG - 0.5 {
                active.insert(i);
            }
        }
        // normal equations over positives and active negatives
        let mut ata = vec![vec![0.0; dim]; dim];
        let mut atb = vec![0.0; dim];
        let mut push = |f: &[f64], target: f64, weight: f64| {
            let row: Vec<f64> = f.iter().copied().chain([1.0]).collect();
            for a in 0..dim {
                atb[a] += weight * row[a] * target;
                for c in 0..dim {
                    ata[a][c] += weight * row[a] * row[c];
                }
            }
        };
        for &i in positives {
            push(&feats[i], PRE_POS, 1.0);
        }
        for &i in &active {
            push(&feats[i], PRE_NEG - 1.0, 4.0);
        }
        let ridge = 1e-3 * (0..dim).map(|a| ata[a][a]).sum::<f64>() / dim as f64;
        // pull towards the starting key rather than towards zero
        for a in 0..dim - 1 {
            ata[a][a] += ridge;
            atb[a] += ridge * w0[a];
        }
        let Some(sol) = solve(ata, atb) else { break };
        let (nw, nb) = (sol[..dim - 1].to_vec(), sol[dim - 1]);
        let stable = nw.iter().zip(&w).all(|(a, c)| (a - c).abs() < 1e-9) && (nb - b).abs() < 1e-9;
        (w, b) = (nw, nb);
        if stable {
            break;
        }
    }
    let worst_neg = feats
        .iter()
        .enumerate()
        .filter(|(i, _)| !positives.contains(i))
        .map(|(_, f)| pre(&w, b, f))
        .fold(f64::NEG_INFINITY, f64::max);
    let worst_pos = positives.iter().map(|&i| pre(&w, b, &feats[i])).fold(f64::INFINITY, f64::min);
    if worst_neg <= PRE_NEG + 0.5 && worst_pos >= 0.5 * PRE_POS {
        (w, b)
    } else {
        (w0, b0)
    }
}

/// Gaussian elimination with partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs()))?;
        if a[p][c].abs() < 1e-300 {
            return None;
        }
        a.swap(c, p);
        b.swap(c, p);
        for r in c + 1..n {
            let f = a[r][c] / a[c][c];
            for k in c..n {
                a[r][k] -= f * a[c][k];
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| a[r][k] * x[k]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    Some(x)
}

fn orthonormal_basis(d: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut basis: Vec<Vec<f64>> = vec![vec![1.0 / (d as f64).sqrt(); d]];
    while basis.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| normal.sample(rng)).collect();
        for _ in 0..2 {
            for b in &basis {
                let p = dot(&v, b);
                for (x, y) in v.iter_mut().zip(b) {
                    *x -= p * y;
                }
            }
        }
        if normalize(&mut v) > 1e-6 {
            basis.push(v);
        }
    }
    basis
}

fn random_unit(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut v: Vec<f64> = (0..n).map(|_| normal.sample(rng)).collect();
    normalize(&mut v);
    v
}

/// Unit vectors pushed apart to lower their largest pairwise overlap.
fn spread_unit_vectors(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut vs: Vec<Vec<f64>> = (0..n).map(|_| random_unit(dim, rng)).collect();
    for _ in 0..200 {
        let snapshot = vs.clone();
        for (i, v) in vs.iter_mut().enumerate() {
            let mut push = vec![0.0; dim];
            for (j, u) in snapshot.iter().enumerate() {
                if i == j {
                    continue;
                }
                let c = dot(v, u);
                for (p, x) in push.iter_mut().zip(u) {
                    *p += c * c * c * x;
                }
            }
            for (x, p) in v.iter_mut().zip(&push) {
                *x -= 0.5 * p;
            }
            normalize(v);
        }
    }
    vs
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Queries of the planted facts, in corpus order.
pub fn planted_queries<'c>(corpus: &'c QuerySet, planted: &PlantedModel) -> Vec<&'c Query> {
    corpus
        .queries
        .iter()
        .filter(|q| planted.ground_truth.contains_key(&q.fact_id))
        .collect()
}
