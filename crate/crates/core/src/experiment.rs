//! Experiment configuration and the end-to-end runs behind each CLI
//! command. Every run is a pure function of its config and seed.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attribution::SaigConfig;
use crate::corpus::{generate_synthetic, load_jsonl, partition_by_model, CorpusSpec, JsonlOptions, Query, QuerySet};
use crate::error::{LaknError, Result};
use crate::eval::{self, GainReport, InjectionScores};
use crate::intervention::{self, DEFAULT_FACTOR};
use crate::model::{
    plant_facts, train, ActivationOverride, Architecture, ModelConfig, NeuronId, ParamMask, PlantSpec,
    PlantedModel, ToyTransformer, TrainConfig, TrainReport,
};
use crate::uncertainty::{attribute_fact, matrice_from_scores, FactAttributions, LaknSet, ScoredNeuron, UncertaintyParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelShape {
    pub architecture: Architecture,
    pub n_layers: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        let c = ModelConfig::new(Architecture::AutoRegressive, 8);
        ModelShape {
            architecture: c.architecture,
            n_layers: c.n_layers,
            d_model: c.d_model,
            d_ffn: c.d_ffn,
            n_heads: c.n_heads,
            max_seq_len: c.max_seq_len,
        }
    }
}

impl ModelShape {
    pub fn config(&self, vocab_size: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            d_model: self.d_model,
            d_ffn: self.d_ffn,
            n_heads: self.n_heads,
            max_seq_len: self.max_seq_len,
            seed,
            ..ModelConfig::new(self.architecture, vocab_size)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum CorpusSource {
    Synthetic(CorpusSpec),
    Jsonl {
        path: PathBuf,
        #[serde(default)]
        multi_token: bool,
    },
}

impl Default for CorpusSource {
    fn default() -> Self {
        CorpusSource::Synthetic(CorpusSpec::new(20, 7, 3))
    }
}

impl CorpusSource {
    pub fn load(&self) -> Result<QuerySet> {
        match self {
            CorpusSource::Synthetic(spec) => generate_synthetic(spec),
            CorpusSource::Jsonl { path, multi_token } => load_jsonl(
                path,
                JsonlOptions {
                    multi_token: *multi_token,
                },
            ),
        }
    }
}

/// The last `facts` facts of the corpus are trained in their first
/// `known_languages` languages only; their other queries become Q_new.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HoldoutConfig {
    pub facts: usize,
    pub known_languages: usize,
}

impl Default for HoldoutConfig {
    fn default() -> Self {
        HoldoutConfig {
            facts: 0,
            known_languages: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ManipulationKind {
    Suppress,
    Enhance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum NeuronChoice {
    Lakn,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ManipulateConfig {
    pub kind: ManipulationKind,
    pub factor: f64,
    pub neurons: NeuronChoice,
    /// Random sets take the size of the fact's LAKN set.
    pub size_match: bool,
    /// Random set size when not size-matched.
    pub random_size: usize,
}

impl Default for ManipulateConfig {
    fn default() -> Self {
        ManipulateConfig {
            kind: ManipulationKind::Suppress,
            factor: DEFAULT_FACTOR,
            neurons: NeuronChoice::Lakn,
            size_match: true,
            random_size: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum EditKind {
    Erase,
    Update,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EditConfig {
    pub kind: EditKind,
    pub erase_keys_too: bool,
    /// Fixed weights; a missing `lambda2` is calibrated, a missing
    /// `lambda1` follows `lambda2`.
    pub lambda1: Option<f64>,
    pub lambda2: Option<f64>,
    pub lambda_grid: Vec<f64>,
    /// Language of the calibration queries; the first corpus language when unset.
    pub source_language: Option<String>,
    /// Held-out fact used for calibration; the first non-target fact when unset.
    pub calibration_fact: Option<String>,
    /// Number of disjoint facts whose queries measure locality.
    pub unrelated_facts: usize,
    /// Also apply size-matched random edits.
    pub random_baseline: bool,
}

impl Default for EditConfig {
    fn default() -> Self {
        EditConfig {
            kind: EditKind::Erase,
            erase_keys_too: false,
            lambda1: None,
            lambda2: None,
            lambda_grid: (0..30).map(|i| 1e-3 * 10f64.powf(i as f64 / 7.5)).collect(),
            source_language: None,
            calibration_fact: None,
            unrelated_facts: 100,
            random_baseline: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InjectConfig {
    /// Threshold for localizing the neurons of the new facts.
    pub tau: f64,
    pub train: TrainConfig,
}

impl Default for InjectConfig {
    fn default() -> Self {
        InjectConfig {
            tau: 0.8,
            train: TrainConfig {
                epochs: 30,
                lr: 1e-3,
                target_accuracy: None,
                ..Default::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub corpus: CorpusSource,
    pub model: ModelShape,
    /// Model read by localize, manipulate, edit and inject.
    pub checkpoint: Option<PathBuf>,
    pub train: TrainConfig,
    pub holdout: HoldoutConfig,
    pub plant: PlantSpec,
    pub saig: SaigConfig,
    pub uncertainty: UncertaintyParams,
    /// Facts to localize and manipulate; the first `n_facts` trained facts
    /// when empty.
    pub facts: Vec<String>,
    pub n_facts: Option<usize>,
    /// Planted neurons to score localization against.
    pub ground_truth: Option<PathBuf>,
    /// Reuse LAKN sets written by an earlier `localize`.
    pub lakn_dir: Option<PathBuf>,
    pub manipulate: ManipulateConfig,
    pub edit: EditConfig,
    pub inject: InjectConfig,
    pub output: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            corpus: CorpusSource::default(),
            model: ModelShape::default(),
            checkpoint: None,
            train: TrainConfig::default(),
            holdout: HoldoutConfig::default(),
            plant: PlantSpec::default(),
            saig: SaigConfig::default(),
            uncertainty: UncertaintyParams::default(),
            facts: Vec::new(),
            n_facts: None,
            ground_truth: None,
            lakn_dir: None,
            manipulate: ManipulateConfig::default(),
            edit: EditConfig::default(),
            inject: InjectConfig::default(),
            output: PathBuf::from("out"),
        }
    }
}

fn config_error(field: &str, message: impl Into<String>) -> LaknError {
    LaknError::Config {
        field: field.into(),
        message: message.into(),
    }
}

fn prefixed(prefix: &str, e: LaknError) -> LaknError {
    match e {
        LaknError::Config { field, message } => config_error(&format!("{prefix}.{field}"), message),
        other => other,
    }
}

impl ExperimentConfig {
    /// Parses a config document, reporting schema violations with the path
    /// of the offending field.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            config_error(&path, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| LaknError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.uncertainty.validate().map_err(|e| prefixed("uncertainty", e))?;
        if self.saig.steps == 0 {
            return Err(config_error("saig.steps", "must be positive"));
        }
        if !self.manipulate.factor.is_finite() {
            return Err(config_error("manipulate.factor", "must be finite"));
        }
        if !(self.inject.tau > 0.0 && self.inject.tau <= 1.0) {
            return Err(config_error("inject.tau", format!("{} is outside (0, 1]", self.inject.tau)));
        }
        if self.edit.lambda_grid.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(config_error("edit.lambda_grid", "entries must be finite and non-negative"));
        }
        for (field, v) in [("edit.lambda1", self.edit.lambda1), ("edit.lambda2", self.edit.lambda2)] {
            if v.is_some_and(|l| !l.is_finite()) {
                return Err(config_error(field, "must be finite"));
            }
        }
        if self.holdout.facts > 0 && self.holdout.known_languages == 0 {
            return Err(config_error("holdout.known_languages", "held-out facts need a known language"));
        }
        Ok(())
    }

    /// Planted model over 121 facts, 7 languages and 3 paraphrases with
    /// language- and template-bound distractors on the first 20 facts.
    pub fn planted_fixture() -> Self {
        let mut plant = PlantSpec::default();
        plant.distractors.n_facts = 20;
        plant.distractors.per_language = 1;
        plant.distractors.per_template = 4;
        plant.distractors.language_strength = 3.0;
        plant.distractors.template_strength = 0.5;
        plant.fallback_logit = 6.0;
        ExperimentConfig {
            corpus: CorpusSource::Synthetic(CorpusSpec::new(121, 7, 3)),
            plant,
            n_facts: Some(20),
            edit: EditConfig {
                lambda1: None,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    /// Trained model over 60 facts, 7 languages and 4 paraphrases, with
    /// languages sampled at decreasing rates so that later languages are
    /// learned less well. The last 10 facts are seen in two languages only
    /// and serve injection.
    pub fn trained_fixture() -> Self {
        ExperimentConfig {
            corpus: CorpusSource::Synthetic(CorpusSpec::new(60, 7, 4)),
            train: TrainConfig {
                epochs: 8,
                lr: 1e-3,
                language_weights: [("L2", 0.5), ("L3", 0.3), ("L4", 0.2), ("L5", 0.1), ("L6", 0.05)]
                    .into_iter()
                    .map(|(l, w)| (l.to_string(), w))
                    .collect(),
                ..Default::default()
            },
            holdout: HoldoutConfig {
                facts: 10,
                known_languages: 2,
            },
            uncertainty: UncertaintyParams {
                tau: 0.6,
                ..Default::default()
            },
            n_facts: Some(50),
            inject: InjectConfig {
                train: TrainConfig {
                    epochs: 24,
                    ..InjectConfig::default().train
                },
                ..Default::default()
            },
            ..Default::default()
        }
    }

    fn held_out(&self, corpus: &QuerySet) -> Vec<String> {
        let ids = corpus.fact_ids();
        ids[ids.len().saturating_sub(self.holdout.facts)..].to_vec()
    }

    /// Facts whose queries are all trained.
    pub fn known_facts(&self, corpus: &QuerySet) -> Vec<String> {
        let held: BTreeSet<String> = self.held_out(corpus).into_iter().collect();
        corpus.fact_ids().into_iter().filter(|f| !held.contains(f)).collect()
    }

    pub fn target_facts(&self, corpus: &QuerySet) -> Result<Vec<String>> {
        if !self.facts.is_empty() {
            for f in &self.facts {
                if corpus.fact(f).is_none() {
                    return Err(config_error("facts", format!("unknown fact {f}")));
                }
            }
            return Ok(self.facts.clone());
        }
        let mut known = self.known_facts(corpus);
        if let Some(n) = self.n_facts {
            if n > known.len() {
                return Err(config_error("n_facts", format!("{n} exceeds the {} available facts", known.len())));
            }
            known.truncate(n);
        }
        Ok(known)
    }

    /// Queries the model is trained on.
    pub fn training_queries(&self, corpus: &QuerySet) -> Vec<Query> {
        let held: BTreeSet<String> = self.held_out(corpus).into_iter().collect();
        let known_langs = &corpus.languages[..self.holdout.known_languages.min(corpus.languages.len())];
        corpus
            .queries
            .iter()
            .filter(|q| !held.contains(&q.fact_id) || known_langs.contains(&q.language))
            .cloned()
            .collect()
    }

    /// Queries of held-out facts in the languages they were not trained in.
    pub fn unseen_queries(&self, corpus: &QuerySet) -> Vec<Query> {
        let held: BTreeSet<String> = self.held_out(corpus).into_iter().collect();
        let known_langs = &corpus.languages[..self.holdout.known_languages.min(corpus.languages.len())];
        corpus
            .queries
            .iter()
            .filter(|q| held.contains(&q.fact_id) && !known_langs.contains(&q.language))
            .cloned()
            .collect()
    }

    pub fn load_model(&self) -> Result<ToyTransformer> {
        let path = self
            .checkpoint
            .as_ref()
            .ok_or_else(|| config_error("checkpoint", "this command needs a model checkpoint"))?;
        ToyTransformer::load(path)
    }
}

pub fn train_model(cfg: &ExperimentConfig, corpus: &QuerySet) -> Result<(ToyTransformer, TrainReport)> {
    let mut model = ToyTransformer::new(cfg.model.config(corpus.vocab.len(), cfg.seed))?;
    let tc = TrainConfig {
        seed: cfg.seed,
        ..cfg.train.clone()
    };
    let report = train(&mut model, &cfg.training_queries(corpus), &tc)?;
    Ok((model, report))
}

pub fn plant_model(cfg: &ExperimentConfig, corpus: &QuerySet) -> Result<PlantedModel> {
    let spec = PlantSpec {
        seed: cfg.seed,
        ..cfg.plant.clone()
    };
    plant_facts(corpus, &corpus.fact_ids(), &spec)
}

/// SAIG scores of every listed fact; queries within a fact run in parallel.
pub fn attribute_facts(
    model: &ToyTransformer,
    corpus: &QuerySet,
    facts: &[String],
    saig: &SaigConfig,
) -> Result<Vec<FactAttributions>> {
    facts
        .iter()
        .map(|f| {
            log::debug!("attributing {f}");
            attribute_fact(model, corpus, f, saig)
        })
        .collect()
}

pub fn select_sets(fas: &[FactAttributions], params: &UncertaintyParams) -> Result<Vec<LaknSet>> {
    fas.iter().map(|fa| Ok(matrice_from_scores(fa, params)?.lakn)).collect()
}

/// LAKN sets of `facts`, read from `lakn_dir` when configured.
pub fn localize(cfg: &ExperimentConfig, model: &ToyTransformer, corpus: &QuerySet, facts: &[String]) -> Result<Vec<LaknSet>> {
    if let Some(dir) = &cfg.lakn_dir {
        return facts
            .iter()
            .map(|f| {
                let path = dir.join(format!("{f}.json"));
                let text = fs::read_to_string(&path).map_err(|e| LaknError::io(&path, e))?;
                LaknSet::from_json(&text)
            })
            .collect();
    }
    select_sets(&attribute_facts(model, corpus, facts, &cfg.saig)?, &cfg.uncertainty)
}

/// A uniformly drawn set of `size` distinct FFN neurons labelled as `fact_id`.
pub fn random_set(model: &ToyTransformer, fact_id: &str, size: usize, rng: &mut ChaCha8Rng) -> LaknSet {
    let c = &model.config;
    let all: Vec<NeuronId> = (0..c.n_layers)
        .flat_map(|l| (0..c.d_ffn).map(move |i| NeuronId::new(l, i)))
        .collect();
    LaknSet {
        fact_id: fact_id.to_string(),
        threshold: 0.0,
        neurons: all
            .choose_multiple(rng, size.min(all.len()))
            .map(|n| ScoredNeuron {
                layer: n.layer,
                index: n.index,
                score: 0.0,
            })
            .collect(),
    }
}

/// Size-matched random counterparts of `sets`, drawn in order from one seed.
pub fn random_like(model: &ToyTransformer, sets: &[LaknSet], seed: u64) -> Vec<LaknSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sets.iter().map(|s| random_set(model, &s.fact_id, s.len(), &mut rng)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactDelta {
    pub fact_id: String,
    pub set_size: usize,
    /// Mean relative change over the fact's queries.
    pub delta: Option<f64>,
    pub per_language: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManipulationReport {
    pub kind: ManipulationKind,
    pub factor: f64,
    pub neurons: NeuronChoice,
    pub facts: Vec<FactDelta>,
    pub mean_delta: f64,
    pub per_language: BTreeMap<String, f64>,
    /// Accuracy of enhanced queries the model got wrong before.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy_gain: Option<GainReport>,
    pub model_hash: String,
}

fn overrides(model: &ToyTransformer, kind: ManipulationKind, factor: f64, set: &LaknSet) -> Result<Vec<ActivationOverride>> {
    match kind {
        ManipulationKind::Suppress => intervention::suppress(model, &set.ids()),
        ManipulationKind::Enhance => intervention::enhance(model, &set.ids(), factor),
    }
}

/// Relative probability change of each fact's queries when its set is
/// suppressed or scaled.
pub fn manipulate_sets(
    model: &ToyTransformer,
    corpus: &QuerySet,
    sets: &[LaknSet],
    kind: ManipulationKind,
    factor: f64,
) -> Result<Vec<FactDelta>> {
    sets.iter()
        .map(|s| {
            let ov = overrides(model, kind, factor, s)?;
            let mut by_lang: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
            for q in corpus.queries_of(&s.fact_id) {
                let pair = (model.predict_prob(q, q.answer, &[])?, model.predict_prob(q, q.answer, &ov)?);
                by_lang.entry(q.language.clone()).or_default().push(pair);
            }
            let all: Vec<(f64, f64)> = by_lang.values().flatten().copied().collect();
            Ok(FactDelta {
                fact_id: s.fact_id.clone(),
                set_size: s.len(),
                delta: eval::summarize_delta(&all).mean,
                per_language: by_lang
                    .iter()
                    .filter_map(|(l, p)| eval::summarize_delta(p).mean.map(|m| (l.clone(), m)))
                    .collect(),
            })
        })
        .collect()
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

pub fn run_manipulation(cfg: &ExperimentConfig, model: &ToyTransformer, corpus: &QuerySet) -> Result<ManipulationReport> {
    let facts = cfg.target_facts(corpus)?;
    let m = &cfg.manipulate;
    let sets = match (m.neurons, m.size_match) {
        (NeuronChoice::Lakn, _) => localize(cfg, model, corpus, &facts)?,
        (NeuronChoice::Random, true) => random_like(model, &localize(cfg, model, corpus, &facts)?, cfg.seed),
        (NeuronChoice::Random, false) => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            facts.iter().map(|f| random_set(model, f, m.random_size, &mut rng)).collect()
        }
    };
    let deltas = manipulate_sets(model, corpus, &sets, m.kind, m.factor)?;
    let mut langs: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for d in &deltas {
        for (l, v) in &d.per_language {
            langs.entry(l.clone()).or_default().push(*v);
        }
    }
    let accuracy_gain = match m.kind {
        ManipulationKind::Enhance => {
            let qs: Vec<Query> = facts.iter().flat_map(|f| corpus.queries_of(f).cloned()).collect();
            let q_error = partition_by_model(&qs, model)?.error;
            let by_fact: BTreeMap<String, LaknSet> = sets.iter().map(|s| (s.fact_id.clone(), s.clone())).collect();
            Some(eval::accuracy_gain(model, &q_error, &by_fact, m.factor)?)
        }
        ManipulationKind::Suppress => None,
    };
    Ok(ManipulationReport {
        kind: m.kind,
        factor: m.factor,
        neurons: m.neurons,
        mean_delta: mean(deltas.iter().filter_map(|d| d.delta)),
        per_language: langs.into_iter().map(|(l, v)| (l, mean(v))).collect(),
        facts: deltas,
        accuracy_gain,
        model_hash: model.hash(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactEdit {
    pub fact_id: String,
    pub set_size: usize,
    /// Top-1 target hits per language on paraphrase 0, in percent.
    pub reliability: BTreeMap<String, f64>,
    /// Same on the remaining paraphrases.
    pub generality: Option<f64>,
    pub locality: f64,
    /// Languages whose queries all return the target after the edit.
    pub languages_held: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditArm {
    pub facts: Vec<FactEdit>,
    pub reliability: BTreeMap<String, f64>,
    pub generality: Option<f64>,
    pub locality: f64,
    pub pairs_held: usize,
    pub pairs: usize,
}

impl EditArm {
    pub fn held_percent(&self) -> f64 {
        if self.pairs == 0 {
            0.0
        } else {
            100.0 * self.pairs_held as f64 / self.pairs as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditReport {
    pub kind: EditKind,
    pub lambda1: Option<f64>,
    pub lambda2: Option<f64>,
    /// Target reliability per language before any edit.
    pub reliability_before: BTreeMap<String, f64>,
    pub lakn: EditArm,
    pub random: Option<EditArm>,
    pub unrelated_queries: usize,
    pub model_hash: String,
    /// Every applied edit, in order; each is rolled back before the next.
    pub log: Vec<intervention::EditRecord>,
}

/// Query list with the answer rewritten to `to`.
fn retarget(qs: &[Query], to: Option<usize>) -> Vec<Query> {
    qs.iter().map(|q| to.map_or_else(|| q.clone(), |t| q.with_answer(t))).collect()
}

fn split_reliability(model: &ToyTransformer, corpus: &QuerySet, qs: &[Query]) -> Result<(BTreeMap<String, f64>, Option<f64>)> {
    let first: Vec<Query> = qs.iter().filter(|q| q.paraphrase_index == 0).cloned().collect();
    let rest: Vec<Query> = qs.iter().filter(|q| q.paraphrase_index != 0).cloned().collect();
    let mut rel = eval::per_language(&first, |g| eval::reliability(model, g))?;
    for l in &corpus.languages {
        rel.entry(l.clone()).or_insert(0.0);
    }
    Ok((rel, eval::generality(model, &rest)?))
}

struct EditPlan {
    kind: EditKind,
    erase_keys_too: bool,
    lambdas: (f64, f64),
}

impl EditPlan {
    fn apply(&self, model: &mut ToyTransformer, set: &LaknSet, from: usize, to: usize) -> Result<intervention::Edit> {
        match self.kind {
            EditKind::Erase => intervention::erase_weights(model, set, self.erase_keys_too),
            EditKind::Update => intervention::update_weights(model, set, from, to, self.lambdas.0, self.lambdas.1),
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn run_arm(
    model: &mut ToyTransformer,
    pre: &[usize],
    corpus: &QuerySet,
    sets: &[LaknSet],
    targets: &BTreeMap<String, usize>,
    plan: &EditPlan,
    unrelated: &[Query],
    log: &mut Vec<intervention::EditRecord>,
) -> Result<EditArm> {
    let mut facts = Vec::new();
    let mut hits: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut gen = Vec::new();
    let (mut held, mut pairs) = (0, 0);
    for s in sets {
        let qs: Vec<Query> = corpus.queries_of(&s.fact_id).cloned().collect();
        let from = qs.first().map(|q| q.answer).ok_or_else(|| LaknError::Contract(format!("fact {} has no queries", s.fact_id)))?;
        let to = targets.get(&s.fact_id).copied();
        let edit = plan.apply(model, s, from, to.unwrap_or(from))?;
        let goal = retarget(&qs, to);
        let (rel, g) = split_reliability(model, corpus, &goal)?;
        let mut languages_held = 0;
        for l in &corpus.languages {
            let lq: Vec<&Query> = goal.iter().filter(|q| &q.language == l).collect();
            let mut all = !lq.is_empty();
            for q in &lq {
                all &= model.top1(q, &[])? == q.answer;
            }
            languages_held += usize::from(all);
            pairs += 1;
        }
        held += languages_held;
        for (l, v) in &rel {
            hits.entry(l.clone()).or_default().push(*v);
        }
        gen.extend(g);
        let loc = eval::locality_against(pre, model, unrelated)?;
        log.push(edit.record.clone());
        intervention::rollback(model, &edit)?;
        facts.push(FactEdit {
            fact_id: s.fact_id.clone(),
            set_size: s.len(),
            reliability: rel,
            generality: g,
            locality: loc,
            languages_held,
        });
    }
    Ok(EditArm {
        reliability: hits.into_iter().map(|(l, v)| (l, mean(v))).collect(),
        generality: (!gen.is_empty()).then(|| mean(gen.iter().copied())),
        locality: mean(facts.iter().map(|f| f.locality)),
        pairs_held: held,
        pairs,
        facts,
    })
}

/// Erases or updates each target fact's neurons in turn, measuring
/// reliability per language, generality and locality, then rolls back.
pub fn run_edit(cfg: &ExperimentConfig, model: &ToyTransformer, corpus: &QuerySet) -> Result<EditReport> {
    let facts = cfg.target_facts(corpus)?;
    let sets = localize(cfg, model, corpus, &facts)?;
    edit_sets(cfg, model, corpus, &sets)
}

/// [`run_edit`] on given sets, one per target fact.
pub fn edit_sets(cfg: &ExperimentConfig, model: &ToyTransformer, corpus: &QuerySet, sets: &[LaknSet]) -> Result<EditReport> {
    let facts: Vec<String> = sets.iter().map(|s| s.fact_id.clone()).collect();
    let e = &cfg.edit;
    let target_set: BTreeSet<&String> = facts.iter().collect();
    let others: Vec<String> = cfg.known_facts(corpus).into_iter().filter(|f| !target_set.contains(f)).collect();

    // Update targets: each fact takes the next target fact's object.
    let answer = |f: &str| corpus.queries_of(f).next().map(|q| q.answer);
    let mut targets = BTreeMap::new();
    if e.kind == EditKind::Update {
        if facts.len() < 2 {
            return Err(config_error("facts", "update needs at least two target facts"));
        }
        for (i, f) in facts.iter().enumerate() {
            if let Some(a) = answer(&facts[(i + 1) % facts.len()]) {
                targets.insert(f.clone(), a);
            }
        }
    }

    let mut work = model.clone();
    let (lambda1, lambda2) = match e.kind {
        EditKind::Erase => (None, None),
        EditKind::Update => {
            let l2 = match e.lambda2 {
                Some(l) => l,
                None => {
                    let cal = match &e.calibration_fact {
                        Some(f) => f.clone(),
                        None => others
                            .first()
                            .cloned()
                            .ok_or_else(|| config_error("edit.calibration_fact", "no fact left for calibration"))?,
                    };
                    let lang = e.source_language.clone().unwrap_or_else(|| corpus.languages[0].clone());
                    let cq: Vec<Query> = corpus.queries_of(&cal).filter(|q| q.language == lang).cloned().collect();
                    let cal_fa = attribute_fact(model, corpus, &cal, &cfg.saig)?;
                    let cal_set = matrice_from_scores(&cal_fa, &cfg.uncertainty)?.lakn;
                    let from = answer(&cal).ok_or_else(|| config_error("edit.calibration_fact", "fact has no queries"))?;
                    let to = answer(&facts[0]).unwrap_or(from);
                    intervention::calibrate_lambda(&mut work, &cal_set, &cq, from, to, e.lambda1, &e.lambda_grid)?
                        .ok_or_else(|| config_error("edit.lambda_grid", "no grid value flips the calibration fact"))?
                }
            };
            (Some(e.lambda1.unwrap_or(l2)), Some(l2))
        }
    };
    let plan = EditPlan {
        kind: e.kind,
        erase_keys_too: e.erase_keys_too,
        lambdas: (lambda1.unwrap_or(0.0), lambda2.unwrap_or(0.0)),
    };

    let skip = e.calibration_fact.clone().or_else(|| (e.kind == EditKind::Update).then(|| others.first().cloned()).flatten());
    let unrelated: Vec<Query> = others
        .iter()
        .filter(|f| Some(*f) != skip.as_ref())
        .take(e.unrelated_facts)
        .flat_map(|f| corpus.queries_of(f).cloned())
        .collect();

    let before: Vec<Query> = facts
        .iter()
        .flat_map(|f| retarget(&corpus.queries_of(f).cloned().collect::<Vec<_>>(), targets.get(f).copied()))
        .collect();
    let reliability_before = split_reliability(model, corpus, &before)?.0;

    let pre = eval::predictions(model, &unrelated)?;
    let mut log = Vec::new();
    let lakn = run_arm(&mut work, &pre, corpus, sets, &targets, &plan, &unrelated, &mut log)?;
    let random = if e.random_baseline {
        let rs = random_like(model, sets, cfg.seed);
        Some(run_arm(&mut work, &pre, corpus, &rs, &targets, &plan, &unrelated, &mut log)?)
    } else {
        None
    };
    for (i, r) in log.iter_mut().enumerate() {
        r.timestamp = i as u64;
    }
    Ok(EditReport {
        kind: e.kind,
        lambda1,
        lambda2,
        reliability_before,
        lakn,
        random,
        unrelated_queries: unrelated.len(),
        model_hash: model.hash(),
        log,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectionReport {
    pub q_new: usize,
    pub q_old: usize,
    pub mask_neurons: usize,
    pub mask_scalars: usize,
    pub before: InjectionScores,
    pub lakn: InjectionScores,
    pub direct: InjectionScores,
    /// Every parameter outside the mask is bit-identical after LAKN training.
    pub frozen_identical: bool,
    pub lakn_epochs: usize,
    pub direct_epochs: usize,
    pub model_hash: String,
}

/// Bitwise comparison of the parameters the mask leaves frozen.
pub fn frozen_identical(before: &ToyTransformer, after: &ToyTransformer, mask: &ParamMask) -> bool {
    let (a, b) = (before.params.tensors(), after.params.tensors());
    a.iter().zip(&b).enumerate().all(|(i, (x, y))| {
        x.data()
            .iter()
            .zip(y.data())
            .zip(mask.tensor(i))
            .all(|((p, q), &trainable)| trainable || p.to_bits() == q.to_bits())
    })
}

/// Fine-tunes on the unseen queries of held-out facts twice: once through
/// the held-out facts' LAKNs only and once with every parameter trainable.
pub fn run_injection(cfg: &ExperimentConfig, model: &ToyTransformer, corpus: &QuerySet) -> Result<InjectionReport> {
    if cfg.holdout.facts == 0 {
        return Err(config_error("holdout.facts", "injection needs held-out facts"));
    }
    let q_new = partition_by_model(&cfg.unseen_queries(corpus), model)?.error;
    if q_new.is_empty() {
        return Err(LaknError::Contract("the model already answers every unseen query".into()));
    }
    let known: Vec<Query> = cfg
        .known_facts(corpus)
        .iter()
        .flat_map(|f| corpus.queries_of(f).cloned())
        .collect();
    let q_old = partition_by_model(&known, model)?.correct;
    let params = UncertaintyParams {
        tau: cfg.inject.tau,
        ..cfg.uncertainty.clone()
    };
    let held = cfg.held_out(corpus);
    let sets = select_sets(&attribute_facts(model, corpus, &held, &cfg.saig)?, &params)?;
    let mask = intervention::lakn_mask(model, &sets)?;
    let neurons: BTreeSet<NeuronId> = sets.iter().flat_map(LaknSet::ids).collect();
    let tc = TrainConfig {
        seed: cfg.seed,
        ..cfg.inject.train.clone()
    };

    let mut lakn_model = model.clone();
    let lr = intervention::inject_finetune(&mut lakn_model, &q_new, &mask, &tc)?;
    let mut direct_model = model.clone();
    let all = ParamMask::all(&direct_model.params);
    let dr = intervention::inject_finetune(&mut direct_model, &q_new, &all, &tc)?;
    Ok(InjectionReport {
        q_new: q_new.len(),
        q_old: q_old.len(),
        mask_neurons: neurons.len(),
        mask_scalars: mask.n_trainable(),
        before: eval::injection_eval(model, &q_new, &q_old)?,
        lakn: eval::injection_eval(&lakn_model, &q_new, &q_old)?,
        direct: eval::injection_eval(&direct_model, &q_new, &q_old)?,
        frozen_identical: frozen_identical(model, &lakn_model, &mask),
        lakn_epochs: lr.epochs_run,
        direct_epochs: dr.epochs_run,
        model_hash: model.hash(),
    })
}

/// Flattens every numeric leaf of the JSON reports in `dir` into
/// `file,path,value` rows, files and keys in sorted order.
pub fn merge_reports(dir: impl AsRef<Path>) -> Result<String> {
    let dir = dir.as_ref();
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| LaknError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    let mut out = String::from("file,path,value\n");
    for f in files {
        let text = fs::read_to_string(&f).map_err(|e| LaknError::io(&f, e))?;
        let Ok(v) = serde_json::from_str::<serde_json::Value>(&text) else {
            continue;
        };
        let name = f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let mut rows = Vec::new();
        flatten("", &v, &mut rows);
        for (p, x) in rows {
            out.push_str(&format!("{name},{p},{x}\n"));
        }
    }
    Ok(out)
}

fn flatten(prefix: &str, v: &serde_json::Value, rows: &mut Vec<(String, String)>) {
    use serde_json::Value;
    let join = |k: &str| if prefix.is_empty() { k.to_string() } else { format!("{prefix}.{k}") };
    match v {
        Value::Number(n) => rows.push((prefix.to_string(), n.to_string())),
        Value::Bool(b) => rows.push((prefix.to_string(), u8::from(*b).to_string())),
        Value::Object(m) => m.iter().for_each(|(k, x)| flatten(&join(k), x, rows)),
        Value::Array(a) => a.iter().enumerate().for_each(|(i, x)| flatten(&join(&i.to_string()), x, rows)),
        _ => {}
    }
}
