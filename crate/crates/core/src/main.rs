use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use lakn::corpus::{write_jsonl, QuerySet};
use lakn::eval;
use lakn::experiment::{self, EditKind, ExperimentConfig, ManipulationKind, NeuronChoice};
use lakn::intervention::EditLog;
use lakn::{LaknError, Result};

#[derive(Parser)]
#[command(name = "lakn", version, about = "Localize and manipulate language-agnostic knowledge neurons in toy transformers")]
struct Cli {
    /// Experiment config (one JSON document).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for fact- and query-level parallelism.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Directory receiving all artifacts.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Ablation {
    Uaq,
    Ual,
}

#[derive(Args, Default)]
struct Common {
    /// Model checkpoint to read.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    tau: Option<f64>,
    /// Riemann steps M of the attribution integral.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, value_enum)]
    ablate: Option<Ablation>,
    /// Only the first N target facts.
    #[arg(long)]
    n_facts: Option<usize>,
    /// Reuse LAKN sets from an earlier `localize`.
    #[arg(long)]
    lakn_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured corpus as JSONL.
    GenCorpus,
    /// Train a toy model on the corpus.
    Train,
    /// Build a model with planted knowledge neurons.
    Plant,
    /// Localize LAKNs of the target facts.
    Localize {
        #[command(flatten)]
        common: Common,
        /// Planted neurons to score recovery against.
        #[arg(long)]
        ground_truth: Option<PathBuf>,
    },
    /// Probability change under suppression or enhancement.
    Manipulate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        kind: Option<ManipulationKind>,
        #[arg(long)]
        factor: Option<f64>,
        #[arg(long, value_enum)]
        neurons: Option<NeuronChoice>,
        /// Random sets take the size of each fact's LAKN set.
        #[arg(long)]
        size_match: bool,
    },
    /// Erase or update facts through their LAKNs.
    Edit {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        kind: Option<EditKind>,
        #[arg(long)]
        lambda1: Option<f64>,
        #[arg(long)]
        lambda2: Option<f64>,
    },
    /// LAKN-masked fine-tuning against full fine-tuning on new facts.
    Inject {
        #[command(flatten)]
        common: Common,
    },
    /// Merge the JSON reports of a directory into one CSV.
    Report {
        /// Directory of reports; the output directory when unset.
        #[arg(long)]
        input: Option<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenCorpus => "gen-corpus",
            Command::Train => "train",
            Command::Plant => "plant",
            Command::Localize { .. } => "localize",
            Command::Manipulate { .. } => "manipulate",
            Command::Edit { .. } => "edit",
            Command::Inject { .. } => "inject",
            Command::Report { .. } => "report",
        }
    }
}

impl Common {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(p) = &self.checkpoint {
            cfg.checkpoint = Some(p.clone());
        }
        if let Some(t) = self.tau {
            cfg.uncertainty.tau = t;
        }
        if let Some(m) = self.steps {
            cfg.saig.steps = m;
        }
        match self.ablate {
            Some(Ablation::Uaq) => cfg.uncertainty.disable_uaq = true,
            Some(Ablation::Ual) => cfg.uncertainty.disable_ual = true,
            None => {}
        }
        if let Some(n) = self.n_facts {
            cfg.n_facts = Some(n);
        }
        if let Some(d) = &self.lakn_dir {
            cfg.lakn_dir = Some(d.clone());
        }
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| LaknError::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write(path, text)
}

fn load_corpus(cfg: &ExperimentConfig) -> Result<QuerySet> {
    cfg.corpus.load()
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.output {
        cfg.output = o.clone();
    }
    match &cli.command {
        Command::Localize { common, ground_truth } => {
            common.apply(&mut cfg);
            if let Some(g) = ground_truth {
                cfg.ground_truth = Some(g.clone());
            }
        }
        Command::Manipulate {
            common,
            kind,
            factor,
            neurons,
            size_match,
        } => {
            common.apply(&mut cfg);
            if let Some(k) = kind {
                cfg.manipulate.kind = *k;
            }
            if let Some(f) = factor {
                cfg.manipulate.factor = *f;
            }
            if let Some(n) = neurons {
                cfg.manipulate.neurons = *n;
            }
            if *size_match {
                cfg.manipulate.size_match = true;
            }
        }
        Command::Edit {
            common,
            kind,
            lambda1,
            lambda2,
        } => {
            common.apply(&mut cfg);
            if let Some(k) = kind {
                cfg.edit.kind = *k;
            }
            if lambda1.is_some() {
                cfg.edit.lambda1 = *lambda1;
            }
            if lambda2.is_some() {
                cfg.edit.lambda2 = *lambda2;
            }
        }
        Command::Inject { common } => common.apply(&mut cfg),
        _ => {}
    }
    cfg.validate()?;
    if let Some(n) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| LaknError::Contract(format!("thread pool: {e}")))?;
    }

    let out = cfg.output.clone();
    fs::create_dir_all(&out).map_err(|e| LaknError::io(&out, e))?;
    if !matches!(cli.command, Command::Report { .. }) {
        write(&out.join(format!("{}.config.json", cli.command.name())), cfg.to_json() + "\n")?;
    }

    match cli.command {
        Command::GenCorpus => {
            let corpus = load_corpus(&cfg)?;
            write_jsonl(&corpus, out.join("corpus.jsonl"))?;
            write_json(&out.join("corpus_stats.json"), &corpus.stats())?;
        }
        Command::Train => {
            let corpus = load_corpus(&cfg)?;
            let (model, report) = experiment::train_model(&cfg, &corpus)?;
            model.save(out.join("model.ckpt"))?;
            write_json(&out.join("train_report.json"), &report)?;
            write(&out.join("model_hash.txt"), model.hash() + "\n")?;
        }
        Command::Plant => {
            let corpus = load_corpus(&cfg)?;
            let planted = experiment::plant_model(&cfg, &corpus)?;
            planted.model.save(out.join("model.ckpt"))?;
            write_json(&out.join("ground_truth.json"), &planted.ground_truth)?;
            write(&out.join("model_hash.txt"), planted.model.hash() + "\n")?;
        }
        Command::Localize { .. } => {
            let corpus = load_corpus(&cfg)?;
            let model = cfg.load_model()?;
            let facts = cfg.target_facts(&corpus)?;
            let sets = experiment::localize(&cfg, &model, &corpus, &facts)?;
            let dir = out.join("lakn");
            fs::create_dir_all(&dir).map_err(|e| LaknError::io(&dir, e))?;
            for s in &sets {
                write(&dir.join(format!("{}.json", s.fact_id)), s.to_json() + "\n")?;
            }
            let dist = eval::layer_distribution(&sets, model.config.n_layers)?;
            write(&out.join("layer_distribution.csv"), eval::layer_distribution_csv(&dist))?;
            let sizes: std::collections::BTreeMap<&str, usize> = sets.iter().map(|s| (s.fact_id.as_str(), s.len())).collect();
            write_json(
                &out.join("localize.json"),
                &serde_json::json!({ "model_hash": model.hash(), "set_sizes": sizes, "layer_distribution": dist }),
            )?;
            if let Some(g) = &cfg.ground_truth {
                let text = fs::read_to_string(g).map_err(|e| LaknError::io(g, e))?;
                let truth = serde_json::from_str(&text)?;
                write_json(&out.join("recovery.json"), &eval::recovery(&sets, &truth, 5)?)?;
            }
        }
        Command::Manipulate { .. } => {
            let corpus = load_corpus(&cfg)?;
            let model = cfg.load_model()?;
            let report = experiment::run_manipulation(&cfg, &model, &corpus)?;
            let name = format!(
                "manipulate-{}-{}.json",
                serde_json::to_value(report.kind)?.as_str().unwrap_or("kind"),
                serde_json::to_value(report.neurons)?.as_str().unwrap_or("neurons"),
            );
            write_json(&out.join(name), &report)?;
        }
        Command::Edit { .. } => {
            let corpus = load_corpus(&cfg)?;
            let model = cfg.load_model()?;
            let report = experiment::run_edit(&cfg, &model, &corpus)?;
            let log_path = out.join("edits.jsonl");
            if log_path.exists() {
                fs::remove_file(&log_path).map_err(|e| LaknError::io(&log_path, e))?;
            }
            let mut log = EditLog::open(&log_path)?;
            for r in &report.log {
                log.append(r)?;
            }
            let name = if report.kind == EditKind::Erase { "edit-erase.json" } else { "edit-update.json" };
            write_json(&out.join(name), &report)?;
        }
        Command::Inject { .. } => {
            let corpus = load_corpus(&cfg)?;
            let model = cfg.load_model()?;
            let report = experiment::run_injection(&cfg, &model, &corpus)?;
            write_json(&out.join("inject.json"), &report)?;
        }
        Command::Report { input } => {
            let dir = input.unwrap_or_else(|| out.clone());
            write(&out.join("summary.csv"), experiment::merge_reports(&dir)?)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("LAKN_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let doc = serde_json::json!({ "error": { "kind": e.kind(), "message": e.to_string() } });
            eprintln!("{doc}");
            ExitCode::FAILURE
        }
    }
}
