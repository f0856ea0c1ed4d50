//! `opnas`: run architecture searches, evaluate specs, export the published
//! architectures, compute token-uniformity metrics and emit plot data.
//!
//! Exit codes: 0 ok, 2 config, 3 checkpoint, 4 spec, 5 data.

mod config;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use opnas_core::biws::Supernet;
use opnas_core::container::MAGIC;
use opnas_core::evolution::{
    read_history, run_persistent, Algorithm, EvolutionError, HistoryRecord, Search, SyntheticFitness,
    TrainingEvaluator, CHECKPOINT_FILE, EVALUATOR_FILE,
};
use opnas_core::metrics::uniformity_report;
use opnas_core::model::{make_eval_set, mlm_pretrain, proxy_evaluate, synth_corpus, Corpus, Model};
use opnas_core::search_space::{
    autobert_zero_backbone, count_params, from_json, standard_backbone, to_json, BackboneSpec, PrimitiveOp,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use config::{EvaluatorKind, Overrides, RunConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Code {
    Config = 2,
    Checkpoint = 3,
    Spec = 4,
    Data = 5,
}

#[derive(Debug)]
struct Failure {
    code: Code,
    error: anyhow::Error,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

impl std::error::Error for Failure {}

trait OrCode<T> {
    fn or_code(self, code: Code) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> OrCode<T> for Result<T, E> {
    fn or_code(self, code: Code) -> Result<T, Failure> {
        self.map_err(|e| Failure { code, error: e.into() })
    }
}

type CmdResult = Result<(), Failure>;

#[derive(Parser)]
#[command(name = "opnas", version, about = "Operation-priority architecture search for attention/convolution backbones")]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for candidate evaluation.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Run directory; every output goes here.
    #[arg(long, global = true, env = "OPNAS_OUT_DIR", default_value = "runs")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run OP-NAS or a baseline search.
    Search(SearchArgs),
    /// Validate a spec, count its parameters and optionally score it.
    Eval(EvalArgs),
    /// Write a published architecture file.
    ExportArch(ExportArgs),
    /// Token-uniformity CSV for one or more specs.
    Metrics(MetricsArgs),
    /// Best-score-so-far CSV from search histories.
    PlotData(PlotArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Baseline {
    Op,
    Ea,
    Rs,
}

#[derive(Args)]
struct SearchArgs {
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    population: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, value_enum, default_value = "op")]
    baseline: Baseline,
    /// Continue the search checkpointed in the run directory.
    #[arg(long)]
    resume: bool,
    /// Weight-sharing initialization; optionally start from a supernet checkpoint.
    #[arg(long, num_args = 0..=1, value_name = "CHECKPOINT")]
    biws: Option<Option<PathBuf>>,
    /// Stop after this many iterations, leaving a resumable run.
    #[arg(long, hide = true)]
    halt_after: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    spec: PathBuf,
    /// Skip training; the score is omitted.
    #[arg(long)]
    dry_run: bool,
    /// Initialize from this supernet checkpoint.
    #[arg(long, value_name = "CHECKPOINT")]
    biws: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    /// autobert-zero or standard-attention.
    name: String,
    #[arg(long)]
    layers: Option<usize>,
}

#[derive(Args)]
struct MetricsArgs {
    /// Architecture files or model checkpoints.
    #[arg(required = true)]
    specs: Vec<PathBuf>,
    /// Number of seeds, starting at --seed.
    #[arg(long, default_value_t = 3)]
    seeds: u64,
    /// Skip training.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args)]
struct PlotArgs {
    #[arg(required = true)]
    histories: Vec<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code as u8)
        }
    }
}

fn run(cli: Cli) -> CmdResult {
    let base = RunConfig::load(cli.config.as_deref()).or_code(Code::Config)?;
    let mut overrides = Overrides {
        seed: cli.seed,
        ..Default::default()
    };
    if let Command::Search(a) = &cli.command {
        overrides.iterations = a.iterations;
        overrides.population = a.population;
        overrides.k = a.k;
        overrides.alpha = a.alpha;
    }
    let cfg = base.resolve(&overrides).or_code(Code::Config)?;
    fs::create_dir_all(&cli.out_dir)
        .with_context(|| format!("cannot create {}", cli.out_dir.display()))
        .or_code(Code::Config)?;
    let out = cli.out_dir.as_path();
    match &cli.command {
        Command::Search(a) => cmd_search(cfg, a, out, cli.jobs),
        Command::Eval(a) => cmd_eval(&cfg, a, out),
        Command::ExportArch(a) => cmd_export_arch(&cfg, a, out),
        Command::Metrics(a) => cmd_metrics(&cfg, a, out),
        Command::PlotData(a) => cmd_plot_data(a, out),
    }
}

fn persist_config(cfg: &RunConfig, out: &Path) -> CmdResult {
    fs::write(out.join("config.toml"), cfg.to_toml()).or_code(Code::Config)
}

fn corpus_for(cfg: &RunConfig, seed: u64) -> Corpus {
    synth_corpus(seed, cfg.corpus.size, cfg.model.vocab, cfg.model.seq_len)
}

fn training_evaluator(cfg: &RunConfig, supernet: Option<Supernet>) -> TrainingEvaluator {
    let corpus = corpus_for(cfg, cfg.seed);
    let eval_set = make_eval_set(&corpus, cfg.corpus.eval_mask_prob, cfg.seed);
    TrainingEvaluator::new(cfg.model, cfg.train, corpus, eval_set, supernet)
}

fn attention_fitness() -> SyntheticFitness {
    SyntheticFitness::Ops(vec![PrimitiveOp::Scale, PrimitiveOp::Transpose, PrimitiveOp::Matmul, PrimitiveOp::Softmax])
}

fn cmd_search(mut cfg: RunConfig, a: &SearchArgs, out: &Path, jobs: usize) -> CmdResult {
    let algorithm = match a.baseline {
        Baseline::Op => Algorithm::Op,
        Baseline::Ea => Algorithm::Ea,
        Baseline::Rs => Algorithm::Rs,
    };
    let fresh = if a.resume {
        let stored = out.join("config.toml");
        cfg = RunConfig::load(Some(&stored))
            .and_then(|c| c.resolve(&Overrides::default()))
            .or_code(Code::Checkpoint)?;
        if !out.join(CHECKPOINT_FILE).exists() {
            return Err(anyhow!("no checkpoint in {}", out.display())).or_code(Code::Checkpoint);
        }
        None
    } else {
        persist_config(&cfg, out)?;
        Some((cfg.search.clone(), algorithm))
    };
    let search = match cfg.evaluator {
        EvaluatorKind::Synthetic => {
            let mut ev = attention_fitness();
            run_persistent(fresh, &mut ev, out, jobs, a.halt_after)
        }
        EvaluatorKind::Training => {
            let supernet = match &a.biws {
                None if a.resume && out.join(EVALUATOR_FILE).exists() => {
                    Some(Supernet::new(&cfg.model, cfg.seed).or_code(Code::Config)?)
                }
                None => None,
                Some(None) => Some(Supernet::new(&cfg.model, cfg.seed).or_code(Code::Config)?),
                Some(Some(p)) => Some(Supernet::load(p).or_code(Code::Checkpoint)?),
            };
            let mut ev = training_evaluator(&cfg, supernet);
            let s = run_persistent(fresh, &mut ev, out, jobs, a.halt_after);
            if let (Ok(_), Some(net)) = (&s, ev.supernet()) {
                net.save(&out.join("supernet.bin")).or_code(Code::Checkpoint)?;
            }
            s
        }
    };
    let search = search.map_err(|e| {
        let code = match e {
            EvolutionError::Checkpoint(_) => Code::Checkpoint,
            EvolutionError::Config(_) => Code::Config,
            _ => Code::Data,
        };
        Failure { code, error: e.into() }
    })?;
    report_search(&search, out)
}

fn report_search(search: &Search, out: &Path) -> CmdResult {
    let Some(best) = search.best() else {
        return Ok(());
    };
    fs::write(out.join("best_arch.json"), to_json(&best.spec)).or_code(Code::Data)?;
    #[derive(Serialize)]
    struct Summary {
        finished: bool,
        evaluations: usize,
        best_id: u64,
        best_score: f64,
    }
    let s = Summary {
        finished: search.is_finished(),
        evaluations: search.state().evaluations,
        best_id: best.id,
        best_score: best.score,
    };
    println!("{}", serde_json::to_string(&s).expect("summary serializes"));
    Ok(())
}

fn read_spec(path: &Path, max_len: usize) -> Result<BackboneSpec, Failure> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read {}", path.display()))
        .or_code(Code::Spec)?;
    let spec = from_json(&text).or_code(Code::Spec)?;
    spec.validate(max_len).or_code(Code::Spec)?;
    Ok(spec)
}

fn cmd_eval(cfg: &RunConfig, a: &EvalArgs, out: &Path) -> CmdResult {
    let spec = read_spec(&a.spec, cfg.search.max_path_len)?;
    let mut model_cfg = cfg.model;
    model_cfg.num_layers = spec.len();
    let count = count_params(&spec, &model_cfg);
    #[derive(Serialize)]
    struct EvalOutput {
        valid: bool,
        params: usize,
        attention_params: usize,
        conv_params: usize,
        #[serde(skip_serializing_if = "Option::is_none")]
        score: Option<f64>,
    }
    let mut score = None;
    if !a.dry_run {
        persist_config(cfg, out)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut model = match &a.biws {
            Some(p) => {
                let net = Supernet::load(p).or_code(Code::Checkpoint)?;
                if net.config() != &model_cfg {
                    return Err(anyhow!("supernet config does not match the run config")).or_code(Code::Checkpoint);
                }
                let params = net.init_candidate(&spec).or_code(Code::Checkpoint)?;
                Model::from_params(&spec, &model_cfg, params).or_code(Code::Checkpoint)?
            }
            None => Model::random(&spec, &model_cfg, &mut rng).or_code(Code::Config)?,
        };
        let corpus = corpus_for(cfg, cfg.seed);
        let eval_set = make_eval_set(&corpus, cfg.corpus.eval_mask_prob, cfg.seed);
        mlm_pretrain(&mut model, &corpus, &cfg.train, &mut rng).or_code(Code::Data)?;
        score = Some(proxy_evaluate(&model, &eval_set).or_code(Code::Data)?);
        model.save(&out.join("model.bin")).or_code(Code::Checkpoint)?;
    }
    let o = EvalOutput {
        valid: true,
        params: count.total(),
        attention_params: count.attention,
        conv_params: count.conv,
        score,
    };
    println!("{}", serde_json::to_string(&o).expect("output serializes"));
    Ok(())
}

fn cmd_export_arch(cfg: &RunConfig, a: &ExportArgs, out: &Path) -> CmdResult {
    let layers = a.layers.unwrap_or(cfg.model.num_layers);
    let spec = match a.name.as_str() {
        "autobert-zero" => autobert_zero_backbone(layers).or_code(Code::Config)?,
        "standard-attention" => standard_backbone(layers).or_code(Code::Config)?,
        other => {
            return Err(anyhow!(
                "unknown architecture {other:?} (expected autobert-zero or standard-attention)"
            ))
            .or_code(Code::Config)
        }
    };
    let path = out.join(format!("{}.json", a.name));
    fs::write(&path, to_json(&spec)).or_code(Code::Config)?;
    println!("{}", path.display());
    Ok(())
}

fn load_model_or_spec(path: &Path, cfg: &RunConfig) -> Result<Result<Model, BackboneSpec>, Failure> {
    let bytes = fs::read(path)
        .with_context(|| format!("cannot read {}", path.display()))
        .or_code(Code::Spec)?;
    if bytes.starts_with(MAGIC) {
        return Ok(Ok(Model::load(path).or_code(Code::Checkpoint)?));
    }
    Ok(Err(read_spec(path, cfg.search.max_path_len)?))
}

fn cmd_metrics(cfg: &RunConfig, a: &MetricsArgs, out: &Path) -> CmdResult {
    persist_config(cfg, out)?;
    let inputs = a
        .specs
        .iter()
        .map(|p| {
            let name = p.file_stem().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned());
            Ok((name, load_model_or_spec(p, cfg)?))
        })
        .collect::<Result<Vec<_>, Failure>>()?;
    let mut writer = csv::Writer::from_path(out.join("uniformity.csv")).or_code(Code::Data)?;
    writer.write_record(["model", "cosine", "residual", "seed"]).or_code(Code::Data)?;
    for seed in cfg.seed..cfg.seed + a.seeds {
        let corpus = corpus_for(cfg, seed);
        let mut models = Vec::with_capacity(inputs.len());
        for (name, input) in &inputs {
            let model = match input {
                Ok(m) => m.clone(),
                Err(spec) => {
                    let mut mc = cfg.model;
                    mc.num_layers = spec.len();
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let mut m = Model::random(spec, &mc, &mut rng).or_code(Code::Config)?;
                    if !a.dry_run {
                        mlm_pretrain(&mut m, &corpus, &cfg.train, &mut rng).or_code(Code::Data)?;
                    }
                    m
                }
            };
            models.push((name.clone(), model));
        }
        let refs: Vec<(String, &Model)> = models.iter().map(|(n, m)| (n.clone(), m)).collect();
        for row in uniformity_report(&refs, &corpus.heldout).or_code(Code::Data)? {
            writer
                .write_record([row.model, row.cosine.to_string(), row.residual.to_string(), seed.to_string()])
                .or_code(Code::Data)?;
        }
    }
    writer.flush().or_code(Code::Data)?;
    println!("{}", out.join("uniformity.csv").display());
    Ok(())
}

fn cmd_plot_data(a: &PlotArgs, out: &Path) -> CmdResult {
    let mut by_algorithm: BTreeMap<&'static str, Vec<HistoryRecord>> = BTreeMap::new();
    for path in &a.histories {
        let text = fs::read_to_string(path)
            .with_context(|| format!("cannot read {}", path.display()))
            .or_code(Code::Data)?;
        let records = read_history(&text)
            .with_context(|| format!("malformed history {}", path.display()))
            .or_code(Code::Data)?;
        for r in records {
            by_algorithm.entry(r.algorithm.name()).or_default().push(r);
        }
    }
    let path = out.join("search_curve.csv");
    let mut writer = csv::Writer::from_path(&path).or_code(Code::Data)?;
    writer
        .write_record(["algorithm", "evaluation", "score", "best_so_far"])
        .or_code(Code::Data)?;
    for (alg, records) in &by_algorithm {
        let mut best = f64::NEG_INFINITY;
        for (i, r) in records.iter().enumerate() {
            best = best.max(r.score);
            writer
                .write_record([alg.to_string(), (i + 1).to_string(), r.score.to_string(), best.to_string()])
                .or_code(Code::Data)?;
        }
    }
    writer.flush().or_code(Code::Data)?;
    println!("{}", path.display());
    Ok(())
}
