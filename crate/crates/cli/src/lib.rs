//! The `callstep` command line: masking, rollout, annotation, statistics,
//! search, evaluation and simulation sweeps over JSONL files.

pub mod config;

use std::collections::HashMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use callstep::annotator::{
    annotate_with, masked_query_id, rollout_collect, AnnotateOptions, RolloutConfig,
};
use callstep::corpus_io::{
    corpus_stats, load_queries, read_jsonl, read_prm_dataset, read_rollouts, write_jsonl,
    write_prm_dataset, write_queries, write_rollouts, Granularity, RolloutRecord,
};
use callstep::eval::{
    evaluate, rm_metrics, sweep_explore_retain, write_eval_csv, write_rm_csv, write_sweep_csv,
    Predictions,
};
use callstep::masking::mask_universe_with;
use callstep::search::{run_search, Aggregation, SearchTrace, Strategy};
use callstep::{CallSequence, Query, ToolUniverse};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub use config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    /// Bad invocation or configuration; exit code 2.
    Usage(String),
    /// Unreadable or invalid data, or a failed backend; exit code 1.
    Data(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "error: {m}"),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 1,
        }
    }
}

fn data<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Data(e.to_string())
}

#[derive(Parser, Debug)]
#[command(
    name = "callstep",
    version,
    about = "Step-level supervision and search for function-call generation"
)]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the config concurrency limit.
    #[arg(long, global = true)]
    pub concurrency: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate synthetic queries.
    Synth {
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rename the functions and parameters of a tool list.
    Mask {
        /// JSON array of tool definitions.
        #[arg(long)]
        universe: PathBuf,
        #[arg(long)]
        out_universe: PathBuf,
        #[arg(long)]
        out_map: PathBuf,
        #[arg(long)]
        probability: Option<f64>,
    },
    /// Sample responses for masked variants of each query.
    Rollout {
        #[arg(long)]
        queries: PathBuf,
        /// Rollout records (JSONL).
        #[arg(long)]
        out: PathBuf,
        /// Masked queries the rollouts refer to (JSONL).
        #[arg(long)]
        out_queries: PathBuf,
    },
    /// Label rollouts step by step and write a reward-model dataset.
    Annotate {
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        rollouts: PathBuf,
        #[arg(long, default_value = "fine")]
        granularity: Granularity,
        /// Match calls in any order.
        #[arg(long)]
        order_insensitive: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Label and trajectory counts of a dataset.
    Stats {
        #[arg(long)]
        dataset: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one search strategy over a query file.
    Search(SearchArgs),
    /// Accuracy and F1 of predictions.
    Eval {
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Loss and accuracies of the configured scorer on a labeled dataset.
    RmEval {
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Fine-beam success over an M sweep and an N sweep on synthetic queries.
    Sweep {
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
pub struct SearchArgs {
    #[arg(long)]
    pub queries: PathBuf,
    /// Predictions (JSONL).
    #[arg(long)]
    pub out: PathBuf,
    /// Defaults to `<out>.traces.jsonl`.
    #[arg(long)]
    pub traces: Option<PathBuf>,
    #[arg(long)]
    pub no_traces: bool,
    #[arg(long)]
    pub strategy: Option<Strategy>,
    #[arg(long = "M")]
    pub m: Option<usize>,
    #[arg(long = "N")]
    pub n: Option<usize>,
    #[arg(long)]
    pub n_samples: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub aggregation: Option<Aggregation>,
}

/// One line of a predictions file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub query_id: String,
    pub response: String,
    /// Parsed call list, or null when the response does not parse.
    pub prediction: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.seed = Some(s);
    }
    if let Some(c) = cli.concurrency {
        cfg.concurrency = c;
    }
    if cfg.concurrency == 0 {
        return Err(CliError::Usage("concurrency must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.concurrency)
        .build()
        .map_err(data)?;
    pool.install(|| dispatch(cli.command, cfg))
}

fn dispatch(command: Command, cfg: RunConfig) -> Result<(), CliError> {
    match command {
        Command::Synth { count, out } => cmd_synth(&cfg, count, &out),
        Command::Mask {
            universe,
            out_universe,
            out_map,
            probability,
        } => cmd_mask(&cfg, &universe, &out_universe, &out_map, probability),
        Command::Rollout {
            queries,
            out,
            out_queries,
        } => cmd_rollout(&cfg, &queries, &out, &out_queries),
        Command::Annotate {
            queries,
            rollouts,
            granularity,
            order_insensitive,
            out,
        } => cmd_annotate(&queries, &rollouts, granularity, order_insensitive, &out),
        Command::Stats { dataset, out } => cmd_stats(&dataset, out.as_deref()),
        Command::Search(args) => cmd_search(&cfg, &args),
        Command::Eval {
            queries,
            predictions,
            out,
            csv,
        } => cmd_eval(&queries, &predictions, &out, csv.as_deref()),
        Command::RmEval {
            queries,
            dataset,
            threshold,
            out,
            csv,
        } => cmd_rm_eval(&cfg, &queries, &dataset, threshold, &out, csv.as_deref()),
        Command::Sweep { episodes, out } => cmd_sweep(&cfg, episodes, &out),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(data)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn read_json(path: &Path) -> Result<Value, CliError> {
    let text =
        fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn queries_from(path: &Path) -> Result<Vec<Query>, CliError> {
    load_queries(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn cmd_synth(cfg: &RunConfig, count: usize, out: &Path) -> Result<(), CliError> {
    let synth = callstep::sim::SynthConfig {
        seed: cfg.seed()?,
        ..cfg.synth.clone()
    };
    let queries = callstep::sim::synth_queries(&synth, count);
    write_queries(out, &queries).map_err(data)?;
    Ok(())
}

fn cmd_mask(
    cfg: &RunConfig,
    universe: &Path,
    out_universe: &Path,
    out_map: &Path,
    probability: Option<f64>,
) -> Result<(), CliError> {
    let p = probability.unwrap_or(cfg.rollout.mask_probability);
    if !(0.0..=1.0).contains(&p) {
        return Err(CliError::Usage(format!(
            "probability must lie in [0, 1], got {p}"
        )));
    }
    let u = ToolUniverse::from_json(&read_json(universe)?).map_err(data)?;
    u.validate().map_err(data)?;
    let (masked, map) = mask_universe_with(&u, cfg.seed()?, p);
    write_json(out_universe, &masked.to_json())?;
    write_json(out_map, &map)
}

fn cmd_rollout(
    cfg: &RunConfig,
    queries: &Path,
    out: &Path,
    out_queries: &Path,
) -> Result<(), CliError> {
    let qs = queries_from(queries)?;
    let policy = cfg.build_policy()?;
    let rcfg = RolloutConfig {
        seed: cfg.seed()?,
        variants_per_query: cfg.rollout.variants_per_query,
        samples_per_variant: cfg.rollout.samples_per_variant,
        temperature: cfg.rollout.temperature,
        mask_probability: cfg.rollout.mask_probability,
        concurrency: cfg.concurrency,
    };
    let output = rollout_collect(policy.as_ref(), &qs, &rcfg);

    let mut masked: Vec<Query> = Vec::new();
    let mut records = Vec::with_capacity(output.rollouts.len());
    for r in &output.rollouts {
        if masked.last().is_none_or(|m| m.id != r.masked.id) {
            masked.push(r.masked.clone());
        }
        records.push(RolloutRecord {
            query_id: r.masked.id.clone(),
            response: r.response.clone(),
            sample: r.sample,
        });
    }
    write_queries(out_queries, &masked).map_err(data)?;
    write_rollouts(out, &records).map_err(data)?;
    if output.failures.is_empty() {
        return Ok(());
    }
    for f in &output.failures {
        eprintln!(
            "rollout failed for {} sample {}: {}",
            masked_query_id(&f.query_id, f.variant),
            f.sample,
            f.error
        );
    }
    Err(CliError::Data(format!(
        "{} rollouts failed",
        output.failures.len()
    )))
}

fn cmd_annotate(
    queries: &Path,
    rollouts: &Path,
    granularity: Granularity,
    order_insensitive: bool,
    out: &Path,
) -> Result<(), CliError> {
    let qs: HashMap<String, Query> = queries_from(queries)?
        .into_iter()
        .map(|q| (q.id.clone(), q))
        .collect();
    let opts = AnnotateOptions {
        order_insensitive,
        ..AnnotateOptions::default()
    };
    let mut records = Vec::new();
    for r in read_rollouts(rollouts).map_err(data)? {
        let q = qs.get(&r.query_id).ok_or_else(|| {
            CliError::Data(format!("rollout refers to unknown query `{}`", r.query_id))
        })?;
        records.push(annotate_with(&r.response, q, opts).to_record(granularity));
    }
    write_prm_dataset(out, &records).map_err(data)?;
    Ok(())
}

fn cmd_stats(datasets: &[PathBuf], out: Option<&Path>) -> Result<(), CliError> {
    if datasets.is_empty() {
        return Err(CliError::Usage("at least one --dataset is required".into()));
    }
    let mut total = callstep::corpus_io::CorpusStats::default();
    for d in datasets {
        total =
            total + corpus_stats(d).map_err(|e| CliError::Data(format!("{}: {e}", d.display())))?;
    }
    let text = serde_json::to_string_pretty(&total).map_err(data)?;
    println!("{text}");
    match out {
        Some(p) => write_json(p, &total),
        None => Ok(()),
    }
}

fn cmd_search(cfg: &RunConfig, args: &SearchArgs) -> Result<(), CliError> {
    let mut scfg = cfg.search.clone();
    scfg.seed = cfg.seed()?;
    if let Some(s) = args.strategy {
        scfg.strategy = s;
    }
    if let Some(m) = args.m {
        scfg.m = m;
    }
    if let Some(n) = args.n {
        scfg.n = n;
    }
    if let Some(n) = args.n_samples {
        scfg.n_samples = n;
    }
    if let Some(t) = args.temperature {
        scfg.temperature = t;
    }
    if let Some(a) = args.aggregation {
        scfg.aggregation = a;
    }
    scfg.validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;

    let qs = queries_from(&args.queries)?;
    let policy = cfg.build_policy()?;
    let scorer = cfg.build_scorer()?;
    let mut predictions = Vec::with_capacity(qs.len());
    let mut traces: Vec<SearchTrace> = Vec::with_capacity(qs.len());
    for q in &qs {
        match run_search(q, policy.as_ref(), scorer.as_ref(), &scfg) {
            Ok(o) => {
                predictions.push(PredictionRecord {
                    query_id: q.id.clone(),
                    response: o.response,
                    prediction: o.prediction.as_ref().map(CallSequence::to_json),
                    error: None,
                });
                traces.push(o.trace);
            }
            Err(f) => {
                eprintln!("search failed: {f}");
                predictions.push(PredictionRecord {
                    query_id: q.id.clone(),
                    response: String::new(),
                    prediction: None,
                    error: Some(f.error.to_string()),
                });
                traces.push(*f.trace);
            }
        }
    }
    write_jsonl(&args.out, &predictions).map_err(data)?;
    if !args.no_traces {
        let path = args.traces.clone().unwrap_or_else(|| {
            let mut p = args.out.clone().into_os_string();
            p.push(".traces.jsonl");
            PathBuf::from(p)
        });
        write_jsonl(&path, &traces).map_err(data)?;
    }
    Ok(())
}

/// Reads a predictions file into the form the metrics expect.
pub fn read_predictions(path: &Path) -> Result<Predictions, CliError> {
    let records: Vec<PredictionRecord> =
        read_jsonl(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let mut out = Predictions::new();
    for r in records {
        let seq = match &r.prediction {
            Some(v) => Some(
                CallSequence::from_json(v)
                    .map_err(|e| CliError::Data(format!("{}: {e}", r.query_id)))?,
            ),
            None => None,
        };
        if out.insert(r.query_id.clone(), seq).is_some() {
            return Err(CliError::Data(format!(
                "duplicate prediction for `{}`",
                r.query_id
            )));
        }
    }
    Ok(out)
}

fn cmd_eval(
    queries: &Path,
    predictions: &Path,
    out: &Path,
    csv: Option<&Path>,
) -> Result<(), CliError> {
    let qs = queries_from(queries)?;
    let preds = read_predictions(predictions)?;
    let known: std::collections::HashSet<&str> = qs.iter().map(|q| q.id.as_str()).collect();
    if let Some(id) = preds.keys().find(|id| !known.contains(id.as_str())) {
        return Err(CliError::Data(format!(
            "prediction for unknown query `{id}`"
        )));
    }
    let report = evaluate(&preds, &qs);
    for id in &report.missing {
        eprintln!("missing prediction: {id}");
    }
    write_json(out, &report)?;
    if let Some(p) = csv {
        write_eval_csv(p, &report).map_err(data)?;
    }
    Ok(())
}

fn cmd_rm_eval(
    cfg: &RunConfig,
    queries: &Path,
    dataset: &Path,
    threshold: Option<f64>,
    out: &Path,
    csv: Option<&Path>,
) -> Result<(), CliError> {
    let qs: HashMap<String, Query> = queries_from(queries)?
        .into_iter()
        .map(|q| (q.id.clone(), q))
        .collect();
    let records = read_prm_dataset(dataset)
        .map_err(|e| CliError::Data(format!("{}: {e}", dataset.display())))?;
    let scorer = cfg.build_scorer()?;
    let report = rm_metrics(
        scorer.as_ref(),
        &records,
        &qs,
        threshold.unwrap_or(cfg.threshold),
    )
    .map_err(data)?;
    write_json(out, &report)?;
    if let Some(p) = csv {
        write_rm_csv(p, &report).map_err(data)?;
    }
    Ok(())
}

fn cmd_sweep(cfg: &RunConfig, episodes: Option<usize>, out: &Path) -> Result<(), CliError> {
    let mut spec = cfg.sweep.clone();
    if let Some(e) = episodes {
        spec.episodes = e;
    }
    if spec.episodes == 0 {
        return Err(CliError::Usage("episodes must be at least 1".into()));
    }
    let seed = cfg.seed()?;
    let policy = cfg.build_policy()?;
    let scorer = cfg.sim_scorer()?.build();
    let synth = callstep::sim::SynthConfig {
        seed,
        ..cfg.synth.clone()
    };
    let base = callstep::search::SearchConfig {
        seed,
        ..cfg.search.clone()
    };
    let rows = sweep_explore_retain(policy.as_ref(), scorer.as_ref(), &synth, &base, &spec)
        .map_err(data)?;
    write_sweep_csv(out, &rows).map_err(data)
}
