//! Command-line front end.
//!
//! Exit codes: 0 on success, 2 for bad input (flags, config files, datasets,
//! checkpoints), 1 for anything else.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{
    self, convert_zsgan, write_fixture, ConvertOptions, DatasetError, LoadOptions, SynthSizes,
};
use crate::evaluator::{evaluate, EvalError};
use crate::gram_transformer::{KeySource, MaskMode, Variant};
use crate::kge::ScoreFn;
use crate::model::{LinkModel, ModelConfig, ModelError};
use crate::ngram_graph::{
    build_graph, tokenize, GraphConfig, GraphError, NodeOrder, TokenizeConfig,
};
use crate::trainer::{train, TrainConfig, TrainError};

pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const FINAL_DIR: &str = "final";
pub const TEST_METRICS_FILE: &str = "test_metrics.json";
pub const EVAL_METRICS_FILE: &str = "metrics.json";
pub const PER_QUERY_FILE: &str = "per_query.jsonl";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

fn model_is_user_error(e: &ModelError) -> bool {
    matches!(
        e,
        ModelError::Checkpoint { .. }
            | ModelError::VocabMismatch(_)
            | ModelError::Dataset(_)
            | ModelError::Graph(_)
            | ModelError::Encode(crate::gram_transformer::EncodeError::EdgeFile(_))
            | ModelError::Encode(crate::gram_transformer::EncodeError::HeadSplit { .. })
    )
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        let user = match self {
            CliError::Usage(_) | CliError::Dataset(_) | CliError::Graph(_) => true,
            CliError::Model(e) => model_is_user_error(e),
            CliError::Train(e) => match e {
                TrainError::InvalidConfig(_) | TrainError::Dataset(_) => true,
                TrainError::Model(m) => model_is_user_error(m),
                _ => false,
            },
            CliError::Eval(e) => match e {
                EvalError::Model(m) => model_is_user_error(m),
                EvalError::EmptyInput
                | EvalError::NoCandidates
                | EvalError::TruthNotCandidate(_) => true,
                _ => false,
            },
            CliError::Io { .. } => false,
        };
        if user {
            2
        } else {
            1
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "gramlink",
    version,
    about = "Zero-shot link prediction from n-gram graphs of relation names"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on a split directory and write a checkpoint.
    Train(TrainArgs),
    /// Rank the test queries of a split with a trained checkpoint.
    Eval(EvalArgs),
    /// Print the n-gram graph of a relation name as JSON or DOT.
    Graph(GraphArgs),
    /// Write a synthetic split.
    Fixture(FixtureArgs),
    /// Convert a task-per-relation JSON release into a split directory.
    Convert(ConvertArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
pub enum Preset {
    /// max_n 13, max_nodes 90, 80 epochs
    Nell,
    /// max_n 15, max_nodes 70, 70 epochs
    Wiki,
}

impl Preset {
    pub fn apply(self, config: &mut RunConfig) {
        let (max_n, max_nodes, epochs) = match self {
            Preset::Nell => (13, 90, 80),
            Preset::Wiki => (15, 70, 70),
        };
        config.model.graph.max_n = max_n;
        config.model.graph.max_nodes = max_nodes;
        config.train.epochs = epochs;
    }
}

/// Graph-shape flags shared by `train` and `graph`.
#[derive(Debug, Clone, Default, Args)]
pub struct GraphFlags {
    /// Node order before truncation: word_major or level_major.
    #[arg(long)]
    pub strategy: Option<NodeOrder>,
    #[arg(long)]
    pub max_n: Option<usize>,
    #[arg(long)]
    pub max_nodes: Option<usize>,
    /// Drop a leading `namespace:` token from relation names.
    #[arg(long)]
    pub strip_prefix: bool,
    /// Split camelCase relation names into words.
    #[arg(long)]
    pub split_camel: bool,
}

impl GraphFlags {
    fn apply(&self, graph: &mut GraphConfig, tokenize: &mut TokenizeConfig) {
        if let Some(v) = self.strategy {
            graph.order = v;
        }
        if let Some(v) = self.max_n {
            graph.max_n = v;
        }
        if let Some(v) = self.max_nodes {
            graph.max_nodes = v;
        }
        tokenize.strip_prefix |= self.strip_prefix;
        tokenize.split_camel |= self.split_camel;
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct TrainArgs {
    /// TOML file with a `RunConfig`; command-line flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset profile applied before the config file.
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// full, wng or wg.
    #[arg(long)]
    pub variant: Option<Variant>,
    /// transe or distmult.
    #[arg(long)]
    pub score_fn: Option<ScoreFn>,
    /// post, post-renorm or pre.
    #[arg(long)]
    pub mask_mode: Option<MaskMode>,
    /// projected or tied.
    #[arg(long)]
    pub key_source: Option<KeySource>,
    #[command(flatten)]
    pub graph: GraphFlags,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub n_heads: Option<usize>,
    #[arg(long)]
    pub n_layers: Option<usize>,
    #[arg(long)]
    pub d_ff: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub label_smoothing: Option<f64>,
    /// Stop after this many epochs without a dev MRR gain.
    #[arg(long)]
    pub patience: Option<usize>,
    /// Tensor file with fixed `adjoin` / `compositional` edge vectors.
    #[arg(long)]
    pub edge_embeddings: Option<PathBuf>,
}

/// Everything a training run depends on. Written to the output directory
/// as `config.toml`; passing that file back with `--config` repeats the run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub edge_embeddings: Option<PathBuf>,
    pub train: TrainConfig,
    pub model: ModelConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }
}

/// Defaults, then preset, then config file, then flags.
pub fn resolve(args: &TrainArgs) -> Result<RunConfig, CliError> {
    let mut config = RunConfig::default();
    if let Some(p) = args.preset {
        p.apply(&mut config);
    }
    if let Some(path) = &args.config {
        config = RunConfig::read(path)?;
        if let Some(p) = args.preset {
            // the preset only fills what the file leaves at its defaults
            let mut base = RunConfig::default();
            p.apply(&mut base);
            let defaults = RunConfig::default();
            let g = &mut config.model.graph;
            if g.max_n == defaults.model.graph.max_n {
                g.max_n = base.model.graph.max_n;
            }
            if g.max_nodes == defaults.model.graph.max_nodes {
                g.max_nodes = base.model.graph.max_nodes;
            }
            if config.train.epochs == defaults.train.epochs {
                config.train.epochs = base.train.epochs;
            }
        }
    }

    let enc = &mut config.model.encoder;
    macro_rules! set {
        ($field:expr, $flag:expr) => {
            if let Some(v) = $flag.clone() {
                $field = v;
            }
        };
    }
    set!(enc.variant, args.variant);
    set!(enc.mask_mode, args.mask_mode);
    set!(enc.key_source, args.key_source);
    set!(enc.d_model, args.d_model);
    set!(enc.n_heads, args.n_heads);
    set!(enc.n_layers, args.n_layers);
    set!(enc.d_ff, args.d_ff);
    set!(enc.dropout, args.dropout);
    set!(config.model.score_fn, args.score_fn);
    args.graph
        .apply(&mut config.model.graph, &mut config.model.tokenize);
    set!(config.train.seed, args.seed);
    set!(config.train.epochs, args.epochs);
    set!(config.train.learning_rate, args.learning_rate);
    set!(config.train.batch_size, args.batch_size);
    set!(config.train.label_smoothing, args.label_smoothing);
    if args.patience.is_some() {
        config.train.patience = args.patience;
    }
    if args.dataset.is_some() {
        config.dataset = args.dataset.clone();
    }
    if args.out.is_some() {
        config.out = args.out.clone();
    }
    if args.edge_embeddings.is_some() {
        config.edge_embeddings = args.edge_embeddings.clone();
    }
    config.model = config.model.synced();

    if config.dataset.is_none() {
        return Err(CliError::Usage(
            "no dataset given (--dataset or `dataset` in the config)".into(),
        ));
    }
    if config.out.is_none() {
        return Err(CliError::Usage(
            "no output directory given (--out or `out` in the config)".into(),
        ));
    }
    if config.model.graph.max_n == 0 {
        return Err(GraphError::InvalidMaxN.into());
    }
    if config.model.graph.max_nodes == 0 {
        return Err(GraphError::InvalidMaxNodes.into());
    }
    config.train.validate()?;
    config
        .model
        .encoder
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(config)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("plain value");
    text.push('\n');
    std::fs::write(path, text).map_err(io_err(path))
}

pub fn cmd_train(args: &TrainArgs) -> Result<(), CliError> {
    let config = resolve(args)?;
    let dataset_dir = config.dataset.clone().expect("resolved");
    let out = config.out.clone().expect("resolved");
    let split = dataset::load(&dataset_dir, LoadOptions { dev_optional: true })?;

    std::fs::create_dir_all(&out).map_err(io_err(&out))?;
    let config_path = out.join(CONFIG_FILE);
    std::fs::write(&config_path, config.to_toml()).map_err(io_err(&config_path))?;

    let metrics_path = out.join(METRICS_FILE);
    let mut log = BufWriter::new(File::create(&metrics_path).map_err(io_err(&metrics_path))?);
    let mut log_error = None;
    let outcome = train(
        &split,
        &config.model,
        &config.train,
        config.edge_embeddings.as_deref(),
        |record| {
            let dev = record
                .dev_mrr
                .map_or("-".to_string(), |m| format!("{m:.4}"));
            println!(
                "epoch {:>4}  loss {:.6}  dev MRR {dev}",
                record.epoch, record.loss
            );
            if log_error.is_none() {
                if let Err(e) = log
                    .write_all(record.to_json_line().as_bytes())
                    .and_then(|_| log.flush())
                {
                    log_error = Some(e);
                }
            }
        },
    )?;
    if let Some(e) = log_error {
        return Err(io_err(&metrics_path)(e));
    }

    outcome.best.save(&out.join(CHECKPOINT_DIR))?;
    outcome.last.save(&out.join(FINAL_DIR))?;
    println!(
        "best epoch {} -> {}",
        outcome.best_epoch,
        out.join(CHECKPOINT_DIR).display()
    );

    if !split.test.is_empty() {
        let ev = evaluate(&outcome.best, &split.relations, &split.test)?;
        print!("{}", ev.metrics);
        write_json(&out.join(TEST_METRICS_FILE), &ev.metrics)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Checkpoint directory written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Where to write metrics.json and per_query.jsonl (default: the checkpoint directory).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn cmd_eval(args: &EvalArgs) -> Result<(), CliError> {
    let model = LinkModel::load(&args.checkpoint)?;
    let split = dataset::load(&args.dataset, LoadOptions { dev_optional: true })?;
    model.check_entities(&split.entities)?;
    if split.test.is_empty() {
        return Err(CliError::Usage(format!(
            "{} has no test queries",
            args.dataset.display()
        )));
    }
    let ev = evaluate(&model, &split.relations, &split.test)?;
    print!("{}", ev.metrics);
    let out = args.out.clone().unwrap_or_else(|| args.checkpoint.clone());
    std::fs::create_dir_all(&out).map_err(io_err(&out))?;
    write_json(&out.join(EVAL_METRICS_FILE), &ev.metrics)?;
    let dump = out.join(PER_QUERY_FILE);
    std::fs::write(&dump, ev.dump_jsonl()).map_err(io_err(&dump))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, ValueEnum)]
pub enum GraphFormat {
    #[default]
    Json,
    Dot,
}

#[derive(Debug, Clone, Args)]
pub struct GraphArgs {
    /// Relation name, e.g. "a part of".
    pub text: String,
    #[arg(long, value_enum, default_value_t = GraphFormat::Json)]
    pub format: GraphFormat,
    #[command(flatten)]
    pub graph: GraphFlags,
    /// Write to a file instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn render_graph(args: &GraphArgs) -> Result<String, CliError> {
    let mut graph_cfg = GraphConfig::default();
    let mut tok = TokenizeConfig::default();
    args.graph.apply(&mut graph_cfg, &mut tok);
    let name = tokenize(&args.text, tok)?;
    let graph = build_graph(&name, &graph_cfg)?;
    Ok(match args.format {
        GraphFormat::Json => graph.to_json(),
        GraphFormat::Dot => graph.to_dot(),
    })
}

pub fn cmd_graph(args: &GraphArgs) -> Result<(), CliError> {
    let text = render_graph(args)?;
    match &args.out {
        Some(path) => std::fs::write(path, text).map_err(io_err(path)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct FixtureArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = SynthSizes::default().n_entities)]
    pub entities: usize,
    #[arg(long, default_value_t = SynthSizes::default().n_seen)]
    pub seen: usize,
    #[arg(long, default_value_t = SynthSizes::default().n_unseen)]
    pub unseen: usize,
    #[arg(long, default_value_t = SynthSizes::default().triples_per_relation)]
    pub triples_per_relation: usize,
    #[arg(long, default_value_t = SynthSizes::default().candidates)]
    pub candidates: usize,
    #[arg(long, default_value_t = SynthSizes::default().dev_per_relation)]
    pub dev_per_relation: usize,
}

pub fn cmd_fixture(args: &FixtureArgs) -> Result<(), CliError> {
    if args.entities < 2 {
        return Err(CliError::Usage(
            "a fixture needs at least 2 entities".into(),
        ));
    }
    let sizes = SynthSizes {
        n_entities: args.entities,
        n_seen: args.seen,
        n_unseen: args.unseen,
        triples_per_relation: args.triples_per_relation,
        candidates: args.candidates,
        dev_per_relation: args.dev_per_relation,
    };
    let split = write_fixture(args.seed, sizes, &args.out)?;
    println!(
        "{}: {} entities, {} train, {} dev, {} test queries",
        args.out.display(),
        split.entities.len(),
        split.train.len(),
        split.dev.len(),
        split.test.len()
    );
    Ok(())
}

#[derive(Debug, Clone, Args)]
pub struct ConvertArgs {
    /// Directory with train_tasks.json, test_tasks.json, rel2candidates.json.
    #[arg(long)]
    pub src: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub max_seen: Option<usize>,
    #[arg(long)]
    pub max_unseen: Option<usize>,
    #[arg(long)]
    pub max_dev: Option<usize>,
    #[arg(long)]
    pub max_triples_per_relation: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn cmd_convert(args: &ConvertArgs) -> Result<(), CliError> {
    let log = convert_zsgan(
        &args.src,
        &args.out,
        ConvertOptions {
            max_seen: args.max_seen,
            max_unseen: args.max_unseen,
            max_dev: args.max_dev,
            max_triples_per_relation: args.max_triples_per_relation,
            seed: args.seed,
        },
    )?;
    println!("{}", serde_json::to_string(&log).expect("plain record"));
    Ok(())
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Graph(a) => cmd_graph(a),
        Command::Fixture(a) => cmd_fixture(a),
        Command::Convert(a) => cmd_convert(a),
    }
}
