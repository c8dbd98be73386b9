//! Command implementations behind the `sentemb` binary.
//!
//! Results go to the output stream and diagnostics to the error stream.
//! Exit codes: 0 on success, 1 for usage errors, 2 for data or runtime
//! failures.

use std::collections::HashMap;
use std::ffi::OsString;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::bundle::ModelBundle;
use crate::encoders::{Activation, Architecture, Encoder};
use crate::error::{Error, Result};
use crate::eval::{self, CurveOrder};
use crate::numerics::Rng;
use crate::objective::{Sampling, TrainConfig};
use crate::optim::{train_with_progress, OptimizerKind};
use crate::textdata::{load_embeddings_file, load_pairs_file, load_scored_pairs_file, save_embeddings, tokenize, EmbeddingTable};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "sentemb", version, about = "Train and analyse paraphrastic sentence embeddings")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train an encoder on paraphrase pairs and save it as a model directory.
    Train(TrainArgs),
    /// Score a scored-pair file with cosine similarity of encodings.
    Eval(EvalArgs),
    /// Encode sentences read one per line from standard input.
    Encode(EncodeArgs),
    /// Nearest neighbours of a token in embedding space.
    Nn(NnArgs),
    /// Write a reweighted embedding file.
    Weights(WeightsArgs),
    /// Performance as a function of training-set size.
    Curve(CurveArgs),
    /// Exhaustive grid search selected by Spearman correlation.
    Sweep(SweepArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ArchName {
    Average,
    Proj,
    Dan,
    Rnn,
    Irnn,
    Lstm,
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// Encoder architecture.
    #[arg(long, value_enum)]
    pub arch: ArchName,
    /// Output width for proj and dan (defaults to the embedding width).
    #[arg(long)]
    pub out_dim: Option<usize>,
    /// Number of dan layers (1 or 2).
    #[arg(long, default_value_t = 1)]
    pub layers: usize,
    /// Nonlinearity for dan and rnn.
    #[arg(long, default_value = "tanh", value_parser = parse_activation)]
    pub activation: Activation,
    /// LSTM without the output gate.
    #[arg(long)]
    pub no_output_gate: bool,
}

impl ModelArgs {
    pub fn architecture(&self, dim: usize) -> Architecture {
        let out = self.out_dim.unwrap_or(dim);
        match self.arch {
            ArchName::Average => Architecture::Average,
            ArchName::Proj => Architecture::Projection { out },
            ArchName::Dan => Architecture::Dan { layers: self.layers, out, activation: self.activation },
            ArchName::Rnn => Architecture::Rnn { activation: self.activation },
            ArchName::Irnn => Architecture::IRnn,
            ArchName::Lstm => Architecture::Lstm { output_gate: !self.no_output_gate },
        }
    }
}

fn parse_activation(s: &str) -> std::result::Result<Activation, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_sampling(s: &str) -> std::result::Result<Sampling, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_optimizer(s: &str) -> std::result::Result<OptimizerKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Overrides for the training configuration.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// File of `key=value` lines overriding the defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, value_parser = parse_sampling)]
    pub sampling: Option<Sampling>,
    #[arg(long, value_parser = parse_optimizer)]
    pub optimizer: Option<OptimizerKind>,
    #[arg(long = "lr")]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub lambda_c: Option<f64>,
    #[arg(long)]
    pub lambda_w: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Disable global-norm gradient clipping.
    #[arg(long)]
    pub no_clip: bool,
    /// Keep the word embeddings fixed.
    #[arg(long)]
    pub freeze_embeddings: bool,
}

impl ConfigArgs {
    /// Defaults, then the config file, then flags.
    pub fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        if let Some(path) = &self.config {
            for (line, key, value) in read_key_values(path)? {
                cfg.set(&key, &value).map_err(|e| Error::data(line, format!("{}: {e}", path.display())))?;
            }
        }
        if let Some(v) = self.delta {
            cfg.delta = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.sampling {
            cfg.sampling = v;
        }
        if let Some(v) = self.optimizer {
            cfg.optimizer = v;
        }
        if let Some(v) = self.learning_rate {
            cfg.learning_rate = v;
        }
        if let Some(v) = self.lambda_c {
            cfg.lambda_c = v;
        }
        if let Some(v) = self.lambda_w {
            cfg.lambda_w = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if self.no_clip {
            cfg.clip_gradients = false;
        }
        if self.freeze_embeddings {
            cfg.update_embeddings = false;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Tab-separated paraphrase pairs.
    #[arg(long)]
    pub pairs: PathBuf,
    /// Initial word embeddings (`token v1 ... vD` per line).
    #[arg(long)]
    pub init_embeddings: PathBuf,
    /// Output model directory.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Lowercase all text.
    #[arg(long)]
    pub lowercase: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Tab-separated `sentence1 sentence2 score` lines.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Add a breakdown by maximum sentence length.
    #[arg(long)]
    pub bins: bool,
    /// Also report Spearman correlation.
    #[arg(long)]
    pub spearman: bool,
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    #[arg(long)]
    pub model: PathBuf,
}

#[derive(Debug, Args)]
pub struct NnArgs {
    /// Model directory whose embeddings are searched.
    #[arg(long, conflicts_with = "embeddings", required_unless_present = "embeddings")]
    pub model: Option<PathBuf>,
    /// Plain embedding file to search instead of a model.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub token: String,
    #[arg(short, long, default_value_t = 10)]
    pub k: usize,
    /// Only consider this many of the most frequent tokens.
    #[arg(long)]
    pub restrict: Option<usize>,
    /// `token TAB count` lines; without it, file order is frequency order.
    #[arg(long)]
    pub counts: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct WeightsArgs {
    /// Embedding file to reweight.
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Output embedding file.
    #[arg(long)]
    pub out: PathBuf,
    /// `token TAB weight` lines; unlisted tokens keep weight 1.
    #[arg(long, group = "source")]
    pub weights: Option<PathBuf>,
    /// Use the L1 norms of a trained model's word vectors as weights.
    #[arg(long, group = "source")]
    pub importance_from: Option<PathBuf>,
    /// Use normalized reciprocal frequencies from `token TAB count` lines.
    #[arg(long, group = "source")]
    pub counts: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CurveArgs {
    #[arg(long)]
    pub pairs: PathBuf,
    #[arg(long)]
    pub init_embeddings: PathBuf,
    /// Scored-pair evaluation files; the curve reports their mean Pearson.
    #[arg(long = "eval", required = true)]
    pub eval: Vec<PathBuf>,
    #[arg(long, default_value = "ordered", value_parser = parse_order)]
    pub order: CurveOrder,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub lowercase: bool,
}

fn parse_order(s: &str) -> std::result::Result<CurveOrder, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub pairs: PathBuf,
    #[arg(long)]
    pub init_embeddings: PathBuf,
    /// `key=v1,v2,...` lines; every combination is trained.
    #[arg(long)]
    pub grid: PathBuf,
    /// Scored pairs used to pick the winner by Spearman correlation.
    #[arg(long)]
    pub tune_data: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub lowercase: bool,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, input: &mut dyn Read, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let rendered = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{rendered}");
                    EXIT_OK
                }
                _ => {
                    let _ = write!(err, "{rendered}");
                    EXIT_USAGE
                }
            };
        }
    };
    match dispatch(cli.command, input, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_DATA
        }
    }
}

fn dispatch(cmd: Command, input: &mut dyn Read, out: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::Train(a) => cmd_train(&a, out),
        Command::Eval(a) => cmd_eval(&a, out),
        Command::Encode(a) => cmd_encode(&a, input, out),
        Command::Nn(a) => cmd_nn(&a, out),
        Command::Weights(a) => cmd_weights(&a, out),
        Command::Curve(a) => cmd_curve(&a, out),
        Command::Sweep(a) => cmd_sweep(&a, out),
    }
}

fn new_encoder(model: &ModelArgs, dim: usize, seed: u64) -> Result<Encoder> {
    Encoder::new(model.architecture(dim), dim, &mut Rng::derive(seed, 0x1f))
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Format { line, msg } => Error::Format { line, msg: format!("{}: {msg}", path.display()) },
        Error::Data { line, msg } => Error::Data { line, msg: format!("{}: {msg}", path.display()) },
        Error::Io(io) => Error::Model(format!("{}: {io}", path.display())),
        other => other,
    }
}

pub fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = a.config.resolve()?;
    let mut table = load_embeddings_file(&a.init_embeddings).map_err(|e| with_path(e, &a.init_embeddings))?;
    let pairs = load_pairs_file(&a.pairs, a.lowercase).map_err(|e| with_path(e, &a.pairs))?;
    let mut encoder = new_encoder(&a.model, table.dim(), cfg.seed)?;
    log::info!("training {} on {} pairs", encoder.architecture().name(), pairs.len());
    writeln!(out, "epoch\tloss")?;
    train_with_progress(&mut encoder, &mut table, &pairs, &cfg, Some(out))?;
    ModelBundle::new(encoder, table, a.lowercase).save(&a.out)?;
    log::info!("model written to {}", a.out.display());
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let bundle = ModelBundle::load(&a.model)?;
    let data = load_scored_pairs_file(&a.dataset, bundle.lowercase).map_err(|e| with_path(e, &a.dataset))?;
    let report = if a.bins {
        eval::length_binned(&bundle.encoder, &bundle.table, &data)?
    } else {
        eval::evaluate(&bundle.encoder, &bundle.table, &data)?
    };
    write!(out, "{}", report.to_tsv(a.spearman))?;
    Ok(())
}

pub fn cmd_encode(a: &EncodeArgs, input: &mut dyn Read, out: &mut dyn Write) -> Result<()> {
    let bundle = ModelBundle::load(&a.model)?;
    for (i, line) in BufReader::new(input).lines().enumerate() {
        let line = line?;
        let tokens = tokenize(&line, bundle.lowercase);
        if tokens.is_empty() {
            return Err(Error::data(i + 1, "empty sentence"));
        }
        let v = bundle.encoder.encode(&bundle.table, &tokens)?;
        let text: Vec<String> = v.iter().map(|x| x.to_string()).collect();
        writeln!(out, "{}", text.join(" "))?;
    }
    Ok(())
}

/// `token TAB number` lines.
fn read_token_numbers<T: std::str::FromStr>(path: &Path) -> Result<HashMap<String, T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Model(format!("{}: {e}", path.display())))?;
    let mut out = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let (Some(tok), Some(val), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::format(i + 1, format!("{}: expected `token TAB value`", path.display())));
        };
        let val = val
            .trim()
            .parse()
            .map_err(|_| Error::format(i + 1, format!("{}: bad value {val:?}", path.display())))?;
        out.insert(tok.to_string(), val);
    }
    Ok(out)
}

fn read_key_values(path: &Path) -> Result<Vec<(usize, String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Model(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format(i + 1, format!("{}: expected key=value", path.display())))?;
        out.push((i + 1, k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn cmd_nn(a: &NnArgs, out: &mut dyn Write) -> Result<()> {
    let table = match (&a.model, &a.embeddings) {
        (Some(m), _) => ModelBundle::load(m)?.table,
        (None, Some(e)) => load_embeddings_file(e).map_err(|err| with_path(err, e))?,
        (None, None) => return Err(Error::Config("one of --model or --embeddings is required".into())),
    };
    let counts: HashMap<String, u64> = match &a.counts {
        Some(p) => read_token_numbers(p)?,
        // descending pseudo-counts reproduce file order
        None => {
            let n = table.len() as u64;
            table.vocab().tokens().iter().enumerate().map(|(i, t)| (t.clone(), n - i as u64)).collect()
        }
    };
    let restrict = a.restrict.unwrap_or(table.len()).min(table.len());
    for (tok, c) in eval::nearest_neighbors(&table, &a.token, a.k, restrict, &counts)? {
        writeln!(out, "{tok}\t{c}")?;
    }
    Ok(())
}

pub fn cmd_weights(a: &WeightsArgs, out: &mut dyn Write) -> Result<()> {
    let base = load_embeddings_file(&a.embeddings).map_err(|e| with_path(e, &a.embeddings))?;
    let weights: HashMap<String, f64> = if let Some(p) = &a.weights {
        read_token_numbers(p)?
    } else if let Some(dir) = &a.importance_from {
        eval::word_importance(&ModelBundle::load(dir)?.table).into_iter().collect()
    } else if let Some(p) = &a.counts {
        let counts: HashMap<String, u64> = read_token_numbers(p)?;
        let total = counts.values().sum();
        eval::frequency_weights(base.vocab().tokens(), &counts, total)?
    } else {
        HashMap::new()
    };
    let table = eval::reweight(&base, &weights)?;
    let file = fs::File::create(&a.out)?;
    save_embeddings(&table, std::io::BufWriter::new(file), false)?;
    log::info!("wrote {}", a.out.display());
    let _ = out;
    Ok(())
}

pub fn cmd_curve(a: &CurveArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = a.config.resolve()?;
    let table = load_embeddings_file(&a.init_embeddings).map_err(|e| with_path(e, &a.init_embeddings))?;
    let pairs = load_pairs_file(&a.pairs, a.lowercase).map_err(|e| with_path(e, &a.pairs))?;
    let evals = a
        .eval
        .iter()
        .map(|p| load_scored_pairs_file(p, a.lowercase).map_err(|e| with_path(e, p)))
        .collect::<Result<Vec<_>>>()?;
    let arch = a.model.architecture(table.dim());
    writeln!(out, "size\tpearson")?;
    for (size, r) in eval::data_size_curve(arch, &table, &pairs, a.order, &cfg, &evals)? {
        writeln!(out, "{size}\t{r}")?;
    }
    Ok(())
}

/// Every combination of the grid's values, in file order (last key fastest).
pub fn expand_grid(grid: &[(String, Vec<String>)]) -> Vec<Vec<(String, String)>> {
    let mut combos: Vec<Vec<(String, String)>> = vec![Vec::new()];
    for (key, values) in grid {
        combos = combos
            .into_iter()
            .flat_map(|c| {
                values.iter().map(move |v| {
                    let mut c = c.clone();
                    c.push((key.clone(), v.clone()));
                    c
                })
            })
            .collect();
    }
    combos
}

/// Index of the first maximum.
pub fn argmax_first(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if best.map_or(true, |b| s > scores[b]) {
            best = Some(i);
        }
    }
    best
}

pub fn cmd_sweep(a: &SweepArgs, out: &mut dyn Write) -> Result<()> {
    let base = a.config.resolve()?;
    let grid: Vec<(String, Vec<String>)> = read_key_values(&a.grid)?
        .into_iter()
        .map(|(_, k, v)| (k, v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()))
        .collect();
    if grid.iter().any(|(_, v)| v.is_empty()) {
        return Err(Error::Config("every grid key needs at least one value".into()));
    }
    let table = load_embeddings_file(&a.init_embeddings).map_err(|e| with_path(e, &a.init_embeddings))?;
    let pairs = load_pairs_file(&a.pairs, a.lowercase).map_err(|e| with_path(e, &a.pairs))?;
    let tune = load_scored_pairs_file(&a.tune_data, a.lowercase).map_err(|e| with_path(e, &a.tune_data))?;

    let combos = expand_grid(&grid);
    let mut scores = Vec::with_capacity(combos.len());
    writeln!(out, "config\tsettings\tspearman\tpearson")?;
    for (i, combo) in combos.iter().enumerate() {
        let mut cfg = base.clone();
        for (k, v) in combo {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        let mut t = table.clone();
        let mut enc = new_encoder(&a.model, t.dim(), cfg.seed)?;
        crate::optim::train(&mut enc, &mut t, &pairs, &cfg)?;
        let rep = eval::evaluate(&enc, &t, &tune)?;
        let desc: Vec<String> = combo.iter().map(|(k, v)| format!("{k}={v}")).collect();
        writeln!(out, "{i}\t{}\t{}\t{}", desc.join(" "), rep.spearman, rep.pearson)?;
        scores.push(rep.spearman);
    }
    let w = argmax_first(&scores).ok_or_else(|| Error::Config("empty grid".into()))?;
    let desc: Vec<String> = combos[w].iter().map(|(k, v)| format!("{k}={v}")).collect();
    writeln!(out, "winner\t{w}\t{}\t{}", desc.join(" "), scores[w])?;
    Ok(())
}

/// Reads an embedding file and its table, for callers that need both.
pub fn load_table(path: &Path) -> Result<EmbeddingTable> {
    load_embeddings_file(path).map_err(|e| with_path(e, path))
}
