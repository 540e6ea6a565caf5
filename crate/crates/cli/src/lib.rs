//! Command-line front end.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use spantag::agreement::{agreement_tsv, mean_pairwise_f1, AnnotationSet, GroupBy};
use spantag::corpus::{self, Apportionment, Polarity};
use spantag::embeddings::{load_pretrained, ContextualStore};
use spantag::metrics::{score_corpus, MacroMode};
use spantag::pipeline::{self, Model, Resources, TrainConfig, TrainReport};
use spantag::tagging::{self, Scheme};

#[derive(Debug, Parser)]
#[command(name = "spantag", version, about = "Span detection for aspect-based sentiment analysis")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Corpus statistics, one row per file
    Stats(StatsArgs),
    /// Shuffle a corpus and split it into train/dev/test
    Split(SplitArgs),
    /// Pairwise F1 agreement between annotator files
    Agree(AgreeArgs),
    /// Convert between JSONL and two-column CoNLL
    Convert(ConvertArgs),
    /// Train a BiLSTM-CRF tagger
    Train(TrainArgs),
    /// Tag a corpus with a trained model
    Predict(PredictArgs),
    /// Exact-match span scores of predictions against gold
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(required = true)]
    pub files: Vec<PathBuf>,
    /// Also print per-label span counts
    #[arg(long)]
    pub labels: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    pub input: PathBuf,
    #[arg(long, default_value = "7:1:2")]
    pub ratio: String,
    #[arg(long)]
    pub seed: u64,
    /// Directory receiving `<stem>.train.jsonl`, `<stem>.dev.jsonl`, `<stem>.test.jsonl`
    #[arg(long)]
    pub out: PathBuf,
    /// `ceil` or `largest-remainder`
    #[arg(long, default_value = "ceil")]
    pub apportion: String,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Grouping {
    None,
    Document,
    Label,
}

#[derive(Debug, Args)]
pub struct AgreeArgs {
    /// One JSONL file per annotator
    #[arg(num_args = 2.., required = true)]
    pub files: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "none")]
    pub group_by: Grouping,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Jsonl,
    Conll,
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    pub input: PathBuf,
    /// Input format; guessed from the extension when absent
    #[arg(long, value_enum)]
    pub from: Option<Format>,
    #[arg(long, value_enum)]
    pub to: Format,
    #[arg(long, default_value = "aspect-polarity")]
    pub scheme: Scheme,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub dev: PathBuf,
    /// TOML file with training settings
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub scheme: Option<Scheme>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub constrain_transitions: bool,
    /// Pretrained syllable vectors, one `token v1 ... vd` per line
    #[arg(long)]
    pub pretrained: Option<PathBuf>,
    /// Contextual vectors (JSONL) covering the train and dev documents
    #[arg(long)]
    pub context: Option<PathBuf>,
    /// Model file to write
    #[arg(long)]
    pub out: PathBuf,
    /// Training log (TSV) file; printed to stdout when absent
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    pub input: PathBuf,
    #[arg(long)]
    pub context: Option<PathBuf>,
    /// Required scheme; checked against the model
    #[arg(long)]
    pub scheme: Option<Scheme>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Macro {
    Observed,
    Inventory,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub gold: PathBuf,
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub scheme: Scheme,
    #[arg(long = "macro", value_enum, default_value = "observed")]
    pub macro_mode: Macro,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Reports go to `stdout`, diagnostics to stderr.
pub fn run<I, T>(args: I, stdout: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli.command, stdout) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            1
        }
    }
}

fn emit(text: &str, out: Option<&Path>, stdout: &mut dyn Write) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, text).with_context(|| format!("writing {}", path.display())),
        None => stdout.write_all(text.as_bytes()).context("writing to stdout"),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

pub fn execute(cmd: Command, stdout: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::Stats(a) => stats(a, stdout),
        Command::Split(a) => split(a, stdout),
        Command::Agree(a) => agree(a, stdout),
        Command::Convert(a) => convert(a, stdout),
        Command::Train(a) => train(a, stdout),
        Command::Predict(a) => predict(a, stdout),
        Command::Eval(a) => eval(a, stdout),
    }
}

fn stats(a: StatsArgs, stdout: &mut dyn Write) -> Result<()> {
    let mut text =
        String::from("set\tcomments\tspans\tavg_spans_per_comment\tavg_span_length\tpositive\tnegative\tneutral\n");
    let mut labels = String::from("set\tlabel\tcount\n");
    for path in &a.files {
        let c = corpus::load_jsonl(path)?;
        let s = corpus::stats(&c);
        text.push_str(&format!(
            "{}\t{}\t{}\t{:.2}\t{:.2}\t{}\t{}\t{}\n",
            c.name,
            s.comment_count,
            s.total_spans,
            s.avg_spans_per_comment,
            s.avg_span_length_chars,
            s.polarity(Polarity::Positive),
            s.polarity(Polarity::Negative),
            s.polarity(Polarity::Neutral)
        ));
        for (l, n) in &s.per_label_counts {
            labels.push_str(&format!("{}\t{l}\t{n}\n", c.name));
        }
    }
    if a.labels {
        text.push('\n');
        text.push_str(&labels);
    }
    emit(&text, a.out.as_deref(), stdout)
}

fn split(a: SplitArgs, stdout: &mut dyn Write) -> Result<()> {
    let ratios = corpus::parse_ratio(&a.ratio)?;
    let method: Apportionment = a.apportion.parse()?;
    let c = corpus::load_jsonl(&a.input)?;
    let parts = corpus::split(&c, &ratios, a.seed, method)?;
    let names = ["train", "dev", "test"];
    let mut report = String::from("part\tfile\tcomments\n");
    for (i, part) in parts.iter().enumerate() {
        let suffix = names.get(i).map_or_else(|| format!("part{i}"), |s| s.to_string());
        let path = a.out.join(format!("{}.{suffix}.jsonl", c.name));
        corpus::save_jsonl(&path, part)?;
        report.push_str(&format!("{suffix}\t{}\t{}\n", path.display(), part.len()));
    }
    emit(&report, None, stdout)
}

fn agree(a: AgreeArgs, stdout: &mut dyn Write) -> Result<()> {
    let sets = a
        .files
        .iter()
        .map(|p| {
            let c = corpus::load_jsonl(p)?;
            Ok(AnnotationSet::from_corpus(p.display().to_string(), &c))
        })
        .collect::<Result<Vec<_>>>()?;
    let group = match a.group_by {
        Grouping::None => GroupBy::None,
        Grouping::Document => GroupBy::Document,
        Grouping::Label => GroupBy::Label,
    };
    let scores = mean_pairwise_f1(&sets, group)?;
    emit(&agreement_tsv(group, &scores), a.out.as_deref(), stdout)
}

fn guess_format(path: &Path) -> Result<Format> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("jsonl") | Some("json") => Ok(Format::Jsonl),
        Some("conll") | Some("txt") | Some("tsv") => Ok(Format::Conll),
        _ => bail!("cannot tell the format of {}; pass --from", path.display()),
    }
}

fn convert(a: ConvertArgs, stdout: &mut dyn Write) -> Result<()> {
    let from = match a.from {
        Some(f) => f,
        None => guess_format(&a.input)?,
    };
    let docs = match from {
        Format::Jsonl => tagging::load_projected_jsonl(&a.input, a.scheme)?,
        Format::Conll => tagging::load_conll(&a.input, a.scheme)?,
    };
    let mut buf = Vec::new();
    match a.to {
        Format::Jsonl => tagging::write_projected_jsonl(&mut buf, &docs)?,
        Format::Conll => tagging::write_conll(&mut buf, &docs)?,
    }
    match &a.out {
        Some(p) => std::fs::write(p, &buf).with_context(|| format!("writing {}", p.display())),
        None => stdout.write_all(&buf).context("writing to stdout"),
    }
}

fn train(a: TrainArgs, stdout: &mut dyn Write) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = a.scheme {
        cfg.scheme = s;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(t) = a.threads {
        cfg.threads = t;
    }
    cfg.constrain_transitions |= a.constrain_transitions;
    cfg.validate()?;
    let train = corpus::load_jsonl(&a.train)?;
    let dev = corpus::load_jsonl(&a.dev)?;
    let pretrained = match &a.pretrained {
        Some(p) => {
            let loaded = load_pretrained(p)?;
            if !loaded.duplicates.is_empty() {
                log::warn!("{}: {} duplicate entries ignored", p.display(), loaded.duplicates.len());
            }
            Some(loaded.table)
        }
        None => None,
    };
    let context = a.context.as_ref().map(ContextualStore::load_jsonl).transpose()?;
    let res = Resources {
        pretrained,
        context: context.as_ref(),
    };
    let mut log: Box<dyn Write> = match &a.log {
        Some(p) => Box::new(create(p)?),
        None => Box::new(&mut *stdout),
    };
    writeln!(log, "{}", TrainReport::TSV_HEADER)?;
    let mut failed = None;
    let (model, report) = pipeline::train_with_log(&train, &dev, &cfg, &res, |r| {
        if let Err(e) = writeln!(log, "{}", TrainReport::tsv_row(r)).and_then(|_| log.flush()) {
            failed.get_or_insert(e);
        }
    })?;
    if let Some(e) = failed {
        return Err(e).context("writing the training log");
    }
    drop(log);
    model.save(&a.out)?;
    log::info!(
        "best dev micro F1 {:.4} at epoch {}; model written to {}",
        report.best_dev_f1,
        report.best_epoch,
        a.out.display()
    );
    Ok(())
}

fn predict(a: PredictArgs, stdout: &mut dyn Write) -> Result<()> {
    let model = Model::load(&a.model)?;
    if let Some(s) = a.scheme {
        if s != model.scheme() {
            bail!("model was trained for scheme {}, not {s}", model.scheme());
        }
    }
    let input = corpus::load_jsonl(&a.input)?;
    let context = a.context.as_ref().map(ContextualStore::load_jsonl).transpose()?;
    let pred = pipeline::predict(&model, &input, context.as_ref())?;
    match &a.out {
        Some(p) => tagging::save_projected_jsonl(p, &pred)?,
        None => tagging::write_projected_jsonl(&mut *stdout, &pred)?,
    }
    Ok(())
}

fn eval(a: EvalArgs, stdout: &mut dyn Write) -> Result<()> {
    let gold = tagging::load_projected_jsonl(&a.gold, a.scheme)?;
    let pred = tagging::load_projected_jsonl(&a.pred, a.scheme)?;
    let mode = match a.macro_mode {
        Macro::Observed => MacroMode::Observed,
        Macro::Inventory => MacroMode::Inventory,
    };
    let score = score_corpus(&gold, &pred, a.scheme, mode)?;
    emit(&score.to_tsv(), a.out.as_deref(), stdout)
}
