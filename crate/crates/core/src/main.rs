use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};

use textcnn::arch::{count_params, ArchKind, ArchOptions, ArchSpec};
use textcnn::checkpoint::Checkpoint;
use textcnn::data::{self, Corpus, SplitPlan, Vocab};
use textcnn::harness::{self, RunConfig};
use textcnn::optim::OptimizerKind;
use textcnn::{Error, Result};

#[derive(Parser)]
#[command(name = "textcnn", version, about = "Train and inspect TextCNN-family text classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write config, split, vocabulary, metrics and checkpoint
    Train(TrainArgs),
    /// Accuracy and mean loss of a checkpoint on a corpus
    Eval(EvalArgs),
    /// Per-layer trainable parameter table
    CountParams(CountArgs),
    /// Seeded train/val/test split plan
    Split(SplitArgs),
    /// Vocabulary built from the training split
    Vocab(VocabArgs),
    /// Confusion matrix of a checkpoint on a corpus
    Confusion(EvalArgs),
    /// Welch two-sample t-test
    Ttest(TtestArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ArchArg {
    Base,
    Optimized,
    Lightweight,
}

impl From<ArchArg> for ArchKind {
    fn from(a: ArchArg) -> Self {
        match a {
            ArchArg::Base => ArchKind::Base,
            ArchArg::Optimized => ArchKind::Optimized,
            ArchArg::Lightweight => ArchKind::Lightweight,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum OptimizerArg {
    Adam,
    Sgd,
    Swats,
}

impl From<OptimizerArg> for OptimizerKind {
    fn from(o: OptimizerArg) -> Self {
        match o {
            OptimizerArg::Adam => OptimizerKind::Adam,
            OptimizerArg::Sgd => OptimizerKind::Sgd,
            OptimizerArg::Swats => OptimizerKind::Swats,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

fn pointwise_channels(s: &str) -> std::result::Result<usize, String> {
    match s {
        "120" => Ok(120),
        "128" => Ok(128),
        _ => Err("must be 120 or 128".into()),
    }
}

#[derive(Args)]
struct TrainArgs {
    /// key=value config file; flags given here override it
    #[arg(long)]
    config: Option<PathBuf>,
    /// Corpus root (class subdirectories or label__id.txt files)
    #[arg(long)]
    input: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    arch: Option<ArchArg>,
    #[arg(long)]
    epochs: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    eval_every: Option<u64>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    min_freq: Option<u64>,
    /// Stop after this many updates
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long, value_enum)]
    optimizer: Option<OptimizerArg>,
    /// First update (0-based) taken with SGD under swats
    #[arg(long)]
    switch_step: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    /// SGD-phase learning rate under swats
    #[arg(long)]
    sgd_lr: Option<f64>,
    #[arg(long)]
    decay: Option<f64>,
    /// Steps per decay stair (default: one epoch)
    #[arg(long)]
    decay_interval: Option<u64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    l2: Option<f64>,
    /// Embedding dimension
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long, value_parser = pointwise_channels)]
    pointwise_channels: Option<usize>,
    /// Optimized arch: two stacked height-3 filters instead of height 5
    #[arg(long)]
    stacked_threes: bool,
    #[arg(long)]
    stratify: bool,
    /// Use this split plan instead of computing one
    #[arg(long)]
    split_plan: Option<PathBuf>,
    /// Write elapsed_s as 0 so metrics files are byte-reproducible
    #[arg(long)]
    no_timing: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    /// Restrict to one split of this plan
    #[arg(long, requires = "split")]
    split_plan: Option<PathBuf>,
    #[arg(long, value_enum, requires = "split_plan")]
    split: Option<SplitArg>,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
}

#[derive(Args)]
struct CountArgs {
    /// Architecture (alternative to --arch)
    #[arg(value_enum, value_name = "ARCH", conflicts_with = "arch")]
    arch_pos: Option<ArchArg>,
    #[arg(long, value_enum)]
    arch: Option<ArchArg>,
    #[arg(long)]
    vocab: Option<usize>,
    #[arg(long, default_value_t = 200)]
    dim: usize,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long, value_parser = pointwise_channels, default_value = "120")]
    pointwise_channels: usize,
    #[arg(long)]
    stacked_threes: bool,
    /// key=value architecture spec file (replaces the other flags)
    #[arg(long, conflicts_with_all = ["arch_pos", "arch", "vocab", "classes"])]
    spec: Option<PathBuf>,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    stratify: bool,
    /// Plan file to write (default: standard output)
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct VocabArgs {
    #[arg(long)]
    input: PathBuf,
    /// Plan whose train split to use; computed from --seed when absent
    #[arg(long)]
    split_plan: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    stratify: bool,
    #[arg(long, default_value_t = 1)]
    min_freq: u64,
    /// Vocabulary file to write (default: standard output)
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct TtestArgs {
    /// Comma-separated first sample
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
    a: Vec<f64>,
    /// Comma-separated second sample
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
    b: Vec<f64>,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_or_print(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| Error::Io {
            path: p.to_path_buf(),
            source: e,
        }),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run_train(a: TrainArgs) -> Result<()> {
    let mut c = RunConfig::default();
    if let Some(p) = &a.config {
        c.apply_text(&read(p)?)?;
    }
    macro_rules! set {
        ($($field:ident),*) => {
            $(if let Some(v) = a.$field { c.set(stringify!($field), &v.to_string())?; })*
        };
    }
    set!(seed, epochs, batch_size, eval_every, max_len, min_freq, max_steps, switch_step, lr, sgd_lr,
        decay, decay_interval, momentum, dropout, l2, dim, pointwise_channels);
    if let Some(v) = a.arch {
        c.arch = v.into();
    }
    if let Some(v) = a.optimizer {
        c.optimizer = v.into();
    }
    if a.stacked_threes {
        c.stacked_threes = true;
    }
    if a.stratify {
        c.stratify = true;
    }
    if a.no_timing {
        c.timing = false;
    }
    for (slot, v) in [(&mut c.input, a.input), (&mut c.out, a.out), (&mut c.split_plan, a.split_plan)] {
        if v.is_some() {
            *slot = v;
        }
    }
    let summary = harness::train(&c)?;
    eprintln!("trained {} steps", summary.steps);
    if let Some(v) = &summary.final_val {
        eprintln!("validation: accuracy {:.2}% loss {:.4}", v.accuracy_pct, v.mean_loss);
    }
    if let Some(t) = &summary.test {
        eprintln!("test: accuracy {:.2}% loss {:.4}", t.accuracy_pct, t.mean_loss);
    }
    eprintln!("metrics: {}", summary.metrics_path.display());
    eprintln!("checkpoint: {}", summary.checkpoint_path.display());
    Ok(())
}

fn load_eval(a: &EvalArgs) -> Result<(Checkpoint, harness::Evaluation)> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let corpus = Corpus::load(&a.input)?;
    let docs = match (&a.split_plan, a.split) {
        (Some(p), Some(which)) => {
            let plan = SplitPlan::from_text(&read(p)?)?;
            let ids = match which {
                SplitArg::Train => &plan.train,
                SplitArg::Val => &plan.val,
                SplitArg::Test => &plan.test,
            };
            corpus.select(ids)?
        }
        _ => corpus.docs().iter().collect(),
    };
    let examples = harness::checkpoint_examples(&ck, &docs)?;
    let ev = harness::evaluate(&ck.model, &examples, a.batch_size)?;
    Ok((ck, ev))
}

fn run_eval(a: EvalArgs) -> Result<()> {
    let (ck, ev) = load_eval(&a)?;
    println!("class\tdocuments\tcorrect");
    for (i, c) in ck.classes.iter().enumerate() {
        println!("{c}\t{}\t{}", ev.class_sizes()[i], ev.confusion[i][i]);
    }
    println!("total\t{}\t{}", ev.total, ev.correct);
    eprintln!("accuracy {}% mean loss {}", ev.accuracy_pct, ev.mean_loss);
    Ok(())
}

fn run_confusion(a: EvalArgs) -> Result<()> {
    let (ck, ev) = load_eval(&a)?;
    print!("{}", ev.render_confusion(&ck.classes));
    eprintln!("{} documents, accuracy {}%", ev.total, ev.accuracy_pct);
    Ok(())
}

fn run_count(a: CountArgs) -> Result<()> {
    let spec = match &a.spec {
        Some(p) => ArchSpec::from_text(&read(p)?)?,
        None => {
            let arch = a
                .arch_pos
                .or(a.arch)
                .ok_or_else(|| Error::Config("give an architecture (positional or --arch) or --spec".into()))?;
            let vocab = a.vocab.ok_or_else(|| Error::Config("--vocab is required".into()))?;
            let classes = a.classes.ok_or_else(|| Error::Config("--classes is required".into()))?;
            let opts = ArchOptions {
                embedding_dim: a.dim,
                pointwise_channels: a.pointwise_channels,
                stacked_threes: a.stacked_threes,
            };
            let spec = ArchSpec::with_options(arch.into(), vocab, classes, &opts);
            spec.validate()?;
            spec
        }
    };
    let table = count_params(&spec);
    println!("layer\tdetail\tparams");
    for r in &table.rows {
        println!("{}\t{}\t{}", r.layer, r.detail, r.params);
    }
    println!("total\t\t{}", table.total);
    eprintln!(
        "{} {}: {} parameters ({} outside the embedding)",
        spec.kind.as_str(),
        spec.vocab_size,
        table.total,
        table.non_embedding()
    );
    Ok(())
}

fn run_split(a: SplitArgs) -> Result<()> {
    let corpus = Corpus::load(&a.input)?;
    let plan = data::split(&corpus, a.seed, a.stratify)?;
    write_or_print(a.output.as_deref(), &plan.to_text())?;
    for w in &plan.warnings {
        eprintln!("warning: {w}");
    }
    eprintln!(
        "{} documents: train {} val {} test {}",
        corpus.len(),
        plan.train.len(),
        plan.val.len(),
        plan.test.len()
    );
    Ok(())
}

fn run_vocab(a: VocabArgs) -> Result<()> {
    let corpus = Corpus::load(&a.input)?;
    let plan = match &a.split_plan {
        Some(p) => SplitPlan::from_text(&read(p)?)?,
        None => data::split(&corpus, a.seed, a.stratify)?,
    };
    let docs = corpus.select(&plan.train)?;
    let vocab = Vocab::build(docs.iter().map(|d| d.tokens.as_slice()), a.min_freq)?;
    write_or_print(a.output.as_deref(), &vocab.to_tsv())?;
    eprintln!("{} entries from {} training documents", vocab.len(), docs.len());
    Ok(())
}

fn run_ttest(a: TtestArgs) -> Result<()> {
    let r = harness::t_test(&a.a, &a.b, a.alpha)?;
    println!("t\tp\tdf\treject");
    println!("{}\t{}\t{}\t{}", r.t, r.p, r.df, r.reject);
    eprintln!(
        "Welch t = {:.4}, p = {:.4}: {} at alpha {}",
        r.t,
        r.p,
        if r.reject { "reject" } else { "do not reject" },
        a.alpha
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            if e.kind() == ErrorKind::UnknownArgument {
                let sub = std::env::args().nth(1).unwrap_or_default();
                let mut cmd = Cli::command();
                if let Some(sc) = cmd.find_subcommand_mut(&sub) {
                    eprintln!("\nvalid flags for {sub}:\n{}", sc.render_help());
                }
            }
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::CountParams(a) => run_count(a),
        Command::Split(a) => run_split(a),
        Command::Vocab(a) => run_vocab(a),
        Command::Confusion(a) => run_confusion(a),
        Command::Ttest(a) => run_ttest(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Error::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
