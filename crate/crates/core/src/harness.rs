//! Run configuration, the training loop, evaluation, confusion matrices and
//! the Welch t-test.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::arch::{ArchKind, ArchOptions, ArchSpec, Model};
use crate::autograd::softmax_rows;
use crate::checkpoint::Checkpoint;
use crate::data::{self, Batch, Corpus, Document, Example, SplitPlan, Vocab};
use crate::error::{Error, Result};
use crate::optim::{OptimConfig, OptimizerKind, OptimizerState};
use crate::tensor::Rng;

pub const METRICS_HEADER: &str = "step,split,loss,accuracy_pct,lr,elapsed_s,phase";
pub const DEFAULT_EPOCHS: u64 = 20;
pub const SMALL_CORPUS_EPOCHS: u64 = 5;
pub const DEFAULT_SWITCH_STEP: u64 = 500;

/// Everything a training run needs. Optional fields are resolved from the
/// corpus and architecture when the run starts.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub arch: ArchKind,
    pub dim: usize,
    pub pointwise_channels: usize,
    pub stacked_threes: bool,
    /// Unset: 5 for corpora with at most 3 classes, 20 otherwise.
    pub epochs: Option<u64>,
    pub batch_size: usize,
    pub eval_every: u64,
    pub max_len: usize,
    pub min_freq: u64,
    pub max_steps: Option<u64>,
    pub optimizer: OptimizerKind,
    pub switch_step: u64,
    /// Rate of the first (or only) optimizer phase. Unset: 1e-3 for Adam, 1e-2 for SGD.
    pub lr: Option<f64>,
    /// SGD-phase rate under swats.
    pub sgd_lr: f64,
    pub decay: f64,
    /// Steps per decay stair; one epoch of steps when unset
    pub decay_interval: Option<u64>,
    pub momentum: f64,
    /// Unset: the architecture's default.
    pub dropout: Option<f64>,
    pub l2: Option<f64>,
    pub seed: u64,
    pub stratify: bool,
    /// Record wall-clock seconds; when false `elapsed_s` is written as 0.
    pub timing: bool,
    pub input: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub split_plan: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let optim = OptimConfig::default();
        Self {
            arch: ArchKind::Base,
            dim: crate::arch::DEFAULT_EMBEDDING_DIM,
            pointwise_channels: crate::arch::DEFAULT_POINTWISE_CHANNELS,
            stacked_threes: false,
            epochs: None,
            batch_size: 32,
            eval_every: 100,
            max_len: data::DEFAULT_MAX_LEN,
            min_freq: 1,
            max_steps: None,
            optimizer: OptimizerKind::Adam,
            switch_step: DEFAULT_SWITCH_STEP,
            lr: None,
            sgd_lr: optim.sgd_lr,
            decay: optim.decay,
            decay_interval: None,
            momentum: optim.momentum,
            dropout: None,
            l2: None,
            seed: 0,
            stratify: false,
            timing: true,
            input: None,
            out: None,
            split_plan: None,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

impl RunConfig {
    pub const KEYS: &'static [&'static str] = &[
        "arch",
        "dim",
        "pointwise_channels",
        "stacked_threes",
        "epochs",
        "batch_size",
        "eval_every",
        "max_len",
        "min_freq",
        "max_steps",
        "optimizer",
        "switch_step",
        "lr",
        "sgd_lr",
        "decay",
        "decay_interval",
        "momentum",
        "dropout",
        "l2",
        "seed",
        "stratify",
        "timing",
        "input",
        "out",
        "split_plan",
    ];

    /// Sets one field from its text form. Dashes in `key` are read as underscores.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.replace('-', "_");
        let k = key.as_str();
        match k {
            "arch" => self.arch = value.parse()?,
            "dim" => self.dim = parse(k, value)?,
            "pointwise_channels" => self.pointwise_channels = parse(k, value)?,
            "stacked_threes" => self.stacked_threes = parse(k, value)?,
            "epochs" => self.epochs = Some(parse(k, value)?),
            "batch_size" => self.batch_size = parse(k, value)?,
            "eval_every" => self.eval_every = parse(k, value)?,
            "max_len" => self.max_len = parse(k, value)?,
            "min_freq" => self.min_freq = parse(k, value)?,
            "max_steps" => self.max_steps = Some(parse(k, value)?),
            "optimizer" => self.optimizer = value.parse()?,
            "switch_step" => self.switch_step = parse(k, value)?,
            "lr" => self.lr = Some(parse(k, value)?),
            "sgd_lr" => self.sgd_lr = parse(k, value)?,
            "decay" => self.decay = parse(k, value)?,
            "decay_interval" => self.decay_interval = Some(parse(k, value)?),
            "momentum" => self.momentum = parse(k, value)?,
            "dropout" => self.dropout = Some(parse(k, value)?),
            "l2" => self.l2 = Some(parse(k, value)?),
            "seed" => self.seed = parse(k, value)?,
            "stratify" => self.stratify = parse(k, value)?,
            "timing" => self.timing = parse(k, value)?,
            "input" => self.input = Some(PathBuf::from(value)),
            "out" => self.out = Some(PathBuf::from(value)),
            "split_plan" => self.split_plan = Some(PathBuf::from(value)),
            _ => {
                return Err(Error::Config(format!(
                    "unknown config key {key:?}; valid keys: {}",
                    Self::KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Applies `key=value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("config line {}: expected key=value", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k}={v}");
        };
        kv("arch", self.arch.as_str().into());
        kv("dim", self.dim.to_string());
        kv("pointwise_channels", self.pointwise_channels.to_string());
        kv("stacked_threes", self.stacked_threes.to_string());
        if let Some(e) = self.epochs {
            kv("epochs", e.to_string());
        }
        kv("batch_size", self.batch_size.to_string());
        kv("eval_every", self.eval_every.to_string());
        kv("max_len", self.max_len.to_string());
        kv("min_freq", self.min_freq.to_string());
        if let Some(m) = self.max_steps {
            kv("max_steps", m.to_string());
        }
        kv("optimizer", self.optimizer.as_str().into());
        kv("switch_step", self.switch_step.to_string());
        if let Some(lr) = self.lr {
            kv("lr", lr.to_string());
        }
        kv("sgd_lr", self.sgd_lr.to_string());
        kv("decay", self.decay.to_string());
        if let Some(t) = self.decay_interval {
            kv("decay_interval", t.to_string());
        }
        kv("momentum", self.momentum.to_string());
        if let Some(d) = self.dropout {
            kv("dropout", d.to_string());
        }
        if let Some(l) = self.l2 {
            kv("l2", l.to_string());
        }
        kv("seed", self.seed.to_string());
        kv("stratify", self.stratify.to_string());
        kv("timing", self.timing.to_string());
        for (k, p) in [("input", &self.input), ("out", &self.out), ("split_plan", &self.split_plan)] {
            if let Some(p) = p {
                kv(k, p.display().to_string());
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn arch_options(&self) -> ArchOptions {
        ArchOptions {
            embedding_dim: self.dim,
            pointwise_channels: self.pointwise_channels,
            stacked_threes: self.stacked_threes,
        }
    }

    pub fn optim_config(&self) -> OptimConfig {
        let mut c = OptimConfig {
            kind: self.optimizer,
            sgd_lr: self.sgd_lr,
            decay: self.decay,
            decay_interval: self.decay_interval.unwrap_or(OptimConfig::default().decay_interval),
            momentum: self.momentum,
            switch_step: match self.optimizer {
                OptimizerKind::Swats => self.switch_step,
                _ => u64::MAX,
            },
            ..OptimConfig::default()
        };
        match (self.optimizer, self.lr) {
            (OptimizerKind::Sgd, Some(lr)) => c.sgd_lr = lr,
            (OptimizerKind::Sgd, None) => c.sgd_lr = OptimConfig::default().sgd_lr,
            (_, Some(lr)) => c.adam_lr = lr,
            (_, None) => {}
        }
        c
    }

    /// Checks everything that does not need the corpus.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.dim < 1 {
            return bad("dim must be positive");
        }
        if ![120, 128].contains(&self.pointwise_channels) {
            return bad("pointwise_channels must be 120 or 128");
        }
        if self.epochs == Some(0) {
            return bad("epochs must be positive");
        }
        if self.batch_size < 1 {
            return bad("batch_size must be positive");
        }
        if self.eval_every < 1 {
            return bad("eval_every must be positive");
        }
        if self.max_len < 1 {
            return bad("max_len must be positive");
        }
        if self.min_freq < 1 {
            return bad("min_freq must be positive");
        }
        if let Some(d) = self.dropout {
            if !(0.0..1.0).contains(&d) {
                return bad("dropout must be in [0, 1)");
            }
        }
        if let Some(l) = self.l2 {
            if !(l >= 0.0) {
                return bad("l2 must be non-negative");
            }
        }
        self.optim_config()
            .validate()
            .map_err(|e| Error::Config(e.to_string()))
    }

    /// Architecture for a vocabulary and class count, with this config's overrides.
    pub fn arch_spec(&self, vocab_size: usize, num_classes: usize) -> ArchSpec {
        let mut spec = ArchSpec::with_options(self.arch, vocab_size, num_classes, &self.arch_options());
        if let Some(d) = self.dropout {
            spec.dropout_rate = d;
        }
        if let Some(l) = self.l2 {
            spec.l2_coeff = l;
        }
        spec
    }
}

/// One line of the metrics CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub split: String,
    pub loss: f64,
    pub accuracy_pct: f64,
    pub lr: f64,
    pub elapsed_s: f64,
    pub phase: String,
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step, self.split, self.loss, self.accuracy_pct, self.lr, self.elapsed_s, self.phase
        )
    }
}

/// `100 · correct / total`; every accuracy in this crate goes through here.
pub fn percent(correct: u64, total: u64) -> f64 {
    correct as f64 * 100.0 / total as f64
}

/// Lowest index among the maxima.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy_pct: f64,
    pub mean_loss: f64,
    pub correct: u64,
    pub total: u64,
    /// `confusion[i][j]`: documents of class `i` predicted as `j`.
    pub confusion: Vec<Vec<u64>>,
}

impl Evaluation {
    /// Documents per true class.
    pub fn class_sizes(&self) -> Vec<u64> {
        self.confusion.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn trace(&self) -> u64 {
        (0..self.confusion.len()).map(|i| self.confusion[i][i]).sum()
    }

    /// Tab-separated matrix with class names on both axes.
    pub fn render_confusion(&self, classes: &[String]) -> String {
        let mut out = String::from("true\\pred");
        for c in classes {
            let _ = write!(out, "\t{c}");
        }
        out.push('\n');
        for (c, row) in classes.iter().zip(&self.confusion) {
            out.push_str(c);
            for n in row {
                let _ = write!(out, "\t{n}");
            }
            out.push('\n');
        }
        out
    }
}

/// Inference-mode accuracy, mean cross-entropy and confusion counts.
///
/// Per-document losses are summed in sorted order so the mean does not
/// depend on document order.
pub fn evaluate(model: &Model, examples: &[Example], batch_size: usize) -> Result<Evaluation> {
    if examples.is_empty() {
        return Err(Error::contract("cannot evaluate on an empty document set"));
    }
    let k = model.spec().num_classes;
    let mut confusion = vec![vec![0u64; k]; k];
    let mut losses = Vec::with_capacity(examples.len());
    for batch in data::batches(examples, batch_size, None)? {
        let logits = model.logits(&batch.tokens, batch.batch_size, batch.seq_len)?;
        if let Some(&bad) = batch.labels.iter().find(|&&l| l >= k) {
            return Err(Error::contract(format!("label {bad} out of range for {k} classes")));
        }
        let (_, row_losses) = softmax_rows(logits.data(), k, &batch.labels);
        losses.extend(row_losses);
        for (row, &label) in logits.data().chunks(k).zip(&batch.labels) {
            confusion[label][argmax(row)] += 1;
        }
    }
    losses.sort_by(f64::total_cmp);
    let total = examples.len() as u64;
    let correct = (0..k).map(|i| confusion[i][i]).sum();
    Ok(Evaluation {
        accuracy_pct: percent(correct, total),
        mean_loss: losses.iter().sum::<f64>() / total as f64,
        correct,
        total,
        confusion,
    })
}

/// Model, optimizer and the random streams of one run.
pub struct Trainer {
    pub model: Model,
    pub optimizer: OptimizerState,
    shuffle: Rng,
    dropout: Rng,
}

/// Result of one optimizer update.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub loss: f64,
    pub correct: u64,
    pub total: u64,
    pub lr: f64,
}

impl Trainer {
    /// Builds and initializes a model; parameters, shuffling and dropout
    /// draw from separate streams of `seed`.
    pub fn new(spec: ArchSpec, optim: OptimConfig, seed: u64) -> Result<Self> {
        let root = Rng::new(seed);
        let model = Model::build(spec, &mut root.fork(1))?;
        let optimizer = OptimizerState::new(optim, model.params().tensors())?;
        Ok(Self {
            model,
            optimizer,
            shuffle: root.fork(2),
            dropout: root.fork(3),
        })
    }

    pub fn step_count(&self) -> u64 {
        self.optimizer.step_count()
    }

    /// One shuffled pass over `examples`.
    pub fn epoch(&mut self, examples: &[Example], batch_size: usize) -> Result<Vec<Batch>> {
        Ok(data::batches(examples, batch_size, Some(&mut self.shuffle))?.collect())
    }

    /// Forward, backward and one update. Single-document batches are skipped
    /// (returns `None`) when the model has batch norm, which needs two rows.
    pub fn train_batch(&mut self, batch: &Batch) -> Result<Option<StepReport>> {
        if batch.batch_size < 2 && self.model.spec().uses_batch_norm() {
            return Ok(None);
        }
        let out = self.model.compute_gradients(
            &batch.tokens,
            batch.batch_size,
            batch.seq_len,
            &batch.labels,
            &mut self.dropout,
        )?;
        let step = self.optimizer.step_count() + 1;
        if !out.loss.is_finite() {
            return Err(Error::Divergence { step, loss: out.loss });
        }
        let lr = self.optimizer.next_lr()?;
        self.optimizer.step(self.model.params_mut().tensors_mut())?;
        self.model.params_mut().zero_grad();
        let k = self.model.spec().num_classes;
        let correct = out
            .probs
            .data()
            .chunks(k)
            .zip(&batch.labels)
            .filter(|(row, &l)| argmax(row) == l)
            .count() as u64;
        Ok(Some(StepReport {
            step,
            loss: out.loss,
            correct,
            total: batch.batch_size as u64,
            lr,
        }))
    }
}

/// Files and final numbers of a finished run.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub steps: u64,
    pub final_val: Option<Evaluation>,
    pub test: Option<Evaluation>,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
}

struct MetricsLog {
    out: BufWriter<fs::File>,
    path: PathBuf,
    start: Instant,
    timing: bool,
}

impl MetricsLog {
    fn create(path: &Path, timing: bool) -> Result<Self> {
        let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut log = Self {
            out: BufWriter::new(f),
            path: path.to_path_buf(),
            start: Instant::now(),
            timing,
        };
        log.line(METRICS_HEADER)?;
        Ok(log)
    }

    fn line(&mut self, s: &str) -> Result<()> {
        writeln!(self.out, "{s}")
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io(&self.path, e))
    }

    fn row(&mut self, step: u64, split: &str, loss: f64, accuracy_pct: f64, lr: f64, phase: &str) -> Result<()> {
        let elapsed_s = if self.timing {
            self.start.elapsed().as_secs_f64()
        } else {
            0.0
        };
        let row = MetricsRow {
            step,
            split: split.to_string(),
            loss,
            accuracy_pct,
            lr,
            elapsed_s,
            phase: phase.to_string(),
        };
        self.line(&row.to_csv())
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Loads the corpus, splits it, builds the vocabulary from the training
/// split, trains, and writes `config.txt`, `split.txt`, `vocab.tsv`,
/// `metrics.csv` and `model.ckpt` under `config.out`.
///
/// Validation rows are written every `eval_every` steps and after the last
/// step; `train` rows average the minibatches since the previous row; a
/// `test` row closes the file when the test split is non-empty.
pub fn train(config: &RunConfig) -> Result<RunSummary> {
    config.validate()?;
    let input = config
        .input
        .as_deref()
        .ok_or_else(|| Error::Config("no input corpus given".into()))?;
    let out_dir = config
        .out
        .as_deref()
        .ok_or_else(|| Error::Config("no output directory given".into()))?;
    let corpus = Corpus::load(input)?;
    let plan = match &config.split_plan {
        Some(p) => SplitPlan::from_text(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
        None => data::split(&corpus, config.seed, config.stratify)?,
    };
    let train_docs = corpus.select(&plan.train)?;
    if train_docs.is_empty() {
        return Err(Error::Config("the training split is empty".into()));
    }
    let vocab = Vocab::build(train_docs.iter().map(|d| d.tokens.as_slice()), config.min_freq)?;
    let classes = corpus.classes().to_vec();

    let mut resolved = config.clone();
    let spec = config.arch_spec(vocab.len(), classes.len());
    resolved.epochs = Some(config.epochs.unwrap_or(if classes.len() <= 3 {
        SMALL_CORPUS_EPOCHS
    } else {
        DEFAULT_EPOCHS
    }));
    let batches_per_epoch = train_docs.len().div_ceil(config.batch_size) as u64;
    resolved.decay_interval = Some(config.decay_interval.unwrap_or(batches_per_epoch));
    resolved.dropout = Some(spec.dropout_rate);
    resolved.l2 = Some(spec.l2_coeff);
    resolved.lr = Some(match config.optimizer {
        OptimizerKind::Sgd => resolved.optim_config().sgd_lr,
        _ => resolved.optim_config().adam_lr,
    });
    if config.max_len < spec.min_seq_len() {
        return Err(Error::Config(format!(
            "max_len {} is shorter than the largest effective filter height {}",
            config.max_len,
            spec.min_seq_len()
        )));
    }

    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_file(&out_dir.join("config.txt"), &resolved.to_text())?;
    write_file(&out_dir.join("split.txt"), &plan.to_text())?;
    write_file(&out_dir.join("vocab.tsv"), &vocab.to_tsv())?;

    let train_ex = data::examples(&train_docs, &classes, &vocab, config.max_len)?;
    let val_ex = data::examples(&corpus.select(&plan.val)?, &classes, &vocab, config.max_len)?;
    let test_ex = data::examples(&corpus.select(&plan.test)?, &classes, &vocab, config.max_len)?;

    let metrics_path = out_dir.join("metrics.csv");
    let mut log = MetricsLog::create(&metrics_path, config.timing)?;
    let mut trainer = Trainer::new(spec, resolved.optim_config(), config.seed)?;
    let epochs = resolved.epochs.expect("resolved");
    let max_steps = config.max_steps.unwrap_or(u64::MAX);

    let (mut loss_sum, mut seen, mut correct) = (0.0, 0u64, 0u64);
    let mut last_lr = trainer.optimizer.next_lr()?;
    let mut last_val_step = None;
    let mut final_val = None;
    'outer: for _ in 0..epochs {
        for batch in trainer.epoch(&train_ex, config.batch_size)? {
            if trainer.step_count() >= max_steps {
                break 'outer;
            }
            let Some(report) = trainer.train_batch(&batch)? else {
                continue;
            };
            loss_sum += report.loss * report.total as f64;
            seen += report.total;
            correct += report.correct;
            last_lr = report.lr;
            if report.step % config.eval_every == 0 {
                let phase = trainer.optimizer.phase().as_str();
                log.row(report.step, "train", loss_sum / seen as f64, percent(correct, seen), last_lr, phase)?;
                (loss_sum, seen, correct) = (0.0, 0, 0);
                if !val_ex.is_empty() {
                    let ev = evaluate(&trainer.model, &val_ex, config.batch_size)?;
                    log.row(report.step, "val", ev.mean_loss, ev.accuracy_pct, last_lr, phase)?;
                    final_val = Some(ev);
                }
                last_val_step = Some(report.step);
            }
        }
    }
    let step = trainer.step_count();
    let phase = trainer.optimizer.phase().as_str();
    if last_val_step != Some(step) {
        if seen > 0 {
            log.row(step, "train", loss_sum / seen as f64, percent(correct, seen), last_lr, phase)?;
        }
        if !val_ex.is_empty() {
            let ev = evaluate(&trainer.model, &val_ex, config.batch_size)?;
            log.row(step, "val", ev.mean_loss, ev.accuracy_pct, last_lr, phase)?;
            final_val = Some(ev);
        }
    }
    let test = if test_ex.is_empty() {
        None
    } else {
        let ev = evaluate(&trainer.model, &test_ex, config.batch_size)?;
        log.row(step, "test", ev.mean_loss, ev.accuracy_pct, last_lr, phase)?;
        Some(ev)
    };

    let checkpoint_path = out_dir.join("model.ckpt");
    Checkpoint {
        model: trainer.model,
        optimizer: trainer.optimizer,
        classes,
        vocab,
        max_len: config.max_len,
    }
    .save(&checkpoint_path)?;
    Ok(RunSummary {
        steps: step,
        final_val,
        test,
        metrics_path,
        checkpoint_path,
    })
}

/// Encodes `docs` for a checkpoint's vocabulary, classes and length.
pub fn checkpoint_examples(ck: &Checkpoint, docs: &[&Document]) -> Result<Vec<Example>> {
    data::examples(docs, &ck.classes, &ck.vocab, ck.max_len)
}

/// Welch two-sample t-test result.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    pub df: f64,
    pub reject: bool,
}

/// Two-sided Welch t-test; `reject` is `p < alpha`.
pub fn t_test(a: &[f64], b: &[f64], alpha: f64) -> Result<TTest> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::contract("each sample needs at least two values"));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::contract(format!("alpha {alpha} not in (0, 1)")));
    }
    let stats = |x: &[f64]| {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
        (n, mean, var)
    };
    let (na, ma, va) = stats(a);
    let (nb, mb, vb) = stats(b);
    let (sa, sb) = (va / na, vb / nb);
    if sa + sb == 0.0 {
        return Err(Error::contract("both samples have zero variance"));
    }
    let t = (ma - mb) / (sa + sb).sqrt();
    let df = (sa + sb).powi(2) / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::contract(e.to_string()))?;
    let p = (2.0 * dist.sf(t.abs())).min(1.0);
    Ok(TTest {
        t,
        p,
        df,
        reject: p < alpha,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;
    use proptest::prelude::*;

    // Reference values from an independent Welch implementation.
    const WELCH_CASES: &[(&[f64], &[f64], f64, f64, f64)] = &[
        (
            &[2.1, 2.5, 2.3, 1.9],
            &[2.0, 2.6, 2.2, 2.1],
            -0.1356646894938423,
            0.8965249199956078,
            5.9979682444126725,
        ),
        (
            &[1.0, 2.0, 3.5, 4.0],
            &[3.0, 5.5, 6.0, 8.0, 9.5, 10.0],
            -3.3984319969233066,
            0.009858679186390919,
            7.738375739028123,
        ),
    ];

    #[test]
    fn welch_matches_reference() {
        for &(a, b, t, p, df) in WELCH_CASES {
            let r = t_test(a, b, 0.05).unwrap();
            assert!((r.t - t).abs() < 1e-9, "t {} vs {t}", r.t);
            assert!((r.p - p).abs() < 1e-9, "p {} vs {p}", r.p);
            assert!((r.df - df).abs() < 1e-9);
        }
    }

    #[test]
    fn welch_edge_cases() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let same = t_test(&a, &a, 0.05).unwrap();
        assert_eq!((same.t, same.p, same.reject), (0.0, 1.0, false));
        let shifted: Vec<f64> = a.iter().map(|x| x + 100.0).collect();
        let far = t_test(&a, &shifted, 0.05).unwrap();
        assert!(far.reject);
        assert!((far.t + 100.0).abs() < 1e-9);
        assert!((far.p - 1.1167803048255944e-13).abs() < 1e-18);
        assert!(t_test(&[1.0], &a, 0.05).is_err());
        assert!(t_test(&[2.0, 2.0], &[2.0, 2.0], 0.05).is_err());
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0, 0.0]), 0);
    }

    fn tiny_setup(arch: ArchKind) -> (Model, Vec<Example>) {
        let corpus = data::synthetic_corpus(3, 4, 10, 2).unwrap();
        let docs: Vec<&Document> = corpus.docs().iter().collect();
        let vocab = Vocab::build(docs.iter().map(|d| d.tokens.as_slice()), 1).unwrap();
        let mut spec = ArchSpec::with_options(
            arch,
            vocab.len(),
            3,
            &ArchOptions {
                embedding_dim: 8,
                ..ArchOptions::default()
            },
        );
        spec.dropout_rate = 0.0;
        let model = Model::build(spec, &mut Rng::new(6)).unwrap();
        let ex = data::examples(&docs, corpus.classes(), &vocab, 10).unwrap();
        (model, ex)
    }

    #[test]
    fn evaluate_matches_per_document_loop() {
        let (model, ex) = tiny_setup(ArchKind::Lightweight);
        let ev = evaluate(&model, &ex, 5).unwrap();
        let mut correct = 0;
        let mut loss = 0.0;
        for e in &ex {
            let logits = model.logits(&e.ids, 1, e.ids.len()).unwrap();
            let row = logits.data();
            if argmax(row) == e.label {
                correct += 1;
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[e.label];
        }
        assert_eq!(ev.correct, correct);
        assert_eq!(ev.accuracy_pct, percent(correct, ex.len() as u64));
        assert!((ev.mean_loss - loss / ex.len() as f64).abs() < 1e-12);
        assert_eq!(ev.class_sizes(), vec![4, 4, 4]);
        assert_eq!(ev.trace(), ev.correct);
        assert!(evaluate(&model, &[], 5).is_err());
    }

    #[test]
    fn uniform_logits_give_ln_k_and_lowest_class() {
        let (mut model, ex) = tiny_setup(ArchKind::Base);
        for name in ["dense.weight", "dense.bias"] {
            let i = model.params().index_of(name).unwrap();
            model.params_mut().tensors_mut()[i].data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let ev = evaluate(&model, &ex, 4).unwrap();
        assert!((ev.mean_loss - 3f64.ln()).abs() < 1e-15);
        assert!(ev.confusion.iter().all(|row| row[0] == 4));
        assert_eq!(ev.accuracy_pct, percent(4, 12));
    }

    #[test]
    fn single_correct_document_is_100() {
        let (model, ex) = tiny_setup(ArchKind::Optimized);
        let logits = model.logits(&ex[0].ids, 1, 10).unwrap();
        let one = [Example {
            ids: ex[0].ids.clone(),
            label: argmax(logits.data()),
        }];
        assert_eq!(evaluate(&model, &one, 1).unwrap().accuracy_pct, 100.0);
    }

    #[test]
    fn config_text_round_trip_and_unknown_key() {
        let mut c = RunConfig::default();
        c.set("optimizer", "swats").unwrap();
        c.set("switch-step", "50").unwrap();
        c.set("lr", "0.002").unwrap();
        c.set("input", "corpus").unwrap();
        assert_eq!(RunConfig::from_text(&c.to_text()).unwrap(), c);
        assert_eq!(c.optim_config().adam_lr, 0.002);
        assert_eq!(c.optim_config().switch_step, 50);
        let err = c.set("bogus", "1").unwrap_err().to_string();
        assert!(err.contains("valid keys") && err.contains("switch_step"));
        c.set("pointwise_channels", "64").unwrap();
        assert!(c.validate().is_err());
    }

    proptest! {
        #[test]
        fn evaluate_ignores_document_order(seed in 0u64..50) {
            let (model, mut ex) = tiny_setup(ArchKind::Lightweight);
            let a = evaluate(&model, &ex, 5).unwrap();
            Rng::new(seed).shuffle(&mut ex);
            let b = evaluate(&model, &ex, 3).unwrap();
            prop_assert_eq!(a.mean_loss.to_bits(), b.mean_loss.to_bits());
            prop_assert_eq!(a.confusion, b.confusion);
        }

        #[test]
        fn welch_is_antisymmetric(a in proptest::collection::vec(-10.0f64..10.0, 2..8),
                                  b in proptest::collection::vec(-10.0f64..10.0, 2..8)) {
            if let (Ok(x), Ok(y)) = (t_test(&a, &b, 0.05), t_test(&b, &a, 0.05)) {
                prop_assert!((x.t + y.t).abs() < 1e-12);
                prop_assert!((x.p - y.p).abs() < 1e-12);
                prop_assert!((0.0..=1.0).contains(&x.p));
            }
        }
    }
}
