//! Corpus loading, cleaning, vocabulary, splits and padded batches.
//!
//! Cleaning rules, applied in order:
//!
//! | input                               | result                            |
//! |-------------------------------------|-----------------------------------|
//! | invalid UTF-8                       | replaced by U+FFFD, then dropped  |
//! | any letter                          | lowercased                        |
//! | alphanumeric character              | kept                              |
//! | whitespace (any Unicode space, `\n`)| token boundary; runs collapse     |
//! | anything else (punctuation, symbols)| deleted, no boundary              |
//!
//! So `"re-enter 2x"` becomes `["reenter", "2x"]`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Rng;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
pub const DEFAULT_MAX_LEN: usize = 400;

pub fn clean(raw: &[u8]) -> Vec<String> {
    let text = String::from_utf8_lossy(raw).to_lowercase();
    let mut tokens = Vec::new();
    let mut current = String::new();
    for c in text.chars() {
        if c.is_whitespace() {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
        } else if c.is_alphanumeric() {
            current.push(c);
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub id: String,
    pub label: String,
    pub tokens: Vec<String>,
}

/// Labeled documents sorted by id, plus the sorted class list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    classes: Vec<String>,
    docs: Vec<Document>,
}

impl Corpus {
    pub fn new(mut docs: Vec<Document>) -> Result<Self> {
        if docs.is_empty() {
            return Err(Error::contract("corpus is empty"));
        }
        docs.sort_by(|a, b| a.id.cmp(&b.id));
        if let Some(w) = docs.windows(2).find(|w| w[0].id == w[1].id) {
            return Err(Error::Config(format!("duplicate document id {:?}", w[0].id)));
        }
        let classes: BTreeSet<String> = docs.iter().map(|d| d.label.clone()).collect();
        Ok(Self {
            classes: classes.into_iter().collect(),
            docs,
        })
    }

    /// Reads either `root/<class>/*.txt` or `root/<label>__<name>.txt`.
    pub fn load(root: &Path) -> Result<Self> {
        let entries = read_dir_sorted(root)?;
        let (dirs, files): (Vec<_>, Vec<_>) = entries.into_iter().partition(|p| p.is_dir());
        let txt_files: Vec<_> = files.into_iter().filter(|p| is_txt(p)).collect();
        let mut docs = Vec::new();
        match (dirs.is_empty(), txt_files.is_empty()) {
            (false, true) => {
                for dir in dirs {
                    let label = file_name(&dir);
                    for path in read_dir_sorted(&dir)?.into_iter().filter(|p| p.is_file() && is_txt(p)) {
                        let raw = fs::read(&path).map_err(|e| Error::io(&path, e))?;
                        docs.push(Document {
                            id: format!("{label}/{}", stem(&path)),
                            label: label.clone(),
                            tokens: clean(&raw),
                        });
                    }
                }
            }
            (true, false) => {
                for path in txt_files {
                    let id = stem(&path);
                    let label = match id.split_once("__") {
                        Some((label, _)) if !label.is_empty() => label.to_string(),
                        _ => {
                            return Err(Error::Config(format!(
                                "{}: expected <label>__<name>.txt",
                                path.display()
                            )))
                        }
                    };
                    let raw = fs::read(&path).map_err(|e| Error::io(&path, e))?;
                    docs.push(Document {
                        id,
                        label,
                        tokens: clean(&raw),
                    });
                }
            }
            (false, false) => {
                return Err(Error::Config(format!(
                    "{}: mixes class subdirectories and .txt files",
                    root.display()
                )))
            }
            (true, true) => {}
        }
        if docs.is_empty() {
            return Err(Error::contract(format!("{}: no .txt documents found", root.display())));
        }
        Self::new(docs)
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn docs(&self) -> &[Document] {
        &self.docs
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Document> {
        self.docs
            .binary_search_by(|d| d.id.as_str().cmp(id))
            .ok()
            .map(|i| &self.docs[i])
    }

    /// Documents for `ids`, in that order.
    pub fn select(&self, ids: &[String]) -> Result<Vec<&Document>> {
        ids.iter()
            .map(|id| {
                self.get(id)
                    .ok_or_else(|| Error::Config(format!("document {id:?} is not in the corpus")))
            })
            .collect()
    }
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        out.push(entry.map_err(|e| Error::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

fn is_txt(p: &Path) -> bool {
    p.extension().is_some_and(|e| e == "txt")
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Token ↔ index map. Index 0 is padding, 1 is unknown.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    freqs: Vec<u64>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Keeps tokens seen at least `min_freq` times, most frequent first,
    /// ties broken alphabetically.
    pub fn build<'a, I>(docs: I, min_freq: u64) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        if min_freq < 1 {
            return Err(Error::contract("min_freq must be at least 1"));
        }
        let mut counts: HashMap<&str, u64> = HashMap::new();
        let mut n_docs = 0;
        for doc in docs {
            n_docs += 1;
            for t in doc {
                *counts.entry(t.as_str()).or_default() += 1;
            }
        }
        if n_docs == 0 {
            return Err(Error::contract("cannot build a vocabulary from an empty training set"));
        }
        let mut kept: Vec<(&str, u64)> = counts.into_iter().filter(|&(_, c)| c >= min_freq).collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let mut tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        let mut freqs = vec![0, 0];
        for (t, c) in kept {
            tokens.push(t.to_string());
            freqs.push(c);
        }
        Self::from_parts(tokens, freqs)
    }

    fn from_parts(tokens: Vec<String>, freqs: Vec<u64>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self { tokens, freqs, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn lookup(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    pub fn freq(&self, index: usize) -> Option<u64> {
        self.freqs.get(index).copied()
    }

    /// One `index\ttoken\tfreq` line per entry.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (i, (t, f)) in self.tokens.iter().zip(&self.freqs).enumerate() {
            let _ = writeln!(out, "{i}\t{t}\t{f}");
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut tokens = Vec::new();
        let mut freqs = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let bad = || Error::Format(format!("vocabulary line {}: {line:?}", n + 1));
            let mut cols = line.split('\t');
            let (i, t, f) = (cols.next(), cols.next(), cols.next());
            let (Some(i), Some(t), Some(f), None) = (i, t, f, cols.next()) else {
                return Err(bad());
            };
            if i.parse::<usize>().map_err(|_| bad())? != n {
                return Err(bad());
            }
            tokens.push(t.to_string());
            freqs.push(f.parse().map_err(|_| bad())?);
        }
        if tokens.len() < 2 || tokens[PAD] != PAD_TOKEN || tokens[UNK] != UNK_TOKEN {
            return Err(Error::Format("vocabulary must start with the padding and unknown tokens".into()));
        }
        Self::from_parts(tokens, freqs)
    }
}

/// `(train, val, test)` sizes: test is `ceil(n/10)`, validation is a fifth
/// (rounded up) of the rest.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let test = n.div_ceil(10);
    let val = (n - test).div_ceil(5);
    (n - test - val, val, test)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitPlan {
    pub seed: u64,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub warnings: Vec<String>,
}

/// Seeded shuffle, then test from the tail, then validation from the tail
/// of what remains. With `stratify` the rule runs per class.
pub fn split(corpus: &Corpus, seed: u64, stratify: bool) -> Result<SplitPlan> {
    if corpus.is_empty() {
        return Err(Error::contract("cannot split an empty corpus"));
    }
    let mut by_class: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    for d in corpus.docs() {
        by_class.entry(&d.label).or_default().push(d.id.clone());
    }
    let warnings = by_class
        .iter()
        .filter(|(_, ids)| ids.len() < 3)
        .map(|(c, ids)| format!("class {c} has only {} documents", ids.len()))
        .collect();
    let groups: Vec<Vec<String>> = if stratify {
        by_class.into_values().collect()
    } else {
        vec![corpus.docs().iter().map(|d| d.id.clone()).collect()]
    };
    let mut rng = Rng::new(seed);
    let mut plan = SplitPlan {
        seed,
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        warnings,
    };
    for mut ids in groups {
        rng.shuffle(&mut ids);
        let (train, val, _) = split_sizes(ids.len());
        let test = ids.split_off(train + val);
        let val = ids.split_off(train);
        plan.train.extend(ids);
        plan.val.extend(val);
        plan.test.extend(test);
    }
    Ok(plan)
}

impl SplitPlan {
    /// Line-oriented form: `seed\t<n>`, `warning\t<text>`, then one
    /// `<split>\t<id>` line per document.
    pub fn to_text(&self) -> String {
        let mut out = format!("seed\t{}\n", self.seed);
        for w in &self.warnings {
            let _ = writeln!(out, "warning\t{w}");
        }
        for (tag, ids) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            for id in ids {
                let _ = writeln!(out, "{tag}\t{id}");
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut seed = None;
        let mut plan = SplitPlan {
            seed: 0,
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
            warnings: Vec::new(),
        };
        for (n, line) in text.lines().enumerate() {
            let bad = || Error::Format(format!("split plan line {}: {line:?}", n + 1));
            let (tag, value) = line.split_once('\t').ok_or_else(bad)?;
            match tag {
                "seed" => seed = Some(value.parse().map_err(|_| bad())?),
                "warning" => plan.warnings.push(value.to_string()),
                "train" => plan.train.push(value.to_string()),
                "val" => plan.val.push(value.to_string()),
                "test" => plan.test.push(value.to_string()),
                _ => return Err(bad()),
            }
        }
        plan.seed = seed.ok_or_else(|| Error::Format("split plan has no seed line".into()))?;
        Ok(plan)
    }
}

/// Token indices truncated or right-padded to `max_len`.
pub fn encode(tokens: &[String], vocab: &Vocab, max_len: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = tokens.iter().take(max_len).map(|t| vocab.lookup(t)).collect();
    ids.resize(max_len, PAD);
    ids
}

/// A document ready for the model: `max_len` indices and a class index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub ids: Vec<usize>,
    pub label: usize,
}

pub fn examples(docs: &[&Document], classes: &[String], vocab: &Vocab, max_len: usize) -> Result<Vec<Example>> {
    docs.iter()
        .map(|d| {
            let label = classes
                .iter()
                .position(|c| *c == d.label)
                .ok_or_else(|| Error::Config(format!("document {} has unknown class {:?}", d.id, d.label)))?;
            Ok(Example {
                ids: encode(&d.tokens, vocab, max_len),
                label,
            })
        })
        .collect()
}

/// Row-major `[batch_size, seq_len]` token matrix with labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub tokens: Vec<usize>,
    pub labels: Vec<usize>,
    pub batch_size: usize,
    pub seq_len: usize,
}

/// One epoch of batches; the last may be short.
pub struct Batches<'a> {
    examples: &'a [Example],
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let picked = &self.order[self.pos..end];
        self.pos = end;
        let seq_len = self.examples[picked[0]].ids.len();
        let mut tokens = Vec::with_capacity(picked.len() * seq_len);
        let mut labels = Vec::with_capacity(picked.len());
        for &i in picked {
            tokens.extend_from_slice(&self.examples[i].ids);
            labels.push(self.examples[i].label);
        }
        Some(Batch {
            tokens,
            labels,
            batch_size: picked.len(),
            seq_len,
        })
    }
}

/// Batches over `examples`, shuffled when `rng` is given.
pub fn batches<'a>(examples: &'a [Example], batch_size: usize, rng: Option<&mut Rng>) -> Result<Batches<'a>> {
    if batch_size < 1 {
        return Err(Error::contract("batch size must be at least 1"));
    }
    if let Some(e) = examples.iter().find(|e| e.ids.len() != examples[0].ids.len()) {
        return Err(Error::Shape {
            op: "batches",
            lhs: vec![examples[0].ids.len()],
            rhs: vec![e.ids.len()],
        });
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    if let Some(rng) = rng {
        rng.shuffle(&mut order);
    }
    Ok(Batches {
        examples,
        order,
        pos: 0,
        batch_size,
    })
}

/// Corpus where each class owns a few marker words scattered among shared
/// filler words. Useful as a fixture that any working model can memorize.
pub fn synthetic_corpus(num_classes: usize, docs_per_class: usize, doc_len: usize, seed: u64) -> Result<Corpus> {
    if num_classes < 1 || docs_per_class < 1 || doc_len < 1 {
        return Err(Error::contract("synthetic corpus needs positive sizes"));
    }
    let mut rng = Rng::new(seed);
    let filler: Vec<String> = (0..50).map(|i| format!("w{i}")).collect();
    let mut docs = Vec::with_capacity(num_classes * docs_per_class);
    for c in 0..num_classes {
        let markers: Vec<String> = (0..3).map(|m| format!("c{c}m{m}")).collect();
        for d in 0..docs_per_class {
            let tokens = (0..doc_len)
                .map(|_| {
                    if rng.uniform() < 0.3 {
                        markers[(rng.uniform() * markers.len() as f64) as usize].clone()
                    } else {
                        filler[(rng.uniform() * filler.len() as f64) as usize].clone()
                    }
                })
                .collect();
            docs.push(Document {
                id: format!("class{c}__{d:05}"),
                label: format!("class{c}"),
                tokens,
            });
        }
    }
    Corpus::new(docs)
}
