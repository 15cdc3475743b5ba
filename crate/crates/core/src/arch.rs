//! The three architectures, their parameter accounting, and the model that
//! runs them.
//!
//! Every architecture is embedding → parallel convolution branches →
//! max-over-time pooling → concatenation → dropout → dense softmax layer.
//! They differ only in the branch list and in where batch norm sits:
//!
//! | arch        | branches                                                       |
//! |-------------|----------------------------------------------------------------|
//! | base        | full-width heights 3, 4, 5 × 128 filters, ReLU                  |
//! | optimized   | full-width heights 2, 3, 5 × 120 filters, ReLU, L2              |
//! | lightweight | BN(embedding), then per branch one depthwise filter (heights 2, |
//! |             | 3, and 3 at dilation 2) → 1×1 to C channels → BN → leaky ReLU;  |
//! |             | the dilated branch adds a height-3 per-channel stage before BN  |

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::autograd::{BatchStats, Graph, Var};
use crate::error::{Error, Result};
use crate::layers::{self, Activation, BatchNormState, ConvFilterSpec, ConvKind, Mode};
use crate::tensor::{init, Init, Rng, Tensor};

pub const DEFAULT_EMBEDDING_DIM: usize = 200;
pub const DEFAULT_POINTWISE_CHANNELS: usize = 120;
pub const LEAKY_ALPHA: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ArchKind {
    Base,
    Optimized,
    Lightweight,
}

impl ArchKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ArchKind::Base => "base",
            ArchKind::Optimized => "optimized",
            ArchKind::Lightweight => "lightweight",
        }
    }
}

impl FromStr for ArchKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(ArchKind::Base),
            "optimized" => Ok(ArchKind::Optimized),
            "lightweight" => Ok(ArchKind::Lightweight),
            other => Err(Error::Config(format!(
                "unknown architecture {other:?} (expected base, optimized or lightweight)"
            ))),
        }
    }
}

/// Which weights the L2 penalty covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum L2Scope {
    Dense,
    AllWeights,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BranchSpec {
    pub name: String,
    pub stages: Vec<ConvFilterSpec>,
    /// Batch norm between the last stage and the activation.
    pub batch_norm: bool,
    pub activation: Activation,
}

impl BranchSpec {
    pub fn out_channels(&self) -> usize {
        self.stages.last().map_or(0, |s| s.out_channels)
    }

    /// Shortest input sequence that leaves at least one output position.
    pub fn min_seq_len(&self) -> usize {
        self.stages.iter().map(|s| s.effective_height() - 1).sum::<usize>() + 1
    }
}

/// Knobs that select between documented variants of the three architectures.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchOptions {
    pub embedding_dim: usize,
    /// Output channels of the lightweight 1×1 projections (120 or 128).
    pub pointwise_channels: usize,
    /// Optimized arch only: replace each height-5 filter by two stacked height-3 filters.
    pub stacked_threes: bool,
}

impl Default for ArchOptions {
    fn default() -> Self {
        Self {
            embedding_dim: DEFAULT_EMBEDDING_DIM,
            pointwise_channels: DEFAULT_POINTWISE_CHANNELS,
            stacked_threes: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchSpec {
    pub kind: ArchKind,
    pub vocab_size: usize,
    pub embedding_dim: usize,
    pub num_classes: usize,
    pub branches: Vec<BranchSpec>,
    pub embed_batch_norm: bool,
    pub dropout_rate: f64,
    pub l2_coeff: f64,
    pub l2_scope: L2Scope,
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
}

impl ArchSpec {
    pub fn base(vocab_size: usize, num_classes: usize) -> Self {
        Self::with_options(ArchKind::Base, vocab_size, num_classes, &ArchOptions::default())
    }

    pub fn optimized(vocab_size: usize, num_classes: usize) -> Self {
        Self::with_options(ArchKind::Optimized, vocab_size, num_classes, &ArchOptions::default())
    }

    pub fn lightweight(vocab_size: usize, num_classes: usize) -> Self {
        Self::with_options(ArchKind::Lightweight, vocab_size, num_classes, &ArchOptions::default())
    }

    pub fn with_options(kind: ArchKind, vocab_size: usize, num_classes: usize, opts: &ArchOptions) -> Self {
        let d = opts.embedding_dim;
        let wide = |name: &str, heights: &[usize], filters: usize| BranchSpec {
            name: name.to_string(),
            stages: heights
                .iter()
                .enumerate()
                .map(|(i, &h)| {
                    if i == 0 {
                        ConvFilterSpec::full(h, d, 1, filters)
                    } else {
                        ConvFilterSpec::full(h, 1, filters, filters)
                    }
                })
                .collect(),
            batch_norm: false,
            activation: Activation::Relu,
        };
        let (branches, embed_batch_norm, l2_coeff) = match kind {
            ArchKind::Base => (
                vec![wide("h3", &[3], 128), wide("h4", &[4], 128), wide("h5", &[5], 128)],
                false,
                0.0,
            ),
            ArchKind::Optimized => {
                let last = if opts.stacked_threes {
                    wide("h3x3", &[3, 3], 120)
                } else {
                    wide("h5", &[5], 120)
                };
                (vec![wide("h2", &[2], 120), wide("h3", &[3], 120), last], false, 1e-3)
            }
            ArchKind::Lightweight => {
                let c = opts.pointwise_channels;
                let separable = |name: &str, h: usize, dilation: usize, extra: bool| {
                    let mut stages = vec![
                        ConvFilterSpec::depthwise(h, d, 1).with_dilation(dilation),
                        ConvFilterSpec::pointwise(1, c),
                    ];
                    if extra {
                        stages.push(ConvFilterSpec::depthwise(3, 1, c));
                    }
                    BranchSpec {
                        name: name.to_string(),
                        stages,
                        batch_norm: true,
                        activation: Activation::LeakyRelu(LEAKY_ALPHA),
                    }
                };
                (
                    vec![
                        separable("h2", 2, 1, false),
                        separable("h3", 3, 1, false),
                        separable("h3d2", 3, 2, true),
                    ],
                    true,
                    1e-3,
                )
            }
        };
        Self {
            kind,
            vocab_size,
            embedding_dim: d,
            num_classes,
            branches,
            embed_batch_norm,
            dropout_rate: 0.5,
            l2_coeff,
            l2_scope: L2Scope::Dense,
            bn_momentum: 0.9,
            bn_epsilon: 1e-5,
        }
    }

    pub fn dense_inputs(&self) -> usize {
        self.branches.iter().map(BranchSpec::out_channels).sum()
    }

    pub fn min_seq_len(&self) -> usize {
        self.branches.iter().map(BranchSpec::min_seq_len).max().unwrap_or(1)
    }

    pub fn uses_batch_norm(&self) -> bool {
        self.embed_batch_norm || self.branches.iter().any(|b| b.batch_norm)
    }

    /// Checks that every stage consumes what the previous one produces.
    pub fn validate(&self) -> Result<()> {
        let build_err = |stage: String, reason: String| Err(Error::Build { stage, reason });
        if self.vocab_size < 1 || self.embedding_dim < 1 {
            return build_err("embedding".into(), "vocabulary and dimension must be positive".into());
        }
        if self.num_classes < 1 {
            return build_err("dense".into(), "need at least one class".into());
        }
        if self.branches.is_empty() {
            return build_err("branches".into(), "need at least one branch".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return build_err("dropout".into(), format!("rate {} not in [0, 1)", self.dropout_rate));
        }
        if !(self.l2_coeff >= 0.0) {
            return build_err("dense".into(), format!("l2 coefficient {} is negative", self.l2_coeff));
        }
        if self.uses_batch_norm() {
            BatchNormState::new(1, self.bn_momentum, self.bn_epsilon).map_err(|e| Error::Build {
                stage: "batch_norm".into(),
                reason: e.to_string(),
            })?;
        }
        let mut names = std::collections::HashSet::new();
        for b in &self.branches {
            if b.name.is_empty() || !b.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                return build_err(format!("branch {:?}", b.name), "names must be non-empty [A-Za-z0-9_]".into());
            }
            if !names.insert(&b.name) {
                return build_err(format!("branch {}", b.name), "duplicate branch name".into());
            }
            if b.stages.is_empty() {
                return build_err(format!("branch {}", b.name), "no stages".into());
            }
            let mut features = self.embedding_dim;
            for (i, s) in b.stages.iter().enumerate() {
                let stage = format!("branch {} stage {i}", b.name);
                if let Err(e) = s.validate() {
                    return build_err(stage, e.to_string());
                }
                if s.input_features() != features {
                    return build_err(
                        stage,
                        format!(
                            "expects {} input features ({}×{}), previous layer produces {features}",
                            s.input_features(),
                            s.width,
                            s.in_channels
                        ),
                    );
                }
                features = s.out_channels;
            }
        }
        Ok(())
    }

    /// Human-readable `key=value` form; round-trips through [`ArchSpec::from_text`].
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "kind={}", self.kind.as_str());
        let _ = writeln!(out, "vocab_size={}", self.vocab_size);
        let _ = writeln!(out, "embedding_dim={}", self.embedding_dim);
        let _ = writeln!(out, "num_classes={}", self.num_classes);
        let _ = writeln!(out, "embed_batch_norm={}", self.embed_batch_norm);
        let _ = writeln!(out, "dropout_rate={}", self.dropout_rate);
        let _ = writeln!(out, "l2_coeff={}", self.l2_coeff);
        let scope = match self.l2_scope {
            L2Scope::Dense => "dense",
            L2Scope::AllWeights => "all_weights",
        };
        let _ = writeln!(out, "l2_scope={scope}");
        let _ = writeln!(out, "bn_momentum={}", self.bn_momentum);
        let _ = writeln!(out, "bn_epsilon={}", self.bn_epsilon);
        for b in &self.branches {
            let act = match b.activation {
                Activation::Relu => "relu".to_string(),
                Activation::LeakyRelu(a) => format!("leaky_relu:{a}"),
            };
            let stages: Vec<String> = b
                .stages
                .iter()
                .map(|s| {
                    let kind = match s.kind {
                        ConvKind::Full => "full",
                        ConvKind::Depthwise => "depthwise",
                    };
                    format!(
                        "{kind}:{}x{}x{}>{}@{}",
                        s.height, s.width, s.in_channels, s.out_channels, s.dilation
                    )
                })
                .collect();
            let _ = writeln!(
                out,
                "branch={};bn={};act={act};stages={}",
                b.name,
                b.batch_norm,
                stages.join(",")
            );
        }
        out
    }

    /// Parses the `key=value` form. `kind`, `vocab_size` and `num_classes`
    /// are required; branches default to the standard ones for `kind`, built
    /// with the optional `embedding_dim`, `pointwise_channels` and
    /// `stacked_threes` keys. Blank lines and `#` comments are ignored.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut scalars = BTreeMap::new();
        let mut branch_lines = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", lineno + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if k == "branch" {
                branch_lines.push(v.to_string());
            } else if scalars.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::Config(format!("duplicate key {k:?}")));
            }
        }
        let mut take = |k: &str| scalars.remove(k);
        let required = |v: Option<String>, k: &str| v.ok_or_else(|| Error::Config(format!("missing key {k:?}")));
        let kind: ArchKind = required(take("kind"), "kind")?.parse()?;
        let vocab_size = parse_num(&required(take("vocab_size"), "vocab_size")?, "vocab_size")?;
        let num_classes = parse_num(&required(take("num_classes"), "num_classes")?, "num_classes")?;
        let mut opts = ArchOptions::default();
        if let Some(v) = take("embedding_dim") {
            opts.embedding_dim = parse_num(&v, "embedding_dim")?;
        }
        if let Some(v) = take("pointwise_channels") {
            opts.pointwise_channels = parse_num(&v, "pointwise_channels")?;
        }
        if let Some(v) = take("stacked_threes") {
            opts.stacked_threes = parse_num(&v, "stacked_threes")?;
        }
        let mut spec = Self::with_options(kind, vocab_size, num_classes, &opts);
        if let Some(v) = take("embed_batch_norm") {
            spec.embed_batch_norm = parse_num(&v, "embed_batch_norm")?;
        }
        if let Some(v) = take("dropout_rate") {
            spec.dropout_rate = parse_num(&v, "dropout_rate")?;
        }
        if let Some(v) = take("l2_coeff") {
            spec.l2_coeff = parse_num(&v, "l2_coeff")?;
        }
        if let Some(v) = take("l2_scope") {
            spec.l2_scope = match v.as_str() {
                "dense" => L2Scope::Dense,
                "all_weights" => L2Scope::AllWeights,
                other => return Err(Error::Config(format!("unknown l2_scope {other:?}"))),
            };
        }
        if let Some(v) = take("bn_momentum") {
            spec.bn_momentum = parse_num(&v, "bn_momentum")?;
        }
        if let Some(v) = take("bn_epsilon") {
            spec.bn_epsilon = parse_num(&v, "bn_epsilon")?;
        }
        if let Some(k) = scalars.keys().next() {
            return Err(Error::Config(format!("unknown spec key {k:?}")));
        }
        if !branch_lines.is_empty() {
            spec.branches = branch_lines
                .iter()
                .map(|l| parse_branch(l))
                .collect::<Result<_>>()?;
        }
        spec.validate()?;
        Ok(spec)
    }

    /// SHA-256 of [`ArchSpec::to_text`].
    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.to_text().as_bytes()).into()
    }
}

fn parse_num<T: FromStr>(v: &str, key: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("invalid value {v:?} for {key}")))
}

fn parse_branch(line: &str) -> Result<BranchSpec> {
    let bad = || Error::Config(format!("malformed branch line {line:?}"));
    let mut parts = line.split(';');
    let name = parts.next().ok_or_else(bad)?.trim().to_string();
    let (mut bn, mut act, mut stages) = (None, None, None);
    for part in parts {
        let (k, v) = part.split_once('=').ok_or_else(bad)?;
        match k.trim() {
            "bn" => bn = Some(parse_num::<bool>(v, "bn")?),
            "act" => {
                act = Some(match v.split_once(':') {
                    None if v == "relu" => Activation::Relu,
                    Some(("leaky_relu", a)) => Activation::LeakyRelu(parse_num(a, "act")?),
                    _ => return Err(bad()),
                })
            }
            "stages" => {
                stages = Some(
                    v.split(',')
                        .map(|s| parse_stage(s.trim()).ok_or_else(bad))
                        .collect::<Result<Vec<_>>>()?,
                )
            }
            _ => return Err(bad()),
        }
    }
    Ok(BranchSpec {
        name,
        stages: stages.ok_or_else(bad)?,
        batch_norm: bn.unwrap_or(false),
        activation: act.unwrap_or(Activation::Relu),
    })
}

/// `kind:HxWxIN>OUT@DIL`
fn parse_stage(s: &str) -> Option<ConvFilterSpec> {
    let (kind, rest) = s.split_once(':')?;
    let (dims, dilation) = rest.split_once('@')?;
    let (hwi, out) = dims.split_once('>')?;
    let mut hwi = hwi.split('x').map(str::parse::<usize>);
    let (height, width, in_channels) = (hwi.next()?.ok()?, hwi.next()?.ok()?, hwi.next()?.ok()?);
    if hwi.next().is_some() {
        return None;
    }
    Some(ConvFilterSpec {
        kind: match kind {
            "full" => ConvKind::Full,
            "depthwise" => ConvKind::Depthwise,
            _ => return None,
        },
        height,
        width,
        in_channels,
        out_channels: out.parse().ok()?,
        dilation: dilation.parse().ok()?,
    })
}

/// One row of a parameter-count table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerCount {
    pub layer: String,
    pub detail: String,
    pub params: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamTable {
    pub rows: Vec<LayerCount>,
    pub total: usize,
}

impl ParamTable {
    pub fn embedding(&self) -> usize {
        self.rows
            .iter()
            .filter(|r| r.layer == "embedding")
            .map(|r| r.params)
            .sum()
    }

    pub fn non_embedding(&self) -> usize {
        self.total - self.embedding()
    }
}

/// Trainable parameters per layer, from the layer formulas alone (nothing is
/// allocated).
pub fn count_params(spec: &ArchSpec) -> ParamTable {
    let mut rows = Vec::new();
    let d = spec.embedding_dim;
    rows.push(LayerCount {
        layer: "embedding".into(),
        detail: format!("{}x{d}", spec.vocab_size),
        params: spec.vocab_size * d,
    });
    if spec.embed_batch_norm {
        rows.push(LayerCount {
            layer: "embed_bn".into(),
            detail: format!("gamma+beta {d}"),
            params: 2 * d,
        });
    }
    for b in &spec.branches {
        for (i, s) in b.stages.iter().enumerate() {
            let kind = match s.kind {
                ConvKind::Full => "conv",
                ConvKind::Depthwise => "depthwise",
            };
            rows.push(LayerCount {
                layer: format!("branch.{}.conv{i}", b.name),
                detail: format!(
                    "{kind} h={} w={} in={} out={} dilation={}",
                    s.height, s.width, s.in_channels, s.out_channels, s.dilation
                ),
                params: s.param_count(),
            });
        }
        if b.batch_norm {
            rows.push(LayerCount {
                layer: format!("branch.{}.bn", b.name),
                detail: format!("gamma+beta {}", b.out_channels()),
                params: 2 * b.out_channels(),
            });
        }
    }
    let f = spec.dense_inputs();
    let k = spec.num_classes;
    rows.push(LayerCount {
        layer: "dense".into(),
        detail: format!("{f}x{k}+{k}"),
        params: f * k + k,
    });
    let total = rows.iter().map(|r| r.params).sum();
    ParamTable { rows, total }
}

/// Named trainable tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ModelParams {
    pub fn new(names: Vec<String>, tensors: Vec<Tensor>) -> Result<Self> {
        if names.len() != tensors.len() {
            return Err(Error::contract("parameter names and tensors differ in length"));
        }
        Ok(Self { names, tensors })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Literal number of allocated elements.
    pub fn element_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }
}

struct Slot {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

fn param_plan(spec: &ArchSpec) -> Vec<Slot> {
    let mut plan = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init: Init| plan.push(Slot { name, shape, init });
    let d = spec.embedding_dim;
    push("embedding".into(), vec![spec.vocab_size, d], Init::Uniform { lo: -1.0, hi: 1.0 });
    if spec.embed_batch_norm {
        push("embed_bn.gamma".into(), vec![d], Init::Ones);
        push("embed_bn.beta".into(), vec![d], Init::Zeros);
    }
    for b in &spec.branches {
        for (i, s) in b.stages.iter().enumerate() {
            let prefix = format!("branch.{}.conv{i}", b.name);
            push(format!("{prefix}.weight"), s.weight_shape(), Init::TruncatedNormal { std: 0.1 });
            push(format!("{prefix}.bias"), s.bias_shape(), Init::Zeros);
        }
        if b.batch_norm {
            push(format!("branch.{}.bn.gamma", b.name), vec![b.out_channels()], Init::Ones);
            push(format!("branch.{}.bn.beta", b.name), vec![b.out_channels()], Init::Zeros);
        }
    }
    push(
        "dense.weight".into(),
        vec![spec.dense_inputs(), spec.num_classes],
        Init::TruncatedNormal { std: 0.1 },
    );
    push("dense.bias".into(), vec![spec.num_classes], Init::Zeros);
    plan
}

/// Parameter tensor names of a built model, in storage order.
pub fn param_names(spec: &ArchSpec) -> Vec<String> {
    param_plan(spec).into_iter().map(|s| s.name).collect()
}

/// Batch-norm layer names, in the order their running statistics are stored.
pub fn batch_norm_layers(spec: &ArchSpec) -> Vec<String> {
    bn_names(spec).into_iter().map(|(n, _)| n).collect()
}

fn bn_names(spec: &ArchSpec) -> Vec<(String, usize)> {
    let mut out = Vec::new();
    if spec.embed_batch_norm {
        out.push(("embed_bn".to_string(), spec.embedding_dim));
    }
    for b in &spec.branches {
        if b.batch_norm {
            out.push((format!("branch.{}.bn", b.name), b.out_channels()));
        }
    }
    out
}

/// Output of [`Model::forward`].
pub struct Forward {
    pub logits: Var,
    /// Weights covered by the L2 penalty.
    pub l2_params: Vec<Var>,
    /// Train-mode batch statistics, indexed like [`Model::batch_norms`].
    pub bn_stats: Vec<(usize, BatchStats)>,
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub loss: f64,
    pub probs: Tensor,
}

/// A built architecture: spec, parameters and batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: ArchSpec,
    params: ModelParams,
    bn: Vec<BatchNormState>,
}

impl Model {
    pub fn build(spec: ArchSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let plan = param_plan(&spec);
        let mut names = Vec::with_capacity(plan.len());
        let mut tensors = Vec::with_capacity(plan.len());
        for slot in plan {
            tensors.push(init(slot.init, &slot.shape, rng)?);
            names.push(slot.name);
        }
        let bn = bn_names(&spec)
            .into_iter()
            .map(|(_, f)| BatchNormState::new(f, spec.bn_momentum, spec.bn_epsilon))
            .collect::<Result<_>>()?;
        Ok(Self {
            spec,
            params: ModelParams::new(names, tensors)?,
            bn,
        })
    }

    /// Reassembles a model from stored parts, checking names and shapes
    /// against the spec.
    pub fn from_parts(spec: ArchSpec, params: ModelParams, bn: Vec<BatchNormState>) -> Result<Self> {
        spec.validate()?;
        let plan = param_plan(&spec);
        if plan.len() != params.len() {
            return Err(Error::Format(format!(
                "spec needs {} parameter tensors, found {}",
                plan.len(),
                params.len()
            )));
        }
        for (slot, (name, t)) in plan.iter().zip(params.iter()) {
            if slot.name != name || slot.shape != t.shape() {
                return Err(Error::Format(format!(
                    "parameter {name} {:?} does not match spec slot {} {:?}",
                    t.shape(),
                    slot.name,
                    slot.shape
                )));
            }
        }
        let expected = bn_names(&spec);
        if expected.len() != bn.len() || expected.iter().zip(&bn).any(|((_, f), s)| *f != s.features()) {
            return Err(Error::Format("batch norm statistics do not match spec".into()));
        }
        Ok(Self { spec, params, bn })
    }

    pub fn spec(&self) -> &ArchSpec {
        &self.spec
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams {
        &mut self.params
    }

    pub fn batch_norms(&self) -> &[BatchNormState] {
        &self.bn
    }

    /// Names of the batch-norm layers, aligned with [`Model::batch_norms`].
    pub fn batch_norm_names(&self) -> Vec<String> {
        batch_norm_layers(&self.spec)
    }

    fn pid(&self, name: &str) -> usize {
        self.params
            .index_of(name)
            .unwrap_or_else(|| panic!("parameter {name} missing from built model"))
    }

    /// Records the forward pass for a row-major `[batch, len]` token matrix on
    /// `g`, which must have been created over `self.params().tensors()`.
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        tokens: &[usize],
        batch: usize,
        len: usize,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<Forward> {
        let spec = &self.spec;
        if len < spec.min_seq_len() {
            return Err(Error::EmptyFeatureMap {
                len,
                height: spec.min_seq_len(),
            });
        }
        let mut bn_stats = Vec::new();
        let mut bn_index = 0;
        let mut norm = |g: &mut Graph<'_>, x: Var, prefix: &str| -> Result<Var> {
            let gamma = g.param(self.pid(&format!("{prefix}.gamma")));
            let beta = g.param(self.pid(&format!("{prefix}.beta")));
            let (y, stats) = layers::batch_norm(g, x, gamma, beta, &self.bn[bn_index], mode)?;
            if let Some(s) = stats {
                bn_stats.push((bn_index, s));
            }
            bn_index += 1;
            Ok(y)
        };

        let table = g.param(self.pid("embedding"));
        let mut embedded = g.embed(table, tokens, batch, len)?;
        if spec.embed_batch_norm {
            embedded = norm(g, embedded, "embed_bn")?;
        }

        let mut l2_params = Vec::new();
        let mut pooled = Vec::with_capacity(spec.branches.len());
        for b in &spec.branches {
            let mut h = embedded;
            for (i, stage) in b.stages.iter().enumerate() {
                let w = g.param(self.pid(&format!("branch.{}.conv{i}.weight", b.name)));
                let bias = g.param(self.pid(&format!("branch.{}.conv{i}.bias", b.name)));
                if spec.l2_scope == L2Scope::AllWeights {
                    l2_params.push(w);
                }
                h = layers::conv(g, h, w, bias, stage)?;
            }
            if b.batch_norm {
                h = norm(g, h, &format!("branch.{}.bn", b.name))?;
            }
            h = b.activation.apply(g, h);
            pooled.push(g.max_over_time(h)?);
        }
        let features = if pooled.len() == 1 {
            pooled[0]
        } else {
            g.concat(&pooled)?
        };
        let features = layers::dropout(g, features, spec.dropout_rate, mode, rng)?;
        let w = g.param(self.pid("dense.weight"));
        let bias = g.param(self.pid("dense.bias"));
        l2_params.push(w);
        let logits = g.linear(features, w, bias)?;
        Ok(Forward {
            logits,
            l2_params,
            bn_stats,
        })
    }

    /// Regularized loss node plus class probabilities.
    pub fn loss(
        &self,
        g: &mut Graph<'_>,
        fwd: &Forward,
        labels: &[usize],
    ) -> Result<(Var, Tensor)> {
        let xent = g.softmax_cross_entropy(fwd.logits, labels)?;
        let probs = g.probabilities(xent).expect("softmax node");
        let loss = match layers::l2_penalty(g, &fwd.l2_params, self.spec.l2_coeff)? {
            Some(p) => g.add(xent, p)?,
            None => xent,
        };
        Ok((loss, probs))
    }

    /// Clears gradients, runs a train-mode forward/backward pass, stores the
    /// parameter gradients and folds batch statistics into the running ones.
    pub fn compute_gradients(
        &mut self,
        tokens: &[usize],
        batch: usize,
        len: usize,
        labels: &[usize],
        rng: &mut Rng,
    ) -> Result<StepOutput> {
        self.params.zero_grad();
        let (loss, probs, grads, stats) = {
            let mut g = Graph::new(self.params.tensors());
            let fwd = self.forward(&mut g, tokens, batch, len, Mode::Train, rng)?;
            let (loss, probs) = self.loss(&mut g, &fwd, labels)?;
            let grads = g.backward(loss)?;
            (g.value(loss).item(), probs, grads, fwd.bn_stats)
        };
        grads.accumulate_into(self.params.tensors_mut());
        for (i, s) in stats {
            self.bn[i].update(&s);
        }
        Ok(StepOutput { loss, probs })
    }

    /// Inference-mode logits, `[batch, classes]`.
    pub fn logits(&self, tokens: &[usize], batch: usize, len: usize) -> Result<Tensor> {
        let mut g = Graph::new(self.params.tensors());
        let fwd = self.forward(&mut g, tokens, batch, len, Mode::Infer, &mut Rng::new(0))?;
        Ok(g.value(fwd.logits).clone())
    }
}
