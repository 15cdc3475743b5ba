//! Layer vocabulary shared by the three architectures.
//!
//! Convolutions run along the token axis only and use valid padding. The
//! activation layout everywhere is `[batch, positions, features]`.

use crate::autograd::{BatchStats, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ConvKind {
    /// Every output channel sees every input feature in the window.
    Full,
    /// One spatial filter per input channel, no cross-channel mixing.
    Depthwise,
}

/// Shape of one convolution stage.
///
/// The input feature axis is `width * in_channels` wide. A filter spanning the
/// whole embedding has `width = D, in_channels = 1`; a stacked stage over
/// channel outputs has `width = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConvFilterSpec {
    pub kind: ConvKind,
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub dilation: usize,
}

impl ConvFilterSpec {
    pub fn full(height: usize, width: usize, in_channels: usize, out_channels: usize) -> Self {
        Self {
            kind: ConvKind::Full,
            height,
            width,
            in_channels,
            out_channels,
            dilation: 1,
        }
    }

    pub fn depthwise(height: usize, width: usize, channels: usize) -> Self {
        Self {
            kind: ConvKind::Depthwise,
            height,
            width,
            in_channels: channels,
            out_channels: channels,
            dilation: 1,
        }
    }

    /// 1×1 projection from `in_channels` to `out_channels`.
    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        Self::full(1, 1, in_channels, out_channels)
    }

    pub fn with_dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    /// Span of input positions covered by one output position.
    pub fn effective_height(&self) -> usize {
        self.height + (self.height - 1) * (self.dilation - 1)
    }

    pub fn input_features(&self) -> usize {
        self.width * self.in_channels
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        match self.kind {
            ConvKind::Full => vec![self.height, self.input_features(), self.out_channels],
            ConvKind::Depthwise => vec![self.height, self.width, self.in_channels],
        }
    }

    pub fn bias_shape(&self) -> Vec<usize> {
        vec![self.out_channels]
    }

    /// Weights plus one bias per output channel.
    pub fn param_count(&self) -> usize {
        match self.kind {
            ConvKind::Full => {
                self.out_channels * (self.height * self.width * self.in_channels) + self.out_channels
            }
            ConvKind::Depthwise => self.in_channels * self.height * self.width + self.in_channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("height", self.height),
            ("width", self.width),
            ("in_channels", self.in_channels),
            ("out_channels", self.out_channels),
            ("dilation", self.dilation),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::contract(format!("conv filter {name} must be positive")));
        }
        if self.kind == ConvKind::Depthwise && self.in_channels != self.out_channels {
            return Err(Error::Shape {
                op: "depthwise_conv channels",
                lhs: vec![self.in_channels],
                rhs: vec![self.out_channels],
            });
        }
        Ok(())
    }
}

/// Applies one convolution stage described by `spec`.
pub fn conv(g: &mut Graph<'_>, x: Var, w: Var, b: Var, spec: &ConvFilterSpec) -> Result<Var> {
    spec.validate()?;
    let features = *g.value(x).shape().last().unwrap_or(&0);
    if features != spec.input_features() {
        return Err(Error::Shape {
            op: "conv input features",
            lhs: g.value(x).shape().to_vec(),
            rhs: vec![spec.width, spec.in_channels],
        });
    }
    if g.value(w).shape() != spec.weight_shape() {
        return Err(Error::Shape {
            op: "conv weight",
            lhs: g.value(w).shape().to_vec(),
            rhs: spec.weight_shape(),
        });
    }
    match spec.kind {
        ConvKind::Full => g.conv1d(x, w, b, spec.dilation),
        ConvKind::Depthwise => g.depthwise_conv1d(x, w, b, spec.dilation),
    }
}

/// Convolution whose filters span the full embedding width of a single channel.
pub fn conv_full_width(g: &mut Graph<'_>, x: Var, w: Var, b: Var, spec: &ConvFilterSpec) -> Result<Var> {
    if spec.in_channels != 1 || spec.kind != ConvKind::Full {
        return Err(Error::contract("conv_full_width expects a single-channel full filter"));
    }
    conv(g, x, w, b, spec)
}

/// Per-channel spatial convolution.
pub fn depthwise_conv(g: &mut Graph<'_>, x: Var, w: Var, b: Var, spec: &ConvFilterSpec) -> Result<Var> {
    if spec.kind != ConvKind::Depthwise {
        return Err(Error::contract("depthwise_conv expects a depthwise filter"));
    }
    conv(g, x, w, b, spec)
}

/// 1×1 projection across channels; position `t` of the output only depends
/// on position `t` of the input.
pub fn pointwise_conv(g: &mut Graph<'_>, x: Var, w: Var, b: Var, spec: &ConvFilterSpec) -> Result<Var> {
    if spec.height != 1 || spec.width != 1 || spec.kind != ConvKind::Full {
        return Err(Error::contract("pointwise_conv expects a 1x1 full filter"));
    }
    conv(g, x, w, b, spec)
}

/// Convolution whose taps are `spec.dilation` positions apart.
pub fn dilated_conv(g: &mut Graph<'_>, x: Var, w: Var, b: Var, spec: &ConvFilterSpec) -> Result<Var> {
    conv(g, x, w, b, spec)
}

/// Running statistics and hyperparameters of one batch-norm layer. The
/// learnable scale and shift live with the other model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub epsilon: f64,
}

impl BatchNormState {
    pub fn new(features: usize, momentum: f64, epsilon: f64) -> Result<Self> {
        if !(momentum > 0.0 && momentum < 1.0) {
            return Err(Error::contract(format!("batch norm momentum {momentum} not in (0, 1)")));
        }
        if !(epsilon > 0.0) {
            return Err(Error::contract("batch norm epsilon must be positive"));
        }
        Ok(Self {
            running_mean: vec![0.0; features],
            running_var: vec![1.0; features],
            momentum,
            epsilon,
        })
    }

    pub fn features(&self) -> usize {
        self.running_mean.len()
    }

    /// `running <- momentum * running + (1 - momentum) * batch`.
    pub fn update(&mut self, stats: &BatchStats) {
        let m = self.momentum;
        for (r, b) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = m * *r + (1.0 - m) * b;
        }
        for (r, b) in self.running_var.iter_mut().zip(&stats.var) {
            *r = m * *r + (1.0 - m) * b;
        }
    }
}

/// Normalizes over the last axis. In train mode the batch statistics are
/// returned so the caller can fold them into `state` once the step is done.
pub fn batch_norm(
    g: &mut Graph<'_>,
    x: Var,
    gamma: Var,
    beta: Var,
    state: &BatchNormState,
    mode: Mode,
) -> Result<(Var, Option<BatchStats>)> {
    match mode {
        Mode::Train => {
            let (y, stats) = g.batch_norm_train(x, gamma, beta, state.epsilon)?;
            Ok((y, Some(stats)))
        }
        Mode::Infer => {
            let y = g.batch_norm_fixed(
                x,
                gamma,
                beta,
                &state.running_mean,
                &state.running_var,
                state.epsilon,
            )?;
            Ok((y, None))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
}

impl Activation {
    pub fn apply(self, g: &mut Graph<'_>, x: Var) -> Var {
        match self {
            Activation::Relu => g.relu(x),
            Activation::LeakyRelu(alpha) => g.leaky_relu(x, alpha),
        }
    }
}

/// Inverted dropout: kept units are scaled by `1 / (1 - rate)`, so inference
/// is the identity.
pub fn dropout(g: &mut Graph<'_>, x: Var, rate: f64, mode: Mode, rng: &mut Rng) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::contract(format!("dropout rate {rate} not in [0, 1)")));
    }
    if mode == Mode::Infer || rate == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - rate);
    let mask = (0..g.value(x).numel())
        .map(|_| if rng.uniform() < rate { 0.0 } else { keep })
        .collect();
    g.mask(x, mask)
}

/// `coeff * Σ ‖p‖²` over `params`, or `None` when there is nothing to add.
pub fn l2_penalty(g: &mut Graph<'_>, params: &[Var], coeff: f64) -> Result<Option<Var>> {
    if coeff < 0.0 {
        return Err(Error::contract(format!("l2 coefficient {coeff} is negative")));
    }
    if coeff == 0.0 || params.is_empty() {
        return Ok(None);
    }
    let mut total = g.sum_squares(params[0]);
    for &p in &params[1..] {
        let s = g.sum_squares(p);
        total = g.add(total, s)?;
    }
    Ok(Some(g.scale(total, coeff)))
}

/// Dense output layer, softmax cross-entropy averaged over the batch, and an
/// optional L2 penalty. Returns the loss node and the class probabilities.
pub fn dense_softmax_xent(
    g: &mut Graph<'_>,
    x: Var,
    w: Var,
    b: Var,
    labels: &[usize],
    l2_coeff: f64,
    l2_params: &[Var],
) -> Result<(Var, Tensor)> {
    let logits = g.linear(x, w, b)?;
    let xent = g.softmax_cross_entropy(logits, labels)?;
    let probs = g.probabilities(xent).expect("softmax node");
    let loss = match l2_penalty(g, l2_params, l2_coeff)? {
        Some(p) => g.add(xent, p)?,
        None => xent,
    };
    Ok((loss, probs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use crate::tensor::{init, Init};
    use proptest::prelude::*;
    use crate::tensor::Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    fn random(shape: &[usize], rng: &mut Rng) -> Tensor {
        init(Init::Uniform { lo: -1.0, hi: 1.0 }, shape, rng).unwrap()
    }

    /// Naive full convolution: y[b,t,o] = bias[o] + Σ_k Σ_f w[k,f,o] x[b, t + k·r, f].
    fn naive_conv(x: &Tensor, w: &Tensor, bias: &Tensor, rate: usize) -> Vec<f64> {
        let (bs, len, feat) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (h, out) = (w.shape()[0], w.shape()[2]);
        let lout = len - (h - 1) * rate;
        let mut y = Vec::new();
        for b in 0..bs {
            for t in 0..lout {
                for o in 0..out {
                    let mut s = bias.data()[o];
                    for k in 0..h {
                        for f in 0..feat {
                            s += w.at(&[k, f, o]) * x.at(&[b, t + k * rate, f]);
                        }
                    }
                    y.push(s);
                }
            }
        }
        y
    }

    fn run_conv(x: &Tensor, w: &Tensor, b: &Tensor, spec: &ConvFilterSpec) -> Result<Tensor> {
        let mut g = Graph::new(&[]);
        let (vx, vw, vb) = (
            g.constant(x.clone()),
            g.constant(w.clone()),
            g.constant(b.clone()),
        );
        let y = conv(&mut g, vx, vw, vb, spec)?;
        Ok(g.value(y).clone())
    }

    #[test]
    fn embed_padding_row_and_shared_rows() {
        let mut table = Tensor::zeros(&[4, 3]).unwrap();
        table.data_mut()[6..9].copy_from_slice(&[1.0, 2.0, 3.0]);
        let mut g = Graph::new(&[]);
        let tv = g.variable(table);
        let e0 = g.embed(tv, &[0], 1, 1).unwrap();
        assert_eq!(g.value(e0).data(), &[0.0; 3]);

        let e = g.embed(tv, &[2, 2], 1, 2).unwrap();
        assert_eq!(g.value(e).data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        let up = g.constant(t(&[1, 2, 3], &[1.0, 0.5, 0.0, 2.0, 0.0, -1.0]));
        let p = g.mul(e, up).unwrap();
        let loss = g.sum(p);
        let grads = g.backward(loss).unwrap();
        let gt = grads.wrt(tv).unwrap();
        assert_eq!(&gt[6..9], &[3.0, 0.5, -1.0]);
        assert!(gt[..6].iter().chain(&gt[9..]).all(|&v| v == 0.0));
    }

    #[test]
    fn embed_out_of_vocab_is_an_error() {
        let mut g = Graph::new(&[]);
        let tv = g.constant(Tensor::zeros(&[5, 2]).unwrap());
        assert!(matches!(
            g.embed(tv, &[1, 5], 1, 2),
            Err(Error::OutOfVocab { index: 5, vocab: 5 })
        ));
    }

    #[test]
    fn embedding_count_at_full_vocab() {
        assert_eq!(82_448 * 200, 16_489_600);
    }

    #[test]
    fn conv_full_width_all_ones() {
        let spec = ConvFilterSpec::full(2, 2, 1, 1);
        let y = run_conv(
            &Tensor::ones(&[1, 3, 2]).unwrap(),
            &Tensor::ones(&[2, 2, 1]).unwrap(),
            &Tensor::zeros(&[1]).unwrap(),
            &spec,
        )
        .unwrap();
        assert_eq!(y.shape(), &[1, 2, 1]);
        assert_eq!(y.data(), &[4.0, 4.0]);
    }

    #[test]
    fn conv_param_count_matches_allocation() {
        let spec = ConvFilterSpec::full(3, 200, 1, 128);
        assert_eq!(spec.param_count(), 76_928);
        let mut rng = Rng::new(0);
        let w = init(Init::Zeros, &spec.weight_shape(), &mut rng).unwrap();
        let b = init(Init::Zeros, &spec.bias_shape(), &mut rng).unwrap();
        assert_eq!(w.numel() + b.numel(), spec.param_count());
    }

    #[test]
    fn conv_matches_nested_loop_oracle() {
        let mut rng = Rng::new(17);
        for (h, rate) in [(2, 1), (3, 1), (5, 1), (3, 2), (2, 3)] {
            let spec = ConvFilterSpec::full(h, 6, 1, 4).with_dilation(rate);
            let x = random(&[2, 11, 6], &mut rng);
            let w = random(&spec.weight_shape(), &mut rng);
            let b = random(&[4], &mut rng);
            let y = run_conv(&x, &w, &b, &spec).unwrap();
            let oracle = naive_conv(&x, &w, &b, rate);
            let diff = y
                .data()
                .iter()
                .zip(&oracle)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(diff < 1e-12, "h={h} rate={rate} diff={diff}");
        }
    }

    #[test]
    fn conv_short_sequence_is_empty_feature_map() {
        let spec = ConvFilterSpec::full(5, 2, 1, 1);
        let err = run_conv(
            &Tensor::ones(&[1, 4, 2]).unwrap(),
            &Tensor::ones(&[5, 2, 1]).unwrap(),
            &Tensor::zeros(&[1]).unwrap(),
            &spec,
        )
        .unwrap_err();
        assert!(matches!(err, Error::EmptyFeatureMap { len: 4, height: 5 }));

        let dilated = ConvFilterSpec::full(3, 2, 1, 1).with_dilation(2);
        let err = run_conv(
            &Tensor::ones(&[1, 4, 2]).unwrap(),
            &Tensor::ones(&[3, 2, 1]).unwrap(),
            &Tensor::zeros(&[1]).unwrap(),
            &dilated,
        )
        .unwrap_err();
        assert!(matches!(err, Error::EmptyFeatureMap { len: 4, height: 5 }));
    }

    #[test]
    fn single_channel_depthwise_equals_full_width() {
        let mut rng = Rng::new(4);
        let x = random(&[2, 9, 5], &mut rng);
        let dw = ConvFilterSpec::depthwise(3, 5, 1);
        let full = ConvFilterSpec::full(3, 5, 1, 1);
        let w = random(&[3, 5, 1], &mut rng);
        let b = random(&[1], &mut rng);
        assert_eq!(dw.weight_shape(), full.weight_shape());
        let a = run_conv(&x, &w, &b, &dw).unwrap();
        let c = run_conv(&x, &w, &b, &full).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn depthwise_counts() {
        assert_eq!(ConvFilterSpec::depthwise(3, 200, 1).param_count(), 601);
        assert_eq!(ConvFilterSpec::depthwise(2, 200, 1).param_count(), 401);
        assert_eq!(ConvFilterSpec::depthwise(3, 1, 120).param_count(), 480);
    }

    #[test]
    fn depthwise_channel_mismatch() {
        let mut spec = ConvFilterSpec::depthwise(3, 1, 4);
        spec.out_channels = 5;
        assert!(matches!(spec.validate(), Err(Error::Shape { .. })));

        let good = ConvFilterSpec::depthwise(3, 1, 4);
        let err = run_conv(
            &Tensor::ones(&[1, 6, 3]).unwrap(),
            &Tensor::ones(&good.weight_shape()).unwrap(),
            &Tensor::zeros(&[4]).unwrap(),
            &good,
        );
        assert!(matches!(err, Err(Error::Shape { .. })));
    }

    #[test]
    fn depthwise_does_not_mix_channels() {
        let mut rng = Rng::new(6);
        let spec = ConvFilterSpec::depthwise(3, 1, 4);
        let x = random(&[1, 7, 4], &mut rng);
        let w = random(&spec.weight_shape(), &mut rng);
        let b = random(&[4], &mut rng);
        let base = run_conv(&x, &w, &b, &spec).unwrap();
        let mut x2 = x.clone();
        for t in 0..7 {
            x2.data_mut()[t * 4 + 2] += 1.0;
        }
        let moved = run_conv(&x2, &w, &b, &spec).unwrap();
        for (i, (a, c)) in base.data().iter().zip(moved.data()).enumerate() {
            if i % 4 == 2 {
                assert_ne!(a, c);
            } else {
                assert_eq!(a, c);
            }
        }
    }

    #[test]
    fn pointwise_counts_and_identity() {
        let spec = ConvFilterSpec::pointwise(1, 120);
        assert_eq!(spec.param_count(), 240);

        let one = ConvFilterSpec::pointwise(1, 1);
        let x = random(&[2, 5, 1], &mut Rng::new(1));
        let y = run_conv(
            &x,
            &Tensor::ones(&[1, 1, 1]).unwrap(),
            &Tensor::zeros(&[1]).unwrap(),
            &one,
        )
        .unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn pointwise_is_position_local() {
        let mut rng = Rng::new(12);
        let spec = ConvFilterSpec::pointwise(1, 3);
        let x = random(&[1, 6, 1], &mut rng);
        let w = random(&[1, 1, 3], &mut rng);
        let b = random(&[3], &mut rng);
        let base = run_conv(&x, &w, &b, &spec).unwrap();
        for perturbed in 0..6 {
            let mut x2 = x.clone();
            x2.data_mut()[perturbed] += 0.37;
            let y = run_conv(&x2, &w, &b, &spec).unwrap();
            for t in 0..6 {
                let same = (0..3).all(|c| y.at(&[0, t, c]) == base.at(&[0, t, c]));
                assert_eq!(same, t != perturbed, "t={t} perturbed={perturbed}");
            }
        }
    }

    /// Ordinary kernel of height `(h-1)·r + 1` with zeros between the taps.
    fn zero_interleave(w: &Tensor, rate: usize) -> Tensor {
        let (h, f, o) = (w.shape()[0], w.shape()[1], w.shape()[2]);
        let eh = (h - 1) * rate + 1;
        let mut out = Tensor::zeros(&[eh, f, o]).unwrap();
        for k in 0..h {
            let src = &w.data()[k * f * o..(k + 1) * f * o];
            out.data_mut()[k * rate * f * o..(k * rate + 1) * f * o].copy_from_slice(src);
        }
        out
    }

    #[test]
    fn dilated_equals_zero_interleaved_kernel() {
        let mut rng = Rng::new(31);
        for rate in 1..=3 {
            for _ in 0..10 {
                let spec = ConvFilterSpec::full(3, 4, 1, 2).with_dilation(rate);
                let x = random(&[2, 13, 4], &mut rng);
                let w = random(&spec.weight_shape(), &mut rng);
                let b = random(&[2], &mut rng);
                let dilated = run_conv(&x, &w, &b, &spec).unwrap();
                let wide = ConvFilterSpec::full(spec.effective_height(), 4, 1, 2);
                let plain = run_conv(&x, &zero_interleave(&w, rate), &b, &wide).unwrap();
                assert_eq!(dilated.shape(), plain.shape());
                for (a, c) in dilated.data().iter().zip(plain.data()) {
                    assert!((a - c).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn dilated_parameter_saving() {
        let dil = ConvFilterSpec::depthwise(3, 200, 1).with_dilation(2);
        let wide = ConvFilterSpec::depthwise(5, 200, 1);
        assert_eq!(dil.effective_height(), wide.effective_height());
        assert_eq!(dil.param_count(), 601);
        assert_eq!(wide.param_count(), 1_001);
    }

    #[test]
    fn rate_one_collapses_to_plain_conv() {
        let mut rng = Rng::new(2);
        let x = random(&[1, 8, 3], &mut rng);
        let w = random(&[3, 3, 2], &mut rng);
        let b = random(&[2], &mut rng);
        let plain = ConvFilterSpec::full(3, 3, 1, 2);
        assert_eq!(
            run_conv(&x, &w, &b, &plain.with_dilation(1)).unwrap(),
            run_conv(&x, &w, &b, &plain).unwrap()
        );
    }

    #[test]
    fn separable_is_cheaper_than_full_at_embedding_width() {
        for h in [2, 3, 5] {
            for c in [120, 128] {
                let separable = ConvFilterSpec::depthwise(h, 200, 1).param_count()
                    + ConvFilterSpec::pointwise(1, c).param_count();
                let full = ConvFilterSpec::full(h, 200, 1, c).param_count();
                assert!(separable < full, "h={h} c={c}");
            }
        }
    }

    fn run_bn(x: &Tensor, gamma: &[f64], beta: &[f64], state: &BatchNormState, mode: Mode) -> Result<(Tensor, Option<BatchStats>)> {
        let mut g = Graph::new(&[]);
        let f = gamma.len();
        let vx = g.constant(x.clone());
        let vg = g.constant(t(&[f], gamma));
        let vb = g.constant(t(&[f], beta));
        let (y, stats) = batch_norm(&mut g, vx, vg, vb, state, mode)?;
        Ok((g.value(y).clone(), stats))
    }

    #[test]
    fn batch_norm_two_sample_case() {
        let state = BatchNormState::new(1, 0.9, 1e-12).unwrap();
        let (y, _) = run_bn(&t(&[2, 1], &[1.0, 3.0]), &[1.0], &[0.0], &state, Mode::Train).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-9);
        assert!((y.data()[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn batch_norm_zero_gamma_gives_beta() {
        let state = BatchNormState::new(2, 0.9, 1e-5).unwrap();
        let x = random(&[5, 2], &mut Rng::new(3));
        for mode in [Mode::Train, Mode::Infer] {
            let (y, _) = run_bn(&x, &[0.0, 0.0], &[0.25, -2.0], &state, mode).unwrap();
            for row in y.data().chunks(2) {
                assert_eq!(row, &[0.25, -2.0]);
            }
        }
    }

    #[test]
    fn batch_norm_train_standardizes() {
        let mut rng = Rng::new(9);
        let state = BatchNormState::new(3, 0.9, 1e-5).unwrap();
        for _ in 0..10 {
            let mut x = random(&[16, 3], &mut rng);
            x.data_mut().iter_mut().for_each(|v| *v = 10.0 * *v + 7.0);
            let (y, _) = run_bn(&x, &[1.0; 3], &[0.0; 3], &state, Mode::Train).unwrap();
            for f in 0..3 {
                let col: Vec<f64> = y.data().iter().skip(f).step_by(3).copied().collect();
                let mean = col.iter().sum::<f64>() / 16.0;
                let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
                assert!(mean.abs() < 1e-10, "mean {mean}");
                assert!((var - 1.0).abs() < 1e-6, "var {var}");
            }
        }
    }

    #[test]
    fn batch_norm_needs_two_samples_in_train_mode() {
        let state = BatchNormState::new(2, 0.9, 1e-5).unwrap();
        let x = t(&[1, 2], &[1.0, 2.0]);
        assert!(matches!(
            run_bn(&x, &[1.0; 2], &[0.0; 2], &state, Mode::Train),
            Err(Error::Contract(_))
        ));
        assert!(run_bn(&x, &[1.0; 2], &[0.0; 2], &state, Mode::Infer).is_ok());
    }

    #[test]
    fn batch_norm_running_stats_are_convex_combinations() {
        let mut state = BatchNormState::new(1, 0.9, 1e-5).unwrap();
        let (_, stats) = run_bn(&t(&[2, 1], &[1.0, 3.0]), &[1.0], &[0.0], &state, Mode::Train).unwrap();
        let stats = stats.unwrap();
        assert_eq!(stats.mean, vec![2.0]);
        assert_eq!(stats.var, vec![1.0]);
        state.update(&stats);
        assert!((state.running_mean[0] - 0.2).abs() < 1e-15);
        assert!((state.running_var[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn batch_norm_infer_is_affine() {
        let mut rng = Rng::new(14);
        let mut state = BatchNormState::new(3, 0.9, 1e-5).unwrap();
        state.running_mean = vec![0.3, -1.0, 2.0];
        state.running_var = vec![0.5, 2.0, 4.0];
        let (gamma, beta) = ([1.5, -0.5, 2.0], [0.1, 0.2, 0.3]);
        let x1 = random(&[4, 3], &mut rng);
        let x2 = random(&[4, 3], &mut rng);
        let a = 0.3;
        let mix = t(
            &[4, 3],
            &x1.data().iter().zip(x2.data()).map(|(p, q)| a * p + (1.0 - a) * q).collect::<Vec<_>>(),
        );
        let f = |x: &Tensor| run_bn(x, &gamma, &beta, &state, Mode::Infer).unwrap().0;
        let (y1, y2, ym) = (f(&x1), f(&x2), f(&mix));
        for i in 0..12 {
            let expect = a * y1.data()[i] + (1.0 - a) * y2.data()[i];
            assert!((ym.data()[i] - expect).abs() < 1e-12);
        }
        assert_eq!(f(&x1), y1);
    }

    #[test]
    fn batch_norm_gradients() {
        let mut rng = Rng::new(40);
        let inputs = vec![random(&[3, 4, 2], &mut rng), random(&[2], &mut rng), random(&[2], &mut rng)];
        let weights = random(&[3, 4, 2], &mut rng);
        let state = BatchNormState::new(2, 0.9, 1e-5).unwrap();
        for mode in [Mode::Train, Mode::Infer] {
            let report = check_gradients(&inputs, 1e-5, |g, v| {
                let (y, _) = batch_norm(g, v[0], v[1], v[2], &state, mode)?;
                let w = g.constant(weights.clone());
                let p = g.mul(y, w)?;
                Ok(g.sum(p))
            })
            .unwrap();
            assert!(report.max_rel_err < 1e-4, "{mode:?} {report:?}");
        }
    }

    #[test]
    fn activation_examples() {
        let mut g = Graph::new(&[]);
        let x = g.variable(t(&[3], &[-2.0, 3.0, 0.0]));
        let y = g.leaky_relu(x, 0.1);
        assert!((g.value(y).data()[0] + 0.2).abs() < 1e-15);
        assert_eq!(g.value(y).data()[1], 3.0);
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &[0.1, 1.0, 0.1]);

        let mut g = Graph::new(&[]);
        let x = g.variable(t(&[1], &[-5.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0]);
        let loss = g.sum(y);
        assert_eq!(g.backward(loss).unwrap().wrt(x).unwrap(), &[0.0]);
    }

    #[test]
    fn max_over_time_examples() {
        let mut g = Graph::new(&[]);
        let x = g.variable(t(&[1, 3, 1], &[1.0, 5.0, 3.0]));
        let m = g.max_over_time(x).unwrap();
        assert_eq!(g.value(m).data(), &[5.0]);

        let x = g.variable(t(&[1, 3, 1], &[2.0, 2.0, 2.0]));
        let m = g.max_over_time(x).unwrap();
        let loss = g.sum(m);
        assert_eq!(g.backward(loss).unwrap().wrt(x).unwrap(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn max_over_time_matches_loop_oracle() {
        let mut rng = Rng::new(77);
        let x = random(&[3, 7, 4], &mut rng);
        let mut g = Graph::new(&[]);
        let vx = g.constant(x.clone());
        let m = g.max_over_time(vx).unwrap();
        for b in 0..3 {
            for c in 0..4 {
                let mut best = x.at(&[b, 0, c]);
                for p in 1..7 {
                    best = best.max(x.at(&[b, p, c]));
                }
                assert_eq!(g.value(m).at(&[b, c]), best);
            }
        }
    }

    #[test]
    fn dropout_identity_cases() {
        let x = random(&[4, 5], &mut Rng::new(1));
        let mut rng = Rng::new(2);
        let mut g = Graph::new(&[]);
        let v = g.constant(x.clone());
        let a = dropout(&mut g, v, 0.0, Mode::Train, &mut rng).unwrap();
        let b = dropout(&mut g, v, 0.7, Mode::Infer, &mut rng).unwrap();
        assert_eq!(g.value(a), &x);
        assert_eq!(g.value(b), &x);
        assert!(dropout(&mut g, v, 1.0, Mode::Train, &mut rng).is_err());
        assert!(dropout(&mut g, v, -0.1, Mode::Train, &mut rng).is_err());
    }

    #[test]
    fn dropout_statistics() {
        let n = 100_000;
        let x = Tensor::ones(&[n]).unwrap();
        let mut g = Graph::new(&[]);
        let v = g.constant(x);
        let y = dropout(&mut g, v, 0.5, Mode::Train, &mut Rng::new(8)).unwrap();
        let d = g.value(y).data();
        let kept = d.iter().filter(|&&v| v != 0.0).count() as f64 / n as f64;
        let mean = d.iter().sum::<f64>() / n as f64;
        assert!((kept - 0.5).abs() < 0.01, "kept {kept}");
        assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
        assert!(d.iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn dense_xent_uniform_logits_is_ln_k() {
        let mut g = Graph::new(&[]);
        let x = g.constant(random(&[3, 4], &mut Rng::new(1)));
        let w = g.constant(Tensor::zeros(&[4, 5]).unwrap());
        let b = g.constant(Tensor::zeros(&[5]).unwrap());
        let (loss, probs) = dense_softmax_xent(&mut g, x, w, b, &[0, 3, 4], 0.0, &[w]).unwrap();
        assert!((g.value(loss).item() - 5f64.ln()).abs() < 1e-12);
        assert!(probs.data().iter().all(|&p| (p - 0.2).abs() < 1e-15));
    }

    #[test]
    fn dense_xent_l2_term() {
        let mut rng = Rng::new(5);
        let xt = random(&[2, 3], &mut rng);
        let wt = random(&[3, 2], &mut rng);
        let eval = |coeff: f64| {
            let mut g = Graph::new(&[]);
            let x = g.constant(xt.clone());
            let w = g.constant(wt.clone());
            let b = g.constant(Tensor::zeros(&[2]).unwrap());
            let (loss, _) = dense_softmax_xent(&mut g, x, w, b, &[1, 0], coeff, &[w]).unwrap();
            let logits = g.linear(x, w, b).unwrap();
            let bare = g.softmax_cross_entropy(logits, &[1, 0]).unwrap();
            (g.value(loss).item(), g.value(bare).item())
        };
        let (with0, bare) = eval(0.0);
        assert_eq!(with0.to_bits(), bare.to_bits());
        let sq: f64 = wt.data().iter().map(|v| v * v).sum();
        let (with, bare) = eval(0.01);
        assert!((with - bare - 0.01 * sq).abs() < 1e-15);
    }

    #[test]
    fn dense_xent_label_out_of_range() {
        let mut g = Graph::new(&[]);
        let x = g.constant(Tensor::zeros(&[1, 2]).unwrap());
        let w = g.constant(Tensor::zeros(&[2, 3]).unwrap());
        let b = g.constant(Tensor::zeros(&[3]).unwrap());
        assert!(matches!(
            dense_softmax_xent(&mut g, x, w, b, &[3], 0.0, &[]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn logit_gradient_is_probs_minus_onehot() {
        let mut rng = Rng::new(19);
        let logits = random(&[3, 4], &mut rng);
        let labels = [2, 0, 3];
        let mut g = Graph::new(&[]);
        let z = g.variable(logits.clone());
        let loss = g.softmax_cross_entropy(z, &labels).unwrap();
        let probs = g.probabilities(loss).unwrap();
        let grads = g.backward(loss).unwrap();
        let analytic = grads.wrt(z).unwrap();
        for b in 0..3 {
            for k in 0..4 {
                let onehot = if k == labels[b] { 1.0 } else { 0.0 };
                let expect = (probs.at(&[b, k]) - onehot) / 3.0;
                assert!((analytic[b * 4 + k] - expect).abs() < 1e-10);
            }
        }
        let report = check_gradients(&[logits], 1e-5, |g, v| g.softmax_cross_entropy(v[0], &labels)).unwrap();
        assert!(report.max_abs_err < 1e-10, "{report:?}");
    }

    #[test]
    fn layer_gradients_match_finite_differences() {
        let mut rng = Rng::new(50);
        let specs = [
            ConvFilterSpec::full(3, 5, 1, 4),
            ConvFilterSpec::full(2, 5, 1, 3).with_dilation(2),
            ConvFilterSpec::depthwise(3, 5, 1).with_dilation(2),
            ConvFilterSpec::depthwise(2, 1, 5),
            ConvFilterSpec::depthwise(2, 1, 5).with_dilation(3),
            ConvFilterSpec::pointwise(5, 3),
        ];
        for spec in specs {
            let inputs = vec![
                random(&[2, 9, spec.input_features()], &mut rng),
                random(&spec.weight_shape(), &mut rng),
                random(&spec.bias_shape(), &mut rng),
            ];
            let up = random(&[2, 9 - spec.effective_height() + 1, spec.out_channels], &mut rng);
            let report = check_gradients(&inputs, 1e-5, |g, v| {
                let y = conv(g, v[0], v[1], v[2], &spec)?;
                let u = g.constant(up.clone());
                let p = g.mul(y, u)?;
                Ok(g.sum(p))
            })
            .unwrap();
            assert!(report.max_rel_err < 1e-4, "{spec:?} {report:?}");
        }

        let table = random(&[6, 3], &mut rng);
        let up = random(&[2, 4, 3], &mut rng);
        let report = check_gradients(&[table], 1e-5, |g, v| {
            let e = g.embed(v[0], &[0, 1, 1, 5, 2, 2, 2, 3], 2, 4)?;
            let u = g.constant(up.clone());
            let p = g.mul(e, u)?;
            Ok(g.sum(p))
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "embed {report:?}");

        let x = random(&[2, 6, 3], &mut rng);
        let up = random(&[2, 3], &mut rng);
        let report = check_gradients(&[x], 1e-5, |g, v| {
            let a = g.leaky_relu(v[0], 0.1);
            let m = g.max_over_time(a)?;
            let u = g.constant(up.clone());
            let p = g.mul(m, u)?;
            let mut drop_rng = Rng::new(3);
            let d = dropout(g, p, 0.5, Mode::Train, &mut drop_rng)?;
            Ok(g.sum(d))
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "activation/pool/dropout {report:?}");
    }

    proptest! {
        #[test]
        fn softmax_rows_are_distributions(
            logits in proptest::collection::vec(-50.0f64..50.0, 12),
            labels in proptest::collection::vec(0usize..4, 3),
        ) {
            let mut g = Graph::new(&[]);
            let z = g.constant(Tensor::new(&[3, 4], logits).unwrap());
            let loss = g.softmax_cross_entropy(z, &labels).unwrap();
            prop_assert!(g.value(loss).item() >= 0.0);
            let probs = g.probabilities(loss).unwrap();
            for row in probs.data().chunks(4) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn dilation_equivalence_holds_for_random_shapes(
            seed in 0u64..1000,
            h in 1usize..4,
            rate in 1usize..4,
            feat in 1usize..4,
        ) {
            let mut rng = Rng::new(seed);
            let spec = ConvFilterSpec::full(h, feat, 1, 2).with_dilation(rate);
            let len = spec.effective_height() + 3;
            let x = random(&[2, len, feat], &mut rng);
            let w = random(&spec.weight_shape(), &mut rng);
            let b = random(&[2], &mut rng);
            let dilated = run_conv(&x, &w, &b, &spec).unwrap();
            let wide = ConvFilterSpec::full(spec.effective_height(), feat, 1, 2);
            let plain = run_conv(&x, &zero_interleave(&w, rate), &b, &wide).unwrap();
            for (a, c) in dilated.data().iter().zip(plain.data()) {
                prop_assert!((a - c).abs() < 1e-12);
            }
        }
    }
}
