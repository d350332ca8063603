//! The folded recurrent network: stateless pre-convolutions, a stack of
//! bGRU layers whose states are shared between encoder and decoder, and a
//! stateless transposed post-transform.
//!
//! Encoding a frame runs only the forward maps (`h[0] -> h[n]`). Predicting
//! a frame refreshes the bridge state `h[n]` with one application of the
//! last forward map, then sweeps the backward maps down to `h[0]` and
//! decodes it. Predictions are never fed back into the network.

use std::fmt;

use crate::cells::{bgru_backward, bgru_forward, param_count_bridged, param_count_shared, BGruLayer};
use crate::error::{Error, Result};
use crate::nn_ops::ConvKernel;
use crate::tensor::{Element, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Sigmoid,
    Identity,
}

impl Activation {
    pub fn apply<T: Element>(self, tape: &Tape<T>, x: &Var<T>) -> Var<T> {
        match self {
            Activation::Tanh => tape.tanh(x),
            Activation::Sigmoid => tape.sigmoid(x),
            Activation::Identity => x.clone(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
            Activation::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "tanh" => Some(Activation::Tanh),
            "sigmoid" => Some(Activation::Sigmoid),
            "identity" => Some(Activation::Identity),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub channels: usize,
    pub kernel: usize,
    pub activation: Activation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub channels: usize,
    pub kernel: usize,
    /// 2x2 max pool between the previous state and this layer.
    pub pooled: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl fmt::Display for ImageShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TopologySpec {
    pub pre_convs: Vec<ConvSpec>,
    pub layers: Vec<LayerSpec>,
    pub image: ImageShape,
    pub output_activation: Activation,
}

impl TopologySpec {
    /// Two 5x5 tanh convolutions and eight bGRU layers on 64x64 grayscale
    /// frames, pooling before every odd layer.
    pub fn full() -> Self {
        let conv = |channels| ConvSpec {
            channels,
            kernel: 5,
            activation: Activation::Tanh,
        };
        let layers = [
            (128, 5, true),
            (128, 5, false),
            (256, 5, true),
            (256, 5, false),
            (512, 3, true),
            (512, 3, false),
            (256, 3, true),
            (256, 3, false),
        ]
        .into_iter()
        .map(|(channels, kernel, pooled)| LayerSpec {
            channels,
            kernel,
            pooled,
        })
        .collect();
        TopologySpec {
            pre_convs: vec![conv(32), conv(64)],
            layers,
            image: ImageShape {
                channels: 1,
                height: 64,
                width: 64,
            },
            output_activation: Activation::Sigmoid,
        }
    }

    /// Desk-scale topology: one 8-channel convolution and four bGRU layers
    /// (16, 16, 32, 32 channels) on 32x32 frames, pooling before layers 1
    /// and 3. All kernels are 3x3.
    pub fn tiny() -> Self {
        let layer = |channels, pooled| LayerSpec {
            channels,
            kernel: 3,
            pooled,
        };
        TopologySpec {
            pre_convs: vec![ConvSpec {
                channels: 8,
                kernel: 3,
                activation: Activation::Tanh,
            }],
            layers: vec![
                layer(16, true),
                layer(16, false),
                layer(32, true),
                layer(32, false),
            ],
            image: ImageShape {
                channels: 1,
                height: 32,
                width: 32,
            },
            output_activation: Activation::Sigmoid,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Channels of `h[0]`.
    pub fn base_channels(&self) -> usize {
        self.pre_convs
            .last()
            .map_or(self.image.channels, |c| c.channels)
    }

    /// Channel count of state `h[l]`, `l` in `0..=n`.
    pub fn state_channels(&self, l: usize) -> usize {
        if l == 0 {
            self.base_channels()
        } else {
            self.layers[l - 1].channels
        }
    }

    pub fn validate(&self) -> Result<()> {
        let img = self.image;
        if img.channels == 0 || img.height == 0 || img.width == 0 {
            return Err(Error::invalid(format!("image shape {img} must be positive")));
        }
        for c in &self.pre_convs {
            if c.channels == 0 || c.kernel % 2 == 0 {
                return Err(Error::invalid(format!(
                    "pre-convolution {c:?} needs positive channels and an odd kernel"
                )));
            }
        }
        for l in &self.layers {
            if l.channels == 0 || l.kernel % 2 == 0 {
                return Err(Error::invalid(format!(
                    "bGRU layer {l:?} needs positive channels and an odd kernel"
                )));
            }
        }
        let pools = self.layers.iter().filter(|l| l.pooled).count() as u32;
        let factor = 1usize << pools;
        if !img.height.is_multiple_of(factor) || !img.width.is_multiple_of(factor) {
            return Err(Error::invalid(format!(
                "image {img} is not divisible by 2^{pools} required by the pool schedule"
            )));
        }
        Ok(())
    }

    /// Shapes of `h[0..=n]` for a batch.
    pub fn state_shapes(&self, batch: usize) -> Vec<[usize; 4]> {
        let (mut h, mut w) = (self.image.height, self.image.width);
        let mut shapes = vec![[batch, self.base_channels(), h, w]];
        for l in &self.layers {
            if l.pooled {
                h /= 2;
                w /= 2;
            }
            shapes.push([batch, l.channels, h, w]);
        }
        shapes
    }
}

/// Per-run instrumentation: how often each part of the stack executed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CallCounts {
    pub pre_transform: usize,
    pub post_transform: usize,
    pub forward_maps: usize,
    pub backward_maps: usize,
    pub bridge_updates: usize,
    /// Forward applications of the deepest layer during encoding.
    pub encoder_top: usize,
}

/// Shared recurrent states `h[0..=n]` of one batch, plus the call counts of
/// the run they belong to.
#[derive(Clone, Debug)]
pub struct StateSet<T: Element = f32> {
    pub h: Vec<Var<T>>,
    pub calls: CallCounts,
}

impl<T: Element> StateSet<T> {
    pub fn batch(&self) -> usize {
        self.h[0].shape()[0]
    }

    /// The deepest state.
    pub fn bridge(&self) -> &Var<T> {
        self.h.last().expect("state set always holds h[0]")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FoldedStack<P> {
    pub spec: TopologySpec,
    pub pre_convs: Vec<ConvKernel<P>>,
    pub layers: Vec<BGruLayer<P>>,
    /// Transposed convolutions in application order: `post_convs[0]` reads
    /// `h[0]` and inverts the last pre-convolution.
    pub post_convs: Vec<ConvKernel<P>>,
}

/// A stack holding concrete weights.
pub type Model<T = f32> = FoldedStack<Tensor<T>>;

impl<P> FoldedStack<P> {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Apply `f` to every parameter, visiting them in a fixed order with
    /// stable names.
    pub fn map_params<Q>(&self, mut f: impl FnMut(&str, &P) -> Q) -> FoldedStack<Q> {
        let f = &mut f;
        let conv = |prefix: String, k: &ConvKernel<P>, f: &mut dyn FnMut(&str, &P) -> Q| {
            ConvKernel {
                weight: f(&format!("{prefix}.weight"), &k.weight),
                bias: f(&format!("{prefix}.bias"), &k.bias),
            }
        };
        let pre_convs = self
            .pre_convs
            .iter()
            .enumerate()
            .map(|(i, k)| conv(format!("pre.{i}"), k, f))
            .collect();
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| l.map(&format!("layer.{}", i + 1), f))
            .collect();
        let post_convs = self
            .post_convs
            .iter()
            .enumerate()
            .map(|(i, k)| conv(format!("post.{i}"), k, f))
            .collect();
        FoldedStack {
            spec: self.spec.clone(),
            pre_convs,
            layers,
            post_convs,
        }
    }

    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(&str, &mut P)) {
        for (i, k) in self.pre_convs.iter_mut().enumerate() {
            f(&format!("pre.{i}.weight"), &mut k.weight);
            f(&format!("pre.{i}.bias"), &mut k.bias);
        }
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.for_each_mut(&format!("layer.{}", i + 1), &mut f);
        }
        for (i, k) in self.post_convs.iter_mut().enumerate() {
            f(&format!("post.{i}.weight"), &mut k.weight);
            f(&format!("post.{i}.bias"), &mut k.bias);
        }
    }

    /// Parameter names in visiting order.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.map_params(|name, _| names.push(name.to_string()));
        names
    }

    /// Keep the first `n - k` bGRU layers; the deepest `k` are removed.
    pub fn truncate(&self, k: usize) -> Result<Self>
    where
        P: Clone,
    {
        let n = self.num_layers();
        if k > n {
            return Err(Error::invalid(format!(
                "cannot remove {k} layers from a stack of {n}"
            )));
        }
        let mut out = self.clone();
        out.layers.truncate(n - k);
        out.spec.layers.truncate(n - k);
        Ok(out)
    }
}

impl<T: Element> Model<T> {
    /// A stack with every weight and bias zero.
    pub fn zeros(spec: &TopologySpec) -> Result<Self> {
        spec.validate()?;
        let mut in_ch = spec.image.channels;
        let mut pre_convs = Vec::new();
        for c in &spec.pre_convs {
            pre_convs.push(ConvKernel::zeros(c.channels, in_ch, c.kernel));
            in_ch = c.channels;
        }
        let mut layers = Vec::new();
        for l in &spec.layers {
            layers.push(BGruLayer::zeros(in_ch, l.channels, l.kernel, l.pooled));
            in_ch = l.channels;
        }
        let post_convs = (0..spec.pre_convs.len())
            .rev()
            .map(|i| {
                let out = if i == 0 {
                    spec.image.channels
                } else {
                    spec.pre_convs[i - 1].channels
                };
                ConvKernel {
                    weight: Tensor::zeros(&[
                        spec.pre_convs[i].channels,
                        out,
                        spec.pre_convs[i].kernel,
                        spec.pre_convs[i].kernel,
                    ]),
                    bias: Tensor::zeros(&[out]),
                }
            })
            .collect();
        Ok(FoldedStack {
            spec: spec.clone(),
            pre_convs,
            layers,
            post_convs,
        })
    }

    /// Attach every parameter to `tape`, as tracked leaves or as constants.
    pub fn bind(&self, tape: &Tape<T>, track: bool) -> FoldedStack<Var<T>> {
        self.map_params(|_, t| {
            if track {
                tape.leaf(t.clone())
            } else {
                Var::constant(t.clone())
            }
        })
    }

    pub fn cast<U: Element>(&self) -> Model<U> {
        self.map_params(|_, t| t.cast::<U>())
    }

    pub fn param_count(&self) -> usize {
        let mut total = 0;
        self.map_params(|_, t| total += t.len());
        total
    }

    /// Untracked inference: encode `inputs` (`[batch, g, c, h, w]`) and
    /// predict `p` frames, returned as `[batch, p, c, h, w]`.
    pub fn predict(&self, inputs: &Tensor<T>, p: usize) -> Result<(Tensor<T>, CallCounts)> {
        let tape = Tape::new();
        let stack = self.bind(&tape, false);
        let frames = split_time(inputs)?;
        let (preds, calls) = stack.run_sequence(&tape, &frames, p)?;
        Ok((stack_time(&preds)?, calls))
    }
}

impl<T: Element> FoldedStack<Var<T>> {
    pub fn reset_states(&self, batch: usize) -> Result<StateSet<T>> {
        if batch == 0 {
            return Err(Error::invalid("batch must be at least 1"));
        }
        let h = self
            .spec
            .state_shapes(batch)
            .iter()
            .map(|s| Var::constant(Tensor::zeros(s)))
            .collect();
        Ok(StateSet {
            h,
            calls: CallCounts::default(),
        })
    }

    fn check_states(&self, states: &StateSet<T>) -> Result<()> {
        let expected = self.spec.state_shapes(states.batch());
        if states.h.len() != expected.len() {
            return Err(Error::invalid(format!(
                "state set has {} entries, stack needs {}",
                states.h.len(),
                expected.len()
            )));
        }
        for (h, shape) in states.h.iter().zip(&expected) {
            if h.shape() != shape {
                return Err(Error::ShapeMismatch {
                    op: "state set",
                    left: h.shape().to_vec(),
                    right: shape.to_vec(),
                });
            }
        }
        Ok(())
    }

    fn pre_transform(&self, tape: &Tape<T>, frame: &Var<T>) -> Result<Var<T>> {
        let mut x = frame.clone();
        for (k, spec) in self.pre_convs.iter().zip(&self.spec.pre_convs) {
            x = spec.activation.apply(tape, &crate::nn_ops::conv2d(tape, &x, k)?);
        }
        Ok(x)
    }

    fn post_transform(&self, tape: &Tape<T>, h0: &Var<T>) -> Result<Var<T>> {
        let m = self.pre_convs.len();
        let mut x = h0.clone();
        for (j, k) in self.post_convs.iter().enumerate() {
            let inverted = m - 1 - j;
            let act = if inverted == 0 {
                self.spec.output_activation
            } else {
                self.spec.pre_convs[inverted - 1].activation
            };
            x = act.apply(tape, &crate::nn_ops::conv2d_transpose(tape, &x, k)?);
        }
        if m == 0 {
            x = self.spec.output_activation.apply(tape, &x);
        }
        Ok(x)
    }

    /// Show one ground-truth frame to the encoder. No frame is emitted.
    pub fn encode_frame(&self, tape: &Tape<T>, frame: &Var<T>, states: &mut StateSet<T>) -> Result<()> {
        self.check_states(states)?;
        let img = self.spec.image;
        let expected = [states.batch(), img.channels, img.height, img.width];
        if frame.shape() != expected {
            return Err(Error::ShapeMismatch {
                op: "encode_frame",
                left: frame.shape().to_vec(),
                right: expected.to_vec(),
            });
        }
        states.h[0] = self.pre_transform(tape, frame)?;
        states.calls.pre_transform += 1;
        for (l, layer) in self.layers.iter().enumerate() {
            states.h[l + 1] = bgru_forward(tape, layer, &states.h[l], &states.h[l + 1])?;
            states.calls.forward_maps += 1;
        }
        if !self.layers.is_empty() {
            states.calls.encoder_top += 1;
        }
        Ok(())
    }

    /// Generate the next frame from the states alone.
    pub fn predict_frame(&self, tape: &Tape<T>, states: &mut StateSet<T>) -> Result<Var<T>> {
        self.check_states(states)?;
        let n = self.layers.len();
        if n > 0 {
            states.h[n] = bgru_forward(tape, &self.layers[n - 1], &states.h[n - 1], &states.h[n])?;
            states.calls.forward_maps += 1;
            states.calls.bridge_updates += 1;
            for l in (1..=n).rev() {
                states.h[l - 1] = bgru_backward(tape, &self.layers[l - 1], &states.h[l], &states.h[l - 1])?;
                states.calls.backward_maps += 1;
            }
        }
        let frame = self.post_transform(tape, &states.h[0])?;
        states.calls.post_transform += 1;
        Ok(frame)
    }

    /// Reset, encode every input frame, then predict `p` frames.
    pub fn run_sequence(
        &self,
        tape: &Tape<T>,
        inputs: &[Var<T>],
        p: usize,
    ) -> Result<(Vec<Var<T>>, CallCounts)> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::invalid("run_sequence needs at least one input frame"))?;
        if p == 0 {
            return Err(Error::invalid("run_sequence needs p >= 1"));
        }
        let mut states = self.reset_states(first.shape()[0])?;
        for frame in inputs {
            self.encode_frame(tape, frame, &mut states)?;
        }
        let mut out = Vec::with_capacity(p);
        for _ in 0..p {
            out.push(self.predict_frame(tape, &mut states)?);
        }
        Ok((out, states.calls))
    }
}

/// `[batch, time, ...]` -> one `[batch, ...]` constant per time step.
pub fn split_time<T: Element>(seq: &Tensor<T>) -> Result<Vec<Var<T>>> {
    let shape = seq.shape();
    if shape.len() != 5 {
        return Err(Error::invalid(format!(
            "expected a [batch, time, channels, height, width] tensor, got {shape:?}"
        )));
    }
    (0..shape[1])
        .map(|t| frame_at(seq, t).map(Var::constant))
        .collect()
}

/// Frame `t` of a `[batch, time, c, h, w]` tensor.
pub fn frame_at<T: Element>(seq: &Tensor<T>, t: usize) -> Result<Tensor<T>> {
    let s = seq.shape();
    if s.len() != 5 || t >= s[1] {
        return Err(Error::invalid(format!("time step {t} out of range for {s:?}")));
    }
    let frame: usize = s[2..].iter().product();
    let mut data = Vec::with_capacity(s[0] * frame);
    for b in 0..s[0] {
        let start = (b * s[1] + t) * frame;
        data.extend_from_slice(&seq.data()[start..start + frame]);
    }
    Tensor::new(vec![s[0], s[2], s[3], s[4]], data)
}

/// Inverse of [`split_time`].
pub fn stack_time<T: Element>(frames: &[Var<T>]) -> Result<Tensor<T>> {
    let first = frames
        .first()
        .ok_or_else(|| Error::invalid("no frames to stack"))?
        .shape()
        .to_vec();
    let (b, frame) = (first[0], first[1..].iter().product::<usize>());
    let mut data = vec![T::zero(); b * frames.len() * frame];
    for (t, f) in frames.iter().enumerate() {
        if f.shape() != first.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "stack_time",
                left: f.shape().to_vec(),
                right: first.clone(),
            });
        }
        for bi in 0..b {
            let dst = (bi * frames.len() + t) * frame;
            data[dst..dst + frame].copy_from_slice(&f.value().data()[bi * frame..(bi + 1) * frame]);
        }
    }
    let mut shape = vec![b, frames.len()];
    shape.extend_from_slice(&first[1..]);
    Tensor::new(shape, data)
}

/// One bGRU layer's share of the cost comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerCost {
    pub d_in: u64,
    pub d_out: u64,
    pub kernel_area: u64,
    /// Spatial positions at which the layer's gates run.
    pub positions: u64,
    pub shared_weights: u64,
    pub bridged_weights: u64,
}

/// Folded stack versus an encoder/decoder pair of identical state sizes
/// joined by bridge connections.
#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    pub layers: Vec<LayerCost>,
    pub g: u64,
    pub p: u64,
    pub folded_weights: u64,
    pub bridged_weights: u64,
    /// GRU cell applications per training sequence.
    pub folded_gate_evals: u64,
    pub bridged_gate_evals: u64,
    /// States alive at any one step.
    pub folded_peak_states: u64,
    pub bridged_peak_states: u64,
    /// Kernel weights times gate positions, summed over a training sequence.
    pub folded_macs: u64,
    pub bridged_macs: u64,
}

impl CostReport {
    pub fn weight_ratio(&self) -> f64 {
        self.bridged_weights as f64 / self.folded_weights as f64
    }
    pub fn gate_eval_ratio(&self) -> f64 {
        self.bridged_gate_evals as f64 / self.folded_gate_evals as f64
    }
    pub fn state_ratio(&self) -> f64 {
        self.bridged_peak_states as f64 / self.folded_peak_states as f64
    }
    pub fn mac_ratio(&self) -> f64 {
        self.bridged_macs as f64 / self.folded_macs as f64
    }
}

pub fn cost_report(spec: &TopologySpec, g: u64, p: u64) -> Result<CostReport> {
    if g == 0 || p == 0 {
        return Err(Error::invalid("cost_report needs g >= 1 and p >= 1"));
    }
    spec.validate()?;
    let shapes = spec.state_shapes(1);
    let layers: Vec<LayerCost> = spec
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let (a, b, k2) = (
                spec.state_channels(i) as u64,
                l.channels as u64,
                (l.kernel * l.kernel) as u64,
            );
            LayerCost {
                d_in: a,
                d_out: b,
                kernel_area: k2,
                positions: (shapes[i + 1][2] * shapes[i + 1][3]) as u64,
                shared_weights: param_count_shared(a, b, k2),
                bridged_weights: param_count_bridged(a, b, k2),
            }
        })
        .collect();
    let n = layers.len() as u64;

    // forward gate set: 3k^2(ab + b^2); backward: 3k^2(ab + a^2);
    // bridged decoder: the bridged pair total minus the forward set.
    let fwd = |c: &LayerCost| 3 * c.kernel_area * (c.d_in * c.d_out + c.d_out * c.d_out);
    let bwd = |c: &LayerCost| 3 * c.kernel_area * (c.d_in * c.d_out + c.d_in * c.d_in);
    let encode_macs: u64 = layers.iter().map(|c| fwd(c) * c.positions).sum();
    let decode_macs: u64 = layers.iter().map(|c| bwd(c) * c.positions).sum();
    let bridge_macs = layers.last().map_or(0, |c| fwd(c) * c.positions);
    let bridged_step: u64 = layers
        .iter()
        .map(|c| c.bridged_weights * c.positions)
        .sum();

    Ok(CostReport {
        g,
        p,
        folded_weights: layers.iter().map(|c| c.shared_weights).sum(),
        bridged_weights: layers.iter().map(|c| c.bridged_weights).sum(),
        folded_gate_evals: g * n + p * (n + 1),
        bridged_gate_evals: (g + p) * 2 * n,
        folded_peak_states: n + 1,
        bridged_peak_states: 2 * (n + 1),
        folded_macs: g * encode_macs + p * (bridge_macs + decode_macs),
        bridged_macs: (g + p) * bridged_step,
        layers,
    })
}
