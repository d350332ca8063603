//! Convolutional GRU gates and the bijective GRU layer.
//!
//! A bGRU layer owns two gate sets. The forward set updates the layer state
//! `h[l]` from the input state `h[l-1]`; the backward set treats `h[l-1]`
//! as its own recurrent state and updates it from `h[l]`.

use crate::error::{Error, Result};
use crate::nn_ops::orthogonal_kernel;
use crate::tensor::{Element, Rng, Tape, Tensor, Var};

/// Gate weights of one convolutional GRU.
///
/// The three gates are stacked along the output-channel axis in the order
/// update (`z`), reset (`r`), candidate. With `c` target channels, gate `i`
/// owns rows `i * c .. (i + 1) * c` of `input`, `state` and `bias`.
#[derive(Clone, Debug, PartialEq)]
pub struct GruGateSet<P> {
    /// `[3c, source_channels, k, k]`
    pub input: P,
    /// `[3c, c, k, k]`
    pub state: P,
    /// `[3c]`
    pub bias: P,
}

pub const UPDATE_GATE: usize = 0;
pub const RESET_GATE: usize = 1;
pub const CANDIDATE_GATE: usize = 2;

impl<T: Element> GruGateSet<Tensor<T>> {
    pub fn zeros(source: usize, target: usize, k: usize) -> Self {
        GruGateSet {
            input: Tensor::zeros(&[3 * target, source, k, k]),
            state: Tensor::zeros(&[3 * target, target, k, k]),
            bias: Tensor::zeros(&[3 * target]),
        }
    }

    /// Orthogonal per-gate kernels, zero biases.
    pub fn orthogonal(source: usize, target: usize, k: usize, rng: &mut Rng) -> Result<Self> {
        let mut input = Vec::with_capacity(3 * target * source * k * k);
        let mut state = Vec::with_capacity(3 * target * target * k * k);
        for _ in 0..3 {
            input.extend(orthogonal_kernel::<T>(&[target, source, k, k], rng)?.into_data());
        }
        for _ in 0..3 {
            state.extend(orthogonal_kernel::<T>(&[target, target, k, k], rng)?.into_data());
        }
        Ok(GruGateSet {
            input: Tensor::new(vec![3 * target, source, k, k], input)?,
            state: Tensor::new(vec![3 * target, target, k, k], state)?,
            bias: Tensor::zeros(&[3 * target]),
        })
    }

    pub fn target_channels(&self) -> usize {
        self.bias.len() / 3
    }

    /// Mutable view of one gate's bias entries.
    pub fn gate_bias_mut(&mut self, gate: usize) -> &mut [T] {
        let c = self.target_channels();
        &mut self.bias.data_mut()[gate * c..(gate + 1) * c]
    }
}

impl<P> GruGateSet<P> {
    pub fn map<Q>(&self, prefix: &str, f: &mut impl FnMut(&str, &P) -> Q) -> GruGateSet<Q> {
        GruGateSet {
            input: f(&format!("{prefix}.input"), &self.input),
            state: f(&format!("{prefix}.state"), &self.state),
            bias: f(&format!("{prefix}.bias"), &self.bias),
        }
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut P)) {
        f(&format!("{prefix}.input"), &mut self.input);
        f(&format!("{prefix}.state"), &mut self.state);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }
}

/// A bijective GRU layer between input state `h[l-1]` (`channels_in`) and
/// layer state `h[l]` (`channels_out`).
#[derive(Clone, Debug, PartialEq)]
pub struct BGruLayer<P> {
    /// `h[l-1] -> h[l]`
    pub forward: GruGateSet<P>,
    /// `h[l] -> h[l-1]`
    pub backward: GruGateSet<P>,
    /// A 2x2 max pool sits between `h[l-1]` and this layer's gates.
    pub pooled: bool,
    pub channels_in: usize,
    pub channels_out: usize,
    pub kernel: usize,
}

impl<T: Element> BGruLayer<Tensor<T>> {
    pub fn zeros(channels_in: usize, channels_out: usize, kernel: usize, pooled: bool) -> Self {
        BGruLayer {
            forward: GruGateSet::zeros(channels_in, channels_out, kernel),
            backward: GruGateSet::zeros(channels_out, channels_in, kernel),
            pooled,
            channels_in,
            channels_out,
            kernel,
        }
    }

    pub fn orthogonal(
        channels_in: usize,
        channels_out: usize,
        kernel: usize,
        pooled: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(BGruLayer {
            forward: GruGateSet::orthogonal(channels_in, channels_out, kernel, rng)?,
            backward: GruGateSet::orthogonal(channels_out, channels_in, kernel, rng)?,
            pooled,
            channels_in,
            channels_out,
            kernel,
        })
    }

    /// Number of kernel weights in both gate sets, biases excluded.
    pub fn weight_count(&self) -> u64 {
        [
            &self.forward.input,
            &self.forward.state,
            &self.backward.input,
            &self.backward.state,
        ]
        .iter()
        .map(|t| t.len() as u64)
        .sum()
    }

    pub fn bias_count(&self) -> u64 {
        (self.forward.bias.len() + self.backward.bias.len()) as u64
    }
}

impl<P> BGruLayer<P> {
    pub fn map<Q>(&self, prefix: &str, f: &mut impl FnMut(&str, &P) -> Q) -> BGruLayer<Q> {
        BGruLayer {
            forward: self.forward.map(&format!("{prefix}.fwd"), f),
            backward: self.backward.map(&format!("{prefix}.bwd"), f),
            pooled: self.pooled,
            channels_in: self.channels_in,
            channels_out: self.channels_out,
            kernel: self.kernel,
        }
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut P)) {
        self.forward.for_each_mut(&format!("{prefix}.fwd"), f);
        self.backward.for_each_mut(&format!("{prefix}.bwd"), f);
    }
}

/// One GRU update of `h_prev` driven by `x`:
///
/// ```text
/// z  = sigmoid(Wz * x + Uz * h + bz)
/// r  = sigmoid(Wr * x + Ur * h + br)
/// h~ = tanh(W * x + U * (r . h) + b)
/// h' = (1 - z) . h + z . h~
/// ```
pub fn gru_step<T: Element>(
    tape: &Tape<T>,
    x: &Var<T>,
    h_prev: &Var<T>,
    gates: &GruGateSet<Var<T>>,
) -> Result<Var<T>> {
    let c = gates.bias.shape()[0] / 3;
    if h_prev.shape().len() != 4 || h_prev.shape()[1] != c {
        return Err(Error::ChannelMismatch {
            op: "gru_step",
            expected: c,
            actual: h_prev.shape().get(1).copied().unwrap_or(0),
        });
    }
    let from_input = tape.conv2d(x, &gates.input, Some(&gates.bias))?;
    let zr_weights = tape.narrow(&gates.state, 0, 0, 2 * c)?;
    let from_state = tape.conv2d(h_prev, &zr_weights, None)?;

    let gate = |g: usize| -> Result<Var<T>> {
        let a = tape.narrow(&from_input, 1, g * c, c)?;
        let b = tape.narrow(&from_state, 1, g * c, c)?;
        Ok(tape.sigmoid(&tape.add(&a, &b)?))
    };
    let z = gate(UPDATE_GATE)?;
    let r = gate(RESET_GATE)?;

    let cand_weights = tape.narrow(&gates.state, 0, CANDIDATE_GATE * c, c)?;
    let reset_state = tape.mul(&r, h_prev)?;
    let cand_in = tape.narrow(&from_input, 1, CANDIDATE_GATE * c, c)?;
    let cand_state = tape.conv2d(&reset_state, &cand_weights, None)?;
    let candidate = tape.tanh(&tape.add(&cand_in, &cand_state)?);

    // h + z . (h~ - h)
    let delta = tape.mul(&z, &tape.sub(&candidate, h_prev)?)?;
    tape.add(h_prev, &delta)
}

/// Forward map: new `h[l]` from the current `h[l-1]` and the previous `h[l]`.
pub fn bgru_forward<T: Element>(
    tape: &Tape<T>,
    layer: &BGruLayer<Var<T>>,
    h_lm1_t: &Var<T>,
    h_l_prev: &Var<T>,
) -> Result<Var<T>> {
    if layer.pooled {
        let pooled = tape.maxpool2(h_lm1_t)?;
        gru_step(tape, &pooled, h_l_prev, &layer.forward)
    } else {
        gru_step(tape, h_lm1_t, h_l_prev, &layer.forward)
    }
}

/// Backward map: new `h[l-1]` from the current `h[l]` and the previous
/// `h[l-1]`. Pooled layers run their gates at the coarse resolution and
/// write back through nearest-neighbour upsampling.
pub fn bgru_backward<T: Element>(
    tape: &Tape<T>,
    layer: &BGruLayer<Var<T>>,
    h_l_t: &Var<T>,
    h_lm1_prev: &Var<T>,
) -> Result<Var<T>> {
    if layer.pooled {
        let coarse_prev = tape.maxpool2(h_lm1_prev)?;
        let coarse = gru_step(tape, h_l_t, &coarse_prev, &layer.backward)?;
        tape.upsample2(&coarse)
    } else {
        gru_step(tape, h_l_t, h_lm1_prev, &layer.backward)
    }
}

/// Kernel weights of a forward + backward bGRU pair with state sizes
/// `d_in`, `d_out`: `3 * area * (d_in^2 + d_out^2 + 2 * d_in * d_out)`.
pub fn param_count_shared(d_in: u64, d_out: u64, kernel_area: u64) -> u64 {
    3 * kernel_area * (d_in * d_in + d_out * d_out + 2 * d_in * d_out)
}

/// Weights of the same pair when encoder and decoder are linked by bridge
/// connections instead of sharing state:
/// `3 * area * (d_in^2 + d_out^2 + 4 * d_in * d_out)`.
pub fn param_count_bridged(d_in: u64, d_out: u64, kernel_area: u64) -> u64 {
    3 * kernel_area * (d_in * d_in + d_out * d_out + 4 * d_in * d_out)
}
