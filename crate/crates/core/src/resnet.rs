//! Residual networks viewed as a forward-Euler discretisation.
//!
//! The `N` block states `u⁰ … u^{N-1}` of one sample are the unknowns of the
//! lower block-bidiagonal system
//!
//! ```text
//! L(U)[0] = u⁰                                   = f[0]   (= F_in·y)
//! L(U)[n] = uⁿ − u^{n−1} − h F(u^{n−1}; θ^{n−1}) = f[n]   (= 0 on the fine level)
//! ```
//!
//! [`sequential_forward`] solves it by forward substitution and is the oracle
//! every iterative solver is checked against. The last block `θ^{N−1}` maps
//! `u^{N−1}` to the output state handed to the readout; it sits outside the
//! system together with the opening and readout transforms.

use std::ops::Range;

use crate::error::{dim_check, Error, Result};
use crate::numerics::{max_abs_diff, TransformParams};

/// `len` layer vectors of a common width, stored contiguously.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerArray {
    width: usize,
    data: Vec<f64>,
}

/// Layer states `U = (u⁰, …, u^{N−1})`.
pub type StateArray = LayerArray;
/// Right-hand side `f` of a level system.
pub type SourceArray = LayerArray;
/// `R = f − L(U)`.
pub type ResidualArray = LayerArray;

impl LayerArray {
    pub fn zeros(len: usize, width: usize) -> Self {
        Self {
            width,
            data: vec![0.0; len * width],
        }
    }

    pub fn from_flat(width: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || !data.len().is_multiple_of(width) {
            return Err(Error::Dimension(format!(
                "flat buffer of {} entries is not a whole number of width-{width} layers",
                data.len()
            )));
        }
        Ok(Self { width, data })
    }

    pub fn from_layers<V: AsRef<[f64]>>(layers: &[V]) -> Result<Self> {
        let width = layers
            .first()
            .map(|l| l.as_ref().len())
            .ok_or_else(|| Error::Dimension("empty layer list".into()))?;
        let mut data = Vec::with_capacity(width * layers.len());
        for l in layers {
            dim_check("layer width", width, l.as_ref().len())?;
            data.extend_from_slice(l.as_ref());
        }
        Self::from_flat(width, data)
    }

    /// Every layer set to `v`.
    pub fn replicate(v: &[f64], len: usize) -> Self {
        let mut data = Vec::with_capacity(v.len() * len);
        for _ in 0..len {
            data.extend_from_slice(v);
        }
        Self {
            width: v.len(),
            data,
        }
    }

    /// Number of layers.
    #[inline]
    pub fn len(&self) -> usize {
        self.data.len().checked_div(self.width).unwrap_or(0)
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn layer(&self, n: usize) -> &[f64] {
        &self.data[n * self.width..(n + 1) * self.width]
    }

    #[inline]
    pub fn layer_mut(&mut self, n: usize) -> &mut [f64] {
        &mut self.data[n * self.width..(n + 1) * self.width]
    }

    /// Flat entries of the layers in `range`.
    #[inline]
    pub fn span(&self, range: Range<usize>) -> &[f64] {
        &self.data[range.start * self.width..range.end * self.width]
    }

    pub fn layers(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.width)
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &LayerArray) -> f64 {
        max_abs_diff(&self.data, &other.data)
    }

    pub(crate) fn check_shape(&self, what: &str, len: usize, width: usize) -> Result<()> {
        dim_check(&format!("{what} width"), width, self.width)?;
        dim_check(&format!("{what} layer count"), len, self.len())
    }
}

/// One level of the layer system: `num_layers` states of common `width` and
/// the one-step map `Φₙ(u) = u + h F(u; θⁿ)`.
pub trait Propagator {
    fn width(&self) -> usize;
    fn num_layers(&self) -> usize;
    /// `out = u + h F(u; θⁿ)`; slices have length `width()`.
    fn step(&self, n: usize, u: &[f64], out: &mut [f64]);
}

impl<P: Propagator + ?Sized> Propagator for &P {
    fn width(&self) -> usize {
        (**self).width()
    }
    fn num_layers(&self) -> usize {
        (**self).num_layers()
    }
    fn step(&self, n: usize, u: &[f64], out: &mut [f64]) {
        (**self).step(n, u, out)
    }
}

#[inline]
pub(crate) fn euler_step(params: &TransformParams, h: f64, u: &[f64], out: &mut [f64]) {
    params.pre_activation(u, out);
    let act = params.activation;
    for (o, x) in out.iter_mut().zip(u) {
        *o = x + h * act.eval(*o);
    }
}

/// Solves `L(U) = f` by forward substitution:
/// `u⁰ = f[0]`, `uⁿ = f[n] + Φ_{n−1}(u^{n−1})`.
pub fn sequential_forward<P: Propagator>(level: &P, f: &SourceArray) -> Result<StateArray> {
    let (len, width) = (level.num_layers(), level.width());
    f.check_shape("source", len, width)?;
    let mut u = StateArray::zeros(len, width);
    u.layer_mut(0).copy_from_slice(f.layer(0));
    propagate_span(level, &mut u, f, 0..len);
    Ok(u)
}

/// Recomputes layers `range.start + 1 .. range.end` from layer `range.start`.
pub(crate) fn propagate_span<P: Propagator>(
    level: &P,
    u: &mut StateArray,
    f: &SourceArray,
    range: Range<usize>,
) {
    let width = u.width;
    let base = range.start;
    let span = &mut u.data[base * width..range.end * width];
    propagate_slice(level, span, f, base);
}

/// Same as [`propagate_span`] on a detached slice whose first layer has
/// global index `base`.
pub(crate) fn propagate_slice<P: Propagator>(
    level: &P,
    span: &mut [f64],
    f: &SourceArray,
    base: usize,
) {
    let width = f.width();
    let layers = span.len() / width;
    for k in 1..layers {
        let (done, rest) = span.split_at_mut(k * width);
        let prev = &done[(k - 1) * width..];
        let cur = &mut rest[..width];
        level.step(base + k - 1, prev, cur);
        for (c, s) in cur.iter_mut().zip(f.layer(base + k)) {
            *c += s;
        }
    }
}

/// The nonlinear operator `L(U)`.
pub fn apply_operator<P: Propagator>(level: &P, u: &StateArray) -> Result<StateArray> {
    let (len, width) = (level.num_layers(), level.width());
    u.check_shape("state", len, width)?;
    let mut out = StateArray::zeros(len, width);
    out.layer_mut(0).copy_from_slice(u.layer(0));
    for n in 1..len {
        let o = out.layer_mut(n);
        level.step(n - 1, u.layer(n - 1), o);
        for (v, x) in o.iter_mut().zip(u.layer(n)) {
            *v = x - *v;
        }
    }
    Ok(out)
}

/// A residual network: opening transform, `N` residual blocks of uniform
/// width `q` with step `h`, and a readout producing class logits.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualNetwork {
    pub opening: TransformParams,
    pub blocks: Vec<TransformParams>,
    pub step_size: f64,
    pub readout: TransformParams,
}

impl ResidualNetwork {
    pub fn new(
        opening: TransformParams,
        blocks: Vec<TransformParams>,
        step_size: f64,
        readout: TransformParams,
    ) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::Config("a network needs at least one residual block".into()));
        }
        if !(step_size.is_finite() && step_size >= 0.0) {
            return Err(Error::Config(format!("step size must be finite and >= 0, got {step_size}")));
        }
        let q = opening.output_len();
        for (i, b) in blocks.iter().enumerate() {
            if b.input_len() != q || b.output_len() != q {
                return Err(Error::Dimension(format!(
                    "block {i} maps {} -> {}, expected width {q}",
                    b.input_len(),
                    b.output_len()
                )));
            }
        }
        dim_check("readout input", q, readout.input_len())?;
        Ok(Self {
            opening,
            blocks,
            step_size,
            readout,
        })
    }

    /// Layer width `q`.
    pub fn width(&self) -> usize {
        self.opening.output_len()
    }

    /// Number of residual blocks `N` (= number of states in the system).
    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn input_len(&self) -> usize {
        self.opening.input_len()
    }

    pub fn num_classes(&self) -> usize {
        self.readout.output_len()
    }

    pub fn num_params(&self) -> usize {
        self.opening.num_params()
            + self.blocks.iter().map(|b| b.num_params()).sum::<usize>()
            + self.readout.num_params()
    }

    /// Fine-level source: `f[0] = F_in·y`, zero elsewhere.
    pub fn source(&self, sample: &[f64]) -> Result<SourceArray> {
        let mut f = SourceArray::zeros(self.depth(), self.width());
        self.opening.apply_into(sample, f.layer_mut(0))?;
        Ok(f)
    }

    /// Applies the last block to `u^{N−1}`.
    pub fn output_state(&self, states: &StateArray) -> Result<Vec<f64>> {
        states.check_shape("state", self.depth(), self.width())?;
        let n = self.depth() - 1;
        let mut out = vec![0.0; self.width()];
        self.step(n, states.layer(n), &mut out);
        Ok(out)
    }

    pub fn readout_logits(&self, last_state: &[f64]) -> Result<Vec<f64>> {
        self.readout.apply(last_state)
    }

    /// Logits from a full set of (exact or approximate) block states.
    pub fn logits_from_states(&self, states: &StateArray) -> Result<Vec<f64>> {
        self.readout_logits(&self.output_state(states)?)
    }

    /// Plain sequential inference.
    pub fn forward(&self, sample: &[f64]) -> Result<(StateArray, Vec<f64>)> {
        let f = self.source(sample)?;
        let states = sequential_forward(self, &f)?;
        let logits = self.logits_from_states(&states)?;
        Ok((states, logits))
    }

    /// All parameters in declaration order: opening, blocks, readout.
    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.opening
            .params()
            .chain(self.blocks.iter().flat_map(|b| b.params()))
            .chain(self.readout.params())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.opening
            .params_mut()
            .chain(self.blocks.iter_mut().flat_map(|b| b.params_mut()))
            .chain(self.readout.params_mut())
    }
}

impl Propagator for ResidualNetwork {
    fn width(&self) -> usize {
        ResidualNetwork::width(self)
    }

    fn num_layers(&self) -> usize {
        self.depth()
    }

    #[inline]
    fn step(&self, n: usize, u: &[f64], out: &mut [f64]) {
        euler_step(&self.blocks[n], self.step_size, u, out);
    }
}
