//! Softmax cross-entropy training with plain SGD.
//!
//! Forward states come either from sequential propagation or from a
//! truncated multigrid solve. The backward pass is ordinary reverse-mode
//! differentiation through whichever states were supplied, so early-stopped
//! states yield approximate gradients.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::idx::Dataset;
use crate::mg::{solve, MgHierarchy, SolveOptions};
use crate::parallel::LayerExecutor;
use crate::resnet::{sequential_forward, ResidualNetwork, StateArray};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// States from a multigrid solve capped at `mg_cycles` cycles.
    Mg,
    /// States from sequential forward propagation.
    Exact,
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TrainMode::Mg => "mg",
            TrainMode::Exact => "exact",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub mg_cycles: usize,
    pub tol: f64,
    pub coarsening_factor: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Mg,
            mg_cycles: 2,
            tol: 1e-9,
            coarsening_factor: 4,
            learning_rate: 0.05,
            batch_size: 10,
            epochs: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mg_cycles == 0 {
            return Err(Error::Config("mg_cycles must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        if self.coarsening_factor < 2 {
            return Err(Error::Config("coarsening factor must be at least 2".into()));
        }
        SolveOptions {
            tol: self.tol,
            max_cycles: self.mg_cycles,
        }
        .validate()
    }

    fn solve_options(&self) -> SolveOptions {
        SolveOptions {
            tol: self.tol,
            max_cycles: self.mg_cycles,
        }
    }
}

/// Forward propagation according to the configured mode.
pub struct ForwardSolver {
    mode: TrainMode,
    hierarchy: Option<MgHierarchy>,
    options: SolveOptions,
}

impl ForwardSolver {
    pub fn new(net: &ResidualNetwork, cfg: &TrainConfig) -> Result<Self> {
        let hierarchy = match cfg.mode {
            TrainMode::Mg => Some(MgHierarchy::two_level(net, cfg.coarsening_factor)?),
            TrainMode::Exact => None,
        };
        Ok(Self {
            mode: cfg.mode,
            hierarchy,
            options: cfg.solve_options(),
        })
    }

    pub fn states(&self, net: &ResidualNetwork, sample: &[f64]) -> Result<StateArray> {
        let f = net.source(sample)?;
        match (self.mode, &self.hierarchy) {
            (TrainMode::Mg, Some(h)) => {
                Ok(solve(h, &LayerExecutor::serial(), &f, self.options)?.0)
            }
            _ => sequential_forward(net, &f),
        }
    }
}

/// Per-parameter gradient in the order of [`ResidualNetwork::params`].
pub type Gradient = Vec<f64>;

fn log_softmax_loss(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|z| (z - max).exp()).sum();
    let log_z = max + sum.ln();
    let mut grad: Vec<f64> = logits.iter().map(|z| (z - log_z).exp()).collect();
    grad[label] -= 1.0;
    (log_z - logits[label], grad)
}

/// Cross-entropy of the readout of `states` and its gradient with respect to
/// every parameter, obtained by reverse traversal through the supplied states.
pub fn loss_and_grad(
    net: &ResidualNetwork,
    sample: &[f64],
    states: &StateArray,
    label: usize,
) -> Result<(f64, Gradient)> {
    if label >= net.num_classes() {
        return Err(Error::Input(format!(
            "label {label} out of range for {} classes",
            net.num_classes()
        )));
    }
    let n = net.depth();
    let q = net.width();
    states.check_shape("state", n, q)?;

    let out_state = net.output_state(states)?;
    let logits = net.readout_logits(&out_state)?;
    let (loss, dlogits) = log_softmax_loss(&logits, label);

    let mut grad = vec![0.0; net.num_params()];
    let mut offsets = Vec::with_capacity(n + 2);
    let mut at = 0;
    for t in std::iter::once(&net.opening)
        .chain(net.blocks.iter())
        .chain(std::iter::once(&net.readout))
    {
        offsets.push(at);
        at += t.num_params();
    }
    // (weights start, bias start, end) of transform k in declaration order.
    let span = |k: usize, t: &crate::numerics::TransformParams| {
        (offsets[k], offsets[k] + t.weights.len(), offsets[k] + t.num_params())
    };

    // Readout.
    let mut g = vec![0.0; q];
    {
        let t = &net.readout;
        let (w0, b0, end) = span(n + 1, t);
        let (gw, gb) = grad[w0..end].split_at_mut(b0 - w0);
        t.backward(&out_state, &dlogits, &mut g, gw, gb)?;
    }

    // Blocks, last to first: u^{k+1} = u^k + h F(u^k; θ^k).
    let h = net.step_size;
    let mut scaled = vec![0.0; q];
    let mut through = vec![0.0; q];
    for k in (0..n).rev() {
        let t = &net.blocks[k];
        for (s, gi) in scaled.iter_mut().zip(&g) {
            *s = h * gi;
        }
        let (w0, b0, end) = span(k + 1, t);
        let (gw, gb) = grad[w0..end].split_at_mut(b0 - w0);
        t.backward(states.layer(k), &scaled, &mut through, gw, gb)?;
        for (gi, d) in g.iter_mut().zip(&through) {
            *gi += d;
        }
    }

    // Opening: u⁰ = F_in(y).
    {
        let t = &net.opening;
        let mut g_in = vec![0.0; t.input_len()];
        let (w0, b0, end) = span(0, t);
        let (gw, gb) = grad[w0..end].split_at_mut(b0 - w0);
        t.backward(sample, &g, &mut g_in, gw, gb)?;
    }
    Ok((loss, grad))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub top1_error: f64,
    pub mode: TrainMode,
    pub mg_cycles: usize,
}

impl EpochStats {
    pub const CSV_HEADER: &'static str = "epoch,mean_loss,top1_error,mode,mg_cycles";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{},{}",
            self.epoch, self.mean_loss, self.top1_error, self.mode, self.mg_cycles
        )
    }
}

/// Fraction of misclassified samples, with states from the configured mode.
pub fn top1_error(net: &ResidualNetwork, data: &Dataset, cfg: &TrainConfig) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let solver = ForwardSolver::new(net, cfg)?;
    let wrong = (0..data.len())
        .into_par_iter()
        .map(|i| -> Result<usize> {
            let states = solver.states(net, data.image(i))?;
            let logits = net.logits_from_states(&states)?;
            let best = logits
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |b, (j, &z)| if z > b.1 { (j, z) } else { b })
                .0;
            Ok(usize::from(best != data.label(i)))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum::<usize>();
    Ok(wrong as f64 / data.len() as f64)
}

/// One pass of mini-batch SGD over a seeded shuffle of `train`.
///
/// Returns the mean training loss and the Top-1 error on `eval` (or on
/// `train` when no evaluation set is given).
pub fn train_epoch(
    net: &mut ResidualNetwork,
    train: &Dataset,
    eval: Option<&Dataset>,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<EpochStats> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Input("empty training set".into()));
    }
    dim_matches(net, train)?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64));
    order.shuffle(&mut rng);

    let mut loss_sum = 0.0;
    for batch in order.chunks(cfg.batch_size) {
        let solver = ForwardSolver::new(net, cfg)?;
        let frozen = &*net;
        let per_sample = batch
            .par_iter()
            .map(|&i| {
                let x = train.image(i);
                let states = solver.states(frozen, x)?;
                loss_and_grad(frozen, x, &states, train.label(i))
            })
            .collect::<Result<Vec<_>>>()?;

        let mut total = vec![0.0; net.num_params()];
        for (loss, grad) in &per_sample {
            loss_sum += loss;
            for (t, g) in total.iter_mut().zip(grad) {
                *t += g;
            }
        }
        let scale = cfg.learning_rate / batch.len() as f64;
        for (p, g) in net.params_mut().zip(&total) {
            *p -= scale * g;
        }
    }
    let top1 = top1_error(net, eval.unwrap_or(train), cfg)?;
    Ok(EpochStats {
        epoch,
        mean_loss: loss_sum / train.len() as f64,
        top1_error: top1,
        mode: cfg.mode,
        mg_cycles: cfg.mg_cycles,
    })
}

fn dim_matches(net: &ResidualNetwork, data: &Dataset) -> Result<()> {
    if net.input_len() != data.image_len() {
        return Err(Error::Dimension(format!(
            "network expects {} inputs, images have {}",
            net.input_len(),
            data.image_len()
        )));
    }
    Ok(())
}

/// `cfg.epochs` epochs of [`train_epoch`].
pub fn train(
    net: &mut ResidualNetwork,
    train_set: &Dataset,
    eval: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<Vec<EpochStats>> {
    (0..cfg.epochs)
        .map(|e| train_epoch(net, train_set, eval, cfg, e))
        .collect()
}
