//! Nonlinear FAS multigrid over the layer dimension.
//!
//! One cycle on level `h` with coarsening factor `c`:
//!
//! 1. FCF-relaxation of `L_h(U) = f`.
//! 2. Inject the residual and the states at C-layers:
//!    `R_H[n] = R_h[nc]`, `Ū_H[n] = Ū_h[nc]`.
//! 3. Solve `L_H(V) = L_H(Ū_H) + R_H` on the coarse level (step `H = ch`,
//!    parameters `θ_H[n] = θ_h[nc]`), exactly on the coarsest level and by
//!    one recursive cycle otherwise.
//! 4. Correct the C-layers: `Ū_h[nc] += V[n] − Ū_H[n]`.
//!
//! F-layers pick up the correction in the next cycle's F-relaxation.

use std::io::Write;

use crate::error::{Error, Result};
use crate::numerics::{l2_norm, TransformParams};
use crate::parallel::{BlockPartition, LayerExecutor};
use crate::resnet::{
    apply_operator, euler_step, propagate_span, sequential_forward, Propagator, ResidualArray,
    ResidualNetwork, SourceArray, StateArray,
};

/// One level of the hierarchy.
#[derive(Clone, Debug, PartialEq)]
pub struct MgLevel {
    pub step_size: f64,
    /// `θ[n]` for transitions out of layer `n`.
    pub block_params: Vec<TransformParams>,
    pub num_layers: usize,
    width: usize,
}

impl Propagator for MgLevel {
    fn width(&self) -> usize {
        self.width
    }

    fn num_layers(&self) -> usize {
        self.num_layers
    }

    #[inline]
    fn step(&self, n: usize, u: &[f64], out: &mut [f64]) {
        euler_step(&self.block_params[n], self.step_size, u, out);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MgHierarchy {
    /// Finest first.
    pub levels: Vec<MgLevel>,
    pub coarsening_factor: usize,
    pub coarsest_direct_threshold: usize,
}

impl MgHierarchy {
    pub fn finest(&self) -> &MgLevel {
        &self.levels[0]
    }

    pub fn coarsest(&self) -> &MgLevel {
        self.levels.last().expect("hierarchy has a level")
    }

    /// Two levels: the fine network and one coarse level of `N / c` layers.
    pub fn two_level(net: &ResidualNetwork, c: usize) -> Result<Self> {
        build_hierarchy(net, c, (net.depth() / c.max(1)).max(1))
    }
}

/// Coarsens by injection until a level has at most `threshold` layers.
///
/// Every level that is coarsened further must have a layer count divisible
/// by `c`; no padding layers are inserted.
pub fn build_hierarchy(net: &ResidualNetwork, c: usize, threshold: usize) -> Result<MgHierarchy> {
    if c < 2 {
        return Err(Error::Config(format!("coarsening factor must be at least 2, got {c}")));
    }
    if threshold == 0 {
        return Err(Error::Config("coarsest-level threshold must be at least 1".into()));
    }
    let mut levels = vec![MgLevel {
        step_size: net.step_size,
        block_params: net.blocks.clone(),
        num_layers: net.depth(),
        width: net.width(),
    }];
    loop {
        let fine = levels.last().unwrap();
        if fine.num_layers <= threshold {
            break;
        }
        if fine.num_layers % c != 0 {
            return Err(Error::Config(format!(
                "level with {} layers is not divisible by coarsening factor {c}",
                fine.num_layers
            )));
        }
        let coarse = MgLevel {
            step_size: fine.step_size * c as f64,
            block_params: fine.block_params.iter().step_by(c).cloned().collect(),
            num_layers: fine.num_layers / c,
            width: fine.width,
        };
        levels.push(coarse);
    }
    Ok(MgHierarchy {
        levels,
        coarsening_factor: c,
        coarsest_direct_threshold: threshold,
    })
}

/// `R = f − L(U)`.
pub fn compute_residual<P: Propagator>(
    level: &P,
    u: &StateArray,
    f: &SourceArray,
) -> Result<ResidualArray> {
    f.check_shape("source", level.num_layers(), level.width())?;
    let mut r = apply_operator(level, u)?;
    for (ri, fi) in r.as_mut_slice().iter_mut().zip(f.as_slice()) {
        *ri = fi - *ri;
    }
    Ok(r)
}

/// Injection: `out[n] = fine[n·c]`.
pub fn restrict_states(fine: &StateArray, c: usize) -> Result<StateArray> {
    if c == 0 || !fine.len().is_multiple_of(c) {
        return Err(Error::Dimension(format!(
            "cannot inject {} layers with factor {c}",
            fine.len()
        )));
    }
    let mut data = Vec::with_capacity(fine.len() / c * fine.width());
    for layer in fine.layers().step_by(c) {
        data.extend_from_slice(layer);
    }
    StateArray::from_flat(fine.width(), data)
}

/// `S_H = L_H(Ū_H) + R_H`.
pub fn assemble_coarse_source<P: Propagator>(
    u_coarse: &StateArray,
    r_coarse: &ResidualArray,
    coarse: &P,
) -> Result<SourceArray> {
    r_coarse.check_shape("coarse residual", coarse.num_layers(), coarse.width())?;
    let mut s = apply_operator(coarse, u_coarse)?;
    for (si, ri) in s.as_mut_slice().iter_mut().zip(r_coarse.as_slice()) {
        *si += ri;
    }
    Ok(s)
}

fn check_sweep<P: Propagator>(
    level: &P,
    u: &StateArray,
    f: &SourceArray,
    partition: &BlockPartition,
) -> Result<()> {
    u.check_shape("state", level.num_layers(), level.width())?;
    f.check_shape("source", level.num_layers(), level.width())?;
    if partition.num_layers() != level.num_layers() {
        return Err(Error::Dimension(format!(
            "partition covers {} layers, level has {}",
            partition.num_layers(),
            level.num_layers()
        )));
    }
    Ok(())
}

/// Serial F-relaxation: propagate each block's C-layer through its F-layers.
pub fn f_relaxation<P: Propagator>(
    level: &P,
    u: &mut StateArray,
    f: &SourceArray,
    partition: &BlockPartition,
) -> Result<()> {
    check_sweep(level, u, f, partition)?;
    for block in partition.block_ranges() {
        propagate_span(level, u, f, block);
    }
    Ok(())
}

/// Serial C-relaxation: `u[bc] = f[bc] + Φ(u[bc − 1])` for every block
/// `b ≥ 1`, using pre-sweep values, and `u[0] = f[0]`.
pub fn c_relaxation<P: Propagator>(
    level: &P,
    u: &mut StateArray,
    f: &SourceArray,
    partition: &BlockPartition,
) -> Result<()> {
    check_sweep(level, u, f, partition)?;
    let q = level.width();
    let mut next = vec![0.0; q];
    for block in partition.block_ranges().skip(1).rev() {
        let c_layer = block.start;
        level.step(c_layer - 1, u.layer(c_layer - 1), &mut next);
        for ((d, x), s) in u.layer_mut(c_layer).iter_mut().zip(&next).zip(f.layer(c_layer)) {
            *d = x + s;
        }
    }
    u.layer_mut(0).copy_from_slice(f.layer(0));
    Ok(())
}

pub fn fcf_relaxation<P: Propagator>(
    level: &P,
    u: &mut StateArray,
    f: &SourceArray,
    partition: &BlockPartition,
) -> Result<()> {
    f_relaxation(level, u, f, partition)?;
    c_relaxation(level, u, f, partition)?;
    f_relaxation(level, u, f, partition)
}

/// One FAS cycle on the finest level; returns `‖f − L(U)‖₂` afterwards.
pub fn mg_cycle(
    hierarchy: &MgHierarchy,
    executor: &LayerExecutor,
    u: &mut StateArray,
    f: &SourceArray,
) -> Result<f64> {
    let fine = hierarchy.finest();
    u.check_shape("state", fine.num_layers, fine.width)?;
    f.check_shape("source", fine.num_layers, fine.width)?;
    cycle_level(hierarchy, executor, 0, u, f)?;
    Ok(l2_norm(compute_residual(fine, u, f)?.as_slice()))
}

fn cycle_level(
    hierarchy: &MgHierarchy,
    executor: &LayerExecutor,
    index: usize,
    u: &mut StateArray,
    f: &SourceArray,
) -> Result<()> {
    let level = &hierarchy.levels[index];
    if index + 1 == hierarchy.levels.len() {
        *u = sequential_forward(level, f)?;
        return Ok(());
    }
    let c = hierarchy.coarsening_factor;
    let partition = executor.partition(level.num_layers, c)?;
    executor.fcf_relax(level, u, f, &partition)?;

    let residual = compute_residual(level, u, f)?;
    let r_coarse = restrict_states(&residual, c)?;
    let u_coarse = restrict_states(u, c)?;
    let coarse = &hierarchy.levels[index + 1];
    let s_coarse = assemble_coarse_source(&u_coarse, &r_coarse, coarse)?;

    let mut v = u_coarse.clone();
    cycle_level(hierarchy, executor, index + 1, &mut v, &s_coarse)?;

    for n in 0..coarse.num_layers {
        let (vn, un) = (v.layer(n), u_coarse.layer(n));
        for ((dst, a), b) in u.layer_mut(n * c).iter_mut().zip(vn).zip(un) {
            *dst += a - b;
        }
    }
    Ok(())
}

/// Stopping rule for [`solve`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolveOptions {
    pub tol: f64,
    pub max_cycles: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            max_cycles: 50,
        }
    }
}

impl SolveOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol.is_finite() && self.tol > 0.0) {
            return Err(Error::Config(format!(
                "tolerance must be finite and positive, got {}",
                self.tol
            )));
        }
        if self.max_cycles == 0 {
            return Err(Error::Config("max_cycles must be at least 1".into()));
        }
        Ok(())
    }
}

/// Residual history of one solve.
#[derive(Clone, Debug, PartialEq)]
pub struct CycleReport {
    /// `residual_norms[k]` is the norm after `k` cycles; entry 0 is the
    /// initial guess.
    pub residual_norms: Vec<f64>,
    pub cycles_used: usize,
    pub converged: bool,
}

impl CycleReport {
    pub fn final_norm(&self) -> f64 {
        *self.residual_norms.last().expect("report holds the initial norm")
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "cycle,residual_l2")?;
        for (k, r) in self.residual_norms.iter().enumerate() {
            writeln!(w, "{k},{r:e}")?;
        }
        Ok(())
    }
}

/// Initial guess: every layer equal to `f[0]`.
pub fn initial_guess(f: &SourceArray) -> StateArray {
    StateArray::replicate(f.layer(0), f.len())
}

/// Cycles from [`initial_guess`] until `‖R‖₂ ≤ tol` or `max_cycles`.
///
/// Running out of cycles is not an error: the report says
/// `converged = false` and the current states are returned.
pub fn solve(
    hierarchy: &MgHierarchy,
    executor: &LayerExecutor,
    f: &SourceArray,
    options: SolveOptions,
) -> Result<(StateArray, CycleReport)> {
    let fine = hierarchy.finest();
    f.check_shape("source", fine.num_layers, fine.width)?;
    solve_from(hierarchy, executor, initial_guess(f), f, options)
}

/// [`solve`] starting from a caller-supplied guess.
pub fn solve_from(
    hierarchy: &MgHierarchy,
    executor: &LayerExecutor,
    mut u: StateArray,
    f: &SourceArray,
    options: SolveOptions,
) -> Result<(StateArray, CycleReport)> {
    options.validate()?;
    let fine = hierarchy.finest();
    let mut norms = vec![l2_norm(compute_residual(fine, &u, f)?.as_slice())];
    while norms.len() <= options.max_cycles && *norms.last().unwrap() > options.tol {
        norms.push(mg_cycle(hierarchy, executor, &mut u, f)?);
    }
    let converged = *norms.last().unwrap() <= options.tol;
    let report = CycleReport {
        cycles_used: norms.len() - 1,
        residual_norms: norms,
        converged,
    };
    Ok((u, report))
}
