use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use resnet_mg::idx::{load_mnist_idx, MNIST_CLASSES};
use resnet_mg::train::{train, EpochStats};
use resnet_mg::{
    build_hierarchy, sequential_forward, solve, CycleReport, LayerExecutor, MgHierarchy,
    ResidualNetwork, SourceArray, StateArray,
};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::CliError;

/// Result of one command: the CSV body, whether the run met its pass
/// condition, and a human-readable summary.
#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub csv: String,
    pub passed: bool,
    pub summary: Vec<String>,
    pub detail: Detail,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Detail {
    Converge(Vec<(usize, CycleReport)>),
    OracleCheck(Vec<OracleRow>),
    Train(Vec<EpochStats>),
    Scale(Vec<ScaleRow>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleRow {
    pub seed: u64,
    pub depth: usize,
    pub width: usize,
    pub cycles: usize,
    pub max_abs_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScaleRow {
    pub workers: usize,
    pub wall_seconds: f64,
    pub checksum: String,
}

fn hierarchy(cfg: &ExperimentConfig, net: &ResidualNetwork) -> Result<MgHierarchy, CliError> {
    let h = match cfg.coarsest_layers {
        0 => MgHierarchy::two_level(net, cfg.coarsening_factor)?,
        t => build_hierarchy(net, cfg.coarsening_factor, t)?,
    };
    Ok(h)
}

/// Seeded network whose opening maps `width` inputs onto the state width,
/// together with the source term of a seeded input in `[-1, 1)`.
fn seeded_problem(
    cfg: &ExperimentConfig,
    depth: usize,
    width: usize,
    seed: u64,
) -> Result<(ResidualNetwork, SourceArray), CliError> {
    let spec = cfg.network.build_spec(depth, width, width, MNIST_CLASSES)?;
    let net = spec.build_random(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_1a7e);
    let y: Vec<f64> = (0..net.input_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let f = net.source(&y)?;
    Ok((net, f))
}

fn executor(workers: usize) -> Result<LayerExecutor, CliError> {
    Ok(LayerExecutor::new(workers)?)
}

/// Residual history per depth, CSV `depth,cycle,residual_l2`.
pub fn cmd_converge(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let ex = executor(cfg.workers()[0])?;
    let mut csv = String::from("depth,cycle,residual_l2\n");
    let mut runs = Vec::new();
    let mut summary = Vec::new();
    for depth in cfg.depths() {
        let (net, f) = seeded_problem(cfg, depth, cfg.network.width, cfg.seed)?;
        let (_, report) = solve(&hierarchy(cfg, &net)?, &ex, &f, cfg.solve_options())?;
        for (k, r) in report.residual_norms.iter().enumerate() {
            writeln!(csv, "{depth},{k},{r:e}").unwrap();
        }
        summary.push(format!(
            "depth {depth}: {} cycles, final residual {:e}, {}",
            report.cycles_used,
            report.final_norm(),
            if report.converged { "converged" } else { "NOT converged" }
        ));
        runs.push((depth, report));
    }
    let passed = runs.iter().all(|(_, r)| r.converged);
    Ok(Outcome {
        csv,
        passed,
        summary,
        detail: Detail::Converge(runs),
    })
}

/// Max-abs state error of the multigrid solve against sequential
/// propagation for every seed, depth and width.
pub fn cmd_oracle_check(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let ex = executor(cfg.workers()[0])?;
    let mut csv = String::from("seed,depth,width,cycles,max_abs_error,pass\n");
    let mut rows = Vec::new();
    for seed in cfg.seed..cfg.seed + cfg.num_seeds {
        for depth in cfg.depths() {
            for &width in &cfg.widths {
                let (net, f) = seeded_problem(cfg, depth, width, seed)?;
                let oracle = sequential_forward(&net, &f)?;
                let (u, report) = solve(&hierarchy(cfg, &net)?, &ex, &f, cfg.solve_options())?;
                let err = u.max_abs_diff(&oracle);
                let row = OracleRow {
                    seed,
                    depth,
                    width,
                    cycles: report.cycles_used,
                    max_abs_error: err,
                    passed: err <= cfg.oracle_tol,
                };
                writeln!(
                    csv,
                    "{seed},{depth},{width},{},{err:e},{}",
                    row.cycles, row.passed
                )
                .unwrap();
                rows.push(row);
            }
        }
    }
    let worst = rows.iter().map(|r| r.max_abs_error).fold(0.0, f64::max);
    let failures = rows.iter().filter(|r| !r.passed).count();
    Ok(Outcome {
        csv,
        passed: failures == 0,
        summary: vec![format!(
            "{} runs, {failures} above {:e}, worst max-abs error {worst:e}",
            rows.len(),
            cfg.oracle_tol
        )],
        detail: Detail::OracleCheck(rows),
    })
}

/// Trains on the configured MNIST subset and reports one row per epoch.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let d = &cfg.data;
    let train_set = load_mnist_idx(&d.train_images, &d.train_labels)?.head(d.train_samples);
    let test_set = load_mnist_idx(&d.test_images, &d.test_labels)?.head(d.test_samples);
    let depth = cfg.depths()[0];
    let spec = cfg
        .network
        .build_spec(depth, cfg.network.width, train_set.image_len(), MNIST_CLASSES)?;
    let mut net = spec.build_random(cfg.seed)?;
    let stats = train(&mut net, &train_set, Some(&test_set), &cfg.train)?;
    let mut csv = format!("{}\n", EpochStats::CSV_HEADER);
    for s in &stats {
        writeln!(csv, "{}", s.csv_row()).unwrap();
    }
    let summary = stats
        .iter()
        .map(|s| {
            format!(
                "epoch {}: loss {:.4}, top-1 test error {:.3} ({} mode)",
                s.epoch, s.mean_loss, s.top1_error, s.mode
            )
        })
        .collect();
    Ok(Outcome {
        csv,
        passed: true,
        summary,
        detail: Detail::Train(stats),
    })
}

/// SHA-256 of the little-endian bytes of every state entry.
pub fn state_checksum(u: &StateArray) -> String {
    let mut h = Sha256::new();
    for v in u.as_slice() {
        h.update(v.to_le_bytes());
    }
    format!("{:x}", h.finalize())
}

/// Times the full solve for each worker count. Diverging checksums are a
/// determinism breach and fail the run.
pub fn cmd_scale(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let depth = cfg.depths()[0];
    let (net, f) = seeded_problem(cfg, depth, cfg.network.width, cfg.seed)?;
    let hier = hierarchy(cfg, &net)?;
    let mut csv = String::from("workers,wall_seconds,checksum\n");
    let mut rows = Vec::new();
    for workers in cfg.workers() {
        let ex = executor(workers)?;
        let mut best = f64::INFINITY;
        let mut checksum = String::new();
        for _ in 0..cfg.repeats {
            let start = Instant::now();
            let (u, _) = solve(&hier, &ex, &f, cfg.solve_options())?;
            best = best.min(start.elapsed().as_secs_f64());
            checksum = state_checksum(&u);
        }
        writeln!(csv, "{workers},{best:.6},{checksum}").unwrap();
        rows.push(ScaleRow {
            workers,
            wall_seconds: best,
            checksum,
        });
    }
    let mut summary: Vec<String> = rows
        .iter()
        .map(|r| format!("{} workers: {:.4} s", r.workers, r.wall_seconds))
        .collect();
    if let Some(bad) = rows.iter().find(|r| r.checksum != rows[0].checksum) {
        return Err(CliError::Failed(format!(
            "determinism breach: {} workers gave checksum {}, {} workers gave {}\n{csv}",
            bad.workers, bad.checksum, rows[0].workers, rows[0].checksum
        )));
    }
    summary.push(format!("checksum {} for all worker counts", rows[0].checksum));
    Ok(Outcome {
        csv,
        passed: true,
        summary,
        detail: Detail::Scale(rows),
    })
}
