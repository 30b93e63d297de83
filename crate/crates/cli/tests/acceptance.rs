//! Acceptance suite. Every criterion prints one PASS/FAIL line; hard
//! criteria fail the test, the soft timing criterion is only logged.
//!
//! Run with `cargo test -p resnet-mg-cli --test acceptance`.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use resnet_mg::idx::{encode_images, encode_labels, load_mnist_idx, parse_images, parse_labels};
use resnet_mg::mg::{c_relaxation, compute_residual, f_relaxation, fcf_relaxation};
use resnet_mg::train::{loss_and_grad, TrainMode};
use resnet_mg::{
    make_partition, mg_cycle, sequential_forward, solve, Activation, Error,
    LayerExecutor, MgHierarchy, NetworkSpec, SolveOptions, StateArray,
};
use resnet_mg_cli::commands::{state_checksum, Detail};
use resnet_mg_cli::{
    cmd_converge, cmd_oracle_check, cmd_scale, cmd_train, CliError, ExperimentConfig,
    ExperimentKind, Overrides,
};

struct Verdict {
    id: u8,
    hard: bool,
    passed: bool,
    detail: String,
}

fn verdict(id: u8, passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        id,
        hard: true,
        passed,
        detail: detail.into(),
    }
}

fn config(kind: ExperimentKind, flags: Overrides) -> ExperimentConfig {
    ExperimentConfig::default().resolve(kind, &flags).unwrap()
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed())
}

fn criterion_1() -> Verdict {
    let cfg = config(ExperimentKind::Converge, Overrides::default());
    assert_eq!(cfg.depths(), vec![64, 256, 1024]);
    assert_eq!((cfg.network.width, cfg.coarsening_factor, cfg.tol), (16, 4, 1e-9));
    let (out, t) = timed(|| cmd_converge(&cfg).unwrap());
    let Detail::Converge(runs) = out.detail else { unreachable!() };
    let counts: Vec<usize> = runs.iter().map(|(_, r)| r.cycles_used).collect();
    let spread = counts.iter().max().unwrap() - counts.iter().min().unwrap();
    let ok = out.passed && spread <= 2 && t < Duration::from_secs(120);
    verdict(
        1,
        ok,
        format!(
            "depth-independent convergence: cycles {counts:?} for N=64/256/1024 (spread {spread} <= 2), all <= 1e-9: {}, {:.2}s",
            out.passed,
            t.as_secs_f64()
        ),
    )
}

fn criterion_2() -> Verdict {
    let cfg = config(ExperimentKind::OracleCheck, Overrides::default());
    assert_eq!((cfg.num_seeds, cfg.depths(), cfg.widths.clone()), (20, vec![16, 64, 256], vec![2, 8]));
    let (out, t) = timed(|| cmd_oracle_check(&cfg).unwrap());
    let Detail::OracleCheck(rows) = out.detail else { unreachable!() };
    let worst = rows.iter().map(|r| r.max_abs_error).fold(0.0, f64::max);
    verdict(
        2,
        out.passed && rows.len() == 120 && t < Duration::from_secs(60),
        format!(
            "oracle equivalence: {} runs, worst max-abs error {worst:.2e} <= 1e-8, {:.2}s",
            rows.len(),
            t.as_secs_f64()
        ),
    )
}

fn random_problem(
    rng: &mut ChaCha8Rng,
    q: usize,
    n: usize,
    h: f64,
) -> (resnet_mg::ResidualNetwork, resnet_mg::SourceArray) {
    let net = NetworkSpec::dense(q, q, 10, n, h, Activation::Tanh)
        .build_random(rng.random())
        .unwrap();
    let y: Vec<f64> = (0..q).map(|_| rng.random_range(-1.0..1.0)).collect();
    let f = net.source(&y).unwrap();
    (net, f)
}

fn criterion_3() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut worst_change, mut worst_norm) = (0.0f64, 0.0f64);
    for (q, n, c) in [(2, 16, 4), (8, 64, 4), (16, 256, 4), (4, 32, 2), (16, 1024, 4)] {
        for _ in 0..4 {
            let (net, f) = random_problem(&mut rng, q, n, 2.0 / n as f64);
            let exact = sequential_forward(&net, &f).unwrap();
            let mut u = exact.clone();
            let hier = MgHierarchy::two_level(&net, c).unwrap();
            let norm = mg_cycle(&hier, &LayerExecutor::serial(), &mut u, &f).unwrap();
            worst_change = worst_change.max(u.max_abs_diff(&exact));
            worst_norm = worst_norm.max(norm);
        }
    }
    verdict(
        3,
        worst_change <= 1e-12 && worst_norm <= 1e-12,
        format!("fixed point: max entry change {worst_change:.2e}, max residual {worst_norm:.2e} (both <= 1e-12)"),
    )
}

fn criterion_4() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut worst_f, mut worst_c) = (0.0f64, 0.0f64);
    let trials = 300;
    for _ in 0..trials {
        let q = rng.random_range(1..9);
        let c = rng.random_range(2..6);
        let n = c * rng.random_range(1..9);
        let h = rng.random_range(0.0..1.5);
        let (net, f) = random_problem(&mut rng, q, n, h);
        let data: Vec<f64> = (0..n * q).map(|_| rng.random_range(-2.0..2.0)).collect();
        let start = StateArray::from_flat(q, data).unwrap();
        let p = make_partition(n, c, 1).unwrap();

        let mut u = start.clone();
        f_relaxation(&net, &mut u, &f, &p).unwrap();
        let r = compute_residual(&net, &u, &f).unwrap();
        for (k, row) in r.layers().enumerate().filter(|(k, _)| k % c != 0) {
            let _ = k;
            worst_f = row.iter().fold(worst_f, |m, v| m.max(v.abs()));
        }

        let mut u = start;
        c_relaxation(&net, &mut u, &f, &p).unwrap();
        let r = compute_residual(&net, &u, &f).unwrap();
        for row in r.layers().step_by(c) {
            worst_c = row.iter().fold(worst_c, |m, v| m.max(v.abs()));
        }
    }
    verdict(
        4,
        worst_f <= 1e-13 && worst_c <= 1e-13,
        format!("relaxation exactness over {trials} random nets: F-layer residual {worst_f:.2e}, C-layer residual {worst_c:.2e} (<= 1e-13)"),
    )
}

fn criterion_5() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (net, f) = random_problem(&mut rng, 16, 1024, 2.0 / 1024.0);
    let p1 = make_partition(1024, 4, 1).unwrap();
    let mut start = StateArray::replicate(f.layer(0), 1024);
    for x in start.as_mut_slice() {
        *x += rng.random_range(-0.01..0.01);
    }
    let mut reference = start.clone();
    fcf_relaxation(&net, &mut reference, &f, &p1).unwrap();
    let hier = MgHierarchy::two_level(&net, 4).unwrap();
    let solved_ref = solve(&hier, &LayerExecutor::serial(), &f, SolveOptions::default())
        .unwrap()
        .0;

    let mut ok = true;
    for w in [1, 2, 4, 8] {
        let ex = LayerExecutor::new(w).unwrap();
        let mut u = start.clone();
        ex.fcf_relax(&net, &mut u, &f, &ex.partition(1024, 4).unwrap()).unwrap();
        ok &= state_checksum(&u) == state_checksum(&reference);
        let solved = solve(&hier, &ex, &f, SolveOptions::default()).unwrap().0;
        ok &= state_checksum(&solved) == state_checksum(&solved_ref);
    }
    let scale = config(ExperimentKind::Scale, Overrides::default());
    assert_eq!((scale.workers(), scale.depths()), (vec![1, 2, 4, 8], vec![1024]));
    let checksums = match cmd_scale(&scale) {
        Ok(out) => {
            let Detail::Scale(rows) = out.detail else { unreachable!() };
            rows.into_iter().map(|r| r.checksum).collect::<Vec<_>>()
        }
        Err(e) => {
            ok = false;
            vec![e.to_string()]
        }
    };
    ok &= checksums.windows(2).all(|w| w[0] == w[1]);
    verdict(
        5,
        ok,
        format!(
            "determinism: FCF sweep and solve bitwise equal for workers 1/2/4/8; scale checksum {}",
            &checksums[0][..16.min(checksums[0].len())]
        ),
    )
}

fn criterion_6() -> Verdict {
    let eps = 1e-6;
    let net = NetworkSpec::dense(4, 4, 10, 8, 0.25, Activation::Tanh)
        .build_random(6)
        .unwrap();
    let y = [0.4, -0.7, 0.2, 0.9];
    let label = 3;
    let loss = |n: &resnet_mg::ResidualNetwork| {
        let (states, _) = n.forward(&y).unwrap();
        loss_and_grad(n, &y, &states, label).unwrap().0
    };
    let (states, _) = net.forward(&y).unwrap();
    let (_, grad) = loss_and_grad(&net, &y, &states, label).unwrap();
    let mut worst = 0.0f64;
    for (k, &g) in grad.iter().enumerate() {
        let mut plus = net.clone();
        *plus.params_mut().nth(k).unwrap() += eps;
        let mut minus = net.clone();
        *minus.params_mut().nth(k).unwrap() -= eps;
        let fd = (loss(&plus) - loss(&minus)) / (2.0 * eps);
        worst = worst.max(relative_error(g, fd));
    }
    verdict(
        6,
        worst <= 1e-5,
        format!("gradient check: {} parameters, worst relative error {worst:.2e} <= 1e-5", grad.len()),
    )
}

/// `|a − b| / max(|a|, |b|)`, zero when both vanish.
fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

fn mnist_dir() -> &'static Path {
    // Tests run from the crate directory; the data lives at the workspace root.
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/mnist"))
}

fn mnist_config(mode: TrainMode) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    let d = mnist_dir();
    cfg.data.train_images = d.join("train-images-idx3-ubyte");
    cfg.data.train_labels = d.join("train-labels-idx1-ubyte");
    cfg.data.test_images = d.join("t10k-images-idx3-ubyte");
    cfg.data.test_labels = d.join("t10k-labels-idx1-ubyte");
    cfg.resolve(
        ExperimentKind::Train,
        &Overrides {
            mode: Some(mode),
            ..Overrides::default()
        },
    )
    .unwrap()
}

fn criterion_7() -> Verdict {
    let run = |mode| -> Result<f64, CliError> {
        let cfg = mnist_config(mode);
        assert_eq!((cfg.depths(), cfg.network.width, cfg.train.epochs), (vec![32], 16, 1));
        assert_eq!((cfg.data.train_samples, cfg.data.test_samples), (2000, 1000));
        let out = cmd_train(&cfg)?;
        let Detail::Train(stats) = out.detail else { unreachable!() };
        Ok(stats[0].top1_error)
    };
    let (result, t) = timed(|| Ok::<_, CliError>((run(TrainMode::Exact)?, run(TrainMode::Mg)?)));
    match result {
        Ok((exact, mg)) => {
            let gap = (mg - exact).abs();
            verdict(
                7,
                gap <= 0.02 && t < Duration::from_secs(600),
                format!(
                    "two-cycle training parity: top-1 error exact {exact:.3}, mg(2 cycles) {mg:.3}, gap {:.1} pp <= 2 pp, {:.1}s",
                    gap * 100.0,
                    t.as_secs_f64()
                ),
            )
        }
        Err(e) => verdict(7, false, format!("two-cycle training parity: {e} (see scripts/fetch_mnist.sh)")),
    }
}

fn criterion_8() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (net, f) = random_problem(&mut rng, 16, 1024, 2.0 / 1024.0);
    let time = |workers: usize| {
        let ex = LayerExecutor::new(workers).unwrap();
        let p = ex.partition(1024, 4).unwrap();
        let mut u = StateArray::replicate(f.layer(0), 1024);
        (0..7)
            .map(|_| {
                let start = Instant::now();
                for _ in 0..10 {
                    ex.parallel_f_relax(&net, &mut u, &f, &p).unwrap();
                }
                start.elapsed().as_secs_f64()
            })
            .fold(f64::INFINITY, f64::min)
    };
    let (one, eight) = (time(1), time(8));
    let cpus = std::thread::available_parallelism().map_or(1, |n| n.get());
    Verdict {
        id: 8,
        hard: false,
        passed: eight <= one,
        detail: format!(
            "parallel F-relaxation N=1024 c=4: 1 worker {:.3} ms, 8 workers {:.3} ms per 10 sweeps on {cpus} CPU(s) (soft)",
            one * 1e3,
            eight * 1e3
        ),
    }
}

fn criterion_9() -> Verdict {
    let d = mnist_dir();
    let full = load_mnist_idx(&d.join("train-images-idx3-ubyte"), &d.join("train-labels-idx1-ubyte"));
    let count = match &full {
        Ok(ds) => ds.len().to_string(),
        Err(e) => format!("error: {e}"),
    };
    let full_ok = matches!(&full, Ok(ds) if ds.len() == 60000 && ds.rows == 28 && ds.cols == 28);

    let mut bad_magic = encode_labels(&[1, 2, 3]);
    bad_magic[3] = 0x03;
    let magic = parse_labels(&bad_magic);
    let images = encode_images(28, 28, &[7u8; 2 * 784]);
    let truncated = parse_images(&images[..images.len() - 100]);
    let dir = tempfile::tempdir().unwrap();
    let (ip, lp) = (dir.path().join("img"), dir.path().join("lbl"));
    fs::write(&ip, &images[..1000]).unwrap();
    fs::write(&lp, encode_labels(&[0, 1])).unwrap();
    let truncated_file = load_mnist_idx(&ip, &lp);

    let magic_ok = matches!(magic, Err(Error::Parse { offset: 0, .. }));
    let trunc_ok = matches!(truncated, Err(Error::Parse { offset, .. }) if offset == images.len() as u64 - 100);
    let file_ok = matches!(&truncated_file, Err(Error::Parse { offset: 1000, .. }));
    let message = truncated_file.err().map(|e| e.to_string()).unwrap_or_default();
    verdict(
        9,
        full_ok && magic_ok && trunc_ok && file_ok && message.contains("1000"),
        format!("IDX parsing: full training set M={count}; wrong magic -> offset 0; truncated -> '{message}'"),
    )
}

#[test]
fn acceptance() {
    let criteria: [fn() -> Verdict; 9] = [
        criterion_1,
        criterion_2,
        criterion_3,
        criterion_4,
        criterion_5,
        criterion_6,
        criterion_7,
        criterion_8,
        criterion_9,
    ];
    let verdicts: Vec<Verdict> = criteria.iter().map(|c| c()).collect();
    for v in &verdicts {
        let status = match (v.passed, v.hard) {
            (true, _) => "PASS",
            (false, true) => "FAIL",
            (false, false) => "SOFT-MISS",
        };
        // Written to the raw handle so the verdicts show without --nocapture.
        writeln!(std::io::stderr(), "criterion {}: {status}  {}", v.id, v.detail).unwrap();
    }
    let failed: Vec<u8> = verdicts.iter().filter(|v| v.hard && !v.passed).map(|v| v.id).collect();
    assert!(failed.is_empty(), "hard criteria failed: {failed:?}");
}
