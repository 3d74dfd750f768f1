//! Acceptance suite. Prints one PASS/FAIL/SKIP line per criterion and exits
//! nonzero if any criterion fails.
//!
//! Criterion 8 runs only when `DSSFN_VOWEL_TRAIN` and `DSSFN_VOWEL_TEST`
//! point at the Vowel train/test CSVs.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use nalgebra::SymmetricEigen;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use dssfn::data::{
    load_csv, save_csv, synthetic_blobs, BlobSpec, CsvSchema, LabeledDataset, Normalization,
    NormalizationStats,
};
use dssfn::experiment::{run, ExperimentSpec};
use dssfn::model::{make_uq, make_vq, relu, sample_random_matrix, RandomDistribution, SsfnDims};
use dssfn::network::{
    circular_topology, comm_cost_admm, comm_ratio, consensus_average, d_max, mixing_matrix,
    CommLedger, Consensus, ConsensusMode,
};
use dssfn::solver::{project_frobenius, solve_layer_admm, AdmmConfig, LayerShard};
use dssfn::trainer::{
    evaluate, partition_dataset, train_centralized, train_decentralized, ConsensusSetting,
    TrainConfig, TrainOutcome,
};
use dssfn::Matrix;

enum Status {
    Pass,
    Fail,
    Skip,
}

struct Verdict {
    status: Status,
    detail: String,
}

impl Verdict {
    fn check(ok: bool, detail: String) -> Self {
        Self {
            status: if ok { Status::Pass } else { Status::Fail },
            detail,
        }
    }
}

// Oracles ----------------------------------------------------------------

/// Constrained least squares `min ||T - O Y||_F s.t. ||O||_F <= eps` from the
/// eigendecomposition of `Y Y^T`, with bisection on the multiplier.
fn oracle_constrained_ls(t: &Matrix, y: &Matrix, eps: f64) -> Matrix {
    let gram = y * y.transpose();
    let eig = SymmetricEigen::new(gram);
    // Coordinates of T Y^T in the eigenbasis.
    let b = (t * y.transpose()) * &eig.eigenvectors;
    let top = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let floor = top * 1e-13 * eig.eigenvalues.len() as f64;
    let solve = |lambda: f64| -> Matrix {
        let mut c = b.clone();
        for (j, &e) in eig.eigenvalues.iter().enumerate() {
            let d = e + lambda;
            let inv = if lambda == 0.0 && e <= floor {
                0.0
            } else {
                1.0 / d
            };
            c.column_mut(j).scale_mut(inv);
        }
        c * eig.eigenvectors.transpose()
    };
    let free = solve(0.0);
    if free.norm() <= eps {
        return free;
    }
    let mut hi = 1.0;
    while solve(hi).norm() > eps {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if solve(mid).norm() > eps {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * hi {
            break;
        }
    }
    solve(hi)
}

fn stack_weight(o: &Matrix, r: &Matrix) -> Matrix {
    let (q, w) = (o.nrows(), o.ncols());
    let mut full = Matrix::zeros(2 * q + r.nrows(), w);
    full.rows_mut(0, q).copy_from(o);
    full.rows_mut(q, q).copy_from(&(-o));
    full.rows_mut(2 * q, r.nrows()).copy_from(r);
    full
}

/// Centralized layer growth driven by `oracle_constrained_ls`.
struct OracleChain {
    solutions: Vec<Matrix>,
    weights: Vec<Matrix>,
}

impl OracleChain {
    fn train(dims: SsfnDims, eps: f64, seed: u64, data: &LabeledDataset) -> Self {
        let mut y = data.features().clone();
        let mut solutions = Vec::new();
        let mut weights = Vec::new();
        for layer in 0..=dims.layers {
            let o = oracle_constrained_ls(data.targets(), &y, eps);
            if layer < dims.layers {
                let r = sample_random_matrix(
                    dims.hidden - 2 * dims.classes,
                    y.nrows(),
                    seed,
                    layer + 1,
                    RandomDistribution::ScaledNormal,
                );
                let w = stack_weight(&o, &r);
                y = relu(&(&w * &y));
                weights.push(w);
            }
            solutions.push(o);
        }
        Self { solutions, weights }
    }

    fn accuracy(&self, data: &LabeledDataset) -> f64 {
        let mut y = data.features().clone();
        for w in &self.weights {
            y = relu(&(w * &y));
        }
        let scores = self.solutions.last().unwrap() * y;
        let hits = (0..scores.ncols())
            .filter(|&j| {
                let col = scores.column(j);
                let best = (0..col.len()).fold(0, |b, i| if col[i] > col[b] { i } else { b });
                best == data.labels()[j]
            })
            .count();
        100.0 * hits as f64 / data.len() as f64
    }
}

fn rel_gap(a: &Matrix, b: &Matrix) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}

/// Recomputes every layer's objective from the network weights.
fn recomputed_objectives(outcome: &TrainOutcome, data: &LabeledDataset) -> Vec<f64> {
    let mut y = data.features().clone();
    let mut out = Vec::new();
    for (l, o) in outcome.layer_solutions().iter().enumerate() {
        out.push((data.targets() - o * &y).norm_squared());
        if let Some(w) = outcome.network.weights().get(l) {
            y = relu(&(w.full() * &y));
        }
    }
    out
}

fn circular_distance(i: usize, j: usize, m: usize) -> usize {
    let d = i.abs_diff(j);
    d.min(m - d)
}

/// Equal-weight mixing matrix of a ring, built from distances.
fn oracle_ring_mixing(m: usize, d: usize) -> Matrix {
    let deg = (2 * d + 1).min(m);
    Matrix::from_fn(m, m, |i, j| {
        if circular_distance(i, j, m) <= d {
            1.0 / deg as f64
        } else {
            0.0
        }
    })
}

/// Rounds of `X <- H X` until every row is within `tau` of the row mean.
fn oracle_gossip_rounds(h: &Matrix, x0: &Matrix, tau: f64) -> (usize, Matrix) {
    let mut x = x0.clone();
    let mut rounds = 0;
    loop {
        let mean = x.row_mean();
        let dev = (0..x.nrows())
            .map(|i| (x.row(i) - &mean).norm())
            .fold(0.0, f64::max);
        if dev <= tau {
            return (rounds, x);
        }
        x = h * x;
        rounds += 1;
    }
}

// Instances --------------------------------------------------------------

const BLOB_TRAIN: usize = 400;
const BLOB_TEST: usize = 200;

fn blob_split(seed: u64) -> (LabeledDataset, LabeledDataset) {
    let all = synthetic_blobs(&BlobSpec {
        input_dim: 5,
        classes: 3,
        samples: BLOB_TRAIN + BLOB_TEST,
        separation: 3.0,
        seed,
    })
    .unwrap();
    let idx: Vec<usize> = (0..all.len()).collect();
    let (train, test) = (
        all.select(&idx[..BLOB_TRAIN]),
        all.select(&idx[BLOB_TRAIN..]),
    );
    let stats = NormalizationStats::fit(Normalization::ZScorePerDim, train.features());
    (
        stats.apply_dataset(&train).unwrap(),
        stats.apply_dataset(&test).unwrap(),
    )
}

fn blob_config(workers: usize, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::new(SsfnDims::with_extra_neurons(5, 3, 20, 3).unwrap());
    cfg.workers = workers;
    cfg.consensus = ConsensusSetting::Exact;
    cfg.admm_iterations = 300;
    cfg.mu0 = 1e-2;
    cfg.mu_layers = 1e-2;
    cfg.seed = seed;
    cfg
}

const WORKER_COUNTS: [usize; 4] = [1, 2, 4, 8];

// Criteria ---------------------------------------------------------------

fn centralized_equivalence() -> Verdict {
    let start = Instant::now();
    let (train, test) = blob_split(0);
    let base = blob_config(1, 0);
    let chain = OracleChain::train(base.dims, base.eps_bound, base.seed, &train);
    let oracle_acc = chain.accuracy(&test);

    let cen = train_centralized(&base, &train).unwrap();
    let cen_gap = cen
        .layer_solutions()
        .iter()
        .zip(&chain.solutions)
        .map(|(a, b)| rel_gap(a, b))
        .fold(0.0, f64::max);

    let mut ok = cen_gap <= 1e-4;
    let mut parts = vec![format!("library centralized vs oracle {cen_gap:.1e}")];
    for m in WORKER_COUNTS {
        let cfg = blob_config(m, 0);
        let shards = partition_dataset(&train, m, cfg.seed).unwrap();
        let dec = train_decentralized(&cfg, &shards).unwrap();
        let gaps: Vec<f64> = dec
            .layer_solutions()
            .iter()
            .zip(&chain.solutions)
            .map(|(a, b)| rel_gap(a, b))
            .collect();
        let worst = gaps.iter().cloned().fold(0.0, f64::max);
        let acc = evaluate(&dec.network, &test).unwrap().accuracy;
        ok &= worst <= 1e-4 && acc == oracle_acc;
        parts.push(format!(
            "M={m} gaps [{}] test {acc:.2}% vs {oracle_acc:.2}%",
            gaps.iter()
                .map(|g| format!("{g:.1e}"))
                .collect::<Vec<_>>()
                .join(", ")
        ));
    }
    let elapsed = start.elapsed();
    ok &= elapsed < Duration::from_secs(30);
    parts.push(format!("{:.2}s", elapsed.as_secs_f64()));
    Verdict::check(ok, parts.join("; "))
}

fn monotone_layer_cost() -> Verdict {
    let mut ok = true;
    let mut worst_rise = f64::NEG_INFINITY;
    let mut failures = Vec::new();
    let mut check = |label: String, outcome: &TrainOutcome, data: &LabeledDataset| {
        let objs = recomputed_objectives(outcome, data);
        for l in 1..objs.len() {
            let rise = objs[l] - objs[l - 1];
            worst_rise = worst_rise.max(rise);
            if rise > 1e-9 {
                ok = false;
                failures.push(format!(
                    "{label} layer {l}: {:.6} > {:.6}",
                    objs[l],
                    objs[l - 1]
                ));
            }
        }
    };
    let dir = tempfile::tempdir().unwrap();
    let mut runs = 0;
    for seed in 0..5u64 {
        let (train, _) = blob_split(seed);
        check(
            format!("seed {seed} centralized"),
            &train_centralized(&blob_config(1, seed), &train).unwrap(),
            &train,
        );
        runs += 1;
        for m in WORKER_COUNTS {
            let cfg = blob_config(m, seed);
            let shards = partition_dataset(&train, m, seed).unwrap();
            check(
                format!("seed {seed} M={m}"),
                &train_decentralized(&cfg, &shards).unwrap(),
                &train,
            );
            runs += 1;
        }
        // The same instance after a CSV round trip.
        let path = dir.path().join(format!("blobs{seed}.csv"));
        save_csv(&train, &path, "label").unwrap();
        let loaded = load_csv(&path, &CsvSchema::new("label", 3)).unwrap();
        let cfg = blob_config(4, seed);
        let shards = partition_dataset(&loaded, 4, seed).unwrap();
        check(
            format!("seed {seed} csv M=4"),
            &train_decentralized(&cfg, &shards).unwrap(),
            &loaded,
        );
        runs += 1;
    }
    let mut detail = format!("{runs} runs, largest layer-to-layer change {worst_rise:+.3e}");
    if !failures.is_empty() {
        detail.push_str(&format!(
            "; {} increases, e.g. {}",
            failures.len(),
            failures[..failures.len().min(3)].join(", ")
        ));
    }
    Verdict::check(ok, detail)
}

fn projection_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut ok = true;
    let (mut inside, mut outside) = (0, 0);
    let mut max_dir_err: f64 = 0.0;
    for _ in 0..1000 {
        let (r, c) = (rng.random_range(1..12), rng.random_range(1..30));
        let scale = 10f64.powf(rng.random_range(-3.0..3.0));
        let z = Matrix::from_fn(r, c, |_, _| scale * rng.sample::<f64, _>(StandardNormal));
        let eps = 2.0 * rng.random_range(1..12) as f64;
        let p = project_frobenius(&z, eps);
        ok &= p.norm() <= eps;
        ok &= project_frobenius(&p, eps) == p;
        if z.norm() <= eps {
            inside += 1;
            ok &= p == z;
        } else {
            outside += 1;
            ok &= p != z;
            let expected = &z * (eps / z.norm());
            max_dir_err = max_dir_err.max((&p - &expected).norm() / eps);
        }
    }
    ok &= max_dir_err <= 1e-12;
    Verdict::check(
        ok && inside > 0 && outside > 0,
        format!("{inside} inside, {outside} outside, radial error {max_dir_err:.1e}"),
    )
}

fn consensus_correctness() -> Verdict {
    let start = Instant::now();
    let tau = 1e-8;
    let mut ok = true;
    let mut parts = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for m in [10usize, 20] {
        let values: Vec<Matrix> = (0..m)
            .map(|_| Matrix::from_fn(3, 5, |_, _| rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let stacked = Matrix::from_fn(m, 15, |i, k| values[i][k]);
        let true_mean = stacked.row_mean();
        let mut rounds = Vec::new();
        for d in 1..=d_max(m) {
            let h = mixing_matrix(&circular_topology(m, d).unwrap()).unwrap();
            let mut ledger = CommLedger::new();
            let out = consensus_average(
                &values,
                &h,
                ConsensusMode::Tolerance {
                    tau,
                    round_cap: 100_000,
                },
                &mut ledger,
            )
            .unwrap();
            let (expected_rounds, _) =
                oracle_gossip_rounds(&oracle_ring_mixing(m, d), &stacked, tau);
            let err = out
                .estimates
                .iter()
                .map(|e| (Matrix::from_row_slice(1, 15, e.as_slice()) - &true_mean).norm())
                .fold(0.0, f64::max);
            ok &= err <= tau && out.rounds == expected_rounds;
            if out.rounds != expected_rounds {
                parts.push(format!(
                    "M={m} d={d}: {} rounds, oracle {expected_rounds}",
                    out.rounds
                ));
            }
            rounds.push(out.rounds);
        }
        ok &= rounds.windows(2).all(|w| w[1] <= w[0]);
        parts.push(format!("M={m} rounds {rounds:?}"));
    }
    let elapsed = start.elapsed();
    ok &= elapsed < Duration::from_secs(10);
    parts.push(format!("{:.2}s", elapsed.as_secs_f64()));
    Verdict::check(ok, parts.join("; "))
}

fn mixing_validity() -> Verdict {
    let mut ok = true;
    let mut checked = 0;
    let mut worst_sum: f64 = 0.0;
    for m in 3..=30 {
        for d in 1..=d_max(m) {
            let h = mixing_matrix(&circular_topology(m, d).unwrap()).unwrap();
            let h = h.dense();
            ok &= *h == h.transpose();
            for i in 0..m {
                worst_sum = worst_sum
                    .max((h.row(i).sum() - 1.0).abs())
                    .max((h.column(i).sum() - 1.0).abs());
                for j in 0..m {
                    ok &= (h[(i, j)] > 0.0) == (circular_distance(i, j, m) <= d);
                    ok &= h[(i, j)] >= 0.0;
                }
            }
            checked += 1;
        }
    }
    ok &= worst_sum <= 1e-12;
    Verdict::check(
        ok,
        format!("{checked} matrices, worst row/column sum error {worst_sum:.1e}"),
    )
}

fn communication_cost() -> Verdict {
    let mut ok = true;
    let mut parts = Vec::new();

    // One layer above the input: Q = 3, n_{l-1} = 26.
    let (q, n_prev, m, d, b, k) = (3usize, 26usize, 4usize, 1usize, 3usize, 7usize);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let shards: Vec<(Matrix, Matrix)> = (0..m)
        .map(|_| {
            let y = Matrix::from_fn(n_prev, 40, |_, _| rng.sample::<f64, _>(StandardNormal));
            let t = Matrix::from_fn(q, 40, |_, _| rng.sample::<f64, _>(StandardNormal));
            (t, y)
        })
        .collect();
    let views: Vec<LayerShard<'_>> = shards
        .iter()
        .map(|(t, y)| LayerShard::new(t, y).unwrap())
        .collect();
    let mixing = mixing_matrix(&circular_topology(m, d).unwrap()).unwrap();
    let edges = mixing.directed_edges() as u64;
    let consensus = Consensus::Gossip {
        mixing,
        mode: ConsensusMode::FixedRounds(b),
    };
    let mut ledger = CommLedger::new();
    ledger.begin_layer(1);
    solve_layer_admm(
        &views,
        &AdmmConfig::new(1.0, k, 6.0).unwrap(),
        &consensus,
        &mut ledger,
    )
    .unwrap();
    let expected = (q * n_prev * b * k) as u64;
    ok &= ledger.payload_scalars == expected;
    ok &= ledger.payload_scalars as u128
        == comm_cost_admm(q as u64, n_prev as u64, b as u64, k as u64);
    ok &= ledger.scalars_exchanged == expected * edges;
    parts.push(format!(
        "ledger {} = Q n B K = {expected}, over {edges} links {}",
        ledger.payload_scalars, ledger.scalars_exchanged
    ));

    let eta = comm_ratio(1022, 10_000, 11, 100);
    let eta_exact = 1022.0 * 10_000.0 / 1100.0;
    let rel = (eta - eta_exact).abs() / eta_exact;
    ok &= rel <= 1e-9;
    parts.push(format!("eta(1022, 10000, 11, 100) = {eta:.6}"));

    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut shipped = Vec::new();
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let spec = ExperimentSpec::load(Some(&path), None, &[]).unwrap();
            let eta = spec.comm_ratio();
            ok &= eta > 1.0;
            shipped.push(format!(
                "{} {eta:.1}",
                path.file_stem().unwrap().to_string_lossy()
            ));
        }
    }
    shipped.sort();
    ok &= !shipped.is_empty();
    parts.push(format!("shipped configs: {}", shipped.join(", ")));
    Verdict::check(ok, parts.join("; "))
}

fn lossless_flow() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let q = rng.random_range(1..=20);
        let t = Matrix::from_fn(q, 1, |_, _| {
            10f64.powf(rng.random_range(-6.0..6.0)) * rng.sample::<f64, _>(StandardNormal)
        });
        let back = make_uq(q).unwrap() * relu(&(make_vq(q).unwrap() * &t));
        worst = worst.max((back - &t).amax() / t.amax().max(f64::MIN_POSITIVE));
    }
    Verdict::check(
        worst <= f64::EPSILON,
        format!("1000 vectors, worst relative error {worst:.1e}"),
    )
}

fn vowel_reproduction() -> Verdict {
    let (Ok(train), Ok(test)) = (
        std::env::var("DSSFN_VOWEL_TRAIN"),
        std::env::var("DSSFN_VOWEL_TEST"),
    ) else {
        return Verdict {
            status: Status::Skip,
            detail: "set DSSFN_VOWEL_TRAIN and DSSFN_VOWEL_TEST to run".into(),
        };
    };
    let config = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/vowel.toml");
    let spec = ExperimentSpec::load(
        Some(&config),
        None,
        &[format!("train_csv={train:?}"), format!("test_csv={test:?}")],
    )
    .unwrap();
    let out = tempfile::tempdir().unwrap();
    let report = run(&spec, out.path()).unwrap();
    let test_acc: Vec<f64> = report.rows.iter().filter_map(|r| r.test_accuracy).collect();
    let mean = test_acc.iter().sum::<f64>() / test_acc.len() as f64;
    let train_ok = report.rows.iter().all(|r| r.train_accuracy == 100.0);
    Verdict::check(
        (mean - 59.2).abs() <= 3.0 && train_ok,
        format!(
            "test {mean:.2}% over {} seeds, train 100% on all: {train_ok}",
            test_acc.len()
        ),
    )
}

type Criterion = (&'static str, fn() -> Verdict);

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("1 centralized equivalence", centralized_equivalence),
        ("2 monotone layer cost", monotone_layer_cost),
        ("3 projection oracle", projection_oracle),
        ("4 consensus correctness", consensus_correctness),
        ("5 mixing-matrix validity", mixing_validity),
        ("6 communication cost", communication_cost),
        ("7 lossless flow", lossless_flow),
        ("8 vowel reproduction", vowel_reproduction),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let verdict = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| Verdict {
            status: Status::Fail,
            detail: format!(
                "panicked: {}",
                e.downcast_ref::<String>()
                    .map(String::as_str)
                    .or_else(|| e.downcast_ref::<&str>().copied())
                    .unwrap_or("?")
            ),
        });
        let tag = match verdict.status {
            Status::Pass => "PASS",
            Status::Fail => {
                failed += 1;
                "FAIL"
            }
            Status::Skip => "SKIP",
        };
        println!("{tag} {name}: {}", verdict.detail);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criterion(s) failed");
        ExitCode::FAILURE
    }
}
