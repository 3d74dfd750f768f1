//! Progressive layer growth. Layer 0 fits an output matrix on the raw
//! inputs; each solved `O_l*` becomes the learned block of `W_{l+1}`, and
//! the final solve sets the network output.

use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::{
    sample_random_matrix, Matrix, RandomDistribution, SsfnDims, SsfnNetwork, WeightMatrix,
};
use crate::network::{
    circular_topology, mixing_matrix, CommLedger, Consensus, ConsensusMode, MixingMatrix,
};
use crate::solver::{centralized_constrained_ls, solve_layer_admm, AdmmConfig, LayerShard};

/// Error floor reported for a zero residual.
pub const ERROR_DB_FLOOR: f64 = -100.0;

#[derive(Debug, Clone, PartialEq)]
pub enum TopologySpec {
    Circular { degree: usize },
    Explicit(MixingMatrix),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ConsensusSetting {
    Exact,
    Gossip(ConsensusMode),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub dims: SsfnDims,
    pub workers: usize,
    pub topology: TopologySpec,
    /// ADMM iterations per layer.
    pub admm_iterations: usize,
    pub consensus: ConsensusSetting,
    /// Penalty for layer 0.
    pub mu0: f64,
    /// Penalty for layers 1..=L.
    pub mu_layers: f64,
    /// Frobenius-norm bound on every `O_l`.
    pub eps_bound: f64,
    pub seed: u64,
    pub random: RandomDistribution,
}

impl TrainConfig {
    /// Defaults: one worker, exact consensus, `K = 100`, `mu = 1`,
    /// `eps = 2Q`.
    pub fn new(dims: SsfnDims) -> Self {
        Self {
            dims,
            workers: 1,
            topology: TopologySpec::Circular { degree: 1 },
            admm_iterations: 100,
            consensus: ConsensusSetting::Exact,
            mu0: 1.0,
            mu_layers: 1.0,
            eps_bound: 2.0 * dims.classes as f64,
            seed: 0,
            random: RandomDistribution::ScaledNormal,
        }
    }

    pub fn mu_for_layer(&self, layer: usize) -> f64 {
        if layer == 0 {
            self.mu0
        } else {
            self.mu_layers
        }
    }

    /// Mixing matrix for the configured topology.
    pub fn mixing(&self) -> Result<MixingMatrix> {
        match &self.topology {
            TopologySpec::Explicit(h) => Ok(h.clone()),
            TopologySpec::Circular { .. } if self.workers == 1 => {
                MixingMatrix::from_dense(Matrix::from_element(1, 1, 1.0))
            }
            TopologySpec::Circular { degree } => {
                mixing_matrix(&circular_topology(self.workers, *degree)?)
            }
        }
    }

    pub fn consensus_backend(&self) -> Result<Consensus> {
        match self.consensus {
            ConsensusSetting::Exact => Ok(Consensus::Exact),
            ConsensusSetting::Gossip(mode) => {
                let mixing = self.mixing()?;
                if mixing.node_count() != self.workers {
                    return Err(Error::Dimension(format!(
                        "mixing matrix has {} nodes for {} workers",
                        mixing.node_count(),
                        self.workers
                    )));
                }
                Ok(Consensus::Gossip { mixing, mode })
            }
        }
    }

    fn check(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(Error::InvalidParameter("need at least one worker".into()));
        }
        AdmmConfig::new(self.mu0, self.admm_iterations, self.eps_bound)?;
        AdmmConfig::new(self.mu_layers, self.admm_iterations, self.eps_bound)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerReport {
    /// 0 for the solve on raw inputs, `L` for the output solve.
    pub layer: usize,
    /// Objective of the solution actually used: `sum_m ||T_m - O_m Y_m||^2`.
    pub objective: f64,
    pub objective_trace: Vec<f64>,
    pub primal_residual_trace: Vec<f64>,
    pub comm_rounds: u64,
    pub wall_time: Duration,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Worker 0's network.
    pub network: SsfnNetwork,
    pub reports: Vec<LayerReport>,
    /// `O_l*` per worker, indexed `[worker][layer]`, `L + 1` layers each.
    pub worker_solutions: Vec<Vec<Matrix>>,
    pub ledger: CommLedger,
    pub wall_time: Duration,
    dims: SsfnDims,
    seed: u64,
    random: RandomDistribution,
}

impl TrainOutcome {
    /// Worker 0's `O_l*` for every layer.
    pub fn layer_solutions(&self) -> &[Matrix] {
        &self.worker_solutions[0]
    }

    /// Reassembles worker `m`'s network from its solutions and the shared
    /// random blocks.
    pub fn worker_network(&self, m: usize) -> Result<SsfnNetwork> {
        let solutions = self
            .worker_solutions
            .get(m)
            .ok_or_else(|| Error::InvalidParameter(format!("no worker {m}")))?;
        let mut net = SsfnNetwork::new(self.dims);
        for (l, o) in solutions[..self.dims.layers].iter().enumerate() {
            let r = sample_random_matrix(
                self.dims.random_rows(),
                o.ncols(),
                self.seed,
                l + 1,
                self.random,
            );
            net.push_layer(WeightMatrix::build(o, &r)?)?;
        }
        net.set_output(solutions[self.dims.layers].clone())?;
        Ok(net)
    }
}

struct LayerSolution {
    worker: Vec<Matrix>,
    objective_trace: Vec<f64>,
    residual_trace: Vec<f64>,
    rounds: u64,
}

fn check_shard(dims: &SsfnDims, shard: &LabeledDataset, m: usize) -> Result<()> {
    if shard.input_dim() != dims.input || shard.classes() != dims.classes {
        return Err(Error::Dimension(format!(
            "shard {m} has P = {}, Q = {}; network expects P = {}, Q = {}",
            shard.input_dim(),
            shard.classes(),
            dims.input,
            dims.classes
        )));
    }
    if shard.is_empty() {
        return Err(Error::Data(format!("shard {m} is empty")));
    }
    Ok(())
}

fn grow_layers<F>(
    cfg: &TrainConfig,
    shards: &[LabeledDataset],
    mut solve: F,
) -> Result<TrainOutcome>
where
    F: FnMut(usize, &[LayerShard<'_>], &mut CommLedger) -> Result<LayerSolution>,
{
    let start = Instant::now();
    let dims = cfg.dims;
    for (m, s) in shards.iter().enumerate() {
        check_shard(&dims, s, m)?;
    }
    let mut features: Vec<Matrix> = shards.iter().map(|s| s.features().clone()).collect();
    let mut network = SsfnNetwork::new(dims);
    let mut worker_solutions = vec![Vec::with_capacity(dims.layers + 1); shards.len()];
    let mut reports = Vec::with_capacity(dims.layers + 1);
    let mut ledger = CommLedger::new();

    for layer in 0..=dims.layers {
        let layer_start = Instant::now();
        ledger.begin_layer(layer);
        let layer_shards = shards
            .iter()
            .zip(&features)
            .map(|(s, y)| LayerShard::new(s.targets(), y))
            .collect::<Result<Vec<_>>>()?;
        let sol = solve(layer, &layer_shards, &mut ledger)?;
        let objective = layer_shards
            .iter()
            .zip(&sol.worker)
            .map(|(s, o)| (s.targets - o * s.features).norm_squared())
            .sum();
        reports.push(LayerReport {
            layer,
            objective,
            objective_trace: sol.objective_trace,
            primal_residual_trace: sol.residual_trace,
            comm_rounds: sol.rounds,
            wall_time: Duration::ZERO,
        });
        drop(layer_shards);

        if layer < dims.layers {
            let random = sample_random_matrix(
                dims.random_rows(),
                features[0].nrows(),
                cfg.seed,
                layer + 1,
                cfg.random,
            );
            for (m, (y, o)) in features.iter_mut().zip(&sol.worker).enumerate() {
                let w = WeightMatrix::build(o, &random)?;
                *y = network.step(&w, y);
                if m == 0 {
                    network.push_layer(w)?;
                }
            }
        } else {
            network.set_output(sol.worker[0].clone())?;
        }
        for (acc, o) in worker_solutions.iter_mut().zip(sol.worker) {
            acc.push(o);
        }
        reports[layer].wall_time = layer_start.elapsed();
        log::debug!("layer {layer}: objective {:.6e}", reports[layer].objective);
    }

    Ok(TrainOutcome {
        network,
        reports,
        worker_solutions,
        ledger,
        wall_time: start.elapsed(),
        dims,
        seed: cfg.seed,
        random: cfg.random,
    })
}

/// Decentralized training: one consensus-ADMM solve per layer over the
/// workers' shards.
pub fn train_decentralized(cfg: &TrainConfig, shards: &[LabeledDataset]) -> Result<TrainOutcome> {
    cfg.check()?;
    if shards.len() != cfg.workers {
        return Err(Error::InvalidParameter(format!(
            "{} shards for {} workers",
            shards.len(),
            cfg.workers
        )));
    }
    let consensus = cfg.consensus_backend()?;
    grow_layers(cfg, shards, |layer, layer_shards, ledger| {
        let admm = AdmmConfig::new(cfg.mu_for_layer(layer), cfg.admm_iterations, cfg.eps_bound)?;
        let sol =
            solve_layer_admm(layer_shards, &admm, &consensus, ledger).map_err(|e| match e {
                Error::NonFinite(msg) => Error::NonFinite(format!("layer {layer}: {msg}")),
                other => other,
            })?;
        Ok(LayerSolution {
            worker: sol.worker_z,
            objective_trace: sol.objective_trace,
            residual_trace: sol.residual_trace,
            rounds: sol.consensus_rounds as u64,
        })
    })
}

/// Centralized baseline: exact constrained least squares per layer on the
/// whole dataset. Reports carry a single trace entry per layer.
pub fn train_centralized(cfg: &TrainConfig, data: &LabeledDataset) -> Result<TrainOutcome> {
    cfg.check()?;
    grow_layers(cfg, std::slice::from_ref(data), |_, layer_shards, _| {
        let shard = layer_shards[0];
        let sol = centralized_constrained_ls(shard.targets, shard.features, cfg.eps_bound)?;
        let objective = (shard.targets - &sol.o * shard.features).norm_squared();
        Ok(LayerSolution {
            worker: vec![sol.o],
            objective_trace: vec![objective],
            residual_trace: vec![0.0],
            rounds: 0,
        })
    })
}

/// Random permutation by `seed`, then a contiguous split. The first
/// `J mod M` shards get one extra sample.
pub fn partition_indices(samples: usize, workers: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if workers == 0 {
        return Err(Error::InvalidParameter(
            "cannot split data over zero workers".into(),
        ));
    }
    if samples < workers {
        return Err(Error::Data(format!(
            "{samples} samples cannot fill {workers} non-empty shards"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    let mut perm: Vec<usize> = (0..samples).collect();
    perm.shuffle(&mut rng);
    let base = samples / workers;
    let extra = samples % workers;
    let mut out = Vec::with_capacity(workers);
    let mut start = 0;
    for m in 0..workers {
        let len = base + usize::from(m < extra);
        out.push(perm[start..start + len].to_vec());
        start += len;
    }
    Ok(out)
}

pub fn partition_dataset(
    data: &LabeledDataset,
    workers: usize,
    seed: u64,
) -> Result<Vec<LabeledDataset>> {
    Ok(partition_indices(data.len(), workers, seed)?
        .iter()
        .map(|idx| data.select(idx))
        .collect())
}

/// Metrics of a network on one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// Percentage of argmax matches.
    pub accuracy: f64,
    /// `10 log10(sum ||t - t_hat||^2 / sum ||t||^2)`, floored at -100 dB.
    pub error_db: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

pub fn evaluate(net: &SsfnNetwork, data: &LabeledDataset) -> Result<Evaluation> {
    let pred = net.predict(data.features())?;
    let q = data.classes();
    let mut confusion = vec![vec![0; q]; q];
    let mut correct = 0;
    for (&truth, &guess) in data.labels().iter().zip(&pred.labels) {
        confusion[truth][guess] += 1;
        correct += usize::from(truth == guess);
    }
    let accuracy = if data.is_empty() {
        0.0
    } else {
        100.0 * correct as f64 / data.len() as f64
    };
    let residual = (data.targets() - &pred.scores).norm_squared();
    let energy = data.targets().norm_squared();
    let error_db = if residual == 0.0 {
        ERROR_DB_FLOOR
    } else {
        (10.0 * (residual / energy).log10()).max(ERROR_DB_FLOOR)
    };
    Ok(Evaluation {
        accuracy,
        error_db,
        confusion,
    })
}

/// Train and test metrics of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub train_error_db: f64,
    pub train_confusion: Vec<Vec<usize>>,
    pub test_confusion: Vec<Vec<usize>>,
}

impl EvalReport {
    pub fn new(net: &SsfnNetwork, train: &LabeledDataset, test: &LabeledDataset) -> Result<Self> {
        let tr = evaluate(net, train)?;
        let te = evaluate(net, test)?;
        Ok(Self {
            train_accuracy: tr.accuracy,
            test_accuracy: te.accuracy,
            train_error_db: tr.error_db,
            train_confusion: tr.confusion,
            test_confusion: te.confusion,
        })
    }
}

/// `||a - b||_F / ||b||_F`, or the absolute gap when `b = 0`.
pub fn relative_gap(a: &Matrix, b: &Matrix) -> f64 {
    let denom = b.norm();
    let diff = (a - b).norm();
    if denom > 0.0 {
        diff / denom
    } else {
        diff
    }
}

/// Largest per-layer relative gap between two runs' solutions.
pub fn max_layer_gap(a: &TrainOutcome, b: &TrainOutcome) -> f64 {
    a.layer_solutions()
        .iter()
        .zip(b.layer_solutions())
        .map(|(x, y)| relative_gap(x, y))
        .fold(0.0, f64::max)
}
