//! Synchronous communication graph: circular topologies, equal-weight
//! doubly-stochastic mixing, gossip averaging and traffic accounting.

use std::collections::{BTreeSet, VecDeque};
use std::io::{Read, Write};

use nalgebra::SymmetricEigen;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::Matrix;

/// Row and column sums of a mixing matrix must be 1 within this.
pub const STOCHASTIC_TOL: f64 = 1e-12;

pub const DEFAULT_TAU: f64 = 1e-8;
pub const DEFAULT_ROUND_CAP: usize = 100_000;

/// Largest meaningful degree of a circular topology on `m` nodes.
pub fn d_max(m: usize) -> usize {
    m.saturating_sub(1).div_ceil(2)
}

/// Undirected graph where every node neighbors itself.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    neighbors: Vec<BTreeSet<usize>>,
    degree: Option<usize>,
}

impl Topology {
    /// Builds a topology from neighbor sets, adding self-loops and checking
    /// symmetry and connectivity.
    pub fn from_neighbor_sets(mut neighbors: Vec<BTreeSet<usize>>) -> Result<Self> {
        let m = neighbors.len();
        if m == 0 {
            return Err(Error::Topology("topology has no nodes".into()));
        }
        for (i, set) in neighbors.iter_mut().enumerate() {
            if let Some(bad) = set.iter().find(|&&j| j >= m) {
                return Err(Error::Topology(format!(
                    "node {i} lists unknown neighbor {bad}"
                )));
            }
            set.insert(i);
        }
        let topo = Self {
            neighbors,
            degree: None,
        };
        for i in 0..m {
            for &j in &topo.neighbors[i] {
                if !topo.neighbors[j].contains(&i) {
                    return Err(Error::Topology(format!(
                        "edge {i} -> {j} has no reverse edge"
                    )));
                }
            }
        }
        if !topo.is_connected() {
            return Err(Error::Topology("graph is not connected".into()));
        }
        Ok(topo)
    }

    pub fn node_count(&self) -> usize {
        self.neighbors.len()
    }

    pub fn degree(&self) -> Option<usize> {
        self.degree
    }

    /// `N_i`, including `i`.
    pub fn neighbors(&self, i: usize) -> &BTreeSet<usize> {
        &self.neighbors[i]
    }

    /// Number of ordered pairs `(i, j)` with `j` in `N_i` and `j != i`.
    pub fn directed_edges(&self) -> usize {
        self.neighbors.iter().map(|s| s.len() - 1).sum()
    }

    pub fn is_connected(&self) -> bool {
        let m = self.neighbors.len();
        let mut seen = vec![false; m];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        while let Some(i) = queue.pop_front() {
            for &j in &self.neighbors[i] {
                if !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    /// Adjacency dump: header `node,neighbor`, one row per member of `N_i`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["node", "neighbor"])?;
        for (i, set) in self.neighbors.iter().enumerate() {
            for j in set {
                w.write_record([i.to_string(), j.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Ring of `m` nodes, each linked to its `d` nearest nodes on either side.
/// At `d = d_max(m)` the graph is complete.
pub fn circular_topology(m: usize, d: usize) -> Result<Topology> {
    if m < 2 {
        return Err(Error::Topology(format!(
            "circular topology needs M >= 2, got {m}"
        )));
    }
    let max = d_max(m);
    if d == 0 || d > max {
        return Err(Error::Topology(format!(
            "degree {d} out of range 1..={max} (d_max for M = {m})"
        )));
    }
    let neighbors = (0..m)
        .map(|i| {
            let mut set = BTreeSet::new();
            set.insert(i);
            for k in 1..=d {
                set.insert((i + k) % m);
                set.insert((i + m - k) % m);
            }
            set
        })
        .collect();
    let mut topo = Topology::from_neighbor_sets(neighbors)?;
    topo.degree = Some(d);
    Ok(topo)
}

/// Symmetric doubly-stochastic matrix with a sparse neighbor view for
/// gossip rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct MixingMatrix {
    h: Matrix,
    weights: Vec<Vec<(usize, f64)>>,
}

impl MixingMatrix {
    /// Validates and wraps an explicit matrix.
    pub fn from_dense(h: Matrix) -> Result<Self> {
        let m = h.nrows();
        if m == 0 || h.ncols() != m {
            return Err(Error::Topology(format!(
                "mixing matrix must be square, got {:?}",
                h.shape()
            )));
        }
        let mut problems = Vec::new();
        for i in 0..m {
            for j in 0..m {
                let v = h[(i, j)];
                if !v.is_finite() || v < 0.0 {
                    problems.push(format!("h[{i},{j}] = {v} is not a nonnegative number"));
                }
                if v != h[(j, i)] {
                    problems.push(format!("h[{i},{j}] != h[{j},{i}]"));
                }
            }
            if h[(i, i)] <= 0.0 {
                problems.push(format!("node {i} has no self weight"));
            }
            let row: f64 = h.row(i).iter().sum();
            if (row - 1.0).abs() > STOCHASTIC_TOL {
                problems.push(format!("row {i} sums to {row}"));
            }
            let col: f64 = h.column(i).iter().sum();
            if (col - 1.0).abs() > STOCHASTIC_TOL {
                problems.push(format!("column {i} sums to {col}"));
            }
        }
        if !problems.is_empty() {
            return Err(Error::Topology(format!(
                "not a symmetric doubly-stochastic matrix: {}",
                problems.join("; ")
            )));
        }
        let weights = (0..m)
            .map(|i| {
                (0..m)
                    .filter(|&j| h[(i, j)] > 0.0)
                    .map(|j| (j, h[(i, j)]))
                    .collect()
            })
            .collect();
        let mixing = Self { h, weights };
        if !mixing.topology()?.is_connected() {
            return Err(Error::Topology(
                "mixing matrix graph is not connected".into(),
            ));
        }
        Ok(mixing)
    }

    pub fn dense(&self) -> &Matrix {
        &self.h
    }

    pub fn node_count(&self) -> usize {
        self.h.nrows()
    }

    /// Topology given by the nonzero pattern.
    pub fn topology(&self) -> Result<Topology> {
        Topology::from_neighbor_sets(
            self.weights
                .iter()
                .map(|row| row.iter().map(|(j, _)| *j).collect())
                .collect(),
        )
    }

    pub fn directed_edges(&self) -> usize {
        self.weights.iter().map(|row| row.len() - 1).sum()
    }

    /// Second-largest eigenvalue magnitude. Governs the per-round
    /// contraction of the deviation from the mean.
    pub fn second_eigenvalue_magnitude(&self) -> f64 {
        if self.node_count() == 1 {
            return 0.0;
        }
        let mut mags: Vec<f64> = SymmetricEigen::new(self.h.clone())
            .eigenvalues
            .iter()
            .map(|v| v.abs())
            .collect();
        mags.sort_by(|a, b| b.total_cmp(a));
        mags[1]
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .from_writer(out);
        for row in self.h.row_iter() {
            w.write_record(row.iter().map(|v| v.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    /// Headerless square CSV of weights.
    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_reader(input);
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            let row = rec
                .iter()
                .enumerate()
                .map(|(j, s)| {
                    s.parse::<f64>().map_err(|e| Error::Parse {
                        row: i + 1,
                        column: j.to_string(),
                        message: e.to_string(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        let m = rows.len();
        if let Some((i, row)) = rows.iter().enumerate().find(|(_, row)| row.len() != m) {
            return Err(Error::Topology(format!(
                "mixing CSV row {} has {} entries, expected {m}",
                i + 1,
                row.len()
            )));
        }
        Self::from_dense(Matrix::from_fn(m, m, |i, j| rows[i][j]))
    }

    /// One synchronous round: node `i` replaces its value by
    /// `sum_j h_ij v_j`, reading from the previous snapshot.
    fn mix_round(&self, values: &[Matrix]) -> Vec<Matrix> {
        self.weights
            .par_iter()
            .map(|row| {
                let mut acc = Matrix::zeros(values[0].nrows(), values[0].ncols());
                for &(j, w) in row {
                    acc.zip_apply(&values[j], |a, b| *a += w * b);
                }
                acc
            })
            .collect()
    }
}

/// Equal weights `h_ij = 1/|N_i|`. Requires a regular graph.
pub fn mixing_matrix(topology: &Topology) -> Result<MixingMatrix> {
    let m = topology.node_count();
    let size = topology.neighbors(0).len();
    let offending: Vec<String> = (0..m)
        .filter(|&i| topology.neighbors(i).len() != size)
        .map(|i| format!("{i} (|N| = {})", topology.neighbors(i).len()))
        .collect();
    if !offending.is_empty() {
        return Err(Error::Topology(format!(
            "equal weights need a regular graph; node 0 has |N| = {size} but nodes {} differ",
            offending.join(", ")
        )));
    }
    let w = 1.0 / size as f64;
    let h = Matrix::from_fn(m, m, |i, j| {
        if topology.neighbors(i).contains(&j) {
            w
        } else {
            0.0
        }
    });
    MixingMatrix::from_dense(h)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ConsensusMode {
    /// Exactly `B` mixing rounds.
    FixedRounds(usize),
    /// Mix until every node is within `tau` (Frobenius) of the network mean.
    Tolerance { tau: f64, round_cap: usize },
}

impl Default for ConsensusMode {
    fn default() -> Self {
        ConsensusMode::Tolerance {
            tau: DEFAULT_TAU,
            round_cap: DEFAULT_ROUND_CAP,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConsensusOutcome {
    pub estimates: Vec<Matrix>,
    pub rounds: usize,
    /// Max Frobenius distance of any node to the network mean after the last round.
    pub deviation: f64,
}

/// Fixed-order mean of per-node matrices.
pub fn exact_mean(values: &[Matrix]) -> Matrix {
    let mut acc = Matrix::zeros(values[0].nrows(), values[0].ncols());
    for v in values {
        acc += v;
    }
    acc / values.len() as f64
}

fn max_deviation(values: &[Matrix], mean: &Matrix) -> f64 {
    values.iter().map(|v| (v - mean).norm()).fold(0.0, f64::max)
}

/// Gossip averaging: repeatedly applies `v <- H v` per entry.
pub fn consensus_average(
    values: &[Matrix],
    mixing: &MixingMatrix,
    mode: ConsensusMode,
    ledger: &mut CommLedger,
) -> Result<ConsensusOutcome> {
    let m = mixing.node_count();
    if values.len() != m {
        return Err(Error::Dimension(format!(
            "{} values for a {m}-node mixing matrix",
            values.len()
        )));
    }
    let shape = values[0].shape();
    if let Some(v) = values.iter().find(|v| v.shape() != shape) {
        return Err(Error::Dimension(format!(
            "consensus values differ in shape: {:?} vs {shape:?}",
            v.shape()
        )));
    }
    let scalars = (shape.0 * shape.1) as u64;
    let edges = mixing.directed_edges() as u64;
    let mut current = values.to_vec();
    let mut rounds = 0;
    match mode {
        ConsensusMode::FixedRounds(b) => {
            for _ in 0..b {
                current = mixing.mix_round(&current);
                ledger.record_round(scalars, edges);
            }
            rounds = b;
        }
        ConsensusMode::Tolerance { tau, round_cap } => loop {
            let deviation = max_deviation(&current, &exact_mean(&current));
            if deviation <= tau {
                break;
            }
            if rounds == round_cap {
                return Err(Error::ConsensusNotConverged {
                    tau,
                    round_cap,
                    deviation,
                });
            }
            current = mixing.mix_round(&current);
            ledger.record_round(scalars, edges);
            rounds += 1;
        },
    }
    let deviation = max_deviation(&current, &exact_mean(&current));
    Ok(ConsensusOutcome {
        estimates: current,
        rounds,
        deviation,
    })
}

/// How the per-iteration network average is obtained.
#[derive(Debug, Clone)]
pub enum Consensus {
    /// Idealized all-reduce: every worker gets the exact fixed-order mean.
    /// Models no traffic.
    Exact,
    Gossip {
        mixing: MixingMatrix,
        mode: ConsensusMode,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LayerComm {
    pub layer: usize,
    pub rounds: u64,
    pub scalars_exchanged: u64,
    pub payload_scalars: u64,
}

/// Traffic counters. `scalars_exchanged` counts every scalar sent over every
/// directed edge; `payload_scalars` counts the matrix size once per round,
/// which is the quantity in the `Q n B K` cost formula.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CommLedger {
    pub scalars_exchanged: u64,
    pub payload_scalars: u64,
    pub consensus_rounds: u64,
    pub per_layer: Vec<LayerComm>,
}

impl CommLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn begin_layer(&mut self, layer: usize) {
        self.per_layer.push(LayerComm {
            layer,
            ..LayerComm::default()
        });
    }

    pub fn record_round(&mut self, scalars_per_matrix: u64, directed_edges: u64) {
        let sent = scalars_per_matrix * directed_edges;
        self.scalars_exchanged += sent;
        self.payload_scalars += scalars_per_matrix;
        self.consensus_rounds += 1;
        if let Some(layer) = self.per_layer.last_mut() {
            layer.scalars_exchanged += sent;
            layer.payload_scalars += scalars_per_matrix;
            layer.rounds += 1;
        }
    }
}

/// Scalars exchanged by decentralized gradient descent to learn one
/// `n_l x n_{l-1}` weight: `n_l n_{l-1} B I`.
pub fn comm_cost_gradient(n_l: u64, n_prev: u64, rounds: u64, gd_iterations: u64) -> u128 {
    n_l as u128 * n_prev as u128 * rounds as u128 * gd_iterations as u128
}

/// Scalars exchanged by layer-wise ADMM for one layer: `Q n_{l-1} B K`.
pub fn comm_cost_admm(classes: u64, n_prev: u64, rounds: u64, admm_iterations: u64) -> u128 {
    classes as u128 * n_prev as u128 * rounds as u128 * admm_iterations as u128
}

/// `eta = n_l I / (Q K)`.
pub fn comm_ratio(n_l: u64, gd_iterations: u64, classes: u64, admm_iterations: u64) -> f64 {
    (n_l as f64 * gd_iterations as f64) / (classes as f64 * admm_iterations as f64)
}
