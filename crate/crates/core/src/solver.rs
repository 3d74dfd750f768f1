//! Per-layer constrained least squares
//!
//! ```text
//! min_O  sum_m ||T_m - O Y_m||_F^2   s.t.  ||O||_F <= eps
//! ```
//!
//! solved either directly (the centralized reference) or by consensus ADMM
//! over the workers' shards.

use nalgebra::{Cholesky, Dyn};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::Matrix;
use crate::network::{consensus_average, exact_mean, CommLedger, Consensus};

/// Relative tolerance on `||O(lambda)||_F = eps` in the bisection oracle.
pub const BISECTION_RTOL: f64 = 1e-10;
const BISECTION_MAX_STEPS: usize = 500;
const BRACKET_MAX_DOUBLINGS: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdmmConfig {
    /// Penalty `mu`; the augmented term is weighted by `1 / mu`.
    pub mu: f64,
    /// Fixed number of iterations `K`.
    pub iterations: usize,
    /// Bound on the Frobenius norm of the solution.
    pub eps_bound: f64,
}

impl AdmmConfig {
    pub fn new(mu: f64, iterations: usize, eps_bound: f64) -> Result<Self> {
        if !(mu > 0.0 && mu.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "mu must be positive, got {mu}"
            )));
        }
        if iterations == 0 {
            return Err(Error::InvalidParameter(
                "ADMM needs at least one iteration".into(),
            ));
        }
        if !(eps_bound > 0.0 && eps_bound.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "eps bound must be positive, got {eps_bound}"
            )));
        }
        Ok(Self {
            mu,
            iterations,
            eps_bound,
        })
    }
}

/// One worker's data for a layer: targets `Q x J_m`, features `c x J_m`.
#[derive(Debug, Clone, Copy)]
pub struct LayerShard<'a> {
    pub targets: &'a Matrix,
    pub features: &'a Matrix,
}

impl<'a> LayerShard<'a> {
    pub fn new(targets: &'a Matrix, features: &'a Matrix) -> Result<Self> {
        if targets.ncols() != features.ncols() {
            return Err(Error::Dimension(format!(
                "targets have {} samples, features {}",
                targets.ncols(),
                features.ncols()
            )));
        }
        Ok(Self { targets, features })
    }
}

/// Projection onto the Frobenius ball of radius `eps_bound`. The computed
/// norm of the result never exceeds the bound, so projecting twice is a
/// no-op.
pub fn project_frobenius(z: &Matrix, eps_bound: f64) -> Matrix {
    let norm = z.norm();
    if norm <= eps_bound {
        return z.clone();
    }
    if !norm.is_finite() {
        return z * (eps_bound / norm);
    }
    let mut scale = eps_bound / norm;
    loop {
        let p = z * scale;
        if p.norm() <= eps_bound {
            return p;
        }
        scale = scale.next_down();
    }
}

fn ensure_finite(m: &Matrix, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// Local primal and dual state of one worker for one layer. The Cholesky
/// factor of `Y Y^T + I / mu` and `T Y^T` are fixed for the whole layer.
#[derive(Debug, Clone)]
pub struct AdmmWorkerState {
    pub o: Matrix,
    pub lambda: Matrix,
    factor: Cholesky<f64, Dyn>,
    target_cross: Matrix,
    inv_mu: f64,
}

impl AdmmWorkerState {
    pub fn new(shard: LayerShard<'_>, mu: f64) -> Result<Self> {
        ensure_finite(shard.targets, "worker targets")?;
        ensure_finite(shard.features, "worker features")?;
        if !(mu > 0.0 && mu.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "mu must be positive, got {mu}"
            )));
        }
        let inv_mu = 1.0 / mu;
        let c = shard.features.nrows();
        let q = shard.targets.nrows();
        let mut gram = shard.features * shard.features.transpose();
        for i in 0..c {
            gram[(i, i)] += inv_mu;
        }
        let factor = Cholesky::new(gram)
            .ok_or_else(|| Error::Factorization("Y Y^T + I/mu is not positive definite".into()))?;
        Ok(Self {
            o: Matrix::zeros(q, c),
            lambda: Matrix::zeros(q, c),
            factor,
            target_cross: shard.targets * shard.features.transpose(),
            inv_mu,
        })
    }

    /// `O = (T Y^T + (Z - Lambda)/mu) (Y Y^T + I/mu)^{-1}`.
    pub fn update_o(&mut self, z: &Matrix) {
        let mut rhs = z - &self.lambda;
        rhs *= self.inv_mu;
        rhs += &self.target_cross;
        // A symmetric, so O A = B  <=>  A O^T = B^T.
        self.o = self.factor.solve(&rhs.transpose()).transpose();
    }

    pub fn update_dual(&mut self, z: &Matrix) {
        self.lambda += &self.o;
        self.lambda -= z;
    }
}

/// Closed-form local minimizer for given `Z` and `Lambda`.
pub fn local_o_update(
    targets: &Matrix,
    features: &Matrix,
    z: &Matrix,
    lambda: &Matrix,
    mu: f64,
) -> Result<Matrix> {
    let shard = LayerShard::new(targets, features)?;
    let want = (targets.nrows(), features.nrows());
    if z.shape() != want || lambda.shape() != want {
        return Err(Error::Dimension(format!(
            "Z {:?} and Lambda {:?} must be {want:?}",
            z.shape(),
            lambda.shape()
        )));
    }
    ensure_finite(z, "Z")?;
    ensure_finite(lambda, "Lambda")?;
    let mut state = AdmmWorkerState::new(shard, mu)?;
    state.lambda = lambda.clone();
    state.update_o(z);
    Ok(state.o)
}

/// `Lambda + O - Z`.
pub fn dual_update(lambda: &Matrix, o: &Matrix, z: &Matrix) -> Matrix {
    lambda + o - z
}

/// Result of one Z-update.
#[derive(Debug, Clone)]
pub struct ConsensusRound {
    /// Projected estimate held by each worker.
    pub z: Vec<Matrix>,
    /// Max Frobenius distance of any worker's (unprojected) estimate to the exact mean.
    pub deviation: f64,
    pub rounds: usize,
}

/// `Z = P_eps(mean_m (O_m + Lambda_m))`, with the mean obtained through the
/// consensus backend.
pub fn z_update(
    sums: &[Matrix],
    eps_bound: f64,
    consensus: &Consensus,
    ledger: &mut CommLedger,
) -> Result<ConsensusRound> {
    if sums.is_empty() {
        return Err(Error::Dimension(
            "z-update needs at least one worker".into(),
        ));
    }
    let shape = sums[0].shape();
    if sums.iter().any(|s| s.shape() != shape) {
        return Err(Error::Dimension("z-update summands differ in shape".into()));
    }
    match consensus {
        Consensus::Exact => {
            let z = project_frobenius(&exact_mean(sums), eps_bound);
            Ok(ConsensusRound {
                z: vec![z; sums.len()],
                deviation: 0.0,
                rounds: 0,
            })
        }
        Consensus::Gossip { mixing, mode } => {
            let truth = exact_mean(sums);
            let outcome = consensus_average(sums, mixing, *mode, ledger)?;
            let deviation = outcome
                .estimates
                .iter()
                .map(|e| (e - &truth).norm())
                .fold(0.0, f64::max);
            Ok(ConsensusRound {
                z: outcome
                    .estimates
                    .iter()
                    .map(|e| project_frobenius(e, eps_bound))
                    .collect(),
                deviation,
                rounds: outcome.rounds,
            })
        }
    }
}

/// `sum_m ||T_m - O Y_m||_F^2`.
pub fn layer_objective(shards: &[LayerShard<'_>], o: &Matrix) -> f64 {
    shards
        .iter()
        .map(|s| (s.targets - o * s.features).norm_squared())
        .sum()
}

#[derive(Debug, Clone)]
pub struct AdmmSolution {
    /// Worker 0's final `Z`.
    pub o_star: Matrix,
    /// Every worker's final `Z`; identical under exact consensus.
    pub worker_z: Vec<Matrix>,
    /// `sum_m ||T_m - Z_m Y_m||_F^2` after each iteration.
    pub objective_trace: Vec<f64>,
    /// `max_m ||O_m - Z_m||_F` after each iteration.
    pub residual_trace: Vec<f64>,
    pub consensus_rounds: usize,
}

/// Runs `K` consensus-ADMM iterations from `O = Lambda = Z = 0`.
pub fn solve_layer_admm(
    shards: &[LayerShard<'_>],
    cfg: &AdmmConfig,
    consensus: &Consensus,
    ledger: &mut CommLedger,
) -> Result<AdmmSolution> {
    let first = shards
        .first()
        .ok_or_else(|| Error::Dimension("ADMM needs at least one shard".into()))?;
    let (q, c) = (first.targets.nrows(), first.features.nrows());
    if let Some(bad) = shards
        .iter()
        .position(|s| s.targets.nrows() != q || s.features.nrows() != c)
    {
        return Err(Error::Dimension(format!(
            "shard {bad} has shape ({}, {}), expected ({q}, {c})",
            shards[bad].targets.nrows(),
            shards[bad].features.nrows()
        )));
    }
    if let Consensus::Gossip { mixing, .. } = consensus {
        if mixing.node_count() != shards.len() {
            return Err(Error::Dimension(format!(
                "{} shards but the mixing matrix has {} nodes",
                shards.len(),
                mixing.node_count()
            )));
        }
    }

    let mut workers = shards
        .par_iter()
        .map(|s| AdmmWorkerState::new(*s, cfg.mu))
        .collect::<Result<Vec<_>>>()?;
    let mut z = vec![Matrix::zeros(q, c); shards.len()];
    let mut objective_trace = Vec::with_capacity(cfg.iterations);
    let mut residual_trace = Vec::with_capacity(cfg.iterations);
    let mut consensus_rounds = 0;

    for k in 0..cfg.iterations {
        workers
            .par_iter_mut()
            .zip(z.par_iter())
            .for_each(|(w, zm)| w.update_o(zm));
        let sums: Vec<Matrix> = workers.iter().map(|w| &w.o + &w.lambda).collect();
        let round = z_update(&sums, cfg.eps_bound, consensus, ledger)?;
        consensus_rounds += round.rounds;
        z = round.z;
        workers
            .par_iter_mut()
            .zip(z.par_iter())
            .for_each(|(w, zm)| w.update_dual(zm));

        let residual = workers
            .iter()
            .zip(&z)
            .map(|(w, zm)| (&w.o - zm).norm())
            .fold(0.0, f64::max);
        let objective: f64 = shards
            .iter()
            .zip(&z)
            .map(|(s, zm)| (s.targets - zm * s.features).norm_squared())
            .sum();
        if !residual.is_finite() || !objective.is_finite() {
            let worker = workers
                .iter()
                .position(|w| w.o.iter().any(|v| !v.is_finite()))
                .map_or("none".to_string(), |m| m.to_string());
            return Err(Error::NonFinite(format!(
                "ADMM iteration {} (mu = {}): residual {residual}, objective {objective}, first non-finite O at worker {worker}",
                k + 1,
                cfg.mu
            )));
        }
        objective_trace.push(objective);
        residual_trace.push(residual);
    }

    Ok(AdmmSolution {
        o_star: z[0].clone(),
        worker_z: z,
        objective_trace,
        residual_trace,
        consensus_rounds,
    })
}

/// Solution of the centralized problem and the ridge multiplier that
/// realises it (`0` when the bound is inactive).
#[derive(Debug, Clone)]
pub struct ConstrainedLs {
    pub o: Matrix,
    pub lambda: f64,
}

/// Spectral form of `O(lambda) = T Y^T (Y Y^T + lambda I)^{-1}` via the
/// thin SVD `Y = U S V^T`: `O(lambda) = sum_i s_i/(s_i^2+lambda) g_i u_i^T`
/// with `g_i = T v_i`.
struct RidgePath {
    g: Matrix,
    u_t: Matrix,
    s: Vec<f64>,
    g_norms_sq: Vec<f64>,
    rank_tol: f64,
}

impl RidgePath {
    fn new(targets: &Matrix, features: &Matrix) -> Result<Self> {
        let svd = features.clone().svd(true, true);
        let u = svd
            .u
            .ok_or_else(|| Error::Factorization("SVD did not return U".into()))?;
        let v_t = svd
            .v_t
            .ok_or_else(|| Error::Factorization("SVD did not return V^T".into()))?;
        let s: Vec<f64> = svd.singular_values.iter().copied().collect();
        let g = targets * v_t.transpose();
        let g_norms_sq = g.column_iter().map(|c| c.norm_squared()).collect();
        let s_max = s.iter().copied().fold(0.0, f64::max);
        let rank_tol = s_max * f64::EPSILON * features.nrows().max(features.ncols()) as f64;
        Ok(Self {
            g,
            u_t: u.transpose(),
            s,
            g_norms_sq,
            rank_tol,
        })
    }

    /// Per-direction gain; `lambda = 0` gives the pseudo-inverse.
    fn gain(&self, i: usize, lambda: f64) -> f64 {
        let s = self.s[i];
        if lambda == 0.0 {
            if s > self.rank_tol {
                1.0 / s
            } else {
                0.0
            }
        } else {
            s / (s * s + lambda)
        }
    }

    fn norm(&self, lambda: f64) -> f64 {
        (0..self.s.len())
            .map(|i| self.gain(i, lambda).powi(2) * self.g_norms_sq[i])
            .sum::<f64>()
            .sqrt()
    }

    fn solution(&self, lambda: f64) -> Matrix {
        let mut scaled = self.g.clone();
        for (i, mut col) in scaled.column_iter_mut().enumerate() {
            col *= self.gain(i, lambda);
        }
        scaled * &self.u_t
    }
}

/// Norm of the ridge solution `T Y^T (Y Y^T + lambda I)^{-1}`; `lambda = 0`
/// gives the minimum-norm least-squares solution.
pub fn ridge_solution_norm(targets: &Matrix, features: &Matrix, lambda: f64) -> Result<f64> {
    LayerShard::new(targets, features)?;
    Ok(RidgePath::new(targets, features)?.norm(lambda))
}

/// Exact reference solver. Returns the minimum-norm least-squares solution
/// when it lies in the ball, otherwise the ridge solution whose norm equals
/// `eps_bound`, with the multiplier found by bisection.
pub fn centralized_constrained_ls(
    targets: &Matrix,
    features: &Matrix,
    eps_bound: f64,
) -> Result<ConstrainedLs> {
    LayerShard::new(targets, features)?;
    if !(eps_bound > 0.0 && eps_bound.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "eps bound must be positive, got {eps_bound}"
        )));
    }
    ensure_finite(targets, "targets")?;
    ensure_finite(features, "features")?;
    let path = RidgePath::new(targets, features)?;
    if path.norm(0.0) <= eps_bound {
        return Ok(ConstrainedLs {
            o: path.solution(0.0),
            lambda: 0.0,
        });
    }

    let mut lo = 0.0;
    let mut hi = path.s.iter().map(|s| s * s).fold(1.0, f64::max);
    let mut doublings = 0;
    while path.norm(hi) >= eps_bound {
        lo = hi;
        hi *= 2.0;
        doublings += 1;
        if doublings > BRACKET_MAX_DOUBLINGS || !hi.is_finite() {
            return Err(Error::Bisection(format!(
                "could not bracket the multiplier (norm {} at lambda {hi})",
                path.norm(hi)
            )));
        }
    }
    for _ in 0..BISECTION_MAX_STEPS {
        let mid = 0.5 * (lo + hi);
        let norm = path.norm(mid);
        if ((norm - eps_bound) / eps_bound).abs() <= BISECTION_RTOL {
            return Ok(ConstrainedLs {
                o: path.solution(mid),
                lambda: mid,
            });
        }
        if norm > eps_bound {
            lo = mid;
        } else {
            hi = mid;
        }
        if mid == lo && mid == hi {
            break;
        }
    }
    Err(Error::Bisection(format!(
        "no multiplier in [{lo}, {hi}] reaches relative tolerance {BISECTION_RTOL:e}"
    )))
}
