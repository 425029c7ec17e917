//! Stochastic gradient ascent on the mean-variance objective
//! G(β, θ) = R·S⁰_N − γ((R − θ)·S⁰_N)² over chaos coefficients.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::chaos::{ChaosVector, MultiIndexBasis};
use crate::error::{Error, Result};
use crate::par;
use crate::strategy::{CostModel, StrategyMaps};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    Constant,
    /// lr / √(t + 1).
    InverseDecay,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThetaMode {
    /// Exponentially weighted mean of batch means.
    RunningMean,
    /// Mean of the current batch.
    BatchMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Init {
    /// All cash: β = V₀e₀.
    Zeros,
    Given(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub gamma: f64,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::iterations")]
    pub iterations: usize,
    #[serde(default = "defaults::learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "defaults::lr_schedule")]
    pub lr_schedule: LrSchedule,
    #[serde(default = "defaults::theta_mode")]
    pub theta_mode: ThetaMode,
    #[serde(default = "defaults::theta_decay")]
    pub theta_decay: f64,
    #[serde(default = "defaults::init")]
    pub init: Init,
    #[serde(default)]
    pub seed: u64,
    /// Certificate threshold, in multiples of the certificate's own stderr.
    #[serde(default = "defaults::tolerance")]
    pub tolerance: f64,
}

mod defaults {
    use super::*;
    pub fn batch_size() -> usize {
        100
    }
    pub fn iterations() -> usize {
        1000
    }
    pub fn learning_rate() -> f64 {
        1.0
    }
    pub fn lr_schedule() -> LrSchedule {
        LrSchedule::InverseDecay
    }
    pub fn theta_mode() -> ThetaMode {
        ThetaMode::RunningMean
    }
    pub fn theta_decay() -> f64 {
        0.9
    }
    pub fn init() -> Init {
        Init::Zeros
    }
    pub fn tolerance() -> f64 {
        3.0
    }
}

impl OptimizerConfig {
    pub fn new(gamma: f64) -> Self {
        OptimizerConfig {
            gamma,
            batch_size: defaults::batch_size(),
            iterations: defaults::iterations(),
            learning_rate: defaults::learning_rate(),
            lr_schedule: defaults::lr_schedule(),
            theta_mode: defaults::theta_mode(),
            theta_decay: defaults::theta_decay(),
            init: Init::Zeros,
            seed: 0,
            tolerance: defaults::tolerance(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config("gamma must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.theta_decay) {
            return Err(Error::Config("theta_decay must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub objective: f64,
    pub residual: f64,
    pub theta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    /// ‖mean Ψ_γ‖ at θ = mean R.
    pub residual: f64,
    /// Norm of the per-coordinate standard errors of mean Ψ_γ.
    pub stderr: f64,
    pub theta: f64,
    pub gradient: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub beta: ChaosVector,
    /// Discounted θ at the end of training.
    pub theta: f64,
    /// Mean of G on the held-out batch at θ = mean R.
    pub objective: f64,
    pub certificate: Certificate,
    pub trace: Vec<TraceRow>,
    pub config: OptimizerConfig,
}

impl Solution {
    pub fn gradient_residual_norm(&self) -> f64 {
        self.certificate.residual
    }

    /// Whether the held-out gradient is indistinguishable from zero at the
    /// configured number of standard errors.
    pub fn converged(&self) -> bool {
        self.certificate.residual <= self.config.tolerance * self.certificate.stderr
    }

    pub fn write_trace_csv(&self, path: &Path) -> Result<()> {
        write_trace_csv(&self.trace, path)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let file = SolutionFile {
            basis: self.beta.basis.header(),
            coefficients: self
                .beta
                .basis
                .indices
                .iter()
                .zip(&self.beta.coeffs)
                .map(|(ix, &c)| (ix.degrees.clone(), c))
                .collect(),
            theta: self.theta,
            objective: self.objective,
            certificate: self.certificate.clone(),
            config: self.config.clone(),
        };
        let json = serde_json::to_string_pretty(&file).map_err(|e| Error::Data(e.to_string()))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    /// Reads β back from a solution file.
    pub fn read_beta(path: &Path, basis: &Arc<MultiIndexBasis>) -> Result<ChaosVector> {
        let text = std::fs::read_to_string(path)?;
        let file: SolutionFile = serde_json::from_str(&text).map_err(|e| Error::Data(e.to_string()))?;
        if file.basis != basis.header() {
            return Err(Error::Shape(format!("solution basis {} does not match {}", file.basis, basis.header())));
        }
        let mut coeffs = vec![0.0; basis.len()];
        for (deg, c) in file.coefficients {
            let pos = basis
                .position(&deg)
                .ok_or_else(|| Error::Data("solution index not in basis".into()))?;
            coeffs[pos] = c;
        }
        ChaosVector::new(basis.clone(), coeffs)
    }
}

#[derive(Serialize, Deserialize)]
struct SolutionFile {
    basis: String,
    coefficients: Vec<(Vec<u8>, f64)>,
    theta: f64,
    objective: f64,
    certificate: Certificate,
    config: OptimizerConfig,
}

pub fn write_trace_csv(trace: &[TraceRow], path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "iteration,objective,residual,theta")?;
    for t in trace {
        writeln!(w, "{},{},{},{}", t.iteration, t.objective, t.residual, t.theta)?;
    }
    w.flush()?;
    Ok(())
}

fn mean_r(maps: &StrategyMaps, beta: &[f64], cost: &CostModel) -> f64 {
    let s = par::sum_vectors(maps.n_paths, 1, |i, acc| acc[0] += maps.path_value(i, beta, cost));
    s[0] / maps.n_paths as f64
}

/// Mean of G_γ(β, θ) over all paths of `maps`.
pub fn objective(beta: &[f64], theta: f64, maps: &StrategyMaps, cost: &CostModel, gamma: f64) -> f64 {
    let s0n = maps.s0_terminal();
    let s = par::sum_vectors(maps.n_paths, 1, |i, acc| {
        let r = maps.path_value(i, beta, cost);
        acc[0] += r * s0n - gamma * ((r - theta) * s0n).powi(2);
    });
    s[0] / maps.n_paths as f64
}

/// Mean of (∇_β G, ∂_θ G) over the paths `idx`. The β₀ component is zero.
fn batch_gradient(
    beta: &[f64],
    theta: f64,
    maps: &StrategyMaps,
    idx: &[usize],
    cost: &CostModel,
    gamma: f64,
) -> (Vec<f64>, f64, f64, f64) {
    let m = maps.m;
    let s0n = maps.s0_terminal();
    // Layout: gradient (m), dθ, objective, R.
    let s = par::sum_vectors(idx.len(), m + 3, |k, acc| {
        let mut g = vec![0.0; m];
        let r = maps.path_value_grad(idx[k], beta, cost, &mut g);
        let f = s0n * (1.0 - 2.0 * gamma * s0n * (r - theta));
        for (a, gi) in acc[..m].iter_mut().zip(&g) {
            *a += gi * f;
        }
        acc[m] += 2.0 * gamma * s0n * s0n * (r - theta);
        acc[m + 1] += r * s0n - gamma * ((r - theta) * s0n).powi(2);
        acc[m + 2] += r;
    });
    let n = idx.len() as f64;
    let mut g: Vec<f64> = s[..m].iter().map(|x| x / n).collect();
    g[0] = 0.0;
    (g, s[m] / n, s[m + 1] / n, s[m + 2] / n)
}

/// Mean (∇_β G, ∂_θ G) over all paths. The β₀ component is zero because
/// the constant coefficient is pinned.
pub fn gradient(beta: &[f64], theta: f64, maps: &StrategyMaps, cost: &CostModel, gamma: f64) -> (Vec<f64>, f64) {
    let idx: Vec<usize> = (0..maps.n_paths).collect();
    let (g, dt, _, _) = batch_gradient(beta, theta, maps, &idx, cost, gamma);
    (g, dt)
}

/// Estimates ‖E[Ψ_γ(β, E[R(β)])]‖ and its standard error.
pub fn certificate(beta: &[f64], maps: &StrategyMaps, cost: &CostModel, gamma: f64) -> Certificate {
    let m = maps.m;
    let s0n = maps.s0_terminal();
    let theta = mean_r(maps, beta, cost);
    let s = par::sum_vectors(maps.n_paths, 2 * m, |i, acc| {
        let mut g = vec![0.0; m];
        let r = maps.path_value_grad(i, beta, cost, &mut g);
        let f = s0n * (1.0 - 2.0 * gamma * s0n * (r - theta));
        for (l, gi) in g.iter().enumerate().skip(1) {
            let psi = gi * f;
            acc[l] += psi;
            acc[m + l] += psi * psi;
        }
    });
    let n = maps.n_paths as f64;
    let gradient: Vec<f64> = s[..m].iter().map(|x| x / n).collect();
    let var: f64 = (0..m)
        .map(|l| ((s[m + l] / n - gradient[l].powi(2)) * n / (n - 1.0).max(1.0)).max(0.0) / n)
        .sum();
    Certificate {
        residual: gradient.iter().map(|x| x * x).sum::<f64>().sqrt(),
        stderr: var.sqrt(),
        theta,
        gradient,
    }
}

/// Runs stochastic gradient ascent on `train` and certifies on `holdout`.
pub fn solve(
    config: &OptimizerConfig,
    basis: &Arc<MultiIndexBasis>,
    train: &StrategyMaps,
    holdout: &StrategyMaps,
    cost: &CostModel,
) -> Result<Solution> {
    config.validate()?;
    if train.m != basis.len() || holdout.m != basis.len() {
        return Err(Error::Shape("strategy maps do not match the basis".into()));
    }
    if train.n_paths == 0 || holdout.n_paths < 2 {
        return Err(Error::Config("optimizer needs training and held-out paths".into()));
    }
    let v0 = train.v0;
    let mut beta = match &config.init {
        Init::Zeros => vec![0.0; basis.len()],
        Init::Given(b) if b.len() == basis.len() => b.clone(),
        Init::Given(b) => {
            return Err(Error::Shape(format!("initial β has {} entries, expected {}", b.len(), basis.len())))
        }
    };
    beta[0] = v0;
    let mut theta = mean_r(&train.subset(&(0..train.n_paths.min(config.batch_size)).collect::<Vec<_>>()), &beta, cost);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train.n_paths).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut trace = Vec::with_capacity(config.iterations);
    let bs = config.batch_size.min(train.n_paths);
    for t in 0..config.iterations {
        if cursor + bs > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let idx = &order[cursor..cursor + bs];
        cursor += bs;
        let (g, _, obj, r_mean) = batch_gradient(&beta, theta, train, idx, cost, config.gamma);
        let residual = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(obj.is_finite() && residual.is_finite()) {
            return Err(Error::Divergence { iteration: t, objective: obj, trace });
        }
        trace.push(TraceRow { iteration: t, objective: obj, residual, theta });
        let lr = match config.lr_schedule {
            LrSchedule::Constant => config.learning_rate,
            LrSchedule::InverseDecay => config.learning_rate / ((t + 1) as f64).sqrt(),
        };
        for (b, gi) in beta.iter_mut().zip(&g) {
            *b += lr * gi;
        }
        beta[0] = v0;
        theta = match config.theta_mode {
            ThetaMode::RunningMean => config.theta_decay * theta + (1.0 - config.theta_decay) * r_mean,
            ThetaMode::BatchMean => r_mean,
        };
    }
    if beta.iter().any(|b| !b.is_finite()) {
        let objective = trace.last().map_or(f64::NAN, |t| t.objective);
        return Err(Error::Divergence { iteration: config.iterations, objective, trace });
    }
    let cert = certificate(&beta, holdout, cost, config.gamma);
    let objective = objective(&beta, cert.theta, holdout, cost, config.gamma);
    Ok(Solution {
        beta: ChaosVector::new(basis.clone(), beta)?,
        theta,
        objective,
        certificate: cert,
        trace,
        config: config.clone(),
    })
}

/// β with non-constant coefficients scaled by `u`; the constant stays V₀.
pub fn scale_beta(beta: &[f64], u: f64) -> Vec<f64> {
    let mut out: Vec<f64> = beta.iter().map(|b| b * u).collect();
    out[0] = beta[0];
    out
}
