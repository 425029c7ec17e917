//! Comparison strategies: the multi-period solution optimized without costs,
//! sequential one-period Markowitz with and without costs, and equal weight.
//!
//! The one-period problems are solved in the normalized variable x = 2γ_u·α,
//! which makes every control exactly proportional to 1/γ_u.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market::{MarketSpec, Measure, PathBatch};
use crate::par;
use crate::strategy::{evaluate_portfolio, CostModel, StrategyMaps};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BenchmarkKind {
    MultiPeriodIgnoreCost,
    UniPeriodIgnoreCost,
    UniPeriodWithCost,
    EqualWeight,
}

impl BenchmarkKind {
    pub fn label(&self) -> &'static str {
        match self {
            BenchmarkKind::MultiPeriodIgnoreCost => "Multi-period ignoring cost",
            BenchmarkKind::UniPeriodIgnoreCost => "Sequential uni-period ignoring cost",
            BenchmarkKind::UniPeriodWithCost => "Sequential uni-period with cost",
            BenchmarkKind::EqualWeight => "Equal weight",
        }
    }
}

/// Options shared by the sequential benchmarks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SequentialOptions {
    pub charge_initial: bool,
    /// Use the scalar denominator 2γ_u·SᵀBS instead of the matrix Q.
    pub scalar_form: bool,
    pub max_sweeps: usize,
    pub tolerance: f64,
}

impl Default for SequentialOptions {
    fn default() -> Self {
        SequentialOptions { charge_initial: false, scalar_form: false, max_sweeps: 10_000, tolerance: 1e-10 }
    }
}

/// One-period moments at prices `s`: excess mean a = AS − Se^{rΔt} and the
/// quadratic form Q = Diag(S)·B·Diag(S).
#[derive(Debug, Clone)]
pub struct OnePeriod {
    pub a: DVector<f64>,
    pub q: DMatrix<f64>,
    /// Scalar SᵀBS.
    pub q_scalar: f64,
    /// Cost weight per unit traded, νS_ie^{rΔt} before ν.
    pub growth: f64,
}

impl OnePeriod {
    pub fn new(spec: &MarketSpec, s: &[f64]) -> Self {
        let dt = spec.dt();
        let growth = (spec.r * dt).exp();
        let cov = spec.covariance();
        let d = spec.d;
        let b = DMatrix::from_fn(d, d, |i, j| ((spec.mu[i] + spec.mu[j]) * dt).exp() * (cov[(i, j)] * dt).exp_m1());
        let a = DVector::from_fn(d, |i, _| s[i] * ((spec.mu[i] * dt).exp() - growth));
        let q = DMatrix::from_fn(d, d, |i, j| s[i] * b[(i, j)] * s[j]);
        let q_scalar = q.sum();
        OnePeriod { a, q, q_scalar, growth }
    }

    /// Normalized no-cost optimum x = Q⁻¹a (or a / SᵀBS).
    pub fn free_optimum(&self, scalar_form: bool) -> Result<DVector<f64>> {
        if scalar_form {
            if !(self.q_scalar > 0.0) {
                return Err(Error::Numerical("scalar quadratic form is not positive".into()));
            }
            return Ok(&self.a / self.q_scalar);
        }
        let chol = self
            .q
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Numerical("one-period quadratic form is singular".into()))?;
        Ok(chol.solve(&self.a))
    }

    fn quad(&self, scalar_form: bool) -> DMatrix<f64> {
        if scalar_form {
            DMatrix::from_diagonal_element(self.a.len(), self.a.len(), self.q_scalar)
        } else {
            self.q.clone()
        }
    }
}

/// Quantities maximizing E[V_{n+1}] − γ_u·Var[V_{n+1}] at prices `s_n`.
pub fn uniperiod_nocost_controls(spec: &MarketSpec, s_n: &[f64], gamma_u: f64, scalar_form: bool) -> Result<Vec<f64>> {
    check_gamma(gamma_u)?;
    let x = OnePeriod::new(spec, s_n).free_optimum(scalar_form)?;
    Ok(x.iter().map(|v| v / (2.0 * gamma_u)).collect())
}

fn check_gamma(gamma_u: f64) -> Result<()> {
    if gamma_u > 0.0 && gamma_u.is_finite() {
        Ok(())
    } else {
        Err(Error::Config("gamma_u must be positive".into()))
    }
}

fn soft_threshold(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

/// Maximizes aᵀx − ½xᵀQx − Σ w_i|x_i − p_i| by cyclic coordinate ascent
/// started at p. Returns x and the number of sweeps used.
pub fn solve_l1_quadratic(
    a: &DVector<f64>,
    q: &DMatrix<f64>,
    w: &[f64],
    p: &[f64],
    tolerance: f64,
    max_sweeps: usize,
) -> Result<(Vec<f64>, usize)> {
    let d = a.len();
    if (0..d).any(|i| !(q[(i, i)] > 0.0)) {
        return Err(Error::Numerical("quadratic form has a nonpositive diagonal".into()));
    }
    let mut x = p.to_vec();
    let scale = a.amax().max(w.iter().cloned().fold(0.0, f64::max)).max(f64::MIN_POSITIVE);
    for sweep in 1..=max_sweeps {
        for i in 0..d {
            let mut b = a[i];
            for j in 0..d {
                if j != i {
                    b -= q[(i, j)] * x[j];
                }
            }
            let qi = q[(i, i)];
            x[i] = p[i] + soft_threshold(b - qi * p[i], w[i]) / qi;
        }
        if optimality_violation(a, q, w, p, &x) <= tolerance * scale {
            return Ok((x, sweep));
        }
    }
    Err(Error::Solver(format!("coordinate ascent did not converge in {max_sweeps} sweeps")))
}

/// Largest per-coordinate distance of 0 from the subdifferential.
pub fn optimality_violation(a: &DVector<f64>, q: &DMatrix<f64>, w: &[f64], p: &[f64], x: &[f64]) -> f64 {
    let d = a.len();
    (0..d)
        .map(|i| {
            let g = a[i] - (0..d).map(|j| q[(i, j)] * x[j]).sum::<f64>();
            if x[i] != p[i] {
                (g - w[i] * (x[i] - p[i]).signum()).abs()
            } else {
                (g.abs() - w[i]).max(0.0)
            }
        })
        .fold(0.0, f64::max)
}

/// Cost-aware one-period controls, starting from `alpha_prev`.
pub fn uniperiod_withcost_controls(
    spec: &MarketSpec,
    s_n: &[f64],
    alpha_prev: &[f64],
    gamma_u: f64,
    opts: &SequentialOptions,
) -> Result<Vec<f64>> {
    check_gamma(gamma_u)?;
    let prev: Vec<f64> = alpha_prev.iter().map(|a| 2.0 * gamma_u * a).collect();
    let x = withcost_normalized(spec, s_n, &prev, spec.nu, opts)?;
    // Untraded coordinates return the previous holding bit for bit.
    Ok(x.iter()
        .zip(&prev)
        .zip(alpha_prev)
        .map(|((v, p), a)| if v == p { *a } else { v / (2.0 * gamma_u) })
        .collect())
}

fn withcost_normalized(spec: &MarketSpec, s_n: &[f64], prev: &[f64], nu: f64, opts: &SequentialOptions) -> Result<Vec<f64>> {
    let one = OnePeriod::new(spec, s_n);
    if nu == 0.0 {
        return Ok(one.free_optimum(opts.scalar_form)?.iter().copied().collect());
    }
    let w: Vec<f64> = s_n.iter().map(|s| nu * s * one.growth).collect();
    let (x, _) = solve_l1_quadratic(&one.a, &one.quad(opts.scalar_form), &w, prev, opts.tolerance, opts.max_sweeps)?;
    Ok(x)
}

/// Per-path output of a benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkRun {
    pub kind: BenchmarkKind,
    /// Undiscounted terminal wealth.
    pub wealth: Vec<f64>,
    /// Undiscounted cumulative cost.
    pub cost: Vec<f64>,
    /// Holdings α_1..α_M, `[path][step][asset]`.
    pub controls: Vec<f64>,
    pub steps: usize,
    pub d: usize,
}

fn require_physical(batch: &PathBatch) -> Result<()> {
    if batch.measure != Measure::Physical {
        return Err(Error::Data("benchmarks run on physical paths".into()));
    }
    Ok(())
}

/// Self-financing forward recursion with a per-date rebalancing rule.
///
/// `rule(n, s_n, alpha_prev, v_n)` returns the holdings carried over
/// (t_n, t_{n+1}]; the cost ν·Σ|Δα|S_n is paid from cash at t_n.
fn forward<F>(spec: &MarketSpec, batch: &PathBatch, kind: BenchmarkKind, charge_initial: bool, rule: F) -> Result<BenchmarkRun>
where
    F: Fn(usize, &[f64], &[f64], f64) -> Result<Vec<f64>> + Sync + Send,
{
    require_physical(batch)?;
    let d = batch.d;
    let steps = batch.steps;
    let growth = (spec.r * spec.dt()).exp();
    let rows = par::map_indexed(batch.n_paths, |i| -> Result<(f64, f64, Vec<f64>)> {
        let mut v = spec.v0;
        let mut paid = 0.0;
        let mut prev = vec![0.0; d];
        let mut path_controls = Vec::with_capacity(steps * d);
        for n in 0..steps {
            let s = batch.s_at(i, n);
            let alpha = rule(n, s, &prev, v)?;
            let nu = if n == 0 && !charge_initial { 0.0 } else { spec.nu };
            let c: f64 = (0..d).map(|j| nu * (alpha[j] - prev[j]).abs() * s[j]).sum();
            let invested: f64 = (0..d).map(|j| alpha[j] * s[j]).sum();
            let s1 = batch.s_at(i, n + 1);
            v = (0..d).map(|j| alpha[j] * s1[j]).sum::<f64>() + (v - invested - c) * growth;
            paid = (paid + c) * growth;
            path_controls.extend_from_slice(&alpha);
            prev = alpha;
        }
        Ok((v, paid, path_controls))
    });
    let mut run = BenchmarkRun {
        kind,
        wealth: Vec::with_capacity(batch.n_paths),
        cost: Vec::with_capacity(batch.n_paths),
        controls: Vec::with_capacity(batch.n_paths * steps * d),
        steps,
        d,
    };
    for row in rows {
        let (v, c, a) = row?;
        run.wealth.push(v);
        run.cost.push(c);
        run.controls.extend(a);
    }
    Ok(run)
}

/// Sequential one-period Markowitz, with or without costs in the decision.
/// Costs are always deducted from wealth.
pub fn run_sequential(
    spec: &MarketSpec,
    batch: &PathBatch,
    kind: BenchmarkKind,
    gamma_u: f64,
    opts: &SequentialOptions,
) -> Result<BenchmarkRun> {
    check_gamma(gamma_u)?;
    let two_g = 2.0 * gamma_u;
    match kind {
        BenchmarkKind::UniPeriodIgnoreCost => forward(spec, batch, kind, opts.charge_initial, |_, s, _, _| {
            let x = OnePeriod::new(spec, s).free_optimum(opts.scalar_form)?;
            Ok(x.iter().map(|v| v / two_g).collect())
        }),
        BenchmarkKind::UniPeriodWithCost => forward(spec, batch, kind, opts.charge_initial, |n, s, prev, _| {
            // A free first trade means the first decision is cost-free too.
            let nu = if n == 0 && !opts.charge_initial { 0.0 } else { spec.nu };
            let p: Vec<f64> = prev.iter().map(|a| a * two_g).collect();
            let x = withcost_normalized(spec, s, &p, nu, opts)?;
            Ok(x.iter().map(|v| v / two_g).collect())
        }),
        other => Err(Error::Config(format!("{other:?} is not a sequential benchmark"))),
    }
}

/// Equal cash weight in every risky asset, rebalanced at each trading date.
/// Holdings are set so that invested value equals wealth net of the
/// rebalancing cost, found by fixed-point iteration.
pub fn run_equal_weight(spec: &MarketSpec, batch: &PathBatch, charge_initial: bool) -> Result<BenchmarkRun> {
    let d = spec.d as f64;
    forward(spec, batch, BenchmarkKind::EqualWeight, charge_initial, |n, s, prev, v| {
        let nu = if n == 0 && !charge_initial { 0.0 } else { spec.nu };
        let target = |budget: f64| -> Vec<f64> { s.iter().map(|x| budget / (d * x)).collect() };
        let mut alpha = target(v);
        for _ in 0..100 {
            let c: f64 = alpha.iter().zip(prev).zip(s).map(|((a, p), x)| nu * (a - p).abs() * x).sum();
            let next = target(v - c);
            let done = next.iter().zip(&alpha).all(|(a, b)| (a - b).abs() <= 1e-15 * a.abs().max(1.0));
            alpha = next;
            if done {
                break;
            }
        }
        Ok(alpha)
    })
}

/// The multi-period solution found without costs, evaluated with costs.
pub fn run_multiperiod_ignore_cost(maps: &StrategyMaps, beta_nocost: &[f64], cost: &CostModel) -> BenchmarkRun {
    let ev = evaluate_portfolio(maps, beta_nocost, cost);
    let s0n = maps.s0_terminal();
    BenchmarkRun {
        kind: BenchmarkKind::MultiPeriodIgnoreCost,
        wealth: ev.terminal_wealth(s0n),
        cost: ev.cost.iter().map(|c| c * s0n).collect(),
        controls: ev.controls,
        steps: maps.steps,
        d: maps.d,
    }
}

pub fn write_wealth_csv(path: &Path, wealth: &[f64]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "path,wealth")?;
    for (i, v) in wealth.iter().enumerate() {
        writeln!(w, "{i},{v}")?;
    }
    w.flush()?;
    Ok(())
}

/// Writes (path, step, asset, quantity) rows for the selected paths.
pub fn write_controls_csv(path: &Path, controls: &[f64], steps: usize, d: usize, paths: &[usize]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "path,step,asset,quantity")?;
    for &i in paths {
        for n in 0..steps {
            for j in 0..d {
                writeln!(w, "{i},{},{j},{}", n + 1, controls[(i * steps + n) * d + j])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}
