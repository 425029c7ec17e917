//! Market model: correlated geometric Brownian assets, a deterministic cash
//! account, and path simulation on the trading grid.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

/// Constant-parameter market.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketSpec {
    pub d: usize,
    /// Drift per asset, per year.
    pub mu: Vec<f64>,
    /// Marginal volatility per asset, per square-root year.
    #[serde(rename = "sigma")]
    pub sigma_marginal: Vec<f64>,
    pub rho: Vec<Vec<f64>>,
    pub r: f64,
    pub v0: f64,
    /// Initial risky prices. Defaults to 100 for every asset.
    #[serde(default)]
    pub s_init: Option<Vec<f64>>,
    /// Total number of days N.
    pub n_days: usize,
    /// Trading period in days.
    pub p: usize,
    /// Proportional cost rate.
    #[serde(default)]
    pub nu: f64,
    /// Year fraction of one day.
    #[serde(default = "default_day_count")]
    pub day_count: f64,
}

fn default_day_count() -> f64 {
    1.0 / 368.0
}

impl MarketSpec {
    /// Market used throughout the reference experiment.
    pub fn reference() -> Self {
        MarketSpec {
            d: 3,
            mu: vec![0.06, 0.02, 0.14],
            sigma_marginal: vec![0.1, 0.06, 0.2],
            rho: vec![
                vec![1.0, -0.2, 0.3],
                vec![-0.2, 1.0, -0.2],
                vec![0.3, -0.2, 1.0],
            ],
            r: 0.001,
            v0: 100.0,
            s_init: None,
            n_days: 368,
            p: 92,
            nu: 0.01,
            day_count: 1.0 / 368.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d;
        if d == 0 {
            return Err(Error::Config("d must be at least 1".into()));
        }
        if self.mu.len() != d || self.sigma_marginal.len() != d || self.rho.len() != d {
            return Err(Error::Config(format!("mu, sigma and rho must have {d} entries")));
        }
        if self.rho.iter().any(|row| row.len() != d) {
            return Err(Error::Config("rho must be square".into()));
        }
        if let Some(s) = &self.s_init {
            if s.len() != d || s.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
                return Err(Error::Config("s_init must hold d positive prices".into()));
            }
        }
        if self.sigma_marginal.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Config("sigma must be positive".into()));
        }
        if self.mu.iter().any(|m| !m.is_finite()) || !self.r.is_finite() {
            return Err(Error::Config("mu and r must be finite".into()));
        }
        if !(self.v0 > 0.0 && self.v0.is_finite()) {
            return Err(Error::Config("v0 must be positive".into()));
        }
        if !(self.nu >= 0.0 && self.nu.is_finite()) {
            return Err(Error::Config("nu must be nonnegative".into()));
        }
        if !(self.day_count > 0.0 && self.day_count.is_finite()) {
            return Err(Error::Config("day_count must be positive".into()));
        }
        if self.p == 0 || self.n_days == 0 || self.n_days % self.p != 0 {
            return Err(Error::Config(format!(
                "n_days ({}) must be a positive multiple of p ({})",
                self.n_days, self.p
            )));
        }
        for i in 0..d {
            if (self.rho[i][i] - 1.0).abs() > 1e-12 {
                return Err(Error::Model("rho must have a unit diagonal".into()));
            }
            for j in 0..i {
                if (self.rho[i][j] - self.rho[j][i]).abs() > 1e-12 {
                    return Err(Error::Model("rho must be symmetric".into()));
                }
            }
        }
        self.rho_matrix()
            .cholesky()
            .ok_or_else(|| Error::Model("rho is not positive definite".into()))?;
        Ok(())
    }

    pub fn rho_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.d, self.d, |i, j| self.rho[i][j])
    }

    /// Instantaneous covariance σσᵀ with entries σ̂_iσ̂_jρ_ij.
    pub fn covariance(&self) -> DMatrix<f64> {
        let s = &self.sigma_marginal;
        DMatrix::from_fn(self.d, self.d, |i, j| s[i] * s[j] * self.rho[i][j])
    }

    /// Lower-triangular volatility matrix: row i is σ̂_i times row i of chol(ρ).
    pub fn vol_matrix(&self) -> Result<DMatrix<f64>> {
        let l = self
            .rho_matrix()
            .cholesky()
            .ok_or_else(|| Error::Model("rho is not positive definite".into()))?
            .l();
        Ok(DMatrix::from_fn(self.d, self.d, |i, j| self.sigma_marginal[i] * l[(i, j)]))
    }

    pub fn initial_prices(&self) -> Vec<f64> {
        self.s_init.clone().unwrap_or_else(|| vec![100.0; self.d])
    }

    pub fn steps(&self) -> usize {
        self.n_days / self.p
    }

    pub fn dt(&self) -> f64 {
        self.p as f64 * self.day_count
    }

    pub fn horizon(&self) -> f64 {
        self.n_days as f64 * self.day_count
    }

    pub fn time_grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self)
    }

    /// Matrix Y with Y_ij = exp(σ_i·σ_j Δt) − 1.
    pub fn increment_factor(&self) -> DMatrix<f64> {
        let dt = self.dt();
        self.covariance().map(|c| (c * dt).exp_m1())
    }

    /// Numeraire growth S⁰_N / S⁰_0.
    pub fn terminal_numeraire(&self) -> f64 {
        (self.r * self.horizon()).exp()
    }

    /// SHA-256 of the canonical JSON encoding, used to key cached artefacts.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_vec(self).expect("spec serializes");
        let digest = Sha256::digest(&json);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Trading instants t_0 < t_p < … < t_N.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    pub trading_times: Vec<f64>,
    pub dt: f64,
}

impl TimeGrid {
    pub fn new(spec: &MarketSpec) -> Result<Self> {
        if spec.p == 0 || spec.n_days % spec.p != 0 {
            return Err(Error::Config(format!(
                "n_days ({}) must be a positive multiple of p ({})",
                spec.n_days, spec.p
            )));
        }
        let dt = spec.dt();
        let trading_times = (0..=spec.steps()).map(|k| k as f64 * dt).collect();
        Ok(TimeGrid { trading_times, dt })
    }

    /// Number of trading periods M.
    pub fn steps(&self) -> usize {
        self.trading_times.len() - 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Measure {
    Physical,
    RiskNeutral,
}

/// Simulated paths on the trading grid.
///
/// Arrays are flattened row-major: `z` is `[path][step][factor]` with
/// `steps` steps, prices are `[path][time][asset]` with `steps + 1` times.
#[derive(Debug, Clone, PartialEq)]
pub struct PathBatch {
    pub measure: Measure,
    pub n_paths: usize,
    pub steps: usize,
    pub d: usize,
    pub z: Vec<f64>,
    pub s: Vec<f64>,
    pub s0: Vec<f64>,
    pub s_tilde: Vec<f64>,
}

impl PathBatch {
    /// Increments of path `i`, length `steps * d`.
    pub fn z_path(&self, i: usize) -> &[f64] {
        let w = self.steps * self.d;
        &self.z[i * w..(i + 1) * w]
    }

    pub fn s_at(&self, i: usize, k: usize) -> &[f64] {
        let off = (i * (self.steps + 1) + k) * self.d;
        &self.s[off..off + self.d]
    }

    pub fn s_tilde_at(&self, i: usize, k: usize) -> &[f64] {
        let off = (i * (self.steps + 1) + k) * self.d;
        &self.s_tilde[off..off + self.d]
    }

    /// Discounted prices of path `i` at all trading times.
    pub fn s_tilde_path(&self, i: usize) -> &[f64] {
        let w = (self.steps + 1) * self.d;
        &self.s_tilde[i * w..(i + 1) * w]
    }

    /// Increments expressed under the risk-neutral measure.
    pub fn z_risk_neutral(&self, spec: &MarketSpec) -> Result<Vec<f64>> {
        match self.measure {
            Measure::RiskNeutral => Ok(self.z.clone()),
            Measure::Physical => girsanov_shift(spec, &self.z),
        }
    }

    /// Writes one row per (path, time, asset).
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "path,time,asset,z,s,s0,s_tilde")?;
        for i in 0..self.n_paths {
            for k in 0..=self.steps {
                for j in 0..self.d {
                    let z = if k == 0 {
                        String::new()
                    } else {
                        format!("{}", self.z[(i * self.steps + k - 1) * self.d + j])
                    };
                    writeln!(
                        w,
                        "{i},{k},{j},{z},{},{},{}",
                        self.s_at(i, k)[j],
                        self.s0[k],
                        self.s_tilde_at(i, k)[j]
                    )?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Per-path generator: one ChaCha stream per path index, so a path does not
/// depend on how the batch is partitioned.
pub fn path_rng(seed: u64, path: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path as u64);
    rng
}

pub fn simulate(
    spec: &MarketSpec,
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
    measure: Measure,
) -> Result<PathBatch> {
    spec.validate()?;
    if n_paths == 0 {
        return Err(Error::Config("n_paths must be at least 1".into()));
    }
    if grid.steps() != spec.steps() || (grid.dt - spec.dt()).abs() > 1e-15 {
        return Err(Error::Config("time grid does not match the market spec".into()));
    }
    let d = spec.d;
    let steps = grid.steps();
    let sig = spec.vol_matrix()?;
    let dt = grid.dt;
    let drift: Vec<f64> = (0..d)
        .map(|i| {
            let m = match measure {
                Measure::Physical => spec.mu[i],
                Measure::RiskNeutral => spec.r,
            };
            let var: f64 = sig.row(i).iter().map(|x| x * x).sum();
            (m - 0.5 * var) * dt
        })
        .collect();
    let sqdt = dt.sqrt();
    let s_init = spec.initial_prices();

    let mut z = vec![0.0; n_paths * steps * d];
    let mut s = vec![0.0; n_paths * (steps + 1) * d];
    par::fill_strided(&mut z, steps * d, |i, row| {
        let mut rng = path_rng(seed, i);
        for x in row.iter_mut() {
            *x = StandardNormal.sample(&mut rng);
        }
    });
    par::fill_strided(&mut s, (steps + 1) * d, |i, row| {
        let zp = &z[i * steps * d..(i + 1) * steps * d];
        row[..d].copy_from_slice(&s_init);
        let mut logs: Vec<f64> = s_init.iter().map(|x| x.ln()).collect();
        for k in 0..steps {
            let zk = &zp[k * d..(k + 1) * d];
            for a in 0..d {
                let shock: f64 = (0..=a).map(|l| sig[(a, l)] * zk[l]).sum();
                logs[a] += drift[a] + sqdt * shock;
                row[(k + 1) * d + a] = logs[a].exp();
            }
        }
    });
    let s0: Vec<f64> = grid.trading_times.iter().map(|t| (spec.r * t).exp()).collect();
    let mut s_tilde = s.clone();
    for i in 0..n_paths {
        for k in 0..=steps {
            let off = (i * (steps + 1) + k) * d;
            for x in &mut s_tilde[off..off + d] {
                *x /= s0[k];
            }
        }
    }
    Ok(PathBatch { measure, n_paths, steps, d, z, s, s0, s_tilde })
}

/// Per-step shift σ⁻¹(μ − r)√Δt taking physical to risk-neutral increments.
pub fn girsanov_vector(spec: &MarketSpec) -> Result<Vec<f64>> {
    let sig = spec.vol_matrix()?;
    let excess = DVector::from_fn(spec.d, |i, _| spec.mu[i] - spec.r);
    let phi = sig
        .solve_lower_triangular(&excess)
        .filter(|v| v.iter().all(|x| x.is_finite()))
        .ok_or_else(|| Error::Model("volatility matrix is singular".into()))?;
    let sq = spec.dt().sqrt();
    Ok(phi.iter().map(|x| x * sq).collect())
}

/// Shifts flattened `[path][step][factor]` increments to the risk-neutral measure.
pub fn girsanov_shift(spec: &MarketSpec, z_physical: &[f64]) -> Result<Vec<f64>> {
    let shift = girsanov_vector(spec)?;
    if z_physical.len() % spec.d != 0 {
        return Err(Error::Shape("increment length is not a multiple of d".into()));
    }
    Ok(z_physical
        .chunks(spec.d)
        .flat_map(|zk| zk.iter().zip(&shift).map(|(z, h)| z + h))
        .collect())
}

/// Rebuilds one path of prices from increments using the drift of `measure`.
pub fn prices_from_increments(
    spec: &MarketSpec,
    z_path: &[f64],
    measure: Measure,
) -> Result<Vec<f64>> {
    let d = spec.d;
    let steps = z_path.len() / d;
    let sig = spec.vol_matrix()?;
    let dt = spec.dt();
    let mut out = spec.initial_prices();
    let mut logs: Vec<f64> = out.iter().map(|x| x.ln()).collect();
    for k in 0..steps {
        for a in 0..d {
            let m = match measure {
                Measure::Physical => spec.mu[a],
                Measure::RiskNeutral => spec.r,
            };
            let var: f64 = sig.row(a).iter().map(|x| x * x).sum();
            let shock: f64 = (0..=a).map(|l| sig[(a, l)] * z_path[k * d + l]).sum();
            logs[a] += (m - 0.5 * var) * dt + dt.sqrt() * shock;
        }
        out.extend(logs.iter().map(|x| x.exp()));
    }
    Ok(out)
}

/// Risk-neutral conditional second moment of the next discounted increment,
/// diag(S̃)·Y·diag(S̃).
pub fn cond_cov_delta_s(spec: &MarketSpec, s_tilde: &[f64]) -> DMatrix<f64> {
    let y = spec.increment_factor();
    DMatrix::from_fn(spec.d, spec.d, |i, j| s_tilde[i] * s_tilde[j] * y[(i, j)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn one_asset(mu: f64, sigma: f64) -> MarketSpec {
        MarketSpec {
            d: 1,
            mu: vec![mu],
            sigma_marginal: vec![sigma],
            rho: vec![vec![1.0]],
            r: 0.001,
            v0: 100.0,
            s_init: None,
            n_days: 4,
            p: 4,
            nu: 0.0,
            day_count: 0.0625,
        }
    }

    fn mean_se(x: &[f64]) -> (f64, f64) {
        let n = x.len() as f64;
        let m = x.iter().sum::<f64>() / n;
        let v = x.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / (n - 1.0);
        (m, (v / n).sqrt())
    }

    #[test]
    fn reference_spec_is_valid() {
        let spec = MarketSpec::reference();
        spec.validate().unwrap();
        assert_eq!(spec.steps(), 4);
        assert_relative_eq!(spec.dt(), 0.25, epsilon = 1e-15);
        let g = spec.time_grid().unwrap();
        assert_eq!(g.trading_times.len(), 5);
        assert_eq!(g.trading_times[0], 0.0);
        assert!(g.trading_times.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn vol_matrix_reproduces_covariance() {
        let spec = MarketSpec::reference();
        let s = spec.vol_matrix().unwrap();
        let c = &s * s.transpose();
        assert_relative_eq!(c, spec.covariance(), epsilon = 1e-15);
        assert_eq!(s[(0, 1)], 0.0);
    }

    #[test]
    fn rejects_bad_specs() {
        let mut s = MarketSpec::reference();
        s.n_days = 370;
        assert!(matches!(s.validate(), Err(Error::Config(_))));
        let mut s = MarketSpec::reference();
        s.rho[0][1] = 0.99;
        s.rho[1][0] = 0.99;
        s.rho[1][2] = 0.99;
        s.rho[2][1] = 0.99;
        s.rho[0][2] = -0.99;
        s.rho[2][0] = -0.99;
        assert!(matches!(s.validate(), Err(Error::Model(_))));
        let mut s = MarketSpec::reference();
        s.sigma_marginal[1] = 0.0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn numeraire_is_exact() {
        let spec = MarketSpec::reference();
        let g = spec.time_grid().unwrap();
        let b = simulate(&spec, &g, 3, 1, Measure::Physical).unwrap();
        for (k, t) in g.trading_times.iter().enumerate() {
            assert_eq!(b.s0[k], (spec.r * t).exp());
        }
    }

    #[test]
    fn zero_noise_limit_is_deterministic() {
        let mut spec = MarketSpec::reference();
        spec.sigma_marginal = vec![1e-9; 3];
        spec.rho = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
        let g = spec.time_grid().unwrap();
        let b = simulate(&spec, &g, 4, 7, Measure::Physical).unwrap();
        for i in 0..4 {
            for a in 0..3 {
                assert_relative_eq!(
                    b.s_at(i, 4)[a],
                    100.0 * (spec.mu[a] * spec.horizon()).exp(),
                    max_relative = 1e-7
                );
            }
        }
    }

    #[test]
    fn one_period_log_variance() {
        let spec = MarketSpec { n_days: 1, p: 1, day_count: 0.25, ..one_asset(0.06, 0.2) };
        let g = spec.time_grid().unwrap();
        let n = 200_000;
        let b = simulate(&spec, &g, n, 3, Measure::Physical).unwrap();
        let lr: Vec<f64> = (0..n).map(|i| (b.s_at(i, 1)[0] / b.s_at(i, 0)[0]).ln()).collect();
        let (m, _) = mean_se(&lr);
        let v = lr.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n as f64 - 1.0);
        // Var of sample variance for a normal: 2σ⁴/(n−1).
        let se = (2.0 * 0.01f64.powi(2) / n as f64).sqrt();
        assert!((v - 0.01).abs() < 3.0 * se, "{v}");
    }

    #[test]
    fn risk_neutral_discounted_prices_are_martingales() {
        let spec = MarketSpec::reference();
        let g = spec.time_grid().unwrap();
        let n = 100_000;
        let b = simulate(&spec, &g, n, 11, Measure::RiskNeutral).unwrap();
        for a in 0..3 {
            let x: Vec<f64> = (0..n).map(|i| b.s_tilde_at(i, 4)[a]).collect();
            let (m, se) = mean_se(&x);
            assert!((m - 100.0).abs() < 3.0 * se, "asset {a}: {m} ± {se}");
        }
    }

    #[test]
    fn simulation_is_deterministic_and_partition_free() {
        let spec = MarketSpec::reference();
        let g = spec.time_grid().unwrap();
        let a = simulate(&spec, &g, 1500, 5, Measure::Physical).unwrap();
        let b = par::with_threads(1, || simulate(&spec, &g, 1500, 5, Measure::Physical).unwrap());
        assert_eq!(a, b);
        let small = simulate(&spec, &g, 10, 5, Measure::Physical).unwrap();
        assert_eq!(small.z_path(9), a.z_path(9));
    }

    #[test]
    fn girsanov_one_asset() {
        let spec = MarketSpec { day_count: 0.0625, ..one_asset(0.06, 0.1) };
        let v = girsanov_vector(&spec).unwrap();
        assert_relative_eq!(v[0], 0.059 / 0.1 * 0.5, epsilon = 1e-14);
        let same = one_asset(0.001, 0.1);
        assert_eq!(girsanov_vector(&same).unwrap(), vec![0.0]);
    }

    #[test]
    fn girsanov_shifted_increments_rebuild_the_same_prices() {
        let spec = MarketSpec::reference();
        let g = spec.time_grid().unwrap();
        let b = simulate(&spec, &g, 50, 2, Measure::Physical).unwrap();
        let zq = girsanov_shift(&spec, &b.z).unwrap();
        let w = spec.steps() * spec.d;
        for i in 0..50 {
            let p = prices_from_increments(&spec, &zq[i * w..(i + 1) * w], Measure::RiskNeutral)
                .unwrap();
            let orig = &b.s[i * (w + spec.d)..(i + 1) * (w + spec.d)];
            for (x, y) in p.iter().zip(orig) {
                assert_relative_eq!(x, y, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn cond_cov_entries() {
        let spec = MarketSpec::reference();
        let c = cond_cov_delta_s(&spec, &[100.0, 100.0, 100.0]);
        assert_relative_eq!(c[(0, 2)], 1e4 * (0.1f64 * 0.2 * 0.3 * 0.25).exp_m1(), epsilon = 1e-9);
        assert_relative_eq!(c, c.transpose());
        assert!(c.clone().cholesky().is_some());
    }
}
