//! Linear maps from chaos coefficients β to controls, costs and wealth.
//!
//! For each path and each trading step the control is α_{n+1} = B_{n+1}β,
//! with B_{n+1} solving cond_cov · B = bracket matrix. Only the β columns
//! whose last nonzero step is n + 1 enter B_{n+1}, so each step stores a
//! dense `d × cols` block and the column sets of different steps are
//! disjoint.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::chaos::{BracketPlan, ChaosVector, MultiIndexBasis, Truncation};
use crate::error::{Error, Result};
use crate::market::{MarketSpec, PathBatch};
use crate::par;

/// Proportional cost applied to traded cash volume.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostModel {
    pub nu: f64,
    /// Charge the move out of the initial all-cash position.
    pub charge_initial: bool,
}

impl CostModel {
    pub fn free() -> Self {
        CostModel { nu: 0.0, charge_initial: false }
    }

    pub fn new(nu: f64, charge_initial: bool) -> Self {
        CostModel { nu, charge_initial }
    }

    fn rate_at(&self, n: usize) -> f64 {
        if n == 0 && !self.charge_initial {
            0.0
        } else {
            self.nu
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StrategyMaps {
    pub n_paths: usize,
    pub steps: usize,
    pub d: usize,
    /// Basis size m.
    pub m: usize,
    pub v0: f64,
    /// Numeraire at the trading times.
    pub s0: Vec<f64>,
    /// β positions entering each step, ascending.
    pub columns: Vec<Vec<usize>>,
    offsets: Vec<usize>,
    block: usize,
    b: Vec<f64>,
    /// ΔS̃_{n+1}, `[path][step][asset]`.
    ds: Vec<f64>,
    /// S̃_n at rebalancing dates n = 0..steps, `[path][step][asset]`.
    st: Vec<f64>,
}

/// Builds per-path control maps from the price expansions `eta`.
pub fn build_maps(
    eta: &[ChaosVector],
    batch: &PathBatch,
    spec: &MarketSpec,
    truncation: Truncation,
) -> Result<StrategyMaps> {
    spec.validate()?;
    let d = spec.d;
    if eta.len() != d {
        return Err(Error::Shape(format!("expected {d} price expansions, got {}", eta.len())));
    }
    let basis: Arc<MultiIndexBasis> = eta[0].basis.clone();
    if eta.iter().any(|e| *e.basis != *basis) {
        return Err(Error::Shape("price expansions use different bases".into()));
    }
    if basis.steps != batch.steps || basis.d != d || batch.d != d {
        return Err(Error::Shape("basis, batch and market disagree on the grid".into()));
    }
    let steps = batch.steps;
    let zq = batch.z_risk_neutral(spec)?;
    let y = spec.increment_factor();
    let y_inv = y
        .cholesky()
        .ok_or_else(|| Error::Numerical("conditional covariance is singular".into()))?
        .inverse();

    struct Term {
        col: usize,
        hist: usize,
        eta: Vec<f64>,
    }
    let mut columns = Vec::with_capacity(steps);
    let mut plans = Vec::with_capacity(steps);
    for n in 0..steps {
        let plan = BracketPlan::new(&basis, n, truncation)?;
        let terms: Vec<Term> = plan
            .terms
            .iter()
            .map(|t| Term {
                col: plan.columns.binary_search(&t.beta).expect("column listed"),
                hist: t.hist,
                eta: eta.iter().map(|e| t.weight * e.coeffs[t.eta]).collect(),
            })
            .collect();
        columns.push(plan.columns);
        plans.push(terms);
    }
    let mut offsets = Vec::with_capacity(steps);
    let mut block = 0;
    for c in &columns {
        offsets.push(block);
        block += d * c.len();
    }

    let m = basis.len();
    let dims = basis.dims;
    let mut b = vec![0.0; batch.n_paths * block];
    par::fill_strided(&mut b, block, |i, out| {
        let mut h = vec![0.0; m];
        basis.eval_into(&zq[i * dims..(i + 1) * dims], &mut h);
        for n in 0..steps {
            let cols = columns[n].len();
            let mut g = DMatrix::<f64>::zeros(d, cols);
            for t in &plans[n] {
                let hv = h[t.hist];
                for j in 0..d {
                    g[(j, t.col)] += t.eta[j] * hv;
                }
            }
            let st = batch.s_tilde_at(i, n);
            for j in 0..d {
                g.row_mut(j).scale_mut(1.0 / st[j]);
            }
            let mut sol = &y_inv * g;
            for j in 0..d {
                sol.row_mut(j).scale_mut(1.0 / st[j]);
            }
            let dst = &mut out[offsets[n]..offsets[n] + d * cols];
            for j in 0..d {
                for c in 0..cols {
                    dst[j * cols + c] = sol[(j, c)];
                }
            }
        }
    });
    if b.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numerical("non-finite control map".into()));
    }

    let mut ds = vec![0.0; batch.n_paths * steps * d];
    let mut st = vec![0.0; batch.n_paths * steps * d];
    for i in 0..batch.n_paths {
        for n in 0..steps {
            let (a, c) = (batch.s_tilde_at(i, n), batch.s_tilde_at(i, n + 1));
            for j in 0..d {
                ds[(i * steps + n) * d + j] = c[j] - a[j];
                st[(i * steps + n) * d + j] = a[j];
            }
        }
    }
    Ok(StrategyMaps {
        n_paths: batch.n_paths,
        steps,
        d,
        m,
        v0: spec.v0,
        s0: batch.s0.clone(),
        columns,
        offsets,
        block,
        b,
        ds,
        st,
    })
}

/// Per-path outputs of a strategy.
#[derive(Debug, Clone, PartialEq)]
pub struct PortfolioEval {
    /// Discounted terminal wealth R(β).
    pub r: Vec<f64>,
    /// Discounted cumulative cost.
    pub cost: Vec<f64>,
    /// Controls α_1..α_M, `[path][step][asset]`.
    pub controls: Vec<f64>,
}

impl PortfolioEval {
    /// Undiscounted terminal wealth R·S⁰_N.
    pub fn terminal_wealth(&self, s0_terminal: f64) -> Vec<f64> {
        self.r.iter().map(|r| r * s0_terminal).collect()
    }
}

impl StrategyMaps {
    pub fn s0_terminal(&self) -> f64 {
        self.s0[self.steps]
    }

    /// B_{n+1} for path `i`, row-major `d × columns[n].len()`.
    pub fn b_block(&self, i: usize, n: usize) -> &[f64] {
        let start = i * self.block + self.offsets[n];
        &self.b[start..start + self.d * self.columns[n].len()]
    }

    pub fn delta_s(&self, i: usize, n: usize) -> &[f64] {
        let o = (i * self.steps + n) * self.d;
        &self.ds[o..o + self.d]
    }

    pub fn s_tilde(&self, i: usize, n: usize) -> &[f64] {
        let o = (i * self.steps + n) * self.d;
        &self.st[o..o + self.d]
    }

    fn check_beta(&self, beta: &[f64]) {
        assert_eq!(beta.len(), self.m, "β has the wrong length");
    }

    /// Writes α_1..α_M of path `i` into `out` (`steps * d`).
    pub fn controls_into(&self, i: usize, beta: &[f64], out: &mut [f64]) {
        let d = self.d;
        for n in 0..self.steps {
            let cols = &self.columns[n];
            let blk = self.b_block(i, n);
            for j in 0..d {
                let row = &blk[j * cols.len()..(j + 1) * cols.len()];
                out[n * d + j] = row.iter().zip(cols).map(|(b, &c)| b * beta[c]).sum();
            }
        }
    }

    /// R(β) and the cumulative cost for path `i`, given its controls.
    fn wealth_from_controls(&self, i: usize, alpha: &[f64], cost: &CostModel) -> (f64, f64) {
        let d = self.d;
        let mut gain = 0.0;
        let mut c = 0.0;
        for n in 0..self.steps {
            let ds = self.delta_s(i, n);
            let st = self.s_tilde(i, n);
            let rate = cost.rate_at(n);
            for j in 0..d {
                let a = alpha[n * d + j];
                let prev = if n == 0 { 0.0 } else { alpha[(n - 1) * d + j] };
                gain += a * ds[j];
                if rate > 0.0 {
                    c += rate * (a - prev).abs() * st[j];
                }
            }
        }
        (self.v0 + gain - c, c)
    }

    /// R(β) for path `i`.
    pub fn path_value(&self, i: usize, beta: &[f64], cost: &CostModel) -> f64 {
        self.check_beta(beta);
        let mut alpha = vec![0.0; self.steps * self.d];
        self.controls_into(i, beta, &mut alpha);
        self.wealth_from_controls(i, &alpha, cost).0
    }

    /// R(β) for path `i`, writing the subgradient ∇R into `grad` (length m,
    /// overwritten). sign(0) is taken as 0.
    pub fn path_value_grad(&self, i: usize, beta: &[f64], cost: &CostModel, grad: &mut [f64]) -> f64 {
        self.check_beta(beta);
        let d = self.d;
        let mut alpha = vec![0.0; self.steps * d];
        self.controls_into(i, beta, &mut alpha);
        let (r, _) = self.wealth_from_controls(i, &alpha, cost);
        grad.iter_mut().for_each(|g| *g = 0.0);
        // v_n weights row j of B_{n+1}: the gain on the period plus the
        // trade into α_{n+1} at t_n and the trade out of it at t_{n+1}.
        let mut v = vec![0.0; d];
        for n in 0..self.steps {
            let ds = self.delta_s(i, n);
            let st = self.s_tilde(i, n);
            let rate = cost.rate_at(n);
            for j in 0..d {
                let a = alpha[n * d + j];
                let prev = if n == 0 { 0.0 } else { alpha[(n - 1) * d + j] };
                v[j] = ds[j] - rate * sign(a - prev) * st[j];
                if n + 1 < self.steps {
                    let next = alpha[(n + 1) * d + j];
                    v[j] += cost.rate_at(n + 1) * sign(next - a) * self.s_tilde(i, n + 1)[j];
                }
            }
            let cols = &self.columns[n];
            let blk = self.b_block(i, n);
            for (k, &c) in cols.iter().enumerate() {
                grad[c] = (0..d).map(|j| v[j] * blk[j * cols.len() + k]).sum();
            }
        }
        r
    }

    /// Terminal gain vector D with V₀ + D·β the cost-free terminal wealth.
    pub fn d_vector(&self, i: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.m];
        let d = self.d;
        for n in 0..self.steps {
            let ds = self.delta_s(i, n);
            let cols = &self.columns[n];
            let blk = self.b_block(i, n);
            for (k, &c) in cols.iter().enumerate() {
                out[c] = (0..d).map(|j| ds[j] * blk[j * cols.len() + k]).sum();
            }
        }
        out
    }

    /// Rows K_n^i = B_{n+1}^i − B_n^i as dense m-vectors, `[n][asset]`.
    pub fn k_rows(&self, i: usize) -> Vec<Vec<Vec<f64>>> {
        let d = self.d;
        let dense = |n: usize, j: usize| {
            let mut row = vec![0.0; self.m];
            let cols = &self.columns[n];
            let blk = self.b_block(i, n);
            for (k, &c) in cols.iter().enumerate() {
                row[c] = blk[j * cols.len() + k];
            }
            row
        };
        (0..self.steps)
            .map(|n| {
                (0..d)
                    .map(|j| {
                        let mut k = dense(n, j);
                        if n > 0 {
                            for (a, b) in k.iter_mut().zip(dense(n - 1, j)) {
                                *a -= b;
                            }
                        }
                        k
                    })
                    .collect()
            })
            .collect()
    }

    /// Selects a subset of paths.
    pub fn subset(&self, paths: &[usize]) -> StrategyMaps {
        let w = self.steps * self.d;
        let mut out = StrategyMaps {
            n_paths: paths.len(),
            b: Vec::with_capacity(paths.len() * self.block),
            ds: Vec::with_capacity(paths.len() * w),
            st: Vec::with_capacity(paths.len() * w),
            ..self.clone_header()
        };
        for &i in paths {
            out.b.extend_from_slice(&self.b[i * self.block..(i + 1) * self.block]);
            out.ds.extend_from_slice(&self.ds[i * w..(i + 1) * w]);
            out.st.extend_from_slice(&self.st[i * w..(i + 1) * w]);
        }
        out
    }

    fn clone_header(&self) -> StrategyMaps {
        StrategyMaps {
            n_paths: 0,
            steps: self.steps,
            d: self.d,
            m: self.m,
            v0: self.v0,
            s0: self.s0.clone(),
            columns: self.columns.clone(),
            offsets: self.offsets.clone(),
            block: self.block,
            b: Vec::new(),
            ds: Vec::new(),
            st: Vec::new(),
        }
    }

    /// Binary dump tagged with `key`, e.g. market fingerprint, basis and seed.
    pub fn save(&self, path: &Path, key: &str) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        w.write_all(MAGIC)?;
        write_u64(&mut w, key.len() as u64)?;
        w.write_all(key.as_bytes())?;
        for v in [self.n_paths, self.steps, self.d, self.m] {
            write_u64(&mut w, v as u64)?;
        }
        w.write_all(&self.v0.to_le_bytes())?;
        write_f64s(&mut w, &self.s0)?;
        for c in &self.columns {
            write_u64(&mut w, c.len() as u64)?;
            for &x in c {
                write_u64(&mut w, x as u64)?;
            }
        }
        for arr in [&self.b, &self.ds, &self.st] {
            write_f64s(&mut w, arr)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Loads a dump, failing if its key differs from `key`.
    pub fn load(path: &Path, key: &str) -> Result<Self> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Data("not a strategy map dump".into()));
        }
        let klen = read_u64(&mut r)? as usize;
        let mut kbuf = vec![0u8; klen];
        r.read_exact(&mut kbuf)?;
        if kbuf != key.as_bytes() {
            return Err(Error::Data("strategy map dump was built for another configuration".into()));
        }
        let n_paths = read_u64(&mut r)? as usize;
        let steps = read_u64(&mut r)? as usize;
        let d = read_u64(&mut r)? as usize;
        let m = read_u64(&mut r)? as usize;
        let mut f = [0u8; 8];
        r.read_exact(&mut f)?;
        let v0 = f64::from_le_bytes(f);
        let s0 = read_f64s(&mut r)?;
        let mut columns = Vec::with_capacity(steps);
        for _ in 0..steps {
            let len = read_u64(&mut r)? as usize;
            columns.push((0..len).map(|_| read_u64(&mut r).map(|x| x as usize)).collect::<Result<Vec<_>>>()?);
        }
        let mut offsets = Vec::with_capacity(steps);
        let mut block = 0;
        for c in &columns {
            offsets.push(block);
            block += d * c.len();
        }
        let b = read_f64s(&mut r)?;
        let ds = read_f64s(&mut r)?;
        let st = read_f64s(&mut r)?;
        if b.len() != n_paths * block || ds.len() != n_paths * steps * d || st.len() != ds.len() {
            return Err(Error::Data("truncated strategy map dump".into()));
        }
        Ok(StrategyMaps { n_paths, steps, d, m, v0, s0, columns, offsets, block, b, ds, st })
    }
}

const MAGIC: &[u8; 8] = b"MVCMAPS1";

fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn write_f64s(w: &mut impl Write, xs: &[f64]) -> Result<()> {
    write_u64(w, xs.len() as u64)?;
    for x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_f64s(r: &mut impl Read) -> Result<Vec<f64>> {
    let n = read_u64(r)? as usize;
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Evaluates β on every path.
pub fn evaluate_portfolio(maps: &StrategyMaps, beta: &[f64], cost: &CostModel) -> PortfolioEval {
    maps.check_beta(beta);
    let w = maps.steps * maps.d;
    let rows = par::map_indexed(maps.n_paths, |i| {
        let mut alpha = vec![0.0; w];
        maps.controls_into(i, beta, &mut alpha);
        let (r, c) = maps.wealth_from_controls(i, &alpha, cost);
        (r, c, alpha)
    });
    let mut out = PortfolioEval {
        r: Vec::with_capacity(maps.n_paths),
        cost: Vec::with_capacity(maps.n_paths),
        controls: Vec::with_capacity(maps.n_paths * w),
    };
    for (r, c, a) in rows {
        out.r.push(r);
        out.cost.push(c);
        out.controls.extend(a);
    }
    out
}

/// Subgradient of R(β) on path `i`.
pub fn grad_r(maps: &StrategyMaps, beta: &[f64], cost: &CostModel, i: usize) -> Vec<f64> {
    let mut g = vec![0.0; maps.m];
    maps.path_value_grad(i, beta, cost, &mut g);
    g
}
