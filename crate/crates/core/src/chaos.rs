//! Truncated Wiener chaos on the trading grid.
//!
//! A basis element is a multi-index λ over `dims = steps * d` slots, slot
//! `(k - 1) * d + j` holding the Hermite degree applied to the increment of
//! factor `j` over trading period `k`. Indices are ordered by total degree,
//! then lexicographically with larger degrees in earlier slots first, so
//! position 0 is always the constant.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::market::{Measure, MarketSpec, PathBatch};
use crate::par;

/// Probabilists' Hermite polynomial He_i(x).
pub fn hermite_eval(degree: usize, x: f64) -> f64 {
    let (mut prev, mut cur) = (1.0, x);
    if degree == 0 {
        return prev;
    }
    for i in 1..degree {
        let next = x * cur - i as f64 * prev;
        prev = cur;
        cur = next;
    }
    cur
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|i| i as f64).product()
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiIndex {
    pub degrees: Vec<u8>,
    /// ∏ λ!.
    pub norm: f64,
    pub total: usize,
    /// Largest trading step with a nonzero degree, 0 for the constant.
    pub last_step: usize,
    /// Nonzero (slot, degree) pairs.
    pub support: Vec<(usize, usize)>,
}

impl MultiIndex {
    fn new(degrees: Vec<u8>, d: usize) -> Self {
        let support: Vec<(usize, usize)> = degrees
            .iter()
            .enumerate()
            .filter(|(_, &g)| g > 0)
            .map(|(s, &g)| (s, g as usize))
            .collect();
        let norm = support.iter().map(|&(_, g)| factorial(g)).product();
        let total = support.iter().map(|&(_, g)| g).sum();
        let last_step = support.last().map_or(0, |&(s, _)| s / d + 1);
        MultiIndex { degrees, norm, total, last_step, support }
    }

    /// Degrees of trading step `k` (1-based).
    pub fn step_part(&self, k: usize, d: usize) -> &[u8] {
        &self.degrees[(k - 1) * d..k * d]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiIndexBasis {
    pub steps: usize,
    pub d: usize,
    pub dims: usize,
    pub k: usize,
    pub indices: Vec<MultiIndex>,
    lookup: HashMap<Vec<u8>, usize>,
}

impl MultiIndexBasis {
    pub fn new(steps: usize, d: usize, k: usize) -> Result<Self> {
        let dims = steps * d;
        if dims == 0 {
            return Err(Error::Config("chaos basis needs at least one dimension".into()));
        }
        if k > u8::MAX as usize {
            return Err(Error::Config("truncation order too large".into()));
        }
        let expected = binomial(dims + k, k);
        if expected > 5e6 {
            return Err(Error::Config(format!("chaos basis too large ({expected} indices)")));
        }
        let mut indices = Vec::with_capacity(expected as usize);
        let mut cur = vec![0u8; dims];
        for total in 0..=k {
            compositions(&mut cur, 0, total, &mut |deg| {
                indices.push(MultiIndex::new(deg.to_vec(), d))
            });
        }
        let lookup = indices
            .iter()
            .enumerate()
            .map(|(i, ix)| (ix.degrees.clone(), i))
            .collect();
        Ok(MultiIndexBasis { steps, d, dims, k, indices, lookup })
    }

    pub fn for_market(spec: &MarketSpec, k: usize) -> Result<Self> {
        Self::new(spec.steps(), spec.d, k)
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn position(&self, degrees: &[u8]) -> Option<usize> {
        self.lookup.get(degrees).copied()
    }

    pub fn header(&self) -> String {
        format!(
            "dims={},K={},steps={},d={},ordering=graded-lex",
            self.dims, self.k, self.steps, self.d
        )
    }

    /// Hermite values He_0..He_K at each slot, `[slot][degree]`.
    fn hermite_table(&self, z: &[f64]) -> Vec<f64> {
        let w = self.k + 1;
        let mut t = vec![0.0; self.dims * w];
        for (s, &x) in z.iter().enumerate().take(self.dims) {
            let row = &mut t[s * w..(s + 1) * w];
            row[0] = 1.0;
            if w > 1 {
                row[1] = x;
            }
            for i in 2..w {
                row[i] = x * row[i - 1] - (i - 1) as f64 * row[i - 2];
            }
        }
        t
    }

    /// Writes H_λ(z) for every index into `out`. Slots beyond `z.len()`
    /// are treated as unobserved; indices touching them get NaN.
    pub fn eval_into(&self, z: &[f64], out: &mut [f64]) {
        let w = self.k + 1;
        let table = self.hermite_table(z);
        for (o, ix) in out.iter_mut().zip(&self.indices) {
            *o = ix.support.iter().fold(1.0, |acc, &(s, g)| {
                if s < z.len() {
                    acc * table[s * w + g]
                } else {
                    f64::NAN
                }
            });
        }
    }
}

// Fills slots from `pos` with every composition of `left`, first slot largest.
fn compositions(cur: &mut [u8], pos: usize, left: usize, f: &mut impl FnMut(&[u8])) {
    if pos + 1 == cur.len() {
        cur[pos] = left as u8;
        f(cur);
        cur[pos] = 0;
        return;
    }
    for g in (0..=left).rev() {
        cur[pos] = g as u8;
        compositions(cur, pos + 1, left - g, f);
    }
    cur[pos] = 0;
}

/// H_λ(z) for every basis index; `z` must cover all slots.
pub fn basis_eval(basis: &MultiIndexBasis, z: &[f64]) -> Result<Vec<f64>> {
    if z.len() != basis.dims {
        return Err(Error::Shape(format!(
            "expected {} increments, got {}",
            basis.dims,
            z.len()
        )));
    }
    let mut out = vec![0.0; basis.len()];
    basis.eval_into(z, &mut out);
    Ok(out)
}

/// Coefficients aligned to a basis.
#[derive(Debug, Clone, PartialEq)]
pub struct ChaosVector {
    pub basis: Arc<MultiIndexBasis>,
    pub coeffs: Vec<f64>,
}

impl ChaosVector {
    pub fn zeros(basis: Arc<MultiIndexBasis>) -> Self {
        let coeffs = vec![0.0; basis.len()];
        ChaosVector { basis, coeffs }
    }

    pub fn constant(basis: Arc<MultiIndexBasis>, c: f64) -> Self {
        let mut v = Self::zeros(basis);
        v.coeffs[0] = c;
        v
    }

    pub fn new(basis: Arc<MultiIndexBasis>, coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.len() != basis.len() {
            return Err(Error::Shape(format!(
                "expected {} coefficients, got {}",
                basis.len(),
                coeffs.len()
            )));
        }
        if coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::Data("non-finite chaos coefficient".into()));
        }
        Ok(ChaosVector { basis, coeffs })
    }

    /// Σ_λ c_λ H_λ(z).
    pub fn eval(&self, z: &[f64]) -> Result<f64> {
        let h = basis_eval(&self.basis, z)?;
        Ok(h.iter().zip(&self.coeffs).map(|(a, b)| a * b).sum())
    }

    /// Writes the header line, then one `degrees,coefficient` row per index.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "# {}", self.basis.header())?;
        writeln!(w, "degrees,coefficient")?;
        for (ix, c) in self.basis.indices.iter().zip(&self.coeffs) {
            let deg: Vec<String> = ix.degrees.iter().map(|g| g.to_string()).collect();
            writeln!(w, "{},{:e}", deg.join(" "), c)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut lines = file.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Data("empty chaos file".into()))??;
        let fields: HashMap<&str, &str> = header
            .trim_start_matches('#')
            .trim()
            .split(',')
            .filter_map(|kv| kv.split_once('='))
            .collect();
        let get = |key: &str| -> Result<usize> {
            fields
                .get(key)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Data(format!("chaos header lacks {key}")))
        };
        if fields.get("ordering") != Some(&"graded-lex") {
            return Err(Error::Data("unsupported index ordering".into()));
        }
        let basis = Arc::new(MultiIndexBasis::new(get("steps")?, get("d")?, get("K")?)?);
        let mut coeffs = vec![f64::NAN; basis.len()];
        for line in lines.skip(1) {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let (deg, c) = line
                .split_once(',')
                .ok_or_else(|| Error::Data(format!("bad chaos row: {line}")))?;
            let deg: Vec<u8> = deg
                .split_whitespace()
                .map(|g| g.parse().map_err(|_| Error::Data(format!("bad degree in: {line}"))))
                .collect::<Result<_>>()?;
            let pos = basis
                .position(&deg)
                .ok_or_else(|| Error::Data(format!("index not in basis: {line}")))?;
            coeffs[pos] = c
                .trim()
                .parse()
                .map_err(|_| Error::Data(format!("bad coefficient in: {line}")))?;
        }
        ChaosVector::new(basis, coeffs)
    }
}

/// Monte Carlo projection together with per-coefficient standard errors.
#[derive(Debug, Clone)]
pub struct ChaosFit {
    pub vector: ChaosVector,
    pub stderr: Vec<f64>,
}

/// Fits coefficients from samples `y` and risk-neutral increments `z`
/// (flattened `[path][slot]`): c_λ = mean(y·H_λ(z)) / ∏λ!.
pub fn fit_chaos_z(y: &[f64], z: &[f64], basis: &Arc<MultiIndexBasis>) -> Result<ChaosFit> {
    let n = y.len();
    if n == 0 || z.len() != n * basis.dims {
        return Err(Error::Shape("samples and increments disagree in length".into()));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite sample in chaos fit".into()));
    }
    let m = basis.len();
    let sums = par::sum_vectors(n, 2 * m, |i, acc| {
        let mut h = vec![0.0; m];
        basis.eval_into(&z[i * basis.dims..(i + 1) * basis.dims], &mut h);
        for (l, hv) in h.iter().enumerate() {
            let t = y[i] * hv;
            acc[l] += t;
            acc[m + l] += t * t;
        }
    });
    let nf = n as f64;
    let mut coeffs = vec![0.0; m];
    let mut stderr = vec![0.0; m];
    for l in 0..m {
        let mean = sums[l] / nf;
        let var = if n > 1 { ((sums[m + l] - nf * mean * mean) / (nf - 1.0)).max(0.0) } else { 0.0 };
        let norm = basis.indices[l].norm;
        coeffs[l] = mean / norm;
        stderr[l] = (var / nf).sqrt() / norm;
    }
    Ok(ChaosFit { vector: ChaosVector::new(basis.clone(), coeffs)?, stderr })
}

/// Fits the chaos expansion of per-path samples on a risk-neutral batch.
pub fn fit_chaos(y: &[f64], batch: &PathBatch, basis: &Arc<MultiIndexBasis>) -> Result<ChaosVector> {
    if batch.measure != Measure::RiskNeutral {
        return Err(Error::Data("chaos fit needs risk-neutral increments".into()));
    }
    Ok(fit_chaos_z(y, &batch.z, basis)?.vector)
}

/// Expansions of the terminal discounted prices, one per asset, fitted on a
/// risk-neutral batch.
pub fn fit_terminal_prices(batch: &PathBatch, basis: &Arc<MultiIndexBasis>) -> Result<Vec<ChaosVector>> {
    (0..batch.d)
        .map(|j| {
            let y: Vec<f64> = (0..batch.n_paths)
                .map(|i| batch.s_tilde_at(i, batch.steps)[j])
                .collect();
            fit_chaos(&y, batch, basis)
        })
        .collect()
}

/// Exact expansion of S̃^j_T: S̃^j_0 ∏ (σ_jl √Δt)^λ / λ!.
pub fn lognormal_expansion(spec: &MarketSpec, basis: &Arc<MultiIndexBasis>) -> Result<Vec<ChaosVector>> {
    let sig = spec.vol_matrix()?;
    let sq = spec.dt().sqrt();
    let s_init = spec.initial_prices();
    (0..spec.d)
        .map(|j| {
            let coeffs = basis
                .indices
                .iter()
                .map(|ix| {
                    ix.support.iter().fold(s_init[j], |acc, &(s, g)| {
                        let a = sig[(j, s % spec.d)] * sq;
                        acc * a.powi(g as i32) / factorial(g)
                    })
                })
                .collect();
            ChaosVector::new(basis.clone(), coeffs)
        })
        .collect()
}

/// Conditional expectation on the first `n` trading steps.
pub fn restrict_to_step(v: &ChaosVector, n: usize) -> ChaosVector {
    let coeffs = v
        .coeffs
        .iter()
        .zip(&v.basis.indices)
        .map(|(&c, ix)| if ix.last_step <= n { c } else { 0.0 })
        .collect();
    ChaosVector { basis: v.basis.clone(), coeffs }
}

/// How the product of history polynomials inside the bracket is truncated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Truncation {
    /// Expand the history product in Hermite polynomials and keep terms of
    /// total degree at most K: the order-K expansion of the conditional
    /// cross moment.
    #[default]
    Projected,
    /// Keep only pairs with |λ| + |λ'| ≤ K.
    SumDegree,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BracketTerm {
    pub beta: usize,
    pub eta: usize,
    pub hist: usize,
    pub weight: f64,
}

/// The bracket for the move from step `n` to `n + 1`, precompiled into
/// (β position, η position, history index, weight) terms:
/// Σ β_λ η_λ' w H_hist(z), with λ and λ' sharing a nonzero step-(n+1) part.
#[derive(Debug, Clone, PartialEq)]
pub struct BracketPlan {
    pub step: usize,
    pub truncation: Truncation,
    /// Distinct β positions that enter, ascending.
    pub columns: Vec<usize>,
    /// Terms sorted by β position.
    pub terms: Vec<BracketTerm>,
}

impl BracketPlan {
    pub fn new(basis: &MultiIndexBasis, n: usize, truncation: Truncation) -> Result<Self> {
        if n >= basis.steps {
            return Err(Error::Shape(format!("bracket step {n} outside 0..{}", basis.steps)));
        }
        let d = basis.d;
        let hist_slots = n * d;
        let z_set: Vec<usize> = (0..basis.len())
            .filter(|&i| basis.indices[i].last_step == n + 1)
            .collect();
        let mut acc: BTreeMap<(usize, usize, usize), f64> = BTreeMap::new();
        for &p in &z_set {
            let lp = &basis.indices[p];
            for &q in &z_set {
                let lq = &basis.indices[q];
                if lp.step_part(n + 1, d) != lq.step_part(n + 1, d) {
                    continue;
                }
                if truncation == Truncation::SumDegree && lp.total + lq.total > basis.k {
                    continue;
                }
                let w0: f64 = lp.step_part(n + 1, d).iter().map(|&g| factorial(g as usize)).product();
                let mut expansion: Vec<(Vec<u8>, f64)> = vec![(vec![0u8; basis.dims], w0)];
                for t in 0..hist_slots {
                    let (a, b) = (lp.degrees[t] as usize, lq.degrees[t] as usize);
                    if a == 0 && b == 0 {
                        continue;
                    }
                    let mut next = Vec::new();
                    for (key, w) in &expansion {
                        for r in 0..=a.min(b) {
                            let mut k2 = key.clone();
                            k2[t] = (a + b - 2 * r) as u8;
                            next.push((k2, w * binomial(a, r) * binomial(b, r) * factorial(r)));
                        }
                    }
                    expansion = next;
                }
                for (key, w) in expansion {
                    let total: usize = key.iter().map(|&g| g as usize).sum();
                    if total > basis.k {
                        continue;
                    }
                    let h = basis.position(&key).expect("degree within basis");
                    *acc.entry((p, q, h)).or_insert(0.0) += w;
                }
            }
        }
        let terms: Vec<BracketTerm> = acc
            .into_iter()
            .map(|((beta, eta, hist), weight)| BracketTerm { beta, eta, hist, weight })
            .collect();
        let mut columns: Vec<usize> = terms.iter().map(|t| t.beta).collect();
        columns.dedup();
        Ok(BracketPlan { step: n, truncation, columns, terms })
    }

    /// The bracket as a chaos vector over history indices.
    pub fn as_chaos(&self, beta: &ChaosVector, eta: &ChaosVector) -> Result<ChaosVector> {
        check_same_basis(beta, eta)?;
        let mut out = ChaosVector::zeros(beta.basis.clone());
        for t in &self.terms {
            out.coeffs[t.hist] += t.weight * beta.coeffs[t.beta] * eta.coeffs[t.eta];
        }
        Ok(out)
    }
}

fn check_same_basis(a: &ChaosVector, b: &ChaosVector) -> Result<()> {
    if !Arc::ptr_eq(&a.basis, &b.basis) && a.basis != b.basis {
        return Err(Error::Shape("chaos vectors use different bases".into()));
    }
    Ok(())
}

/// Evaluates the bracket of `plan` at the observed increments of steps 1..=n.
pub fn delta_bracket(
    beta: &ChaosVector,
    eta: &ChaosVector,
    plan: &BracketPlan,
    z_prefix: &[f64],
) -> Result<f64> {
    check_same_basis(beta, eta)?;
    let basis = &beta.basis;
    if z_prefix.len() < plan.step * basis.d {
        return Err(Error::Shape("increment prefix shorter than bracket step".into()));
    }
    let known = &z_prefix[..plan.step * basis.d];
    let mut h = vec![0.0; basis.len()];
    basis.eval_into(known, &mut h);
    Ok(plan
        .terms
        .iter()
        .map(|t| t.weight * beta.coeffs[t.beta] * eta.coeffs[t.eta] * h[t.hist])
        .sum())
}
