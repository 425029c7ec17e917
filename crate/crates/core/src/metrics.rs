//! Performance statistics of terminal wealth and risk-aversion matching.
//!
//! Standard errors come from the delta method: each statistic is written as
//! a smooth function of sample moments and its influence function is
//! averaged over the sample.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::chaos::ChaosVector;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerfStats {
    pub n: usize,
    /// Mean terminal wealth.
    pub mean_terminal: f64,
    /// mean / V₀ − 1.
    pub rate_of_return: f64,
    /// std / V₀.
    pub volatility: f64,
    /// mean − γ·variance.
    pub min_var: f64,
    /// (mean − V₀S⁰_N) / std; absent when the wealth is degenerate.
    pub sharpe: Option<f64>,
    pub gamma: f64,
    pub se_mean: f64,
    pub se_return: f64,
    pub se_volatility: f64,
    pub se_min_var: f64,
    pub se_sharpe: Option<f64>,
}

/// Statistics of undiscounted terminal wealth samples.
pub fn perf(wealth: &[f64], v0: f64, s0_terminal: f64, gamma: f64) -> Result<PerfStats> {
    let n = wealth.len();
    if n < 2 {
        return Err(Error::Data("performance statistics need at least two samples".into()));
    }
    if wealth.iter().any(|w| !w.is_finite()) {
        return Err(Error::Data("non-finite terminal wealth".into()));
    }
    let nf = n as f64;
    // Sort-free two-pass moments, summed in a fixed order.
    let mean = wealth.iter().sum::<f64>() / nf;
    let var = wealth.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / (nf - 1.0);
    let std = var.sqrt();
    let se_of = |f: &dyn Fn(f64) -> f64| -> f64 {
        let vals: Vec<f64> = wealth.iter().map(|&w| f(w)).collect();
        let m = vals.iter().sum::<f64>() / nf;
        (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (nf - 1.0) / nf).sqrt()
    };
    let se_mean = std / nf.sqrt();
    let se_var = se_of(&|w| (w - mean).powi(2));
    let degenerate = std <= 1e-12 * mean.abs().max(1.0);
    let (sharpe, se_sharpe) = if degenerate {
        (None, None)
    } else {
        let sr = (mean - v0 * s0_terminal) / std;
        let se = se_of(&|w| (w - mean) / std - sr * ((w - mean).powi(2) - var) / (2.0 * var));
        (Some(sr), Some(se))
    };
    Ok(PerfStats {
        n,
        mean_terminal: mean,
        rate_of_return: mean / v0 - 1.0,
        volatility: std / v0,
        min_var: mean - gamma * var,
        sharpe,
        gamma,
        se_mean,
        se_return: se_mean / v0,
        se_volatility: if degenerate { 0.0 } else { se_var / (2.0 * std) / v0 },
        se_min_var: se_of(&|w| w - gamma * (w - mean).powi(2)),
        se_sharpe,
    })
}

/// Outcome of matching a zero-gradient portfolio to a target volatility.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskMatch {
    pub gamma_prime: f64,
    /// Scale applied to the non-constant coefficients, γ / γ'.
    pub scale: f64,
}

/// γ' = Sharpe / (2·target_vol), with the volatility in currency units.
pub fn match_risk_aversion(sharpe: f64, target_vol: f64) -> Result<f64> {
    if !(sharpe > 0.0 && sharpe.is_finite()) || !(target_vol > 0.0 && target_vol.is_finite()) {
        return Err(Error::Domain("Sharpe ratio and target volatility must be positive".into()));
    }
    Ok(sharpe / (2.0 * target_vol))
}

/// γ' together with the strategy scale u = 2γ·target_vol / Sharpe.
pub fn match_with_scale(gamma: f64, sharpe: f64, target_vol: f64) -> Result<RiskMatch> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::Domain("gamma must be positive".into()));
    }
    let gamma_prime = match_risk_aversion(sharpe, target_vol)?;
    Ok(RiskMatch { gamma_prime, scale: 2.0 * gamma * target_vol / sharpe })
}

/// Scales every non-constant coefficient by `u`.
pub fn scale_solution(beta: &ChaosVector, u: f64) -> Result<ChaosVector> {
    if !(u > 0.0 && u.is_finite()) {
        return Err(Error::Domain("scale factor must be positive".into()));
    }
    let mut out = beta.clone();
    for c in out.coeffs.iter_mut().skip(1) {
        *c *= u;
    }
    Ok(out)
}

/// One row of a results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub model: String,
    pub stats: PerfStats,
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(String::new, |v| format!("{v:.5}"))
}

/// model, return %, vol %, Min-Var, Sharpe and their standard errors.
pub fn write_table5_csv(path: &Path, rows: &[TableRow]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "model,return_pct,vol_pct,min_var,sharpe,se_return_pct,se_vol_pct,se_min_var,se_sharpe")?;
    for r in rows {
        let s = &r.stats;
        writeln!(
            w,
            "{},{:.4},{:.4},{:.5},{},{:.4},{:.4},{:.5},{}",
            r.model,
            100.0 * s.rate_of_return,
            100.0 * s.volatility,
            s.min_var,
            fmt_opt(s.sharpe),
            100.0 * s.se_return,
            100.0 * s.se_volatility,
            s.se_min_var,
            fmt_opt(s.se_sharpe)
        )?;
    }
    w.flush()?;
    Ok(())
}

/// model, risk aversion, return %, vol %, Min-Var, Sharpe.
pub fn write_table6_csv(path: &Path, rows: &[TableRow]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "model,risk_aversion,return_pct,vol_pct,min_var,sharpe,se_return_pct,se_sharpe")?;
    for r in rows {
        let s = &r.stats;
        writeln!(
            w,
            "{},{:.4},{:.4},{:.4},{:.5},{},{:.4},{}",
            r.model,
            s.gamma,
            100.0 * s.rate_of_return,
            100.0 * s.volatility,
            s.min_var,
            fmt_opt(s.sharpe),
            100.0 * s.se_return,
            fmt_opt(s.se_sharpe)
        )?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn cash_has_no_sharpe() {
        let g = (0.001f64).exp();
        let p = perf(&[100.0 * g; 10], 100.0, g, 0.05).unwrap();
        assert_relative_eq!(p.rate_of_return, g - 1.0, epsilon = 1e-14);
        assert_eq!(p.volatility, 0.0);
        assert!(p.sharpe.is_none());
    }

    #[test]
    fn min_var_identity_matches_reported_rows() {
        // (return %, vol %, Min-Var) triples from the reference results table.
        let rows = [
            (13.24f64, 12.17, 105.83087),
            (12.31, 11.00, 106.26365),
            (10.44, 10.00, 105.43191),
            (11.00, 10.72, 105.24599),
            (5.69, 5.70, 104.06893),
        ];
        for (ret, vol, mv) in rows {
            let implied = 100.0 + ret - 0.05 * vol * vol;
            // Two-decimal rounding of return and vol bounds the discrepancy.
            assert!((implied - mv).abs() < 0.005 + 0.05 * 2.0 * vol * 0.005 + 1e-9, "{implied} vs {mv}");
        }
    }

    #[test]
    fn statistics_of_a_known_sample() {
        let w = [90.0, 100.0, 110.0, 120.0];
        let p = perf(&w, 100.0, 1.0, 0.05).unwrap();
        let var: f64 = (225.0 + 25.0 + 25.0 + 225.0) / 3.0;
        assert_relative_eq!(p.mean_terminal, 105.0);
        assert_relative_eq!(p.volatility, var.sqrt() / 100.0);
        assert_relative_eq!(p.min_var, 105.0 - 0.05 * var);
        assert_relative_eq!(p.sharpe.unwrap(), 5.0 / var.sqrt());
        assert!(perf(&[1.0], 100.0, 1.0, 0.05).is_err());
    }

    #[test]
    fn sharpe_stderr_matches_normal_theory() {
        // For normal samples se(SR) ≈ √((1 + SR²/2)/n).
        use rand::SeedableRng;
        use rand_distr::{Distribution, Normal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let dist = Normal::new(110.0, 10.0).unwrap();
        let w: Vec<f64> = (0..200_000).map(|_| dist.sample(&mut rng)).collect();
        let p = perf(&w, 100.0, 1.0, 0.05).unwrap();
        let sr = p.sharpe.unwrap();
        assert_relative_eq!(p.se_sharpe.unwrap(), ((1.0 + sr * sr / 2.0) / 2e5).sqrt(), max_relative = 0.03);
    }

    #[test]
    fn matching() {
        let g = match_risk_aversion(1.11033, 10.72).unwrap();
        assert!((g - 0.05179).abs() < 1e-5);
        // A γ-optimal portfolio with Sharpe 1.2 at γ = 0.05 has volatility 12.
        let m = match_with_scale(0.05, 1.2, 12.0).unwrap();
        assert_relative_eq!(m.gamma_prime, 0.05, max_relative = 1e-12);
        assert_relative_eq!(m.scale, 1.0, max_relative = 1e-12);
        assert_eq!(match_risk_aversion(1.0, 20.0).unwrap(), match_risk_aversion(1.0, 10.0).unwrap() / 2.0);
        assert!(matches!(match_risk_aversion(-1.0, 1.0), Err(Error::Domain(_))));
        assert!(matches!(match_risk_aversion(1.0, 0.0), Err(Error::Domain(_))));
    }

    proptest! {
        #[test]
        fn perf_is_permutation_invariant(mut w in prop::collection::vec(50.0..150.0f64, 2..40), k in 0usize..40) {
            let a = perf(&w, 100.0, 1.0, 0.05).unwrap();
            let len = w.len();
            w.rotate_left(k % len);
            w.reverse();
            let b = perf(&w, 100.0, 1.0, 0.05).unwrap();
            prop_assert!((a.mean_terminal - b.mean_terminal).abs() < 1e-10);
            prop_assert!((a.volatility - b.volatility).abs() < 1e-10);
            prop_assert!((a.min_var - b.min_var).abs() < 1e-8);
        }

        #[test]
        fn min_var_identity(w in prop::collection::vec(50.0..150.0f64, 2..40), g in 0.0..1.0f64) {
            let p = perf(&w, 100.0, 1.0, g).unwrap();
            let implied = p.mean_terminal - g * (p.volatility * 100.0).powi(2);
            prop_assert!((p.min_var - implied).abs() <= 1e-9 * p.min_var.abs().max(1.0));
        }
    }
}
