//! End-to-end experiment: fit price expansions, build maps, optimize,
//! run the benchmarks, and write tables, solutions, traces and trajectories.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::benchmarks::{
    run_equal_weight, run_multiperiod_ignore_cost, run_sequential, write_controls_csv, write_wealth_csv,
    BenchmarkKind, BenchmarkRun, SequentialOptions,
};
use crate::chaos::{fit_terminal_prices, lognormal_expansion, ChaosVector, MultiIndexBasis, Truncation};
use crate::error::{Error, Result};
use crate::market::{simulate, MarketSpec, Measure, PathBatch};
use crate::metrics::{match_with_scale, perf, scale_solution, write_table5_csv, write_table6_csv, PerfStats, RiskMatch, TableRow};
use crate::optimizer::{solve, Init, OptimizerConfig, Solution};
use crate::strategy::{build_maps, evaluate_portfolio, CostModel, StrategyMaps};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EtaSource {
    /// Monte Carlo projection on `fit_paths` risk-neutral paths.
    Fit,
    /// Closed-form lognormal coefficients.
    Analytic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChaosConfig {
    #[serde(rename = "K")]
    pub k: usize,
    pub fit_paths: usize,
    #[serde(default)]
    pub truncation: Truncation,
    #[serde(default = "default_eta")]
    pub eta: EtaSource,
}

fn default_eta() -> EtaSource {
    EtaSource::Fit
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub kinds: Vec<BenchmarkKind>,
    pub gamma_u: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub fit: u64,
    pub train: u64,
    pub test: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Flags {
    #[serde(default = "yes")]
    pub first_trade_free: bool,
    #[serde(default)]
    pub uniperiod_scalar_form: bool,
    /// Equivalent to `first_trade_free = false`; both may be given if they agree.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub charge_initial: Option<bool>,
    /// Warm-start the cost-aware solve from the cost-free solution.
    #[serde(default)]
    pub warm_start: bool,
}

fn yes() -> bool {
    true
}

impl Default for Flags {
    fn default() -> Self {
        Flags { first_trade_free: true, uniperiod_scalar_form: false, charge_initial: None, warm_start: false }
    }
}

impl Flags {
    pub fn charge_initial(&self) -> bool {
        !self.first_trade_free
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatchingConfig {
    /// Trajectory dumps are written for these test paths, labelled A, B, ...
    #[serde(default = "default_named_paths")]
    pub named_paths: Vec<usize>,
}

fn default_named_paths() -> Vec<usize> {
    vec![0, 1]
}

impl Default for MatchingConfig {
    fn default() -> Self {
        MatchingConfig { named_paths: default_named_paths() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub market: MarketSpec,
    pub chaos: ChaosConfig,
    pub optimizer: OptimizerConfig,
    pub benchmarks: BenchmarkConfig,
    pub train_paths: usize,
    pub eval_paths: usize,
    pub seeds: Seeds,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub flags: Flags,
    #[serde(default)]
    pub matching: MatchingConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.market.validate()?;
        self.optimizer.validate()?;
        let s = self.seeds;
        if s.fit == s.train || s.fit == s.test || s.train == s.test {
            return Err(Error::Config("fit, train and test seeds must be distinct".into()));
        }
        if self.chaos.fit_paths < 2 || self.train_paths < 1 || self.eval_paths < 2 {
            return Err(Error::Config("path counts too small".into()));
        }
        if !(self.benchmarks.gamma_u > 0.0) {
            return Err(Error::Config("gamma_u must be positive".into()));
        }
        if let Some(c) = self.flags.charge_initial {
            if c == self.flags.first_trade_free {
                return Err(Error::Config("charge_initial contradicts first_trade_free".into()));
            }
        }
        if self.matching.named_paths.iter().any(|&i| i >= self.eval_paths) {
            return Err(Error::Config("named trajectory path outside the test set".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical TOML encoding.
    pub fn fingerprint(&self) -> String {
        hex(&Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn cost(&self) -> CostModel {
        CostModel::new(self.market.nu, self.flags.charge_initial())
    }

    fn sequential_options(&self) -> SequentialOptions {
        SequentialOptions {
            charge_initial: self.flags.charge_initial(),
            scalar_form: self.flags.uniperiod_scalar_form,
            ..Default::default()
        }
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Subset of stages to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    /// Everything, including the matched comparison.
    All,
    /// Fit the price expansions only.
    Fit,
    /// Fit, build maps and solve the cost-aware problem.
    Optimize,
    /// The four comparison strategies, without the cost-aware solve.
    Benchmarks,
    /// Risk-matched comparison of a stored solution.
    Match,
}

impl std::str::FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Stage::All),
            "fit" => Ok(Stage::Fit),
            "optimize" => Ok(Stage::Optimize),
            "benchmarks" | "benchmark" => Ok(Stage::Benchmarks),
            "match" => Ok(Stage::Match),
            other => Err(Error::Config(format!("unknown stage {other}"))),
        }
    }
}

/// Prefixes an error with the stage that raised it.
fn at<T>(stage: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{stage}: {m}")),
        Error::Model(m) => Error::Model(format!("{stage}: {m}")),
        Error::Shape(m) => Error::Shape(format!("{stage}: {m}")),
        Error::Data(m) => Error::Data(format!("{stage}: {m}")),
        Error::Numerical(m) => Error::Numerical(format!("{stage}: {m}")),
        Error::Solver(m) => Error::Solver(format!("{stage}: {m}")),
        Error::Domain(m) => Error::Domain(format!("{stage}: {m}")),
        other => other,
    })
}

/// Everything computed by a run, kept in memory for callers and tests.
#[derive(Debug, Clone, Default)]
pub struct ExperimentReport {
    pub table5: Vec<TableRow>,
    pub table6: Vec<TableRow>,
    pub matching: Option<RiskMatch>,
    pub solution_cost: Option<Solution>,
    pub solution_nocost: Option<Solution>,
    pub files: Vec<PathBuf>,
}

/// Shared intermediate state of a run.
pub struct Workspace {
    pub config: ExperimentConfig,
    pub basis: Arc<MultiIndexBasis>,
    pub eta: Vec<ChaosVector>,
    pub train: StrategyMaps,
    pub test_batch: PathBatch,
    pub test: StrategyMaps,
}

pub fn fit_eta(config: &ExperimentConfig, basis: &Arc<MultiIndexBasis>) -> Result<Vec<ChaosVector>> {
    match config.chaos.eta {
        EtaSource::Analytic => lognormal_expansion(&config.market, basis),
        EtaSource::Fit => {
            let grid = config.market.time_grid()?;
            let batch = simulate(&config.market, &grid, config.chaos.fit_paths, config.seeds.fit, Measure::RiskNeutral)?;
            fit_terminal_prices(&batch, basis)
        }
    }
}

impl Workspace {
    pub fn prepare(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let spec = &config.market;
        let basis = Arc::new(at("fit", MultiIndexBasis::for_market(spec, config.chaos.k))?);
        let eta = at("fit", fit_eta(config, &basis))?;
        let grid = spec.time_grid()?;
        let train_batch = at("simulate", simulate(spec, &grid, config.train_paths, config.seeds.train, Measure::Physical))?;
        let train = at("maps", build_maps(&eta, &train_batch, spec, config.chaos.truncation))?;
        drop(train_batch);
        let test_batch = at("simulate", simulate(spec, &grid, config.eval_paths, config.seeds.test, Measure::Physical))?;
        let test = at("maps", build_maps(&eta, &test_batch, spec, config.chaos.truncation))?;
        Ok(Workspace { config: config.clone(), basis, eta, train, test_batch, test })
    }

    pub fn solve_with(&self, cost: &CostModel, init: Init) -> Result<Solution> {
        let mut cfg = self.config.optimizer.clone();
        cfg.init = init;
        at("optimize", solve(&cfg, &self.basis, &self.train, &self.test, cost))
    }

    pub fn multi_run(&self, beta: &[f64]) -> BenchmarkRun {
        let mut run = run_multiperiod_ignore_cost(&self.test, beta, &self.config.cost());
        run.kind = BenchmarkKind::MultiPeriodIgnoreCost;
        run
    }

    pub fn stats(&self, wealth: &[f64], gamma: f64) -> Result<PerfStats> {
        let spec = &self.config.market;
        perf(wealth, spec.v0, self.test_batch.s0[self.test_batch.steps], gamma)
    }

    pub fn benchmark(&self, kind: BenchmarkKind) -> Result<BenchmarkRun> {
        let spec = &self.config.market;
        let g = self.config.benchmarks.gamma_u;
        at(
            "benchmarks",
            match kind {
                BenchmarkKind::EqualWeight => run_equal_weight(spec, &self.test_batch, self.config.flags.charge_initial()),
                BenchmarkKind::MultiPeriodIgnoreCost => Err(Error::Config("multi-period runs need a solution".into())),
                k => run_sequential(spec, &self.test_batch, k, g, &self.config.sequential_options()),
            },
        )
    }
}

/// Value and cumulative cost along one path for any control sequence, both
/// undiscounted, at every trading time.
pub fn trajectory(
    batch: &PathBatch,
    controls: &[f64],
    path: usize,
    v0: f64,
    cost: &CostModel,
) -> (Vec<f64>, Vec<f64>) {
    let (steps, d) = (batch.steps, batch.d);
    let mut r = v0;
    let mut c = 0.0;
    let mut values = vec![v0];
    let mut costs = vec![0.0];
    for n in 0..steps {
        let st0 = batch.s_tilde_at(path, n);
        let st1 = batch.s_tilde_at(path, n + 1);
        let nu = if n == 0 && !cost.charge_initial { 0.0 } else { cost.nu };
        for j in 0..d {
            let a = controls[(path * steps + n) * d + j];
            let prev = if n == 0 { 0.0 } else { controls[(path * steps + n - 1) * d + j] };
            let dc = nu * (a - prev).abs() * st0[j];
            r += a * (st1[j] - st0[j]) - dc;
            c += dc;
        }
        values.push(r * batch.s0[n + 1]);
        costs.push(c * batch.s0[n + 1]);
    }
    (values, costs)
}

fn write_trajectory_csv(
    path: &Path,
    batch: &PathBatch,
    index: usize,
    runs: &[(&str, &BenchmarkRun)],
    days_per_step: usize,
    v0: f64,
    cost: &CostModel,
) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    let d = batch.d;
    let mut header = vec!["step".to_string(), "day".to_string()];
    header.extend((1..=d).map(|j| format!("s{j}")));
    for (name, _) in runs {
        header.push(format!("{name}_value"));
        header.push(format!("{name}_cost"));
        header.extend((1..=d).map(|j| format!("{name}_alpha{j}")));
    }
    writeln!(w, "{}", header.join(","))?;
    let traj: Vec<(Vec<f64>, Vec<f64>)> = runs.iter().map(|(_, r)| trajectory(batch, &r.controls, index, v0, cost)).collect();
    for k in 0..=batch.steps {
        let mut row = vec![k.to_string(), (k * days_per_step).to_string()];
        row.extend(batch.s_at(index, k).iter().map(|x| x.to_string()));
        for ((_, run), (vals, costs)) in runs.iter().zip(&traj) {
            row.push(vals[k].to_string());
            row.push(costs[k].to_string());
            for j in 0..d {
                // Holdings chosen at t_k for the period that follows.
                let a = if k < batch.steps { run.controls[(index * batch.steps + k) * d + j] } else { f64::NAN };
                row.push(if a.is_nan() { String::new() } else { a.to_string() });
            }
        }
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub crate_version: String,
    pub config_sha256: String,
    pub seeds: Seeds,
    pub stage: Stage,
    pub threads_independent: bool,
    pub config: ExperimentConfig,
    pub files: BTreeMap<String, String>,
}

fn file_sha(path: &Path) -> Result<String> {
    Ok(hex(&Sha256::digest(std::fs::read(path)?)))
}

fn label(i: usize) -> String {
    let mut s = String::new();
    let mut k = i;
    loop {
        s.insert(0, (b'A' + (k % 26) as u8) as char);
        if k < 26 {
            break;
        }
        k = k / 26 - 1;
    }
    s
}

/// Runs the requested stages and writes every output under `output_dir`.
pub fn run_experiment(config: &ExperimentConfig, stage: Stage) -> Result<ExperimentReport> {
    config.validate()?;
    if stage == Stage::Match {
        return Err(Error::Config("the match stage needs a stored solution; use run_match".into()));
    }
    let out = &config.output_dir;
    std::fs::create_dir_all(out)?;
    let mut report = ExperimentReport::default();
    let mut files: Vec<PathBuf> = Vec::new();
    let spec = &config.market;

    if stage == Stage::Fit {
        let basis = Arc::new(MultiIndexBasis::for_market(spec, config.chaos.k)?);
        let eta = at("fit", fit_eta(config, &basis))?;
        for (j, e) in eta.iter().enumerate() {
            let p = out.join(format!("eta_asset{}.csv", j + 1));
            e.write_csv(&p)?;
            files.push(p);
        }
        return finish(config, stage, report, files);
    }

    let ws = Workspace::prepare(config)?;
    for (j, e) in ws.eta.iter().enumerate() {
        let p = out.join(format!("eta_asset{}.csv", j + 1));
        e.write_csv(&p)?;
        files.push(p);
    }
    let cost = config.cost();
    let gamma = config.optimizer.gamma;
    let gamma_u = config.benchmarks.gamma_u;

    let want = |k: BenchmarkKind| stage != Stage::Optimize && config.benchmarks.kinds.contains(&k);
    let need_nocost = want(BenchmarkKind::MultiPeriodIgnoreCost) || (stage == Stage::All && config.flags.warm_start);

    let mut rows: Vec<(BenchmarkKind, TableRow, BenchmarkRun)> = Vec::new();
    if need_nocost {
        let sol = ws.solve_with(&CostModel::free(), Init::Zeros)?;
        files.extend(write_solution(out, "nocost", &sol)?);
        if want(BenchmarkKind::MultiPeriodIgnoreCost) {
            let run = ws.multi_run(&sol.beta.coeffs);
            let stats = ws.stats(&run.wealth, gamma)?;
            rows.push((run.kind, TableRow { model: run.kind.label().into(), stats }, run));
        }
        report.solution_nocost = Some(sol);
    }

    let mut multi_cost: Option<(TableRow, BenchmarkRun)> = None;
    if matches!(stage, Stage::All | Stage::Optimize) {
        let init = match (&report.solution_nocost, config.flags.warm_start) {
            (Some(s), true) => Init::Given(s.beta.coeffs.clone()),
            _ => Init::Zeros,
        };
        let sol = ws.solve_with(&cost, init)?;
        files.extend(write_solution(out, "cost", &sol)?);
        let ev = evaluate_portfolio(&ws.test, &sol.beta.coeffs, &cost);
        let run = BenchmarkRun {
            kind: BenchmarkKind::MultiPeriodIgnoreCost,
            wealth: ev.terminal_wealth(ws.test.s0_terminal()),
            cost: ev.cost.iter().map(|c| c * ws.test.s0_terminal()).collect(),
            controls: ev.controls,
            steps: ws.test.steps,
            d: ws.test.d,
        };
        let stats = ws.stats(&run.wealth, gamma)?;
        multi_cost = Some((TableRow { model: "Multi-period with costs".into(), stats }, run));
        report.solution_cost = Some(sol);
    }

    for kind in [BenchmarkKind::UniPeriodIgnoreCost, BenchmarkKind::UniPeriodWithCost, BenchmarkKind::EqualWeight] {
        if want(kind) {
            let run = ws.benchmark(kind)?;
            let g = if kind == BenchmarkKind::EqualWeight { gamma } else { gamma_u };
            let stats = ws.stats(&run.wealth, g)?;
            rows.push((kind, TableRow { model: kind.label().into(), stats }, run));
        }
    }

    // Table rows in the order: multi ignore, multi with costs, uni ignore, uni with, equal weight.
    let mut table: Vec<TableRow> = Vec::new();
    let mut runs: Vec<(String, BenchmarkRun)> = Vec::new();
    fn take(
        k: BenchmarkKind,
        rows: &mut Vec<(BenchmarkKind, TableRow, BenchmarkRun)>,
        table: &mut Vec<TableRow>,
        runs: &mut Vec<(String, BenchmarkRun)>,
    ) {
        if let Some(pos) = rows.iter().position(|(kk, _, _)| *kk == k) {
            let (_, row, run) = rows.remove(pos);
            table.push(row);
            runs.push((slug(k), run));
        }
    }
    take(BenchmarkKind::MultiPeriodIgnoreCost, &mut rows, &mut table, &mut runs);
    if let Some((row, run)) = &multi_cost {
        table.push(row.clone());
        runs.push(("multi_cost".into(), run.clone()));
    }
    for k in [BenchmarkKind::UniPeriodIgnoreCost, BenchmarkKind::UniPeriodWithCost, BenchmarkKind::EqualWeight] {
        take(k, &mut rows, &mut table, &mut runs);
    }

    for (name, run) in &runs {
        let p = out.join(format!("wealth_{name}.csv"));
        write_wealth_csv(&p, &run.wealth)?;
        files.push(p);
        let p = out.join(format!("controls_{name}.csv"));
        write_controls_csv(&p, &run.controls, run.steps, run.d, &config.matching.named_paths)?;
        files.push(p);
    }
    if !table.is_empty() {
        let p = out.join("table5.csv");
        write_table5_csv(&p, &table)?;
        files.push(p);
    }
    report.table5 = table;

    if stage == Stage::All {
        if let (Some(sol), Some((base_row, _))) = (&report.solution_cost, &multi_cost) {
            let uni = match runs.iter().find(|(n, _)| n == "uni_cost") {
                Some((_, r)) => r.clone(),
                None => ws.benchmark(BenchmarkKind::UniPeriodWithCost)?,
            };
            let (t6, m, more) = matched_comparison(&ws, &sol.beta, base_row, &uni)?;
            files.extend(more);
            report.table6 = t6;
            report.matching = Some(m);
        }
    }

    write_summary(out, &report, &mut files)?;
    finish(config, stage, report, files)
}

/// Matched comparison for a previously stored cost-aware solution.
pub fn run_match(config: &ExperimentConfig, solution: &Path) -> Result<ExperimentReport> {
    config.validate()?;
    std::fs::create_dir_all(&config.output_dir)?;
    let ws = Workspace::prepare(config)?;
    let beta = at("match", Solution::read_beta(solution, &ws.basis))?;
    let ev = evaluate_portfolio(&ws.test, &beta.coeffs, &config.cost());
    let stats = ws.stats(&ev.terminal_wealth(ws.test.s0_terminal()), config.optimizer.gamma)?;
    let base_row = TableRow { model: "Multi-period with costs".into(), stats };
    let uni = ws.benchmark(BenchmarkKind::UniPeriodWithCost)?;
    let (table6, m, mut files) = matched_comparison(&ws, &beta, &base_row, &uni)?;
    let report = ExperimentReport { table6, matching: Some(m), ..Default::default() };
    write_summary(&config.output_dir, &report, &mut files)?;
    finish(config, Stage::Match, report, files)
}

fn slug(k: BenchmarkKind) -> String {
    match k {
        BenchmarkKind::MultiPeriodIgnoreCost => "multi_nocost",
        BenchmarkKind::UniPeriodIgnoreCost => "uni_nocost",
        BenchmarkKind::UniPeriodWithCost => "uni_cost",
        BenchmarkKind::EqualWeight => "equal_weight",
    }
    .into()
}

fn write_solution(out: &Path, name: &str, sol: &Solution) -> Result<Vec<PathBuf>> {
    let a = out.join(format!("solution_{name}.json"));
    sol.write_json(&a)?;
    let b = out.join(format!("trace_{name}.csv"));
    sol.write_trace_csv(&b)?;
    let c = out.join(format!("beta_{name}.csv"));
    sol.beta.write_csv(&c)?;
    Ok(vec![a, b, c])
}

/// Rescales the cost-aware solution to the volatility of the cost-aware
/// uni-period benchmark and compares the two on the test paths.
pub fn matched_comparison(
    ws: &Workspace,
    base: &ChaosVector,
    base_row: &TableRow,
    uni: &BenchmarkRun,
) -> Result<(Vec<TableRow>, RiskMatch, Vec<PathBuf>)> {
    let config = &ws.config;
    let out = &config.output_dir;
    let cost = config.cost();
    let uni_stats = ws.stats(&uni.wealth, config.benchmarks.gamma_u)?;
    let target_vol = uni_stats.volatility * config.market.v0;
    let sharpe = base_row
        .stats
        .sharpe
        .ok_or_else(|| Error::Domain("match: base portfolio has no Sharpe ratio".into()))?;
    let m = at("match", match_with_scale(config.optimizer.gamma, sharpe, target_vol))?;
    let scaled = at("match", scale_solution(base, m.scale))?;
    let ev = evaluate_portfolio(&ws.test, &scaled.coeffs, &cost);
    let wealth = ev.terminal_wealth(ws.test.s0_terminal());
    let multi_stats = ws.stats(&wealth, m.gamma_prime)?;
    let rows = vec![
        TableRow { model: "Multi-period with costs".into(), stats: multi_stats },
        TableRow { model: BenchmarkKind::UniPeriodWithCost.label().into(), stats: uni_stats },
    ];
    let mut files = Vec::new();
    let p = out.join("table6.csv");
    write_table6_csv(&p, &rows)?;
    files.push(p);
    let p = out.join("wealth_multi_matched.csv");
    write_wealth_csv(&p, &wealth)?;
    files.push(p);
    let p = out.join("beta_matched.csv");
    scaled.write_csv(&p)?;
    files.push(p);
    let multi = BenchmarkRun {
        kind: BenchmarkKind::MultiPeriodIgnoreCost,
        wealth,
        cost: ev.cost.iter().map(|c| c * ws.test.s0_terminal()).collect(),
        controls: ev.controls,
        steps: ws.test.steps,
        d: ws.test.d,
    };
    for (k, &i) in config.matching.named_paths.iter().enumerate() {
        let p = out.join(format!("trajectory_{}.csv", label(k)));
        write_trajectory_csv(&p, &ws.test_batch, i, &[("multi", &multi), ("uni", uni)], config.market.p, config.market.v0, &cost)?;
        files.push(p);
    }
    Ok((rows, m, files))
}

fn write_summary(out: &Path, report: &ExperimentReport, files: &mut Vec<PathBuf>) -> Result<()> {
    let p = out.join("summary.txt");
    let mut w = std::io::BufWriter::new(std::fs::File::create(&p)?);
    let fmt = |x: Option<f64>| x.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    if !report.table5.is_empty() {
        writeln!(w, "{:<40} {:>9} {:>9} {:>11} {:>9}", "model", "return%", "vol%", "min-var", "sharpe")?;
        for r in &report.table5 {
            let s = &r.stats;
            writeln!(
                w,
                "{:<40} {:>9.2} {:>9.2} {:>11.5} {:>9}",
                r.model,
                100.0 * s.rate_of_return,
                100.0 * s.volatility,
                s.min_var,
                fmt(s.sharpe)
            )?;
        }
    }
    for (name, sol) in [("cost", &report.solution_cost), ("nocost", &report.solution_nocost)] {
        if let Some(s) = sol {
            writeln!(
                w,
                "solution {name}: certificate {:.4e} (stderr {:.4e}, converged {}), objective {:.5}",
                s.certificate.residual,
                s.certificate.stderr,
                s.converged(),
                s.objective
            )?;
        }
    }
    if let Some(m) = &report.matching {
        writeln!(w, "matched risk aversion {:.5}, scale {:.5}", m.gamma_prime, m.scale)?;
        for r in &report.table6 {
            writeln!(
                w,
                "{:<40} gamma {:.4} return% {:.2} vol% {:.2} sharpe {}",
                r.model,
                r.stats.gamma,
                100.0 * r.stats.rate_of_return,
                100.0 * r.stats.volatility,
                fmt(r.stats.sharpe)
            )?;
        }
    }
    w.flush()?;
    files.push(p);
    Ok(())
}

fn finish(config: &ExperimentConfig, stage: Stage, mut report: ExperimentReport, files: Vec<PathBuf>) -> Result<ExperimentReport> {
    let mut hashes = BTreeMap::new();
    for f in &files {
        let name = f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        hashes.insert(name, file_sha(f)?);
    }
    let manifest = Manifest {
        crate_version: env!("CARGO_PKG_VERSION").into(),
        config_sha256: config.fingerprint(),
        seeds: config.seeds,
        stage,
        threads_independent: true,
        config: config.clone(),
        files: hashes,
    };
    let p = config.output_dir.join("manifest.json");
    std::fs::write(&p, serde_json::to_string_pretty(&manifest).map_err(|e| Error::Data(e.to_string()))?)?;
    report.files = files;
    report.files.push(p);
    Ok(report)
}

/// Reads a manifest and returns its embedded configuration.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("bad manifest: {e}")))
}

/// Recomputes results-table rows from the per-path wealth files of a previous run.
pub fn report_from_dir(dir: &Path) -> Result<Vec<TableRow>> {
    let manifest = load_manifest(&dir.join("manifest.json"))?;
    let cfg = &manifest.config;
    let s0n = cfg.market.terminal_numeraire();
    let mut rows = Vec::new();
    for (name, model, g) in [
        ("multi_nocost", BenchmarkKind::MultiPeriodIgnoreCost.label(), cfg.optimizer.gamma),
        ("multi_cost", "Multi-period with costs", cfg.optimizer.gamma),
        ("uni_nocost", BenchmarkKind::UniPeriodIgnoreCost.label(), cfg.benchmarks.gamma_u),
        ("uni_cost", BenchmarkKind::UniPeriodWithCost.label(), cfg.benchmarks.gamma_u),
        ("equal_weight", BenchmarkKind::EqualWeight.label(), cfg.optimizer.gamma),
    ] {
        let p = dir.join(format!("wealth_{name}.csv"));
        if !p.exists() {
            continue;
        }
        let text = std::fs::read_to_string(&p)?;
        let wealth: Vec<f64> = text
            .lines()
            .skip(1)
            .filter(|l| !l.is_empty())
            .map(|l| {
                l.split(',')
                    .nth(1)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| Error::Data(format!("bad wealth row in {}", p.display())))
            })
            .collect::<Result<_>>()?;
        rows.push(TableRow { model: model.into(), stats: perf(&wealth, cfg.market.v0, s0n, g)? });
    }
    Ok(rows)
}
