use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use fcrpeak::dp::{
    backward_recursion, evaluate_value_rule, read_value_functions, terminal_functions, write_value_functions, DpConfig,
    DpResult, Planner, TuningGrid, ValueFunction,
};
use fcrpeak::robustfcr::{solve_fcr_only, RechargeDecision};
use fcrpeak::scenarios::{fast_forward_reduce, ReductionCost, ScenarioSet};
use fcrpeak::sim::{mc_violation_rate, mean_results, run_all, write_report, write_trace, MonthResult, Strategy};

use crate::pipeline::{self, Prepared};
use crate::{CliError, RunConfig};

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>, CliError> {
    fs::create_dir_all(dir)?;
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn write_capacity<W: Write>(out: W, decs: &[&RechargeDecision]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["site", "k", "r_mw"])?;
    for (s, d) in decs.iter().enumerate() {
        for (k, r) in d.r.iter().enumerate() {
            w.write_record([s.to_string(), k.to_string(), format!("{r}")])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_recharge<W: Write>(out: W, decs: &[&RechargeDecision]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["site", "k", "i", "value"])?;
    for (s, d) in decs.iter().enumerate() {
        for (k, i, v) in d.band_triples() {
            w.write_record([s.to_string(), k.to_string(), i.to_string(), format!("{v}")])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Per-site state: given values, or the expected daily peak of each site.
fn state_or_default(state: Option<&[f64]>, prep: &Prepared) -> Result<Vec<f64>, CliError> {
    match state {
        Some(s) if s.len() != prep.specs.len() => Err(CliError::Config(format!(
            "--state: {} values for {} sites",
            s.len(),
            prep.specs.len()
        ))),
        Some(s) => Ok(s.to_vec()),
        None => Ok(prep.consumption.iter().map(ScenarioSet::expected_max).collect()),
    }
}

/// Next-day value functions: day `day` of per-site files, or the end-of-month
/// peak charge.
fn next_values(cfg: &RunConfig, files: &[PathBuf], day: usize) -> Result<Vec<ValueFunction>, CliError> {
    if files.is_empty() {
        return Ok(terminal_functions(cfg.sites.len(), &cfg.tariffs));
    }
    if files.len() != cfg.sites.len() {
        return Err(CliError::Config(format!("--values: {} files for {} sites", files.len(), cfg.sites.len())));
    }
    files
        .iter()
        .map(|p| {
            let all = read_value_functions(BufReader::new(File::open(p)?))?;
            all.get(day.wrapping_sub(1))
                .cloned()
                .ok_or_else(|| CliError::Config(format!("--day: {} holds no day {day}", p.display())))
        })
        .collect()
}

#[derive(Debug, Clone, Default)]
pub struct SolveDayArgs {
    pub state: Option<Vec<f64>>,
    pub values: Vec<PathBuf>,
    pub day: usize,
}

/// Writes `r.csv`, `recharge.csv`, `ps_bounds.csv` and `solve_report.txt`.
pub fn solve_day(cfg: &RunConfig, seed: u64, out: &Path, args: &SolveDayArgs) -> Result<f64, CliError> {
    let prep = pipeline::prepare(cfg, seed)?;
    let state = state_or_default(args.state.as_deref(), &prep)?;
    let next = next_values(cfg, &args.values, args.day)?;
    let dec = prep.model().solve_day(&state, &next, Default::default())?;
    let decs: Vec<&RechargeDecision> = dec.sites.iter().map(|s| &s.decision).collect();
    write_capacity(create(out, "r.csv")?, &decs)?;
    write_recharge(create(out, "recharge.csv")?, &decs)?;
    let mut w = csv::Writer::from_writer(create(out, "ps_bounds.csv")?);
    w.write_record(["site", "k", "p_min_ps_mw", "p_max_ps_mw", "e_min_ps_mwh", "e_max_ps_mwh"])?;
    for (s, plan) in dec.sites.iter().enumerate() {
        let b = &plan.bounds;
        for k in 0..b.n_t() {
            w.write_record([
                s.to_string(),
                k.to_string(),
                format!("{}", b.p_min_ps[k]),
                format!("{}", b.p_max_ps[k]),
                format!("{}", b.e_min_ps[k]),
                format!("{}", b.e_max_ps[k]),
            ])?;
        }
    }
    w.flush()?;
    let mut rep = String::new();
    let _ = writeln!(rep, "status: {:?}", dec.solution.status);
    let _ = writeln!(rep, "objective_eur: {:.6}", dec.objective);
    let _ = writeln!(rep, "fcr_revenue_eur: {:.6}", dec.revenue);
    let _ = writeln!(rep, "r_agg_mw: {:.6}", dec.r_agg);
    for (i, s) in state.iter().enumerate() {
        let _ = writeln!(rep, "state_site{i}_mw: {s:.6}");
    }
    let _ = writeln!(rep, "seed: {seed}");
    create(out, "solve_report.txt")?.write_all(rep.as_bytes())?;
    Ok(dec.r_agg)
}

/// Writes `fcr_only.csv`, `fcr_only_recharge.csv` and, with a positive
/// `mc_days`, `fcr_only_violations.csv`.
pub fn fcr_only(cfg: &RunConfig, seed: u64, out: &Path, mc_days: usize) -> Result<f64, CliError> {
    let grid = cfg.time_grid();
    let prep_u = {
        let full = pipeline::frequency_set(cfg, seed)?;
        fcrpeak::freqmodel::build_uncertainty_set(full.rows(), cfg.fcr.epsilon, Default::default())?
    };
    let mut decs = Vec::with_capacity(cfg.sites.len());
    for s in &cfg.sites {
        let (d, _) = solve_fcr_only(&s.battery, &grid, &prep_u, &cfg.tariffs, cfg.fcr.n_rc, &cfg.solver)?;
        decs.push(d);
    }
    let refs: Vec<&RechargeDecision> = decs.iter().collect();
    write_capacity(create(out, "fcr_only.csv")?, &refs)?;
    write_recharge(create(out, "fcr_only_recharge.csv")?, &refs)?;
    if mc_days > 0 {
        let mut w = csv::Writer::from_writer(create(out, "fcr_only_violations.csv")?);
        w.write_record(["site", "days", "energy_min", "energy_max", "power_min", "power_max", "any"])?;
        for (i, (s, d)) in cfg.sites.iter().zip(&decs).enumerate() {
            let v = mc_violation_rate(d, &s.battery, &grid, &cfg.frequency.params, mc_days, seed.wrapping_add(7 + i as u64))?;
            w.write_record([
                i.to_string(),
                v.days.to_string(),
                format!("{}", v.energy_min),
                format!("{}", v.energy_max),
                format!("{}", v.power_min),
                format!("{}", v.power_max),
                format!("{}", v.any),
            ])?;
        }
        w.flush()?;
    }
    Ok(decs.iter().map(RechargeDecision::capacity).sum())
}

/// `E[max]` of a set and of its reductions under both costs.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasRow {
    pub site: usize,
    pub cost: ReductionCost,
    pub full_expected_max: f64,
    pub reduced_expected_max: f64,
    pub distance: f64,
}

impl BiasRow {
    pub fn bias(&self) -> f64 {
        self.reduced_expected_max - self.full_expected_max
    }
}

/// Writes `reduced_{euclidean,peak}_site{i}.csv`, `reduced_frequency.csv`
/// and `bias.csv`.
pub fn reduce(cfg: &RunConfig, seed: u64, out: &Path) -> Result<Vec<BiasRow>, CliError> {
    let target = cfg.scenarios.n_vr;
    let mut rows = Vec::new();
    for i in 0..cfg.sites.len() {
        let full = pipeline::consumption_set(cfg, i, seed)?;
        if target > full.len() {
            return Err(CliError::Config(format!(
                "scenarios.n_vr: target count {target} exceeds the {} available days of site {i}",
                full.len()
            )));
        }
        for (cost, key) in [(ReductionCost::Euclidean, "euclidean"), (ReductionCost::PeakAbs, "peak")] {
            let red = fast_forward_reduce(&full, target, cost)?;
            red.set.write_weighted_csv(create(out, &format!("reduced_{key}_site{i}.csv"))?)?;
            rows.push(BiasRow {
                site: i,
                cost,
                full_expected_max: full.expected_max(),
                reduced_expected_max: red.set.expected_max(),
                distance: red.distance,
            });
        }
    }
    let freq = pipeline::frequency_set(cfg, seed)?;
    let fr = pipeline::reduce(&freq, cfg.scenarios.n_wr, ReductionCost::Euclidean, "scenarios.n_wr")?;
    fr.write_weighted_csv(create(out, "reduced_frequency.csv")?)?;
    let mut w = csv::Writer::from_writer(create(out, "bias.csv")?);
    w.write_record(["site", "cost", "full_expected_max_mw", "reduced_expected_max_mw", "bias_mw", "distance"])?;
    for r in &rows {
        let key = match r.cost {
            ReductionCost::Euclidean => "euclidean",
            ReductionCost::PeakAbs => "peak",
        };
        w.write_record([
            r.site.to_string(),
            key.to_string(),
            format!("{}", r.full_expected_max),
            format!("{}", r.reduced_expected_max),
            format!("{}", r.bias()),
            format!("{}", r.distance),
        ])?;
    }
    w.flush()?;
    Ok(rows)
}

/// Tunes the rule-based controllers for one day and writes `tune.csv`.
pub fn tune(cfg: &RunConfig, seed: u64, out: &Path, args: &SolveDayArgs) -> Result<(), CliError> {
    let gens = pipeline::generators(cfg, "tune")?;
    let prep = pipeline::prepare(cfg, seed)?;
    let model = prep.model();
    let state = state_or_default(args.state.as_deref(), &prep)?;
    let next = next_values(cfg, &args.values, args.day)?;
    let src = pipeline::pool_source(cfg, &gens);
    let (tune_pool, eval_pool) = src.pools(&model, args.day.max(1), cfg.dp.n_eval, seed)?;
    let pv = evaluate_value_rule(&model, Planner::Combined, &state, &next, &tune_pool, &eval_pool, &TuningGrid::default())?;
    let mut w = csv::Writer::from_writer(create(out, "tune.csv")?);
    w.write_record(["site", "state_mw", "p_thr_init_mw", "z_sigma", "r_agg_mw", "value_eur", "half_width_eur"])?;
    for (i, p) in pv.params.iter().enumerate() {
        w.write_record([
            i.to_string(),
            format!("{}", state[i]),
            format!("{}", p.p_thr_init),
            format!("{}", p.z_sigma),
            format!("{}", pv.r_agg),
            format!("{}", pv.value),
            format!("{}", pv.half_width),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn strategy_key(s: Strategy) -> &'static str {
    match s {
        Strategy::Baseline => "baseline",
        Strategy::PeakOnly => "peak_only",
        Strategy::FcrOnly => "fcr_only",
        Strategy::Combined => "combined",
    }
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(|| "-".to_string(), |v| format!("{v:.6}"))
}

fn write_months<W: Write>(out: W, months: &[Vec<MonthResult>]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "month",
        "scenario",
        "peak_power_mw",
        "peak_cost_eur",
        "avg_fcr_capacity_mw",
        "fcr_revenue_eur",
        "elec_cost_eur",
        "net_profit_eur",
        "compliance_events",
    ])?;
    for (m, rows) in months.iter().enumerate() {
        for r in rows {
            w.write_record([
                m.to_string(),
                strategy_key(r.strategy).to_string(),
                format!("{:.6}", r.peak_power),
                format!("{:.6}", r.peak_cost),
                opt(r.average_fcr_capacity),
                opt(r.fcr_revenue),
                opt(r.elec_cost),
                opt(r.net_profit),
                r.compliance_events.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_values(out: &Path, prefix: &str, dp: &DpResult) -> Result<(), CliError> {
    let n_sites = dp.terminal.len();
    for i in 0..n_sites {
        let per_day: Vec<ValueFunction> = dp.days.iter().map(|d| d.fitted[i].clone()).collect();
        write_value_functions(&per_day, create(out, &format!("{prefix}_site{i}.csv"))?)?;
    }
    Ok(())
}

/// Runs the backward recursions, then `month.months` seeded months of all
/// four strategies. Writes `report.csv` (means), `report_months.csv`, the
/// value functions and the traces of the first month.
pub fn run_month(cfg: &RunConfig, seed: u64, out: &Path) -> Result<Vec<MonthResult>, CliError> {
    let gens = pipeline::generators(cfg, "run-month")?;
    let prep = pipeline::prepare(cfg, seed)?;
    let model = prep.model();
    let src = pipeline::pool_source(cfg, &gens);
    let mut dcfg = DpConfig {
        n_days: cfg.dp.n_days,
        grid_points: cfg.dp.grid_points,
        n_segments: cfg.dp.n_segments,
        n_eval: cfg.dp.n_eval,
        seed,
        design: cfg.dp.design,
        ..Default::default()
    };
    let combined = backward_recursion(&model, &src, &dcfg)?;
    dcfg.planner = Planner::PeakOnly;
    let peak = backward_recursion(&model, &src, &dcfg)?;
    write_values(out, "value_functions", &combined)?;
    write_values(out, "peak_value_functions", &peak)?;

    let setup = pipeline::month_setup(cfg, &prep, &gens);
    let mut months = Vec::with_capacity(cfg.month.months);
    for m in 0..cfg.month.months {
        let res = run_all(&setup, &combined, Some(&peak), seed.wrapping_add(1000 + m as u64))?;
        if m == 0 {
            for (r, t) in &res {
                for (i, rows) in t.rows.iter().enumerate() {
                    write_trace(rows, create(out, &format!("trace_{}_site{i}.csv", strategy_key(r.strategy)))?)?;
                }
            }
        }
        months.push(res.into_iter().map(|(r, _)| r).collect::<Vec<_>>());
    }
    write_months(create(out, "report_months.csv")?, &months)?;
    let mean = mean_results(&months)?;
    write_report(&mean, create(out, "report.csv")?)?;
    Ok(mean)
}

/// Renders a report CSV as an aligned text table.
pub fn render_report(path: &Path) -> Result<String, CliError> {
    let mut r = csv::Reader::from_reader(BufReader::new(File::open(path)?));
    let mut table: Vec<Vec<String>> = vec![r.headers()?.iter().map(str::to_string).collect()];
    for rec in r.records() {
        table.push(rec?.iter().map(str::to_string).collect());
    }
    let n_cols = table.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..n_cols)
        .map(|c| table.iter().filter_map(|row| row.get(c)).map(String::len).max().unwrap_or(0))
        .collect();
    let mut s = String::new();
    for row in &table {
        let cells: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, v)| if c == 0 { format!("{v:<w$}", w = widths[c]) } else { format!("{v:>w$}", w = widths[c]) })
            .collect();
        let _ = writeln!(s, "{}", cells.join("  "));
    }
    Ok(s)
}
