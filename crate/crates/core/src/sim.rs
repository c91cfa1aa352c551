//! Closed-loop monthly simulation through the battery model with true
//! efficiencies, and the monthly cost and revenue accounts.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::control::{self, ControllerParams, FcrRuntime, FcrStats, RuleState};
use crate::cooptimizer::SitePlan;
use crate::domain::{energy_update_hours, stored_rate, BatterySpec, Tariffs, TimeGrid};
use crate::dp::{self, DpResult, MonthModel, Planner, PoolSource, TuningGrid, ValueFunction};
use crate::error::{Error, Result};
use crate::freqmodel::{fold, substeps};
use crate::robustfcr::{PsBounds, RechargeDecision};
use crate::scenarios::{stream_rng, ConsumptionParams, FrequencyParams};

const BOUND_TOL: f64 = 1e-9;

/// Which bound a compliance event hit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Bound {
    EnergyMin,
    EnergyMax,
    PowerMin,
    PowerMax,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComplianceEvent {
    pub day: usize,
    pub step: usize,
    pub site: usize,
    pub bound: Bound,
    /// Amount clipped (MW or MWh).
    pub excess: f64,
}

/// One step of one site.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub day: usize,
    pub step: usize,
    pub profile_mw: f64,
    pub ps_mw: f64,
    pub fcr_mw: f64,
    pub grid_mw: f64,
    pub e_bat_mwh: f64,
}

/// Runtime setup of one site for one day.
#[derive(Debug, Clone)]
pub struct SiteDay<'a> {
    pub spec: &'a BatterySpec,
    pub decision: &'a RechargeDecision,
    pub bounds: &'a PsBounds,
    pub stats: &'a FcrStats,
    /// `None` disables peak shaving.
    pub params: Option<ControllerParams>,
}

/// Outcome of one simulated site-day.
#[derive(Debug, Clone, Default)]
pub struct SiteDayResult {
    pub rows: Vec<TraceRow>,
    pub events: Vec<ComplianceEvent>,
    /// Commanded `r Δf + P^rc` per step (MW, step average).
    pub fcr_commanded: Vec<f64>,
    pub e_end: f64,
}

/// Simulates one day of one site through the plant at the frequency
/// sample resolution. `pu` holds the normalised sub-step deviations.
pub fn simulate_site_day(
    site: &SiteDay,
    grid: &TimeGrid,
    profile: &[f64],
    pu: &[f64],
    sample_seconds: f64,
    day: usize,
    site_index: usize,
) -> Result<SiteDayResult> {
    let n_t = grid.n_t();
    let per = substeps(grid, sample_seconds)?;
    if pu.len() < per * n_t {
        return Err(Error::IncompleteTrace { got: pu.len(), need: per * n_t });
    }
    if profile.len() != n_t {
        return Err(Error::Config("profile length does not match the grid".into()));
    }
    let spec = site.spec;
    let dt = grid.dt_hours();
    let h = dt / per as f64;
    let mut rt = FcrRuntime::new(site.decision, grid)?;
    let mut rule = site.params.map(|p| RuleState {
        p_thr: p.p_thr_init,
        e_ps: spec.e0,
    });
    let mut e = spec.e0;
    let mut out = SiteDayResult {
        rows: Vec::with_capacity(n_t),
        fcr_commanded: Vec::with_capacity(n_t),
        ..Default::default()
    };
    let event = |step: usize, bound: Bound, excess: f64, ev: &mut Vec<ComplianceEvent>| {
        ev.push(ComplianceEvent {
            day,
            step,
            site: site_index,
            bound,
            excess,
        })
    };
    for k in 0..n_t {
        let ps = match (&mut rule, site.params) {
            (Some(st), Some(p)) => {
                let p_hat = profile[k] + site.stats.mean[k] + p.z_sigma * site.stats.std[k];
                let s = control::rule_based_step(*st, p_hat, site.bounds, k, spec, dt);
                *st = RuleState {
                    p_thr: s.p_thr,
                    e_ps: s.e_ps,
                };
                s.ps
            }
            _ => 0.0,
        };
        let rc = rt.recharge_power();
        let r = rt.capacity();
        let (mut fcr_sum, mut cmd_sum, mut e_fcr, mut dev_sum) = (0.0, 0.0, 0.0, 0.0);
        for &x in &pu[k * per..(k + 1) * per] {
            let cmd = control::fcr_power(r, x, rc);
            let mut p = ps + cmd;
            if p > spec.p_max + BOUND_TOL {
                event(k, Bound::PowerMax, p - spec.p_max, &mut out.events);
                p = spec.p_max;
            } else if p < spec.p_min - BOUND_TOL {
                event(k, Bound::PowerMin, spec.p_min - p, &mut out.events);
                p = spec.p_min;
            }
            let next = energy_update_hours(e, p, h, spec);
            if next > spec.e_max + BOUND_TOL {
                event(k, Bound::EnergyMax, next - spec.e_max, &mut out.events);
                p = (spec.e_max - e).max(0.0) / (spec.eta_c * h);
                e = spec.e_max;
            } else if next < spec.e_min - BOUND_TOL {
                event(k, Bound::EnergyMin, spec.e_min - next, &mut out.events);
                p = -(e - spec.e_min).max(0.0) * spec.eta_d / h;
                e = spec.e_min;
            } else {
                e = next;
            }
            let fcr = p - ps;
            fcr_sum += fcr;
            cmd_sum += cmd;
            e_fcr += stored_rate(cmd, spec) * h;
            dev_sum += fold(x, spec);
        }
        rt.finish_step(e_fcr, dev_sum / per as f64);
        let fcr = fcr_sum / per as f64;
        out.fcr_commanded.push(cmd_sum / per as f64);
        out.rows.push(TraceRow {
            day,
            step: k,
            profile_mw: profile[k],
            ps_mw: ps,
            fcr_mw: fcr,
            grid_mw: profile[k] + ps + fcr,
            e_bat_mwh: e,
        });
    }
    out.e_end = e;
    Ok(out)
}

/// Empirical violation frequencies of the FCR controller alone.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ViolationRates {
    pub energy_min: f64,
    pub energy_max: f64,
    pub power_min: f64,
    pub power_max: f64,
    /// Days with any violation.
    pub any: f64,
    pub days: usize,
}

/// Fraction of simulated days on which the FCR controller alone leaves a
/// battery bound.
pub fn mc_violation_rate(
    decision: &RechargeDecision,
    spec: &BatterySpec,
    grid: &TimeGrid,
    freq: &FrequencyParams,
    n_days: usize,
    seed: u64,
) -> Result<ViolationRates> {
    freq.check()?;
    let n_t = grid.n_t();
    let zero_stats = FcrStats::zero(n_t);
    let bounds = PsBounds::full(spec, n_t);
    let site = SiteDay {
        spec,
        decision,
        bounds: &bounds,
        stats: &zero_stats,
        params: None,
    };
    let profile = vec![0.0; n_t];
    let job = |d: usize| -> Result<[bool; 4]> {
        let pu = freq.sample_day(&mut stream_rng(seed, d as u64));
        let res = simulate_site_day(&site, grid, &profile, &pu, freq.sample_seconds, d, 0)?;
        let mut hit = [false; 4];
        for ev in &res.events {
            hit[ev.bound as usize] = true;
        }
        Ok(hit)
    };
    #[cfg(feature = "parallel")]
    let hits: Vec<Result<[bool; 4]>> = {
        use rayon::prelude::*;
        (0..n_days).into_par_iter().map(job).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let hits: Vec<Result<[bool; 4]>> = (0..n_days).map(job).collect();
    let mut counts = [0usize; 5];
    for h in hits {
        let h = h?;
        for i in 0..4 {
            counts[i] += h[i] as usize;
        }
        counts[4] += h.iter().any(|b| *b) as usize;
    }
    let n = n_days.max(1) as f64;
    Ok(ViolationRates {
        energy_min: counts[Bound::EnergyMin as usize] as f64 / n,
        energy_max: counts[Bound::EnergyMax as usize] as f64 / n,
        power_min: counts[Bound::PowerMin as usize] as f64 / n,
        power_max: counts[Bound::PowerMax as usize] as f64 / n,
        any: counts[4] as f64 / n,
        days: n_days,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Baseline,
    PeakOnly,
    FcrOnly,
    Combined,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Baseline, Strategy::PeakOnly, Strategy::FcrOnly, Strategy::Combined];

    pub fn label(self) -> &'static str {
        match self {
            Strategy::Baseline => "without batteries",
            Strategy::PeakOnly => "peak shaving only",
            Strategy::FcrOnly => "frequency control only",
            Strategy::Combined => "combined",
        }
    }
}

/// Monthly totals in the layout of the cost and revenue table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonthResult {
    pub strategy: Strategy,
    pub peak_site: Vec<f64>,
    pub peak_power: f64,
    pub peak_cost: f64,
    pub average_fcr_capacity: Option<f64>,
    pub fcr_revenue: Option<f64>,
    pub elec_cost: Option<f64>,
    pub net_profit: Option<f64>,
    pub compliance_events: usize,
}

/// Traces of one simulated month.
#[derive(Debug, Clone, Default)]
pub struct MonthTraces {
    /// `rows[site]`
    pub rows: Vec<Vec<TraceRow>>,
    /// Aggregated FCR capacity per day.
    pub r_daily: Vec<f64>,
    /// Electricity cost of restoring the initial energy after each day,
    /// summed over sites per day (EUR).
    pub settlement: Vec<f64>,
    pub events: Vec<ComplianceEvent>,
}

/// Monthly accounts from traces. `baseline_peak_cost` is `None` for the
/// baseline row itself, which then carries no FCR or profit fields.
pub fn account(
    strategy: Strategy,
    traces: &MonthTraces,
    tariffs: &Tariffs,
    grid: &TimeGrid,
    baseline_peak_cost: Option<f64>,
) -> MonthResult {
    let dt = grid.dt_hours();
    let peak_site: Vec<f64> = traces
        .rows
        .iter()
        .map(|rows| rows.iter().map(|r| r.grid_mw).fold(0.0, f64::max))
        .collect();
    let peak_power: f64 = peak_site.iter().sum();
    let peak_cost = tariffs.c_peak * peak_power;
    let elec_energy: f64 = traces
        .rows
        .iter()
        .flat_map(|rows| rows.iter().map(|r| (r.ps_mw + r.fcr_mw) * dt))
        .sum();
    let elec = tariffs.c_elec * elec_energy + traces.settlement.iter().sum::<f64>();
    let revenue: f64 = traces.r_daily.iter().map(|r| tariffs.daily_fcr_revenue(*r, grid)).sum();
    let n_days = traces.r_daily.len().max(1) as f64;
    let avg_r = traces.r_daily.iter().sum::<f64>() / n_days;
    match baseline_peak_cost {
        None => MonthResult {
            strategy,
            peak_site,
            peak_power,
            peak_cost,
            average_fcr_capacity: None,
            fcr_revenue: None,
            elec_cost: None,
            net_profit: None,
            compliance_events: traces.events.len(),
        },
        Some(base) => MonthResult {
            strategy,
            peak_site,
            peak_power,
            peak_cost,
            average_fcr_capacity: Some(avg_r),
            fcr_revenue: Some(revenue),
            elec_cost: Some(elec),
            net_profit: Some(base - (peak_cost + elec - revenue)),
            compliance_events: traces.events.len(),
        },
    }
}

/// Inputs of a simulated month.
#[derive(Debug, Clone)]
pub struct MonthSetup<'a> {
    pub model: MonthModel<'a>,
    pub consumption: &'a [ConsumptionParams],
    pub frequency: &'a FrequencyParams,
    pub n_days: usize,
    pub n_eval: usize,
    pub tuning: TuningGrid,
}

impl MonthSetup<'_> {
    fn pools(&self) -> PoolSource<'_> {
        PoolSource {
            consumption: self.consumption,
            frequency: self.frequency,
        }
    }
}

/// The realised month: per-day profiles per site and sub-step deviations.
#[derive(Debug, Clone)]
pub struct RealizedMonth {
    /// `profiles[day][site]`
    pub profiles: Vec<Vec<Vec<f64>>>,
    pub pu: Vec<Vec<f64>>,
}

impl RealizedMonth {
    pub fn generate(setup: &MonthSetup, seed: u64) -> Self {
        let grid = setup.model.grid;
        let mut profiles = Vec::with_capacity(setup.n_days);
        let mut pu = Vec::with_capacity(setup.n_days);
        for d in 0..setup.n_days {
            pu.push(setup.frequency.sample_day(&mut stream_rng(seed, 2 * d as u64)));
            profiles.push(
                setup
                    .consumption
                    .iter()
                    .enumerate()
                    .map(|(i, c)| {
                        let stream = (1 + 2 * d as u64) << 8 | i as u64;
                        c.sample_day(grid, &mut stream_rng(seed, stream))
                    })
                    .collect(),
            );
        }
        Self { profiles, pu }
    }
}

/// Cached daily plan of the strategies whose plan does not depend on the
/// state.
fn fcr_only_plans(setup: &MonthSetup) -> Result<(f64, Vec<SitePlan>)> {
    let m = &setup.model;
    let mut plans = Vec::with_capacity(m.n_sites());
    let mut r_agg = 0.0;
    for spec in m.specs {
        let (dec, _) = crate::robustfcr::solve_fcr_only(spec, m.grid, m.uncertainty, m.tariffs, m.n_rc, &m.solver)?;
        let env = crate::robustfcr::compute_envelopes(&dec, m.uncertainty, m.grid);
        let bounds = crate::robustfcr::split_virtual(spec, &env)?.viable(spec, m.grid.dt_hours());
        r_agg += dec.capacity();
        plans.push(SitePlan { decision: dec, bounds });
    }
    Ok((r_agg, plans))
}

/// Simulates one month of `strategy`. Each day starts from the initial
/// energy; restoring it after the day is charged at the electricity price.
pub fn run_month(
    strategy: Strategy,
    setup: &MonthSetup,
    values: Option<&DpResult>,
    month: &RealizedMonth,
    seed: u64,
) -> Result<MonthTraces> {
    let m = &setup.model;
    let n_s = m.n_sites();
    let n_t = m.grid.n_t();
    let terminal = dp::terminal_functions(n_s, m.tariffs);
    let fixed = match strategy {
        Strategy::FcrOnly => Some(fcr_only_plans(setup)?),
        _ => None,
    };
    let mut tr = MonthTraces {
        rows: vec![Vec::with_capacity(setup.n_days * n_t); n_s],
        ..Default::default()
    };
    let mut state = vec![0.0; n_s];
    for d in 1..=setup.n_days {
        let next: &[ValueFunction] = match values {
            Some(v) if d <= v.days.len() => v.next_value(d),
            _ => &terminal,
        };
        let (r_agg, plans, params): (f64, Vec<SitePlan>, Vec<Option<ControllerParams>>) = match strategy {
            Strategy::Baseline => (
                0.0,
                m.specs
                    .iter()
                    .map(|s| SitePlan {
                        decision: RechargeDecision::zero(n_t, m.n_rc),
                        bounds: PsBounds::full(s, n_t),
                    })
                    .collect(),
                vec![None; n_s],
            ),
            Strategy::FcrOnly => {
                let (r, p) = fixed.clone().ok_or(Error::EmptySet)?;
                (r, p, vec![None; n_s])
            }
            Strategy::PeakOnly | Strategy::Combined => {
                let planner = if strategy == Strategy::Combined {
                    Planner::Combined
                } else {
                    Planner::PeakOnly
                };
                let (r, plans) = m.plan_day(planner, &state, next)?;
                let (tune, _) = setup.pools().pools(m, d, setup.n_eval, seed ^ 0xa5a5_0000)?;
                let sites = dp::tune_sites(m, &plans, &state, next, &tune, &setup.tuning)?;
                let params = sites.iter().map(|s| Some(s.params)).collect();
                (r, plans, params)
            }
        };
        tr.r_daily.push(r_agg);
        let mut settle = 0.0;
        for i in 0..n_s {
            let stats = match params[i] {
                Some(_) => FcrStats::from_scenarios(&plans[i].decision, m.frequency),
                None => FcrStats::zero(n_t),
            };
            let site = SiteDay {
                spec: &m.specs[i],
                decision: &plans[i].decision,
                bounds: &plans[i].bounds,
                stats: &stats,
                params: params[i],
            };
            let res = simulate_site_day(
                &site,
                m.grid,
                &month.profiles[d - 1][i],
                &month.pu[d - 1],
                setup.frequency.sample_seconds,
                d,
                i,
            )?;
            settle += control::terminal_settlement(res.e_end, &m.specs[i], m.tariffs.c_elec);
            let day_peak = res.rows.iter().map(|r| r.grid_mw).fold(0.0, f64::max);
            state[i] = state[i].max(day_peak);
            tr.rows[i].extend(res.rows);
            tr.events.extend(res.events);
        }
        tr.settlement.push(settle);
    }
    Ok(tr)
}

/// Runs all four strategies on the same realised month.
pub fn run_all(setup: &MonthSetup, values: &DpResult, peak_values: Option<&DpResult>, seed: u64) -> Result<Vec<(MonthResult, MonthTraces)>> {
    let month = RealizedMonth::generate(setup, seed);
    let grid = setup.model.grid;
    let tariffs = setup.model.tariffs;
    let base = run_month(Strategy::Baseline, setup, None, &month, seed)?;
    let base_res = account(Strategy::Baseline, &base, tariffs, grid, None);
    let mut out = vec![(base_res.clone(), base)];
    for s in [Strategy::PeakOnly, Strategy::FcrOnly, Strategy::Combined] {
        let v = match s {
            Strategy::PeakOnly => peak_values,
            Strategy::Combined => Some(values),
            _ => None,
        };
        let t = run_month(s, setup, v, &month, seed)?;
        out.push((account(s, &t, tariffs, grid, Some(base_res.peak_cost)), t));
    }
    Ok(out)
}

/// Field-wise mean of per-month rows; `months[m]` holds the rows of month
/// `m` in the same strategy order.
pub fn mean_results(months: &[Vec<MonthResult>]) -> Result<Vec<MonthResult>> {
    let first = months.first().ok_or(Error::EmptySet)?;
    if months.iter().any(|m| m.len() != first.len()) {
        return Err(Error::Config("months disagree in strategy rows".into()));
    }
    let n = months.len() as f64;
    let avg = |f: &dyn Fn(&MonthResult) -> f64, j: usize| months.iter().map(|m| f(&m[j])).sum::<f64>() / n;
    let avg_opt = |f: &dyn Fn(&MonthResult) -> Option<f64>, j: usize| -> Option<f64> {
        let v: Option<Vec<f64>> = months.iter().map(|m| f(&m[j])).collect();
        v.map(|v| v.iter().sum::<f64>() / n)
    };
    let mut out = Vec::with_capacity(first.len());
    for (j, r) in first.iter().enumerate() {
        out.push(MonthResult {
            strategy: r.strategy,
            peak_site: (0..r.peak_site.len()).map(|i| avg(&|x| x.peak_site[i], j)).collect(),
            peak_power: avg(&|x| x.peak_power, j),
            peak_cost: avg(&|x| x.peak_cost, j),
            average_fcr_capacity: avg_opt(&|x| x.average_fcr_capacity, j),
            fcr_revenue: avg_opt(&|x| x.fcr_revenue, j),
            elec_cost: avg_opt(&|x| x.elec_cost, j),
            net_profit: avg_opt(&|x| x.net_profit, j),
            compliance_events: months.iter().map(|m| m[j].compliance_events).sum(),
        });
    }
    Ok(out)
}

fn fmt_opt(x: Option<f64>, scale: f64, digits: usize) -> String {
    x.map_or_else(|| "-".to_string(), |v| format!("{:.*}", digits, v / scale))
}

/// Writes the strategy rows of the cost and revenue table.
pub fn write_report<W: Write>(rows: &[MonthResult], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "scenario",
        "peak_power_mw",
        "peak_costs_keur",
        "avg_fcr_capacity_mw",
        "fcr_revenues_keur",
        "elec_costs_eur",
        "net_profit_keur",
    ])?;
    for r in rows {
        w.write_record([
            r.strategy.label().to_string(),
            format!("{:.2}", r.peak_power),
            format!("{:.1}", r.peak_cost / 1000.0),
            fmt_opt(r.average_fcr_capacity, 1.0, 2),
            fmt_opt(r.fcr_revenue, 1000.0, 1),
            fmt_opt(r.elec_cost, 1.0, 0),
            fmt_opt(r.net_profit, 1000.0, 1),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `day,step,profile_mw,ps_mw,fcr_mw,grid_mw,e_bat_mwh` rows.
pub fn write_trace<W: Write>(rows: &[TraceRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
