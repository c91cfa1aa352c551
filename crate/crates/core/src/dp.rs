//! Monthly dynamic program over the observed peak: convex piecewise-linear
//! value functions, their least-squares fit, and the backward recursion.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::control::{self, ControllerParams, DayContext, EvalSet, FcrStats};
use crate::cooptimizer::{self, DayDecision, DayOptions, SharedInput, SiteInput, SitePlan};
use crate::domain::{BatterySpec, Tariffs, TimeGrid};
use crate::error::{Error, Result};
use crate::freqmodel::UncertaintySet;
use crate::robustfcr::{PsBounds, RechargeDecision};
use crate::scenarios::{gen_consumption_days, gen_frequency_days, ConsumptionParams, FrequencyParams, ScenarioSet};
use crate::socp::{self, ConicProgram, LinExpr, SolverOptions, Var};

/// Convex, nondecreasing piecewise-linear function of one peak (MW).
///
/// `values[i]` is the value at `breakpoints[i]`; outside the breakpoint
/// range the end segments are extended linearly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueFunction {
    pub breakpoints: Vec<f64>,
    pub values: Vec<f64>,
}

impl ValueFunction {
    /// `f(x) = slope·x`
    pub fn linear(slope: f64) -> Self {
        Self {
            breakpoints: vec![0.0, 1.0],
            values: vec![0.0, slope],
        }
    }

    pub fn constant(c: f64) -> Self {
        Self {
            breakpoints: vec![0.0, 1.0],
            values: vec![c, c],
        }
    }

    pub fn intercept(&self) -> f64 {
        self.values[0]
    }

    pub fn slopes(&self) -> Vec<f64> {
        self.breakpoints
            .windows(2)
            .zip(self.values.windows(2))
            .map(|(b, v)| (v[1] - v[0]) / (b[1] - b[0]))
            .collect()
    }

    pub fn eval(&self, x: f64) -> f64 {
        let b = &self.breakpoints;
        let n = b.len();
        let seg = if x <= b[0] {
            0
        } else if x >= b[n - 1] {
            n - 2
        } else {
            b.partition_point(|&p| p <= x) - 1
        };
        let t = (x - b[seg]) / (b[seg + 1] - b[seg]);
        self.values[seg] + t * (self.values[seg + 1] - self.values[seg])
    }

    /// `(intercept, slope)` of every segment, so that `f = max` of them.
    pub fn affine_pieces(&self) -> Vec<(f64, f64)> {
        self.slopes()
            .into_iter()
            .enumerate()
            .map(|(i, s)| (self.values[i] - s * self.breakpoints[i], s))
            .collect()
    }

    pub fn is_convex(&self, tol: f64) -> bool {
        self.slopes().windows(2).all(|w| w[1] >= w[0] - tol)
    }

    pub fn is_nondecreasing(&self, tol: f64) -> bool {
        self.slopes().first().is_none_or(|s| *s >= -tol)
    }

    pub fn check(&self) -> Result<()> {
        if self.breakpoints.len() < 2 || self.breakpoints.len() != self.values.len() {
            return Err(Error::Config("value function needs at least two breakpoints".into()));
        }
        if self.breakpoints.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("value function breakpoints must increase".into()));
        }
        Ok(())
    }
}

/// Cost-to-go after the last day: the demand charge on every site's peak.
pub fn final_value(peaks: &[f64], tariffs: &Tariffs) -> f64 {
    tariffs.c_peak * peaks.iter().sum::<f64>()
}

/// Breakpoints for a fit: the distinct abscissae when few enough, else an
/// evenly spaced (by rank) subset that keeps both ends.
fn choose_breakpoints(xs: &[f64], n_segments: usize) -> Vec<f64> {
    let mut u: Vec<f64> = xs.to_vec();
    u.sort_by(f64::total_cmp);
    u.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * (1.0 + b.abs()));
    if u.len() <= n_segments + 1 {
        return u;
    }
    let last = u.len() - 1;
    let mut out: Vec<f64> = (0..=n_segments)
        .map(|i| u[(i * last + n_segments / 2) / n_segments])
        .collect();
    out[0] = u[0];
    out[n_segments] = u[last];
    out.dedup();
    out
}

/// Interpolation weights of `x` on `bp` (linear extrapolation at the ends).
fn hat_weights(bp: &[f64], x: f64) -> [(usize, f64); 2] {
    let n = bp.len();
    let seg = if x <= bp[0] {
        0
    } else if x >= bp[n - 1] {
        n - 2
    } else {
        bp.partition_point(|&p| p <= x) - 1
    };
    let t = (x - bp[seg]) / (bp[seg + 1] - bp[seg]);
    [(seg, 1.0 - t), (seg + 1, t)]
}

/// Adds breakpoint-value variables with convexity and monotonicity rows.
fn shape_vars(p: &mut ConicProgram, bp: &[f64], tag: &str, pin_first: bool) -> Vec<Var> {
    let v: Vec<Var> = (0..bp.len()).map(|i| p.free_var(format!("{tag}v[{i}]"))).collect();
    if pin_first {
        p.add_eq(v[0], 0.0);
    }
    let slope = |i: usize| (LinExpr::from(v[i + 1]) - v[i]).scaled(1.0 / (bp[i + 1] - bp[i]));
    p.add_le(0.0, slope(0));
    for i in 1..bp.len() - 1 {
        p.add_le(slope(i - 1), slope(i));
    }
    v
}

fn fit_options() -> SolverOptions {
    SolverOptions {
        feas_tol: 1e-10,
        gap_tol: 1e-10,
        ..SolverOptions::default()
    }
}

/// Least-squares fit of a convex nondecreasing piecewise-linear function.
pub fn fit_convex_pwl(points: &[(f64, f64)], n_segments: usize) -> Result<ValueFunction> {
    if n_segments == 0 || points.len() < n_segments + 1 {
        return Err(Error::Config(format!(
            "{} points cannot determine {n_segments} segments",
            points.len()
        )));
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0).collect();
    let bp = choose_breakpoints(&xs, n_segments);
    if bp.len() < 2 || bp[bp.len() - 1] - bp[0] <= 1e-12 {
        return Err(Error::Config("degenerate abscissa range".into()));
    }
    let mut p = ConicProgram::new();
    let v = shape_vars(&mut p, &bp, "", false);
    let t = p.nonneg_var("t");
    let resid: Vec<LinExpr> = points
        .iter()
        .map(|&(x, y)| {
            let mut e = LinExpr::constant(-y);
            for (i, w) in hat_weights(&bp, x) {
                e.add_term(v[i], w);
            }
            e
        })
        .collect();
    p.add_soc(t, resid);
    p.set_objective(t.into());
    let sol = socp::solve(&p, &fit_options())?.require_optimal()?;
    Ok(ValueFunction {
        values: v.iter().map(|&vi| sol.value(vi)).collect(),
        breakpoints: bp,
    })
}

/// Separable fit `V(x) ≈ Σᵢ fᵢ(xᵢ)` over multi-site state points. The
/// constant is carried by the first site's function.
pub fn fit_separable(points: &[(Vec<f64>, f64)], n_segments: usize) -> Result<Vec<ValueFunction>> {
    let n_s = points.first().map_or(0, |p| p.0.len());
    if n_s == 0 {
        return Err(Error::EmptySet);
    }
    if n_s == 1 {
        let flat: Vec<(f64, f64)> = points.iter().map(|(x, y)| (x[0], *y)).collect();
        return Ok(vec![fit_convex_pwl(&flat, n_segments)?]);
    }
    let mut p = ConicProgram::new();
    let mut bps = Vec::with_capacity(n_s);
    let mut vars = Vec::with_capacity(n_s);
    for s in 0..n_s {
        let xs: Vec<f64> = points.iter().map(|pt| pt.0[s]).collect();
        let bp = choose_breakpoints(&xs, n_segments);
        if bp.len() < 2 {
            return Err(Error::Config(format!("degenerate abscissa range for site {s}")));
        }
        vars.push(shape_vars(&mut p, &bp, &format!("s{s}"), s > 0));
        bps.push(bp);
    }
    let t = p.nonneg_var("t");
    let resid = points
        .iter()
        .map(|(x, y)| {
            let mut e = LinExpr::constant(-y);
            for s in 0..n_s {
                for (i, w) in hat_weights(&bps[s], x[s]) {
                    e.add_term(vars[s][i], w);
                }
            }
            e
        })
        .collect();
    p.add_soc(t, resid);
    p.set_objective(t.into());
    let sol = socp::solve(&p, &fit_options())?.require_optimal()?;
    Ok(bps
        .into_iter()
        .zip(vars)
        .map(|(bp, v)| ValueFunction {
            values: v.iter().map(|&vi| sol.value(vi)).collect(),
            breakpoints: bp,
        })
        .collect())
}

/// Writes `day,breakpoint_mw,value_eur` rows (days are 1-based).
pub fn write_value_functions<W: Write>(vfs: &[ValueFunction], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["day", "breakpoint_mw", "value_eur"])?;
    for (d, vf) in vfs.iter().enumerate() {
        for (b, v) in vf.breakpoints.iter().zip(&vf.values) {
            w.write_record([(d + 1).to_string(), format!("{b}"), format!("{v}")])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_value_functions<R: Read>(rdr: R) -> Result<Vec<ValueFunction>> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(rdr);
    let mut out: Vec<(usize, ValueFunction)> = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let num = |k: usize| -> Result<f64> {
            rec.get(k)
                .and_then(|s| s.parse::<f64>().ok())
                .ok_or_else(|| Error::Parse { line, msg: format!("bad field {k}") })
        };
        let day = num(0)? as usize;
        let (b, v) = (num(1)?, num(2)?);
        match out.last_mut() {
            Some((d, vf)) if *d == day => {
                vf.breakpoints.push(b);
                vf.values.push(v);
            }
            _ => out.push((
                day,
                ValueFunction {
                    breakpoints: vec![b],
                    values: vec![v],
                },
            )),
        }
    }
    let vfs: Vec<ValueFunction> = out.into_iter().map(|(_, vf)| vf).collect();
    for vf in &vfs {
        vf.check()?;
    }
    Ok(vfs)
}

/// Sample points of the peak state of one site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateGrid {
    pub points: Vec<f64>,
}

impl StateGrid {
    /// `n` points over `[0, top]`, spaced quadratically away from `centre`
    /// so that they are densest around it.
    pub fn around(centre: f64, top: f64, n: usize) -> Result<Self> {
        if n < 2 || top <= 0.0 {
            return Err(Error::Config("a state grid needs two points and a positive range".into()));
        }
        let c = centre.clamp(0.0, top);
        let n_left = ((c / top) * (n - 1) as f64).round() as usize;
        let n_right = n - 1 - n_left;
        let mut pts = Vec::with_capacity(n);
        for i in 0..n_left {
            let s = 1.0 - i as f64 / n_left as f64;
            pts.push(c - c * s * s);
        }
        pts.push(c);
        for i in 1..=n_right {
            let s = i as f64 / n_right as f64;
            pts.push(c + (top - c) * s * s);
        }
        pts.dedup_by(|a, b| *a - *b <= 1e-12);
        let g = Self { points: pts };
        g.check()?;
        Ok(g)
    }

    pub fn check(&self) -> Result<()> {
        if self.points.len() < 2 || self.points.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("state grid points must increase strictly".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn top(&self) -> f64 {
        self.points[self.points.len() - 1]
    }
}

/// How multi-site state points are laid out.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MultiDesign {
    /// Full cross product of the per-site grids.
    Cross,
    /// One axis per site through the reference point (the grid point nearest
    /// each site's centre); enough to identify a separable fit.
    #[default]
    Axes,
}

/// Multi-site state points for per-site grids.
pub fn design_points(grids: &[StateGrid], reference: &[f64], design: MultiDesign) -> Vec<Vec<f64>> {
    match grids.len() {
        0 => Vec::new(),
        1 => grids[0].points.iter().map(|&x| vec![x]).collect(),
        _ => match design {
            MultiDesign::Cross => {
                let mut out: Vec<Vec<f64>> = vec![Vec::new()];
                for g in grids {
                    out = out
                        .into_iter()
                        .flat_map(|p| {
                            g.points.iter().map(move |&x| {
                                let mut q = p.clone();
                                q.push(x);
                                q
                            })
                        })
                        .collect();
                }
                out
            }
            MultiDesign::Axes => {
                let base: Vec<f64> = grids
                    .iter()
                    .zip(reference)
                    .map(|(g, &c)| {
                        g.points
                            .iter()
                            .copied()
                            .min_by(|a, b| (a - c).abs().total_cmp(&(b - c).abs()))
                            .unwrap_or(0.0)
                    })
                    .collect();
                let mut out = vec![base.clone()];
                for (i, g) in grids.iter().enumerate() {
                    for &x in &g.points {
                        if x != base[i] {
                            let mut q = base.clone();
                            q[i] = x;
                            out.push(q);
                        }
                    }
                }
                out
            }
        },
    }
}

/// Fresh scenario pairs for one day: a consumption profile per site and
/// one folded frequency-deviation vector shared by all sites.
#[derive(Debug, Clone)]
pub struct EvalPools {
    /// `profiles[site][sample]`
    pub profiles: Vec<Vec<Vec<f64>>>,
    pub deviations: Vec<Vec<f64>>,
}

impl EvalPools {
    pub fn generate(
        consumption: &[ConsumptionParams],
        frequency: &FrequencyParams,
        grid: &TimeGrid,
        fold_spec: &BatterySpec,
        n: usize,
        seed: u64,
    ) -> Result<Self> {
        let deviations = gen_frequency_days(n, seed, frequency, grid, fold_spec)?.rows().to_vec();
        let profiles = consumption
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let s = seed.wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(i as u64 + 1));
                gen_consumption_days(n, s, c, grid).map(|set| set.rows().to_vec())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { profiles, deviations })
    }

    pub fn len(&self) -> usize {
        self.deviations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.deviations.is_empty()
    }
}

/// Everything the day problems of one month share.
#[derive(Debug, Clone, Copy)]
pub struct MonthModel<'a> {
    pub specs: &'a [BatterySpec],
    pub grid: &'a TimeGrid,
    pub tariffs: &'a Tariffs,
    pub n_rc: usize,
    pub uncertainty: &'a UncertaintySet,
    /// Reduced frequency scenarios.
    pub frequency: &'a ScenarioSet,
    /// Reduced consumption scenarios per site.
    pub consumption: &'a [ScenarioSet],
    pub solver: SolverOptions,
}

impl MonthModel<'_> {
    pub fn n_sites(&self) -> usize {
        self.specs.len()
    }

    pub fn shared(&self) -> SharedInput<'_> {
        SharedInput {
            grid: self.grid,
            tariffs: self.tariffs,
            frequency: self.frequency,
            uncertainty: self.uncertainty,
            n_rc: self.n_rc,
        }
    }

    /// Solves the day problem at the given per-site peak state.
    pub fn solve_day(&self, state: &[f64], next: &[ValueFunction], opts: DayOptions) -> Result<DayDecision> {
        if state.len() != self.n_sites() || next.len() != self.n_sites() || self.consumption.len() != self.n_sites() {
            return Err(Error::Config("state, value functions and sites disagree in count".into()));
        }
        let sites: Vec<SiteInput> = (0..self.n_sites())
            .map(|i| SiteInput {
                spec: &self.specs[i],
                consumption: &self.consumption[i],
                value_function: &next[i],
                p_peak_prev: state[i],
            })
            .collect();
        let p = if sites.len() == 1 {
            cooptimizer::build_day_problem(sites[0], self.shared(), opts)?
        } else {
            cooptimizer::build_multisite(&sites, self.shared(), opts)?
        };
        cooptimizer::solve_day(&p, self.specs, self.shared(), &self.solver)
    }

    /// Day plan of the given planner at `state`.
    pub fn plan_day(&self, planner: Planner, state: &[f64], next: &[ValueFunction]) -> Result<(f64, Vec<SitePlan>)> {
        match planner {
            Planner::Combined => {
                let d = self.solve_day(state, next, DayOptions::default())?;
                Ok((d.r_agg, d.sites))
            }
            Planner::PeakOnly => Ok((
                0.0,
                self.specs
                    .iter()
                    .map(|s| SitePlan {
                        decision: RechargeDecision::zero(self.grid.n_t(), self.n_rc),
                        bounds: PsBounds::full(s, self.grid.n_t()),
                    })
                    .collect(),
            )),
        }
    }
}

/// Source of the daily FCR and peak-shaving plan inside the recursion.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Planner {
    /// Solve the combined day problem at each state.
    #[default]
    Combined,
    /// No FCR; the whole battery shaves peaks.
    PeakOnly,
}

/// Search grids of the controller tuning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningGrid {
    pub n_thresholds: usize,
    pub z_grid: Vec<f64>,
}

impl Default for TuningGrid {
    fn default() -> Self {
        Self {
            n_thresholds: 9,
            z_grid: control::DEFAULT_Z_GRID.to_vec(),
        }
    }
}

impl TuningGrid {
    /// Threshold candidates for a site; the current peak is added when it
    /// lies above the lowest candidate, since shaving below it gains nothing.
    pub fn thresholds(&self, expected_peak: f64, p_max: f64, state: f64) -> Vec<f64> {
        let mut t = control::default_threshold_grid(expected_peak, p_max, self.n_thresholds);
        if t.first().is_some_and(|&lo| state > lo) && !t.contains(&state) {
            t.push(state);
        }
        t
    }
}

/// A site's runtime setup for one day: decision, bounds, statistics and
/// tuned controller parameters.
#[derive(Debug, Clone)]
pub struct SiteRuntime {
    pub decision: crate::robustfcr::RechargeDecision,
    pub bounds: PsBounds,
    pub stats: FcrStats,
    pub params: ControllerParams,
}

/// Tunes the rule-based controller of every site for a solved day.
pub fn tune_sites(
    model: &MonthModel,
    plans: &[SitePlan],
    state: &[f64],
    next: &[ValueFunction],
    pool: &EvalPools,
    tuning: &TuningGrid,
) -> Result<Vec<SiteRuntime>> {
    let mut out = Vec::with_capacity(model.n_sites());
    for i in 0..model.n_sites() {
        let plan = &plans[i];
        let stats = FcrStats::from_scenarios(&plan.decision, model.frequency);
        let vf = &next[i];
        let f = |x: f64| vf.eval(x);
        let ctx = DayContext {
            spec: &model.specs[i],
            grid: model.grid,
            bounds: &plan.bounds,
            stats: &stats,
            c_elec: model.tariffs.c_elec,
            p_peak_prev: state[i],
            next_value: &f,
        };
        let eval = EvalSet::new(&pool.profiles[i], &pool.deviations, &plan.decision)?;
        let thr = tuning.thresholds(model.consumption[i].expected_max(), model.specs[i].p_max, state[i]);
        let (params, _) = control::tune_gridsearch(&ctx, &thr, &tuning.z_grid, &eval)?;
        out.push(SiteRuntime {
            decision: plan.decision.clone(),
            bounds: plan.bounds.clone(),
            stats,
            params,
        });
    }
    Ok(out)
}

/// Per-sample cost-to-go of a day under tuned controllers, revenue included.
pub fn rule_samples(
    model: &MonthModel,
    sites: &[SiteRuntime],
    r_agg: f64,
    state: &[f64],
    next: &[ValueFunction],
    pool: &EvalPools,
) -> Result<Vec<f64>> {
    let revenue = model.tariffs.daily_fcr_revenue(r_agg, model.grid);
    let mut total = vec![-revenue; pool.len()];
    for (i, s) in sites.iter().enumerate() {
        let vf = &next[i];
        let f = |x: f64| vf.eval(x);
        let ctx = DayContext {
            spec: &model.specs[i],
            grid: model.grid,
            bounds: &s.bounds,
            stats: &s.stats,
            c_elec: model.tariffs.c_elec,
            p_peak_prev: state[i],
            next_value: &f,
        };
        let eval = EvalSet::new(&pool.profiles[i], &pool.deviations, &s.decision)?;
        for (t, c) in total.iter_mut().zip(control::evaluate_samples(&ctx, &s.params, &eval)) {
            *t += c;
        }
    }
    Ok(total)
}

/// Mean and 95% normal half-width.
pub fn mean_half_width(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    if x.is_empty() {
        return (0.0, 0.0);
    }
    let m = x.iter().sum::<f64>() / n;
    if x.len() < 2 {
        return (m, 0.0);
    }
    let v = x.iter().map(|y| (y - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, 1.96 * (v / n).sqrt())
}

/// Value of one state point under the rule-based controller.
#[derive(Debug, Clone, PartialEq)]
pub struct PointValue {
    pub state: Vec<f64>,
    pub value: f64,
    pub half_width: f64,
    pub r_agg: f64,
    pub params: Vec<ControllerParams>,
}

/// Solves the day problem at `state`, tunes on `tune_pool` and evaluates
/// the tuned controllers on the independent `eval_pool`.
pub fn evaluate_value_rule(
    model: &MonthModel,
    planner: Planner,
    state: &[f64],
    next: &[ValueFunction],
    tune_pool: &EvalPools,
    eval_pool: &EvalPools,
    tuning: &TuningGrid,
) -> Result<PointValue> {
    let (r_agg, plans) = model.plan_day(planner, state, next)?;
    let sites = tune_sites(model, &plans, state, next, tune_pool, tuning)?;
    let samples = rule_samples(model, &sites, r_agg, state, next, eval_pool)?;
    let (value, half_width) = mean_half_width(&samples);
    Ok(PointValue {
        state: state.to_vec(),
        value,
        half_width,
        r_agg,
        params: sites.iter().map(|s| s.params).collect(),
    })
}

/// Lowest cost a controller knowing the whole day in advance could reach
/// within the same bounds (a linear relaxation, so a lower bound).
pub fn hindsight_cost(ctx: &DayContext, vf: &ValueFunction, profile: &[f64], fcr: &[f64]) -> Result<f64> {
    let n = profile.len();
    let dt = ctx.grid.dt_hours();
    let spec = ctx.spec;
    let b = ctx.bounds;
    let mut p = ConicProgram::new();
    let ch: Vec<Var> = (0..n).map(|k| p.add_var(format!("ch{k}"), 0.0, b.p_max_ps[k])).collect();
    let dis: Vec<Var> = (0..n).map(|k| p.add_var(format!("dis{k}"), 0.0, -b.p_min_ps[k])).collect();
    let peak = p.add_var("peak", ctx.p_peak_prev, f64::INFINITY);
    let theta = p.free_var("theta");
    let short = p.nonneg_var("short");
    let extra = p.nonneg_var("extra");
    let mut energy = LinExpr::constant(spec.e0);
    let fcr_drift: f64 = fcr.iter().map(|f| f * dt).sum();
    let mut obj = LinExpr::from(theta);
    for k in 0..n {
        energy.add_term(ch[k], dt * spec.eta_c);
        energy.add_term(dis[k], -dt / spec.eta_d);
        p.add_le(energy.clone(), b.e_max_ps[k]);
        p.add_le(b.e_min_ps[k], energy.clone());
        p.add_le(LinExpr::from(ch[k]) - dis[k] + profile[k] + fcr[k], peak);
        obj.add_assign_scaled(&(LinExpr::from(ch[k]) - dis[k] + fcr[k]), ctx.c_elec * dt);
    }
    // settlement: E_end − E0 = extra − short
    p.add_eq(energy + fcr_drift - spec.e0, LinExpr::from(extra) - short);
    obj.add_term(short, ctx.c_elec / spec.eta_c);
    obj.add_term(extra, -ctx.c_elec * spec.eta_d);
    for (a, s) in vf.affine_pieces() {
        p.add_le(LinExpr::term(peak, s) + a, theta);
    }
    p.set_objective(obj);
    Ok(socp::solve(&p, &SolverOptions::default())?.require_optimal()?.objective)
}

/// Configuration of the backward recursion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpConfig {
    pub n_days: usize,
    pub grid_points: usize,
    pub n_segments: usize,
    pub n_eval: usize,
    pub seed: u64,
    pub design: MultiDesign,
    pub planner: Planner,
    pub tuning: TuningGrid,
}

impl Default for DpConfig {
    fn default() -> Self {
        Self {
            n_days: 30,
            grid_points: 12,
            n_segments: 10,
            n_eval: 500,
            seed: 0,
            design: MultiDesign::Axes,
            planner: Planner::Combined,
            tuning: TuningGrid::default(),
        }
    }
}

/// Generators of the fresh evaluation pairs.
#[derive(Debug, Clone)]
pub struct PoolSource<'a> {
    pub consumption: &'a [ConsumptionParams],
    pub frequency: &'a FrequencyParams,
}

impl PoolSource<'_> {
    /// Tuning and evaluation pools of `day` (1-based), on distinct streams.
    pub fn pools(&self, model: &MonthModel, day: usize, n: usize, seed: u64) -> Result<(EvalPools, EvalPools)> {
        let base = seed.wrapping_mul(1_000_003).wrapping_add(day as u64 * 7919);
        let fold = &model.specs[0];
        let a = EvalPools::generate(self.consumption, self.frequency, model.grid, fold, n, base)?;
        let b = EvalPools::generate(self.consumption, self.frequency, model.grid, fold, n, base ^ 0x5555_aaaa_5555_aaaa)?;
        Ok((a, b))
    }
}

/// Results of one day of the recursion.
#[derive(Debug, Clone)]
pub struct DayValues {
    pub day: usize,
    pub points: Vec<PointValue>,
    pub failed: Vec<(Vec<f64>, String)>,
    /// Fitted `Ṽ_d`, one function per site.
    pub fitted: Vec<ValueFunction>,
}

#[derive(Debug, Clone)]
pub struct DpResult {
    pub grids: Vec<StateGrid>,
    /// `days[d − 1]` holds day `d`.
    pub days: Vec<DayValues>,
    pub terminal: Vec<ValueFunction>,
}

impl DpResult {
    /// `Ṽ_d` per site.
    pub fn value_functions(&self, day: usize) -> &[ValueFunction] {
        &self.days[day - 1].fitted
    }

    /// Cost-to-go after day `d`: `Ṽ_{d+1}`, or the final value after the
    /// last day.
    pub fn next_value(&self, day: usize) -> &[ValueFunction] {
        if day >= self.days.len() {
            &self.terminal
        } else {
            &self.days[day].fitted
        }
    }

    /// Day-1 functions for every day, as written to disk.
    pub fn all_fitted(&self) -> Vec<ValueFunction> {
        self.days.iter().map(|d| d.fitted[0].clone()).collect()
    }
}

/// Terminal value per site: `c_peak · peak`.
pub fn terminal_functions(n_sites: usize, tariffs: &Tariffs) -> Vec<ValueFunction> {
    vec![ValueFunction::linear(tariffs.c_peak); n_sites]
}

/// Per-site state grids centred on the expected daily peak and reaching
/// past the largest profile power by the battery's power.
pub fn default_grids(model: &MonthModel, n: usize) -> Result<Vec<StateGrid>> {
    (0..model.n_sites())
        .map(|i| {
            let c = &model.consumption[i];
            StateGrid::around(c.expected_max(), c.max_value() + model.specs[i].p_max, n)
        })
        .collect()
}

fn evaluate_points(
    model: &MonthModel,
    planner: Planner,
    points: &[Vec<f64>],
    next: &[ValueFunction],
    tune: &EvalPools,
    eval: &EvalPools,
    tuning: &TuningGrid,
) -> Vec<Result<PointValue>> {
    let job = |x: &Vec<f64>| evaluate_value_rule(model, planner, x, next, tune, eval, tuning);
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        points.par_iter().map(job).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        points.iter().map(job).collect()
    }
}

/// Backward recursion over the month, from the last day to the first.
pub fn backward_recursion(model: &MonthModel, source: &PoolSource, cfg: &DpConfig) -> Result<DpResult> {
    if cfg.n_days == 0 {
        return Err(Error::Config("n_days must be positive".into()));
    }
    let grids = default_grids(model, cfg.grid_points)?;
    let centres: Vec<f64> = model.consumption.iter().map(ScenarioSet::expected_max).collect();
    let points = design_points(&grids, &centres, cfg.design);
    let terminal = terminal_functions(model.n_sites(), model.tariffs);
    let mut days: Vec<DayValues> = Vec::with_capacity(cfg.n_days);
    for d in (1..=cfg.n_days).rev() {
        let next = days.last().map_or(&terminal, |v| &v.fitted).clone();
        let (tune, eval) = source.pools(model, d, cfg.n_eval, cfg.seed)?;
        let mut ok = Vec::new();
        let mut failed = Vec::new();
        for (x, r) in points.iter().zip(evaluate_points(model, cfg.planner, &points, &next, &tune, &eval, &cfg.tuning)) {
            match r {
                Ok(v) => ok.push(v),
                Err(e) => failed.push((x.clone(), e.to_string())),
            }
        }
        if (ok.len() as f64) < 0.8 * points.len() as f64 {
            return Err(Error::Solver {
                status: socp::SolveStatus::NumericalError,
                detail: format!("day {d}: only {} of {} state points solved", ok.len(), points.len()),
            });
        }
        let fitted = if model.n_sites() == 1 {
            let pts: Vec<(f64, f64)> = ok.iter().map(|p| (p.state[0], p.value)).collect();
            vec![fit_convex_pwl(&pts, cfg.n_segments.min(pts.len() - 1))?]
        } else {
            let pts: Vec<(Vec<f64>, f64)> = ok.iter().map(|p| (p.state.clone(), p.value)).collect();
            let per_site = grids.iter().map(StateGrid::len).min().unwrap_or(2);
            fit_separable(&pts, cfg.n_segments.min(per_site - 1))?
        };
        days.push(DayValues {
            day: d,
            points: ok,
            failed,
            fitted,
        });
    }
    days.reverse();
    Ok(DpResult { grids, days, terminal })
}
