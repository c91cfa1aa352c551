//! The combined daily stochastic program: FCR revenue, expected cost-to-go
//! of the peak through the value function, and electricity cost, for one
//! site or several sites sharing one FCR bid.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::domain::{BatterySpec, Tariffs, TimeGrid};
use crate::dp::ValueFunction;
use crate::error::{Error, Result};
use crate::freqmodel::UncertaintySet;
use crate::robustfcr::{self, PolicyVars, PsBounds, RechargeDecision};
use crate::scenarios::ScenarioSet;
use crate::socp::{self, ConicProgram, LinExpr, Solution, SolverOptions, Var};

/// Per-site inputs of the day problem.
#[derive(Debug, Clone, Copy)]
pub struct SiteInput<'a> {
    pub spec: &'a BatterySpec,
    /// Reduced consumption scenarios (MW per step).
    pub consumption: &'a ScenarioSet,
    pub value_function: &'a ValueFunction,
    pub p_peak_prev: f64,
}

/// Inputs shared by all sites.
#[derive(Debug, Clone, Copy)]
pub struct SharedInput<'a> {
    pub grid: &'a TimeGrid,
    pub tariffs: &'a Tariffs,
    /// Reduced folded frequency-deviation scenarios.
    pub frequency: &'a ScenarioSet,
    pub uncertainty: &'a UncertaintySet,
    pub n_rc: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DayOptions {
    /// Pure peak shaving.
    pub force_r_zero: bool,
    /// Pure FCR.
    pub force_ps_zero: bool,
    /// Drops the requirement that the peak-shaving energy ends the day at
    /// or above `E0`.
    pub free_terminal: bool,
}

#[derive(Debug, Clone)]
struct SiteVars {
    pol: PolicyVars,
    /// `ps[v][k]`
    ps: Vec<Vec<Var>>,
    /// Peak epigraph per combined scenario `j = v·n_w + w`.
    peaks: Vec<Var>,
    thetas: Vec<Var>,
    r_site: Option<Vec<Var>>,
}

/// An assembled day problem together with the handles needed to read the
/// decision back.
#[derive(Debug, Clone)]
pub struct DayProblem {
    pub program: ConicProgram,
    r_agg: Var,
    sites: Vec<SiteVars>,
    n_w: usize,
    multi: bool,
    revenue_rate: f64,
}

impl DayProblem {
    pub fn n_sites(&self) -> usize {
        self.sites.len()
    }

    /// Number of peak-shaving variables of site `i` (`n_v·n_t`).
    pub fn ps_var_count(&self, i: usize) -> usize {
        self.sites[i].ps.iter().map(Vec::len).sum()
    }

    pub fn peak_var_count(&self, i: usize) -> usize {
        self.sites[i].peaks.len()
    }

    pub fn r_agg_var(&self) -> Var {
        self.r_agg
    }

    /// Peak epigraph of site `i`, combined scenario `(v, w)`.
    pub fn peak_var(&self, i: usize, v: usize, w: usize) -> Var {
        self.sites[i].peaks[v * self.n_w + w]
    }

    pub fn ps_var(&self, i: usize, v: usize, k: usize) -> Var {
        self.sites[i].ps[v][k]
    }

    /// Pins the FCR capacity and recharge policy to a given decision, leaving
    /// only the peak-shaving recourse free.
    pub fn fix_policy(&mut self, r_agg: f64, decisions: &[RechargeDecision]) -> Result<()> {
        if decisions.len() != self.sites.len() {
            return Err(Error::Config("one decision per site is required".into()));
        }
        self.program.set_bounds(self.r_agg, r_agg, r_agg);
        for (sv, dec) in self.sites.iter().zip(decisions) {
            if dec.n_t() != sv.pol.n_t() {
                return Err(Error::Config("decision does not match the time grid".into()));
            }
            for (k, row) in sv.pol.d.iter().enumerate() {
                for &(i, v) in row {
                    self.program.set_bounds(v, dec.d[(k, i)], dec.d[(k, i)]);
                }
            }
            if let Some(rs) = &sv.r_site {
                for (k, &v) in rs.iter().enumerate() {
                    self.program.set_bounds(v, dec.r[k], dec.r[k]);
                }
            }
        }
        Ok(())
    }
}

fn check_inputs(sites: &[SiteInput], sh: &SharedInput) -> Result<()> {
    let n_t = sh.grid.n_t();
    if sites.is_empty() {
        return Err(Error::Config("at least one site is required".into()));
    }
    if sh.frequency.n_t() != n_t || sh.uncertainty.n_t() != n_t {
        return Err(Error::Config("frequency scenarios do not match the time grid".into()));
    }
    if sh.n_rc > n_t {
        return Err(Error::Config(format!("n_rc {} exceeds n_t {n_t}", sh.n_rc)));
    }
    for s in sites {
        if s.consumption.n_t() != n_t {
            return Err(Error::Config("consumption scenarios do not match the time grid".into()));
        }
        s.value_function.check()?;
        let b = s.spec;
        if !(b.p_min <= 0.0 && b.p_max >= 0.0 && b.e_min <= b.e0 && b.e0 <= b.e_max) {
            return Err(Error::FcrConsumesBattery { step: 0 });
        }
    }
    Ok(())
}

/// Single-site day problem with a constant capacity `r`.
pub fn build_day_problem(site: SiteInput, shared: SharedInput, opts: DayOptions) -> Result<DayProblem> {
    build(&[site], shared, opts, false)
}

/// Several sites with per-step capacities adding up to one bid `r_agg`.
pub fn build_multisite(sites: &[SiteInput], shared: SharedInput, opts: DayOptions) -> Result<DayProblem> {
    build(sites, shared, opts, true)
}

fn build(sites: &[SiteInput], sh: SharedInput, opts: DayOptions, multi: bool) -> Result<DayProblem> {
    check_inputs(sites, &sh)?;
    let n_t = sh.grid.n_t();
    let dt = sh.grid.dt_hours();
    let n_w = sh.frequency.len();
    let f_mean = sh.frequency.mean();
    let c_elec = sh.tariffs.c_elec;
    let mut p = ConicProgram::new();

    let r_cap: f64 = if opts.force_r_zero {
        0.0
    } else if multi {
        sites.iter().map(|s| s.spec.max_symmetric_power()).sum()
    } else {
        sites[0].spec.max_symmetric_power()
    };
    let r_agg = p.add_var("r", 0.0, r_cap);
    let revenue_rate = sh.tariffs.c_fcr * sh.grid.horizon_hours();
    let mut obj = LinExpr::term(r_agg, -revenue_rate);

    let mut site_vars = Vec::with_capacity(sites.len());
    let mut coupling: Vec<LinExpr> = vec![LinExpr::zero(); n_t];
    for (i, s) in sites.iter().enumerate() {
        let tag = if multi { format!("s{i}.") } else { String::new() };
        let spec = s.spec;
        let (r_exprs, r_site) = if multi {
            let vars: Vec<Var> = (0..n_t)
                .map(|k| p.add_var(format!("{tag}r[{k}]"), 0.0, spec.max_symmetric_power()))
                .collect();
            for (k, v) in vars.iter().enumerate() {
                coupling[k].add_term(*v, 1.0);
            }
            (vars.iter().map(|&v| LinExpr::from(v)).collect(), Some(vars))
        } else {
            (vec![LinExpr::from(r_agg); n_t], None)
        };
        let pol = PolicyVars::new(&mut p, r_exprs, sh.n_rc, &tag);
        let rt = robustfcr::add_robust_constraints(&mut p, &pol, spec, sh.grid, sh.uncertainty, &tag);

        // FCR power (D + diag r) Δf_w as an expression, and its mean.
        let fcr_expr = |k: usize, dev: &[f64]| -> LinExpr {
            let mut e = pol.r[k].scaled(dev[k]);
            for &(j, v) in &pol.d[k] {
                e.add_term(v, dev[j]);
            }
            e
        };
        for k in 0..n_t {
            obj.add_assign_scaled(&fcr_expr(k, &f_mean), c_elec * dt);
        }

        // Worst-case FCR occupancy per step, named once so the scenario rows
        // below stay short.
        let named = |p: &mut ConicProgram, name: String, e: LinExpr| -> Var {
            let v = p.free_var(name);
            p.add_eq(v, e);
            v
        };
        let mut up = Vec::with_capacity(n_t);
        let mut down = Vec::with_capacity(n_t);
        let mut e_up = Vec::with_capacity(n_t);
        let mut e_down = Vec::with_capacity(n_t);
        for k in 0..n_t {
            up.push(named(&mut p, format!("{tag}up[{k}]"), rt.rc_sup[k].clone() + pol.r[k].clone()));
            down.push(named(&mut p, format!("{tag}down[{k}]"), rt.rc_neg_sup[k].clone() + pol.r[k].clone()));
            e_up.push(named(&mut p, format!("{tag}eup[{k}]"), rt.e_sup[k].clone()));
            e_down.push(named(&mut p, format!("{tag}edown[{k}]"), rt.e_neg_sup[k].clone()));
        }

        let n_v = s.consumption.len();
        let mut ps = Vec::with_capacity(n_v);
        for (v, (_, pv)) in s.consumption.iter().enumerate() {
            let (lo, hi) = if opts.force_ps_zero {
                (0.0, 0.0)
            } else {
                (spec.p_min, spec.p_max)
            };
            let row: Vec<Var> = (0..n_t).map(|k| p.add_var(format!("{tag}ps[{v},{k}]"), lo, hi)).collect();
            let mut prev = LinExpr::constant(spec.e0);
            for k in 0..n_t {
                let x = row[k];
                p.add_le(x + up[k], spec.p_max);
                p.add_le(LinExpr::from(down[k]) + spec.p_min, x);
                let energy = p.add_var(format!("{tag}e[{v},{k}]"), spec.e_min, spec.e_max);
                p.add_eq(energy, prev + LinExpr::term(x, dt));
                p.add_le(energy + e_up[k], spec.e_max);
                p.add_le(LinExpr::from(e_down[k]) + spec.e_min, energy);
                obj.add_term(x, pv * c_elec * dt);
                prev = energy.into();
            }
            if !opts.free_terminal {
                p.add_le(spec.e0, prev);
            }
            ps.push(row);
        }

        let pieces = s.value_function.affine_pieces();
        let mut peaks = Vec::with_capacity(n_v * n_w);
        let mut thetas = Vec::with_capacity(n_v * n_w);
        for (v, (prof, pv)) in s.consumption.iter().enumerate() {
            for (w, (dev, pw)) in sh.frequency.iter().enumerate() {
                let pk = p.add_var(format!("{tag}peak[{v},{w}]"), s.p_peak_prev, f64::INFINITY);
                for k in 0..n_t {
                    p.add_le(fcr_expr(k, dev) + ps[v][k] + prof[k], pk);
                }
                let th = p.free_var(format!("{tag}theta[{v},{w}]"));
                for &(a, b) in &pieces {
                    p.add_le(LinExpr::term(pk, b) + a, th);
                }
                obj.add_term(th, pv * pw);
                peaks.push(pk);
                thetas.push(th);
            }
        }
        site_vars.push(SiteVars {
            pol,
            ps,
            peaks,
            thetas,
            r_site,
        });
    }
    if multi {
        for c in coupling {
            p.add_eq(c, r_agg);
        }
    }
    p.set_objective(obj);
    Ok(DayProblem {
        program: p,
        r_agg,
        sites: site_vars,
        n_w,
        multi,
        revenue_rate,
    })
}

/// Per-step capacities of several sites behind one aggregated bid.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiSiteDecision {
    pub r_agg: f64,
    /// `r_site[i][k]`
    pub r_site: Vec<Vec<f64>>,
    pub d_site: Vec<DMatrix<f64>>,
}

impl MultiSiteDecision {
    /// Largest violation of `Σᵢ r_site[i][k] = r_agg`.
    pub fn coupling_residual(&self) -> f64 {
        let n_t = self.r_site.first().map_or(0, Vec::len);
        (0..n_t)
            .map(|k| (self.r_site.iter().map(|r| r[k]).sum::<f64>() - self.r_agg).abs())
            .fold(0.0, f64::max)
    }
}

/// What the runtime needs from one site after the day problem.
#[derive(Debug, Clone)]
pub struct SitePlan {
    pub decision: RechargeDecision,
    pub bounds: PsBounds,
}

#[derive(Debug, Clone)]
pub struct DayDecision {
    pub r_agg: f64,
    pub sites: Vec<SitePlan>,
    pub multi: Option<MultiSiteDecision>,
    /// Optimal objective of the day problem (EUR).
    pub objective: f64,
    /// The FCR revenue term of the objective (EUR).
    pub revenue: f64,
    pub solution: Solution,
}

/// Solves and extracts the decision.
pub fn solve_day(problem: &DayProblem, specs: &[BatterySpec], shared: SharedInput, opts: &SolverOptions) -> Result<DayDecision> {
    let sol = socp::solve(&problem.program, opts)?.require_optimal()?;
    extract_decision(problem, sol, specs, shared)
}

/// Reads back the numeric decision; envelopes and the virtual split are
/// recomputed from the numeric `(r, D)`.
/// Largest relative shrink of a solved decision accepted as solver slack.
const MAX_SHRINK: f64 = 1e-3;

pub fn extract_decision(
    problem: &DayProblem,
    sol: Solution,
    specs: &[BatterySpec],
    shared: SharedInput,
) -> Result<DayDecision> {
    let sol = sol.require_optimal()?;
    if specs.len() != problem.sites.len() {
        return Err(Error::Config("one battery spec per site is required".into()));
    }
    let info = &problem.program.vars()[problem.r_agg.index()];
    let mut r_agg = sol.value(problem.r_agg).clamp(info.lower, info.upper);
    let mut decisions = Vec::with_capacity(specs.len());
    let mut lambda: f64 = 1.0;
    for (sv, spec) in problem.sites.iter().zip(specs) {
        let mut decision = sv.pol.decision(&sol);
        if !problem.multi {
            decision.r = vec![r_agg; decision.n_t()];
        }
        let env = robustfcr::compute_envelopes(&decision, shared.uncertainty, shared.grid);
        lambda = lambda.min(robustfcr::fit_scale(spec, &env));
        decisions.push(decision);
    }
    // solver tolerance can leave the envelopes marginally outside the battery
    if lambda < 1.0 - MAX_SHRINK {
        return Err(Error::FcrConsumesBattery { step: 0 });
    }
    if lambda < 1.0 {
        r_agg *= lambda;
        decisions = decisions.iter().map(|d| d.scaled(lambda)).collect();
    }
    let mut sites = Vec::with_capacity(specs.len());
    for (decision, spec) in decisions.into_iter().zip(specs) {
        let env = robustfcr::compute_envelopes(&decision, shared.uncertainty, shared.grid);
        let bounds = robustfcr::split_virtual(spec, &env)?.viable(spec, shared.grid.dt_hours());
        sites.push(SitePlan { decision, bounds });
    }
    let multi = problem.multi.then(|| MultiSiteDecision {
        r_agg,
        r_site: problem
            .sites
            .iter()
            .map(|sv| sv.r_site.as_ref().map_or_else(Vec::new, |v| v.iter().map(|&x| lambda * sol.value(x)).collect()))
            .collect(),
        d_site: sites.iter().map(|s| s.decision.d.clone()).collect(),
    });
    Ok(DayDecision {
        r_agg,
        sites,
        multi,
        objective: sol.objective,
        revenue: problem.revenue_rate * sol.value(problem.r_agg),
        solution: sol,
    })
}

impl DayDecision {
    /// Peak-shaving trajectory of site `i` for consumption scenario `v`.
    pub fn planned_ps(&self, problem: &DayProblem, i: usize, v: usize) -> Vec<f64> {
        problem.sites[i].ps[v].iter().map(|&x| self.solution.value(x)).collect()
    }

    /// Expected value-function term `Σⱼ pⱼ θⱼ` of site `i`.
    pub fn thetas(&self, problem: &DayProblem, i: usize) -> Vec<f64> {
        problem.sites[i].thetas.iter().map(|&x| self.solution.value(x)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::freqmodel::UncertaintySet;
    use approx::assert_abs_diff_eq;

    struct Fixture {
        spec: BatterySpec,
        grid: TimeGrid,
        tariffs: Tariffs,
        cons: ScenarioSet,
        freq: ScenarioSet,
        u: UncertaintySet,
        vf: ValueFunction,
    }

    fn flat(level: f64, n_t: usize) -> Fixture {
        let tariffs = Tariffs::default();
        Fixture {
            spec: BatterySpec::symmetric(1.0, 0.5, 1.0),
            grid: TimeGrid::per_day(n_t),
            cons: ScenarioSet::uniform(vec![vec![level; n_t]]).unwrap(),
            freq: ScenarioSet::uniform(vec![vec![0.0; n_t]]).unwrap(),
            u: UncertaintySet::deterministic(vec![0.0; n_t], 0.05),
            vf: ValueFunction::linear(tariffs.c_peak),
            tariffs,
        }
    }

    fn tight() -> SolverOptions {
        SolverOptions {
            feas_tol: 1e-9,
            gap_tol: 1e-9,
            ..SolverOptions::default()
        }
    }

    fn shared(f: &Fixture) -> SharedInput<'_> {
        SharedInput {
            grid: &f.grid,
            tariffs: &f.tariffs,
            frequency: &f.freq,
            uncertainty: &f.u,
            n_rc: 2,
        }
    }

    fn site(f: &Fixture, prev: f64) -> SiteInput<'_> {
        SiteInput {
            spec: &f.spec,
            consumption: &f.cons,
            value_function: &f.vf,
            p_peak_prev: prev,
        }
    }

    #[test]
    fn interference_rule_variable_count() {
        let f = flat(0.8, 6);
        let p = build_day_problem(site(&f, 0.0), shared(&f), DayOptions::default()).unwrap();
        assert_eq!(p.ps_var_count(0), f.cons.len() * 6);
        assert_eq!(p.peak_var_count(0), f.cons.len() * f.freq.len());
    }

    #[test]
    fn flat_profile_without_fcr() {
        // A flat 0.8 MW day cannot be shaved below 0.8 when the energy must
        // come back by the end of the day.
        let f = flat(0.8, 4);
        let opts = DayOptions {
            force_r_zero: true,
            ..Default::default()
        };
        let p = build_day_problem(site(&f, 0.0), shared(&f), opts).unwrap();
        let d = solve_day(&p, &[f.spec], shared(&f), &tight()).unwrap();
        assert_abs_diff_eq!(d.solution.value(p.peak_var(0, 0, 0)), 0.8, epsilon = 1e-6);
        assert_abs_diff_eq!(d.r_agg, 0.0, epsilon = 1e-9);
    }

    /// Lowest flat peak reachable with the energy above `E_min`, by bisection.
    fn flat_peak_oracle(level: f64, spec: &BatterySpec, grid: &TimeGrid) -> f64 {
        let feasible = |peak: f64| {
            let cut = (level - peak).max(0.0);
            cut <= -spec.p_min && cut * grid.horizon_hours() <= spec.e0 - spec.e_min
        };
        let (mut lo, mut hi) = (0.0, level);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if feasible(mid) {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        hi
    }

    #[test]
    fn flat_profile_free_terminal_matches_oracle() {
        for level in [0.8, 0.3] {
            let mut f = flat(level, 4);
            f.spec = BatterySpec::symmetric(4.0, 0.5, 1.0);
            let opts = DayOptions {
                force_r_zero: true,
                free_terminal: true,
                ..Default::default()
            };
            let p = build_day_problem(site(&f, 0.0), shared(&f), opts).unwrap();
            let d = solve_day(&p, &[f.spec], shared(&f), &tight()).unwrap();
            let want = flat_peak_oracle(level, &f.spec, &f.grid);
            assert_abs_diff_eq!(d.solution.value(p.peak_var(0, 0, 0)), want, epsilon = 1e-6);
        }
    }

    #[test]
    fn revenue_bookkeeping() {
        let f = flat(0.8, 4);
        let p = build_day_problem(site(&f, 10.0), shared(&f), DayOptions::default()).unwrap();
        let d = solve_day(&p, &[f.spec], shared(&f), &tight()).unwrap();
        assert_abs_diff_eq!(d.revenue / (f.tariffs.c_fcr * 24.0), d.r_agg, epsilon = 1e-9);
        for b in &d.sites {
            for k in 0..4 {
                assert!(f.spec.p_min <= b.bounds.p_min_ps[k] && b.bounds.p_min_ps[k] <= b.bounds.p_max_ps[k]);
                assert!(b.bounds.p_max_ps[k] <= f.spec.p_max);
            }
        }
    }
}
