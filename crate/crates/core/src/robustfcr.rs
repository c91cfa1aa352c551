//! Robust FCR delivery: the linear recharge policy, its robust constraint
//! system, the FCR-only program and the worst-case envelopes used to split
//! the battery between FCR and peak shaving.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::domain::{stored_rate, BatterySpec, Tariffs, TimeGrid};
use crate::error::{Error, Result};
use crate::freqmodel::UncertaintySet;
use crate::socp::{self, ConicProgram, LinExpr, Solution, SolverOptions, Var};

pub const DEFAULT_N_RC: usize = 8;

/// Numeric FCR capacity and recharge matrix.
///
/// `r` holds the capacity per step; it is constant for a single site and
/// may vary per step when several sites share one aggregated bid.
#[derive(Debug, Clone, PartialEq)]
pub struct RechargeDecision {
    pub r: Vec<f64>,
    pub d: DMatrix<f64>,
    pub n_rc: usize,
}

impl RechargeDecision {
    pub fn constant(r: f64, d: DMatrix<f64>, n_rc: usize) -> Self {
        Self {
            r: vec![r; d.nrows()],
            d,
            n_rc,
        }
    }

    pub fn zero(n_t: usize, n_rc: usize) -> Self {
        Self::constant(0.0, DMatrix::zeros(n_t, n_t), n_rc)
    }

    pub fn n_t(&self) -> usize {
        self.d.nrows()
    }

    /// Capacity of the first step (the bid for a single site).
    pub fn capacity(&self) -> f64 {
        self.r.first().copied().unwrap_or(0.0)
    }

    /// `M = D + diag(r)`, the map from deviations to FCR power.
    pub fn gain(&self) -> DMatrix<f64> {
        let mut m = self.d.clone();
        for k in 0..self.n_t() {
            m[(k, k)] += self.r[k];
        }
        m
    }

    /// Checks the band structure of `D`.
    pub fn check(&self) -> Result<()> {
        let n = self.n_t();
        if self.d.ncols() != n || self.r.len() != n {
            return Err(Error::Config("recharge matrix must be square and match r".into()));
        }
        for k in 0..n {
            for i in 0..n {
                let in_band = i < k && k - i <= self.n_rc;
                if !in_band && self.d[(k, i)] != 0.0 {
                    return Err(Error::Config(format!("d[{k},{i}] outside the recharge band")));
                }
            }
        }
        if self.r.iter().any(|r| *r < 0.0) {
            return Err(Error::Config("negative FCR capacity".into()));
        }
        Ok(())
    }

    /// Nonzero band entries as `(k, i, value)`.
    pub fn band_triples(&self) -> Vec<(usize, usize, f64)> {
        let n = self.n_t();
        let mut out = Vec::new();
        for k in 0..n {
            for i in k.saturating_sub(self.n_rc)..k {
                out.push((k, i, self.d[(k, i)]));
            }
        }
        out
    }
}

/// Symbolic policy: per-step capacity expressions and band variables.
#[derive(Debug, Clone)]
pub struct PolicyVars {
    pub r: Vec<LinExpr>,
    /// `d[k]` lists `(i, var)` for the band entries of row `k`.
    pub d: Vec<Vec<(usize, Var)>>,
    pub n_rc: usize,
}

impl PolicyVars {
    /// Adds free band variables `d_ki`, `k − n_rc ≤ i < k`.
    pub fn new(p: &mut ConicProgram, r: Vec<LinExpr>, n_rc: usize, tag: &str) -> Self {
        let n_t = r.len();
        let d = (0..n_t)
            .map(|k| {
                (k.saturating_sub(n_rc)..k)
                    .map(|i| (i, p.free_var(format!("{tag}d[{k},{i}]"))))
                    .collect()
            })
            .collect();
        Self { r, d, n_rc }
    }

    pub fn n_t(&self) -> usize {
        self.r.len()
    }

    pub fn decision(&self, sol: &Solution) -> RechargeDecision {
        let n = self.n_t();
        let mut d = DMatrix::zeros(n, n);
        for (k, row) in self.d.iter().enumerate() {
            for &(i, v) in row {
                d[(k, i)] = sol.value(v);
            }
        }
        RechargeDecision {
            r: self.r.iter().map(|e| sol.eval(e).max(0.0)).collect(),
            d,
            n_rc: self.n_rc,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    EnergyLower,
    EnergyUpper,
    PowerLower,
    PowerUpper,
}

/// One robust row `a(dec)·Δf ≤ b(dec)`.
#[derive(Debug, Clone)]
pub struct RobustRow {
    pub block: Block,
    pub step: usize,
    pub a: Vec<LinExpr>,
    pub b: LinExpr,
}

/// Stacked robust system `A Δf ≤ b` with rows ordered
/// `[−energy | +energy | −power | +power]`.
#[derive(Debug, Clone)]
pub struct RobustSystem {
    pub rows: Vec<RobustRow>,
    pub dt_hours: f64,
}

/// `a_i` of the FCR power `(D + diag r)_k Δf` excluding the capacity term.
fn recharge_coeffs(pol: &PolicyVars, k: usize) -> Vec<LinExpr> {
    let mut a = vec![LinExpr::zero(); pol.n_t()];
    for &(i, v) in &pol.d[k] {
        a[i] = LinExpr::term(v, 1.0);
    }
    a
}

/// Coefficients of the FCR energy after step `k`, `(G M)_k`.
fn energy_coeffs(pol: &PolicyVars, k: usize, dt: f64) -> Vec<LinExpr> {
    let mut a = vec![LinExpr::zero(); pol.n_t()];
    for j in 0..=k {
        a[j].add_assign_scaled(&pol.r[j], dt);
        for &(i, v) in &pol.d[j] {
            a[i].add_term(v, dt);
        }
    }
    a.into_iter().map(LinExpr::compact).collect()
}

pub fn build_system(pol: &PolicyVars, spec: &BatterySpec, grid: &TimeGrid) -> RobustSystem {
    let n_t = pol.n_t();
    let dt = grid.dt_hours();
    let mut rows = Vec::with_capacity(4 * n_t);
    let energy: Vec<Vec<LinExpr>> = (0..n_t).map(|k| energy_coeffs(pol, k, dt)).collect();
    for (k, a) in energy.iter().enumerate() {
        rows.push(RobustRow {
            block: Block::EnergyLower,
            step: k,
            a: a.iter().map(|e| -e.clone()).collect(),
            b: LinExpr::constant(-(spec.e_min - spec.e0)),
        });
    }
    for (k, a) in energy.into_iter().enumerate() {
        rows.push(RobustRow {
            block: Block::EnergyUpper,
            step: k,
            a,
            b: LinExpr::constant(spec.e_max - spec.e0),
        });
    }
    for k in 0..n_t {
        rows.push(RobustRow {
            block: Block::PowerLower,
            step: k,
            a: recharge_coeffs(pol, k).into_iter().map(|e| -e).collect(),
            b: -(LinExpr::constant(spec.p_min) + pol.r[k].clone()),
        });
    }
    for k in 0..n_t {
        rows.push(RobustRow {
            block: Block::PowerUpper,
            step: k,
            a: recharge_coeffs(pol, k),
            b: LinExpr::constant(spec.p_max) - pol.r[k].clone(),
        });
    }
    RobustSystem { rows, dt_hours: dt }
}

/// Upper bounds on `a·Δf` and `−a·Δf` over the uncertainty set, as affine
/// expressions tied to the program through second-order cone constraints.
///
/// The whitened coefficients `y = W⁻ᵀa` are shared by both directions.
pub fn robust_pair(p: &mut ConicProgram, a: &[LinExpr], u: &UncertaintySet, tag: &str) -> (LinExpr, LinExpr) {
    let n = a.len();
    let mut mean_term = LinExpr::zero();
    for (ai, m) in a.iter().zip(&u.mean) {
        mean_term.add_assign_scaled(ai, *m);
    }
    let mean_term = mean_term.compact();
    let kappa = u.kappa();
    if kappa == 0.0 || a.iter().all(LinExpr::is_constant) && a.iter().all(|e| e.constant == 0.0) {
        return (mean_term.clone(), -mean_term);
    }
    // long expressions get an alias variable so y stays sparse
    let alias: Vec<LinExpr> = a
        .iter()
        .enumerate()
        .map(|(i, e)| {
            if e.terms.len() > 2 {
                let v = p.free_var(format!("{tag}a[{i}]"));
                p.add_eq(v, e.clone());
                LinExpr::from(v)
            } else {
                e.clone()
            }
        })
        .collect();
    let mut up = Vec::with_capacity(n);
    let mut down = Vec::with_capacity(n);
    for l in 0..n {
        let (pf, pb) = (u.phi_f[l], u.phi_b[l]);
        if pf == 0.0 && pb == 0.0 {
            continue;
        }
        let mut y = LinExpr::zero();
        for i in l..n {
            let c = u.chol[(i, l)];
            if c != 0.0 {
                y.add_assign_scaled(&alias[i], c);
            }
        }
        let y = y.compact();
        if y.is_constant() && y.constant == 0.0 {
            continue;
        }
        let y = if y.terms.len() > 1 {
            let v = p.free_var(format!("{tag}y[{l}]"));
            p.add_eq(v, y);
            LinExpr::from(v)
        } else {
            y
        };
        // u⁺ ≥ φ_f y, u⁺ ≥ −φ_b y ; u⁻ ≥ −φ_f y, u⁻ ≥ φ_b y
        let uu = p.nonneg_var(format!("{tag}u+[{l}]"));
        p.add_le(y.scaled(pf), uu);
        p.add_le(y.scaled(-pb), uu);
        up.push(LinExpr::from(uu));
        let ud = p.nonneg_var(format!("{tag}u-[{l}]"));
        p.add_le(y.scaled(-pf), ud);
        p.add_le(y.scaled(pb), ud);
        down.push(LinExpr::from(ud));
    }
    if up.is_empty() {
        return (mean_term.clone(), -mean_term);
    }
    let tu = p.nonneg_var(format!("{tag}t+"));
    p.add_soc(tu, up);
    let td = p.nonneg_var(format!("{tag}t-"));
    p.add_soc(td, down);
    (mean_term.clone() + kappa * tu, -mean_term + kappa * td)
}

/// Worst-case FCR occupancy expressions for every step.
#[derive(Debug, Clone)]
pub struct RobustTerms {
    /// `sup` and `sup of the negation` of the recharge power `D_k Δf`.
    pub rc_sup: Vec<LinExpr>,
    pub rc_neg_sup: Vec<LinExpr>,
    /// Same for the FCR energy after step `k` relative to `E0`.
    pub e_sup: Vec<LinExpr>,
    pub e_neg_sup: Vec<LinExpr>,
}

/// Adds the robust counterparts of every row of the system to `p`.
pub fn add_robust_constraints(
    p: &mut ConicProgram,
    pol: &PolicyVars,
    spec: &BatterySpec,
    grid: &TimeGrid,
    u: &UncertaintySet,
    tag: &str,
) -> RobustTerms {
    let n_t = pol.n_t();
    let dt = grid.dt_hours();
    let mut t = RobustTerms {
        rc_sup: Vec::with_capacity(n_t),
        rc_neg_sup: Vec::with_capacity(n_t),
        e_sup: Vec::with_capacity(n_t),
        e_neg_sup: Vec::with_capacity(n_t),
    };
    for k in 0..n_t {
        let (hi, lo) = robust_pair(p, &energy_coeffs(pol, k, dt), u, &format!("{tag}E{k}"));
        p.add_le(lo.clone(), spec.e0 - spec.e_min);
        p.add_le(hi.clone(), spec.e_max - spec.e0);
        t.e_sup.push(hi);
        t.e_neg_sup.push(lo);
    }
    for k in 0..n_t {
        let (hi, lo) = robust_pair(p, &recharge_coeffs(pol, k), u, &format!("{tag}P{k}"));
        p.add_le(lo.clone() + pol.r[k].clone(), -spec.p_min);
        p.add_le(hi.clone() + pol.r[k].clone(), spec.p_max);
        t.rc_sup.push(hi);
        t.rc_neg_sup.push(lo);
    }
    t
}

/// Maximises daily FCR revenue subject to the robust constraints.
pub fn solve_fcr_only(
    spec: &BatterySpec,
    grid: &TimeGrid,
    u: &UncertaintySet,
    tariffs: &Tariffs,
    n_rc: usize,
    opts: &SolverOptions,
) -> Result<(RechargeDecision, f64)> {
    if n_rc > grid.n_t() {
        return Err(Error::Config(format!("n_rc {n_rc} exceeds n_t {}", grid.n_t())));
    }
    let mut p = ConicProgram::new();
    let r = p.add_var("r", 0.0, spec.max_symmetric_power());
    let pol = PolicyVars::new(&mut p, vec![LinExpr::from(r); grid.n_t()], n_rc, "");
    add_robust_constraints(&mut p, &pol, spec, grid, u, "");
    p.set_objective(LinExpr::term(r, -tariffs.c_fcr * grid.horizon_hours()));
    let sol = socp::solve(&p, opts)?.require_optimal()?;
    let dec = pol.decision(&sol);
    let obj = -tariffs.daily_fcr_revenue(dec.capacity(), grid);
    Ok((dec, obj))
}

/// Worst-case FCR power and energy occupancy per step.
#[derive(Debug, Clone, PartialEq)]
pub struct FcrEnvelopes {
    pub p_min_fcr: Vec<f64>,
    pub p_max_fcr: Vec<f64>,
    /// Energy after step `k`, relative to `E0`.
    pub e_min_fcr: Vec<f64>,
    pub e_max_fcr: Vec<f64>,
}

pub fn compute_envelopes(dec: &RechargeDecision, u: &UncertaintySet, grid: &TimeGrid) -> FcrEnvelopes {
    let n = dec.n_t();
    let dt = grid.dt_hours();
    let m = dec.gain();
    let mut env = FcrEnvelopes {
        p_min_fcr: Vec::with_capacity(n),
        p_max_fcr: Vec::with_capacity(n),
        e_min_fcr: Vec::with_capacity(n),
        e_max_fcr: Vec::with_capacity(n),
    };
    let mut cum = vec![0.0; n];
    for k in 0..n {
        let rc: Vec<f64> = dec.d.row(k).iter().copied().collect();
        env.p_max_fcr.push((dec.r[k] + u.sup(&rc)).max(0.0));
        env.p_min_fcr.push((-dec.r[k] + u.inf(&rc)).min(0.0));
        for (c, mk) in cum.iter_mut().zip(m.row(k).iter()) {
            *c += dt * mk;
        }
        env.e_max_fcr.push(u.sup(&cum).max(0.0));
        env.e_min_fcr.push(u.inf(&cum).min(0.0));
    }
    env
}

/// Power and energy bounds left to the peak-shaving virtual battery.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsBounds {
    pub p_min_ps: Vec<f64>,
    pub p_max_ps: Vec<f64>,
    /// Bounds on the peak-shaving energy after step `k`.
    pub e_min_ps: Vec<f64>,
    pub e_max_ps: Vec<f64>,
}

impl PsBounds {
    /// The whole battery, no FCR reservation.
    pub fn full(spec: &BatterySpec, n_t: usize) -> Self {
        Self {
            p_min_ps: vec![spec.p_min; n_t],
            p_max_ps: vec![spec.p_max; n_t],
            e_min_ps: vec![spec.e_min; n_t],
            e_max_ps: vec![spec.e_max; n_t],
        }
    }

    pub fn n_t(&self) -> usize {
        self.p_max_ps.len()
    }

    /// Tightens the energy bounds to the states from which every later
    /// window can still be reached within the power bounds, so a controller
    /// that respects the bounds step by step never gets trapped.
    pub fn viable(mut self, spec: &BatterySpec, dt_hours: f64) -> Self {
        let n = self.n_t();
        for k in (0..n.saturating_sub(1)).rev() {
            let hi = self.e_max_ps[k + 1] - dt_hours * stored_rate(self.p_min_ps[k + 1], spec);
            let lo = self.e_min_ps[k + 1] - dt_hours * stored_rate(self.p_max_ps[k + 1], spec);
            let (emin, emax) = (self.e_min_ps[k].max(lo), self.e_max_ps[k].min(hi));
            if emin <= emax {
                self.e_min_ps[k] = emin;
                self.e_max_ps[k] = emax;
            }
        }
        self
    }
}

/// Largest `λ ≤ 1` such that the envelopes of `λ·(r, D)` fit the battery.
/// Envelopes are positively homogeneous in the decision, so scaling them
/// is exact.
pub fn fit_scale(spec: &BatterySpec, env: &FcrEnvelopes) -> f64 {
    let mut lambda: f64 = 1.0;
    let mut cap = |need: f64, room: f64| {
        if need > 0.0 {
            lambda = lambda.min((room / need).max(0.0));
        }
    };
    for k in 0..env.p_max_fcr.len() {
        cap(env.p_max_fcr[k], spec.p_max);
        cap(-env.p_min_fcr[k], -spec.p_min);
        cap(env.e_max_fcr[k] - env.e_min_fcr[k], spec.e_max - spec.e_min);
    }
    lambda
}

impl RechargeDecision {
    pub fn scaled(&self, lambda: f64) -> Self {
        Self {
            r: self.r.iter().map(|r| r * lambda).collect(),
            d: &self.d * lambda,
            n_rc: self.n_rc,
        }
    }
}

/// Slack for envelope overshoot left by the solver's feasibility tolerance.
const SPLIT_TOL: f64 = 1e-5;

pub fn split_virtual(spec: &BatterySpec, env: &FcrEnvelopes) -> Result<PsBounds> {
    let n = env.p_max_fcr.len();
    let mut b = PsBounds {
        p_min_ps: Vec::with_capacity(n),
        p_max_ps: Vec::with_capacity(n),
        e_min_ps: Vec::with_capacity(n),
        e_max_ps: Vec::with_capacity(n),
    };
    for k in 0..n {
        let pmax = spec.p_max - env.p_max_fcr[k];
        let pmin = spec.p_min - env.p_min_fcr[k];
        let emax = spec.e_max - env.e_max_fcr[k];
        let emin = spec.e_min - env.e_min_fcr[k];
        if pmax < -SPLIT_TOL || pmin > SPLIT_TOL || emin > emax + SPLIT_TOL {
            return Err(Error::FcrConsumesBattery { step: k });
        }
        b.p_max_ps.push(pmax.max(0.0));
        b.p_min_ps.push(pmin.min(0.0));
        let emin = emin.min(emax);
        b.e_max_ps.push(emax.max(emin));
        b.e_min_ps.push(emin);
    }
    Ok(b)
}
