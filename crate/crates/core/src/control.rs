//! Runtime controllers: the state-feedback FCR recharge law and the
//! rule-based peak-shaving controller with its grid-search tuning.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::domain::{BatterySpec, TimeGrid};
use crate::error::{Error, Result};
use crate::robustfcr::{PsBounds, RechargeDecision};
use crate::scenarios::ScenarioSet;

const R_EPS: f64 = 1e-9;
/// Below this fraction of the day's largest capacity a step's deviation is
/// taken from the measurement: the reconstruction divides by `r_k` and
/// amplifies efficiency losses on the recharge power by `P^rc/r_k`.
const RECON_FLOOR: f64 = 0.2;

/// State-feedback FCR controller for one day.
///
/// The recharge power is driven by the realised energy changes of the FCR
/// (virtual) battery. Past deviations are reconstructed from those changes,
/// `Δf̂ᵢ = (ΔEᵢ/Δt − P^rcᵢ)/rᵢ`, which is the recursion form of the gain
/// `M = D (diag r + D)⁻¹` applied to `ΔE/Δt`.
#[derive(Debug, Clone)]
pub struct FcrRuntime {
    r: Vec<f64>,
    d: DMatrix<f64>,
    n_rc: usize,
    dt_hours: f64,
    dev_hat: Vec<f64>,
    rc: Vec<f64>,
    r_floor: f64,
}

impl FcrRuntime {
    pub fn new(dec: &RechargeDecision, grid: &TimeGrid) -> Result<Self> {
        dec.check()?;
        // A site may hold no capacity at some steps and still recharge
        // there; only a policy without any capacity must be silent.
        if dec.r.iter().all(|r| *r <= R_EPS) && dec.d.iter().any(|v| *v != 0.0) {
            return Err(Error::Config("recharge policy is nonzero while r = 0".into()));
        }
        Ok(Self {
            r: dec.r.clone(),
            d: dec.d.clone(),
            n_rc: dec.n_rc,
            dt_hours: grid.dt_hours(),
            dev_hat: Vec::with_capacity(dec.n_t()),
            rc: Vec::with_capacity(dec.n_t()),
            r_floor: (RECON_FLOOR * dec.r.iter().copied().fold(0.0, f64::max)).max(R_EPS),
        })
    }

    /// Index of the current step.
    pub fn step(&self) -> usize {
        self.dev_hat.len()
    }

    pub fn capacity(&self) -> f64 {
        self.r[self.step().min(self.r.len() - 1)]
    }

    /// Recharge power for the current step.
    pub fn recharge_power(&self) -> f64 {
        let k = self.step();
        (k.saturating_sub(self.n_rc)..k)
            .map(|i| self.d[(k, i)] * self.dev_hat[i])
            .sum()
    }

    /// `r Δf + P^rc` at the current step.
    pub fn fcr_power(&self, dev: f64, recharge: f64) -> f64 {
        fcr_power(self.capacity(), dev, recharge)
    }

    /// Closes the current step given the FCR energy change over it (MWh).
    /// `measured_dev` is used instead of the reconstruction when `r_k` is
    /// (nearly) zero.
    pub fn finish_step(&mut self, delta_e: f64, measured_dev: f64) {
        let k = self.step();
        let rc = self.recharge_power();
        let r = self.r[k];
        let dev = if r >= self.r_floor {
            (delta_e / self.dt_hours - rc) / r
        } else {
            measured_dev
        };
        self.rc.push(rc);
        self.dev_hat.push(dev);
    }

    pub fn recharge_history(&self) -> &[f64] {
        &self.rc
    }
}

pub fn fcr_power(r: f64, dev: f64, recharge: f64) -> f64 {
    r * dev + recharge
}

/// State-feedback gain `M = D (diag r + D)⁻¹`.
pub fn feedback_gain(dec: &RechargeDecision) -> Result<DMatrix<f64>> {
    let m = dec.gain();
    let inv = m
        .try_inverse()
        .ok_or_else(|| Error::Numerical("diag(r) + D is singular; state feedback needs r > 0".into()))?;
    Ok(&dec.d * inv)
}

/// Recharge power at step `k` from the energy history `E_0, …, E_k` of
/// the FCR battery, `(M ΔE/Δt)_k`.
pub fn recharge_power(gain: &DMatrix<f64>, energy: &[f64], k: usize, grid: &TimeGrid) -> f64 {
    (0..k)
        .map(|i| gain[(k, i)] * (energy[i + 1] - energy[i]) / grid.dt_hours())
        .sum()
}

/// Mean and standard deviation of `(D + diag r) Δf` per step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FcrStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FcrStats {
    pub fn zero(n_t: usize) -> Self {
        Self {
            mean: vec![0.0; n_t],
            std: vec![0.0; n_t],
        }
    }

    pub fn from_scenarios(dec: &RechargeDecision, freq: &ScenarioSet) -> Self {
        let m = dec.gain();
        let n = dec.n_t();
        let mut mean = vec![0.0; n];
        let mut sq = vec![0.0; n];
        for (row, p) in freq.iter() {
            let pw = &m * DVector::from_column_slice(row);
            for k in 0..n {
                mean[k] += p * pw[k];
                sq[k] += p * pw[k] * pw[k];
            }
        }
        let std = mean.iter().zip(&sq).map(|(m, s)| (s - m * m).max(0.0).sqrt()).collect();
        Self { mean, std }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControllerParams {
    pub p_thr_init: f64,
    pub z_sigma: f64,
}

/// Mutable state of the rule-based controller within a day.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RuleState {
    pub p_thr: f64,
    pub e_ps: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RuleStep {
    pub ps: f64,
    pub p_thr: f64,
    pub e_ps: f64,
}

/// Rounding left by the power-energy round trip at an active bound.
const SNAP: f64 = 1e-9;

/// Terminal power that changes stored energy by `de` over `hours`.
fn power_for_energy(de: f64, hours: f64, spec: &BatterySpec) -> f64 {
    if de >= 0.0 {
        de / (spec.eta_c * hours)
    } else {
        de * spec.eta_d / hours
    }
}

/// One step of the rule-based controller.
///
/// `p_hat` is the modified grid power `P^prof + mean + z·std`; `k` indexes
/// the bounds, whose energy entries refer to the end of step `k`.
pub fn rule_based_step(
    state: RuleState,
    p_hat: f64,
    bounds: &PsBounds,
    k: usize,
    spec: &BatterySpec,
    dt_hours: f64,
) -> RuleStep {
    let (pmin, pmax) = (bounds.p_min_ps[k], bounds.p_max_ps[k]);
    let (emin, emax) = (bounds.e_min_ps[k], bounds.e_max_ps[k]);
    let to_min = power_for_energy(emin - state.e_ps, dt_hours, spec);
    let to_max = power_for_energy(emax - state.e_ps, dt_hours, spec);
    let want = state.p_thr - p_hat;
    let mut ps = if want < 0.0 {
        want.max(pmin).max(to_min)
    } else {
        want.min(pmax).min(to_max)
    };
    // energy window forced by moving bounds
    let lo = pmin.max(to_min);
    let hi = pmax.min(to_max);
    if lo <= hi {
        ps = ps.clamp(lo, hi);
    } else if to_min > pmax {
        ps = pmax;
    } else {
        ps = pmin;
    }
    let mut e = crate::domain::energy_update_hours(state.e_ps, ps, dt_hours, spec);
    if ps == to_min || e < emin && emin - e < SNAP {
        e = emin;
    } else if ps == to_max || e > emax && e - emax < SNAP {
        e = emax;
    }
    let grid = p_hat + ps;
    let p_thr = if grid > state.p_thr { grid } else { state.p_thr };
    RuleStep { ps, p_thr, e_ps: e }
}

/// Trajectory of one simulated day under the rule-based controller.
#[derive(Debug, Clone, PartialEq)]
pub struct RuleDay {
    pub ps: Vec<f64>,
    pub e_ps: Vec<f64>,
    pub thresholds: Vec<f64>,
}

pub fn simulate_rule_day(
    profile: &[f64],
    stats: &FcrStats,
    bounds: &PsBounds,
    params: &ControllerParams,
    spec: &BatterySpec,
    grid: &TimeGrid,
) -> RuleDay {
    let n = profile.len();
    let mut st = RuleState {
        p_thr: params.p_thr_init,
        e_ps: spec.e0,
    };
    let mut out = RuleDay {
        ps: Vec::with_capacity(n),
        e_ps: Vec::with_capacity(n),
        thresholds: Vec::with_capacity(n),
    };
    for k in 0..n {
        let p_hat = profile[k] + stats.mean[k] + params.z_sigma * stats.std[k];
        let s = rule_based_step(st, p_hat, bounds, k, spec, grid.dt_hours());
        st = RuleState {
            p_thr: s.p_thr,
            e_ps: s.e_ps,
        };
        out.ps.push(s.ps);
        out.e_ps.push(s.e_ps);
        out.thresholds.push(s.p_thr);
    }
    out
}

/// Everything needed to score a controller on one site for one day.
pub struct DayContext<'a> {
    pub spec: &'a BatterySpec,
    pub grid: &'a TimeGrid,
    pub bounds: &'a PsBounds,
    pub stats: &'a FcrStats,
    pub c_elec: f64,
    pub p_peak_prev: f64,
    /// Cost-to-go as a function of the peak after the day.
    pub next_value: &'a (dyn Fn(f64) -> f64 + Sync),
}

/// Fresh evaluation pairs: consumption profiles and the FCR power each
/// frequency sample induces under the day's decision.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub profiles: Vec<Vec<f64>>,
    pub fcr_power: Vec<Vec<f64>>,
}

impl EvalSet {
    /// Pairs profile `i` with deviation vector `i` (both iid pools).
    pub fn new(profiles: &[Vec<f64>], deviations: &[Vec<f64>], dec: &RechargeDecision) -> Result<Self> {
        if profiles.is_empty() || profiles.len() != deviations.len() {
            return Err(Error::Config("evaluation pools must be nonempty and equally long".into()));
        }
        let m = dec.gain();
        let fcr_power = deviations
            .iter()
            .map(|d| (&m * DVector::from_column_slice(d)).iter().copied().collect())
            .collect();
        Ok(Self {
            profiles: profiles.to_vec(),
            fcr_power,
        })
    }

    pub fn len(&self) -> usize {
        self.profiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.profiles.is_empty()
    }
}

/// Cost of one evaluated day, excluding FCR revenue.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DayCost {
    pub peak: f64,
    pub value: f64,
    pub elec: f64,
    pub settlement: f64,
}

impl DayCost {
    pub fn total(&self) -> f64 {
        self.value + self.elec + self.settlement
    }
}

/// Value of the energy left in (or taken from) the battery at day end.
pub fn terminal_settlement(e_end: f64, spec: &BatterySpec, c_elec: f64) -> f64 {
    let short = (spec.e0 - e_end).max(0.0);
    let extra = (e_end - spec.e0).max(0.0);
    c_elec * (short / spec.eta_c - extra * spec.eta_d)
}

pub fn evaluate_day(ctx: &DayContext, params: &ControllerParams, profile: &[f64], fcr: &[f64]) -> DayCost {
    let day = simulate_rule_day(profile, ctx.stats, ctx.bounds, params, ctx.spec, ctx.grid);
    let dt = ctx.grid.dt_hours();
    let mut peak = ctx.p_peak_prev;
    let mut energy = 0.0;
    let mut fcr_drift = 0.0;
    for k in 0..profile.len() {
        let g = profile[k] + day.ps[k] + fcr[k];
        peak = peak.max(g);
        energy += (day.ps[k] + fcr[k]) * dt;
        fcr_drift += fcr[k] * dt;
    }
    // the whole battery is settled, FCR drift included
    let e_end = day.e_ps.last().copied().unwrap_or(ctx.spec.e0) + fcr_drift;
    DayCost {
        peak,
        value: (ctx.next_value)(peak),
        elec: ctx.c_elec * energy,
        settlement: terminal_settlement(e_end, ctx.spec, ctx.c_elec),
    }
}

/// Mean evaluated cost (without revenue) over an evaluation set.
pub fn evaluate_params(ctx: &DayContext, params: &ControllerParams, eval: &EvalSet) -> f64 {
    let total: f64 = eval
        .profiles
        .iter()
        .zip(&eval.fcr_power)
        .map(|(p, f)| evaluate_day(ctx, params, p, f).total())
        .sum();
    total / eval.len() as f64
}

/// Per-sample costs, for confidence intervals.
pub fn evaluate_samples(ctx: &DayContext, params: &ControllerParams, eval: &EvalSet) -> Vec<f64> {
    eval.profiles
        .iter()
        .zip(&eval.fcr_power)
        .map(|(p, f)| evaluate_day(ctx, params, p, f).total())
        .collect()
}

/// Default threshold grid: `n` points over `[E peak − p_max, E peak]`.
pub fn default_threshold_grid(expected_peak: f64, p_max: f64, n: usize) -> Vec<f64> {
    if n <= 1 {
        return vec![expected_peak];
    }
    let lo = expected_peak - p_max;
    (0..n).map(|i| lo + (expected_peak - lo) * i as f64 / (n - 1) as f64).collect()
}

pub const DEFAULT_Z_GRID: [f64; 5] = [0.0, 0.5, 1.0, 1.5, 2.0];

/// Exhaustive search over the parameter grid; ties keep the first point.
/// Every point is scored on the same evaluation set.
pub fn tune_gridsearch(
    ctx: &DayContext,
    thresholds: &[f64],
    z_grid: &[f64],
    eval: &EvalSet,
) -> Result<(ControllerParams, f64)> {
    if thresholds.is_empty() || z_grid.is_empty() {
        return Err(Error::Config("empty parameter grid".into()));
    }
    if eval.is_empty() {
        return Err(Error::EmptySet);
    }
    let points: Vec<ControllerParams> = thresholds
        .iter()
        .flat_map(|&p| z_grid.iter().map(move |&z| ControllerParams { p_thr_init: p, z_sigma: z }))
        .collect();
    let scores: Vec<f64> = points.iter().map(|p| evaluate_params(ctx, p, eval)).collect();
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s < scores[best] {
            best = i;
        }
    }
    Ok((points[best], scores[best]))
}
