//! Browser bindings for three small explorations of the model: scenario
//! reduction bias, FCR envelopes against the risk level, and one day of the
//! rule-based peak-shaving controller.

use fcrpeak::control::{simulate_rule_day, ControllerParams, FcrStats};
use fcrpeak::domain::{BatterySpec, Tariffs, TimeGrid};
use fcrpeak::freqmodel::{build_uncertainty_set, CovarianceOptions};
use fcrpeak::robustfcr::{compute_envelopes, solve_fcr_only, split_virtual, RechargeDecision};
use fcrpeak::scenarios::{
    fast_forward_reduce, gen_consumption_days, gen_frequency_days, stream_rng, ConsumptionParams, FrequencyParams,
    ReductionCost, ScenarioSet,
};
use fcrpeak::socp::SolverOptions;
use wasm_bindgen::prelude::*;

const N_T: usize = 24;
const HISTORY_DAYS: usize = 300;

fn js(e: fcrpeak::Error) -> JsError {
    JsError::new(&e.to_string())
}

fn battery() -> BatterySpec {
    BatterySpec::symmetric(1.0, 1.0, 0.9f64.sqrt())
}

fn site(width_h: f64) -> Result<ConsumptionParams, JsError> {
    let p = ConsumptionParams {
        width_h,
        ..ConsumptionParams::morning_peak()
    };
    p.check().map_err(js)?;
    Ok(p)
}

/// Expected daily maximum of `days` synthetic days, then of their
/// reductions to `target` scenarios under the euclidean and the peak cost:
/// `[full, euclidean, peak]` in MW.
#[wasm_bindgen]
pub fn reduction_bias(days: usize, target: usize, width_h: f64, seed: u32) -> Result<Vec<f64>, JsError> {
    let grid = TimeGrid::per_day(N_T);
    let set = gen_consumption_days(days, seed.into(), &site(width_h)?, &grid).map_err(js)?;
    let mut out = vec![set.expected_max()];
    for cost in [ReductionCost::Euclidean, ReductionCost::PeakAbs] {
        out.push(fast_forward_reduce(&set, target, cost).map_err(js)?.set.expected_max());
    }
    Ok(out)
}

fn fcr_decision(epsilon: f64, n_rc: usize, seed: u32) -> Result<(RechargeDecision, ScenarioSet, fcrpeak::robustfcr::FcrEnvelopes), JsError> {
    let grid = TimeGrid::per_day(N_T);
    let spec = battery();
    let hist = gen_frequency_days(HISTORY_DAYS, seed.into(), &FrequencyParams::default(), &grid, &spec).map_err(js)?;
    let u = build_uncertainty_set(hist.rows(), epsilon, CovarianceOptions::default()).map_err(js)?;
    let (dec, _) = solve_fcr_only(&spec, &grid, &u, &Tariffs::default(), n_rc, &SolverOptions::default()).map_err(js)?;
    let env = compute_envelopes(&dec, &u, &grid);
    Ok((dec, hist, env))
}

/// FCR-only bid at risk level `epsilon`. Layout: `[r]` followed by the
/// per-step worst-case power range (`p_min`, `p_max`, MW) and energy range
/// relative to the initial charge (`e_min`, `e_max`, MWh), 24 values each.
#[wasm_bindgen]
pub fn fcr_envelopes(epsilon: f64, n_rc: usize, seed: u32) -> Result<Vec<f64>, JsError> {
    let (dec, _, env) = fcr_decision(epsilon, n_rc, seed)?;
    let mut out = vec![dec.capacity()];
    for v in [&env.p_min_fcr, &env.p_max_fcr, &env.e_min_fcr, &env.e_max_fcr] {
        out.extend_from_slice(v);
    }
    Ok(out)
}

/// One day of the rule-based controller next to an FCR-only bid at
/// `epsilon`. Layout: `[r]` then profile, peak-shaving power, expected grid
/// power, threshold, peak-shaving energy and its lower and upper bound, 24
/// values each.
#[wasm_bindgen]
pub fn rule_day(width_h: f64, p_thr_init: f64, z_sigma: f64, epsilon: f64, seed: u32) -> Result<Vec<f64>, JsError> {
    let grid = TimeGrid::per_day(N_T);
    let spec = battery();
    let (dec, hist, env) = fcr_decision(epsilon, 4, seed)?;
    let bounds = split_virtual(&spec, &env).map_err(js)?.viable(&spec, grid.dt_hours());
    let stats = FcrStats::from_scenarios(&dec, &hist);
    let profile = site(width_h)?.sample_day(&grid, &mut stream_rng(seed.into(), 1));
    let params = ControllerParams { p_thr_init, z_sigma };
    let day = simulate_rule_day(&profile, &stats, &bounds, &params, &spec, &grid);
    let expected: Vec<f64> = (0..N_T).map(|k| profile[k] + day.ps[k] + stats.mean[k]).collect();
    let mut out = vec![dec.capacity()];
    for v in [&profile, &day.ps, &expected, &day.thresholds, &day.e_ps, &bounds.e_min_ps, &bounds.e_max_ps] {
        out.extend_from_slice(v);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layouts() {
        assert_eq!(reduction_bias(200, 10, 1.5, 1).unwrap().len(), 3);
        assert_eq!(fcr_envelopes(0.05, 4, 1).unwrap().len(), 1 + 4 * N_T);
        assert_eq!(rule_day(1.5, 1.2, 0.5, 0.05, 1).unwrap().len(), 1 + 7 * N_T);
    }

    #[test]
    fn lower_risk_bids_less() {
        let loose = fcr_envelopes(0.2, 4, 3).unwrap()[0];
        let strict = fcr_envelopes(0.01, 4, 3).unwrap()[0];
        assert!(strict <= loose + 1e-9);
    }
}
