//! Physical and market data shared across the crate.
//!
//! Units: energies in MWh, powers in MW, prices in EUR. The step length is
//! converted to hours once when a [`TimeGrid`] is built.

use serde::{Deserialize, Serialize};

pub const SECONDS_PER_DAY: f64 = 86_400.0;

/// Uniform discretisation of one day.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    dt_seconds: f64,
    n_t: usize,
    dt_hours: f64,
}

impl TimeGrid {
    /// Grid with an explicit step length. Not checked; see [`validate`].
    pub fn new(dt_seconds: f64, n_t: usize) -> Self {
        Self {
            dt_seconds,
            n_t,
            dt_hours: dt_seconds / 3600.0,
        }
    }

    /// Grid of `n_t` equal steps covering exactly one day.
    pub fn per_day(n_t: usize) -> Self {
        Self::new(SECONDS_PER_DAY / n_t as f64, n_t)
    }

    pub fn dt_seconds(&self) -> f64 {
        self.dt_seconds
    }

    pub fn dt_hours(&self) -> f64 {
        self.dt_hours
    }

    pub fn n_t(&self) -> usize {
        self.n_t
    }

    /// Hours covered by the grid (24 for a valid grid).
    pub fn horizon_hours(&self) -> f64 {
        self.dt_hours * self.n_t as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatterySpec {
    pub e_min: f64,
    pub e_max: f64,
    pub p_min: f64,
    pub p_max: f64,
    pub eta_c: f64,
    pub eta_d: f64,
    pub e0: f64,
}

impl BatterySpec {
    /// Symmetric battery with `energy` MWh and `power` MW, starting half full.
    pub fn symmetric(energy: f64, power: f64, eta: f64) -> Self {
        Self {
            e_min: 0.0,
            e_max: energy,
            p_min: -power,
            p_max: power,
            eta_c: eta,
            eta_d: eta,
            e0: 0.5 * energy,
        }
    }

    pub fn with_e0(mut self, e0: f64) -> Self {
        self.e0 = e0;
        self
    }

    pub fn with_efficiency(mut self, eta_c: f64, eta_d: f64) -> Self {
        self.eta_c = eta_c;
        self.eta_d = eta_d;
        self
    }

    /// Largest symmetric FCR capacity the converter allows.
    pub fn max_symmetric_power(&self) -> f64 {
        self.p_max.min(-self.p_min).max(0.0)
    }

    pub fn clamp_energy(&self, e: f64) -> f64 {
        e.clamp(self.e_min, self.e_max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tariffs {
    /// EUR per MW of FCR capacity per hour.
    pub c_fcr: f64,
    /// EUR per MW of monthly peak.
    pub c_peak: f64,
    /// EUR per MWh.
    pub c_elec: f64,
}

impl Default for Tariffs {
    fn default() -> Self {
        Self {
            c_fcr: 12.0,
            c_peak: 13_000.0,
            c_elec: 45.0,
        }
    }
}

impl Tariffs {
    /// FCR revenue for holding `r` MW over one day of the given grid.
    pub fn daily_fcr_revenue(&self, r: f64, grid: &TimeGrid) -> f64 {
        self.c_fcr * r * grid.horizon_hours()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BillingPeriod {
    pub n_days: usize,
}

impl Default for BillingPeriod {
    fn default() -> Self {
        Self { n_days: 30 }
    }
}

/// State carried from one day to the next during a month.
#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    pub e_bat: Vec<f64>,
    pub p_peak_so_far: Vec<f64>,
    pub day_index: usize,
}

impl SimState {
    pub fn start(specs: &[BatterySpec]) -> Self {
        Self {
            e_bat: specs.iter().map(|s| s.e0).collect(),
            p_peak_so_far: vec![0.0; specs.len()],
            day_index: 0,
        }
    }

    /// Raise the observed peaks; peaks never decrease within a month.
    pub fn observe_peaks(&mut self, peaks: &[f64]) {
        for (p, &q) in self.p_peak_so_far.iter_mut().zip(peaks) {
            *p = p.max(q);
        }
    }
}

/// Battery energy after applying `p_bat` for one step. Does not clamp.
pub fn energy_update(e: f64, p_bat: f64, grid: &TimeGrid, spec: &BatterySpec) -> f64 {
    energy_update_hours(e, p_bat, grid.dt_hours(), spec)
}

/// Same as [`energy_update`] for an arbitrary duration in hours.
pub fn energy_update_hours(e: f64, p_bat: f64, hours: f64, spec: &BatterySpec) -> f64 {
    e + stored_rate(p_bat, spec) * hours
}

/// Rate of change of stored energy (MW) caused by terminal power `p`.
#[inline]
pub fn stored_rate(p: f64, spec: &BatterySpec) -> f64 {
    if p >= 0.0 {
        spec.eta_c * p
    } else {
        p / spec.eta_d
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub field: &'static str,
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

/// Check every invariant of a battery and grid, returning all violations.
pub fn validate(spec: &BatterySpec, grid: &TimeGrid) -> Result<(), Vec<Violation>> {
    let mut out = Vec::new();
    let mut push = |field, message: &str| {
        out.push(Violation {
            field,
            message: message.to_string(),
        })
    };
    let finite = [
        spec.e_min, spec.e_max, spec.p_min, spec.p_max, spec.eta_c, spec.eta_d, spec.e0,
    ]
    .iter()
    .all(|v| v.is_finite());
    if !finite {
        push("battery", "non-finite value");
    }
    if !(spec.e_min < spec.e_max) {
        push("e_max", "e_min must be below e_max");
    }
    if !(spec.e0 >= spec.e_min && spec.e0 <= spec.e_max) {
        push("e0", "e0 out of range");
    }
    if !(spec.p_min < 0.0) {
        push("p_min", "p_min must be negative");
    }
    if !(spec.p_max > 0.0) {
        push("p_max", "p_max must be positive");
    }
    if !(spec.eta_c > 0.0 && spec.eta_c <= 1.0) {
        push("eta_c", "efficiency must lie in (0, 1]");
    }
    if !(spec.eta_d > 0.0 && spec.eta_d <= 1.0) {
        push("eta_d", "efficiency must lie in (0, 1]");
    }
    if spec.eta_c * spec.eta_d > 1.0 {
        push("eta_c", "round-trip efficiency above one");
    }
    if grid.n_t() == 0 {
        push("n_t", "grid needs at least one step");
    }
    if !(grid.dt_seconds() > 0.0) {
        push("dt_seconds", "step length must be positive");
    }
    if (grid.dt_seconds() * grid.n_t() as f64 - SECONDS_PER_DAY).abs() > 1e-6 {
        push("n_t", "grid does not tile one day");
    }
    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn quarter_hour() -> TimeGrid {
        TimeGrid::new(900.0, 96)
    }

    #[test]
    fn charge_step() {
        let spec = BatterySpec::symmetric(1.0, 1.0, 0.9487);
        let e = energy_update(0.5, 0.1, &quarter_hour(), &spec);
        assert_abs_diff_eq!(e, 0.523_717_5, epsilon = 1e-9);
    }

    #[test]
    fn discharge_step() {
        let spec = BatterySpec::symmetric(1.0, 1.0, 0.9487);
        let e = energy_update(0.5, -0.1, &quarter_hour(), &spec);
        assert_abs_diff_eq!(e, 0.5 - 0.025 / 0.9487, epsilon = 1e-12);
        assert_abs_diff_eq!(e, 0.473_648, epsilon = 1e-6);
    }

    #[test]
    fn idle_step() {
        let spec = BatterySpec::symmetric(1.0, 1.0, 0.9487);
        assert_eq!(energy_update(0.5, 0.0, &quarter_hour(), &spec), 0.5);
    }

    #[test]
    fn round_trip_loses_ten_percent() {
        let eta = 0.9_f64.sqrt();
        let spec = BatterySpec::symmetric(10.0, 10.0, eta);
        let grid = quarter_hour();
        // charge 1 MW for one step, then discharge what was stored
        let e1 = energy_update(5.0, 1.0, &grid, &spec);
        let stored = e1 - 5.0;
        let p_out = stored * eta / grid.dt_hours();
        let e2 = energy_update(e1, -p_out, &grid, &spec);
        assert_abs_diff_eq!(e2, 5.0, epsilon = 1e-12);
        let delivered = p_out * grid.dt_hours();
        let drawn = grid.dt_hours();
        assert!(((delivered / drawn) - 0.9).abs() < 1e-12);
    }

    #[test]
    fn case_study_battery_is_valid() {
        let spec = BatterySpec::symmetric(1.0, 1.0, 0.9487);
        assert!(validate(&spec, &TimeGrid::new(900.0, 96)).is_ok());
    }

    #[test]
    fn e0_out_of_range() {
        let spec = BatterySpec::symmetric(1.0, 1.0, 0.9487).with_e0(1.5);
        let errs = validate(&spec, &quarter_hour()).unwrap_err();
        assert!(errs.iter().any(|v| v.field == "e0" && v.message == "e0 out of range"));
    }

    #[test]
    fn grid_must_tile_day() {
        let spec = BatterySpec::symmetric(1.0, 1.0, 0.9487);
        let errs = validate(&spec, &TimeGrid::new(900.0, 95)).unwrap_err();
        assert_eq!(errs.len(), 1);
        assert_eq!(errs[0].message, "grid does not tile one day");
    }

    #[test]
    fn peaks_are_monotone() {
        let mut s = SimState::start(&[BatterySpec::symmetric(1.0, 1.0, 1.0); 2]);
        s.observe_peaks(&[0.8, 0.4]);
        s.observe_peaks(&[0.6, 0.9]);
        assert_eq!(s.p_peak_so_far, vec![0.8, 0.9]);
    }

    proptest::proptest! {
        #[test]
        fn update_monotone_in_power(e in 0.0f64..1.0, p in -1.0f64..1.0, dp in 0.0f64..0.5) {
            let spec = BatterySpec::symmetric(1.0, 1.0, 0.9);
            let g = quarter_hour();
            proptest::prop_assert!(energy_update(e, p + dp, &g, &spec) >= energy_update(e, p, &g, &spec));
        }
    }
}
