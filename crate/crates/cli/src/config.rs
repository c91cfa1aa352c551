use std::path::{Path, PathBuf};

use fcrpeak::domain::{self, BatterySpec, Tariffs, TimeGrid};
use fcrpeak::dp::MultiDesign;
use fcrpeak::scenarios::{ConsumptionParams, FrequencyParams, ReductionCost};
use fcrpeak::socp::SolverOptions;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one")]
    pub workers: usize,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    pub grid: GridConfig,
    #[serde(default)]
    pub tariffs: Tariffs,
    pub sites: Vec<SiteConfig>,
    #[serde(default)]
    pub frequency: FrequencyConfig,
    pub scenarios: ScenarioConfig,
    pub fcr: FcrConfig,
    pub dp: DpSection,
    #[serde(default)]
    pub solver: SolverOptions,
    #[serde(default)]
    pub month: MonthConfig,
}

fn one() -> usize {
    1
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub n_t: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteConfig {
    pub name: String,
    pub battery: BatterySpec,
    /// Generator of synthetic consumption days.
    pub consumption: Option<ConsumptionParams>,
    /// Recorded days as `day_id,step,mw`; used instead of the generator for
    /// the scenario sets when present.
    pub consumption_csv: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct FrequencyConfig {
    #[serde(default)]
    pub params: FrequencyParams,
    /// Recorded frequency as `timestamp,hz`, cut into whole days.
    pub trace_csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Days generated before reduction.
    pub n_generate: usize,
    pub n_vr: usize,
    pub n_wr: usize,
    pub consumption_cost: ReductionCost,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FcrConfig {
    pub epsilon: f64,
    pub n_rc: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpSection {
    pub n_days: usize,
    pub grid_points: usize,
    pub n_segments: usize,
    pub n_eval: usize,
    #[serde(default)]
    pub design: MultiDesign,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonthConfig {
    /// Seeded months simulated by `run-month`.
    pub months: usize,
}

impl Default for MonthConfig {
    fn default() -> Self {
        Self { months: 1 }
    }
}

fn bad(field: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{field}: {msg}"))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Makes data paths relative to the config file's directory.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(q) = p {
                if q.is_relative() {
                    *q = base.join(&*q);
                }
            }
        };
        for s in &mut self.sites {
            fix(&mut s.consumption_csv);
        }
        fix(&mut self.frequency.trace_csv);
    }

    pub fn time_grid(&self) -> TimeGrid {
        TimeGrid::per_day(self.grid.n_t)
    }

    pub fn specs(&self) -> Vec<BatterySpec> {
        self.sites.iter().map(|s| s.battery).collect()
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.grid.n_t == 0 {
            return Err(bad("grid.n_t", "must be positive"));
        }
        if self.workers == 0 {
            return Err(bad("workers", "must be positive"));
        }
        if self.sites.is_empty() {
            return Err(bad("sites", "at least one site is required"));
        }
        let grid = self.time_grid();
        for (i, s) in self.sites.iter().enumerate() {
            if let Err(v) = domain::validate(&s.battery, &grid) {
                let first = &v[0];
                return Err(bad(&format!("sites[{i}].battery.{}", first.field), &first.message));
            }
            match (&s.consumption, &s.consumption_csv) {
                (None, None) => return Err(bad(&format!("sites[{i}].consumption"), "needs generator parameters or consumption_csv")),
                (Some(c), _) => c.check().map_err(|e| bad(&format!("sites[{i}].consumption"), e))?,
                _ => {}
            }
            if let Some(p) = &s.consumption_csv {
                if !p.exists() {
                    return Err(bad(&format!("sites[{i}].consumption_csv"), format!("{} does not exist", p.display())));
                }
            }
        }
        let eta = (self.sites[0].battery.eta_c, self.sites[0].battery.eta_d);
        if self.sites.iter().any(|s| (s.battery.eta_c, s.battery.eta_d) != eta) {
            return Err(bad("sites.battery.eta_c", "all sites must share the efficiencies (one folded frequency set)"));
        }
        self.frequency.params.check().map_err(|e| bad("frequency.params", e))?;
        if let Some(p) = &self.frequency.trace_csv {
            if !p.exists() {
                return Err(bad("frequency.trace_csv", format!("{} does not exist", p.display())));
            }
        }
        let sc = &self.scenarios;
        for (name, v) in [("scenarios.n_generate", sc.n_generate), ("scenarios.n_vr", sc.n_vr), ("scenarios.n_wr", sc.n_wr)] {
            if v == 0 {
                return Err(bad(name, "must be positive"));
            }
        }
        if sc.n_vr > sc.n_generate {
            return Err(bad("scenarios.n_vr", format!("{} exceeds n_generate {}", sc.n_vr, sc.n_generate)));
        }
        if sc.n_wr > sc.n_generate {
            return Err(bad("scenarios.n_wr", format!("{} exceeds n_generate {}", sc.n_wr, sc.n_generate)));
        }
        if !(self.fcr.epsilon > 0.0 && self.fcr.epsilon <= 0.5) {
            return Err(bad("fcr.epsilon", "must lie in (0, 0.5]"));
        }
        if self.fcr.n_rc == 0 || self.fcr.n_rc > self.grid.n_t {
            return Err(bad("fcr.n_rc", format!("must lie in 1..={}", self.grid.n_t)));
        }
        let dp = &self.dp;
        if dp.n_days == 0 {
            return Err(bad("dp.n_days", "must be positive"));
        }
        if dp.grid_points < 3 {
            return Err(bad("dp.grid_points", "needs at least 3 points"));
        }
        if dp.n_segments == 0 || dp.n_segments >= dp.grid_points {
            return Err(bad("dp.n_segments", "must lie in 1..grid_points"));
        }
        if dp.n_eval == 0 {
            return Err(bad("dp.n_eval", "must be positive"));
        }
        if self.month.months == 0 {
            return Err(bad("month.months", "must be positive"));
        }
        Ok(())
    }
}
