use std::fs::File;
use std::io::BufReader;

use fcrpeak::domain::{BatterySpec, Tariffs, TimeGrid};
use fcrpeak::dp::{MonthModel, PoolSource, TuningGrid};
use fcrpeak::freqmodel::{build_uncertainty_set, fold_average, substeps, CovarianceOptions, FrequencyTrace, UncertaintySet};
use fcrpeak::scenarios::{
    fast_forward_reduce, gen_consumption_days, gen_frequency_days, ConsumptionParams, ReductionCost, ScenarioSet,
};
use fcrpeak::sim::MonthSetup;
use fcrpeak::socp::SolverOptions;

use crate::{CliError, RunConfig};

const FREQ_STREAM: u64 = 1;
const CONS_STREAM: u64 = 100;

/// Scenario sets and uncertainty set derived from a config.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub grid: TimeGrid,
    pub specs: Vec<BatterySpec>,
    pub tariffs: Tariffs,
    pub n_rc: usize,
    pub solver: SolverOptions,
    pub frequency_full: ScenarioSet,
    pub frequency: ScenarioSet,
    pub consumption_full: Vec<ScenarioSet>,
    pub consumption: Vec<ScenarioSet>,
    pub uncertainty: UncertaintySet,
}

fn seed_of(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x2545_f491_4f6c_dd1d).wrapping_add(stream)
}

pub fn reduce(set: &ScenarioSet, target: usize, cost: ReductionCost, what: &str) -> Result<ScenarioSet, CliError> {
    if target > set.len() {
        return Err(CliError::Config(format!(
            "{what}: target count {target} exceeds the {} available scenarios",
            set.len()
        )));
    }
    Ok(fast_forward_reduce(set, target, cost)?.set)
}

/// Full (unreduced) consumption set of one site.
pub fn consumption_set(cfg: &RunConfig, site: usize, seed: u64) -> Result<ScenarioSet, CliError> {
    let s = &cfg.sites[site];
    let grid = cfg.time_grid();
    let set = match (&s.consumption_csv, &s.consumption) {
        (Some(path), _) => ScenarioSet::read_csv(BufReader::new(File::open(path)?))?,
        (None, Some(params)) => gen_consumption_days(cfg.scenarios.n_generate, seed_of(seed, CONS_STREAM + site as u64), params, &grid)?,
        (None, None) => return Err(CliError::Config(format!("sites[{site}].consumption: no data source"))),
    };
    if set.n_t() != grid.n_t() {
        return Err(CliError::Config(format!(
            "sites[{site}].consumption_csv: days have {} steps, grid.n_t is {}",
            set.n_t(),
            grid.n_t()
        )));
    }
    Ok(set)
}

/// Full folded frequency set, from the recorded trace or the generator.
pub fn frequency_set(cfg: &RunConfig, seed: u64) -> Result<ScenarioSet, CliError> {
    let grid = cfg.time_grid();
    let fold = &cfg.sites[0].battery;
    let fp = &cfg.frequency.params;
    match &cfg.frequency.trace_csv {
        Some(path) => {
            let trace = FrequencyTrace::from_csv(BufReader::new(File::open(path)?), fp.f_nom, fp.df_max)?;
            let per = substeps(&grid, trace.sample_seconds)?;
            let day = per * grid.n_t();
            let pu = trace.normalized();
            let rows = pu
                .chunks_exact(day)
                .map(|c| fold_average(c, per, grid.n_t(), fold).map(|v| v.0))
                .collect::<Result<Vec<_>, _>>()?;
            if rows.is_empty() {
                return Err(fcrpeak::Error::IncompleteTrace { got: pu.len(), need: day }.into());
            }
            Ok(ScenarioSet::uniform(rows)?)
        }
        None => Ok(gen_frequency_days(cfg.scenarios.n_generate, seed_of(seed, FREQ_STREAM), fp, &grid, fold)?),
    }
}

pub fn prepare(cfg: &RunConfig, seed: u64) -> Result<Prepared, CliError> {
    let frequency_full = frequency_set(cfg, seed)?;
    let uncertainty = build_uncertainty_set(frequency_full.rows(), cfg.fcr.epsilon, CovarianceOptions::default())?;
    let frequency = reduce(&frequency_full, cfg.scenarios.n_wr.min(frequency_full.len()), ReductionCost::Euclidean, "scenarios.n_wr")?;
    let mut consumption_full = Vec::with_capacity(cfg.sites.len());
    let mut consumption = Vec::with_capacity(cfg.sites.len());
    for i in 0..cfg.sites.len() {
        let full = consumption_set(cfg, i, seed)?;
        consumption.push(reduce(&full, cfg.scenarios.n_vr, cfg.scenarios.consumption_cost, "scenarios.n_vr")?);
        consumption_full.push(full);
    }
    Ok(Prepared {
        grid: cfg.time_grid(),
        specs: cfg.specs(),
        tariffs: cfg.tariffs,
        n_rc: cfg.fcr.n_rc,
        solver: cfg.solver,
        frequency_full,
        frequency,
        consumption_full,
        consumption,
        uncertainty,
    })
}

impl Prepared {
    pub fn model(&self) -> MonthModel<'_> {
        MonthModel {
            specs: &self.specs,
            grid: &self.grid,
            tariffs: &self.tariffs,
            n_rc: self.n_rc,
            uncertainty: &self.uncertainty,
            frequency: &self.frequency,
            consumption: &self.consumption,
            solver: self.solver,
        }
    }
}

/// Generator parameters of every site; the closed loop samples fresh days.
pub fn generators(cfg: &RunConfig, command: &str) -> Result<Vec<ConsumptionParams>, CliError> {
    cfg.sites
        .iter()
        .enumerate()
        .map(|(i, s)| {
            s.consumption
                .ok_or_else(|| CliError::Config(format!("sites[{i}].consumption: `{command}` needs generator parameters")))
        })
        .collect()
}

pub fn pool_source<'a>(cfg: &'a RunConfig, gens: &'a [ConsumptionParams]) -> PoolSource<'a> {
    PoolSource {
        consumption: gens,
        frequency: &cfg.frequency.params,
    }
}

pub fn month_setup<'a>(cfg: &'a RunConfig, prep: &'a Prepared, gens: &'a [ConsumptionParams]) -> MonthSetup<'a> {
    MonthSetup {
        model: prep.model(),
        consumption: gens,
        frequency: &cfg.frequency.params,
        n_days: cfg.dp.n_days,
        n_eval: cfg.dp.n_eval,
        tuning: TuningGrid::default(),
    }
}
