//! Scenario generation, fast-forward reduction, interference-free
//! combination and the multiple-replication SAA gap estimator.

use std::io::{Read, Write};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::domain::{BatterySpec, TimeGrid};
use crate::error::{Error, Result};
use crate::freqmodel::{fold_average, normalize, substeps};

/// Independent RNG for `(seed, stream)`; streams never overlap.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Weighted set of equal-length trajectories.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSet {
    rows: Vec<Vec<f64>>,
    probs: Vec<f64>,
}

impl ScenarioSet {
    pub fn new(rows: Vec<Vec<f64>>, probs: Vec<f64>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptySet);
        }
        if rows.len() != probs.len() {
            return Err(Error::Config("one probability per scenario required".into()));
        }
        let n_t = rows[0].len();
        if rows.iter().any(|r| r.len() != n_t) {
            return Err(Error::Config("scenarios differ in length".into()));
        }
        if probs.iter().any(|p| *p < 0.0 || !p.is_finite()) {
            return Err(Error::Config("negative probability".into()));
        }
        let total: f64 = probs.iter().sum();
        if total <= 0.0 {
            return Err(Error::Config("probabilities sum to zero".into()));
        }
        let probs = probs.into_iter().map(|p| p / total).collect();
        Ok(Self { rows, probs })
    }

    pub fn uniform(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        Self::new(rows, vec![1.0; n])
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn n_t(&self) -> usize {
        self.rows[0].len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], f64)> {
        self.rows.iter().map(Vec::as_slice).zip(self.probs.iter().copied())
    }

    /// Probability-weighted mean trajectory.
    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.n_t()];
        for (r, p) in self.iter() {
            for (a, b) in m.iter_mut().zip(r) {
                *a += p * b;
            }
        }
        m
    }

    /// `E[max_k x_k]`
    pub fn expected_max(&self) -> f64 {
        self.iter().map(|(r, p)| p * max_of(r)).sum()
    }

    /// Largest value over all scenarios and steps.
    pub fn max_value(&self) -> f64 {
        self.rows.iter().map(|r| max_of(r)).fold(f64::NEG_INFINITY, f64::max)
    }

    /// `day_id,step,mw` rows; probabilities are taken as uniform on read.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["day_id", "step", "mw"])?;
        for (d, r) in self.rows.iter().enumerate() {
            for (k, v) in r.iter().enumerate() {
                w.write_record([d.to_string(), k.to_string(), format!("{v}")])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Writes rows together with their probabilities (`day_id,prob,step,mw`).
    pub fn write_weighted_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["day_id", "prob", "step", "mw"])?;
        for (d, (r, p)) in self.iter().enumerate() {
            for (k, v) in r.iter().enumerate() {
                w.write_record([d.to_string(), format!("{p}"), k.to_string(), format!("{v}")])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(rdr: R) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(rdr);
        let mut days: Vec<(String, Vec<(usize, f64)>)> = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            let line = i + 2;
            let parse_err = |m: &str| Error::Parse { line, msg: m.to_string() };
            let id = rec.get(0).ok_or_else(|| parse_err("missing day_id"))?.to_string();
            let step: usize = rec
                .get(1)
                .ok_or_else(|| parse_err("missing step"))?
                .parse()
                .map_err(|_| parse_err("bad step"))?;
            let mw: f64 = rec
                .get(2)
                .ok_or_else(|| parse_err("missing mw"))?
                .parse()
                .map_err(|_| parse_err("bad mw"))?;
            match days.last_mut() {
                Some((last, v)) if *last == id => v.push((step, mw)),
                _ => days.push((id, vec![(step, mw)])),
            }
        }
        let mut rows = Vec::with_capacity(days.len());
        for (id, mut v) in days {
            v.sort_by_key(|(k, _)| *k);
            if v.iter().enumerate().any(|(i, (k, _))| i != *k) {
                return Err(Error::Parse { line: 0, msg: format!("day {id} has missing or repeated steps") });
            }
            rows.push(v.into_iter().map(|(_, x)| x).collect());
        }
        Self::uniform(rows)
    }
}

pub(crate) fn max_of(x: &[f64]) -> f64 {
    x.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Synthetic grid-frequency model: Ornstein-Uhlenbeck deviation in Hz
/// around a small diurnal mean, sampled at `sample_seconds`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrequencyParams {
    pub f_nom: f64,
    pub df_max: f64,
    pub sample_seconds: f64,
    pub reversion_seconds: f64,
    pub std_hz: f64,
    pub diurnal_hz: f64,
}

impl Default for FrequencyParams {
    fn default() -> Self {
        Self {
            f_nom: 50.0,
            df_max: 0.2,
            sample_seconds: 10.0,
            reversion_seconds: 600.0,
            std_hz: 0.04,
            diurnal_hz: 0.004,
        }
    }
}

impl FrequencyParams {
    pub fn check(&self) -> Result<()> {
        if !(self.reversion_seconds > 0.0) {
            return Err(Error::Config("frequency reversion_seconds must be positive".into()));
        }
        if !(self.df_max > 0.0) || !(self.sample_seconds > 0.0) || self.std_hz < 0.0 {
            return Err(Error::Config("frequency df_max and sample_seconds must be positive, std_hz nonnegative".into()));
        }
        Ok(())
    }

    /// One day of normalised, clipped sub-step deviations.
    pub fn sample_day(&self, rng: &mut impl Rng) -> Vec<f64> {
        let n = (86_400.0 / self.sample_seconds).round() as usize;
        let a = (-self.sample_seconds / self.reversion_seconds).exp();
        let shock = self.std_hz * (1.0 - a * a).sqrt();
        let mut x: f64 = self.std_hz * rng.sample::<f64, _>(StandardNormal);
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let t = i as f64 * self.sample_seconds;
            let drift = self.diurnal_hz * (2.0 * std::f64::consts::PI * t / 86_400.0).sin();
            out.push(normalize(self.f_nom + drift + x, self.f_nom, self.df_max));
            x = a * x + shock * rng.sample::<f64, _>(StandardNormal);
        }
        out
    }
}

/// Folded per-step deviation vectors for `count` synthetic days.
pub fn gen_frequency_days(
    count: usize,
    seed: u64,
    params: &FrequencyParams,
    grid: &TimeGrid,
    spec: &BatterySpec,
) -> Result<ScenarioSet> {
    params.check()?;
    if count == 0 {
        return Err(Error::EmptySet);
    }
    let per = substeps(grid, params.sample_seconds)?;
    let rows = (0..count)
        .map(|d| {
            let pu = params.sample_day(&mut stream_rng(seed, d as u64));
            fold_average(&pu, per, grid.n_t(), spec).map(|v| v.0)
        })
        .collect::<Result<Vec<_>>>()?;
    ScenarioSet::uniform(rows)
}

/// Daily consumption shape: base load plus one Gaussian-shaped peak whose
/// centre falls inside a window (hours, may wrap past midnight).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConsumptionParams {
    pub base_mw: f64,
    pub peak_mw: f64,
    pub window_start_h: f64,
    pub window_end_h: f64,
    pub width_h: f64,
    /// Std of the peak height, MW.
    pub height_std_mw: f64,
    /// Std of the whole-day level, MW.
    pub level_std_mw: f64,
    /// Std of independent per-step noise, MW.
    pub noise_mw: f64,
    /// Whether the peak centre is drawn uniformly from the window.
    pub jitter: bool,
}

impl Default for ConsumptionParams {
    fn default() -> Self {
        Self::morning_peak()
    }
}

impl ConsumptionParams {
    pub fn morning_peak() -> Self {
        Self {
            base_mw: 0.8,
            peak_mw: 0.9,
            window_start_h: 7.0,
            window_end_h: 11.0,
            width_h: 1.0,
            height_std_mw: 0.15,
            level_std_mw: 0.05,
            noise_mw: 0.06,
            jitter: true,
        }
    }

    pub fn overnight() -> Self {
        Self {
            window_start_h: 22.0,
            window_end_h: 26.0,
            ..Self::morning_peak()
        }
    }

    pub fn without_noise(self) -> Self {
        Self {
            height_std_mw: 0.0,
            level_std_mw: 0.0,
            noise_mw: 0.0,
            jitter: false,
            ..self
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.base_mw < 0.0 {
            return Err(Error::Config("consumption base_mw must be nonnegative".into()));
        }
        if self.window_end_h < self.window_start_h || self.width_h <= 0.0 {
            return Err(Error::Config("consumption window must be ordered and width positive".into()));
        }
        Ok(())
    }

    fn bump(&self, t_h: f64, centre: f64) -> f64 {
        // circular distance on the 24 h clock
        let mut d = (t_h - centre).rem_euclid(24.0);
        if d > 12.0 {
            d -= 24.0;
        }
        (-0.5 * (d / self.width_h).powi(2)).exp()
    }

    /// Noise-free profile with the peak at the window centre.
    pub fn template(&self, grid: &TimeGrid) -> Vec<f64> {
        let centre = 0.5 * (self.window_start_h + self.window_end_h);
        (0..grid.n_t())
            .map(|k| {
                let t = (k as f64 + 0.5) * grid.dt_hours();
                (self.base_mw + self.peak_mw * self.bump(t, centre)).max(0.0)
            })
            .collect()
    }

    pub fn sample_day(&self, grid: &TimeGrid, rng: &mut impl Rng) -> Vec<f64> {
        let centre = if self.jitter {
            self.window_start_h + rng.random::<f64>() * (self.window_end_h - self.window_start_h)
        } else {
            0.5 * (self.window_start_h + self.window_end_h)
        };
        let mut n = || rng.sample::<f64, _>(StandardNormal);
        let height = (self.peak_mw + self.height_std_mw * n()).max(0.0);
        let level = self.level_std_mw * n();
        (0..grid.n_t())
            .map(|k| {
                let t = (k as f64 + 0.5) * grid.dt_hours();
                let v = self.base_mw + level + height * self.bump(t, centre) + self.noise_mw * n();
                v.max(0.0)
            })
            .collect()
    }

    /// Whether hour `t_h` lies in the peak window.
    pub fn in_window(&self, t_h: f64) -> bool {
        let t = t_h.rem_euclid(24.0);
        let s = self.window_start_h;
        let e = self.window_end_h;
        (t >= s && t <= e) || (t + 24.0 >= s && t + 24.0 <= e)
    }
}

pub fn gen_consumption_days(count: usize, seed: u64, params: &ConsumptionParams, grid: &TimeGrid) -> Result<ScenarioSet> {
    params.check()?;
    if count == 0 {
        return Err(Error::EmptySet);
    }
    let rows = (0..count)
        .map(|d| params.sample_day(grid, &mut stream_rng(seed, d as u64)))
        .collect();
    ScenarioSet::uniform(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReductionCost {
    Euclidean,
    /// `|max(ω) − max(ω')|`
    PeakAbs,
}

impl ReductionCost {
    pub fn cost(&self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            ReductionCost::Euclidean => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
            ReductionCost::PeakAbs => (max_of(a) - max_of(b)).abs(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Reduction {
    pub set: ScenarioSet,
    /// Indices of the kept scenarios in the input set, ascending.
    pub kept: Vec<usize>,
    /// Kantorovich distance between the input and the reduced set.
    pub distance: f64,
}

fn cost_matrix(set: &ScenarioSet, cost: ReductionCost) -> Vec<Vec<f64>> {
    let n = set.len();
    let row = |i: usize| -> Vec<f64> { (0..n).map(|j| cost.cost(set.row(i), set.row(j))).collect() };
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(row).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(row).collect()
    }
}

/// Greedy fast-forward selection of `target` scenarios.
pub fn fast_forward_reduce(set: &ScenarioSet, target: usize, cost: ReductionCost) -> Result<Reduction> {
    if set.is_empty() {
        return Err(Error::EmptySet);
    }
    let n = set.len();
    if target == 0 || target > n {
        return Err(Error::Config(format!("target count {target} outside 1..={n}")));
    }
    let c = cost_matrix(set, cost);
    let p = set.probs();
    let mut mind = vec![f64::INFINITY; n];
    let mut kept_flag = vec![false; n];
    let mut order = Vec::with_capacity(target);
    for _ in 0..target {
        let mut best = (f64::INFINITY, usize::MAX);
        for u in (0..n).filter(|&u| !kept_flag[u]) {
            let mut d = 0.0;
            for i in 0..n {
                if i != u && !kept_flag[i] {
                    d += p[i] * mind[i].min(c[i][u]);
                }
            }
            if d < best.0 {
                best = (d, u);
            }
        }
        let u = best.1;
        kept_flag[u] = true;
        order.push(u);
        for i in 0..n {
            mind[i] = mind[i].min(c[i][u]);
        }
    }
    let mut kept: Vec<usize> = order;
    kept.sort_unstable();
    let mut probs = vec![0.0; kept.len()];
    let mut distance = 0.0;
    for i in 0..n {
        if kept_flag[i] {
            let pos = kept.binary_search(&i).expect("kept index");
            probs[pos] += p[i];
            continue;
        }
        let mut best = (f64::INFINITY, 0);
        for (pos, &j) in kept.iter().enumerate() {
            if c[i][j] < best.0 {
                best = (c[i][j], pos);
            }
        }
        probs[best.1] += p[i];
        distance += p[i] * best.0;
    }
    let rows = kept.iter().map(|&i| set.row(i).to_vec()).collect();
    Ok(Reduction {
        set: ScenarioSet::new(rows, probs)?,
        kept,
        distance,
    })
}

/// One pair of the cross product of consumption and frequency scenarios.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CombinedIndex {
    pub v: usize,
    pub w: usize,
    /// `v·n_w + w`, zero-based.
    pub j: usize,
    pub prob: f64,
}

pub fn combine_cross(cons: &ScenarioSet, freq: &ScenarioSet) -> Vec<CombinedIndex> {
    let n_w = freq.len();
    let mut out = Vec::with_capacity(cons.len() * n_w);
    for (v, pv) in cons.probs().iter().enumerate() {
        for (w, pw) in freq.probs().iter().enumerate() {
            out.push(CombinedIndex {
                v,
                w,
                j: v * n_w + w,
                prob: pv * pw,
            });
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapEstimate {
    pub gap: f64,
    pub half_width: f64,
    pub batches: usize,
}

/// Multiple-replication estimate of the optimality gap of a candidate.
///
/// `batch(b)` must return `(optimal value of the SAA problem on batch b,
/// value of the candidate on the same batch)` for a minimisation problem.
pub fn saa_gap<F>(batch_count: usize, mut batch: F) -> Result<GapEstimate>
where
    F: FnMut(usize) -> Result<(f64, f64)>,
{
    if batch_count < 2 {
        return Err(Error::Config("saa_gap needs at least two batches".into()));
    }
    let mut gaps = Vec::with_capacity(batch_count);
    for b in 0..batch_count {
        let (opt, cand) = batch(b)?;
        gaps.push((cand - opt).max(0.0));
    }
    let n = gaps.len() as f64;
    let mean = gaps.iter().sum::<f64>() / n;
    let var = gaps.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let t = StudentsT::new(0.0, 1.0, n - 1.0)
        .map_err(|e| Error::Numerical(e.to_string()))?
        .inverse_cdf(0.975);
    Ok(GapEstimate {
        gap: mean,
        half_width: t * (var / n).sqrt(),
        batches: batch_count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn grid() -> TimeGrid {
        TimeGrid::per_day(24)
    }

    #[test]
    fn frequency_days_are_deterministic() {
        let spec = BatterySpec::symmetric(1.0, 1.0, 0.9);
        let p = FrequencyParams::default();
        let a = gen_frequency_days(2, 9, &p, &grid(), &spec).unwrap();
        let b = gen_frequency_days(2, 9, &p, &grid(), &spec).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.row(0), a.row(1));
    }

    #[test]
    fn zero_noise_frequency_is_zero() {
        let spec = BatterySpec::symmetric(1.0, 1.0, 0.9);
        let p = FrequencyParams {
            std_hz: 0.0,
            diurnal_hz: 0.0,
            ..Default::default()
        };
        let s = gen_frequency_days(3, 1, &p, &grid(), &spec).unwrap();
        assert!(s.rows().iter().flatten().all(|v| *v == 0.0));
    }

    #[test]
    fn bad_reversion_rejected() {
        let spec = BatterySpec::symmetric(1.0, 1.0, 0.9);
        let p = FrequencyParams {
            reversion_seconds: 0.0,
            ..Default::default()
        };
        assert!(matches!(gen_frequency_days(1, 1, &p, &grid(), &spec), Err(Error::Config(_))));
    }

    #[test]
    fn zero_noise_consumption_is_template() {
        let p = ConsumptionParams::morning_peak().without_noise();
        let s = gen_consumption_days(3, 4, &p, &grid()).unwrap();
        let t = p.template(&grid());
        for r in s.rows() {
            assert_eq!(r, &t);
        }
    }

    #[test]
    fn negative_base_rejected() {
        let p = ConsumptionParams {
            base_mw: -1.0,
            ..Default::default()
        };
        assert!(gen_consumption_days(1, 1, &p, &grid()).is_err());
    }

    #[test]
    fn overnight_window_wraps() {
        let p = ConsumptionParams::overnight();
        assert!(p.in_window(23.0));
        assert!(p.in_window(1.5));
        assert!(!p.in_window(12.0));
    }

    #[test]
    fn peak_cost_definition() {
        assert_eq!(ReductionCost::PeakAbs.cost(&[1.0, 5.0], &[2.0, 3.0]), 2.0);
        assert_abs_diff_eq!(ReductionCost::Euclidean.cost(&[0.0, 0.0], &[3.0, 4.0]), 5.0);
    }

    #[test]
    fn identical_pair_reduces_to_one() {
        let s = ScenarioSet::uniform(vec![vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        let r = fast_forward_reduce(&s, 1, ReductionCost::Euclidean).unwrap();
        assert_eq!(r.set.len(), 1);
        assert_eq!(r.distance, 0.0);
        assert_abs_diff_eq!(r.set.probs()[0], 1.0);
    }

    #[test]
    fn full_target_is_identity() {
        let s = ScenarioSet::new(vec![vec![0.0], vec![1.0], vec![3.0]], vec![0.2, 0.3, 0.5]).unwrap();
        let r = fast_forward_reduce(&s, 3, ReductionCost::PeakAbs).unwrap();
        assert_eq!(r.set, s);
        assert_eq!(r.distance, 0.0);
    }

    #[test]
    fn combine_products() {
        let c = ScenarioSet::new(vec![vec![0.0], vec![1.0]], vec![0.7, 0.3]).unwrap();
        let f = ScenarioSet::uniform(vec![vec![0.0], vec![1.0]]).unwrap();
        let pairs = combine_cross(&c, &f);
        let p: Vec<f64> = pairs.iter().map(|x| x.prob).collect();
        for (a, b) in p.iter().zip([0.35, 0.35, 0.15, 0.15]) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
        }
        assert_eq!(pairs.iter().map(|x| x.j).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn csv_round_trip() {
        let s = ScenarioSet::uniform(vec![vec![0.5, 1.25], vec![0.0, 2.0]]).unwrap();
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let back = ScenarioSet::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn gap_of_identical_batches_is_zero() {
        let g = saa_gap(4, |_| Ok((3.0, 3.0))).unwrap();
        assert_eq!(g.gap, 0.0);
        assert_eq!(g.half_width, 0.0);
        assert!(saa_gap(1, |_| Ok((0.0, 0.0))).is_err());
    }
}
