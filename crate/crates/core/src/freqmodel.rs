//! Frequency traces, efficiency folding and the asymmetric uncertainty set
//! of the per-step deviation vector.

use std::io::Read;

use nalgebra::{DMatrix, DVector};

use crate::domain::{BatterySpec, TimeGrid};
use crate::error::{Error, Result};

/// Minimum number of sample days for deviation estimates.
pub const MIN_SAMPLES: usize = 30;

/// Raw grid frequency in Hz at a fixed sub-step resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyTrace {
    pub samples: Vec<f64>,
    pub sample_seconds: f64,
    pub f_nom: f64,
    pub df_max: f64,
}

impl FrequencyTrace {
    /// Normalised deviation `(f − f_nom)/Δf_max`, clipped to `[−1, 1]`.
    pub fn normalized(&self) -> Vec<f64> {
        self.samples
            .iter()
            .map(|f| normalize(*f, self.f_nom, self.df_max))
            .collect()
    }

    /// Parses `timestamp,hz` rows (header required, timestamps in seconds,
    /// strictly increasing and evenly spaced).
    pub fn from_csv<R: Read>(rdr: R, f_nom: f64, df_max: f64) -> Result<Self> {
        if df_max <= 0.0 {
            return Err(Error::Config("df_max must be positive".into()));
        }
        let mut r = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(rdr);
        let mut times = Vec::new();
        let mut samples = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            let line = i + 2;
            let field = |k: usize| -> Result<f64> {
                rec.get(k)
                    .ok_or_else(|| Error::Parse { line, msg: "expected timestamp,hz".into() })?
                    .parse::<f64>()
                    .map_err(|e| Error::Parse { line, msg: e.to_string() })
            };
            let t = field(0)?;
            if let Some(&prev) = times.last() {
                if t <= prev {
                    return Err(Error::Parse { line, msg: "timestamps must be strictly increasing".into() });
                }
            }
            times.push(t);
            samples.push(field(1)?);
        }
        if times.len() < 2 {
            return Err(Error::IncompleteTrace { got: times.len(), need: 2 });
        }
        let period = times[1] - times[0];
        for (i, w) in times.windows(2).enumerate() {
            if ((w[1] - w[0]) - period).abs() > 1e-6 * period {
                return Err(Error::Parse { line: i + 3, msg: "uneven sample spacing".into() });
            }
        }
        Ok(Self {
            samples,
            sample_seconds: period,
            f_nom,
            df_max,
        })
    }
}

pub fn normalize(f: f64, f_nom: f64, df_max: f64) -> f64 {
    ((f - f_nom) / df_max).clamp(-1.0, 1.0)
}

/// `η_c[x]⁺ − (1/η_d)[−x]⁺`
#[inline]
pub fn fold(x: f64, spec: &BatterySpec) -> f64 {
    if x >= 0.0 {
        spec.eta_c * x
    } else {
        x / spec.eta_d
    }
}

/// Per-step, efficiency-folded deviation (per unit).
#[derive(Debug, Clone, PartialEq)]
pub struct DeviationVector(pub Vec<f64>);

/// Number of sub-samples per grid step, if the sample period divides it.
pub fn substeps(grid: &TimeGrid, sample_seconds: f64) -> Result<usize> {
    let ratio = grid.dt_seconds() / sample_seconds;
    let per = ratio.round();
    if per < 1.0 || (ratio - per).abs() > 1e-9 * ratio {
        return Err(Error::Config(format!(
            "sample period {sample_seconds} s does not divide the step of {} s",
            grid.dt_seconds()
        )));
    }
    Ok(per as usize)
}

/// Folds and averages normalised sub-step deviations onto the grid.
pub fn fold_average(pu: &[f64], per_step: usize, n_t: usize, spec: &BatterySpec) -> Result<DeviationVector> {
    let need = per_step * n_t;
    if pu.len() < need {
        return Err(Error::IncompleteTrace { got: pu.len(), need });
    }
    let v = pu[..need]
        .chunks(per_step)
        .map(|c| c.iter().map(|x| fold(*x, spec)).sum::<f64>() / per_step as f64)
        .collect();
    Ok(DeviationVector(v))
}

pub fn discretize_with_efficiency(trace: &FrequencyTrace, grid: &TimeGrid, spec: &BatterySpec) -> Result<DeviationVector> {
    let per = substeps(grid, trace.sample_seconds)?;
    fold_average(&trace.normalized(), per, grid.n_t(), spec)
}

fn theta_grid() -> impl Iterator<Item = f64> {
    const N: usize = 64;
    (0..N).map(|i| 10f64.powf(-3.0 + 6.0 * i as f64 / (N - 1) as f64))
}

/// `ln E[exp(θx)]` over an empirical sample.
fn log_mgf(x: &[f64], theta: f64) -> f64 {
    let n = x.len() as f64;
    let top = x.iter().fold(f64::NEG_INFINITY, |m, v| m.max(theta * v));
    if top < 1.0 && x.iter().all(|v| theta * v > -1.0) {
        let m1 = x.iter().map(|v| (theta * v).exp_m1()).sum::<f64>() / n;
        return m1.ln_1p();
    }
    let s: f64 = x.iter().map(|v| (theta * v - top).exp()).sum();
    top + s.ln() - n.ln()
}

/// Forward deviation of a centred sample; the backward one is obtained by
/// negating the sample.
fn forward_deviation(centred: &[f64]) -> f64 {
    // θ → 0 limit is the standard deviation
    let var = centred.iter().map(|v| v * v).sum::<f64>() / centred.len() as f64;
    let mut best = var;
    for theta in theta_grid() {
        let v = 2.0 * log_mgf(centred, theta) / (theta * theta);
        if v > best {
            best = v;
        }
    }
    best.max(0.0).sqrt()
}

/// Per-step forward and backward deviations of a set of sample vectors.
pub fn estimate_deviations(samples: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
    if samples.len() < MIN_SAMPLES {
        return Err(Error::TooFewSamples { got: samples.len(), need: MIN_SAMPLES });
    }
    let n_t = samples[0].len();
    let n = samples.len() as f64;
    let mut sf = Vec::with_capacity(n_t);
    let mut sb = Vec::with_capacity(n_t);
    let mut col = vec![0.0; samples.len()];
    for k in 0..n_t {
        for (c, s) in col.iter_mut().zip(samples) {
            *c = s[k];
        }
        let mean = col.iter().sum::<f64>() / n;
        col.iter_mut().for_each(|c| *c -= mean);
        if col.iter().all(|c| c.abs() <= 1e-15 * (1.0 + mean.abs())) {
            sf.push(0.0);
            sb.push(0.0);
            continue;
        }
        sf.push(forward_deviation(&col));
        col.iter_mut().for_each(|c| *c = -*c);
        sb.push(forward_deviation(&col));
    }
    Ok((sf, sb))
}

/// Safety coefficient `sqrt(−2 ln ε)`.
pub fn safety_coefficient(epsilon: f64) -> f64 {
    (-2.0 * epsilon.ln()).max(0.0).sqrt()
}

/// Mean, deviations and covariance factor of the deviation vector.
///
/// `chol` is the lower Cholesky factor `C` of the covariance, so that the
/// whitening matrix is `W = C⁻¹` with `WᵀW = Σ⁻¹`. Robust constraints are
/// written in the whitened coordinates `ξ = W(Δf − mean)`, whose forward and
/// backward deviations are `phi_f` and `phi_b`.
#[derive(Debug, Clone)]
pub struct UncertaintySet {
    pub mean: Vec<f64>,
    pub sigma_f: Vec<f64>,
    pub sigma_b: Vec<f64>,
    pub cov: DMatrix<f64>,
    pub chol: DMatrix<f64>,
    pub phi_f: Vec<f64>,
    pub phi_b: Vec<f64>,
    pub epsilon: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct CovarianceOptions {
    /// Add `λI` with `λ = rel · trace(Σ)/n_t`.
    pub regularize: bool,
    pub rel: f64,
}

impl Default for CovarianceOptions {
    fn default() -> Self {
        Self { regularize: true, rel: 1e-8 }
    }
}

impl UncertaintySet {
    /// A set with no randomness: every draw equals `mean`.
    pub fn deterministic(mean: Vec<f64>, epsilon: f64) -> Self {
        let n = mean.len();
        Self {
            sigma_f: vec![0.0; n],
            sigma_b: vec![0.0; n],
            cov: DMatrix::zeros(n, n),
            chol: DMatrix::zeros(n, n),
            phi_f: vec![0.0; n],
            phi_b: vec![0.0; n],
            mean,
            epsilon,
        }
    }

    /// Gaussian set with the given covariance (whitened deviations are 1).
    pub fn gaussian(mean: Vec<f64>, cov: DMatrix<f64>, epsilon: f64) -> Result<Self> {
        let n = mean.len();
        let chol = cov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Numerical("covariance is not positive definite".into()))?
            .l();
        let sd: Vec<f64> = (0..n).map(|k| cov[(k, k)].sqrt()).collect();
        Ok(Self {
            sigma_f: sd.clone(),
            sigma_b: sd,
            cov,
            chol,
            phi_f: vec![1.0; n],
            phi_b: vec![1.0; n],
            mean,
            epsilon,
        })
    }

    pub fn n_t(&self) -> usize {
        self.mean.len()
    }

    pub fn kappa(&self) -> f64 {
        safety_coefficient(self.epsilon)
    }

    /// Whitening matrix `W` with `WᵀW = Σ⁻¹`.
    pub fn w_factor(&self) -> Option<DMatrix<f64>> {
        self.chol.clone().try_inverse()
    }

    /// `W⁻ᵀ a`, the coefficients of `a·Δf` on the whitened deviation.
    pub fn whiten_coeffs(&self, a: &[f64]) -> Vec<f64> {
        let v = self.chol.transpose() * DVector::from_column_slice(a);
        v.iter().copied().collect()
    }

    /// Largest value of `a·Δf` over the set.
    pub fn sup(&self, a: &[f64]) -> f64 {
        let y = self.whiten_coeffs(a);
        let u2: f64 = y
            .iter()
            .enumerate()
            .map(|(k, yk)| {
                let u = (self.phi_f[k] * yk).max(-self.phi_b[k] * yk).max(0.0);
                u * u
            })
            .sum();
        dot(a, &self.mean) + self.kappa() * u2.sqrt()
    }

    /// Smallest value of `a·Δf` over the set.
    pub fn inf(&self, a: &[f64]) -> f64 {
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        -self.sup(&neg)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Sample covariance (population normalisation) and mean.
pub fn mean_and_covariance(samples: &[Vec<f64>]) -> (Vec<f64>, DMatrix<f64>) {
    let n_t = samples.first().map_or(0, Vec::len);
    let n = samples.len() as f64;
    let mut mean = vec![0.0; n_t];
    for s in samples {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v / n;
        }
    }
    let mut x = DMatrix::zeros(samples.len(), n_t);
    for (i, s) in samples.iter().enumerate() {
        for k in 0..n_t {
            x[(i, k)] = s[k] - mean[k];
        }
    }
    let cov = (x.transpose() * &x) / n;
    (mean, cov)
}

pub fn build_uncertainty_set(samples: &[Vec<f64>], epsilon: f64, opts: CovarianceOptions) -> Result<UncertaintySet> {
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(Error::Config(format!("epsilon {epsilon} outside (0, 1]")));
    }
    if samples.is_empty() {
        return Err(Error::EmptySet);
    }
    let n_t = samples[0].len();
    if samples.iter().any(|s| s.len() != n_t) {
        return Err(Error::Config("sample vectors differ in length".into()));
    }
    if samples.len() < n_t && !opts.regularize {
        return Err(Error::RankDeficient { samples: samples.len(), steps: n_t });
    }
    let (sigma_f, sigma_b) = estimate_deviations(samples)?;
    let (mean, mut cov) = mean_and_covariance(samples);
    if opts.regularize {
        let lambda = (opts.rel * cov.trace() / n_t as f64).max(1e-14);
        for k in 0..n_t {
            cov[(k, k)] += lambda;
        }
    }
    let chol = cov
        .clone()
        .cholesky()
        .ok_or(Error::RankDeficient { samples: samples.len(), steps: n_t })?
        .l();
    let white: Vec<Vec<f64>> = samples
        .iter()
        .map(|s| {
            let d = DVector::from_iterator(n_t, s.iter().zip(&mean).map(|(x, m)| x - m));
            let xi = chol.solve_lower_triangular(&d).unwrap_or(d);
            xi.iter().copied().collect()
        })
        .collect();
    let (phi_f, phi_b) = estimate_deviations(&white)?;
    Ok(UncertaintySet {
        mean,
        sigma_f,
        sigma_b,
        cov,
        chol,
        phi_f,
        phi_b,
        epsilon,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Exp, Normal};

    fn spec(eta: f64) -> BatterySpec {
        BatterySpec::symmetric(1.0, 1.0, eta)
    }

    #[test]
    fn fold_constant_positive() {
        let s = spec(1.0).with_efficiency(0.9, 0.9);
        let v = fold_average(&[0.5; 4], 4, 1, &s).unwrap();
        assert_abs_diff_eq!(v.0[0], 0.45, epsilon = 1e-15);
    }

    #[test]
    fn fold_symmetric_halves_cancel() {
        let v = fold_average(&[1.0, 1.0, -1.0, -1.0], 4, 1, &spec(1.0)).unwrap();
        assert_eq!(v.0[0], 0.0);
        let z = fold_average(&[0.0; 8], 4, 2, &spec(0.9)).unwrap();
        assert_eq!(z.0, vec![0.0, 0.0]);
    }

    #[test]
    fn short_trace_rejected() {
        let t = FrequencyTrace {
            samples: vec![50.0; 10],
            sample_seconds: 900.0,
            f_nom: 50.0,
            df_max: 0.2,
        };
        let e = discretize_with_efficiency(&t, &TimeGrid::per_day(96), &spec(0.9)).unwrap_err();
        assert!(matches!(e, Error::IncompleteTrace { got: 10, need: 96 }));
    }

    #[test]
    fn clipping_applies_before_folding() {
        assert_eq!(normalize(50.5, 50.0, 0.2), 1.0);
        assert_eq!(normalize(49.0, 50.0, 0.2), -1.0);
        let s = spec(0.9);
        assert_abs_diff_eq!(fold(-1.0, &s), -1.0 / 0.9);
    }

    #[test]
    fn csv_round_trip() {
        let data = "timestamp,hz\n0,50.0\n10,50.1\n20,49.9\n";
        let t = FrequencyTrace::from_csv(data.as_bytes(), 50.0, 0.2).unwrap();
        assert_eq!(t.sample_seconds, 10.0);
        let n = t.normalized();
        assert_abs_diff_eq!(n[1], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(n[2], -0.5, epsilon = 1e-12);
        let bad = "timestamp,hz\n0,50.0\n0,50.1\n";
        assert!(FrequencyTrace::from_csv(bad.as_bytes(), 50.0, 0.2).is_err());
    }

    #[test]
    fn constant_samples_have_zero_deviation() {
        let s = vec![vec![0.3, -0.1]; 40];
        let (f, b) = estimate_deviations(&s).unwrap();
        assert_eq!(f, vec![0.0, 0.0]);
        assert_eq!(b, vec![0.0, 0.0]);
    }

    #[test]
    fn too_few_samples() {
        assert!(matches!(
            estimate_deviations(&vec![vec![0.0]; 10]),
            Err(Error::TooFewSamples { got: 10, .. })
        ));
    }

    #[test]
    fn gaussian_deviation_matches_std() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = Normal::new(0.0, 0.1).unwrap();
        let s: Vec<Vec<f64>> = (0..20_000).map(|_| vec![n.sample(&mut rng)]).collect();
        let (f, b) = estimate_deviations(&s).unwrap();
        assert!((f[0] - 0.1).abs() < 0.005, "{f:?}");
        assert!((b[0] - 0.1).abs() < 0.005, "{b:?}");
    }

    #[test]
    fn right_skew_has_larger_forward_deviation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let e = Exp::new(5.0).unwrap();
        let s: Vec<Vec<f64>> = (0..5000).map(|_| vec![e.sample(&mut rng)]).collect();
        let (f, b) = estimate_deviations(&s).unwrap();
        assert!(f[0] > b[0]);
        // brute-force MGF on a finer θ grid
        let mean = s.iter().map(|v| v[0]).sum::<f64>() / s.len() as f64;
        let c: Vec<f64> = s.iter().map(|v| v[0] - mean).collect();
        let mut brute: f64 = 0.0;
        for i in 1..4000 {
            let th = i as f64 * 0.01;
            let m = c.iter().map(|x| (th * x).exp()).sum::<f64>() / c.len() as f64;
            brute = brute.max((2.0 * m.ln() / (th * th)).sqrt());
        }
        assert!((f[0] - brute).abs() < 0.02 * brute, "{} vs {}", f[0], brute);
    }

    #[test]
    fn safety_coefficients() {
        assert_abs_diff_eq!(safety_coefficient(5e-3), (-2.0 * 5e-3f64.ln()).sqrt(), epsilon = 1e-15);
        assert_abs_diff_eq!(safety_coefficient(5e-3), 3.25525, epsilon = 1e-5);
        assert_eq!(safety_coefficient(1.0), 0.0);
    }

    #[test]
    fn identity_covariance_gives_identity_factor() {
        let u = UncertaintySet::gaussian(vec![0.0; 3], DMatrix::identity(3, 3), 0.05).unwrap();
        let w = u.w_factor().unwrap();
        assert!((w - DMatrix::<f64>::identity(3, 3)).norm() < 1e-12);
    }

    #[test]
    fn built_set_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = Normal::new(0.0, 1.0).unwrap();
        let samples: Vec<Vec<f64>> = (0..200)
            .map(|_| {
                let a: f64 = n.sample(&mut rng);
                let b: f64 = n.sample(&mut rng);
                vec![0.1 * a, 0.05 * a + 0.1 * b, 0.2 * b.abs()]
            })
            .collect();
        let u = build_uncertainty_set(&samples, 0.05, CovarianceOptions::default()).unwrap();
        let (_, raw) = mean_and_covariance(&samples);
        for k in 0..3 {
            let sd = raw[(k, k)].sqrt();
            assert!(u.sigma_f[k] >= sd && u.sigma_b[k] >= sd);
        }
        let w = u.w_factor().unwrap();
        let prod = w.transpose() * &w * &u.cov;
        assert!((prod - DMatrix::<f64>::identity(3, 3)).amax() < 1e-8);
        assert!(u.phi_f.iter().all(|p| *p > 0.5 && *p < 3.0));
    }

    #[test]
    fn rank_deficiency_without_regularization() {
        let s = vec![vec![0.0; 40]; 35];
        let opts = CovarianceOptions { regularize: false, rel: 0.0 };
        assert!(matches!(
            build_uncertainty_set(&s, 0.05, opts),
            Err(Error::RankDeficient { .. })
        ));
    }

    #[test]
    fn sup_and_inf_bracket_mean() {
        let u = UncertaintySet::gaussian(vec![0.1, -0.2], DMatrix::from_diagonal_element(2, 2, 0.04), 0.05).unwrap();
        let a = [1.0, 1.0];
        let hi = u.sup(&a);
        let lo = u.inf(&a);
        let mid = -0.1;
        assert_abs_diff_eq!(hi - mid, mid - lo, epsilon = 1e-12);
        assert_abs_diff_eq!(hi - mid, u.kappa() * (0.08f64).sqrt(), epsilon = 1e-12);
    }
}
