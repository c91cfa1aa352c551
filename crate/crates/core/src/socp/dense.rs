//! Dense primal-dual interior-point method on the homogeneous self-dual
//! embedding, with Nesterov-Todd scaling and a Mehrotra corrector.
//!
//! Intended for small programs and as a cross-check of the sparse backend.

use nalgebra::{DMatrix, DVector};

use super::kkt::verify_kkt;
use super::standard::StandardForm;
use super::{ConicProgram, ConicSolver, Solution, SolveStatus, SolverOptions};
use crate::error::Result;

#[derive(Debug, Clone, Copy, Default)]
pub struct DenseIpm;

/// Cone `ℝ₊ˡ × Q^{q₁} × …` over the inequality rows.
struct Cone {
    l: usize,
    socs: Vec<(usize, usize)>,
}

impl Cone {
    fn degree(&self) -> usize {
        self.l + self.socs.len()
    }

    fn identity(&self, m: usize) -> DVector<f64> {
        let mut e = DVector::zeros(m);
        e.rows_mut(0, self.l).fill(1.0);
        for &(o, _) in &self.socs {
            e[o] = 1.0;
        }
        e
    }

    /// Smallest `t` such that `u + t·e ∈ K` (negated "interior margin").
    fn deficit(&self, u: &DVector<f64>) -> f64 {
        let mut t = f64::NEG_INFINITY;
        for i in 0..self.l {
            t = t.max(-u[i]);
        }
        for &(o, d) in &self.socs {
            let tail = u.rows(o + 1, d - 1).norm();
            t = t.max(tail - u[o]);
        }
        t
    }

    /// Jordan product `u ∘ v`.
    fn prod(&self, u: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(u.len());
        for i in 0..self.l {
            out[i] = u[i] * v[i];
        }
        for &(o, d) in &self.socs {
            let u0 = u[o];
            let v0 = v[o];
            out[o] = u.rows(o, d).dot(&v.rows(o, d));
            for k in 1..d {
                out[o + k] = u0 * v[o + k] + v0 * u[o + k];
            }
        }
        out
    }

    /// Solves `λ ∘ x = d` for `x`.
    fn div(&self, lam: &DVector<f64>, d: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(d.len());
        for i in 0..self.l {
            out[i] = d[i] / lam[i];
        }
        for &(o, dim) in &self.socs {
            let l0 = lam[o];
            let l1 = lam.rows(o + 1, dim - 1);
            let d1 = d.rows(o + 1, dim - 1);
            let det = l0 * l0 - l1.norm_squared();
            let x0 = (l0 * d[o] - l1.dot(&d1)) / det;
            out[o] = x0;
            for k in 1..dim {
                out[o + k] = (d[o + k] - x0 * lam[o + k]) / l0;
            }
        }
        out
    }

    /// Largest step `α` with `u + α·du ∈ K` (may be infinite).
    fn max_step(&self, u: &DVector<f64>, du: &DVector<f64>) -> f64 {
        let mut alpha = f64::INFINITY;
        for i in 0..self.l {
            if du[i] < 0.0 {
                alpha = alpha.min(-u[i] / du[i]);
            }
        }
        for &(o, d) in &self.socs {
            let u0 = u[o];
            let d0 = du[o];
            let u1 = u.rows(o + 1, d - 1);
            let d1 = du.rows(o + 1, d - 1);
            let a = d0 * d0 - d1.norm_squared();
            let b = u0 * d0 - u1.dot(&d1);
            let c = (u0 * u0 - u1.norm_squared()).max(0.0);
            alpha = alpha.min(soc_boundary(a, b, c, u0, d0));
        }
        alpha
    }
}

/// First `α > 0` where `(u₀+αd₀)² − ‖u₁+αd₁‖² = aα² + 2bα + c` hits zero.
fn soc_boundary(a: f64, b: f64, c: f64, u0: f64, d0: f64) -> f64 {
    let scale = a.abs().max(b.abs()).max(c.abs()).max(1e-300);
    let mut best = f64::INFINITY;
    if a.abs() <= 1e-14 * scale {
        if b < 0.0 {
            best = -c / (2.0 * b);
        }
    } else {
        let disc = b * b - a * c;
        if disc >= 0.0 {
            let q = -(b + b.signum() * disc.sqrt());
            for r in [q / a, if q != 0.0 { c / q } else { f64::INFINITY }] {
                if r > 0.0 && r < best {
                    best = r;
                }
            }
        }
    }
    if d0 < 0.0 {
        best = best.min(-u0 / d0);
    }
    best
}

/// Nesterov-Todd scaling `W` with `W z = W⁻¹ s = λ`.
struct Scaling {
    lp: Vec<f64>,
    socs: Vec<(f64, DVector<f64>)>,
}

impl Scaling {
    fn new(cone: &Cone, s: &DVector<f64>, z: &DVector<f64>) -> Self {
        let lp = (0..cone.l).map(|i| (s[i] / z[i]).sqrt()).collect();
        let mut socs = Vec::with_capacity(cone.socs.len());
        for &(o, d) in &cone.socs {
            let sb = s.rows(o, d).clone_owned();
            let zb = z.rows(o, d).clone_owned();
            let s_det = jnorm2(&sb).max(1e-300);
            let z_det = jnorm2(&zb).max(1e-300);
            let sn = sb / s_det.sqrt();
            let zn = zb / z_det.sqrt();
            let gamma = ((1.0 + sn.dot(&zn)) / 2.0).sqrt();
            let mut w = sn.clone();
            w[0] += zn[0];
            for k in 1..d {
                w[k] -= zn[k];
            }
            w /= 2.0 * gamma;
            // P(w) maps z̄ to s̄; the scaling is its square root P(√w)
            let root = (2.0 * (w[0] + 1.0)).sqrt();
            w[0] += 1.0;
            w /= root;
            let beta = (s_det / z_det).powf(0.25);
            socs.push((beta, w));
        }
        Self { lp, socs }
    }

    fn apply(&self, cone: &Cone, v: &DVector<f64>, inverse: bool) -> DVector<f64> {
        let mut out = v.clone();
        for i in 0..cone.l {
            out[i] = if inverse { v[i] / self.lp[i] } else { v[i] * self.lp[i] };
        }
        for (&(o, d), (beta, w)) in cone.socs.iter().zip(&self.socs) {
            let vb = v.rows(o, d);
            // W = β(2wwᵀ − J), W⁻¹ = β⁻¹(2Jw wᵀJ − J)
            let mut res = DVector::zeros(d);
            if inverse {
                let mut jw = w.clone();
                for k in 1..d {
                    jw[k] = -jw[k];
                }
                let t = 2.0 * jw.dot(&vb);
                for k in 0..d {
                    let jv = if k == 0 { vb[0] } else { -vb[k] };
                    res[k] = (t * jw[k] - jv) / beta;
                }
            } else {
                let t = 2.0 * w.dot(&vb);
                for k in 0..d {
                    let jv = if k == 0 { vb[0] } else { -vb[k] };
                    res[k] = beta * (t * w[k] - jv);
                }
            }
            out.rows_mut(o, d).copy_from(&res);
        }
        out
    }

    /// Dense `WᵀW` (W is symmetric).
    fn gram(&self, cone: &Cone, m: usize) -> DMatrix<f64> {
        let mut h = DMatrix::zeros(m, m);
        for i in 0..cone.l {
            h[(i, i)] = self.lp[i] * self.lp[i];
        }
        for (&(o, d), (beta, w)) in cone.socs.iter().zip(&self.socs) {
            let mut wm = 2.0 * w * w.transpose();
            wm[(0, 0)] -= 1.0;
            for k in 1..d {
                wm[(k, k)] += 1.0;
            }
            wm *= *beta;
            let sq = &wm * &wm;
            h.view_mut((o, o), (d, d)).copy_from(&sq);
        }
        h
    }
}

fn jnorm2(v: &DVector<f64>) -> f64 {
    v[0] * v[0] - v.rows(1, v.len() - 1).norm_squared()
}

struct Kkt {
    k: DMatrix<f64>,
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
}

impl Kkt {
    fn new(a: &DMatrix<f64>, g: &DMatrix<f64>, wtw: &DMatrix<f64>) -> Self {
        let (n, p, m) = (a.ncols(), a.nrows(), g.nrows());
        let dim = n + p + m;
        let mut k = DMatrix::zeros(dim, dim);
        k.view_mut((0, n), (n, p)).copy_from(&a.transpose());
        k.view_mut((0, n + p), (n, m)).copy_from(&g.transpose());
        k.view_mut((n, 0), (p, n)).copy_from(a);
        k.view_mut((n + p, 0), (m, n)).copy_from(g);
        k.view_mut((n + p, n + p), (m, m)).copy_from(&(-wtw));
        let mut reg = k.clone();
        let delta = 1e-9;
        for i in 0..n {
            reg[(i, i)] += delta;
        }
        for i in n..n + p {
            reg[(i, i)] -= delta;
        }
        let lu = reg.lu();
        Self { k, lu }
    }

    fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        if rhs.is_empty() {
            return DVector::zeros(0);
        }
        let mut x = self.lu.solve(rhs).unwrap_or_else(|| DVector::zeros(rhs.len()));
        for _ in 0..3 {
            let r = rhs - &self.k * &x;
            if let Some(dx) = self.lu.solve(&r) {
                x += dx;
            }
        }
        x
    }
}

struct Problem {
    n: usize,
    p: usize,
    m: usize,
    c: DVector<f64>,
    a: DMatrix<f64>,
    b: DVector<f64>,
    g: DMatrix<f64>,
    h: DVector<f64>,
    cone: Cone,
}

impl Problem {
    fn from_standard(sf: &StandardForm) -> Self {
        let n = sf.n;
        let p = sf.n_zero;
        let m = sf.m() - p;
        let mut a = DMatrix::zeros(p, n);
        let mut g = DMatrix::zeros(m, n);
        for (i, row) in sf.rows.iter().enumerate() {
            for &(j, v) in row {
                if i < p {
                    a[(i, j)] += v;
                } else {
                    g[(i - p, j)] += v;
                }
            }
        }
        let mut socs = Vec::new();
        let mut off = sf.n_nonneg;
        for &d in &sf.soc_dims {
            socs.push((off, d));
            off += d;
        }
        Self {
            n,
            p,
            m,
            c: DVector::from_column_slice(&sf.c),
            a,
            b: DVector::from_column_slice(&sf.b[..p]),
            g,
            h: DVector::from_column_slice(&sf.b[p..]),
            cone: Cone {
                l: sf.n_nonneg,
                socs,
            },
        }
    }

    fn stack(&self, x: &DVector<f64>, y: &DVector<f64>, z: &DVector<f64>) -> DVector<f64> {
        let mut v = DVector::zeros(self.n + self.p + self.m);
        v.rows_mut(0, self.n).copy_from(x);
        v.rows_mut(self.n, self.p).copy_from(y);
        v.rows_mut(self.n + self.p, self.m).copy_from(z);
        v
    }

    fn split(&self, v: &DVector<f64>) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
        (
            v.rows(0, self.n).clone_owned(),
            v.rows(self.n, self.p).clone_owned(),
            v.rows(self.n + self.p, self.m).clone_owned(),
        )
    }
}

struct Iterate {
    x: DVector<f64>,
    y: DVector<f64>,
    z: DVector<f64>,
    s: DVector<f64>,
    tau: f64,
    kappa: f64,
}

struct Outcome {
    status: SolveStatus,
    x: DVector<f64>,
    z_full: Vec<f64>,
    iterations: usize,
}

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn run(pr: &Problem, opts: &SolverOptions) -> Outcome {
    let (n, p, m) = (pr.n, pr.p, pr.m);
    let cone = &pr.cone;
    let e = cone.identity(m);

    // starting point from two least-squares systems with W = I
    let k0 = Kkt::new(&pr.a, &pr.g, &DMatrix::identity(m, m));
    let (x0, _, zp) = pr.split(&k0.solve(&pr.stack(&DVector::zeros(n), &pr.b, &pr.h)));
    let (_, y0, zd) = pr.split(&k0.solve(&pr.stack(&(-&pr.c), &DVector::zeros(p), &DVector::zeros(m))));
    let mut s = -zp;
    let mut z = zd;
    let ts = cone.deficit(&s);
    if ts >= -1e-8 * inf_norm(&s).max(1.0) {
        s += (1.0 + ts) * &e;
    }
    let tz = cone.deficit(&z);
    if tz >= -1e-8 * inf_norm(&z).max(1.0) {
        z += (1.0 + tz) * &e;
    }
    let mut it = Iterate {
        x: x0,
        y: y0,
        z,
        s,
        tau: 1.0,
        kappa: 1.0,
    };

    let deg = cone.degree() as f64;
    let res_x0 = 1.0 + inf_norm(&pr.c);
    let res_y0 = 1.0 + inf_norm(&pr.b);
    let res_z0 = 1.0 + inf_norm(&pr.h);

    for iter in 0..opts.max_iter {
        let rx = pr.a.transpose() * &it.y + pr.g.transpose() * &it.z + &pr.c * it.tau;
        let ry = -(&pr.a * &it.x) + &pr.b * it.tau;
        let rz = &it.s + &pr.g * &it.x - &pr.h * it.tau;
        let cx = pr.c.dot(&it.x);
        let by_hz = pr.b.dot(&it.y) + pr.h.dot(&it.z);
        let rt = it.kappa + cx + by_hz;
        let sz = it.s.dot(&it.z);
        let mu = (sz + it.tau * it.kappa) / (deg + 1.0);

        let pres = (inf_norm(&ry) / res_y0).max(inf_norm(&rz) / res_z0) / it.tau;
        let dres = inf_norm(&rx) / res_x0 / it.tau;
        let pobj = cx / it.tau;
        let dobj = -by_hz / it.tau;
        let gap = sz / (it.tau * it.tau);
        let gap_ok = gap <= opts.gap_tol * (1.0 + pobj.abs())
            && (pobj - dobj).abs() <= opts.gap_tol * (1.0 + pobj.abs());
        if pres <= opts.feas_tol && dres <= opts.feas_tol && gap_ok {
            return finish(pr, &it, SolveStatus::Optimal, iter);
        }
        if by_hz < 0.0 {
            let hrx = pr.a.transpose() * &it.y + pr.g.transpose() * &it.z;
            if inf_norm(&hrx) / (-by_hz) <= opts.feas_tol {
                return certificate(pr, &it, SolveStatus::Infeasible, iter);
            }
        }
        if cx < 0.0 {
            let hry = &pr.a * &it.x;
            let hrz = &it.s + &pr.g * &it.x;
            if inf_norm(&hry).max(inf_norm(&hrz)) / (-cx) <= opts.feas_tol {
                return certificate(pr, &it, SolveStatus::Unbounded, iter);
            }
        }

        let w = Scaling::new(cone, &it.s, &it.z);
        let lam = w.apply(cone, &it.z, false);
        let kkt = Kkt::new(&pr.a, &pr.g, &w.gram(cone, m));
        let one = kkt.solve(&pr.stack(&(-&pr.c), &pr.b, &pr.h));
        let (x1, y1, z1) = pr.split(&one);
        let denom1 = pr.c.dot(&x1) + pr.b.dot(&y1) + pr.h.dot(&z1) - it.kappa / it.tau;

        let direction = |ds: &DVector<f64>, dk: f64, f: f64| {
            let lds = cone.div(&lam, ds);
            let rhs = pr.stack(&(-f * &rx), &(f * &ry), &(-f * &rz - w.apply(cone, &lds, false)));
            let (x0, y0, z0) = pr.split(&kkt.solve(&rhs));
            let dtau = (-f * rt - dk / it.tau - (pr.c.dot(&x0) + pr.b.dot(&y0) + pr.h.dot(&z0))) / denom1;
            let dx = x0 + dtau * &x1;
            let dy = y0 + dtau * &y1;
            let dz = z0 + dtau * &z1;
            let dss = w.apply(cone, &(lds - w.apply(cone, &dz, false)), false);
            let dkappa = (dk - it.kappa * dtau) / it.tau;
            (dx, dy, dz, dss, dtau, dkappa)
        };
        let step_len = |dz: &DVector<f64>, ds: &DVector<f64>, dtau: f64, dkappa: f64| {
            let mut a = cone.max_step(&it.s, ds).min(cone.max_step(&it.z, dz));
            if dtau < 0.0 {
                a = a.min(-it.tau / dtau);
            }
            if dkappa < 0.0 {
                a = a.min(-it.kappa / dkappa);
            }
            a
        };

        // predictor
        let ds_aff = -cone.prod(&lam, &lam);
        let (_, _, dz_a, ds_a, dtau_a, dkappa_a) = direction(&ds_aff, -it.tau * it.kappa, 1.0);
        let alpha_a = step_len(&dz_a, &ds_a, dtau_a, dkappa_a).min(1.0);
        let sigma = (1.0 - alpha_a).powi(3);

        // corrector
        let corr = cone.prod(&w.apply(cone, &ds_a, true), &w.apply(cone, &dz_a, false));
        let ds_c = -cone.prod(&lam, &lam) + sigma * mu * &e - corr;
        let dk_c = -it.tau * it.kappa + sigma * mu - dtau_a * dkappa_a;
        let (dx, dy, dz, ds, dtau, dkappa) = direction(&ds_c, dk_c, 1.0 - sigma);
        let alpha = (0.99 * step_len(&dz, &ds, dtau, dkappa)).min(1.0);

        it.x += alpha * dx;
        it.y += alpha * dy;
        it.z += alpha * dz;
        it.s += alpha * ds;
        it.tau += alpha * dtau;
        it.kappa += alpha * dkappa;
        if !it.tau.is_finite() || !it.x.iter().all(|v| v.is_finite()) {
            return finish(pr, &it, SolveStatus::NumericalError, iter + 1);
        }
    }
    finish(pr, &it, SolveStatus::IterationLimit, opts.max_iter)
}

fn finish(pr: &Problem, it: &Iterate, status: SolveStatus, iterations: usize) -> Outcome {
    let x = &it.x / it.tau;
    let mut z_full = Vec::with_capacity(pr.p + pr.m);
    z_full.extend((&it.y / it.tau).iter());
    z_full.extend((&it.z / it.tau).iter());
    Outcome {
        status,
        x,
        z_full,
        iterations,
    }
}

fn certificate(pr: &Problem, it: &Iterate, status: SolveStatus, iterations: usize) -> Outcome {
    Outcome {
        status,
        x: it.x.clone(),
        z_full: it.y.iter().chain(it.z.iter()).copied().collect(),
        iterations,
    }
    .normalise(pr)
}

impl Outcome {
    fn normalise(mut self, pr: &Problem) -> Self {
        let scale = match self.status {
            SolveStatus::Infeasible => -(pr.b.dot(&DVector::from_column_slice(&self.z_full[..pr.p]))
                + pr.h.dot(&DVector::from_column_slice(&self.z_full[pr.p..]))),
            _ => -pr.c.dot(&self.x),
        };
        if scale > 0.0 {
            match self.status {
                SolveStatus::Infeasible => self.z_full.iter_mut().for_each(|v| *v /= scale),
                _ => self.x /= scale,
            }
        }
        self
    }
}

fn solve_equality_only(pr: &Problem, opts: &SolverOptions) -> Outcome {
    // min cᵀx s.t. Ax = b, no cone rows
    let kkt = Kkt::new(&pr.a, &pr.g, &DMatrix::zeros(0, 0));
    let sol = kkt.solve(&pr.stack(&(-&pr.c), &pr.b, &DVector::zeros(0)));
    let (x, y, _) = pr.split(&sol);
    let stat = pr.a.transpose() * &y + &pr.c;
    let feas = &pr.a * &x - &pr.b;
    let status = if inf_norm(&feas) > opts.feas_tol * (1.0 + inf_norm(&pr.b)) {
        SolveStatus::Infeasible
    } else if inf_norm(&stat) > opts.feas_tol * (1.0 + inf_norm(&pr.c)) {
        SolveStatus::Unbounded
    } else {
        SolveStatus::Optimal
    };
    Outcome {
        status,
        x,
        z_full: y.iter().copied().collect(),
        iterations: 1,
    }
}

impl ConicSolver for DenseIpm {
    fn solve(&self, p: &ConicProgram, opts: &SolverOptions) -> Result<Solution> {
        p.check()?;
        let sf = StandardForm::from_program(p);
        let pr = Problem::from_standard(&sf);
        let out = if pr.m == 0 {
            solve_equality_only(&pr, opts)
        } else {
            run(&pr, opts)
        };
        let (duals, bound_duals) = sf.split_duals(p, &out.z_full);
        let x: Vec<f64> = out.x.iter().copied().collect();
        let objective = p.eval_objective(&x);
        let dual_objective = sf.c0
            - sf.b
                .iter()
                .zip(&out.z_full)
                .map(|(b, z)| b * z)
                .sum::<f64>();
        let mut sol = Solution {
            status: out.status,
            x,
            duals,
            bound_duals,
            objective,
            dual_objective,
            iterations: out.iterations,
            residuals: Default::default(),
        };
        sol.residuals = verify_kkt(p, &sol);
        Ok(sol)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nt_scaling_maps_z_and_s_to_same_point() {
        let cone = Cone {
            l: 1,
            socs: vec![(1, 3)],
        };
        let s = DVector::from_vec(vec![0.7, 2.0, 0.3, -0.5]);
        let z = DVector::from_vec(vec![1.3, 1.5, -0.9, 0.2]);
        let w = Scaling::new(&cone, &s, &z);
        let wz = w.apply(&cone, &z, false);
        let winv_s = w.apply(&cone, &s, true);
        for i in 0..4 {
            assert!((wz[i] - winv_s[i]).abs() < 1e-12, "{wz} vs {winv_s}");
        }
        let back = w.apply(&cone, &wz, true);
        assert!((back - &z).norm() < 1e-12);
    }

    #[test]
    fn jordan_division_inverts_product() {
        let cone = Cone {
            l: 2,
            socs: vec![(2, 3)],
        };
        let lam = DVector::from_vec(vec![0.5, 2.0, 3.0, 1.0, -0.5]);
        let x = DVector::from_vec(vec![1.0, -1.0, 0.2, 0.4, 0.9]);
        let d = cone.prod(&lam, &x);
        let back = cone.div(&lam, &d);
        assert!((back - x).norm() < 1e-12);
    }

    #[test]
    fn soc_step_hits_boundary() {
        let cone = Cone {
            l: 0,
            socs: vec![(0, 2)],
        };
        // (1, 0) + α(−1, 1): boundary where 1 − α = α → α = 0.5
        let u = DVector::from_vec(vec![1.0, 0.0]);
        let du = DVector::from_vec(vec![-1.0, 1.0]);
        assert!((cone.max_step(&u, &du) - 0.5).abs() < 1e-12);
    }
}
