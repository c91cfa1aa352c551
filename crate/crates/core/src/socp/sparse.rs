//! Sparse backend delegating to the Clarabel interior-point solver.

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};

use super::kkt::verify_kkt;
use super::standard::StandardForm;
use super::{ConicProgram, ConicSolver, DenseIpm, Solution, SolveStatus, SolverOptions};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default)]
pub struct SparseIpm;

const LDL: &str = if cfg!(feature = "faer") { "faer" } else { "qdldl" };

fn map_status(s: SolverStatus) -> SolveStatus {
    match s {
        SolverStatus::Solved | SolverStatus::AlmostSolved => SolveStatus::Optimal,
        SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => SolveStatus::Infeasible,
        SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => SolveStatus::Unbounded,
        SolverStatus::MaxIterations | SolverStatus::MaxTime => SolveStatus::IterationLimit,
        _ => SolveStatus::NumericalError,
    }
}

impl ConicSolver for SparseIpm {
    fn solve(&self, p: &ConicProgram, opts: &SolverOptions) -> Result<Solution> {
        p.check()?;
        let sf = StandardForm::from_program(p);
        let (n, m) = (sf.n, sf.m());
        if m == 0 || n == 0 {
            return DenseIpm.solve(p, opts);
        }

        let mut ii = Vec::new();
        let mut jj = Vec::new();
        let mut vv = Vec::new();
        for (i, row) in sf.rows.iter().enumerate() {
            for &(j, v) in row {
                ii.push(i);
                jj.push(j);
                vv.push(v);
            }
        }
        let a = CscMatrix::new_from_triplets(m, n, ii, jj, vv);
        let pmat = CscMatrix::<f64>::zeros((n, n));
        let mut cones = Vec::new();
        if sf.n_zero > 0 {
            cones.push(SupportedConeT::ZeroConeT(sf.n_zero));
        }
        if sf.n_nonneg > 0 {
            cones.push(SupportedConeT::NonnegativeConeT(sf.n_nonneg));
        }
        for &d in &sf.soc_dims {
            if d == 1 {
                cones.push(SupportedConeT::NonnegativeConeT(1));
            } else {
                cones.push(SupportedConeT::SecondOrderConeT(d));
            }
        }
        let settings = DefaultSettingsBuilder::default()
            .verbose(false)
            .direct_solve_method(LDL.into())
            .max_iter(opts.max_iter as u32)
            .tol_feas(opts.feas_tol)
            .tol_gap_abs(opts.gap_tol)
            .tol_gap_rel(opts.gap_tol)
            .build()
            .map_err(|e| Error::Config(format!("solver settings: {e:?}")))?;
        let mut solver = DefaultSolver::new(&pmat, &sf.c, &a, &sf.b, &cones, settings)
            .map_err(|e| Error::Numerical(format!("solver setup: {e:?}")))?;
        solver.solve();
        let raw = &solver.solution;
        let mut status = map_status(raw.status);
        let (duals, bound_duals) = sf.split_duals(p, &raw.z);
        let x = raw.x.clone();
        let objective = p.eval_objective(&x);
        let dual_objective = sf.c0 - sf.b.iter().zip(&raw.z).map(|(b, z)| b * z).sum::<f64>();
        let mut sol = Solution {
            status,
            x,
            duals,
            bound_duals,
            objective,
            dual_objective,
            iterations: raw.iterations as usize,
            residuals: Default::default(),
        };
        sol.residuals = verify_kkt(p, &sol);
        if raw.status == SolverStatus::AlmostSolved && !sol.residuals.within(1e-6) {
            status = SolveStatus::IterationLimit;
            sol.status = status;
        }
        Ok(sol)
    }
}
