//! Second-order cone programs.
//!
//! Formulation code builds a [`ConicProgram`] out of [`LinExpr`]s and hands
//! it to a [`ConicSolver`]. Two backends ship with the crate: a dense
//! homogeneous-embedding interior-point method ([`DenseIpm`]), and a sparse
//! backend ([`SparseIpm`]) used for the larger day-ahead programs.

mod cbf;
mod dense;
mod expr;
mod kkt;
mod sparse;
mod standard;

pub use cbf::write_cbf;
pub use dense::DenseIpm;
pub use expr::{LinExpr, Var};
pub use kkt::{verify_kkt, KktReport};
pub use sparse::SparseIpm;

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct VarInfo {
    pub name: String,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone)]
pub enum Constraint {
    /// `expr == 0`
    Eq(LinExpr),
    /// `expr <= 0`
    Le(LinExpr),
    /// `‖x‖₂ <= t`
    Soc { t: LinExpr, x: Vec<LinExpr> },
}

impl Constraint {
    pub fn dual_len(&self) -> usize {
        match self {
            Constraint::Eq(_) | Constraint::Le(_) => 1,
            Constraint::Soc { x, .. } => 1 + x.len(),
        }
    }
}

/// Linear objective, variable bounds, linear (in)equalities and
/// second-order cone blocks.
#[derive(Debug, Clone, Default)]
pub struct ConicProgram {
    vars: Vec<VarInfo>,
    objective: LinExpr,
    constraints: Vec<Constraint>,
}

impl ConicProgram {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_var(&mut self, name: impl Into<String>, lower: f64, upper: f64) -> Var {
        self.vars.push(VarInfo {
            name: name.into(),
            lower,
            upper,
        });
        Var(self.vars.len() - 1)
    }

    pub fn free_var(&mut self, name: impl Into<String>) -> Var {
        self.add_var(name, f64::NEG_INFINITY, f64::INFINITY)
    }

    pub fn nonneg_var(&mut self, name: impl Into<String>) -> Var {
        self.add_var(name, 0.0, f64::INFINITY)
    }

    pub fn set_bounds(&mut self, v: Var, lower: f64, upper: f64) {
        let info = &mut self.vars[v.0];
        info.lower = lower;
        info.upper = upper;
    }

    pub fn set_objective(&mut self, obj: LinExpr) {
        self.objective = obj.compact();
    }

    pub fn add_to_objective(&mut self, e: &LinExpr) {
        let mut obj = std::mem::take(&mut self.objective);
        obj.add_assign_scaled(e, 1.0);
        self.objective = obj.compact();
    }

    /// `lhs == rhs`
    pub fn add_eq(&mut self, lhs: impl Into<LinExpr>, rhs: impl Into<LinExpr>) -> usize {
        let e = lhs.into() - rhs.into();
        self.push(Constraint::Eq(e.compact()))
    }

    /// `lhs <= rhs`
    pub fn add_le(&mut self, lhs: impl Into<LinExpr>, rhs: impl Into<LinExpr>) -> usize {
        let e = lhs.into() - rhs.into();
        self.push(Constraint::Le(e.compact()))
    }

    /// `‖x‖₂ <= t`
    pub fn add_soc(&mut self, t: impl Into<LinExpr>, x: Vec<LinExpr>) -> usize {
        let t = t.into().compact();
        let x = x.into_iter().map(LinExpr::compact).collect();
        self.push(Constraint::Soc { t, x })
    }

    fn push(&mut self, c: Constraint) -> usize {
        self.constraints.push(c);
        self.constraints.len() - 1
    }

    pub fn n_vars(&self) -> usize {
        self.vars.len()
    }

    pub fn vars(&self) -> &[VarInfo] {
        &self.vars
    }

    pub fn objective(&self) -> &LinExpr {
        &self.objective
    }

    pub fn constraints(&self) -> &[Constraint] {
        &self.constraints
    }

    /// Checks that every expression references declared variables and that
    /// cone blocks are non-empty.
    pub fn check(&self) -> Result<()> {
        let n = self.vars.len();
        let bad = |e: &LinExpr| e.terms.iter().any(|(v, c)| v.0 >= n || !c.is_finite()) || !e.constant.is_finite();
        if bad(&self.objective) {
            return Err(Error::Config("objective references an undeclared variable".into()));
        }
        for (i, c) in self.constraints.iter().enumerate() {
            let ok = match c {
                Constraint::Eq(e) | Constraint::Le(e) => !bad(e),
                Constraint::Soc { t, x } => !bad(t) && !x.iter().any(bad),
            };
            if !ok {
                return Err(Error::Config(format!("constraint {i} is malformed")));
            }
        }
        for v in &self.vars {
            if v.lower > v.upper || v.lower == f64::INFINITY || v.upper == f64::NEG_INFINITY {
                return Err(Error::Config(format!("variable {} has empty bounds", v.name)));
            }
        }
        Ok(())
    }

    pub fn eval_objective(&self, x: &[f64]) -> f64 {
        self.objective.eval(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    Unbounded,
    IterationLimit,
    NumericalError,
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub status: SolveStatus,
    pub x: Vec<f64>,
    /// One entry per constraint; cone blocks carry `1 + dim(x)` values.
    pub duals: Vec<Vec<f64>>,
    /// Multipliers of the (lower, upper) variable bounds.
    pub bound_duals: Vec<(f64, f64)>,
    pub objective: f64,
    pub dual_objective: f64,
    pub iterations: usize,
    pub residuals: KktReport,
}

impl Solution {
    pub fn value(&self, v: Var) -> f64 {
        self.x[v.0]
    }

    pub fn eval(&self, e: &LinExpr) -> f64 {
        e.eval(&self.x)
    }

    pub fn is_optimal(&self) -> bool {
        self.status == SolveStatus::Optimal
    }

    /// Converts a non-optimal status into an error.
    pub fn require_optimal(self) -> Result<Self> {
        if self.is_optimal() {
            Ok(self)
        } else {
            Err(Error::Solver {
                status: self.status,
                detail: format!(
                    "after {} iterations, primal residual {:.3e}, dual residual {:.3e}",
                    self.iterations, self.residuals.primal, self.residuals.dual
                ),
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Dense,
    #[default]
    Sparse,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub backend: Backend,
    pub feas_tol: f64,
    pub gap_tol: f64,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            backend: Backend::Sparse,
            feas_tol: 1e-7,
            gap_tol: 1e-7,
            max_iter: 200,
        }
    }
}

impl SolverOptions {
    pub fn dense() -> Self {
        Self {
            backend: Backend::Dense,
            ..Self::default()
        }
    }
}

pub trait ConicSolver: Send + Sync {
    fn solve(&self, p: &ConicProgram, opts: &SolverOptions) -> Result<Solution>;
}

/// Solve with the backend selected in `opts`.
pub fn solve(p: &ConicProgram, opts: &SolverOptions) -> Result<Solution> {
    let sol = match opts.backend {
        Backend::Dense => DenseIpm.solve(p, opts),
        Backend::Sparse => SparseIpm.solve(p, opts),
    }?;
    if AUDIT_ON.load(Ordering::Relaxed) && sol.is_optimal() {
        let rep = verify_kkt(p, &sol);
        let mut a = AUDIT.lock().unwrap_or_else(|e| e.into_inner());
        a.solves += 1;
        if rep.max_relative() > a.worst {
            a.worst = rep.max_relative();
            a.worst_report = rep;
        }
    }
    Ok(sol)
}

/// Running record of the KKT re-verification of every optimal solve.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct KktAudit {
    pub solves: usize,
    /// Largest relative residual seen.
    pub worst: f64,
    pub worst_report: KktReport,
}

static AUDIT_ON: AtomicBool = AtomicBool::new(false);
static AUDIT: Mutex<KktAudit> = Mutex::new(KktAudit {
    solves: 0,
    worst: 0.0,
    worst_report: KktReport {
        primal: 0.0,
        dual: 0.0,
        dual_cone: 0.0,
        complementarity: 0.0,
        gap: 0.0,
        rel_primal: 0.0,
        rel_dual: 0.0,
        rel_dual_cone: 0.0,
        rel_complementarity: 0.0,
        rel_gap: 0.0,
    },
});

/// Turns the process-wide KKT audit on or off and clears its record.
pub fn set_kkt_audit(on: bool) {
    *AUDIT.lock().unwrap_or_else(|e| e.into_inner()) = KktAudit::default();
    AUDIT_ON.store(on, Ordering::Relaxed);
}

pub fn kkt_audit() -> KktAudit {
    *AUDIT.lock().unwrap_or_else(|e| e.into_inner())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn both() -> [SolverOptions; 2] {
        [SolverOptions::dense(), SolverOptions::default()]
    }

    #[test]
    fn lower_bound_lp() {
        for opts in both() {
            let mut p = ConicProgram::new();
            let x = p.free_var("x");
            p.add_le(3.0, x);
            p.set_objective(x.into());
            let s = solve(&p, &opts).unwrap();
            assert_eq!(s.status, SolveStatus::Optimal);
            assert_abs_diff_eq!(s.value(x), 3.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn norm_of_ones() {
        for opts in both() {
            let mut p = ConicProgram::new();
            let t = p.free_var("t");
            p.add_soc(t, vec![1.0.into(), 1.0.into()]);
            p.set_objective(t.into());
            let s = solve(&p, &opts).unwrap();
            assert_eq!(s.status, SolveStatus::Optimal);
            assert_abs_diff_eq!(s.value(t), 2f64.sqrt(), epsilon = 1e-6);
            let rep = verify_kkt(&p, &s);
            assert!(rep.within(1e-6), "{rep:?}");
        }
    }

    #[test]
    fn infeasible_detected() {
        for opts in both() {
            let mut p = ConicProgram::new();
            let x = p.free_var("x");
            p.add_le(x, 1.0);
            p.add_le(2.0, x);
            p.set_objective(x.into());
            let s = solve(&p, &opts).unwrap();
            assert_eq!(s.status, SolveStatus::Infeasible, "{:?}", opts.backend);
        }
    }

    #[test]
    fn unbounded_detected() {
        for opts in both() {
            let mut p = ConicProgram::new();
            let x = p.free_var("x");
            p.add_le(x, 1.0);
            p.set_objective(x.into());
            let s = solve(&p, &opts).unwrap();
            assert_eq!(s.status, SolveStatus::Unbounded, "{:?}", opts.backend);
        }
    }

    #[test]
    fn bounds_and_equalities() {
        // min -x - y  s.t. x + y == 1.5, 0 <= x <= 1, 0 <= y <= 1
        for opts in both() {
            let mut p = ConicProgram::new();
            let x = p.add_var("x", 0.0, 1.0);
            let y = p.add_var("y", 0.0, 1.0);
            p.add_eq(LinExpr::from(x) + y, 1.5);
            p.set_objective(-(LinExpr::from(x) + y) + LinExpr::from(2.0 * x));
            let s = solve(&p, &opts).unwrap();
            assert!(s.is_optimal());
            assert_abs_diff_eq!(s.value(x), 0.5, epsilon = 1e-6);
            assert_abs_diff_eq!(s.value(y), 1.0, epsilon = 1e-6);
            assert!(verify_kkt(&p, &s).within(1e-6));
        }
    }

    #[test]
    fn zero_program_has_zero_residuals() {
        let p = ConicProgram::new();
        let s = solve(&p, &SolverOptions::dense()).unwrap();
        let rep = verify_kkt(&p, &s);
        assert_eq!(rep.primal, 0.0);
        assert_eq!(rep.dual, 0.0);
        assert_eq!(rep.complementarity, 0.0);
    }

    #[test]
    fn perturbed_point_shows_primal_residual() {
        let mut p = ConicProgram::new();
        let x = p.free_var("x");
        let y = p.free_var("y");
        p.add_eq(LinExpr::from(x) + y, 1.0);
        p.add_le(0.0, x);
        p.add_le(0.0, y);
        p.set_objective(LinExpr::from(x) + 2.0 * y);
        let mut s = solve(&p, &SolverOptions::dense()).unwrap();
        assert!(verify_kkt(&p, &s).primal < 1e-7);
        s.x[0] += 0.1;
        assert!(verify_kkt(&p, &s).primal >= 0.1 - 1e-9);
    }

    #[test]
    fn check_rejects_unknown_variable() {
        let mut p = ConicProgram::new();
        let _ = p.free_var("x");
        p.add_le(Var(3), 1.0);
        assert!(p.check().is_err());
    }
}
