//! Independent optimality check, recomputed from the program itself rather
//! than from solver internals.

use super::standard::StandardForm;
use super::{ConicProgram, Solution};

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct KktReport {
    /// Largest violation of a constraint or bound.
    pub primal: f64,
    /// `‖c + Aᵀz‖∞` of the stationarity condition.
    pub dual: f64,
    /// Largest distance of a multiplier block from the dual cone.
    pub dual_cone: f64,
    /// `|sᵀz|` summed over blocks.
    pub complementarity: f64,
    /// `|primal objective − dual objective|`.
    pub gap: f64,
    pub rel_primal: f64,
    pub rel_dual: f64,
    pub rel_dual_cone: f64,
    pub rel_complementarity: f64,
    pub rel_gap: f64,
}

impl KktReport {
    /// True if every relative residual is at most `tol`.
    pub fn within(&self, tol: f64) -> bool {
        self.rel_primal <= tol
            && self.rel_dual <= tol
            && self.rel_dual_cone <= tol
            && self.rel_complementarity <= tol
            && self.rel_gap <= tol
    }

    pub fn max_relative(&self) -> f64 {
        self.rel_primal
            .max(self.rel_dual)
            .max(self.rel_dual_cone)
            .max(self.rel_complementarity)
            .max(self.rel_gap)
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Checks primal feasibility, stationarity, dual cone membership,
/// complementarity and the duality gap of `sol` against `p`.
pub fn verify_kkt(p: &ConicProgram, sol: &Solution) -> KktReport {
    let sf = StandardForm::from_program(p);
    let x = &sol.x;
    let z = sf.gather_duals(&sol.duals, &sol.bound_duals);
    let s = sf.slack(x);

    let mut primal: f64 = 0.0;
    let mut dual_cone: f64 = 0.0;
    let mut comp = 0.0;
    for i in 0..sf.n_zero {
        primal = primal.max(s[i].abs());
    }
    for i in sf.n_zero..sf.n_zero + sf.n_nonneg {
        primal = primal.max(-s[i]);
        dual_cone = dual_cone.max(-z[i]);
        comp += (s[i] * z[i]).abs();
    }
    for (o, d) in sf.soc_blocks() {
        let tail = |v: &[f64]| v[o + 1..o + d].iter().map(|a| a * a).sum::<f64>().sqrt();
        primal = primal.max(tail(&s) - s[o]);
        dual_cone = dual_cone.max(tail(&z) - z[o]);
        let dot: f64 = (o..o + d).map(|k| s[k] * z[k]).sum();
        comp += dot.abs();
    }
    let dual = inf_norm(&sf.dual_residual(&z));
    let pobj = p.eval_objective(x);
    let dobj = sf.c0 - sf.b.iter().zip(&z).map(|(b, z)| b * z).sum::<f64>();
    let gap = (pobj - dobj).abs();
    let obj_scale = 1.0 + pobj.abs();
    KktReport {
        primal,
        dual,
        dual_cone,
        complementarity: comp,
        gap,
        rel_primal: primal / (1.0 + inf_norm(&sf.b)),
        rel_dual: dual / (1.0 + inf_norm(&sf.c)),
        rel_dual_cone: dual_cone / (1.0 + inf_norm(&sf.c)),
        rel_complementarity: comp / obj_scale,
        rel_gap: gap / obj_scale,
    }
}
