use fcrpeak::socp::{self, verify_kkt, Backend, ConicProgram, LinExpr, SolverOptions};
use proptest::prelude::*;

fn opts(backend: Backend) -> SolverOptions {
    SolverOptions {
        backend,
        feas_tol: 1e-10,
        gap_tol: 1e-10,
        ..SolverOptions::default()
    }
}

/// min c·x over the ball ‖x − a‖ ≤ ρ with x₀ pinned to a₀ + s.
fn pinned_ball(c: &[f64], a: &[f64], rho: f64, s: f64) -> (ConicProgram, f64) {
    let mut p = ConicProgram::new();
    let x0 = p.add_var("x0", a[0] + s, a[0] + s);
    let mut xs = vec![x0];
    xs.extend((1..c.len()).map(|i| p.free_var(format!("x{i}"))));
    let resid = xs.iter().zip(a).map(|(&x, &ai)| LinExpr::from(x) - ai).collect();
    p.add_soc(rho, resid);
    p.set_objective(LinExpr::sum(xs.iter().zip(c).map(|(&x, &ci)| LinExpr::term(x, ci))));
    let rest: f64 = c[1..].iter().map(|v| v * v).sum::<f64>().sqrt();
    let dot: f64 = c[1..].iter().zip(&a[1..]).map(|(x, y)| x * y).sum();
    let opt = c[0] * (a[0] + s) + dot - (rho * rho - s * s).sqrt() * rest;
    (p, opt)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn pinned_variable_matches_closed_form(
        c in prop::collection::vec(-3.0f64..3.0, 2..6),
        a_seed in prop::collection::vec(-2.0f64..2.0, 6),
        rho in 0.2f64..2.0,
        frac in -0.9f64..0.9,
    ) {
        let a = &a_seed[..c.len()];
        let (p, opt) = pinned_ball(&c, a, rho, frac * rho);
        for backend in [Backend::Dense, Backend::Sparse] {
            let sol = socp::solve(&p, &opts(backend)).unwrap().require_optimal().unwrap();
            prop_assert!((sol.objective - opt).abs() <= 1e-6 * (1.0 + opt.abs()), "{backend:?}: {} vs {opt}", sol.objective);
            prop_assert!(verify_kkt(&p, &sol).within(1e-6));
        }
    }

    #[test]
    fn backends_agree_on_box_lp(
        c in prop::collection::vec(-2.0f64..2.0, 3..8),
        lo in prop::collection::vec(-1.0f64..0.0, 8),
        width in prop::collection::vec(0.0f64..2.0, 8),
        budget in 0.5f64..4.0,
    ) {
        let mut p = ConicProgram::new();
        let xs: Vec<_> = (0..c.len()).map(|i| p.add_var(format!("x{i}"), lo[i], lo[i] + width[i])).collect();
        p.add_le(LinExpr::sum(xs.iter().map(|&x| LinExpr::from(x))), budget);
        p.set_objective(LinExpr::sum(xs.iter().zip(&c).map(|(&x, &ci)| LinExpr::term(x, ci))));
        let d = socp::solve(&p, &opts(Backend::Dense)).unwrap().require_optimal().unwrap();
        let s = socp::solve(&p, &opts(Backend::Sparse)).unwrap().require_optimal().unwrap();
        prop_assert!((d.objective - s.objective).abs() <= 1e-6 * (1.0 + d.objective.abs()));
    }
}

#[test]
fn fixed_bound_duals_carry_the_price() {
    // min x + 2y, x + y >= 1, y pinned at 0.25: the pin is worth 2 − 1
    let mut p = ConicProgram::new();
    let x = p.nonneg_var("x");
    let y = p.add_var("y", 0.25, 0.25);
    p.add_le(1.0, LinExpr::from(x) + y);
    p.set_objective(LinExpr::from(x) + LinExpr::term(y, 2.0));
    for backend in [Backend::Dense, Backend::Sparse] {
        let sol = socp::solve(&p, &opts(backend)).unwrap().require_optimal().unwrap();
        assert!((sol.objective - 1.25).abs() < 1e-7);
        let (l, u) = sol.bound_duals[y.index()];
        assert!((l - u - 1.0).abs() < 1e-6, "{backend:?}: {l} {u}");
    }
}
