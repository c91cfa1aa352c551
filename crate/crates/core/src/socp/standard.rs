//! Conversion of a [`ConicProgram`] to `A x + s = b, s ∈ K` with
//! `K = {0}ᵖ × ℝ₊ˡ × Q^{q₁} × …`, the layout shared by both backends.

use super::{ConicProgram, Constraint, LinExpr};

#[derive(Debug, Clone, Copy)]
pub(crate) enum RowOrigin {
    Constraint(usize, usize),
    Lower(usize),
    Upper(usize),
    /// `lower == upper`, kept as one equality row.
    Fixed(usize),
}

#[derive(Debug, Clone)]
pub(crate) struct StandardForm {
    pub n: usize,
    pub c: Vec<f64>,
    pub c0: f64,
    pub rows: Vec<Vec<(usize, f64)>>,
    pub b: Vec<f64>,
    pub n_zero: usize,
    pub n_nonneg: usize,
    pub soc_dims: Vec<usize>,
    pub origin: Vec<RowOrigin>,
}

fn row_of(e: &LinExpr, sign: f64) -> Vec<(usize, f64)> {
    e.terms.iter().map(|&(v, c)| (v.0, sign * c)).collect()
}

impl StandardForm {
    pub fn from_program(p: &ConicProgram) -> Self {
        let n = p.n_vars();
        let mut c = vec![0.0; n];
        for &(v, coef) in &p.objective().terms {
            c[v.0] += coef;
        }
        let mut rows = Vec::new();
        let mut b = Vec::new();
        let mut origin = Vec::new();

        for (i, con) in p.constraints().iter().enumerate() {
            if let Constraint::Eq(e) = con {
                rows.push(row_of(e, 1.0));
                b.push(-e.constant);
                origin.push(RowOrigin::Constraint(i, 0));
            }
        }
        for (j, v) in p.vars().iter().enumerate() {
            if v.lower.is_finite() && v.lower == v.upper {
                rows.push(vec![(j, 1.0)]);
                b.push(v.upper);
                origin.push(RowOrigin::Fixed(j));
            }
        }
        let n_zero = rows.len();
        for (i, con) in p.constraints().iter().enumerate() {
            if let Constraint::Le(e) = con {
                rows.push(row_of(e, 1.0));
                b.push(-e.constant);
                origin.push(RowOrigin::Constraint(i, 0));
            }
        }
        for (j, v) in p.vars().iter().enumerate() {
            if v.lower == v.upper {
                continue;
            }
            if v.lower.is_finite() {
                rows.push(vec![(j, -1.0)]);
                b.push(-v.lower);
                origin.push(RowOrigin::Lower(j));
            }
            if v.upper.is_finite() {
                rows.push(vec![(j, 1.0)]);
                b.push(v.upper);
                origin.push(RowOrigin::Upper(j));
            }
        }
        let n_nonneg = rows.len() - n_zero;
        let mut soc_dims = Vec::new();
        for (i, con) in p.constraints().iter().enumerate() {
            if let Constraint::Soc { t, x } = con {
                rows.push(row_of(t, -1.0));
                b.push(t.constant);
                origin.push(RowOrigin::Constraint(i, 0));
                for (k, xe) in x.iter().enumerate() {
                    rows.push(row_of(xe, -1.0));
                    b.push(xe.constant);
                    origin.push(RowOrigin::Constraint(i, k + 1));
                }
                soc_dims.push(1 + x.len());
            }
        }
        Self {
            n,
            c,
            c0: p.objective().constant,
            rows,
            b,
            n_zero,
            n_nonneg,
            soc_dims,
            origin,
        }
    }

    pub fn m(&self) -> usize {
        self.rows.len()
    }

    /// Scatters a standard-form dual vector back onto constraints and bounds.
    pub fn split_duals(&self, p: &ConicProgram, z: &[f64]) -> (Vec<Vec<f64>>, Vec<(f64, f64)>) {
        let mut duals: Vec<Vec<f64>> = p
            .constraints()
            .iter()
            .map(|c| vec![0.0; c.dual_len()])
            .collect();
        let mut bounds = vec![(0.0, 0.0); p.n_vars()];
        for (row, &o) in self.origin.iter().enumerate() {
            match o {
                RowOrigin::Constraint(i, k) => duals[i][k] = z[row],
                RowOrigin::Lower(j) => bounds[j].0 = z[row],
                RowOrigin::Upper(j) => bounds[j].1 = z[row],
                RowOrigin::Fixed(j) => bounds[j] = ((-z[row]).max(0.0), z[row].max(0.0)),
            }
        }
        (duals, bounds)
    }
}

impl StandardForm {
    /// Inverse of [`StandardForm::split_duals`].
    pub fn gather_duals(&self, duals: &[Vec<f64>], bounds: &[(f64, f64)]) -> Vec<f64> {
        self.origin
            .iter()
            .map(|&o| match o {
                RowOrigin::Constraint(i, k) => duals.get(i).and_then(|d| d.get(k)).copied().unwrap_or(0.0),
                RowOrigin::Lower(j) => bounds.get(j).map_or(0.0, |b| b.0),
                RowOrigin::Upper(j) => bounds.get(j).map_or(0.0, |b| b.1),
                RowOrigin::Fixed(j) => bounds.get(j).map_or(0.0, |b| b.1 - b.0),
            })
            .collect()
    }

    /// `b − A x`, the slack that must lie in the cone.
    pub fn slack(&self, x: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .zip(&self.b)
            .map(|(row, b)| b - row.iter().map(|&(j, v)| v * x[j]).sum::<f64>())
            .collect()
    }

    /// `c + Aᵀ z`.
    pub fn dual_residual(&self, z: &[f64]) -> Vec<f64> {
        let mut r = self.c.clone();
        for (row, zi) in self.rows.iter().zip(z) {
            for &(j, v) in row {
                r[j] += v * zi;
            }
        }
        r
    }

    /// Calls `f(offset, len)` for every second-order cone block.
    pub fn soc_blocks(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let mut off = self.n_zero + self.n_nonneg;
        self.soc_dims.iter().map(move |&d| {
            let o = off;
            off += d;
            (o, d)
        })
    }
}
