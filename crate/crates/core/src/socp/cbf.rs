//! Export in the Conic Benchmark Format (version 3), for inspecting a
//! program with external solvers.

use std::io::Write;

use super::standard::StandardForm;
use super::ConicProgram;

pub fn write_cbf<W: Write>(p: &ConicProgram, mut out: W) -> std::io::Result<()> {
    let sf = StandardForm::from_program(p);
    writeln!(out, "VER\n3\n")?;
    writeln!(out, "OBJSENSE\nMIN\n")?;
    writeln!(out, "VAR\n{} 1\nF {}\n", sf.n, sf.n)?;

    // CBF rows are `a x + b ∈ K`; ours are `b − a x ∈ K`.
    let mut cones = Vec::new();
    if sf.n_zero > 0 {
        cones.push(("L=", sf.n_zero));
    }
    if sf.n_nonneg > 0 {
        cones.push(("L+", sf.n_nonneg));
    }
    for &d in &sf.soc_dims {
        cones.push(("Q", d));
    }
    writeln!(out, "CON\n{} {}", sf.m(), cones.len())?;
    for (k, d) in &cones {
        writeln!(out, "{k} {d}")?;
    }
    writeln!(out)?;

    let obj: Vec<_> = sf.c.iter().enumerate().filter(|(_, c)| **c != 0.0).collect();
    if !obj.is_empty() {
        writeln!(out, "OBJACOORD\n{}", obj.len())?;
        for (j, c) in obj {
            writeln!(out, "{j} {c:e}")?;
        }
        writeln!(out)?;
    }
    if sf.c0 != 0.0 {
        writeln!(out, "OBJBCOORD\n{:e}\n", sf.c0)?;
    }
    let nnz: usize = sf.rows.iter().map(Vec::len).sum();
    if nnz > 0 {
        writeln!(out, "ACOORD\n{nnz}")?;
        for (i, row) in sf.rows.iter().enumerate() {
            for &(j, v) in row {
                writeln!(out, "{i} {j} {:e}", -v)?;
            }
        }
        writeln!(out)?;
    }
    let bs: Vec<_> = sf.b.iter().enumerate().filter(|(_, b)| **b != 0.0).collect();
    if !bs.is_empty() {
        writeln!(out, "BCOORD\n{}", bs.len())?;
        for (i, b) in bs {
            writeln!(out, "{i} {b:e}")?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn writes_sections() {
        let mut p = ConicProgram::new();
        let t = p.free_var("t");
        p.add_soc(t, vec![1.0.into()]);
        p.set_objective(t.into());
        let mut buf = Vec::new();
        write_cbf(&p, &mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.contains("CON\n2 1\nQ 2"));
        assert!(s.contains("OBJACOORD\n1\n0 1e0"));
    }
}
