//! Machine-readable output: CSV tables and JSON reports with full-precision
//! floats and parameter/seed provenance in comment headers.
//!
//! Floats are written as `{:.16e}` (17 significant digits), which
//! round-trips every finite f64. JSON numbers go through the serializer's
//! shortest-roundtrip encoding, which is also value-exact. Timestamps never
//! appear here; identical runs produce identical bytes.

use std::io::Write;

use nalgebra::DMatrix;

use crate::ctmc::JumpStream;
use crate::error::Result;
use crate::experiments::LlnResult;
use crate::ou::{CovarianceTrajectory, OuState};
use crate::seqspace::{ModelParams, TailVector};
use crate::stats::{Criterion, ReplicaEnsemble};

/// Provenance stamped into every table header.
#[derive(Default, Clone, Copy)]
pub struct Meta<'a> {
    pub params: Option<&'a ModelParams>,
    pub seed: Option<u64>,
    pub n: Option<u64>,
}

impl<'a> Meta<'a> {
    pub fn new(params: &'a ModelParams, seed: u64) -> Self {
        Self {
            params: Some(params),
            seed: Some(seed),
            n: None,
        }
    }

    pub fn with_n(mut self, n: u64) -> Self {
        self.n = Some(n);
        self
    }
}

fn write_header(w: &mut impl Write, meta: &Meta) -> Result<()> {
    if let Some(p) = meta.params {
        writeln!(
            w,
            "# alpha={:.16e} beta={:.16e} choices={}",
            p.alpha(),
            p.beta(),
            p.choices()
        )?;
    }
    if let Some(seed) = meta.seed {
        writeln!(w, "# seed={seed}")?;
    }
    if let Some(n) = meta.n {
        writeln!(w, "# n={n}")?;
    }
    Ok(())
}

/// `k,value` rows of a tail vector.
pub fn write_tail_csv(w: &mut impl Write, tail: &TailVector, meta: &Meta) -> Result<()> {
    write_header(w, meta)?;
    writeln!(w, "k,value")?;
    for k in 0..=tail.horizon() {
        writeln!(w, "{k},{:.16e}", tail.value(k))?;
    }
    Ok(())
}

/// The same tail as a JSON document with exact values.
pub fn write_tail_json(w: &mut impl Write, tail: &TailVector, meta: &Meta) -> Result<()> {
    let mut doc = serde_json::Map::new();
    if let Some(p) = meta.params {
        doc.insert("params".into(), serde_json::to_value(p)?);
    }
    if let Some(seed) = meta.seed {
        doc.insert("seed".into(), seed.into());
    }
    doc.insert("values".into(), serde_json::to_value(tail.values())?);
    serde_json::to_writer_pretty(&mut *w, &serde_json::Value::Object(doc))?;
    writeln!(w)?;
    Ok(())
}

/// `t,sup_error` rows of a relaxation trace.
pub fn write_relaxation_csv(
    w: &mut impl Write,
    trace: &[(f64, f64)],
    meta: &Meta,
) -> Result<()> {
    write_header(w, meta)?;
    writeln!(w, "t,sup_error")?;
    for &(t, e) in trace {
        writeln!(w, "{t:.16e},{e:.16e}")?;
    }
    Ok(())
}

/// Covariance trajectory: time plus the upper triangle in row-major order
/// (`s_j_k` for `j <= k`, 1-based coordinates).
pub fn write_covariance_csv(
    w: &mut impl Write,
    traj: &CovarianceTrajectory,
    meta: &Meta,
) -> Result<()> {
    write_header(w, meta)?;
    if traj.len() == 0 {
        return Ok(());
    }
    let m = traj.raw_at(0).nrows();
    let mut head = String::from("t");
    for j in 1..=m {
        for k in j..=m {
            head.push_str(&format!(",s_{j}_{k}"));
        }
    }
    writeln!(w, "{head}")?;
    for i in 0..traj.len() {
        let sigma = traj.raw_at(i);
        write!(w, "{:.16e}", traj.time(i))?;
        for j in 0..m {
            for k in j..m {
                write!(w, ",{:.16e}", sigma[(j, k)])?;
            }
        }
        writeln!(w)?;
    }
    Ok(())
}

/// A dense matrix as `row,c1..cm` rows (1-based coordinate labels).
pub fn write_matrix_csv(w: &mut impl Write, m: &DMatrix<f64>, meta: &Meta) -> Result<()> {
    write_header(w, meta)?;
    let mut head = String::from("row");
    for k in 1..=m.ncols() {
        head.push_str(&format!(",c{k}"));
    }
    writeln!(w, "{head}")?;
    for i in 0..m.nrows() {
        write!(w, "{}", i + 1)?;
        for j in 0..m.ncols() {
            write!(w, ",{:.16e}", m[(i, j)])?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// OU sample path: `t,z1..zm` rows.
pub fn write_ou_path_csv(w: &mut impl Write, path: &[OuState], meta: &Meta) -> Result<()> {
    write_header(w, meta)?;
    if path.is_empty() {
        return Ok(());
    }
    let m = path[0].dim();
    let mut head = String::from("t");
    for k in 1..=m {
        head.push_str(&format!(",z{k}"));
    }
    writeln!(w, "{head}")?;
    for state in path {
        write!(w, "{:.16e}", state.t())?;
        for k in 1..=m {
            write!(w, ",{:.16e}", state.z()[k])?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Jump stream: provenance plus initial counts in the header, then
/// `t,k,sign` event rows.
pub fn write_jumps_csv(w: &mut impl Write, stream: &JumpStream, meta: &Meta) -> Result<()> {
    write_header(w, &meta.with_n(stream.n()))?;
    writeln!(w, "# t0={:.16e} t_end={:.16e}", stream.t0(), stream.t_end())?;
    let counts: Vec<String> = stream
        .init()
        .counts()
        .iter()
        .map(|c| c.to_string())
        .collect();
    writeln!(w, "# init_counts={}", counts.join(" "))?;
    writeln!(w, "t,k,sign")?;
    for j in stream.jumps() {
        writeln!(w, "{:.16e},{},{}", j.t, j.k, j.sign)?;
    }
    Ok(())
}

/// Replica-by-coordinate ensemble: `replica,c1..cK` rows.
pub fn write_ensemble_csv(
    w: &mut impl Write,
    e: &ReplicaEnsemble,
    meta: &Meta,
) -> Result<()> {
    write_header(w, meta)?;
    let mut head = String::from("replica");
    for k in 1..=e.coords() {
        head.push_str(&format!(",c{k}"));
    }
    writeln!(w, "{head}")?;
    for i in 0..e.replicas() {
        write!(w, "{i}")?;
        for x in e.row(i) {
            write!(w, ",{x:.16e}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// LLN medians: `n,median_error` rows.
pub fn write_lln_medians_csv(w: &mut impl Write, res: &LlnResult, meta: &Meta) -> Result<()> {
    write_header(w, meta)?;
    writeln!(w, "n,median_error")?;
    for e in &res.per_n {
        writeln!(w, "{},{:.16e}", e.n, e.median)?;
    }
    Ok(())
}

/// LLN replica-level errors: `n,replica,sup_error` rows.
pub fn write_lln_errors_csv(w: &mut impl Write, res: &LlnResult, meta: &Meta) -> Result<()> {
    write_header(w, meta)?;
    writeln!(w, "n,replica,sup_error")?;
    for e in &res.per_n {
        for (i, err) in e.sup_errors.iter().enumerate() {
            writeln!(w, "{},{i},{err:.16e}", e.n)?;
        }
    }
    Ok(())
}

/// Verdict report as pretty JSON.
pub fn write_criteria_json(w: &mut impl Write, criteria: &[Criterion]) -> Result<()> {
    serde_json::to_writer_pretty(&mut *w, criteria)?;
    writeln!(w)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctmc::{JumpRecord, JumpStream};
    use crate::meanfield::{default_dt, integrate_ode};
    use crate::ou::{evolve_covariance, CovarianceMatrix};
    use crate::seqspace::EmpiricalTail;
    use crate::testutil::params;

    fn render(f: impl FnOnce(&mut Vec<u8>)) -> String {
        let mut buf = Vec::new();
        f(&mut buf);
        String::from_utf8(buf).unwrap()
    }

    #[test]
    fn tail_csv_golden() {
        let p = params(1.0, 2.0, 2);
        let tail = TailVector::new(vec![1.0, 0.5, 0.25]).unwrap();
        let meta = Meta::new(&p, 42);
        let out = render(|w| write_tail_csv(w, &tail, &meta).unwrap());
        let expect = "# alpha=1.0000000000000000e0 beta=2.0000000000000000e0 choices=2\n\
                      # seed=42\n\
                      k,value\n\
                      0,1.0000000000000000e0\n\
                      1,5.0000000000000000e-1\n\
                      2,2.5000000000000000e-1\n";
        assert_eq!(out, expect);
    }

    #[test]
    fn tail_json_roundtrips_exactly() {
        let p = params(1.0, 3.0, 2);
        let tail = TailVector::new(vec![1.0, 1.0 / 3.0, 0.1234567890123456789]).unwrap();
        let meta = Meta::new(&p, 7);
        let out = render(|w| write_tail_json(w, &tail, &meta).unwrap());
        let doc: serde_json::Value = serde_json::from_str(&out).unwrap();
        let values: Vec<f64> = doc["values"]
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v.as_f64().unwrap())
            .collect();
        for (a, b) in values.iter().zip(tail.values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(doc["seed"], 7);
    }

    #[test]
    fn csv_formatting_roundtrips_exactly() {
        let xs = [1.0 / 3.0, 0.1, 2.0f64.sqrt(), 1e-300, 6.02e23];
        for x in xs {
            let s = format!("{x:.16e}");
            assert_eq!(s.parse::<f64>().unwrap().to_bits(), x.to_bits());
        }
    }

    #[test]
    fn covariance_csv_has_upper_triangle_columns() {
        let p = params(1.0, 2.0, 2);
        let ode = integrate_ode(
            &TailVector::new(vec![1.0, 0.5, 0.125, 0.0, 0.0]).unwrap(),
            &p,
            0.1,
            default_dt(&p),
        )
        .unwrap();
        let traj = evolve_covariance(&CovarianceMatrix::zeros(3), &ode, &p, 0.1).unwrap();
        let meta = Meta::new(&p, 0);
        let out = render(|w| write_covariance_csv(w, &traj, &meta).unwrap());
        let header = out.lines().nth(2).unwrap();
        assert_eq!(header, "t,s_1_1,s_1_2,s_1_3,s_2_2,s_2_3,s_3_3");
        let first_row = out.lines().nth(3).unwrap();
        assert_eq!(first_row.split(',').count(), 7);
    }

    #[test]
    fn jumps_csv_records_provenance_and_events() {
        let p = params(1.0, 2.0, 2);
        let stream = JumpStream::new(
            EmpiricalTail::empty(4),
            vec![JumpRecord {
                t: 0.25,
                k: 1,
                sign: 1,
            }],
            0.0,
            1.0,
        )
        .unwrap();
        let meta = Meta::new(&p, 5);
        let out = render(|w| write_jumps_csv(w, &stream, &meta).unwrap());
        assert!(out.contains("# n=4\n"));
        assert!(out.contains("# init_counts=4\n"));
        assert!(out.contains("t,k,sign\n"));
        assert!(out.ends_with("2.5000000000000000e-1,1,1\n"));
    }

    #[test]
    fn writers_are_deterministic() {
        let p = params(1.0, 2.0, 2);
        let e = ReplicaEnsemble::new(vec![vec![0.25, -1.5], vec![0.75, 2.0]]).unwrap();
        let meta = Meta::new(&p, 11);
        let a = render(|w| write_ensemble_csv(w, &e, &meta).unwrap());
        let b = render(|w| write_ensemble_csv(w, &e, &meta).unwrap());
        assert_eq!(a, b);
        assert!(a.starts_with("# alpha="));
        assert!(a.contains("replica,c1,c2"));
    }

    #[test]
    fn criteria_json_schema() {
        let cs = vec![Criterion::at_most("demo", 0.5, 1.0)];
        let out = render(|w| write_criteria_json(w, &cs).unwrap());
        let parsed: Vec<Criterion> = serde_json::from_str(&out).unwrap();
        assert_eq!(parsed.len(), 1);
        assert!(parsed[0].pass);
    }
}
