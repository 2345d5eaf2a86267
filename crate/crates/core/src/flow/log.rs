//! Trajectory CSV: `t, loss, phi`, then `v_norm_k` per head, `align_k_j`
//! (`⟨V_k, V_j^⋆⟩`) per head and feature, `s_k_j` (score of head `k` at the
//! true position of feature `j`), and `renorm_correction`.
//!
//! Floats are written with 17 significant digits so a parse reproduces them
//! exactly.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::frob_inner;

use super::{factorization_loss, FlowState, GroundTruth};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrajectoryLog {
    header: Vec<String>,
    rows: Vec<Vec<f64>>,
}

/// Float formatting shared by every CSV this crate writes.
pub fn format_float(x: f64) -> String {
    format!("{x:.16e}")
}

impl TrajectoryLog {
    pub fn new(heads: usize, features: usize) -> Self {
        let mut header = vec!["t".to_string(), "loss".into(), "phi".into()];
        header.extend((0..heads).map(|k| format!("v_norm_{}", k + 1)));
        for k in 0..heads {
            header.extend((0..features).map(|j| format!("align_{}_{}", k + 1, j + 1)));
        }
        for k in 0..heads {
            header.extend((0..features).map(|j| format!("s_{}_{}", k + 1, j + 1)));
        }
        header.push("renorm_correction".into());
        Self {
            header,
            rows: Vec::new(),
        }
    }

    pub fn header(&self) -> &[String] {
        &self.header
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// Column by name.
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.header.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }

    /// Appends one row; `phi` is supplied by the caller since each system has
    /// its own Lyapunov function.
    pub fn record(&mut self, t: f64, state: &FlowState, gt: &GroundTruth, phi: f64, correction: f64) -> Result<()> {
        let (h, f) = (state.h(), gt.h());
        if self.header.len() != 4 + h + 2 * h * f {
            return Err(Error::dim("state does not match the log layout"));
        }
        let mut row = Vec::with_capacity(self.header.len());
        row.push(t);
        row.push(factorization_loss(state, gt)?);
        row.push(phi);
        row.extend(state.v.iter().map(|v| v.norm()));
        for v in &state.v {
            row.extend((0..f).map(|j| frob_inner(v, gt.direction(j))));
        }
        for s in &state.s {
            row.extend((0..f).map(|j| s[gt.position(j)]));
        }
        row.push(correction);
        self.rows.push(row);
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(out);
        let io = |e: csv::Error| Error::Numeric(format!("csv write failed: {e}"));
        w.write_record(&self.header).map_err(io)?;
        for row in &self.rows {
            w.write_record(row.iter().map(|x| format_float(*x))).map_err(io)?;
        }
        w.flush()
            .map_err(|e| Error::Numeric(format!("csv flush failed: {e}")))?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    pub fn read_csv<R: std::io::Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let bad = |e: &dyn std::fmt::Display| Error::config(format!("malformed trajectory csv: {e}"));
        let header = r
            .headers()
            .map_err(|e| bad(&e))?
            .iter()
            .map(String::from)
            .collect::<Vec<_>>();
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| bad(&e))?;
            rows.push(
                rec.iter()
                    .map(|x| x.parse::<f64>().map_err(|e| bad(&e)))
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        Ok(Self { header, rows })
    }
}
