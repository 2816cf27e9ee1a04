//! Probability CSV exchanged with external classifiers:
//! `cell_col,cell_row,p_gridiron,p_organic,p_radial,p_nopattern`.

use std::collections::BTreeMap;

use super::CategoryProbs;
use crate::error::{Error, Result};
use crate::geodata::CellId;

pub const PROBS_HEADER: [&str; 6] = ["cell_col", "cell_row", "p_gridiron", "p_organic", "p_radial", "p_nopattern"];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExternalProbs {
    pub probs: BTreeMap<CellId, CategoryProbs>,
    /// Rows renormalized because their sum was off by more than 1e-6.
    pub renormalized: usize,
    /// (data line number, reason) for every rejected row.
    pub rejected: Vec<(usize, String)>,
}

/// Reads the probability CSV. Rows whose sum is within 1e-3 of one are
/// renormalized; rows with values outside `[0, 1]` or a sum further off
/// are rejected and reported.
pub fn load_external_probs(text: &str, source: &str) -> Result<ExternalProbs> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = rdr
        .headers()
        .map_err(|e| Error::Format(format!("{source}: {e}")))?
        .clone();
    let mut idx = [0usize; 6];
    for (k, name) in PROBS_HEADER.iter().enumerate() {
        idx[k] = headers.iter().position(|h| h == *name).ok_or_else(|| Error::Schema {
            file: source.to_string(),
            column: name.to_string(),
        })?;
    }
    let mut out = ExternalProbs::default();
    for (n, rec) in rdr.records().enumerate() {
        let line = n + 2;
        let rec = rec.map_err(|e| Error::Parse { line, column: 1, message: format!("{source}: {e}") })?;
        let field = |k: usize| rec.get(idx[k]).unwrap_or("");
        let (Ok(col), Ok(row)) = (field(0).parse::<i64>(), field(1).parse::<i64>()) else {
            out.rejected.push((line, "bad cell index".into()));
            continue;
        };
        let mut p = [0.0; 4];
        let mut bad = None;
        for k in 0..4 {
            match field(k + 2).parse::<f64>() {
                Ok(v) if (0.0..=1.0).contains(&v) => p[k] = v,
                Ok(v) => bad = Some(format!("{} = {v} out of range", PROBS_HEADER[k + 2])),
                Err(_) => bad = Some(format!("{} not a number", PROBS_HEADER[k + 2])),
            }
        }
        if let Some(reason) = bad {
            out.rejected.push((line, reason));
            continue;
        }
        let s: f64 = p.iter().sum();
        if (s - 1.0).abs() > 1e-3 + 1e-12 {
            out.rejected.push((line, format!("probabilities sum to {s}")));
            continue;
        }
        if (s - 1.0).abs() > 1e-6 {
            p = p.map(|v| v / s);
            out.renormalized += 1;
        }
        out.probs.insert((col, row), CategoryProbs(p));
    }
    Ok(out)
}

pub fn write_probs_csv(probs: &BTreeMap<CellId, CategoryProbs>) -> String {
    let mut s = PROBS_HEADER.join(",");
    s.push('\n');
    for ((c, r), p) in probs {
        s.push_str(&format!("{c},{r},{},{},{},{}\n", p.0[0], p.0[1], p.0[2], p.0[3]));
    }
    s
}
