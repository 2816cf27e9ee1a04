//! Per-cell tabular sources (`cell_col,cell_row,value`).

use std::collections::BTreeMap;

use super::CellId;
use crate::error::{Error, Result};

pub type CellValues = BTreeMap<CellId, f64>;

pub fn parse_cell_values(text: &str, source: &str) -> Result<CellValues> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = rdr.headers().map_err(|e| csv_err(e, source))?.clone();
    let idx = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::Schema {
            file: source.to_string(),
            column: name.to_string(),
        })
    };
    let (ic, ir, iv) = (idx("cell_col")?, idx("cell_row")?, idx("value")?);
    let mut out = BTreeMap::new();
    for (n, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(e, source))?;
        let bad = |what: &str| Error::Parse {
            line: n + 2,
            column: 1,
            message: format!("{source}: bad {what}"),
        };
        let col: i64 = rec.get(ic).and_then(|s| s.parse().ok()).ok_or_else(|| bad("cell_col"))?;
        let row: i64 = rec.get(ir).and_then(|s| s.parse().ok()).ok_or_else(|| bad("cell_row"))?;
        let v: f64 = rec.get(iv).and_then(|s| s.parse().ok()).ok_or_else(|| bad("value"))?;
        out.insert((col, row), v);
    }
    Ok(out)
}

fn csv_err(e: csv::Error, source: &str) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    Error::Parse { line, column: 1, message: format!("{source}: {e}") }
}
