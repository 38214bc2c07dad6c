//! Discrete candidate tables loaded from CSV (`x0..x{d-1}, y`).

use std::collections::HashMap;
use std::path::Path;

use super::{table_variant, ObjectiveVariant};
use crate::error::{Error, Result};

fn key(x: &[f64]) -> Vec<u64> {
    // +0.0 and -0.0 name the same candidate
    x.iter().map(|v| if *v == 0.0 { 0 } else { v.to_bits() }).collect()
}

#[derive(Debug, Clone)]
pub struct CandidateTable {
    values: HashMap<Vec<u64>, f64>,
    max: f64,
}

impl CandidateTable {
    pub fn lookup(&self, x: &[f64]) -> Result<f64> {
        self.values.get(&key(x)).copied().ok_or_else(|| Error::NotACandidate(x.to_vec()))
    }

    pub fn max_value(&self) -> f64 {
        self.max
    }
}

fn format_err(row: usize, message: impl Into<String>) -> Error {
    Error::Format { row, message: message.into() }
}

/// Reads a candidate table. Row numbers in errors count the header as row 1.
pub fn load_discrete_candidates(path: impl AsRef<Path>) -> Result<ObjectiveVariant> {
    let path = path.as_ref();
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers = rdr.headers().map_err(|e| format_err(1, e.to_string()))?.clone();
    let names: Vec<&str> = headers.iter().collect();
    let Some(y_col) = names.iter().position(|h| *h == "y") else {
        return Err(format_err(1, "missing column y"));
    };
    let mut x_cols = Vec::new();
    for d in 0.. {
        match names.iter().position(|h| *h == format!("x{d}")) {
            Some(c) => x_cols.push(c),
            None => break,
        }
    }
    if x_cols.is_empty() {
        return Err(format_err(1, "missing feature columns x0.."));
    }
    if names.len() != x_cols.len() + 1 {
        return Err(format_err(1, format!("unexpected columns in header {names:?}")));
    }

    let mut candidates = Vec::new();
    let mut values: HashMap<Vec<u64>, f64> = HashMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| format_err(row, e.to_string()))?;
        if rec.len() != names.len() {
            return Err(format_err(row, format!("expected {} cells, found {}", names.len(), rec.len())));
        }
        let parse = |c: usize| -> Result<f64> {
            let cell = &rec[c];
            cell.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| format_err(row, format!("non-numeric cell {cell:?} in column {}", names[c])))
        };
        let x: Vec<f64> = x_cols.iter().map(|c| parse(*c)).collect::<Result<_>>()?;
        let y = parse(y_col)?;
        match values.get(&key(&x)) {
            Some(prev) if *prev != y => {
                return Err(format_err(row, format!("duplicate candidate {x:?} with conflicting values {prev} and {y}")));
            }
            Some(_) => {}
            None => {
                values.insert(key(&x), y);
                candidates.push(x);
            }
        }
    }
    if candidates.len() < 2 {
        return Err(format_err(candidates.len() + 1, "need at least 2 candidate rows"));
    }
    let max = values.values().copied().fold(f64::NEG_INFINITY, f64::max);
    let id = format!(
        "discrete_table-{}",
        path.file_stem().map_or_else(|| "table".into(), |s| s.to_string_lossy().into_owned())
    );
    Ok(table_variant(id, candidates, CandidateTable { values, max }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::Builder::new().suffix(".csv").tempfile().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn three_rows() {
        let f = write("x0,x1,y\n0.1,0.2,1\n0.3,0.4,5\n-0.5,0.6,2\n");
        let v = load_discrete_candidates(f.path()).unwrap();
        assert_eq!(v.f_star(), 5.0);
        assert_eq!(v.dim(), 2);
        assert_eq!(v.evaluate(&[0.3, 0.4]).unwrap(), 5.0);
        assert!(matches!(v.evaluate_unchecked(&[0.3, 0.5]), Err(Error::NotACandidate(_))));
        assert!(matches!(v.evaluate(&[0.3, 0.5]), Err(Error::DomainViolation(_))));
    }

    #[test]
    fn malformed_rows_report_row_number() {
        let f = write("x0,y\n0.1,1\nabc,2\n");
        assert!(matches!(load_discrete_candidates(f.path()), Err(Error::Format { row: 3, .. })));
        let f = write("x0,y\n0.1,1\n0.1,2\n");
        assert!(matches!(load_discrete_candidates(f.path()), Err(Error::Format { row: 3, .. })));
        let f = write("x0,y\n0.1,1\n");
        assert!(matches!(load_discrete_candidates(f.path()), Err(Error::Format { .. })));
        let f = write("a,b\n0.1,1\n0.2,1\n");
        assert!(matches!(load_discrete_candidates(f.path()), Err(Error::Format { row: 1, .. })));
    }

    #[test]
    fn consistent_duplicates_collapse() {
        let f = write("x0,y\n0.1,1\n0.1,1\n0.2,3\n");
        let v = load_discrete_candidates(f.path()).unwrap();
        match v.domain() {
            crate::domain::Domain::Discrete(c) => assert_eq!(c.len(), 2),
            _ => unreachable!(),
        }
    }
}
