//! Lightweight CSV table access shared by the comparison and
//! correlation commands: headers resolved once, cells parsed on demand,
//! empty cells treated as missing values.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{Context, Result};
use segloop::Error;

pub struct Table {
    headers: Vec<String>,
    rows: Vec<csv::StringRecord>,
}

impl Table {
    pub fn load(path: &Path) -> Result<Table> {
        let mut reader = csv::Reader::from_path(path)
            .with_context(|| format!("opening {}", path.display()))?;
        let headers = reader
            .headers()
            .with_context(|| format!("reading header of {}", path.display()))?
            .iter()
            .map(str::to_string)
            .collect();
        let mut rows = Vec::new();
        for record in reader.records() {
            rows.push(record.with_context(|| format!("reading row in {}", path.display()))?);
        }
        Ok(Table { headers, rows })
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.headers.iter().position(|h| h == name)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    fn cell(&self, row: usize, col: usize) -> &str {
        self.rows[row].get(col).unwrap_or("")
    }

    /// Cell as a float; empty means missing, anything unparsable is an
    /// input error.
    pub fn float(&self, row: usize, col: usize) -> Result<Option<f64>> {
        let cell = self.cell(row, col);
        if cell.is_empty() {
            return Ok(None);
        }
        let value: f64 = cell.parse().map_err(|_| {
            Error::InvalidInput(format!(
                "row {row}: expected a number in column {:?}, got {cell:?}",
                self.headers[col]
            ))
        })?;
        Ok(Some(value))
    }

    /// Cell as a non-negative integer key.
    pub fn index(&self, row: usize, col: usize) -> Result<usize> {
        let cell = self.cell(row, col);
        cell.parse().map_err(|_| {
            Error::InvalidInput(format!(
                "row {row}: expected an index in column {:?}, got {cell:?}",
                self.headers[col]
            ))
            .into()
        })
    }

    /// Per-group means of one value column, keyed by up to three index
    /// columns (missing slots stay zero). Rows with an empty value cell
    /// are skipped.
    pub fn group_means(
        &self,
        key_cols: &[usize],
        value_col: usize,
    ) -> Result<BTreeMap<(usize, usize, usize), f64>> {
        let mut sums: BTreeMap<(usize, usize, usize), (f64, usize)> = BTreeMap::new();
        for row in 0..self.rows.len() {
            let value = match self.float(row, value_col)? {
                Some(v) => v,
                None => continue,
            };
            let mut key = [0usize; 3];
            for (slot, &col) in key_cols.iter().enumerate() {
                key[slot] = self.index(row, col)?;
            }
            let entry = sums.entry((key[0], key[1], key[2])).or_insert((0.0, 0));
            entry.0 += value;
            entry.1 += 1;
        }
        Ok(sums
            .into_iter()
            .map(|(k, (sum, n))| (k, sum / n as f64))
            .collect())
    }
}

/// Pairing keys for cross-file matching: a comma-separated subset of
/// the numeric record keys. `method` is rejected because it is what
/// separates the sides being compared.
pub fn parse_pair_keys(spec: &str) -> Result<Vec<String>> {
    let keys: Vec<String> = spec
        .split(',')
        .map(|k| k.trim().to_string())
        .filter(|k| !k.is_empty())
        .collect();
    if keys.is_empty() {
        return Err(Error::InvalidInput("no pairing keys given".into()).into());
    }
    if keys.len() > 3 {
        return Err(Error::InvalidInput(format!(
            "at most three pairing keys are supported, got {}",
            keys.len()
        ))
        .into());
    }
    for key in &keys {
        match key.as_str() {
            "object" | "slice" | "iteration" => {}
            "method" => {
                return Err(Error::InvalidInput(
                    "cannot pair on method: it distinguishes the compared sides".into(),
                )
                .into())
            }
            other => {
                return Err(Error::InvalidInput(format!(
                    "unknown pairing key {other:?} (expected object, slice, or iteration)"
                ))
                .into())
            }
        }
    }
    let mut seen = keys.clone();
    seen.sort();
    seen.dedup();
    if seen.len() != keys.len() {
        return Err(Error::InvalidInput("duplicate pairing keys".into()).into());
    }
    Ok(keys)
}

/// Resolves pairing keys against a table's header, naming the side in
/// error messages.
pub fn key_columns(table: &Table, keys: &[String], side: &str) -> Result<Vec<usize>> {
    keys.iter()
        .map(|key| {
            table.column(key).ok_or_else(|| {
                Error::InvalidInput(format!("{side} lacks the pairing column {key:?}")).into()
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn sample() -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "method,object,tcs,ccd").unwrap();
        writeln!(f, "iterative,0,0.5,").unwrap();
        writeln!(f, "iterative,0,0.7,0.1").unwrap();
        writeln!(f, "iterative,1,0.9,0.2").unwrap();
        f.flush().unwrap();
        f
    }

    #[test]
    fn loads_and_groups_with_missing_cells() {
        let file = sample();
        let t = Table::load(file.path()).unwrap();
        assert_eq!(t.len(), 3);
        assert!(t.column("tcs").is_some());
        assert_eq!(t.column("nope"), None);

        let keys = [t.column("object").unwrap()];
        let tcs = t.group_means(&keys, t.column("tcs").unwrap()).unwrap();
        assert_eq!(tcs.len(), 2);
        assert!((tcs[&(0, 0, 0)] - 0.6).abs() < 1e-12);
        assert!((tcs[&(1, 0, 0)] - 0.9).abs() < 1e-12);

        let ccd = t.group_means(&keys, t.column("ccd").unwrap()).unwrap();
        assert!((ccd[&(0, 0, 0)] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn pair_key_parsing_enforces_the_vocabulary() {
        assert_eq!(parse_pair_keys("object").unwrap(), vec!["object"]);
        assert_eq!(
            parse_pair_keys("object, slice").unwrap(),
            vec!["object", "slice"]
        );
        assert!(parse_pair_keys("").is_err());
        assert!(parse_pair_keys("method").is_err());
        assert!(parse_pair_keys("object,object").is_err());
        assert!(parse_pair_keys("flavor").is_err());
    }
}
