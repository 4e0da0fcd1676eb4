//! Flat little-endian `f64` tables with a JSON sidecar schema.
//!
//! `<name>.bin` holds `n_rows * n_cols` values row-major; `<name>.schema.json`
//! names the columns.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TABLE_LAYOUT: &str = "row-major f64 little-endian";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableSchema {
    pub layout: String,
    pub columns: Vec<String>,
    pub n_rows: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub data: Vec<f64>,
}

impl Table {
    pub fn new(columns: Vec<String>) -> Self {
        Table {
            columns,
            data: Vec::new(),
        }
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn n_rows(&self) -> usize {
        if self.columns.is_empty() {
            0
        } else {
            self.data.len() / self.columns.len()
        }
    }

    pub fn push_row(&mut self, row: &[f64]) {
        assert_eq!(row.len(), self.n_cols(), "row width");
        self.data.extend_from_slice(row);
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.n_cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.n_cols().max(1))
    }

    fn paths(dir: &Path, name: &str) -> (PathBuf, PathBuf) {
        (dir.join(format!("{name}.bin")), dir.join(format!("{name}.schema.json")))
    }

    pub fn write(&self, dir: &Path, name: &str) -> Result<()> {
        let (bin, schema) = Self::paths(dir, name);
        let mut bytes = Vec::with_capacity(self.data.len() * 8);
        for v in &self.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))?;
        let s = TableSchema {
            layout: TABLE_LAYOUT.into(),
            columns: self.columns.clone(),
            n_rows: self.n_rows(),
        };
        fs::write(&schema, serde_json::to_string_pretty(&s)?).map_err(|e| Error::io(&schema, e))?;
        Ok(())
    }

    pub fn read(dir: &Path, name: &str) -> Result<Self> {
        let (bin, schema) = Self::paths(dir, name);
        let s: TableSchema = serde_json::from_str(&fs::read_to_string(&schema).map_err(|e| Error::io(&schema, e))?)?;
        if s.layout != TABLE_LAYOUT {
            return Err(Error::Artifact(format!("unsupported table layout '{}'", s.layout)));
        }
        let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        if bytes.len() != s.n_rows * s.columns.len() * 8 {
            return Err(Error::Artifact(format!(
                "{} has {} bytes, schema expects {} rows x {} columns",
                bin.display(),
                bytes.len(),
                s.n_rows,
                s.columns.len()
            )));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Ok(Table {
            columns: s.columns,
            data,
        })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut s = self.columns.join(",");
        s.push('\n');
        for row in self.rows() {
            let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
            s.push_str(&line.join(","));
            s.push('\n');
        }
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = Table::new(vec!["a".into(), "b".into()]);
        t.push_row(&[1.0, -2.5]);
        t.push_row(&[f64::MIN_POSITIVE, 1e300]);
        t.write(dir.path(), "x").unwrap();
        assert_eq!(Table::read(dir.path(), "x").unwrap(), t);
        std::fs::write(dir.path().join("x.bin"), [0u8; 9]).unwrap();
        assert!(matches!(Table::read(dir.path(), "x"), Err(Error::Artifact(_))));
    }
}
