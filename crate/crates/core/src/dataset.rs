use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, ForgeError, Result};

/// Rows of `(A, X, y)` with a binary protected attribute and binary target.
///
/// `column_names` holds the protected column and the `m` feature columns in
/// their on-disk order; `protected_index` is the protected column's position
/// in that list. The target column name is kept separately.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularDataset {
    pub a: Vec<u8>,
    pub x: Array2<f64>,
    pub y: Vec<u8>,
    pub protected_index: usize,
    pub column_names: Vec<String>,
    pub target_name: String,
}

impl TabularDataset {
    /// Builds a dataset with the default `A,x1..xm,y` layout.
    pub fn new(a: Vec<u8>, x: Array2<f64>, y: Vec<u8>) -> Result<Self> {
        let mut names = vec!["A".to_string()];
        names.extend((1..=x.ncols()).map(|j| format!("x{j}")));
        let ds = TabularDataset {
            a,
            x,
            y,
            protected_index: 0,
            column_names: names,
            target_name: "y".into(),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn with_names(mut self, column_names: Vec<String>, protected_index: usize, target: &str) -> Result<Self> {
        self.column_names = column_names;
        self.protected_index = protected_index;
        self.target_name = target.to_string();
        self.validate()?;
        Ok(self)
    }

    pub fn n_rows(&self) -> usize {
        self.a.len()
    }

    pub fn n_features(&self) -> usize {
        self.x.ncols()
    }

    pub fn protected_name(&self) -> &str {
        &self.column_names[self.protected_index]
    }

    pub fn feature_names(&self) -> Vec<&str> {
        self.column_names
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != self.protected_index)
            .map(|(_, s)| s.as_str())
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        ensure_len(self.a.len(), self.x.nrows())?;
        ensure_len(self.y.len(), self.x.nrows())?;
        if self.column_names.len() != self.x.ncols() + 1 {
            return Err(ForgeError::Schema(format!(
                "{} column names for {} features plus the protected column",
                self.column_names.len(),
                self.x.ncols()
            )));
        }
        if self.protected_index >= self.column_names.len() {
            return Err(ForgeError::Schema("protected index out of range".into()));
        }
        if self.a.iter().chain(&self.y).any(|&v| v > 1) {
            return Err(ForgeError::OutOfRange("binary column holds a value other than 0/1".into()));
        }
        Ok(())
    }

    /// Selects rows by index, preserving the given order.
    pub fn select_rows(&self, rows: &[usize]) -> TabularDataset {
        TabularDataset {
            a: rows.iter().map(|&r| self.a[r]).collect(),
            x: self.x.select(Axis(0), rows),
            y: rows.iter().map(|&r| self.y[r]).collect(),
            protected_index: self.protected_index,
            column_names: self.column_names.clone(),
            target_name: self.target_name.clone(),
        }
    }

    /// Writes a header row followed by one line per sample, protected column
    /// in place, target last.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<&str> = self.column_names.iter().map(String::as_str).collect();
        header.push(&self.target_name);
        w.write_record(&header)?;
        let mut record = Vec::with_capacity(header.len());
        for i in 0..self.n_rows() {
            record.clear();
            let mut f = 0;
            for c in 0..self.column_names.len() {
                if c == self.protected_index {
                    record.push(self.a[i].to_string());
                } else {
                    record.push(self.x[[i, f]].to_string());
                    f += 1;
                }
            }
            record.push(self.y[i].to_string());
            w.write_record(&record)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    /// Reads the layout produced by [`TabularDataset::write_csv`]: every
    /// column numeric, target last, protected column chosen by name.
    pub fn read_csv<R: Read>(reader: R, protected: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        if header.len() < 2 {
            return Err(ForgeError::Schema("need at least a protected and a target column".into()));
        }
        let protected_index = header
            .iter()
            .position(|h| h == protected)
            .ok_or_else(|| ForgeError::Schema(format!("protected column `{protected}` not found")))?;
        if protected_index == header.len() - 1 {
            return Err(ForgeError::Schema("protected column cannot be the target".into()));
        }
        let m = header.len() - 2;
        let (mut a, mut y, mut flat) = (Vec::new(), Vec::new(), Vec::new());
        for rec in r.records() {
            let rec = rec?;
            for (c, field) in rec.iter().enumerate() {
                let v: f64 = field
                    .trim()
                    .parse()
                    .map_err(|_| ForgeError::Schema(format!("non-numeric value `{field}` in `{}`", header[c])))?;
                if c == protected_index {
                    a.push(binary(v, &header[c])?);
                } else if c == header.len() - 1 {
                    y.push(binary(v, &header[c])?);
                } else {
                    flat.push(v);
                }
            }
        }
        let x = Array2::from_shape_vec((a.len(), m), flat)
            .map_err(|e| ForgeError::Dimension(e.to_string()))?;
        let target = header[header.len() - 1].clone();
        let names = header[..header.len() - 1].to_vec();
        TabularDataset { a, x, y, protected_index, column_names: names, target_name: target }.validated()
    }

    pub fn load_csv(path: &Path, protected: &str) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?, protected)
    }

    fn validated(self) -> Result<Self> {
        self.validate()?;
        Ok(self)
    }
}

fn binary(v: f64, column: &str) -> Result<u8> {
    if v == 0.0 {
        Ok(0)
    } else if v == 1.0 {
        Ok(1)
    } else {
        Err(ForgeError::OutOfRange(format!("`{column}` must be 0/1, found {v}")))
    }
}

/// True when both 0 and 1 occur.
pub fn has_both_classes(v: &[u8]) -> bool {
    v.contains(&0) && v.contains(&1)
}
