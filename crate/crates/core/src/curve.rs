//! Per-epoch learning curves and their CSV form.

use std::fmt::Write as _;
use std::path::Path;

use crate::{Error, Result};

/// Rows of `(epoch, values)` with a fixed column set.
#[derive(Debug, Clone, PartialEq)]
pub struct LearningCurve {
    columns: Vec<String>,
    rows: Vec<(usize, Vec<f64>)>,
}

impl LearningCurve {
    pub fn new<I, S>(columns: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            columns: columns.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    /// Appends a row; epochs must increase strictly and values be finite.
    pub fn push(&mut self, epoch: usize, values: impl IntoIterator<Item = f64>) -> Result<()> {
        let values: Vec<f64> = values.into_iter().collect();
        if values.len() != self.columns.len() {
            return Err(Error::dims("learning curve row", self.columns.len(), values.len()));
        }
        if self.rows.last().is_some_and(|(last, _)| *last >= epoch) {
            return Err(Error::InvalidArgument(format!("epoch {epoch} is not increasing")));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("learning curve value"));
        }
        self.rows.push((epoch, values));
        Ok(())
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn rows(&self) -> &[(usize, Vec<f64>)] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// All values of one column in epoch order.
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let idx = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|(_, v)| v[idx]).collect())
    }

    /// Header `epoch,<columns...>`, one line per row. Floats use Rust's
    /// shortest round-trip formatting, so output is reproducible.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch");
        for c in &self.columns {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for (epoch, values) in &self.rows {
            write!(out, "{epoch}").unwrap();
            for v in values {
                write!(out, ",{v}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(Error::at_path(path))
    }
}
