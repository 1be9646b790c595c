//! Numeric CSV tables. Cells use shortest round-trip float formatting and
//! NaN is written as the literal `nan`.

use std::path::Path;

use crate::error::{AppError, AppResult};

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

pub fn format_cell(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else {
        x.to_string()
    }
}

impl Table {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Self { header: header.into_iter().map(Into::into).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        assert_eq!(row.len(), self.header.len(), "row width must match the header");
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let c = self.header.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[c]).collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        w.write_record(&self.header).expect("in-memory write");
        for r in &self.rows {
            w.write_record(r.iter().map(|&x| format_cell(x))).expect("in-memory write");
        }
        w.into_inner().expect("in-memory flush")
    }

    pub fn write(&self, path: &Path) -> AppResult<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| AppError::io(path, e))
    }

    pub fn read(path: &Path) -> AppResult<Table> {
        let mut rd = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
        let header: Vec<String> = rd.headers().map_err(|e| csv_error(path, e))?.iter().map(String::from).collect();
        let mut rows = Vec::new();
        for rec in rd.records() {
            let rec = rec.map_err(|e| csv_error(path, e))?;
            let offset = rec.position().map_or(0, |p| p.byte());
            let row = rec
                .iter()
                .map(|c| if c == "nan" { Ok(f64::NAN) } else { c.parse::<f64>() })
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| AppError::parse(path, offset, e.to_string()))?;
            rows.push(row);
        }
        Ok(Table { header, rows })
    }
}

fn csv_error(path: &Path, e: csv::Error) -> AppError {
    let offset = e.position().map(|p| p.byte());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => AppError::io(path, io),
        kind => AppError::Parse { path: path.to_path_buf(), offset, message: format!("{kind:?}") },
    }
}
