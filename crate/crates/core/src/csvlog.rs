//! CSV emission and parsing for run logs. Every file starts with a schema
//! comment line (`# omcrl-csv v1 <name>`) followed by the header row, so
//! plots survive column evolution. Floats are written in Rust's shortest
//! round-trip form: identical runs produce byte-identical files.

use crate::error::{Error, Result};
use std::io::Write;
use std::path::Path;

pub struct CsvWriter {
    out: Box<dyn Write>,
    columns: usize,
}

impl CsvWriter {
    pub fn create(path: &Path, schema: &str, columns: &[&str]) -> Result<Self> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let file = std::fs::File::create(path)?;
        Self::new(Box::new(file), schema, columns)
    }

    pub fn new(mut out: Box<dyn Write>, schema: &str, columns: &[&str]) -> Result<Self> {
        writeln!(out, "# omcrl-csv v1 {schema}")?;
        writeln!(out, "{}", columns.join(","))?;
        Ok(CsvWriter { out, columns: columns.len() })
    }

    pub fn row(&mut self, fields: &[String]) -> Result<()> {
        if fields.len() != self.columns {
            return Err(Error::contract(format!(
                "csv row has {} fields, header has {}",
                fields.len(),
                self.columns
            )));
        }
        writeln!(self.out, "{}", fields.join(","))?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

/// Shortest round-trip float field.
pub fn f(v: f64) -> String {
    format!("{v}")
}

/// Optional value rendered with the zero-success table marker.
pub fn opt(v: Option<f64>) -> String {
    match v {
        Some(v) => f(v),
        None => "--".to_string(),
    }
}

#[derive(Debug, Clone)]
pub struct CsvFile {
    pub schema: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::format(format!("read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let schema_line = lines.next().ok_or_else(|| Error::format("empty csv"))?;
        let schema = schema_line
            .strip_prefix("# omcrl-csv v1 ")
            .ok_or_else(|| Error::format("missing schema comment line"))?
            .to_string();
        let header = lines.next().ok_or_else(|| Error::format("missing header row"))?;
        let columns: Vec<String> = header.split(',').map(str::to_string).collect();
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<String> = line.split(',').map(str::to_string).collect();
            if fields.len() != columns.len() {
                return Err(Error::format(format!(
                    "row {} has {} fields, header has {}",
                    i + 3,
                    fields.len(),
                    columns.len()
                )));
            }
            rows.push(fields);
        }
        Ok(CsvFile { schema, columns, rows })
    }

    pub fn column(&self, name: &str) -> Result<Vec<f64>> {
        let idx = self
            .columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::format(format!("no column '{name}'")))?;
        self.rows
            .iter()
            .map(|r| {
                r[idx]
                    .parse::<f64>()
                    .map_err(|_| Error::format(format!("non-numeric '{}' in {name}", r[idx])))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn write_parse_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        {
            let mut w = CsvWriter::create(&path, "rl", &["step", "ret"]).unwrap();
            w.row(&[f(1.0), f(0.123456789012345)]).unwrap();
            w.row(&[f(2.0), f(-3.5e-7)]).unwrap();
            w.flush().unwrap();
        }
        let file = CsvFile::load(&path).unwrap();
        assert_eq!(file.schema, "rl");
        assert_eq!(file.columns, vec!["step", "ret"]);
        assert_eq!(file.column("ret").unwrap(), vec![0.123456789012345, -3.5e-7]);
    }

    #[test]
    fn field_count_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        let mut w = CsvWriter::create(&path, "rl", &["a", "b"]).unwrap();
        assert!(w.row(&[f(1.0)]).is_err());
    }

    #[test]
    fn identical_writes_identical_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let write = |name: &str| {
            let path = dir.path().join(name);
            let mut w = CsvWriter::create(&path, "rl", &["x"]).unwrap();
            for i in 0..50 {
                w.row(&[f(i as f64 * 0.1)]).unwrap();
            }
            w.flush().unwrap();
            std::fs::read(&path).unwrap()
        };
        assert_eq!(write("a.csv"), write("b.csv"));
    }
}
