//! Schema-tagged CSV tables: a `# schema: ...` line, a header, then rows.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{CradleError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CsvTable {
    pub schema: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn new(schema: &str, header: Vec<String>) -> Self {
        Self {
            schema: schema.to_string(),
            header,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) -> Result<()> {
        if row.len() != self.header.len() {
            return Err(CradleError::Format(format!(
                "row has {} fields, header has {}",
                row.len(),
                self.header.len()
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(file, "{}", self.schema)?;
        {
            let mut w = csv::Writer::from_writer(&mut file);
            w.write_record(&self.header).map_err(csv_error)?;
            for row in &self.rows {
                w.write_record(row).map_err(csv_error)?;
            }
            w.flush()?;
        }
        file.flush()?;
        Ok(())
    }

    /// Reads a table whose first line must equal `schema`.
    pub fn read(path: &Path, schema: &str) -> Result<Self> {
        let mut reader = BufReader::new(std::fs::File::open(path)?);
        let mut first = String::new();
        reader.read_line(&mut first)?;
        if first.trim_end() != schema {
            return Err(CradleError::Format(format!(
                "{}: expected schema line `{schema}`, found `{}`",
                path.display(),
                first.trim_end()
            )));
        }
        let mut r = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(reader);
        let header = r
            .headers()
            .map_err(csv_error)?
            .iter()
            .map(str::to_string)
            .collect();
        let mut table = Self::new(schema, header);
        for rec in r.records() {
            let rec = rec.map_err(csv_error)?;
            table.push(rec.iter().map(str::to_string).collect())?;
        }
        Ok(table)
    }

    pub fn column_index(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CradleError::Format(format!("no column `{name}`")))
    }

    /// Numeric column; empty cells read as `None`.
    pub fn column(&self, name: &str) -> Result<Vec<Option<f64>>> {
        let k = self.column_index(name)?;
        self.rows
            .iter()
            .map(|row| {
                let cell = row[k].trim();
                if cell.is_empty() {
                    Ok(None)
                } else {
                    cell.parse()
                        .map(Some)
                        .map_err(|e| CradleError::Format(format!("column `{name}`: {e}")))
                }
            })
            .collect()
    }

    /// Numeric column without gaps.
    pub fn dense_column(&self, name: &str) -> Result<Vec<f64>> {
        self.column(name)?
            .into_iter()
            .map(|v| {
                v.ok_or_else(|| CradleError::Format(format!("column `{name}` has empty cells")))
            })
            .collect()
    }
}

fn csv_error(e: csv::Error) -> CradleError {
    CradleError::Format(e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_with_gaps() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let mut t = CsvTable::new("# schema: test v1", vec!["a".into(), "b".into()]);
        t.push(vec!["1.5".into(), "".into()]).unwrap();
        t.push(vec!["2".into(), "-3e-4".into()]).unwrap();
        assert!(t.push(vec!["1".into()]).is_err());
        t.write(&path).unwrap();
        let back = CsvTable::read(&path, "# schema: test v1").unwrap();
        assert_eq!(back, t);
        assert_eq!(back.column("b").unwrap(), vec![None, Some(-3e-4)]);
        assert_eq!(back.dense_column("a").unwrap(), vec![1.5, 2.0]);
        assert!(back.dense_column("b").is_err());
        assert!(CsvTable::read(&path, "# schema: other v1").is_err());
    }
}
