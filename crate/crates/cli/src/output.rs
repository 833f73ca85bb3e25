//! Result files: CSV with `#` provenance lines, or JSON with a provenance object.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::config::Format;
use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Provenance {
    pub command: String,
    pub config_sha256: String,
    pub seed: u64,
    pub version: String,
}

impl Provenance {
    pub fn new(command: &str, canonical_config: &str, seed: u64) -> Self {
        Provenance {
            command: command.to_string(),
            config_sha256: hex::encode(Sha256::digest(canonical_config.as_bytes())),
            seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    fn comment_lines(&self) -> String {
        format!(
            "# qswitch {} {}\n# config_sha256: {}\n# seed: {}\n",
            self.version, self.command, self.config_sha256, self.seed
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Num(f64),
    Int(i64),
    Text(String),
}

impl Cell {
    fn csv(&self) -> String {
        match self {
            Cell::Num(x) => x.to_string(),
            Cell::Int(i) => i.to_string(),
            Cell::Text(s) => s.clone(),
        }
    }

    fn json(&self) -> Value {
        match self {
            Cell::Num(x) => json!(x),
            Cell::Int(i) => json!(i),
            Cell::Text(s) => json!(s),
        }
    }
}

impl From<f64> for Cell {
    fn from(x: f64) -> Self {
        Cell::Num(x)
    }
}

impl From<usize> for Cell {
    fn from(x: usize) -> Self {
        Cell::Int(x as i64)
    }
}

impl From<&str> for Cell {
    fn from(s: &str) -> Self {
        Cell::Text(s.to_string())
    }
}

/// Column-named rows written as CSV or as a JSON array of objects.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub columns: Vec<&'static str>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(columns: &[&'static str]) -> Self {
        Table { columns: columns.to_vec(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }
}

pub struct Emitter {
    dir: PathBuf,
    format: Format,
    provenance: Provenance,
    written: Vec<PathBuf>,
}

impl Emitter {
    pub fn new(dir: &Path, format: Format, provenance: Provenance) -> Result<Self, CliError> {
        fs::create_dir_all(dir)?;
        Ok(Emitter { dir: dir.to_path_buf(), format, provenance, written: Vec::new() })
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn written(&self) -> &[PathBuf] {
        &self.written
    }

    fn save(&mut self, name: &str, body: String) -> Result<(), CliError> {
        let path = self.dir.join(name);
        fs::write(&path, body)?;
        self.written.push(path);
        Ok(())
    }

    /// Writes `stem.csv` or `stem.json` depending on the output format.
    pub fn table(&mut self, stem: &str, table: &Table) -> Result<(), CliError> {
        match self.format {
            Format::Csv => {
                let mut body = self.provenance.comment_lines();
                body.push_str(&table.columns.join(","));
                body.push('\n');
                for row in &table.rows {
                    let line: Vec<String> = row.iter().map(Cell::csv).collect();
                    body.push_str(&line.join(","));
                    body.push('\n');
                }
                self.save(&format!("{stem}.csv"), body)
            }
            Format::Json => {
                let rows: Vec<Value> = table
                    .rows
                    .iter()
                    .map(|r| {
                        let m: Map<String, Value> =
                            table.columns.iter().zip(r).map(|(c, v)| (c.to_string(), v.json())).collect();
                        Value::Object(m)
                    })
                    .collect();
                self.json(stem, &rows)
            }
        }
    }

    /// CSV text produced elsewhere, with provenance lines prepended.
    pub fn raw_csv(&mut self, stem: &str, csv: &str) -> Result<(), CliError> {
        let body = self.provenance.comment_lines() + csv;
        self.save(&format!("{stem}.csv"), body)
    }

    /// Structured summary as `stem.json`, always JSON.
    pub fn json<T: Serialize>(&mut self, stem: &str, data: &T) -> Result<(), CliError> {
        let value = json!({ "provenance": self.provenance, "data": data });
        let mut body = serde_json::to_string_pretty(&value).map_err(|e| CliError::Other(e.to_string()))?;
        body.push('\n');
        self.save(&format!("{stem}.json"), body)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn emitter(dir: &Path, format: Format) -> Emitter {
        Emitter::new(dir, format, Provenance::new("sweep", "a = 1\n", 3)).unwrap()
    }

    fn table() -> Table {
        let mut t = Table::new(&["x", "label"]);
        t.push(vec![0.5.into(), "a".into()]);
        t.push(vec![2usize.into(), "b".into()]);
        t
    }

    #[test]
    fn hash_is_sha256_of_config_text() {
        let p = Provenance::new("fit", "", 0);
        assert_eq!(p.config_sha256, "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    }

    #[test]
    fn csv_carries_provenance_comments() {
        let dir = tempfile::tempdir().unwrap();
        let mut e = emitter(dir.path(), Format::Csv);
        e.table("t", &table()).unwrap();
        let text = fs::read_to_string(dir.path().join("t.csv")).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert!(lines[0].starts_with("# qswitch ") && lines[0].ends_with(" sweep"));
        assert!(lines[1].starts_with("# config_sha256: "));
        assert_eq!(lines[2], "# seed: 3");
        assert_eq!(&lines[3..], ["x,label", "0.5,a", "2,b"]);
        assert_eq!(e.written(), [dir.path().join("t.csv")]);
    }

    #[test]
    fn json_tables_are_arrays_of_objects() {
        let dir = tempfile::tempdir().unwrap();
        emitter(dir.path(), Format::Json).table("t", &table()).unwrap();
        let v: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("t.json")).unwrap()).unwrap();
        assert_eq!(v["provenance"]["seed"], 3);
        assert_eq!(v["data"][1]["x"], 2);
        assert_eq!(v["data"][0]["label"], "a");
    }
}
