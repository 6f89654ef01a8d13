use std::fs;
use std::io::Write;
use std::path::PathBuf;

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::config::{Format, Settings};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize)]
pub struct Meta {
    pub schema_version: u32,
    pub command: String,
    pub config_hash: String,
    pub version: String,
    pub config: Settings,
}

/// A column-oriented table with a name, written as `<name>.csv` or `<name>.json`.
pub struct Table {
    pub name: String,
    pub columns: Vec<&'static str>,
    pub rows: Vec<Vec<Value>>,
}

impl Table {
    pub fn new(name: impl Into<String>, columns: &[&'static str]) -> Self {
        Table { name: name.into(), columns: columns.to_vec(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<Value>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    fn records(&self) -> Vec<Value> {
        self.rows
            .iter()
            .map(|r| {
                let m: Map<String, Value> = self.columns.iter().map(|c| c.to_string()).zip(r.iter().cloned()).collect();
                Value::Object(m)
            })
            .collect()
    }
}

fn cell(v: &Value) -> String {
    match v {
        Value::Null => String::new(),
        Value::String(s) => s.clone(),
        Value::Number(n) => match n.as_f64() {
            Some(f) if n.is_f64() => format!("{f:e}"),
            _ => n.to_string(),
        },
        other => other.to_string(),
    }
}

/// `f64` as JSON; non-finite values become `null`.
pub fn num(x: f64) -> Value {
    if x.is_finite() {
        json!(x)
    } else {
        Value::Null
    }
}

pub struct Output {
    pub dir: PathBuf,
    pub format: Format,
    pub meta: Meta,
    pub written: Vec<PathBuf>,
}

impl Output {
    pub fn new(command: &str, settings: &Settings) -> Result<Output> {
        fs::create_dir_all(&settings.out).with_context(|| format!("creating {}", settings.out.display()))?;
        Ok(Output {
            dir: settings.out.clone(),
            format: settings.format,
            meta: Meta {
                schema_version: SCHEMA_VERSION,
                command: command.into(),
                config_hash: settings.hash(command),
                version: env!("CARGO_PKG_VERSION").into(),
                config: settings.clone(),
            },
            written: Vec::new(),
        })
    }

    pub fn table(&mut self, t: &Table) -> Result<()> {
        match self.format {
            Format::Csv => {
                let path = self.dir.join(format!("{}.csv", t.name));
                let mut f = fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
                writeln!(
                    f,
                    "# pmlab schema_version={} command={} config_hash={} version={}",
                    self.meta.schema_version, self.meta.command, self.meta.config_hash, self.meta.version
                )?;
                let mut w = csv::Writer::from_writer(f);
                w.write_record(&t.columns)?;
                for r in &t.rows {
                    w.write_record(r.iter().map(cell))?;
                }
                w.flush()?;
                self.written.push(path);
            }
            Format::Json => {
                let body = json!({ "meta": self.meta, "columns": t.columns, "rows": t.records() });
                self.write_json_file(&t.name, &body)?;
            }
        }
        Ok(())
    }

    /// Structured results; always JSON, with the metadata block.
    pub fn json(&mut self, name: &str, data: &impl Serialize) -> Result<()> {
        let body = json!({ "meta": self.meta, "data": data });
        self.write_json_file(name, &body)
    }

    fn write_json_file(&mut self, name: &str, body: &Value) -> Result<()> {
        let path = self.dir.join(format!("{name}.json"));
        let text = serde_json::to_string_pretty(body)?;
        fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
        self.written.push(path);
        Ok(())
    }
}
