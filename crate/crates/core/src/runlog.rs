//! JSON-lines training logs.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde_json::{Map, Value};

use crate::error::Result;

/// Collects one JSON object per event and optionally mirrors it to a file.
#[derive(Default)]
pub struct JsonLog {
    file: Option<BufWriter<File>>,
    records: Vec<Map<String, Value>>,
}

impl JsonLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn to_file(path: &Path) -> Result<Self> {
        Ok(Self {
            file: Some(BufWriter::new(File::create(path)?)),
            records: Vec::new(),
        })
    }

    pub fn record(&mut self, fields: &[(&str, Value)]) -> Result<()> {
        let obj: Map<String, Value> = fields.iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
        if let Some(f) = &mut self.file {
            serde_json::to_writer(&mut *f, &obj)?;
            f.write_all(b"\n")?;
            f.flush()?;
        }
        log::debug!("{}", Value::Object(obj.clone()));
        self.records.push(obj);
        Ok(())
    }

    pub fn records(&self) -> &[Map<String, Value>] {
        &self.records
    }

    /// Values of `key` across records that have it, in order.
    pub fn series(&self, key: &str) -> Vec<f64> {
        self.records.iter().filter_map(|r| r.get(key).and_then(Value::as_f64)).collect()
    }
}
