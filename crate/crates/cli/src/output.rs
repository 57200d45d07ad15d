//! Artifact writers. Every file carries the same provenance record.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::{json, Map, Value};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Serialize)]
pub struct Provenance {
    pub command: String,
    pub config_sha256: String,
    pub seed: u64,
    pub version: &'static str,
}

pub struct Artifacts {
    dir: PathBuf,
    pub provenance: Provenance,
}

/// Formats with 17 significant digits.
pub fn num(v: f64) -> String {
    format!("{v:.16e}")
}

impl Artifacts {
    pub fn new(dir: &Path, provenance: Provenance) -> Result<Self> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            provenance,
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn header(&self, extra: Value) -> Value {
        let mut m = match serde_json::to_value(&self.provenance).expect("provenance serialises") {
            Value::Object(m) => m,
            _ => Map::new(),
        };
        if let Value::Object(e) = extra {
            m.extend(e);
        }
        Value::Object(m)
    }

    fn create(&self, name: &str) -> Result<BufWriter<File>> {
        let path = self.path(name);
        let f = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        Ok(BufWriter::new(f))
    }

    /// CSV with a `#`-prefixed JSON header line, then column names, then rows.
    pub fn csv(&self, name: &str, extra: Value, columns: &[String], rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
        let mut w = self.create(name)?;
        writeln!(w, "# {}", self.header(extra))?;
        writeln!(w, "{}", columns.join(","))?;
        for r in rows {
            writeln!(w, "{}", r.join(","))?;
        }
        w.flush()?;
        Ok(())
    }

    /// CSV whose body comes from `body`.
    pub fn csv_with(&self, name: &str, extra: Value, body: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> Result<()> {
        let mut w = self.create(name)?;
        writeln!(w, "# {}", self.header(extra))?;
        body(&mut w)?;
        w.flush()?;
        Ok(())
    }

    /// Pretty JSON with the provenance record under `provenance`.
    pub fn json(&self, name: &str, body: impl Serialize) -> Result<()> {
        let mut v = serde_json::to_value(body)?;
        if let Value::Object(m) = &mut v {
            m.insert("provenance".into(), json!(self.provenance));
        }
        let mut w = self.create(name)?;
        serde_json::to_writer_pretty(&mut w, &v)?;
        writeln!(w)?;
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seventeen_digits_round_trip() {
        for v in [0.1, 1.0 / 3.0, -2.0f64.sqrt(), 6.02214076e23, 5e-324, f64::MAX] {
            let s = num(v);
            assert_eq!(s.parse::<f64>().unwrap(), v, "{s}");
            let mantissa = s.split('e').next().unwrap().trim_start_matches('-');
            assert_eq!(mantissa.chars().filter(|c| c.is_ascii_digit()).count(), 17);
        }
    }
}
