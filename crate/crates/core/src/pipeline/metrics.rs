use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde_json::{json, Map, Value};

use super::PipelineError;

/// Append-only JSON-lines metric stream, one record per step or evaluation.
#[derive(Debug)]
pub struct MetricsLog {
    run_id: String,
    lines: Vec<String>,
    file: Option<BufWriter<File>>,
}

impl MetricsLog {
    pub fn new(run_id: &str, path: Option<&Path>) -> Result<Self, PipelineError> {
        let file = match path {
            Some(p) => {
                if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                    std::fs::create_dir_all(dir)?;
                }
                Some(BufWriter::new(File::create(p)?))
            }
            None => None,
        };
        Ok(Self { run_id: run_id.to_string(), lines: Vec::new(), file })
    }

    pub fn run_id(&self) -> &str {
        &self.run_id
    }

    pub fn record(&mut self, kind: &str, step: usize, values: &[(String, f64)]) -> Result<(), PipelineError> {
        let values: Map<String, Value> = values.iter().map(|(k, v)| (k.clone(), json!(v))).collect();
        let line = json!({ "run_id": self.run_id, "kind": kind, "step": step, "values": values }).to_string();
        if let Some(f) = &mut self.file {
            writeln!(f, "{line}")?;
        }
        self.lines.push(line);
        Ok(())
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }

    pub fn finish(mut self) -> Result<Vec<String>, PipelineError> {
        if let Some(f) = &mut self.file {
            f.flush()?;
        }
        Ok(self.lines)
    }
}
