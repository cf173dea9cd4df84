//! Results table across run directories.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde_json::Value;

pub const HEADER: &str = "label,wmiou,miou_seg,mrec,mprec,f1,miou_clu";

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub label: String,
    pub cells: [String; 6],
}

/// Number text of `value[path...]`, or an empty cell when the field is absent.
fn cell(value: &Value, path: &[&str]) -> Result<String> {
    let mut v = value;
    for key in path {
        match v.get(key) {
            Some(next) => v = next,
            None => return Ok(String::new()),
        }
    }
    match v {
        Value::Number(n) => Ok(n.to_string()),
        Value::Null => Ok(String::new()),
        other => bail!("field {} is not a number: {other}", path.join(".")),
    }
}

/// Reads `metrics.json` of one run directory.
pub fn read_row(run: &Path) -> Result<Row> {
    let path = run.join("metrics.json");
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let value: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let label = match value.get("label").and_then(Value::as_str) {
        Some(l) => l.to_string(),
        None => run
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .ok_or_else(|| anyhow!("{} has no label", path.display()))?,
    };
    if value.get("seg").is_none() {
        bail!("{} has no seg block", path.display());
    }
    Ok(Row {
        label,
        cells: [
            cell(&value, &["seg", "wmiou"])?,
            cell(&value, &["seg", "miou"])?,
            cell(&value, &["seg", "mrec"])?,
            cell(&value, &["seg", "mprec"])?,
            cell(&value, &["seg", "f1"])?,
            cell(&value, &["clu", "miou"])?,
        ],
    })
}

/// CSV table with one row per run, sorted by experiment label (then by directory for equal labels).
pub fn render(runs: &[PathBuf]) -> Result<String> {
    if runs.is_empty() {
        bail!("no run directories given");
    }
    let mut rows: Vec<(Row, &PathBuf)> = runs.iter().map(|r| Ok((read_row(r)?, r))).collect::<Result<_>>()?;
    rows.sort_by(|a, b| a.0.label.cmp(&b.0.label).then_with(|| a.1.cmp(b.1)));
    let mut out = format!("{HEADER}\n");
    for (row, _) in rows {
        out.push_str(&row.label);
        for c in &row.cells {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
    }
    Ok(out)
}
