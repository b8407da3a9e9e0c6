use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use lcm_lora::{Condition, Tensor};
use serde::{Deserialize, Serialize};

/// What produced a sample dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub steps: usize,
    pub omega: f64,
    pub count: usize,
    pub seed: u64,
    /// Present when the adapter is a combination.
    pub lambda1: Option<f64>,
    pub lambda2: Option<f64>,
    pub teacher_sha256: String,
    pub adapter_sha256: Option<String>,
    pub adapter_role: Option<String>,
}

pub fn sidecar_path(csv: &Path) -> PathBuf {
    csv.with_extension("json")
}

pub fn write_samples(path: &Path, x: &Tensor, cond: &[Condition], sidecar: &Sidecar) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    let mut header: Vec<String> = (0..x.cols()).map(|j| format!("x{j}")).collect();
    header.push("condition".into());
    w.write_record(&header)?;
    for (i, c) in cond.iter().enumerate() {
        let mut rec: Vec<String> = x.row(i).iter().map(|v| format!("{v:?}")).collect();
        rec.push(match c {
            Condition::Class(k) => k.to_string(),
            Condition::Null => "null".into(),
        });
        w.write_record(&rec)?;
    }
    w.flush()?;
    std::fs::write(sidecar_path(path), serde_json::to_string_pretty(sidecar)? + "\n")?;
    Ok(())
}

/// Reads the coordinate columns of a sample dump.
pub fn read_samples(path: &Path) -> Result<Tensor> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let header = r.headers()?.clone();
    let dims: Vec<usize> = header
        .iter()
        .enumerate()
        .filter(|(_, h)| h.starts_with('x'))
        .map(|(i, _)| i)
        .collect();
    if dims.is_empty() {
        bail!("{} has no x0.. columns", path.display());
    }
    let mut data = Vec::new();
    let mut rows = 0;
    for rec in r.records() {
        let rec = rec?;
        for &i in &dims {
            let field = rec.get(i).unwrap_or_default();
            data.push(field.parse::<f64>().with_context(|| format!("bad value `{field}` in {}", path.display()))?);
        }
        rows += 1;
    }
    Ok(Tensor::new(vec![rows, dims.len()], data)?)
}
