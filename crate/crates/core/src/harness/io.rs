use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::{EpochMetrics, OodRow, Result, RunManifest, SweepRow};
use crate::model::{write_atomic, ModelParams};

pub const MANIFEST_SCHEMA: &str = "posattn.manifest.v1";

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| e.into_error())?;
    write_atomic(path, &bytes)?;
    Ok(())
}

fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Columns `epoch,train_mse,val_mse`.
pub fn write_metrics_csv(path: &Path, rows: &[EpochMetrics]) -> Result<()> {
    write_csv(path, rows)
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<EpochMetrics>> {
    read_csv(path)
}

/// Columns `scale,mse,n_samples,seed`.
pub fn write_ood_csv(path: &Path, rows: &[OodRow]) -> Result<()> {
    write_csv(path, rows)
}

pub fn read_ood_csv(path: &Path) -> Result<Vec<OodRow>> {
    read_csv(path)
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    write_csv(path, rows)
}

pub fn read_sweep_csv(path: &Path) -> Result<Vec<SweepRow>> {
    read_csv(path)
}

/// Writes `checkpoint.json`, `metrics.csv`, `ood.csv` (when present) and
/// finally `manifest.json` into `dir`.
pub fn write_run(dir: &Path, manifest: &mut RunManifest, best: &ModelParams) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    best.save(&dir.join("checkpoint.json"))?;
    manifest.checkpoint = Some("checkpoint.json".into());
    write_metrics_csv(&dir.join("metrics.csv"), &manifest.metrics)?;
    if !manifest.ood.is_empty() {
        write_ood_csv(&dir.join("ood.csv"), &manifest.ood)?;
    }
    let text = serde_json::to_string_pretty(manifest)?;
    write_atomic(&dir.join("manifest.json"), text.as_bytes())?;
    Ok(())
}
