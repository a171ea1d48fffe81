//! CSV tables with JSON sidecars, and atomic output.
//!
//! Every data file `name.csv` has its metadata next to it in `name.json`. Angles in
//! files are degrees; the library works in radians.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use polcomp::lcvr::{CurvePoint, SweepPoint};
use polcomp::polarimetry::ScanSample;
use polcomp::{Curve, Scan, Sweep};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub const SCAN_HEADER: [&str; 2] = ["angle_deg", "voltage_v"];
pub const SWEEP_HEADER: [&str; 3] = ["drive_voltage_rms_v", "mean_pd_voltage_v", "pd_voltage_sem_v"];
pub const CURVE_HEADER: [&str; 3] = ["drive_voltage_rms_v", "retardance_rad", "retardance_error_rad"];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScanMeta {
    pub background_voltage_v: f64,
    pub offset_alpha_deg: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepMeta {
    pub background_voltage_v: f64,
    pub background_sem_v: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurveMeta {
    pub wavelength_nm: f64,
    pub voltage_step_v: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<String>,
}

/// `name.csv` → `name.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Writes through a temporary file in the target directory and renames it into
/// place, so a failed command never leaves a partial file behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut tmp = tempfile::NamedTempFile::new_in(&dir)
        .with_context(|| format!("creating temporary file in {}", dir.display()))?;
    tmp.write_all(bytes)?;
    tmp.persist(path)
        .map_err(|e| anyhow!(e.error))
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn to_json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(value)?;
    out.push(b'\n');
    Ok(out)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("{}: invalid JSON", path.display()))
}

fn read_sidecar<T: DeserializeOwned>(data: &Path) -> Result<T> {
    let side = sidecar_path(data);
    if !side.exists() {
        bail!("{}: missing metadata sidecar {}", data.display(), side.display());
    }
    read_json(&side)
}

/// One data row with its 1-based line number.
struct Row {
    line: u64,
    fields: Vec<String>,
}

fn read_rows(path: &Path, header: &[&str]) -> Result<Vec<Row>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let mut records = reader.records();
    let first = records
        .next()
        .ok_or_else(|| {
            anyhow!(
                "{}: empty file, expected header '{}'",
                path.display(),
                header.join(",")
            )
        })?
        .with_context(|| format!("{}: line 1", path.display()))?;
    let found: Vec<&str> = first.iter().collect();
    if found != header {
        bail!(
            "{}: line 1: expected header '{}', found '{}'",
            path.display(),
            header.join(","),
            found.join(",")
        );
    }
    let mut rows = Vec::new();
    for rec in records {
        let rec = rec.with_context(|| format!("{}: malformed CSV", path.display()))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        if rec.len() != header.len() {
            bail!(
                "{}: line {line}: expected {} columns, found {}",
                path.display(),
                header.len(),
                rec.len()
            );
        }
        rows.push(Row {
            line,
            fields: rec.iter().map(str::to_owned).collect(),
        });
    }
    Ok(rows)
}

fn number(path: &Path, row: &Row, header: &[&str], col: usize) -> Result<f64> {
    let text = &row.fields[col];
    text.parse::<f64>().ok().filter(|x| x.is_finite()).ok_or_else(|| {
        anyhow!(
            "{}: line {}, column {}: invalid number '{text}'",
            path.display(),
            row.line,
            header[col]
        )
    })
}

fn optional_number(path: &Path, row: &Row, header: &[&str], col: usize) -> Result<Option<f64>> {
    if row.fields[col].is_empty() {
        Ok(None)
    } else {
        number(path, row, header, col).map(Some)
    }
}

fn csv_bytes(header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.into_inner().map_err(|e| anyhow!(e.to_string()))
}

pub fn read_scan(path: &Path) -> Result<Scan> {
    let meta: ScanMeta = read_sidecar(path)?;
    let rows = read_rows(path, &SCAN_HEADER)?;
    let samples = rows
        .iter()
        .map(|r| {
            Ok(ScanSample {
                angle_measured: number(path, r, &SCAN_HEADER, 0)?.to_radians(),
                detector_voltage: number(path, r, &SCAN_HEADER, 1)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Scan::new(
        samples,
        meta.background_voltage_v,
        meta.offset_alpha_deg.to_radians(),
    )
    .with_context(|| format!("{}", path.display()))
}

pub fn write_scan(path: &Path, scan: &Scan, manifest: &str) -> Result<()> {
    let rows = scan.samples().iter().map(|s| {
        vec![
            s.angle_measured.to_degrees().to_string(),
            s.detector_voltage.to_string(),
        ]
    });
    let meta = ScanMeta {
        background_voltage_v: scan.background_voltage(),
        offset_alpha_deg: scan.offset_alpha().to_degrees(),
        manifest: Some(manifest.to_owned()),
    };
    write_atomic(path, &csv_bytes(&SCAN_HEADER, rows)?)?;
    write_atomic(&sidecar_path(path), &to_json_bytes(&meta)?)
}

pub fn read_sweep(path: &Path) -> Result<Sweep> {
    let meta: SweepMeta = read_sidecar(path)?;
    let rows = read_rows(path, &SWEEP_HEADER)?;
    let points = rows
        .iter()
        .map(|r| {
            Ok(SweepPoint {
                drive_voltage_rms: number(path, r, &SWEEP_HEADER, 0)?,
                mean_pd_voltage: number(path, r, &SWEEP_HEADER, 1)?,
                pd_voltage_sem: number(path, r, &SWEEP_HEADER, 2)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Sweep::new(points, meta.background_voltage_v, meta.background_sem_v)
        .with_context(|| format!("{}", path.display()))
}

pub fn write_sweep(path: &Path, sweep: &Sweep, manifest: &str) -> Result<()> {
    let rows = sweep.points().iter().map(|p| {
        vec![
            p.drive_voltage_rms.to_string(),
            p.mean_pd_voltage.to_string(),
            p.pd_voltage_sem.to_string(),
        ]
    });
    let meta = SweepMeta {
        background_voltage_v: sweep.background_voltage(),
        background_sem_v: sweep.background_sem(),
        manifest: Some(manifest.to_owned()),
    };
    write_atomic(path, &csv_bytes(&SWEEP_HEADER, rows)?)?;
    write_atomic(&sidecar_path(path), &to_json_bytes(&meta)?)
}

pub fn read_curve(path: &Path) -> Result<Curve> {
    let meta: CurveMeta = read_sidecar(path)?;
    let rows = read_rows(path, &CURVE_HEADER)?;
    let points = rows
        .iter()
        .map(|r| {
            Ok(CurvePoint {
                drive_voltage_rms: number(path, r, &CURVE_HEADER, 0)?,
                retardance: number(path, r, &CURVE_HEADER, 1)?,
                retardance_error: optional_number(path, r, &CURVE_HEADER, 2)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Curve::new(points, meta.voltage_step_v).with_context(|| format!("{}", path.display()))
}

pub fn write_curve(path: &Path, curve: &Curve, wavelength_nm: f64, manifest: &str) -> Result<()> {
    let rows = curve.points().iter().map(|p| {
        vec![
            p.drive_voltage_rms.to_string(),
            p.retardance.to_string(),
            p.retardance_error.map(|e| e.to_string()).unwrap_or_default(),
        ]
    });
    let meta = CurveMeta {
        wavelength_nm,
        voltage_step_v: curve.voltage_step(),
        manifest: Some(manifest.to_owned()),
    };
    write_atomic(path, &csv_bytes(&CURVE_HEADER, rows)?)?;
    write_atomic(&sidecar_path(path), &to_json_bytes(&meta)?)
}
