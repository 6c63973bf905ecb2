//! On-disk trace format for feedback-loop runs.
//!
//! A trace is a directory:
//!
//! ```text
//! manifest.json    dimensions, record count, field flags, seed, digest
//! meta.csv         method, slice, object, iteration, confidence, iou
//! attention.f32    N x H_f x W_f little-endian f32, row-major, record-major
//! masks_pred.f32   same layout (masks live at grid resolution)
//! masks_gt.f32     same layout, present only when gt_masks is flagged
//! prompts.f32      N x 6: cx, cy, x1, y1, x2, y2 in pixels
//! ```
//!
//! The format is byte-exact: a write followed by a read reproduces every
//! stored f32 bit. The method tag is a free-form string at this level so
//! that dumps from real decoders can share the format; pipeline code maps
//! its method enum to strings at the boundary.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{AttentionGrid, MaskGrid, Prompt};

pub const FORMAT_VERSION: u32 = 1;

const MANIFEST_FILE: &str = "manifest.json";
const META_FILE: &str = "meta.csv";
const ATTENTION_FILE: &str = "attention.f32";
const MASKS_PRED_FILE: &str = "masks_pred.f32";
const MASKS_GT_FILE: &str = "masks_gt.f32";
const PROMPTS_FILE: &str = "prompts.f32";

/// One decoder call: keys, the prompt that produced it, and what came
/// back. Grids live at attention (grid) resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub method: String,
    pub slice: usize,
    pub object: usize,
    pub iteration: usize,
    pub prompt: Prompt,
    pub attention: AttentionGrid,
    pub mask_pred: MaskGrid,
    pub mask_gt: Option<MaskGrid>,
    pub confidence: f64,
    pub iou: Option<f64>,
}

/// Which optional fields this trace carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldFlags {
    pub gt_masks: bool,
    pub confidences: bool,
    pub per_call_iou: bool,
    pub feature_grids: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceManifest {
    pub format_version: u32,
    /// (height, width) of attention and stored masks.
    pub grid: [usize; 2],
    /// (height, width) of the image frame prompts are expressed in.
    pub image: [usize; 2],
    pub records: u64,
    pub methods: Vec<String>,
    pub fields: FieldFlags,
    pub seed: u64,
    pub config_digest: String,
}

impl TraceManifest {
    /// Builds a manifest describing `records`, checking that the set is
    /// internally consistent (uniform dimensions, all-or-none gt masks).
    pub fn describe(
        records: &[TraceRecord],
        grid: (usize, usize),
        image: (usize, usize),
        seed: u64,
        config_digest: String,
    ) -> Result<TraceManifest> {
        let mut methods: Vec<String> = Vec::new();
        let mut with_gt = 0usize;
        let mut with_iou = 0usize;
        for (i, r) in records.iter().enumerate() {
            if (r.attention.height(), r.attention.width()) != grid
                || (r.mask_pred.height(), r.mask_pred.width()) != grid
            {
                return Err(Error::InvalidInput(format!(
                    "record {i} grids do not match manifest dimensions {}x{}",
                    grid.0, grid.1
                )));
            }
            if let Some(gt) = &r.mask_gt {
                if (gt.height(), gt.width()) != grid {
                    return Err(Error::InvalidInput(format!(
                        "record {i} gt mask does not match manifest dimensions"
                    )));
                }
                with_gt += 1;
            }
            if r.iou.is_some() {
                with_iou += 1;
            }
            if !methods.iter().any(|m| m == &r.method) {
                methods.push(r.method.clone());
            }
        }
        if with_gt != 0 && with_gt != records.len() {
            return Err(Error::InvalidInput(format!(
                "gt masks must be present on all records or none, got {with_gt} of {}",
                records.len()
            )));
        }
        Ok(TraceManifest {
            format_version: FORMAT_VERSION,
            grid: [grid.0, grid.1],
            image: [image.0, image.1],
            records: records.len() as u64,
            methods,
            fields: FieldFlags {
                gt_masks: with_gt == records.len() && !records.is_empty(),
                confidences: true,
                per_call_iou: with_iou > 0,
                feature_grids: false,
            },
            seed,
            config_digest,
        })
    }

    fn cells(&self) -> Result<u64> {
        (self.grid[0] as u64)
            .checked_mul(self.grid[1] as u64)
            .ok_or_else(|| Error::TraceValidation("grid dimensions overflow".into()))
    }

    /// Expected byte length of a grid-valued binary file.
    fn grid_file_bytes(&self) -> Result<u64> {
        self.records
            .checked_mul(self.cells()?)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::TraceValidation("record count overflows file size arithmetic".into()))
    }

    fn prompt_file_bytes(&self) -> Result<u64> {
        self.records
            .checked_mul(24)
            .ok_or_else(|| Error::TraceValidation("record count overflows file size arithmetic".into()))
    }
}

/// One problem found while validating a trace directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Finding {
    pub file: String,
    pub record: Option<usize>,
    pub message: String,
}

impl std::fmt::Display for Finding {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.record {
            Some(r) => write!(f, "{} (record {}): {}", self.file, r, self.message),
            None => write!(f, "{}: {}", self.file, self.message),
        }
    }
}

fn write_f32_file(path: &Path, values: impl Iterator<Item = f64>) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for v in values {
        out.write_all(&(v as f32).to_le_bytes())
            .map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Writes a trace directory, overwriting any previous contents of the
/// same layout. The manifest must describe exactly these records.
pub fn write_trace(records: &[TraceRecord], manifest: &TraceManifest, dir: &Path) -> Result<()> {
    if manifest.records != records.len() as u64 {
        return Err(Error::InvalidInput(format!(
            "manifest says {} records, got {}",
            manifest.records,
            records.len()
        )));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let manifest_path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::InvalidInput(format!("manifest serialization failed: {e}")))?;
    fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))?;

    let meta_path = dir.join(META_FILE);
    let mut meta = csv::Writer::from_path(&meta_path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(&meta_path, io),
        other => Error::InvalidInput(format!("meta.csv write failed: {other:?}")),
    })?;
    meta.write_record(["method", "slice", "object", "iteration", "confidence", "iou"])
        .map_err(|e| Error::InvalidInput(format!("meta.csv write failed: {e}")))?;
    for r in records {
        let iou = r.iou.map(|v| v.to_string()).unwrap_or_default();
        meta.write_record([
            r.method.as_str(),
            &r.slice.to_string(),
            &r.object.to_string(),
            &r.iteration.to_string(),
            &r.confidence.to_string(),
            &iou,
        ])
        .map_err(|e| Error::InvalidInput(format!("meta.csv write failed: {e}")))?;
    }
    meta.flush().map_err(|e| Error::io(&meta_path, e))?;

    write_f32_file(
        &dir.join(ATTENTION_FILE),
        records.iter().flat_map(|r| r.attention.values().iter().copied()),
    )?;
    write_f32_file(
        &dir.join(MASKS_PRED_FILE),
        records.iter().flat_map(|r| r.mask_pred.values().iter().copied()),
    )?;
    let gt_path = dir.join(MASKS_GT_FILE);
    if manifest.fields.gt_masks {
        write_f32_file(
            &gt_path,
            records.iter().flat_map(|r| {
                r.mask_gt
                    .as_ref()
                    .expect("manifest promised gt masks")
                    .values()
                    .iter()
                    .copied()
            }),
        )?;
    } else if gt_path.exists() {
        fs::remove_file(&gt_path).map_err(|e| Error::io(&gt_path, e))?;
    }
    write_f32_file(
        &dir.join(PROMPTS_FILE),
        records.iter().flat_map(|r| {
            [
                r.prompt.centroid.0,
                r.prompt.centroid.1,
                r.prompt.bbox.0,
                r.prompt.bbox.1,
                r.prompt.bbox.2,
                r.prompt.bbox.3,
            ]
        }),
    )?;
    Ok(())
}

fn load_manifest(dir: &Path) -> Result<TraceManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: TraceManifest = serde_json::from_str(&text)
        .map_err(|e| Error::TraceValidation(format!("{MANIFEST_FILE}: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::TraceValidation(format!(
            "{MANIFEST_FILE}: unknown format version {}",
            manifest.format_version
        )));
    }
    if manifest.grid.contains(&0) || manifest.image.contains(&0) {
        return Err(Error::TraceValidation(format!(
            "{MANIFEST_FILE}: zero grid or image dimension"
        )));
    }
    Ok(manifest)
}

/// Checks a binary file's size against the manifest before reading, so a
/// corrupt record count can never drive allocation.
fn read_f32_file(path: &Path, expected_bytes: u64) -> Result<Vec<f64>> {
    let meta = fs::metadata(path).map_err(|e| Error::io(path, e))?;
    if meta.len() != expected_bytes {
        return Err(Error::TraceValidation(format!(
            "{}: expected {} bytes, found {}",
            file_name(path),
            expected_bytes,
            meta.len()
        )));
    }
    let mut bytes = Vec::with_capacity(expected_bytes as usize);
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() as u64 != expected_bytes {
        return Err(Error::TraceValidation(format!(
            "{}: short read ({} of {} bytes)",
            file_name(path),
            bytes.len(),
            expected_bytes
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

#[derive(Debug, Deserialize)]
struct MetaRow {
    method: String,
    slice: usize,
    object: usize,
    iteration: usize,
    confidence: f64,
    iou: Option<f64>,
}

fn read_meta(dir: &Path, expected: u64) -> Result<Vec<MetaRow>> {
    let path = dir.join(META_FILE);
    let mut reader = csv::Reader::from_path(&path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(&path, io),
        other => Error::TraceValidation(format!("{META_FILE}: {other:?}")),
    })?;
    let mut rows = Vec::new();
    for (i, row) in reader.deserialize::<MetaRow>().enumerate() {
        let row = row.map_err(|e| Error::TraceValidation(format!("{META_FILE} row {i}: {e}")))?;
        rows.push(row);
    }
    if rows.len() as u64 != expected {
        return Err(Error::TraceValidation(format!(
            "{META_FILE}: manifest says {expected} records, found {} rows",
            rows.len()
        )));
    }
    Ok(rows)
}

/// Reads a trace directory back, verifying sizes, value ranges, and the
/// attention normalization contract. Stored f32 bits come back verbatim
/// (widened to f64); nothing is renormalized here.
pub fn read_trace(dir: &Path) -> Result<(Vec<TraceRecord>, TraceManifest)> {
    let manifest = load_manifest(dir)?;
    let rows = read_meta(dir, manifest.records)?;
    let cells = manifest.cells()? as usize;
    let grid_bytes = manifest.grid_file_bytes()?;
    let (gh, gw) = (manifest.grid[0], manifest.grid[1]);

    let attention = read_f32_file(&dir.join(ATTENTION_FILE), grid_bytes)?;
    let masks_pred = read_f32_file(&dir.join(MASKS_PRED_FILE), grid_bytes)?;
    let masks_gt = if manifest.fields.gt_masks {
        Some(read_f32_file(&dir.join(MASKS_GT_FILE), grid_bytes)?)
    } else {
        None
    };
    let prompts = read_f32_file(&dir.join(PROMPTS_FILE), manifest.prompt_file_bytes()?)?;

    let diag = (manifest.image[1] as f64).hypot(manifest.image[0] as f64);
    let mut records = Vec::with_capacity(rows.len());
    for (i, row) in rows.into_iter().enumerate() {
        let att = attention[i * cells..(i + 1) * cells].to_vec();
        if let Some(bad) = att.iter().position(|v| !v.is_finite()) {
            return Err(Error::TraceValidation(format!(
                "{ATTENTION_FILE} (record {i}): non-finite value at cell {bad}"
            )));
        }
        let attention = AttentionGrid::from_stored(att, gh, gw, true)
            .map_err(|e| Error::TraceValidation(format!("{ATTENTION_FILE} (record {i}): {e}")))?;
        let mask_pred = MaskGrid::new(masks_pred[i * cells..(i + 1) * cells].to_vec(), gh, gw)
            .map_err(|e| Error::TraceValidation(format!("{MASKS_PRED_FILE} (record {i}): {e}")))?;
        let mask_gt = match &masks_gt {
            Some(all) => Some(
                MaskGrid::new(all[i * cells..(i + 1) * cells].to_vec(), gh, gw)
                    .map_err(|e| Error::TraceValidation(format!("{MASKS_GT_FILE} (record {i}): {e}")))?,
            ),
            None => None,
        };
        let p = &prompts[i * 6..(i + 1) * 6];
        let prompt = Prompt::new((p[0], p[1]), (p[2], p[3], p[4], p[5]), diag)
            .map_err(|e| Error::TraceValidation(format!("{PROMPTS_FILE} (record {i}): {e}")))?;
        records.push(TraceRecord {
            method: row.method,
            slice: row.slice,
            object: row.object,
            iteration: row.iteration,
            prompt,
            attention,
            mask_pred,
            mask_gt,
            confidence: row.confidence,
            iou: row.iou,
        });
    }
    Ok((records, manifest))
}

fn check_size(dir: &Path, file: &str, expected: u64, findings: &mut Vec<Finding>) {
    let path = dir.join(file);
    match fs::metadata(&path) {
        Ok(meta) if meta.len() == expected => {}
        Ok(meta) => findings.push(Finding {
            file: file.into(),
            record: None,
            message: format!("expected {} bytes, found {}", expected, meta.len()),
        }),
        Err(e) => findings.push(Finding {
            file: file.into(),
            record: None,
            message: format!("unreadable: {e}"),
        }),
    }
}

/// Walks the whole directory and reports every violation found, rather
/// than stopping at the first. An empty report means the trace is valid.
pub fn validate_trace(dir: &Path) -> Vec<Finding> {
    let mut findings = Vec::new();
    let manifest = match load_manifest(dir) {
        Ok(m) => m,
        Err(e) => {
            findings.push(Finding {
                file: MANIFEST_FILE.into(),
                record: None,
                message: e.to_string(),
            });
            return findings;
        }
    };

    let grid_bytes = match manifest.grid_file_bytes() {
        Ok(b) => b,
        Err(e) => {
            findings.push(Finding {
                file: MANIFEST_FILE.into(),
                record: None,
                message: e.to_string(),
            });
            return findings;
        }
    };
    check_size(dir, ATTENTION_FILE, grid_bytes, &mut findings);
    check_size(dir, MASKS_PRED_FILE, grid_bytes, &mut findings);
    if manifest.fields.gt_masks {
        check_size(dir, MASKS_GT_FILE, grid_bytes, &mut findings);
    } else if dir.join(MASKS_GT_FILE).exists() {
        findings.push(Finding {
            file: MASKS_GT_FILE.into(),
            record: None,
            message: "present but manifest does not flag gt masks".into(),
        });
    }
    match manifest.prompt_file_bytes() {
        Ok(b) => check_size(dir, PROMPTS_FILE, b, &mut findings),
        Err(e) => findings.push(Finding {
            file: MANIFEST_FILE.into(),
            record: None,
            message: e.to_string(),
        }),
    }

    let mut meta_methods: Vec<String> = Vec::new();
    match read_meta(dir, manifest.records) {
        Ok(rows) => {
            for row in &rows {
                if !meta_methods.iter().any(|m| m == &row.method) {
                    meta_methods.push(row.method.clone());
                }
            }
            for m in &meta_methods {
                if !manifest.methods.contains(m) {
                    findings.push(Finding {
                        file: META_FILE.into(),
                        record: None,
                        message: format!("method '{m}' not listed in manifest"),
                    });
                }
            }
        }
        Err(e) => findings.push(Finding {
            file: META_FILE.into(),
            record: None,
            message: e.to_string(),
        }),
    }

    // Cell-level scans, only on files whose sizes already check out.
    let cells = manifest.grid[0] * manifest.grid[1];
    let scan = |file: &str, kind: &str, findings: &mut Vec<Finding>| {
        let path = dir.join(file);
        if !matches!(fs::metadata(&path).map(|m| m.len()), Ok(len) if len == grid_bytes) {
            return;
        }
        if let Ok(values) = read_f32_file(&path, grid_bytes) {
            for (i, chunk) in values.chunks_exact(cells.max(1)).enumerate() {
                if let Some(bad) = chunk.iter().position(|v| !v.is_finite()) {
                    findings.push(Finding {
                        file: file.into(),
                        record: Some(i),
                        message: format!("non-finite value at cell {bad}"),
                    });
                } else if kind == "mask" && chunk.iter().any(|v| *v < 0.0 || *v > 1.0) {
                    findings.push(Finding {
                        file: file.into(),
                        record: Some(i),
                        message: "mask value outside [0, 1]".into(),
                    });
                } else if kind == "attention" {
                    let sum: f64 = chunk.iter().sum();
                    if chunk.iter().any(|v| *v < 0.0) || (sum - 1.0).abs() > 1e-3 {
                        findings.push(Finding {
                            file: file.into(),
                            record: Some(i),
                            message: format!("not a normalized attention grid (sum {sum})"),
                        });
                    }
                }
            }
        }
    };
    scan(ATTENTION_FILE, "attention", &mut findings);
    scan(MASKS_PRED_FILE, "mask", &mut findings);
    if manifest.fields.gt_masks {
        scan(MASKS_GT_FILE, "mask", &mut findings);
    }
    findings
}

/// Convenience: the canonical per-method subdirectory of a run output.
pub fn method_dir(base: &Path, method: &str) -> PathBuf {
    base.join(method)
}
