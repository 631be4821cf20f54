//! On-disk case layouts.
//!
//! Raw: `<id>.json` sidecar next to `<id>_{flair,t1,t1ce,t2}.f32` and
//! `<id>_seg.u8`, little-endian, C order with depth fastest.
//!
//! BraTS: a directory `<id>/` holding `<id>_{flair,t1,t1ce,t2,seg}.nii.gz`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::nifti::{self, DataType, Volume};
use super::{is_valid_label, Case, MODALITY_NAMES};
use crate::error::{Error, Result};
use crate::network::CLASS_LABELS;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseFormat {
    Raw,
    Brats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawSidecar {
    pub case_id: String,
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub dtype: String,
    pub label_dtype: String,
    pub byte_order: String,
    /// Modality name to file name, relative to the sidecar.
    pub modalities: Vec<(String, String)>,
    pub labels: String,
    pub label_values: Vec<u8>,
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::ingestion(path, "missing file"),
        _ => Error::io(path, e),
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn check_labels(path: &Path, labels: &[u8]) -> Result<()> {
    match labels.iter().find(|&&v| !is_valid_label(v)) {
        Some(v) => Err(Error::ingestion(
            path,
            format!("label value {v} outside {CLASS_LABELS:?}"),
        )),
        None => Ok(()),
    }
}

fn load_raw(sidecar: &Path) -> Result<Case> {
    let text = std::fs::read_to_string(sidecar).map_err(|e| Error::io(sidecar, e))?;
    let meta: RawSidecar =
        serde_json::from_str(&text).map_err(|e| Error::ingestion(sidecar, format!("sidecar: {e}")))?;
    if meta.dtype != "float32" || meta.label_dtype != "uint8" || meta.byte_order != "little" {
        return Err(Error::ingestion(
            sidecar,
            format!(
                "unsupported encoding {} / {} / {}",
                meta.dtype, meta.label_dtype, meta.byte_order
            ),
        ));
    }
    let dir = sidecar.parent().unwrap_or(Path::new("."));
    let n: usize = meta.shape.iter().product();
    let mut modalities: [Vec<f32>; 4] = Default::default();
    for (slot, name) in modalities.iter_mut().zip(MODALITY_NAMES) {
        let file = meta
            .modalities
            .iter()
            .find(|(m, _)| m == name)
            .map(|(_, f)| dir.join(f))
            .ok_or_else(|| Error::ingestion(sidecar, format!("no {name} entry")))?;
        let bytes = read_file(&file)?;
        if bytes.len() != 4 * n {
            return Err(Error::ingestion(
                &file,
                format!("{} bytes, expected {}", bytes.len(), 4 * n),
            ));
        }
        *slot = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
    }
    let seg = dir.join(&meta.labels);
    let labels = read_file(&seg)?;
    if labels.len() != n {
        return Err(Error::ingestion(&seg, format!("{} bytes, expected {n}", labels.len())));
    }
    check_labels(&seg, &labels)?;
    Case::new(meta.case_id, meta.shape, modalities, labels, meta.spacing)
}

fn save_raw(case: &Case, dir: &Path) -> Result<PathBuf> {
    let id = &case.case_id;
    let mut modalities = Vec::new();
    for (m, name) in case.modalities.iter().zip(MODALITY_NAMES) {
        let file = format!("{id}_{name}.f32");
        let bytes: Vec<u8> = m.iter().flat_map(|v| v.to_le_bytes()).collect();
        write_file(&dir.join(&file), &bytes)?;
        modalities.push((name.to_string(), file));
    }
    let labels = format!("{id}_seg.u8");
    write_file(&dir.join(&labels), &case.labels)?;
    let meta = RawSidecar {
        case_id: id.clone(),
        shape: case.shape,
        spacing: case.spacing,
        dtype: "float32".into(),
        label_dtype: "uint8".into(),
        byte_order: "little".into(),
        modalities,
        labels,
        label_values: CLASS_LABELS.to_vec(),
    };
    let sidecar = dir.join(format!("{id}.json"));
    write_file(&sidecar, serde_json::to_string_pretty(&meta)?.as_bytes())?;
    Ok(sidecar)
}

fn brats_file(dir: &Path, id: &str, suffix: &str) -> PathBuf {
    dir.join(format!("{id}_{suffix}.nii.gz"))
}

fn load_brats(dir: &Path) -> Result<Case> {
    let id = dir
        .file_name()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::ingestion(dir, "directory has no usable name"))?
        .to_string();
    let open = |suffix: &str| -> Result<(PathBuf, Volume)> {
        let path = brats_file(dir, &id, suffix);
        if !path.exists() {
            return Err(Error::ingestion(&path, "missing file"));
        }
        let v = nifti::read(&path)?;
        Ok((path, v))
    };
    let (seg_path, seg) = open("seg")?;
    let mut modalities: [Vec<f32>; 4] = Default::default();
    for (slot, name) in modalities.iter_mut().zip(MODALITY_NAMES) {
        let (path, v) = open(name)?;
        if v.shape != seg.shape {
            return Err(Error::ingestion(
                &path,
                format!("shape {:?} differs from seg {:?}", v.shape, seg.shape),
            ));
        }
        *slot = v.data.iter().map(|&x| x as f32).collect();
    }
    let mut labels = Vec::with_capacity(seg.data.len());
    for &v in &seg.data {
        let r = v.round();
        if (v - r).abs() > 1e-3 || !(0.0..=255.0).contains(&r) {
            return Err(Error::ingestion(&seg_path, format!("non-integer label {v}")));
        }
        labels.push(r as u8);
    }
    check_labels(&seg_path, &labels)?;
    Case::new(id, seg.shape, modalities, labels, seg.spacing)
}

fn save_brats(case: &Case, root: &Path) -> Result<PathBuf> {
    let dir = root.join(&case.case_id);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let volume = |data: Vec<f64>| Volume {
        shape: case.shape,
        spacing: case.spacing,
        data,
    };
    for (m, name) in case.modalities.iter().zip(MODALITY_NAMES) {
        let v = volume(m.iter().map(|&x| x as f64).collect());
        nifti::write(&brats_file(&dir, &case.case_id, name), &v, DataType::F32)?;
    }
    let v = volume(case.labels.iter().map(|&x| x as f64).collect());
    nifti::write(&brats_file(&dir, &case.case_id, "seg"), &v, DataType::U8)?;
    Ok(dir)
}

/// Loads a raw sidecar (`.json`) or a BraTS case directory.
pub fn load_case(path: &Path) -> Result<Case> {
    if path.is_dir() {
        load_brats(path)
    } else if path.extension().is_some_and(|e| e == "json") {
        load_raw(path)
    } else if !path.exists() {
        Err(Error::ingestion(path, "no such case"))
    } else {
        Err(Error::ingestion(
            path,
            "expected a .json sidecar or a BraTS case directory",
        ))
    }
}

/// Writes `case` under `dir` and returns the path [`load_case`] accepts.
pub fn save_case(case: &Case, dir: &Path, format: CaseFormat) -> Result<PathBuf> {
    case.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    match format {
        CaseFormat::Raw => save_raw(case, dir),
        CaseFormat::Brats => save_brats(case, dir),
    }
}

/// Case paths in a dataset directory (raw sidecars and BraTS case
/// directories), sorted by name. A path to a single case is returned as is.
pub fn list_cases(root: &Path) -> Result<Vec<PathBuf>> {
    if root.is_file() {
        return Ok(vec![root.to_path_buf()]);
    }
    let entries = std::fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(root, e))?.path();
        if path.is_dir() {
            let id = path.file_name().and_then(|s| s.to_str()).unwrap_or_default();
            if brats_file(&path, id, "flair").exists() {
                out.push(path);
            }
        } else if path.extension().is_some_and(|e| e == "json") {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}
