//! Checkpoint files.
//!
//! Layout: 8-byte magic `MBDRCKPT`, `u32` version, `u64` header length, a
//! JSON header ([`CheckpointHeader`]), then every parameter as little-endian
//! `f32` in header order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Network, NetworkConfig};
use crate::tensor::{Parameterized, Real};

const MAGIC: &[u8; 8] = b"MBDRCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the data section, in values.
    pub offset: usize,
    pub frozen: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub network: NetworkConfig,
    pub epoch: usize,
    pub step: u64,
    /// Validation mean Dice at save time, if measured.
    pub val_dice: Option<f64>,
    pub tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint<T: Real>(
    net: &Network<T>,
    epoch: usize,
    step: u64,
    val_dice: Option<f64>,
    path: &Path,
) -> Result<()> {
    let mut tensors = Vec::new();
    let mut data: Vec<u8> = Vec::new();
    let mut offset = 0;
    net.visit_params(&mut |p| {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.shape.clone(),
            offset,
            frozen: p.frozen,
        });
        offset += p.len();
        data.extend(p.value.iter().flat_map(|v| (v.as_f64() as f32).to_le_bytes()));
    });
    let header = CheckpointHeader {
        network: net.cfg.clone(),
        epoch,
        step,
        val_dice,
        tensors,
    };
    let json = serde_json::to_vec(&header)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    // write then rename so a crash never leaves a half-written checkpoint
    let tmp = path.with_extension("tmp");
    let write = || -> std::io::Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        f.write_all(MAGIC)?;
        f.write_all(&VERSION.to_le_bytes())?;
        f.write_all(&(json.len() as u64).to_le_bytes())?;
        f.write_all(&json)?;
        f.write_all(&data)?;
        f.flush()
    };
    write().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<(CheckpointHeader, Vec<f32>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |why: &str| Error::Incompatible(format!("{}: {why}", path.display()));
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(bad(&format!("version {version}, expected {VERSION}")));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = 20usize
        .checked_add(len)
        .and_then(|end| bytes.get(20..end))
        .ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(body)?;
    let values: Vec<f32> = bytes[20 + len..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let total: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    if values.len() != total || !(bytes.len() - 20 - len).is_multiple_of(4) {
        return Err(bad(&format!("{} values for {total} parameters", values.len())));
    }
    Ok((header, values))
}

/// Copies checkpoint values into `net`, matching parameters by name and shape.
pub fn restore<T: Real>(net: &mut Network<T>, header: &CheckpointHeader, values: &[f32]) -> Result<()> {
    let mut err = None;
    let mut seen = 0;
    net.visit_params_mut(&mut |p| {
        if err.is_some() {
            return;
        }
        match header.tensors.iter().find(|t| t.name == p.name) {
            Some(t) if t.shape == p.shape => match values.get(t.offset..t.offset.saturating_add(p.len())) {
                Some(src) => {
                    p.value = src.iter().map(|&v| T::of(v as f64)).collect();
                    seen += 1;
                }
                None => {
                    err = Some(Error::Incompatible(format!(
                        "{} points past the end of the data",
                        p.name
                    )))
                }
            },
            Some(t) => {
                err = Some(Error::Incompatible(format!(
                    "{} has shape {:?} in the checkpoint, {:?} in the model",
                    p.name, t.shape, p.shape
                )))
            }
            None => err = Some(Error::Incompatible(format!("{} missing from the checkpoint", p.name))),
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if seen != header.tensors.len() {
        return Err(Error::Incompatible(format!(
            "checkpoint has {} tensors, model {seen}",
            header.tensors.len()
        )));
    }
    Ok(())
}

/// Builds the network recorded in the checkpoint and loads its weights.
pub fn load_checkpoint(path: &Path) -> Result<(Network<f32>, CheckpointHeader)> {
    let (header, values) = read_checkpoint(path)?;
    let mut net = Network::new(&header.network, 0)?;
    restore(&mut net, &header, &values)?;
    Ok((net, header))
}

/// Loads a checkpoint into a network built from `cfg`, failing if the two
/// disagree.
pub fn load_checkpoint_for(path: &Path, cfg: &NetworkConfig) -> Result<Network<f32>> {
    let (header, values) = read_checkpoint(path)?;
    if &header.network != cfg {
        return Err(Error::Incompatible(format!(
            "checkpoint was trained with {:?}, requested {:?}",
            header.network, cfg
        )));
    }
    let mut net = Network::new(cfg, 0)?;
    restore(&mut net, &header, &values)?;
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::WeightMode;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let cfg = NetworkConfig::desk();
        let net = Network::<f32>::new(&cfg, 11).unwrap();
        save_checkpoint(&net, 3, 42, Some(0.5), &path).unwrap();
        let (back, header) = load_checkpoint(&path).unwrap();
        assert_eq!((header.epoch, header.step, header.val_dice), (3, 42, Some(0.5)));
        let mut a = Vec::new();
        let mut b = Vec::new();
        net.visit_params(&mut |p| a.extend(p.value.clone()));
        back.visit_params(&mut |p| b.extend(p.value.clone()));
        assert_eq!(a, b);
    }

    #[test]
    fn mismatched_config_is_incompatible() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let cfg = NetworkConfig::desk();
        save_checkpoint(&Network::<f32>::new(&cfg, 1).unwrap(), 0, 0, None, &path).unwrap();
        let other = NetworkConfig {
            weight_mode: WeightMode::Disabled,
            ..cfg
        };
        assert!(matches!(
            load_checkpoint_for(&path, &other),
            Err(Error::Incompatible(_))
        ));
        let (header, values) = read_checkpoint(&path).unwrap();
        let mut net = Network::<f32>::new(&other, 0).unwrap();
        assert!(matches!(
            restore(&mut net, &header, &values),
            Err(Error::Incompatible(_))
        ));
        std::fs::write(&path, b"nonsense").unwrap();
        assert!(matches!(read_checkpoint(&path), Err(Error::Incompatible(_))));
    }

    #[test]
    fn corrupt_layout_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let cfg = NetworkConfig::desk();
        save_checkpoint(&Network::<f32>::new(&cfg, 1).unwrap(), 0, 0, None, &path).unwrap();
        let (mut header, values) = read_checkpoint(&path).unwrap();
        header.tensors[0].offset = values.len();
        let mut net = Network::<f32>::new(&cfg, 0).unwrap();
        assert!(matches!(
            restore(&mut net, &header, &values),
            Err(Error::Incompatible(_))
        ));

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[12..20].copy_from_slice(&u64::MAX.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_checkpoint(&path), Err(Error::Incompatible(_))));
    }
}
