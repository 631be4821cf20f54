//! Minimal NIfTI-1 single-file reader and writer (`.nii` and `.nii.gz`).
//!
//! Only what a BraTS volume needs: 3D scalar data, voxel sizes and intensity
//! scaling. Orientation matrices are ignored on read and written as identity.

use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use super::voxel_index;
use crate::error::{Error, Result};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataType {
    U8,
    I16,
    I32,
    F32,
    F64,
    I8,
    U16,
}

impl DataType {
    fn code(self) -> i16 {
        match self {
            DataType::U8 => 2,
            DataType::I16 => 4,
            DataType::I32 => 8,
            DataType::F32 => 16,
            DataType::F64 => 64,
            DataType::I8 => 256,
            DataType::U16 => 512,
        }
    }

    fn from_code(code: i16) -> Option<Self> {
        Some(match code {
            2 => DataType::U8,
            4 => DataType::I16,
            8 => DataType::I32,
            16 => DataType::F32,
            64 => DataType::F64,
            256 => DataType::I8,
            512 => DataType::U16,
            _ => return None,
        })
    }

    fn bytes(self) -> usize {
        match self {
            DataType::U8 | DataType::I8 => 1,
            DataType::I16 | DataType::U16 => 2,
            DataType::I32 | DataType::F32 => 4,
            DataType::F64 => 8,
        }
    }
}

/// A 3D volume in C order with depth (the NIfTI z axis) fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub data: Vec<f64>,
}

struct Fields<'a> {
    bytes: &'a [u8],
    little: bool,
}

impl Fields<'_> {
    fn raw<const N: usize>(&self, at: usize) -> [u8; N] {
        let mut b: [u8; N] = self.bytes[at..at + N].try_into().expect("in bounds");
        if !self.little {
            b.reverse();
        }
        b
    }
    fn i16(&self, at: usize) -> i16 {
        i16::from_le_bytes(self.raw(at))
    }
    fn i32(&self, at: usize) -> i32 {
        i32::from_le_bytes(self.raw(at))
    }
    fn f32(&self, at: usize) -> f32 {
        f32::from_le_bytes(self.raw(at))
    }
    fn f64(&self, at: usize) -> f64 {
        f64::from_le_bytes(self.raw(at))
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::ingestion(path, format!("gzip: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

pub fn read(path: &Path) -> Result<Volume> {
    let bytes = read_bytes(path)?;
    let bad = |reason: String| Error::ingestion(path, reason);
    if bytes.len() < HEADER_SIZE {
        return Err(bad(format!("{} bytes is shorter than a NIfTI header", bytes.len())));
    }
    let little = match (
        i32::from_le_bytes(bytes[0..4].try_into().unwrap()),
        i32::from_be_bytes(bytes[0..4].try_into().unwrap()),
    ) {
        (348, _) => true,
        (_, 348) => false,
        _ => return Err(bad("not a NIfTI-1 header".into())),
    };
    if &bytes[344..347] != b"n+1" {
        return Err(bad("only single-file NIfTI-1 (n+1) is supported".into()));
    }
    let f = Fields { bytes: &bytes, little };
    let ndim = f.i16(40);
    let dims: Vec<i16> = (1..8).map(|i| f.i16(40 + 2 * i)).collect();
    if !(3..=7).contains(&ndim) || dims[..3].iter().any(|&d| d < 1) {
        return Err(bad(format!("unsupported dimensions {ndim} {dims:?}")));
    }
    if dims[3..ndim as usize].iter().any(|&d| d != 1) {
        return Err(bad(format!(
            "expected a 3D volume, got dims {:?}",
            &dims[..ndim as usize]
        )));
    }
    let shape = [dims[0] as usize, dims[1] as usize, dims[2] as usize];
    let code = f.i16(70);
    let dtype = DataType::from_code(code).ok_or_else(|| bad(format!("unsupported datatype {code}")))?;
    let spacing = [1, 2, 3].map(|i| f.f32(76 + 4 * i).abs() as f64);
    let spacing = spacing.map(|s| if s > 0.0 { s } else { 1.0 });
    let offset = f.f32(108) as usize;
    let (slope, inter) = (f.f32(112) as f64, f.f32(116) as f64);
    let n: usize = shape.iter().product();
    let need = offset.max(HEADER_SIZE) + n * dtype.bytes();
    if bytes.len() < need {
        return Err(bad(format!("truncated: {} bytes, need {need}", bytes.len())));
    }
    let body = Fields {
        bytes: &bytes[offset.max(HEADER_SIZE)..],
        little,
    };
    let value = |k: usize| -> f64 {
        let at = k * dtype.bytes();
        match dtype {
            DataType::U8 => body.bytes[at] as f64,
            DataType::I8 => body.bytes[at] as i8 as f64,
            DataType::I16 => body.i16(at) as f64,
            DataType::U16 => u16::from_le_bytes(body.raw(at)) as f64,
            DataType::I32 => body.i32(at) as f64,
            DataType::F32 => body.f32(at) as f64,
            DataType::F64 => body.f64(at),
        }
    };
    let scale = |v: f64| {
        if slope != 0.0 && slope.is_finite() {
            v * slope + inter
        } else {
            v
        }
    };
    // file order is x fastest; ours is the last axis fastest
    let mut data = vec![0.0; n];
    let mut k = 0;
    for z in 0..shape[2] {
        for y in 0..shape[1] {
            for x in 0..shape[0] {
                data[voxel_index(shape, [x, y, z])] = scale(value(k));
                k += 1;
            }
        }
    }
    Ok(Volume { shape, spacing, data })
}

/// Writes a gzip-compressed little-endian NIfTI-1 file.
pub fn write(path: &Path, volume: &Volume, dtype: DataType) -> Result<()> {
    let mut h = vec![0u8; VOX_OFFSET];
    let put = |h: &mut Vec<u8>, at: usize, b: &[u8]| h[at..at + b.len()].copy_from_slice(b);
    put(&mut h, 0, &348i32.to_le_bytes());
    let dims = [
        3i16,
        volume.shape[0] as i16,
        volume.shape[1] as i16,
        volume.shape[2] as i16,
        1,
        1,
        1,
        1,
    ];
    for (i, d) in dims.iter().enumerate() {
        put(&mut h, 40 + 2 * i, &d.to_le_bytes());
    }
    put(&mut h, 70, &dtype.code().to_le_bytes());
    put(&mut h, 72, &((dtype.bytes() * 8) as i16).to_le_bytes());
    let pixdim = [
        1.0f32,
        volume.spacing[0] as f32,
        volume.spacing[1] as f32,
        volume.spacing[2] as f32,
        0.0,
        0.0,
        0.0,
        0.0,
    ];
    for (i, p) in pixdim.iter().enumerate() {
        put(&mut h, 76 + 4 * i, &p.to_le_bytes());
    }
    put(&mut h, 108, &(VOX_OFFSET as f32).to_le_bytes());
    put(&mut h, 112, &1.0f32.to_le_bytes());
    put(&mut h, 123, &[10]); // xyzt_units: mm, s
    put(&mut h, 254, &1i16.to_le_bytes()); // sform_code: scanner
    for (row, at) in [280, 296, 312].into_iter().enumerate() {
        for col in 0..4 {
            let v = if col == row { volume.spacing[row] as f32 } else { 0.0 };
            put(&mut h, at + 4 * col, &v.to_le_bytes());
        }
    }
    put(&mut h, 344, b"n+1\0");

    let s = volume.shape;
    for z in 0..s[2] {
        for y in 0..s[1] {
            for x in 0..s[0] {
                let v = volume.data[voxel_index(s, [x, y, z])];
                match dtype {
                    DataType::U8 => h.push(v as u8),
                    DataType::I8 => h.push(v as i8 as u8),
                    DataType::I16 => h.extend((v as i16).to_le_bytes()),
                    DataType::U16 => h.extend((v as u16).to_le_bytes()),
                    DataType::I32 => h.extend((v as i32).to_le_bytes()),
                    DataType::F32 => h.extend((v as f32).to_le_bytes()),
                    DataType::F64 => h.extend(v.to_le_bytes()),
                }
            }
        }
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut gz = GzEncoder::new(std::io::BufWriter::new(file), Compression::fast());
    gz.write_all(&h).map_err(|e| Error::io(path, e))?;
    gz.finish().and_then(|mut w| w.flush()).map_err(|e| Error::io(path, e))
}
