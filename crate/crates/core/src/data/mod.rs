//! Cases, preprocessing and augmentation.

mod io;
pub mod nifti;
mod phantom;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::CLASS_LABELS;
use crate::tensor::FeatureMap;

pub use io::{list_cases, load_case, save_case, CaseFormat, RawSidecar};
pub use phantom::{generate_phantom, TumorParams};

pub const MODALITY_NAMES: [&str; 4] = ["flair", "t1", "t1ce", "t2"];

/// One subject: four co-registered modalities and a label volume, all of
/// `shape` and stored C-order with depth fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Case {
    pub case_id: String,
    pub shape: [usize; 3],
    /// FLAIR, T1, T1c, T2.
    pub modalities: [Vec<f32>; 4],
    pub labels: Vec<u8>,
    /// Voxel size in millimetres.
    pub spacing: [f64; 3],
}

pub fn voxel_index(shape: [usize; 3], [h, w, d]: [usize; 3]) -> usize {
    (h * shape[1] + w) * shape[2] + d
}

pub fn is_valid_label(v: u8) -> bool {
    CLASS_LABELS.contains(&v)
}

impl Case {
    pub fn new(
        case_id: impl Into<String>,
        shape: [usize; 3],
        modalities: [Vec<f32>; 4],
        labels: Vec<u8>,
        spacing: [f64; 3],
    ) -> Result<Self> {
        let case = Self {
            case_id: case_id.into(),
            shape,
            modalities,
            labels,
            spacing,
        };
        case.validate()?;
        Ok(case)
    }

    pub fn voxels(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.voxels();
        if n == 0 {
            return Err(Error::input(format!("case {} has an empty shape", self.case_id)));
        }
        for (m, name) in self.modalities.iter().zip(MODALITY_NAMES) {
            if m.len() != n {
                return Err(Error::input(format!(
                    "case {}: {name} has {} voxels, expected {n}",
                    self.case_id,
                    m.len()
                )));
            }
        }
        if self.labels.len() != n {
            return Err(Error::input(format!(
                "case {}: labels have {} voxels, expected {n}",
                self.case_id,
                self.labels.len()
            )));
        }
        if let Some(bad) = self.labels.iter().find(|&&v| !is_valid_label(v)) {
            return Err(Error::input(format!("case {}: label value {bad}", self.case_id)));
        }
        Ok(())
    }

    /// Voxels where any modality is nonzero.
    pub fn brain_mask(&self) -> Vec<bool> {
        (0..self.voxels())
            .map(|i| self.modalities.iter().any(|m| m[i] != 0.0))
            .collect()
    }

    /// The modalities as a `4 × H × W × D` network input.
    pub fn input(&self) -> FeatureMap<f32> {
        let data = self.modalities.concat();
        let [h, w, d] = self.shape;
        FeatureMap::from_vec([4, h, w, d], data).expect("validated case")
    }

    /// Applies one voxel-to-voxel map to all five volumes. `source(out)` is
    /// the input voxel feeding output voxel `out`, or `None` for fill.
    fn remap(&self, shape: [usize; 3], source: impl Fn([usize; 3]) -> Option<usize>) -> Case {
        let n: usize = shape.iter().product();
        let mut index = Vec::with_capacity(n);
        for h in 0..shape[0] {
            for w in 0..shape[1] {
                for d in 0..shape[2] {
                    index.push(source([h, w, d]));
                }
            }
        }
        let pick_f = |v: &Vec<f32>| index.iter().map(|i| i.map_or(0.0, |i| v[i])).collect();
        Case {
            case_id: self.case_id.clone(),
            shape,
            modalities: [
                pick_f(&self.modalities[0]),
                pick_f(&self.modalities[1]),
                pick_f(&self.modalities[2]),
                pick_f(&self.modalities[3]),
            ],
            labels: index.iter().map(|i| i.map_or(0, |i| self.labels[i])).collect(),
            spacing: self.spacing,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentSpec {
    /// Reversal probability, applied to each axis independently.
    pub flip_probability: f64,
    /// Rotation angles are drawn from `[-rotation_degrees, +rotation_degrees]`.
    pub rotation_degrees: f64,
    pub crop_size: [usize; 3],
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            flip_probability: 0.5,
            rotation_degrees: 10.0,
            crop_size: [128; 3],
        }
    }
}

impl AugmentSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(Error::config(format!("flip probability {}", self.flip_probability)));
        }
        if !(self.rotation_degrees >= 0.0 && self.rotation_degrees <= 180.0) {
            return Err(Error::config(format!("rotation range {}", self.rotation_degrees)));
        }
        if self.crop_size.contains(&0) {
            return Err(Error::config("crop size must be positive"));
        }
        Ok(())
    }

    /// Crop, flip, rotate.
    pub fn apply(&self, case: &Case, rng: &mut impl Rng) -> Result<Case> {
        let c = random_crop(case, self.crop_size, rng)?;
        let c = random_flip(&c, self, rng);
        Ok(random_rotate(&c, self, rng))
    }
}

/// Z-score over `mask`; voxels outside the mask become 0.
pub fn zscore_normalize(volume: &[f32], mask: &[bool]) -> Result<Vec<f32>> {
    if volume.len() != mask.len() {
        return Err(Error::input(format!(
            "volume has {} voxels, mask {}",
            volume.len(),
            mask.len()
        )));
    }
    let inside: Vec<f64> = volume
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&v, _)| v as f64)
        .collect();
    if inside.len() < 2 {
        return Err(Error::Degenerate(format!("mask has {} voxels", inside.len())));
    }
    let mean = inside.iter().sum::<f64>() / inside.len() as f64;
    let var = inside.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / inside.len() as f64;
    if !(var > 0.0) {
        return Err(Error::Degenerate("zero variance inside the mask".into()));
    }
    let std = var.sqrt();
    Ok(volume
        .iter()
        .zip(mask)
        .map(|(&v, &m)| if m { ((v as f64 - mean) / std) as f32 } else { 0.0 })
        .collect())
}

/// Per-modality z-score over the case's brain mask.
pub fn normalize_case(case: &Case) -> Result<Case> {
    let mask = case.brain_mask();
    let mut out = case.clone();
    for (m, name) in out.modalities.iter_mut().zip(MODALITY_NAMES) {
        *m = zscore_normalize(m, &mask).map_err(|e| Error::Degenerate(format!("case {} {name}: {e}", case.case_id)))?;
    }
    Ok(out)
}

/// Summed-volume table with a one-voxel zero border.
struct VolumeSums {
    dims: [usize; 3],
    table: Vec<u32>,
}

impl VolumeSums {
    fn new(shape: [usize; 3], mask: &[bool]) -> Self {
        let dims = shape.map(|s| s + 1);
        let mut table = vec![0u32; dims.iter().product()];
        let at = |h: usize, w: usize, d: usize| (h * dims[1] + w) * dims[2] + d;
        for h in 1..dims[0] {
            for w in 1..dims[1] {
                for d in 1..dims[2] {
                    let v = mask[voxel_index(shape, [h - 1, w - 1, d - 1])] as u32;
                    table[at(h, w, d)] = v + table[at(h - 1, w, d)] + table[at(h, w - 1, d)] + table[at(h, w, d - 1)]
                        - table[at(h - 1, w - 1, d)]
                        - table[at(h - 1, w, d - 1)]
                        - table[at(h, w - 1, d - 1)]
                        + table[at(h - 1, w - 1, d - 1)];
                }
            }
        }
        Self { dims, table }
    }

    /// Mask voxels inside the box `[lo, lo + size)`.
    fn count(&self, lo: [usize; 3], size: [usize; 3]) -> u32 {
        let at = |h: usize, w: usize, d: usize| self.table[(h * self.dims[1] + w) * self.dims[2] + d];
        let [h0, w0, d0] = lo;
        let [h1, w1, d1] = [lo[0] + size[0], lo[1] + size[1], lo[2] + size[2]];
        (at(h1, w1, d1) + at(h0, w0, d1) + at(h0, w1, d0) + at(h1, w0, d0))
            - (at(h0, w1, d1) + at(h1, w0, d1) + at(h1, w1, d0) + at(h0, w0, d0))
    }
}

/// Crops all five volumes at one corner, drawn uniformly among corners whose
/// window intersects the brain mask (uniformly among all corners if the
/// brain is empty).
pub fn random_crop(case: &Case, size: [usize; 3], rng: &mut impl Rng) -> Result<Case> {
    if (0..3).any(|a| size[a] > case.shape[a] || size[a] == 0) {
        return Err(Error::input(format!(
            "crop {size:?} does not fit case {} of shape {:?}",
            case.case_id, case.shape
        )));
    }
    let ranges = [0, 1, 2].map(|a| case.shape[a] - size[a] + 1);
    let sums = VolumeSums::new(case.shape, &case.brain_mask());
    let mut valid = Vec::new();
    for h in 0..ranges[0] {
        for w in 0..ranges[1] {
            for d in 0..ranges[2] {
                if sums.count([h, w, d], size) > 0 {
                    valid.push([h, w, d]);
                }
            }
        }
    }
    let corner = if valid.is_empty() {
        ranges.map(|r| rng.random_range(0..r))
    } else {
        valid[rng.random_range(0..valid.len())]
    };
    Ok(crop_at(case, corner, size))
}

pub fn crop_at(case: &Case, corner: [usize; 3], size: [usize; 3]) -> Case {
    case.remap(size, |[h, w, d]| {
        Some(voxel_index(case.shape, [h + corner[0], w + corner[1], d + corner[2]]))
    })
}

/// Reverses the selected axes of all five volumes.
pub fn flip_axes(case: &Case, axes: [bool; 3]) -> Case {
    let s = case.shape;
    case.remap(s, |p| {
        let q: [usize; 3] = std::array::from_fn(|a| if axes[a] { s[a] - 1 - p[a] } else { p[a] });
        Some(voxel_index(s, q))
    })
}

pub fn random_flip(case: &Case, spec: &AugmentSpec, rng: &mut impl Rng) -> Case {
    let axes = [0; 3].map(|_| rng.random_bool(spec.flip_probability));
    flip_axes(case, axes)
}

/// Rotates about the volume centre by `degrees` around `axis`. Modalities are
/// sampled trilinearly, labels by nearest neighbour, and points falling
/// outside the volume are filled with 0.
pub fn rotate(case: &Case, axis: usize, degrees: f64) -> Case {
    assert!(axis < 3, "axis {axis}");
    let s = case.shape;
    let (p, q) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let (sin, cos) = degrees.to_radians().sin_cos();
    let centre = s.map(|n| (n as f64 - 1.0) / 2.0);
    // inverse map from output voxel to source position
    let source = |o: [usize; 3]| -> [f64; 3] {
        let mut src = o.map(|v| v as f64);
        let (a, b) = (o[p] as f64 - centre[p], o[q] as f64 - centre[q]);
        src[p] = cos * a + sin * b + centre[p];
        src[q] = -sin * a + cos * b + centre[q];
        src
    };
    let inside = |x: [f64; 3]| (0..3).all(|a| x[a] >= -1e-9 && x[a] <= s[a] as f64 - 1.0 + 1e-9);

    let n = case.voxels();
    let mut modalities: [Vec<f32>; 4] = std::array::from_fn(|_| vec![0.0; n]);
    let mut labels = vec![0u8; n];
    for h in 0..s[0] {
        for w in 0..s[1] {
            for d in 0..s[2] {
                let o = [h, w, d];
                let x = source(o);
                if !inside(x) {
                    continue;
                }
                let i = voxel_index(s, o);
                let near = x.map(|v| v.round().max(0.0) as usize);
                labels[i] = case.labels[voxel_index(s, std::array::from_fn(|a| near[a].min(s[a] - 1)))];
                let lo: [usize; 3] = std::array::from_fn(|a| (x[a].max(0.0).floor() as usize).min(s[a] - 1));
                let hi: [usize; 3] = std::array::from_fn(|a| (lo[a] + 1).min(s[a] - 1));
                let t: [f64; 3] = std::array::from_fn(|a| (x[a] - lo[a] as f64).clamp(0.0, 1.0));
                for (m, out) in case.modalities.iter().zip(modalities.iter_mut()) {
                    let mut acc = 0.0f64;
                    for corner in 0..8 {
                        let mut weight = 1.0;
                        let mut at = [0; 3];
                        for a in 0..3 {
                            if corner >> a & 1 == 1 {
                                weight *= t[a];
                                at[a] = hi[a];
                            } else {
                                weight *= 1.0 - t[a];
                                at[a] = lo[a];
                            }
                        }
                        if weight != 0.0 {
                            acc += weight * m[voxel_index(s, at)] as f64;
                        }
                    }
                    out[i] = acc as f32;
                }
            }
        }
    }
    Case {
        case_id: case.case_id.clone(),
        shape: s,
        modalities,
        labels,
        spacing: case.spacing,
    }
}

/// One angle in the configured range about one uniformly chosen axis.
pub fn random_rotate(case: &Case, spec: &AugmentSpec, rng: &mut impl Rng) -> Case {
    let axis = rng.random_range(0..3);
    let r = spec.rotation_degrees;
    let degrees = if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
    if degrees == 0.0 {
        return case.clone();
    }
    rotate(case, axis, degrees)
}

/// Seed for one case in one epoch, derived from the run seed.
pub fn item_seed(seed: u64, case_index: usize, epoch: usize) -> u64 {
    let mut z = seed ^ (case_index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (epoch as u64).rotate_left(32);
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp_case(shape: [usize; 3]) -> Case {
        let n = shape.iter().product();
        let m = |k: f32| (0..n).map(|i| 1.0 + k + i as f32).collect::<Vec<f32>>();
        let labels = (0..n).map(|i| CLASS_LABELS[i % 4]).collect();
        Case::new("ramp", shape, [m(0.0), m(1.0), m(2.0), m(3.0)], labels, [1.0; 3]).unwrap()
    }

    #[test]
    fn zscore_two_points() {
        let out = zscore_normalize(&[1.0, 3.0, 7.0], &[true, true, false]).unwrap();
        assert_eq!(out, vec![-1.0, 1.0, 0.0]);
        assert!(matches!(
            zscore_normalize(&[2.0, 2.0], &[true, true]),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn zscore_is_idempotent() {
        let v = [-1.0f32, 1.0, -1.0, 1.0];
        let out = zscore_normalize(&v, &[true; 4]).unwrap();
        for (a, b) in v.iter().zip(&out) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn full_crop_is_identity() {
        let c = ramp_case([4, 5, 6]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(random_crop(&c, [4, 5, 6], &mut rng).unwrap(), c);
        assert!(random_crop(&c, [5, 5, 6], &mut rng).is_err());
    }

    #[test]
    fn crop_windows_touch_the_brain() {
        let mut c = ramp_case([12, 12, 12]);
        for m in c.modalities.iter_mut() {
            m.iter_mut().for_each(|v| *v = 0.0);
            m[voxel_index([12; 3], [11, 0, 5])] = 1.0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let crop = random_crop(&c, [4, 4, 4], &mut rng).unwrap();
            assert!(crop.brain_mask().iter().any(|&b| b));
        }
    }

    #[test]
    fn flip_is_an_involution() {
        let c = ramp_case([3, 4, 5]);
        let f = flip_axes(&c, [true, true, true]);
        assert_ne!(f, c);
        assert_eq!(flip_axes(&f, [true, true, true]), c);
        assert_eq!(flip_axes(&c, [false; 3]), c);
        assert_eq!(f.modalities[0][0], c.modalities[0][c.voxels() - 1]);
    }

    #[test]
    fn zero_rotation_is_identity() {
        let c = ramp_case([5, 6, 7]);
        for axis in 0..3 {
            let r = rotate(&c, axis, 0.0);
            assert_eq!(r.labels, c.labels);
            for (a, b) in r.modalities.iter().zip(&c.modalities) {
                assert!(a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-6 * y.abs()));
            }
        }
    }

    #[test]
    fn quarter_turn_moves_voxels() {
        let c = ramp_case([5, 5, 1]);
        let r = rotate(&c, 2, 90.0);
        // source of output (h, w) is (w, 4 - h) up to the sign convention
        for h in 0..5 {
            for w in 0..5 {
                let got = r.modalities[0][voxel_index([5, 5, 1], [h, w, 0])];
                let want = c.modalities[0][voxel_index([5, 5, 1], [4 - w, h, 0])];
                let alt = c.modalities[0][voxel_index([5, 5, 1], [w, 4 - h, 0])];
                assert!((got - want).abs() < 1e-4 || (got - alt).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn item_seeds_differ() {
        assert_ne!(item_seed(1, 0, 0), item_seed(1, 1, 0));
        assert_ne!(item_seed(1, 0, 0), item_seed(1, 0, 1));
        assert_eq!(item_seed(7, 3, 2), item_seed(7, 3, 2));
    }
}
