//! Synthetic four-modality cases with nested ellipsoid tumours.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{voxel_index, Case};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TumorParams {
    /// Whole-tumour volume as a fraction of the full volume.
    pub tumor_fraction: f64,
    /// Standard deviation of the additive noise, in tissue intensity units.
    pub noise: f64,
    /// Core and necrotic radii relative to the enclosing region.
    pub core_scale: f64,
    pub necrotic_scale: f64,
}

impl Default for TumorParams {
    fn default() -> Self {
        Self {
            tumor_fraction: 0.015,
            noise: 0.05,
            core_scale: 0.6,
            necrotic_scale: 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Ellipsoid {
    centre: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    /// 1 on the surface, < 1 inside.
    fn level(&self, p: [f64; 3]) -> f64 {
        (0..3)
            .map(|a| ((p[a] - self.centre[a]) / self.radii[a]).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    fn scaled(&self, s: f64, shift: [f64; 3]) -> Self {
        Self {
            centre: std::array::from_fn(|a| self.centre[a] + shift[a] * self.radii[a]),
            radii: self.radii.map(|r| r * s),
        }
    }
}

/// Soft indicator, ~1 inside and ~0 outside with a transition a voxel or two wide.
fn soft(level: f64, radius: f64) -> f64 {
    let signed = (1.0 - level) * radius;
    1.0 / (1.0 + (-2.0 * signed).exp())
}

// tissue, edema, enhancing, necrotic intensities per modality (FLAIR, T1, T1c, T2)
const CONTRAST: [[f64; 4]; 4] = [
    [1.0, 0.9, 0.55, 0.35],
    [1.0, -0.2, -0.25, -0.55],
    [1.0, 0.05, 1.1, -0.5],
    [1.0, 0.7, 0.35, 1.0],
];

pub fn generate_phantom(seed: u64, shape: [usize; 3], params: &TumorParams) -> Result<Case> {
    if shape.iter().any(|&s| s < 32) {
        return Err(Error::input(format!(
            "phantom shape {shape:?} below 32 voxels per axis"
        )));
    }
    if !(params.tumor_fraction > 0.0 && params.tumor_fraction < 0.2) {
        return Err(Error::config(format!("tumor fraction {}", params.tumor_fraction)));
    }
    if !(params.noise >= 0.0)
        || !(0.0..1.0).contains(&params.core_scale)
        || !(0.0..1.0).contains(&params.necrotic_scale)
    {
        return Err(Error::config("invalid phantom noise or scale"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let centre = shape.map(|s| (s as f64 - 1.0) / 2.0);
    let brain = Ellipsoid {
        centre,
        radii: std::array::from_fn(|a| shape[a] as f64 * rng.random_range(0.40..0.46)),
    };

    let aspect: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.8..1.25));
    let geometric = aspect.iter().product::<f64>().cbrt();
    let volume = params.tumor_fraction * n as f64;
    let base = (3.0 * volume / (4.0 * std::f64::consts::PI)).cbrt();
    let radii = aspect.map(|a| base * a / geometric);
    // keep the edema well inside the brain
    let room: [f64; 3] = std::array::from_fn(|a| (brain.radii[a] - radii[a] * 1.2).max(0.0) * 0.6);
    let edema = Ellipsoid {
        centre: std::array::from_fn(|a| centre[a] + rng.random_range(-1.0..=1.0) * room[a]),
        radii,
    };
    let core_shift: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.15..0.15));
    let core = edema.scaled(params.core_scale, core_shift);
    let necrotic_shift: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.1..0.1) * params.core_scale);
    let necrotic = core.scaled(params.necrotic_scale, necrotic_shift);

    // slow tissue inhomogeneity, one field per modality
    let waves: [[f64; 6]; 4] = std::array::from_fn(|_| {
        std::array::from_fn(|i| {
            if i < 3 {
                rng.random_range(0.5..2.0)
            } else {
                rng.random_range(0.0..6.3)
            }
        })
    });
    let normal = Normal::new(0.0, params.noise.max(f64::MIN_POSITIVE)).expect("finite sigma");

    let mut modalities: [Vec<f32>; 4] = std::array::from_fn(|_| vec![0.0; n]);
    let mut labels = vec![0u8; n];
    for h in 0..shape[0] {
        for w in 0..shape[1] {
            for d in 0..shape[2] {
                let p = [h as f64, w as f64, d as f64];
                let b = brain.level(p);
                if b > 1.0 {
                    continue;
                }
                let i = voxel_index(shape, [h, w, d]);
                let (le, lc, ln) = (edema.level(p), core.level(p), necrotic.level(p));
                labels[i] = if ln <= 1.0 {
                    1
                } else if lc <= 1.0 {
                    4
                } else if le <= 1.0 {
                    2
                } else {
                    0
                };
                let s_edema = soft(le, edema.radii[0]);
                let s_core = soft(lc, core.radii[0]);
                let s_necrotic = soft(ln, necrotic.radii[0]);
                for (k, m) in modalities.iter_mut().enumerate() {
                    let c = CONTRAST[k];
                    let wv = waves[k];
                    let rel: [f64; 3] = std::array::from_fn(|a| p[a] / shape[a] as f64);
                    let field = 0.08
                        * ((wv[0] * rel[0] * 6.3 + wv[3]).sin()
                            + (wv[1] * rel[1] * 6.3 + wv[4]).sin()
                            + (wv[2] * rel[2] * 6.3 + wv[5]).sin())
                        / 3.0;
                    let v = c[0] + field
                        + c[1] * s_edema * (1.0 - s_core)
                        + c[2] * s_core * (1.0 - s_necrotic)
                        + c[3] * s_necrotic
                        // darker rim towards the skull
                        - 0.15 * b.powi(4);
                    let noise = if params.noise > 0.0 {
                        normal.sample(&mut rng)
                    } else {
                        0.0
                    };
                    m[i] = ((v + noise).max(0.02)) as f32;
                }
            }
        }
    }
    Case::new(format!("phantom_{seed:06}"), shape, modalities, labels, [1.0; 3])
}
