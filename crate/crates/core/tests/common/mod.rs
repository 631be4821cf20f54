#![allow(dead_code)]

use mbdres_unet::data::voxel_index;
use mbdres_unet::tensor::{FeatureMap, Parameterized};
use rand::Rng;

pub fn random_map(rng: &mut impl Rng, shape: [usize; 4]) -> FeatureMap<f64> {
    FeatureMap::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn with_value<M: Parameterized<f64>>(m: &mut M, name: &str, i: usize, f: impl Fn(f64) -> f64) {
    m.visit_params_mut(&mut |p| {
        if p.name == name {
            p.value[i] = f(p.value[i]);
        }
    });
}

/// Largest relative error between analytic and central-difference gradients
/// over every parameter whose name satisfies `select`.
///
/// `objective(m, true)` must run forward in training mode and backward,
/// accumulating parameter gradients; `objective(m, false)` only evaluates.
pub fn param_gradient_error<M: Parameterized<f64>>(
    m: &mut M,
    select: impl Fn(&str) -> bool,
    mut objective: impl FnMut(&mut M, bool) -> f64,
) -> (f64, usize) {
    m.zero_grad();
    objective(m, true);
    let mut analytic = Vec::new();
    m.visit_params(&mut |p| {
        if select(&p.name) {
            for (i, &g) in p.grad.iter().enumerate() {
                analytic.push((p.name.clone(), i, g));
            }
        }
    });
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (name, i, a) in &analytic {
        with_value(m, name, *i, |v| v + h);
        let up = objective(m, false);
        with_value(m, name, *i, |v| v - 2.0 * h);
        let down = objective(m, false);
        with_value(m, name, *i, |v| v + h);
        let numeric = (up - down) / (2.0 * h);
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(err);
    }
    (worst, analytic.len())
}

/// Mask voxels with a 6-neighbour outside the mask or the volume.
pub fn brute_surface(mask: &[bool], shape: [usize; 3]) -> Vec<[usize; 3]> {
    let mut out = Vec::new();
    for h in 0..shape[0] {
        for w in 0..shape[1] {
            for d in 0..shape[2] {
                if !mask[voxel_index(shape, [h, w, d])] {
                    continue;
                }
                let p = [h as i64, w as i64, d as i64];
                let offsets = [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]];
                let exposed = offsets.iter().any(|o| {
                    let q = [p[0] + o[0], p[1] + o[1], p[2] + o[2]];
                    if (0..3).any(|a| q[a] < 0 || q[a] >= shape[a] as i64) {
                        return true;
                    }
                    !mask[voxel_index(shape, [q[0] as usize, q[1] as usize, q[2] as usize])]
                });
                if exposed {
                    out.push([h, w, d]);
                }
            }
        }
    }
    out
}

fn brute_directed(a: &[[usize; 3]], b: &[[usize; 3]], spacing: [f64; 3]) -> f64 {
    let mut d: Vec<f64> = a
        .iter()
        .map(|p| {
            b.iter()
                .map(|q| {
                    (0..3)
                        .map(|k| ((p[k] as f64 - q[k] as f64) * spacing[k]).powi(2))
                        .sum::<f64>()
                        .sqrt()
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    d.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let rank = 0.95 * (d.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    d[lo] + (d[hi] - d[lo]) * (rank - lo as f64)
}

/// All-pairs HD95 with the same empty-mask conventions as the library.
pub fn brute_hd95(p: &[bool], g: &[bool], shape: [usize; 3], spacing: [f64; 3]) -> Option<f64> {
    let (pa, ga) = (p.iter().any(|&v| v), g.iter().any(|&v| v));
    if !pa && !ga {
        return Some(0.0);
    }
    if pa != ga {
        return None;
    }
    let sp = brute_surface(p, shape);
    let sg = brute_surface(g, shape);
    Some(brute_directed(&sp, &sg, spacing).max(brute_directed(&sg, &sp, spacing)))
}

pub fn brute_dice(p: &[bool], g: &[bool]) -> f64 {
    let inter = p.iter().zip(g).filter(|(a, b)| **a && **b).count();
    let sizes = p.iter().filter(|v| **v).count() + g.iter().filter(|v| **v).count();
    if sizes == 0 {
        1.0
    } else {
        2.0 * inter as f64 / sizes as f64
    }
}

/// Random mask pair on a random extent up to `max`³ with a random density.
pub fn random_mask_pair(rng: &mut impl Rng, max: usize) -> ([usize; 3], Vec<bool>, Vec<bool>) {
    let shape = [0; 3].map(|_| rng.random_range(1..=max));
    let n = shape.iter().product();
    let dp = rng.random_range(0.0..0.6);
    let dg = rng.random_range(0.0..0.6);
    let p = (0..n).map(|_| rng.random_bool(dp)).collect();
    let g = (0..n).map(|_| rng.random_bool(dg)).collect();
    (shape, p, g)
}
