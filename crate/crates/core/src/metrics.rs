//! Tumour regions, Dice and 95th-percentile Hausdorff distance.

use serde::{Deserialize, Serialize};

use crate::data::voxel_index;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Region {
    /// Enhancing tumour, label 4.
    ET,
    /// Whole tumour, labels 1, 2, 4.
    WT,
    /// Tumour core, labels 1, 4.
    TC,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::ET, Region::WT, Region::TC];

    pub fn label_set(self) -> &'static [u8] {
        match self {
            Region::ET => &[4],
            Region::WT => &[1, 2, 4],
            Region::TC => &[1, 4],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Region::ET => "ET",
            Region::WT => "WT",
            Region::TC => "TC",
        }
    }
}

pub fn region_mask(labels: &[u8], region: Region) -> Vec<bool> {
    let set = region.label_set();
    labels.iter().map(|v| set.contains(v)).collect()
}

fn same_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::input(format!("mask sizes differ: {a} vs {b}")));
    }
    Ok(())
}

/// `2|P∩G| / (|P|+|G|)`; 1 when both masks are empty.
pub fn dice(pred: &[bool], gt: &[bool]) -> Result<f64> {
    same_len(pred.len(), gt.len())?;
    let (mut both, mut total) = (0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        both += (p && g) as usize;
        total += p as usize + g as usize;
    }
    Ok(if total == 0 {
        1.0
    } else {
        2.0 * both as f64 / total as f64
    })
}

/// Mask voxels with at least one 6-connected neighbour outside the mask.
/// Neighbours beyond the volume edge count as outside.
pub fn surface(mask: &[bool], shape: [usize; 3]) -> Vec<bool> {
    let mut out = vec![false; mask.len()];
    for h in 0..shape[0] {
        for w in 0..shape[1] {
            for d in 0..shape[2] {
                let p = [h, w, d];
                let i = voxel_index(shape, p);
                if !mask[i] {
                    continue;
                }
                out[i] = (0..3).any(|a| {
                    let lower = p[a] == 0 || {
                        let mut q = p;
                        q[a] -= 1;
                        !mask[voxel_index(shape, q)]
                    };
                    let upper = p[a] + 1 == shape[a] || {
                        let mut q = p;
                        q[a] += 1;
                        !mask[voxel_index(shape, q)]
                    };
                    lower || upper
                });
            }
        }
    }
    out
}

/// Exact squared distance transform along one line: `out[q] = min_p
/// (step·(q−p))² + f[p]`, with infinite entries treated as absent.
fn edt_line(f: &[f64], step: f64, out: &mut [f64], sites: &mut Vec<usize>, bounds: &mut Vec<f64>) {
    sites.clear();
    bounds.clear();
    let x = |i: usize| i as f64 * step;
    for q in 0..f.len() {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let Some(&p) = sites.last() else { break };
            let s = ((f[q] + x(q) * x(q)) - (f[p] + x(p) * x(p))) / (2.0 * (x(q) - x(p)));
            if s <= *bounds.last().unwrap() {
                sites.pop();
                bounds.pop();
            } else {
                bounds.push(s);
                break;
            }
        }
        if sites.is_empty() {
            bounds.push(f64::NEG_INFINITY);
        }
        sites.push(q);
    }
    if sites.is_empty() {
        out.iter_mut().for_each(|v| *v = f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while k + 1 < sites.len() && bounds[k + 1] < x(q) {
            k += 1;
        }
        let p = sites[k];
        *o = (x(q) - x(p)).powi(2) + f[p];
    }
}

/// Squared Euclidean distance from every voxel to the nearest `true` voxel,
/// in physical units.
pub fn squared_distance_transform(mask: &[bool], shape: [usize; 3], spacing: [f64; 3]) -> Vec<f64> {
    let mut dist: Vec<f64> = mask.iter().map(|&m| if m { 0.0 } else { f64::INFINITY }).collect();
    let (mut sites, mut bounds) = (Vec::new(), Vec::new());
    for axis in 0..3 {
        let n = shape[axis];
        let mut line = vec![0.0; n];
        let mut out = vec![0.0; n];
        let others: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
        for i in 0..shape[others[0]] {
            for j in 0..shape[others[1]] {
                let at = |k: usize| {
                    let mut p = [0; 3];
                    p[axis] = k;
                    p[others[0]] = i;
                    p[others[1]] = j;
                    voxel_index(shape, p)
                };
                for (k, l) in line.iter_mut().enumerate() {
                    *l = dist[at(k)];
                }
                edt_line(&line, spacing[axis], &mut out, &mut sites, &mut bounds);
                for (k, &o) in out.iter().enumerate() {
                    dist[at(k)] = o;
                }
            }
        }
    }
    dist
}

/// Linear-interpolated percentile of an unsorted list, `q` in [0, 100].
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let pos = q / 100.0 * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(values.len() - 1);
    values[lo] + (values[hi] - values[lo]) * (pos - lo as f64)
}

fn directed_hd95(from: &[bool], to_distance: &[f64]) -> f64 {
    let mut d: Vec<f64> = from
        .iter()
        .zip(to_distance)
        .filter(|(&s, _)| s)
        .map(|(_, &d2)| d2.sqrt())
        .collect();
    percentile(&mut d, 95.0)
}

/// Symmetric 95th-percentile surface distance in millimetres. Both masks
/// empty gives 0; exactly one empty gives `None`.
pub fn hausdorff95(pred: &[bool], gt: &[bool], shape: [usize; 3], spacing: [f64; 3]) -> Result<Option<f64>> {
    same_len(pred.len(), gt.len())?;
    same_len(pred.len(), shape.iter().product())?;
    let (p_any, g_any) = (pred.iter().any(|&v| v), gt.iter().any(|&v| v));
    match (p_any, g_any) {
        (false, false) => return Ok(Some(0.0)),
        (true, false) | (false, true) => return Ok(None),
        _ => {}
    }
    let sp = surface(pred, shape);
    let sg = surface(gt, shape);
    let to_g = squared_distance_transform(&sg, shape, spacing);
    let to_p = squared_distance_transform(&sp, shape, spacing);
    Ok(Some(directed_hd95(&sp, &to_g).max(directed_hd95(&sg, &to_p))))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseScores {
    pub case_id: String,
    /// In [`Region::ALL`] order.
    pub dice: [f64; 3],
    /// `None` when exactly one of the masks is empty.
    pub hd95: [Option<f64>; 3],
}

impl CaseScores {
    pub fn dice_of(&self, r: Region) -> f64 {
        self.dice[Region::ALL.iter().position(|&x| x == r).unwrap()]
    }

    pub fn hd95_of(&self, r: Region) -> Option<f64> {
        self.hd95[Region::ALL.iter().position(|&x| x == r).unwrap()]
    }
}

pub fn evaluate_case(
    case_id: &str,
    pred: &[u8],
    gt: &[u8],
    shape: [usize; 3],
    spacing: [f64; 3],
) -> Result<CaseScores> {
    same_len(pred.len(), gt.len())?;
    let mut dice_out = [0.0; 3];
    let mut hd = [None; 3];
    for (k, r) in Region::ALL.into_iter().enumerate() {
        let (p, g) = (region_mask(pred, r), region_mask(gt, r));
        dice_out[k] = dice(&p, &g)?;
        hd[k] = hausdorff95(&p, &g, shape, spacing)?;
    }
    Ok(CaseScores {
        case_id: case_id.to_string(),
        dice: dice_out,
        hd95: hd,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub cases: usize,
    /// Mean Dice per region, [`Region::ALL`] order.
    pub mean_dice: [f64; 3],
    /// Mean HD95 per region over cases without the sentinel.
    pub mean_hd95: [Option<f64>; 3],
    /// Cases excluded from each HD95 mean.
    pub hd95_excluded: [usize; 3],
    /// Mean of the three regional Dice means.
    pub overall_mean_dice: f64,
}

pub fn aggregate(scores: &[CaseScores]) -> Result<Summary> {
    if scores.is_empty() {
        return Err(Error::input("no case scores to aggregate"));
    }
    let n = scores.len() as f64;
    let mean_dice: [f64; 3] = std::array::from_fn(|k| scores.iter().map(|s| s.dice[k]).sum::<f64>() / n);
    let mut mean_hd95 = [None; 3];
    let mut excluded = [0; 3];
    for k in 0..3 {
        let valid: Vec<f64> = scores.iter().filter_map(|s| s.hd95[k]).collect();
        excluded[k] = scores.len() - valid.len();
        if !valid.is_empty() {
            mean_hd95[k] = Some(valid.iter().sum::<f64>() / valid.len() as f64);
        }
    }
    Ok(Summary {
        cases: scores.len(),
        mean_dice,
        mean_hd95,
        hd95_excluded: excluded,
        overall_mean_dice: mean_dice.iter().sum::<f64>() / 3.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regions_by_definition() {
        let l = [0, 1, 2, 4];
        assert_eq!(region_mask(&l, Region::WT), [false, true, true, true]);
        assert_eq!(region_mask(&l, Region::TC), [false, true, false, true]);
        assert_eq!(region_mask(&l, Region::ET), [false, false, false, true]);
    }

    #[test]
    fn dice_examples() {
        let p = [true, true, false, false];
        let g = [false, true, true, false];
        assert_eq!(dice(&p, &g).unwrap(), 0.5);
        assert_eq!(dice(&p, &p).unwrap(), 1.0);
        assert_eq!(dice(&p, &[false, false, true, true]).unwrap(), 0.0);
        assert_eq!(dice(&[false; 4], &[false; 4]).unwrap(), 1.0);
        assert_eq!(dice(&[false; 4], &g).unwrap(), 0.0);
        assert!(dice(&p, &[true]).is_err());
    }

    #[test]
    fn single_voxels_one_apart() {
        let shape = [3, 3, 3];
        let mut p = vec![false; 27];
        let mut g = vec![false; 27];
        p[voxel_index(shape, [1, 1, 1])] = true;
        g[voxel_index(shape, [1, 1, 2])] = true;
        assert_eq!(hausdorff95(&p, &g, shape, [1.0; 3]).unwrap(), Some(1.0));
        assert_eq!(hausdorff95(&p, &g, shape, [1.0, 1.0, 2.5]).unwrap(), Some(2.5));
        assert_eq!(hausdorff95(&p, &p, shape, [1.0; 3]).unwrap(), Some(0.0));
        assert_eq!(hausdorff95(&p, &[false; 27], shape, [1.0; 3]).unwrap(), None);
        assert_eq!(
            hausdorff95(&[false; 27], &[false; 27], shape, [1.0; 3]).unwrap(),
            Some(0.0)
        );
    }

    #[test]
    fn distance_transform_matches_brute_force() {
        let shape = [5, 4, 6];
        let spacing = [1.0, 0.7, 1.9];
        let n = 120;
        let mask: Vec<bool> = (0..n).map(|i| (i * 37 + 11) % 17 == 0).collect();
        let dt = squared_distance_transform(&mask, shape, spacing);
        let coord = |i: usize| [i / 24, (i / 6) % 4, i % 6];
        for i in 0..n {
            let want = (0..n)
                .filter(|&j| mask[j])
                .map(|j| {
                    let (a, b) = (coord(i), coord(j));
                    (0..3)
                        .map(|k| ((a[k] as f64 - b[k] as f64) * spacing[k]).powi(2))
                        .sum::<f64>()
                })
                .fold(f64::INFINITY, f64::min);
            assert!((dt[i] - want).abs() < 1e-9, "{i}: {} vs {want}", dt[i]);
        }
    }

    #[test]
    fn percentile_interpolates() {
        let mut v = vec![3.0, 1.0, 2.0, 4.0, 0.0];
        assert_eq!(percentile(&mut v, 50.0), 2.0);
        assert!((percentile(&mut v, 95.0) - 3.8).abs() < 1e-12);
        assert_eq!(percentile(&mut [7.0], 95.0), 7.0);
    }

    #[test]
    fn perfect_prediction_and_aggregation() {
        let labels = [0, 1, 2, 4, 4, 2, 0, 0];
        let s = evaluate_case("a", &labels, &labels, [2, 2, 2], [1.0; 3]).unwrap();
        assert_eq!(s.dice, [1.0; 3]);
        assert_eq!(s.hd95, [Some(0.0); 3]);
        let one = aggregate(std::slice::from_ref(&s)).unwrap();
        assert_eq!(one.mean_dice, s.dice);
        let mut t = s.clone();
        t.dice = [0.8, 0.8, 0.8];
        let mut u = s.clone();
        u.dice = [0.9, 0.9, 0.9];
        u.hd95[0] = None;
        let two = aggregate(&[t, u]).unwrap();
        assert!((two.mean_dice[1] - 0.85).abs() < 1e-12);
        assert_eq!(two.hd95_excluded, [1, 0, 0]);
        assert!(aggregate(&[]).is_err());
    }
}
