use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use super::checkpoint::load_checkpoint;
use super::train::load_dataset;
use crate::data::nifti::{self, DataType, Volume};
use crate::data::{normalize_case, voxel_index, Case};
use crate::error::{Error, Result};
use crate::metrics::{aggregate, evaluate_case, CaseScores, Summary};
use crate::network::{Network, CLASS_LABELS};
use crate::ops::argmax_channels;
use crate::tensor::FeatureMap;

/// Worker threads for per-case evaluation: `MBDRES_THREADS` if set,
/// otherwise the available parallelism.
pub fn thread_count() -> usize {
    std::env::var("MBDRES_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Labels in {0,1,2,4} for a z-scored case of any extent. The input is
/// zero-padded up to the network's size divisor and the prediction cropped back.
pub fn predict_labels(net: &mut Network<f32>, case: &Case) -> Result<Vec<u8>> {
    let k = net.cfg.size_divisor();
    let s = case.shape;
    let padded = s.map(|n| n.div_ceil(k) * k);
    let x = if padded == s {
        case.input()
    } else {
        let src = case.input();
        FeatureMap::from_fn([4, padded[0], padded[1], padded[2]], |[c, h, w, d]| {
            if h < s[0] && w < s[1] && d < s[2] {
                src.get([c, h, w, d])
            } else {
                0.0
            }
        })
    };
    let logits = net.logits(&x, false)?;
    let classes = argmax_channels(&logits);
    let mut out = Vec::with_capacity(case.voxels());
    for h in 0..s[0] {
        for w in 0..s[1] {
            for d in 0..s[2] {
                out.push(CLASS_LABELS[classes[voxel_index(padded, [h, w, d])]]);
            }
        }
    }
    Ok(out)
}

/// Per-case scores in input order, spread over [`thread_count`] workers each
/// holding its own copy of the model.
pub fn score_cases(net: &Network<f32>, cases: &[Case]) -> Result<(Vec<CaseScores>, Vec<Vec<u8>>)> {
    let threads = thread_count().clamp(1, cases.len().max(1));
    let chunk = cases.len().div_ceil(threads).max(1);
    let results: Vec<Result<Vec<(CaseScores, Vec<u8>)>>> = std::thread::scope(|s| {
        let handles: Vec<_> = cases
            .chunks(chunk)
            .map(|part| {
                let mut local = net.clone();
                s.spawn(move || {
                    part.iter()
                        .map(|raw| {
                            let c = normalize_case(raw)?;
                            let pred = predict_labels(&mut local, &c)?;
                            let scores = evaluate_case(&c.case_id, &pred, &c.labels, c.shape, c.spacing)?;
                            Ok((scores, pred))
                        })
                        .collect()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation worker panicked"))
            .collect()
    });
    let mut scores = Vec::with_capacity(cases.len());
    let mut preds = Vec::with_capacity(cases.len());
    for part in results {
        for (s, p) in part? {
            scores.push(s);
            preds.push(p);
        }
    }
    Ok((scores, preds))
}

/// One CSV row per case; an empty HD95 cell marks the one-mask-empty sentinel.
#[derive(Debug, Serialize, Deserialize)]
pub struct ScoreRow {
    pub case_id: String,
    #[serde(rename = "dice_ET")]
    pub dice_et: f64,
    #[serde(rename = "dice_WT")]
    pub dice_wt: f64,
    #[serde(rename = "dice_TC")]
    pub dice_tc: f64,
    #[serde(rename = "hd95_ET")]
    pub hd95_et: Option<f64>,
    #[serde(rename = "hd95_WT")]
    pub hd95_wt: Option<f64>,
    #[serde(rename = "hd95_TC")]
    pub hd95_tc: Option<f64>,
}

impl From<&CaseScores> for ScoreRow {
    fn from(s: &CaseScores) -> Self {
        Self {
            case_id: s.case_id.clone(),
            dice_et: s.dice[0],
            dice_wt: s.dice[1],
            dice_tc: s.dice[2],
            hd95_et: s.hd95[0],
            hd95_wt: s.hd95[1],
            hd95_tc: s.hd95[2],
        }
    }
}

pub fn write_scores_csv(path: &Path, scores: &[CaseScores]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for s in scores {
        w.serialize(ScoreRow::from(s))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub checkpoint: PathBuf,
    pub dataset: PathBuf,
    pub summary: Summary,
    pub scores: Vec<CaseScores>,
}

/// Scores a checkpoint on a dataset, writing `scores.csv`, `summary.json`
/// and optionally `<case_id>_pred.nii.gz` per case into `out_dir`.
pub fn evaluate(checkpoint: &Path, dataset: &Path, out_dir: &Path, save_predictions: bool) -> Result<EvaluationReport> {
    let (net, _) = load_checkpoint(checkpoint)?;
    let cases = load_dataset(dataset)?;
    if cases.is_empty() {
        return Err(Error::input(format!("no cases found in {}", dataset.display())));
    }
    info!("evaluating {} cases on {} threads", cases.len(), thread_count());
    let (scores, preds) = score_cases(&net, &cases)?;
    let summary = aggregate(&scores)?;

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_scores_csv(&out_dir.join("scores.csv"), &scores)?;
    let report = EvaluationReport {
        checkpoint: checkpoint.to_path_buf(),
        dataset: dataset.to_path_buf(),
        summary,
        scores,
    };
    let p = out_dir.join("summary.json");
    std::fs::write(&p, serde_json::to_string_pretty(&report.summary)?).map_err(|e| Error::io(&p, e))?;
    if save_predictions {
        for (c, pred) in cases.iter().zip(&preds) {
            let v = Volume {
                shape: c.shape,
                spacing: c.spacing,
                data: pred.iter().map(|&l| l as f64).collect(),
            };
            nifti::write(&out_dir.join(format!("{}_pred.nii.gz", c.case_id)), &v, DataType::U8)?;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_phantom, TumorParams};
    use crate::network::NetworkConfig;

    #[test]
    fn prediction_covers_unpadded_extent() {
        let cfg = NetworkConfig::desk();
        let mut net = Network::<f32>::new(&cfg, 0).unwrap();
        let c = normalize_case(&generate_phantom(1, [34, 32, 33], &TumorParams::default()).unwrap()).unwrap();
        let pred = predict_labels(&mut net, &c).unwrap();
        assert_eq!(pred.len(), c.voxels());
        assert!(pred.iter().all(|v| CLASS_LABELS.contains(v)));
    }
}
