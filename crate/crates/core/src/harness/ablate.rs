use std::path::Path;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use super::train::{train, TrainConfig};
use crate::attention::AttentionVariant;
use crate::blocks::WeightMode;
use crate::complexity::analyze;
use crate::error::{Error, Result};
use crate::network::NetworkConfig;

/// Cells vary one setting of `base` at a time: each weighting mode with the
/// base attention, then each attention variant with the base weighting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationGrid {
    pub base: TrainConfig,
    pub weighting: Vec<WeightMode>,
    pub attention: Vec<AttentionVariant>,
    /// Input extent for the params/FLOPs columns.
    pub complexity_shape: [usize; 3],
}

impl Default for AblationGrid {
    fn default() -> Self {
        Self {
            base: TrainConfig::default(),
            weighting: vec![WeightMode::Learnable, WeightMode::FixedEqual, WeightMode::Disabled],
            attention: AttentionVariant::ALL.to_vec(),
            complexity_shape: [128; 3],
        }
    }
}

impl AblationGrid {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// `(group, setting, config)` for every cell.
    pub fn cells(&self) -> Vec<(&'static str, String, TrainConfig)> {
        let mut out = Vec::new();
        for &mode in &self.weighting {
            let mut cfg = self.base.clone();
            cfg.network.weight_mode = mode;
            out.push(("weighting", mode.to_string(), cfg));
        }
        for &variant in &self.attention {
            let mut cfg = self.base.clone();
            cfg.network.attention.variant = variant;
            out.push(("attention", variant.as_str().to_string(), cfg));
        }
        for (group, setting, cfg) in &mut out {
            if let Some(dir) = &self.base.output_dir {
                cfg.output_dir = Some(dir.join(format!("{group}_{setting}")));
            }
        }
        out
    }
}

/// Dice in percent and HD95 in mm on the validation split, plus complexity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub group: String,
    pub setting: String,
    #[serde(rename = "dice_ET")]
    pub dice_et: Option<f64>,
    #[serde(rename = "dice_WT")]
    pub dice_wt: Option<f64>,
    #[serde(rename = "dice_TC")]
    pub dice_tc: Option<f64>,
    #[serde(rename = "hd95_ET")]
    pub hd95_et: Option<f64>,
    #[serde(rename = "hd95_WT")]
    pub hd95_wt: Option<f64>,
    #[serde(rename = "hd95_TC")]
    pub hd95_tc: Option<f64>,
    pub params: Option<u64>,
    pub flops: Option<u64>,
    pub error: Option<String>,
}

fn complexity_columns(net: &NetworkConfig, shape: [usize; 3]) -> Result<(u64, u64)> {
    let r = analyze(net, shape)?;
    Ok((r.total_params, r.total_flops))
}

pub fn run_cell(group: &str, setting: &str, cfg: &TrainConfig, shape: [usize; 3]) -> AblationRow {
    let mut row = AblationRow {
        group: group.into(),
        setting: setting.into(),
        dice_et: None,
        dice_wt: None,
        dice_tc: None,
        hd95_et: None,
        hd95_wt: None,
        hd95_tc: None,
        params: None,
        flops: None,
        error: None,
    };
    let result = complexity_columns(&cfg.network, shape).and_then(|(p, f)| {
        row.params = Some(p);
        row.flops = Some(f);
        train(cfg)
    });
    match result {
        Ok(outcome) => match outcome.validation_summary {
            Some(s) => {
                [row.dice_et, row.dice_wt, row.dice_tc] = s.mean_dice.map(|d| Some(100.0 * d));
                [row.hd95_et, row.hd95_wt, row.hd95_tc] = s.mean_hd95;
            }
            None => row.error = Some("no validation cases".into()),
        },
        Err(e) => {
            warn!("ablation cell {group}/{setting} failed: {e}");
            row.error = Some(e.to_string());
        }
    }
    row
}

/// Trains and scores every cell under the base seed and data, writing
/// `ablation.csv` to the base output directory when one is set.
pub fn ablate(grid: &AblationGrid) -> Result<Vec<AblationRow>> {
    let cells = grid.cells();
    if cells.is_empty() {
        return Err(Error::config("ablation grid has no cells"));
    }
    let mut rows = Vec::with_capacity(cells.len());
    for (group, setting, cfg) in &cells {
        info!("ablation cell {group}/{setting}");
        rows.push(run_cell(group, setting, cfg, grid.complexity_shape));
    }
    if let Some(dir) = &grid.base.output_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_table(&dir.join("ablation.csv"), &rows)?;
    }
    Ok(rows)
}

pub fn write_table(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_rows_follow_the_table_structure() {
        let grid = AblationGrid::default();
        let cells = grid.cells();
        let names: Vec<_> = cells.iter().map(|(g, s, _)| format!("{g}/{s}")).collect();
        assert_eq!(
            names,
            [
                "weighting/learnable",
                "weighting/fixed_equal",
                "weighting/disabled",
                "attention/none",
                "attention/ch_se",
                "attention/ch_se_plus_sp_se",
                "attention/saca3d"
            ]
        );
        assert!(cells
            .iter()
            .all(|(_, _, c)| c.seed == grid.base.seed && c.data == grid.base.data));
    }

    #[test]
    fn failed_cell_is_reported() {
        let mut cfg = TrainConfig::default();
        cfg.learning_rate = -1.0;
        let row = run_cell("weighting", "learnable", &cfg, [64; 3]);
        assert!(row.error.is_some());
        assert!(row.params.is_some());
    }
}
