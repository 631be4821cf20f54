use std::path::{Path, PathBuf};
use std::sync::mpsc;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::save_checkpoint;
use super::evaluate::predict_labels;
use super::loss::{loss_and_grad, LossWeights};
use super::optim::Adam;
use super::render::plot_trajectories;
use crate::blocks::BranchWeights;
use crate::data::{
    crop_at, generate_phantom, item_seed, list_cases, load_case, normalize_case, AugmentSpec, Case, TumorParams,
};
use crate::error::{Error, Result};
use crate::metrics::{aggregate, evaluate_case, CaseScores, Region, Summary};
use crate::network::{Network, NetworkConfig};
use crate::tensor::Parameterized;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Cosine decay to zero over the run.
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSource {
    pub count: usize,
    pub shape: [usize; 3],
    pub seed: u64,
    pub tumor: TumorParams,
}

impl Default for PhantomSource {
    fn default() -> Self {
        Self {
            count: 20,
            shape: [64; 3],
            seed: 0,
            tumor: TumorParams::default(),
        }
    }
}

impl PhantomSource {
    pub fn generate(&self) -> Result<Vec<Case>> {
        (0..self.count)
            .map(|i| generate_phantom(self.seed.wrapping_add(i as u64), self.shape, &self.tumor))
            .collect()
    }
}

/// Where cases come from. A `train` path wins over `phantom`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSource {
    /// Dataset directory or single case.
    pub train: Option<PathBuf>,
    /// Separate validation set; otherwise a seeded split of `train`.
    pub validation: Option<PathBuf>,
    pub phantom: Option<PhantomSource>,
}

impl DataSource {
    pub fn phantoms(p: PhantomSource) -> Self {
        Self {
            phantom: Some(p),
            ..Self::default()
        }
    }
}

pub fn load_dataset(path: &Path) -> Result<Vec<Case>> {
    list_cases(path)?.iter().map(|p| load_case(p)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    pub loss: LossWeights,
    pub network: NetworkConfig,
    pub augment: AugmentSpec,
    pub data: DataSource,
    pub validation_fraction: f64,
    /// Checkpoints, logs and plots go here when set.
    pub output_dir: Option<PathBuf>,
    /// Run data preparation inline instead of on a prefetch thread.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 50,
            batch_size: 2,
            learning_rate: 1e-3,
            lr_schedule: LrSchedule::Constant,
            loss: LossWeights::default(),
            network: NetworkConfig::desk(),
            augment: AugmentSpec {
                crop_size: [64; 3],
                ..AugmentSpec::default()
            },
            data: DataSource::phantoms(PhantomSource::default()),
            validation_fraction: 0.2,
            output_dir: None,
            deterministic: false,
        }
    }
}

impl TrainConfig {
    /// Batch 16, 128³ crops, 500 epochs, default-width network.
    pub fn full_scale() -> Self {
        Self {
            epochs: 500,
            batch_size: 16,
            network: NetworkConfig::default(),
            augment: AugmentSpec::default(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::config(format!("learning rate {}", self.learning_rate)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::config("batch size and epochs must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::config(format!(
                "validation fraction {}",
                self.validation_fraction
            )));
        }
        self.network.validate()?;
        self.augment.validate()?;
        let [h, w, d] = self.augment.crop_size;
        self.network.check_input([self.network.in_modalities, h, w, d])
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Cosine => {
                let t = epoch as f64 / self.epochs as f64;
                self.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub epoch: usize,
    pub block_index: usize,
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    pub sum: f64,
}

/// Branch weights of every adaptive block, once per epoch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryLog {
    pub rows: Vec<TrajectoryRow>,
}

impl TrajectoryLog {
    pub fn record(&mut self, epoch: usize, weights: &[(usize, BranchWeights)]) {
        for (block, w) in weights {
            self.rows.push(TrajectoryRow {
                epoch,
                block_index: *block,
                w1: w.w1,
                w2: w.w2,
                w3: w.w3,
                sum: w.sum(),
            });
        }
    }

    pub fn blocks(&self) -> Vec<usize> {
        let mut b: Vec<usize> = self.rows.iter().map(|r| r.block_index).collect();
        b.sort_unstable();
        b.dedup();
        b
    }

    pub fn block(&self, index: usize) -> impl Iterator<Item = &TrajectoryRow> {
        self.rows.iter().filter(move |r| r.block_index == index)
    }

    /// Largest `|w_i − init|` over all rows.
    pub fn max_deviation(&self) -> f64 {
        self.rows
            .iter()
            .flat_map(|r| [r.w1, r.w2, r.w3])
            .map(|w| (w - BranchWeights::INIT).abs())
            .fold(0.0, f64::max)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let rows = r.deserialize().collect::<Result<Vec<TrajectoryRow>, _>>()?;
        Ok(Self { rows })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_dice_et: Option<f64>,
    pub val_dice_wt: Option<f64>,
    pub val_dice_tc: Option<f64>,
    pub val_mean_dice: Option<f64>,
}

pub struct TrainOutcome {
    pub loss_curve: Vec<EpochRecord>,
    pub trajectory: TrajectoryLog,
    /// Highest validation mean Dice (the last epoch without validation).
    pub best: Network<f32>,
    pub best_epoch: usize,
    pub last: Network<f32>,
    pub validation_cases: Vec<Case>,
    /// Scores of `best` on the validation cases.
    pub validation_scores: Vec<CaseScores>,
    pub validation_summary: Option<Summary>,
    pub best_checkpoint: Option<PathBuf>,
    pub last_checkpoint: Option<PathBuf>,
}

/// Training and validation cases, z-scored.
pub fn prepare_data(cfg: &TrainConfig) -> Result<(Vec<Case>, Vec<Case>)> {
    let cases = match (&cfg.data.train, &cfg.data.phantom) {
        (Some(path), _) => load_dataset(path)?,
        (None, Some(p)) => p.generate()?,
        (None, None) => return Err(Error::config("no training data configured")),
    };
    if cases.is_empty() {
        return Err(Error::input("training dataset is empty"));
    }
    let mut cases = cases.iter().map(normalize_case).collect::<Result<Vec<_>>>()?;
    let validation = match &cfg.data.validation {
        Some(path) => load_dataset(path)?
            .iter()
            .map(normalize_case)
            .collect::<Result<Vec<_>>>()?,
        None => {
            let n_val = (cfg.validation_fraction * cases.len() as f64).round() as usize;
            let n_val = if cfg.validation_fraction > 0.0 && cases.len() > 1 {
                n_val.clamp(1, cases.len() - 1)
            } else {
                0
            };
            let mut order: Vec<usize> = (0..cases.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_5A11));
            let mut val_idx = order[..n_val].to_vec();
            val_idx.sort_unstable();
            let mut val = Vec::new();
            for &i in val_idx.iter().rev() {
                val.push(cases.remove(i));
            }
            val.reverse();
            val
        }
    };
    for c in cases.iter().chain(&validation) {
        if (0..3).any(|a| c.shape[a] < cfg.augment.crop_size[a]) {
            return Err(Error::input(format!(
                "case {} of shape {:?} is smaller than the crop {:?}",
                c.case_id, c.shape, cfg.augment.crop_size
            )));
        }
    }
    Ok((cases, validation))
}

fn centre_crop(case: &Case, size: [usize; 3]) -> Case {
    crop_at(case, std::array::from_fn(|a| (case.shape[a] - size[a]) / 2), size)
}

/// Augmented training samples for one epoch, in batch order.
fn epoch_samples<'a>(
    cfg: &'a TrainConfig,
    cases: &'a [Case],
    order: Vec<usize>,
    epoch: usize,
) -> impl Iterator<Item = Result<Case>> + 'a {
    order.into_iter().map(move |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(item_seed(cfg.seed, i, epoch));
        cfg.augment.apply(&cases[i], &mut rng)
    })
}

fn validate_model(net: &mut Network<f32>, cases: &[Case], crop: [usize; 3]) -> Result<Vec<CaseScores>> {
    cases
        .iter()
        .map(|c| {
            let c = centre_crop(c, crop);
            let pred = predict_labels(net, &c)?;
            evaluate_case(&c.case_id, &pred, &c.labels, c.shape, c.spacing)
        })
        .collect()
}

fn write_loss_csv(path: &Path, curve: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in curve {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (cases, validation) = prepare_data(cfg)?;
    if cases.is_empty() {
        return Err(Error::input("no training cases left after the validation split"));
    }
    if let Some(dir) = &cfg.output_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let cfg_path = dir.join("train_config.json");
        std::fs::write(&cfg_path, serde_json::to_string_pretty(cfg)?).map_err(|e| Error::io(&cfg_path, e))?;
    }
    info!(
        "training on {} cases, validating on {}, {} parameters",
        cases.len(),
        validation.len(),
        Network::<f32>::new(&cfg.network, cfg.seed)?.num_params()
    );

    let mut net = Network::<f32>::new(&cfg.network, cfg.seed)?;
    let mut opt = Adam::new(cfg.learning_rate);
    let mut trajectory = TrajectoryLog::default();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Network<f32>)> = None;
    let ckpt = |name: &str| cfg.output_dir.as_ref().map(|d| d.join(name));

    for epoch in 1..=cfg.epochs {
        opt.lr = cfg.lr_at(epoch - 1);
        let mut order: Vec<usize> = (0..cases.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(item_seed(cfg.seed, usize::MAX, epoch)));

        let mut total = 0.0;
        let mut in_batch = 0;
        let mut step = |sample: Case, net: &mut Network<f32>| -> Result<()> {
            let logits = net.logits(&sample.input(), true)?;
            let (l, grad) = loss_and_grad(&logits, &sample.labels, cfg.loss)?;
            net.backward(&grad);
            total += l;
            in_batch += 1;
            if in_batch == cfg.batch_size {
                opt.step(net, 1.0 / in_batch as f64);
                net.zero_grad();
                in_batch = 0;
            }
            Ok(())
        };
        if cfg.deterministic {
            for sample in epoch_samples(cfg, &cases, order, epoch) {
                step(sample?, &mut net)?;
            }
        } else {
            let cases = &cases;
            std::thread::scope(|s| -> Result<()> {
                let (tx, rx) = mpsc::sync_channel(2);
                s.spawn(move || {
                    for sample in epoch_samples(cfg, cases, order, epoch) {
                        if tx.send(sample).is_err() {
                            break;
                        }
                    }
                });
                for sample in rx {
                    step(sample?, &mut net)?;
                }
                Ok(())
            })?;
        }
        if in_batch > 0 {
            opt.step(&mut net, 1.0 / in_batch as f64);
            net.zero_grad();
        }
        let train_loss = total / cases.len() as f64;
        trajectory.record(epoch, &net.collect_branch_weights());

        let mut record = EpochRecord {
            epoch,
            train_loss,
            val_dice_et: None,
            val_dice_wt: None,
            val_dice_tc: None,
            val_mean_dice: None,
        };
        let score = if validation.is_empty() {
            None
        } else {
            let summary = aggregate(&validate_model(&mut net, &validation, cfg.augment.crop_size)?)?;
            let [et, wt, tc] = summary.mean_dice;
            record.val_dice_et = Some(et);
            record.val_dice_wt = Some(wt);
            record.val_dice_tc = Some(tc);
            record.val_mean_dice = Some(summary.overall_mean_dice);
            Some(summary.overall_mean_dice)
        };
        info!(
            "epoch {epoch}: loss {train_loss:.4}{}",
            score.map_or(String::new(), |_| format!(
                ", val Dice ET {:.3} WT {:.3} TC {:.3}",
                record.val_dice_et.unwrap(),
                record.val_dice_wt.unwrap(),
                record.val_dice_tc.unwrap()
            ))
        );
        curve.push(record);
        let improved = match (&best, score) {
            (None, _) => true,
            (Some((b, ..)), Some(s)) => s > *b,
            (Some(_), None) => true,
        };
        if improved {
            let s = score.unwrap_or(f64::NEG_INFINITY);
            if let Some(path) = ckpt("best.ckpt") {
                save_checkpoint(&net, epoch, opt.steps(), score, &path)?;
            }
            best = Some((s, epoch, net.clone()));
        }
    }

    let last_score = curve.last().and_then(|r| r.val_mean_dice);
    if let Some(path) = ckpt("last.ckpt") {
        save_checkpoint(&net, cfg.epochs, opt.steps(), last_score, &path)?;
    }
    let (_, best_epoch, mut best_net) = best.expect("at least one epoch");
    let validation_scores = validate_model(&mut best_net, &validation, cfg.augment.crop_size)?;
    let validation_summary = (!validation_scores.is_empty())
        .then(|| aggregate(&validation_scores))
        .transpose()?;

    if let Some(dir) = &cfg.output_dir {
        write_loss_csv(&dir.join("loss.csv"), &curve)?;
        trajectory.write_csv(&dir.join("trajectory.csv"))?;
        if !trajectory.rows.is_empty() {
            plot_trajectories(&trajectory, &dir.join("trajectories.png"))?;
        }
        let summary = serde_json::json!({
            "best_epoch": best_epoch,
            "epochs": cfg.epochs,
            "validation": validation_summary,
            "regions": Region::ALL.map(Region::name),
        });
        let p = dir.join("train_summary.json");
        std::fs::write(&p, serde_json::to_string_pretty(&summary)?).map_err(|e| Error::io(&p, e))?;
    }

    Ok(TrainOutcome {
        loss_curve: curve,
        trajectory,
        best: best_net,
        best_epoch,
        last: net,
        validation_cases: validation,
        validation_scores,
        validation_summary,
        best_checkpoint: ckpt("best.ckpt"),
        last_checkpoint: ckpt("last.ckpt"),
    })
}
