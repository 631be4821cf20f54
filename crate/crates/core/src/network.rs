//! The full encoder–decoder.
//!
//! ```text
//! input (4 modalities) → attention → stem 3×3×3/2
//!   → encoder stages of MBDRes blocks (first block of each stage strides 2)
//!   → decoder stages: trilinear ×2 → concat skip → 1×1×1 conv + GN + ReLU → MBRes
//!   → trilinear ×2 → 1×1×1 fusion conv → softmax
//! ```
//!
//! With three encoder stages the encoder works at 1/4, 1/8 and 1/16 of the
//! input resolution and the decoder climbs back to 1/2 using the stem output
//! as the last skip connection.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{Attention, AttentionConfig};
use crate::blocks::{BlockConfig, BranchWeights, ResidualBlock, WeightMode};
use crate::conv::{Conv3d, ConvSpec};
use crate::error::{Error, Result};
use crate::norm::{PreAct, NORM_GROUPS};
use crate::ops::{argmax_channels, softmax_channels, upsample_trilinear, upsample_trilinear_backward};
use crate::tensor::{FeatureMap, Param, Parameterized, Real};

/// Label value of each output channel.
pub const CLASS_LABELS: [u8; 4] = [0, 1, 2, 4];

/// Total number of MBDRes blocks in the encoder.
pub const ENCODER_BLOCKS: usize = 6;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub in_modalities: usize,
    pub num_classes: usize,
    pub groups: usize,
    /// Channel width of each encoder stage; the stem uses the first width.
    pub stage_widths: Vec<usize>,
    /// MBDRes blocks per encoder stage.
    pub block_layout: Vec<usize>,
    pub attention: AttentionConfig,
    pub weight_mode: WeightMode,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            in_modalities: 4,
            num_classes: 4,
            groups: 8,
            stage_widths: vec![40, 112, 320],
            block_layout: vec![2, 2, 2],
            attention: AttentionConfig::default(),
            weight_mode: WeightMode::Learnable,
        }
    }
}

impl NetworkConfig {
    /// Narrow widths for CPU training runs.
    pub fn desk() -> Self {
        Self {
            stage_widths: vec![16, 32, 64],
            ..Self::default()
        }
    }

    pub fn stages(&self) -> usize {
        self.stage_widths.len()
    }

    /// Every spatial input extent must be a multiple of this.
    pub fn size_divisor(&self) -> usize {
        1 << (self.stages() + 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_modalities == 0 || self.num_classes != CLASS_LABELS.len() {
            return Err(Error::config(format!(
                "expected >= 1 modality and {} classes, got {} and {}",
                CLASS_LABELS.len(),
                self.in_modalities,
                self.num_classes
            )));
        }
        if self.stage_widths.is_empty() || self.stage_widths.len() != self.block_layout.len() {
            return Err(Error::config(format!(
                "{} stage widths for {} layout entries",
                self.stage_widths.len(),
                self.block_layout.len()
            )));
        }
        if self.block_layout.iter().sum::<usize>() != ENCODER_BLOCKS || self.block_layout.contains(&0) {
            return Err(Error::config(format!(
                "block layout {:?} must place {ENCODER_BLOCKS} blocks with at least one per stage",
                self.block_layout
            )));
        }
        for &w in &self.stage_widths {
            if w == 0 || w % self.groups != 0 || w % 2 != 0 || w % NORM_GROUPS != 0 {
                return Err(Error::config(format!(
                    "stage width {w} must be even and divisible by groups {} and {NORM_GROUPS} norm groups",
                    self.groups
                )));
            }
        }
        self.attention.validate(self.in_modalities)
    }

    pub fn check_input(&self, shape: [usize; 4]) -> Result<()> {
        if shape[0] != self.in_modalities {
            return Err(Error::input(format!(
                "expected {} modalities, got {}",
                self.in_modalities, shape[0]
            )));
        }
        let k = self.size_divisor();
        if shape[1..].iter().any(|&s| s == 0 || s % k != 0) {
            return Err(Error::input(format!(
                "spatial extents {:?} must be positive multiples of {k}",
                &shape[1..]
            )));
        }
        Ok(())
    }
}

/// Softmax probabilities plus the per-voxel label map.
#[derive(Clone, Debug)]
pub struct SegmentationOutput<T> {
    pub probabilities: FeatureMap<T>,
    /// Argmax channel remapped through [`CLASS_LABELS`].
    pub labels: Vec<u8>,
}

#[derive(Clone, Debug)]
pub struct DecoderStage<T> {
    pub fuse: Conv3d<T>,
    pub fuse_act: PreAct<T>,
    pub block: ResidualBlock<T>,
    up_channels: usize,
}

#[derive(Clone, Debug)]
pub struct Network<T> {
    pub cfg: NetworkConfig,
    pub attention: Attention<T>,
    pub stem: Conv3d<T>,
    /// All MBDRes blocks in encoder order.
    pub encoder: Vec<ResidualBlock<T>>,
    /// Decoder stages, deepest first.
    pub decoder: Vec<DecoderStage<T>>,
    pub head: Conv3d<T>,
}

impl<T: Real> Network<T> {
    pub fn new(cfg: &NetworkConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let w = &cfg.stage_widths;
        let attention = Attention::new("attention", cfg.in_modalities, &cfg.attention, rng)?;
        let stem = Conv3d::new("stem", ConvSpec::new(3, cfg.in_modalities, w[0]).stride(2), rng)?;

        let mut encoder = Vec::with_capacity(ENCODER_BLOCKS);
        let mut width = w[0];
        for (stage, &count) in cfg.block_layout.iter().enumerate() {
            for i in 0..count {
                let block = BlockConfig::new(width, w[stage], cfg.groups)
                    .downsample(i == 0)
                    .dilated(cfg.weight_mode);
                let name = format!("encoder.block{}", encoder.len() + 1);
                encoder.push(ResidualBlock::new(&name, block, rng)?);
                width = w[stage];
            }
        }

        let stages = cfg.stages();
        let mut decoder = Vec::with_capacity(stages);
        for k in 0..stages {
            // skip source: encoder stage S-2-k, finally the stem
            let skip = if k + 1 < stages { w[stages - 2 - k] } else { w[0] };
            let name = format!("decoder.stage{}", k + 1);
            decoder.push(DecoderStage {
                fuse: Conv3d::new(&format!("{name}.fuse"), ConvSpec::new(1, width + skip, skip), rng)?,
                fuse_act: PreAct::new(&format!("{name}.fuse_norm"), skip)?,
                block: ResidualBlock::new(&format!("{name}.block"), BlockConfig::new(skip, skip, cfg.groups), rng)?,
                up_channels: width,
            });
            width = skip;
        }
        let head = Conv3d::new("head", ConvSpec::new(1, width, cfg.num_classes).bias(true), rng)?;
        Ok(Self {
            cfg: cfg.clone(),
            attention,
            stem,
            encoder,
            decoder,
            head,
        })
    }

    /// Indices of the last block of each encoder stage.
    fn stage_ends(&self) -> Vec<usize> {
        self.cfg
            .block_layout
            .iter()
            .scan(0, |acc, &n| {
                *acc += n;
                Some(*acc - 1)
            })
            .collect()
    }

    /// Class logits at input resolution. In training mode every layer keeps
    /// what it needs for [`Network::backward`].
    pub fn logits(&mut self, x: &FeatureMap<T>, train: bool) -> Result<FeatureMap<T>> {
        self.cfg.check_input(x.shape())?;
        let a = self.attention.forward(x, train)?;
        let stem = self.stem.forward(&a, train)?;
        let ends = self.stage_ends();
        let mut skips = Vec::with_capacity(ends.len());
        let mut h = stem.clone();
        for (i, block) in self.encoder.iter_mut().enumerate() {
            h = block.forward(&h, train)?;
            if ends.contains(&i) {
                skips.push(h.clone());
            }
        }
        skips.pop();
        skips.insert(0, stem);
        for stage in &mut self.decoder {
            let skip = skips.pop().expect("one skip per decoder stage");
            let up = upsample_trilinear(&h, 2);
            let cat = FeatureMap::concat_channels(&[&up, &skip])?;
            let f = stage.fuse.forward(&cat, train)?;
            let f = stage.fuse_act.forward(&f, train)?;
            h = stage.block.forward(&f, train)?;
        }
        let up = upsample_trilinear(&h, 2);
        self.head.forward(&up, train)
    }

    /// Inference: probabilities and labels for one `modalities × H × W × D` volume.
    pub fn forward(&mut self, x: &FeatureMap<T>) -> Result<SegmentationOutput<T>> {
        let logits = self.logits(x, false)?;
        let probabilities = softmax_channels(&logits);
        let labels = argmax_channels(&probabilities)
            .into_iter()
            .map(|k| CLASS_LABELS[k])
            .collect();
        Ok(SegmentationOutput { probabilities, labels })
    }

    /// Backpropagates a logit gradient, accumulating into every parameter.
    /// Returns the gradient with respect to the network input.
    pub fn backward(&mut self, grad_logits: &FeatureMap<T>) -> FeatureMap<T> {
        let g = self.head.backward(grad_logits);
        let mut g = upsample_trilinear_backward(&g, 2);
        let mut skip_grads = Vec::with_capacity(self.decoder.len());
        for stage in self.decoder.iter_mut().rev() {
            let gb = stage.block.backward(&g);
            let gb = stage.fuse_act.backward(&gb);
            let gcat = stage.fuse.backward(&gb);
            let gup = gcat.channel_range(0, stage.up_channels);
            skip_grads.push(gcat.channel_range(stage.up_channels, gcat.channels()));
            g = upsample_trilinear_backward(&gup, 2);
        }
        // skip_grads[0] belongs to the stem, then encoder stages in order
        let mut skip_grads = skip_grads.into_iter();
        let stem_grad = skip_grads.next().expect("stem skip");
        let mut stage_grads: Vec<FeatureMap<T>> = skip_grads.collect();
        let ends = self.stage_ends();
        for (i, block) in self.encoder.iter_mut().enumerate().rev() {
            if let Some(stage) = ends.iter().position(|&e| e == i) {
                if stage + 1 < ends.len() {
                    g.add_assign(&stage_grads[stage]);
                }
            }
            g = block.backward(&g);
        }
        stage_grads.clear();
        g.add_assign(&stem_grad);
        let g = self.stem.backward(&g);
        self.attention.backward(&g)
    }

    /// `(block index 1..=6, weights)` per MBDRes block; empty when disabled.
    pub fn collect_branch_weights(&self) -> Vec<(usize, BranchWeights)> {
        self.encoder
            .iter()
            .enumerate()
            .filter_map(|(i, b)| b.adaptive().and_then(|a| a.branch_weights()).map(|w| (i + 1, w)))
            .collect()
    }

    /// Learnable parameter count per layer, in construction order.
    pub fn param_counts_by_layer(&self) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = Vec::new();
        self.visit_params(&mut |p| match out.last_mut() {
            Some((layer, n)) if layer == p.layer() => *n += p.len(),
            _ => out.push((p.layer().to_string(), p.len())),
        });
        out
    }

    /// Copies parameter values from a network of the same configuration,
    /// converting the element type.
    pub fn load_from<U: Real>(&mut self, other: &Network<U>) -> Result<()> {
        let mut values = Vec::new();
        other.visit_params(&mut |p| values.push((p.name.clone(), p.value.clone())));
        let mut iter = values.into_iter();
        let mut err = None;
        self.visit_params_mut(&mut |p| match iter.next() {
            Some((name, v)) if name == p.name && v.len() == p.len() => {
                p.value = v.iter().map(|x| T::of(x.as_f64())).collect();
            }
            other => {
                err.get_or_insert_with(|| {
                    Error::Incompatible(format!(
                        "parameter {} does not match {:?}",
                        p.name,
                        other.map(|(n, _)| n)
                    ))
                });
            }
        });
        err.map_or(Ok(()), Err)
    }
}

impl<T: Real> Parameterized<T> for Network<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.attention.visit_params(f);
        self.stem.visit_params(f);
        for b in &self.encoder {
            b.visit_params(f);
        }
        for s in &self.decoder {
            s.fuse.visit_params(f);
            s.fuse_act.visit_params(f);
            s.block.visit_params(f);
        }
        self.head.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.attention.visit_params_mut(f);
        self.stem.visit_params_mut(f);
        for b in &mut self.encoder {
            b.visit_params_mut(f);
        }
        for s in &mut self.decoder {
            s.fuse.visit_params_mut(f);
            s.fuse_act.visit_params_mut(f);
            s.block.visit_params_mut(f);
        }
        self.head.visit_params_mut(f);
    }
}
