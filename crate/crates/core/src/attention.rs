//! Split channel/spatial attention (SACA) and the ablation variants it is
//! compared against.
//!
//! SACA splits the channels in two halves. The first half is recalibrated by
//! squeeze-and-excitation (global average pool → bottleneck → sigmoid gate
//! per channel), the second by a spatial gate (1×1×1 convolution to one
//! channel → sigmoid, broadcast over channels). The recalibrated halves are
//! concatenated, the input is added back, and a channel shuffle mixes the two
//! halves.

use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::conv::{Conv3d, ConvSpec};
use crate::error::{Error, Result};
use crate::norm::Relu;
use crate::ops::sigmoid;
use crate::tensor::{FeatureMap, Param, Parameterized, Real};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionVariant {
    None,
    /// Channel excitation over all channels.
    ChSe,
    /// Channel then spatial excitation in series over all channels.
    ChSePlusSpSe,
    #[default]
    Saca3d,
}

impl AttentionVariant {
    pub const ALL: [AttentionVariant; 4] = [
        AttentionVariant::None,
        AttentionVariant::ChSe,
        AttentionVariant::ChSePlusSpSe,
        AttentionVariant::Saca3d,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            AttentionVariant::None => "none",
            AttentionVariant::ChSe => "ch_se",
            AttentionVariant::ChSePlusSpSe => "ch_se_plus_sp_se",
            AttentionVariant::Saca3d => "saca3d",
        }
    }
}

impl std::fmt::Display for AttentionVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttentionVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AttentionVariant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown attention variant `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttentionConfig {
    pub variant: AttentionVariant,
    pub reduction_ratio: usize,
    pub shuffle_groups: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            variant: AttentionVariant::Saca3d,
            reduction_ratio: 2,
            shuffle_groups: 2,
        }
    }
}

impl AttentionConfig {
    pub fn with_variant(variant: AttentionVariant) -> Self {
        Self {
            variant,
            ..Self::default()
        }
    }

    /// Checks the configuration against the channel count it will see.
    pub fn validate(&self, channels: usize) -> Result<()> {
        let r = self.reduction_ratio;
        if r == 0 {
            return Err(Error::config("reduction ratio must be >= 1"));
        }
        match self.variant {
            AttentionVariant::None => Ok(()),
            AttentionVariant::ChSe | AttentionVariant::ChSePlusSpSe => {
                if !channels.is_multiple_of(r) {
                    return Err(Error::config(format!(
                        "reduction ratio {r} does not divide {channels} channels"
                    )));
                }
                Ok(())
            }
            AttentionVariant::Saca3d => {
                if !channels.is_multiple_of(2) {
                    return Err(Error::config(format!(
                        "channel split needs an even channel count, got {channels}"
                    )));
                }
                if !(channels / 2).is_multiple_of(r) {
                    return Err(Error::config(format!(
                        "reduction ratio {r} does not divide the {} channels of each half",
                        channels / 2
                    )));
                }
                if self.shuffle_groups == 0 || !channels.is_multiple_of(self.shuffle_groups) {
                    return Err(Error::config(format!(
                        "shuffle groups {} do not divide {channels} channels",
                        self.shuffle_groups
                    )));
                }
                Ok(())
            }
        }
    }
}

/// Splits channels into the first and second half.
pub fn channel_split<T: Real>(x: &FeatureMap<T>) -> Result<(FeatureMap<T>, FeatureMap<T>)> {
    let c = x.channels();
    if !c.is_multiple_of(2) {
        return Err(Error::config(format!(
            "channel split needs an even channel count, got {c}"
        )));
    }
    Ok((x.channel_range(0, c / 2), x.channel_range(c / 2, c)))
}

fn permute_channels<T: Real>(x: &FeatureMap<T>, target: impl Fn(usize) -> usize) -> FeatureMap<T> {
    let mut out = FeatureMap::zeros(x.shape());
    for c in 0..x.channels() {
        out.channel_mut(target(c)).copy_from_slice(x.channel(c));
    }
    out
}

/// Moves the channel at (group `i`, slot `j`) to (slot `j`, group `i`).
pub fn channel_shuffle<T: Real>(x: &FeatureMap<T>, groups: usize) -> Result<FeatureMap<T>> {
    let c = x.channels();
    if groups == 0 || !c.is_multiple_of(groups) {
        return Err(Error::config(format!(
            "shuffle groups {groups} do not divide {c} channels"
        )));
    }
    let per = c / groups;
    Ok(permute_channels(x, |ch| (ch % per) * groups + ch / per))
}

/// Inverse permutation of [`channel_shuffle`].
pub fn channel_unshuffle<T: Real>(x: &FeatureMap<T>, groups: usize) -> Result<FeatureMap<T>> {
    let c = x.channels();
    if groups == 0 || !c.is_multiple_of(groups) {
        return Err(Error::config(format!(
            "shuffle groups {groups} do not divide {c} channels"
        )));
    }
    channel_shuffle(x, c / groups)
}

#[derive(Clone, Debug)]
struct ExcitationCache<T> {
    input: FeatureMap<T>,
    gates: Vec<T>,
}

/// Squeeze-and-excitation: `x · σ(fc2(relu(fc1(avgpool(x)))))` per channel.
#[derive(Clone, Debug)]
pub struct ChannelExcitation<T> {
    pub fc1: Conv3d<T>,
    pub fc2: Conv3d<T>,
    relu: Relu,
    cache: Option<ExcitationCache<T>>,
}

impl<T: Real> ChannelExcitation<T> {
    pub fn new(name: &str, channels: usize, reduction: usize, rng: &mut impl Rng) -> Result<Self> {
        if reduction == 0 || !channels.is_multiple_of(reduction) {
            return Err(Error::config(format!(
                "reduction ratio {reduction} does not divide {channels} channels"
            )));
        }
        let hidden = channels / reduction;
        Ok(Self {
            fc1: Conv3d::new(
                &format!("{name}.fc1"),
                ConvSpec::new(1, channels, hidden).bias(true),
                rng,
            )?,
            fc2: Conv3d::new(
                &format!("{name}.fc2"),
                ConvSpec::new(1, hidden, channels).bias(true),
                rng,
            )?,
            relu: Relu::default(),
            cache: None,
        })
    }

    pub fn channels(&self) -> usize {
        self.fc1.spec.in_channels
    }

    /// Per-channel gate values for `x`, each strictly inside (0, 1).
    pub fn gates(&mut self, x: &FeatureMap<T>, train: bool) -> Result<Vec<T>> {
        if x.channels() != self.channels() {
            return Err(Error::config(format!(
                "channel excitation expects {} channels, got {}",
                self.channels(),
                x.channels()
            )));
        }
        let n = T::of(x.voxels() as f64);
        let pooled: Vec<T> = (0..x.channels())
            .map(|c| x.channel(c).iter().copied().sum::<T>() / n)
            .collect();
        let pooled = FeatureMap::from_vec([x.channels(), 1, 1, 1], pooled)?;
        let z = self.fc1.forward(&pooled, train)?;
        let a = self.relu.forward(&z, train);
        let s = self.fc2.forward(&a, train)?;
        Ok(s.data().iter().map(|&v| sigmoid(v)).collect())
    }

    pub fn forward(&mut self, x: &FeatureMap<T>, train: bool) -> Result<FeatureMap<T>> {
        let gates = self.gates(x, train)?;
        let mut out = x.clone();
        for (c, &g) in gates.iter().enumerate() {
            out.channel_mut(c).iter_mut().for_each(|v| *v *= g);
        }
        self.cache = train.then(|| ExcitationCache {
            input: x.clone(),
            gates,
        });
        Ok(out)
    }

    pub fn backward(&mut self, grad_out: &FeatureMap<T>) -> FeatureMap<T> {
        let ExcitationCache { input, gates } = self
            .cache
            .take()
            .expect("ChannelExcitation::backward called without a training forward pass");
        let c = input.channels();
        let ds: Vec<T> = (0..c)
            .map(|ch| {
                let dgate = grad_out
                    .channel(ch)
                    .iter()
                    .zip(input.channel(ch))
                    .fold(T::zero(), |acc, (&g, &x)| acc + g * x);
                dgate * gates[ch] * (T::one() - gates[ch])
            })
            .collect();
        let ds = FeatureMap::from_vec([c, 1, 1, 1], ds).expect("gate shape");
        let da = self.fc2.backward(&ds);
        let dz = self.relu.backward(&da);
        let dpooled = self.fc1.backward(&dz);
        let inv_n = T::of(1.0 / input.voxels() as f64);
        let mut grad_in = grad_out.clone();
        for ch in 0..c {
            let (g, dp) = (gates[ch], dpooled.data()[ch] * inv_n);
            grad_in.channel_mut(ch).iter_mut().for_each(|v| *v = *v * g + dp);
        }
        grad_in
    }
}

impl<T: Real> Parameterized<T> for ChannelExcitation<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.fc1.visit_params(f);
        self.fc2.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.fc1.visit_params_mut(f);
        self.fc2.visit_params_mut(f);
    }
}

/// Spatial excitation: `x · σ(fs(x))` with a single-channel gate map
/// broadcast over all channels.
#[derive(Clone, Debug)]
pub struct SpatialExcitation<T> {
    pub fs: Conv3d<T>,
    cache: Option<ExcitationCache<T>>,
}

impl<T: Real> SpatialExcitation<T> {
    pub fn new(name: &str, channels: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            fs: Conv3d::new(&format!("{name}.fs"), ConvSpec::new(1, channels, 1).bias(true), rng)?,
            cache: None,
        })
    }

    /// Gate map over voxels, each value strictly inside (0, 1).
    pub fn gates(&mut self, x: &FeatureMap<T>, train: bool) -> Result<Vec<T>> {
        let s = self.fs.forward(x, train)?;
        Ok(s.data().iter().map(|&v| sigmoid(v)).collect())
    }

    pub fn forward(&mut self, x: &FeatureMap<T>, train: bool) -> Result<FeatureMap<T>> {
        let gates = self.gates(x, train)?;
        let mut out = x.clone();
        for c in 0..x.channels() {
            for (v, &g) in out.channel_mut(c).iter_mut().zip(&gates) {
                *v *= g;
            }
        }
        self.cache = train.then(|| ExcitationCache {
            input: x.clone(),
            gates,
        });
        Ok(out)
    }

    pub fn backward(&mut self, grad_out: &FeatureMap<T>) -> FeatureMap<T> {
        let ExcitationCache { input, gates } = self
            .cache
            .take()
            .expect("SpatialExcitation::backward called without a training forward pass");
        let mut ds = vec![T::zero(); input.voxels()];
        for c in 0..input.channels() {
            for ((d, &g), &x) in ds.iter_mut().zip(grad_out.channel(c)).zip(input.channel(c)) {
                *d += g * x;
            }
        }
        for (d, &g) in ds.iter_mut().zip(&gates) {
            *d = *d * g * (T::one() - g);
        }
        let [h, w, dd] = input.spatial();
        let ds = FeatureMap::from_vec([1, h, w, dd], ds).expect("gate shape");
        let mut grad_in = self.fs.backward(&ds);
        for c in 0..input.channels() {
            for ((d, &g), &gate) in grad_in.channel_mut(c).iter_mut().zip(grad_out.channel(c)).zip(&gates) {
                *d += g * gate;
            }
        }
        grad_in
    }
}

impl<T: Real> Parameterized<T> for SpatialExcitation<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.fs.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.fs.visit_params_mut(f);
    }
}

/// Split → parallel channel/spatial excitation → concat → + input → shuffle.
#[derive(Clone, Debug)]
pub struct Saca3d<T> {
    pub channel: ChannelExcitation<T>,
    pub spatial: SpatialExcitation<T>,
    pub shuffle_groups: usize,
}

impl<T: Real> Saca3d<T> {
    pub fn new(name: &str, channels: usize, cfg: &AttentionConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate(channels)?;
        Ok(Self {
            channel: ChannelExcitation::new(&format!("{name}.ce"), channels / 2, cfg.reduction_ratio, rng)?,
            spatial: SpatialExcitation::new(&format!("{name}.se"), channels / 2, rng)?,
            shuffle_groups: cfg.shuffle_groups,
        })
    }

    pub fn forward(&mut self, x: &FeatureMap<T>, train: bool) -> Result<FeatureMap<T>> {
        let (xc, xs) = channel_split(x)?;
        let yc = self.channel.forward(&xc, train)?;
        let ys = self.spatial.forward(&xs, train)?;
        let mut fused = FeatureMap::concat_channels(&[&yc, &ys])?;
        fused.add_assign(x);
        channel_shuffle(&fused, self.shuffle_groups)
    }

    pub fn backward(&mut self, grad_out: &FeatureMap<T>) -> FeatureMap<T> {
        let g = channel_unshuffle(grad_out, self.shuffle_groups).expect("validated groups");
        let (gc, gs) = channel_split(&g).expect("validated split");
        let dc = self.channel.backward(&gc);
        let ds = self.spatial.backward(&gs);
        let mut grad_in = FeatureMap::concat_channels(&[&dc, &ds]).expect("matching halves");
        grad_in.add_assign(&g);
        grad_in
    }
}

impl<T: Real> Parameterized<T> for Saca3d<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.channel.visit_params(f);
        self.spatial.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.channel.visit_params_mut(f);
        self.spatial.visit_params_mut(f);
    }
}

/// Attention stage selected by [`AttentionVariant`].
#[derive(Clone, Debug)]
pub enum Attention<T> {
    None,
    ChSe(ChannelExcitation<T>),
    ChSePlusSpSe(ChannelExcitation<T>, SpatialExcitation<T>),
    Saca3d(Saca3d<T>),
}

impl<T: Real> Attention<T> {
    pub fn new(name: &str, channels: usize, cfg: &AttentionConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate(channels)?;
        let r = cfg.reduction_ratio;
        Ok(match cfg.variant {
            AttentionVariant::None => Attention::None,
            AttentionVariant::ChSe => Attention::ChSe(ChannelExcitation::new(&format!("{name}.ce"), channels, r, rng)?),
            AttentionVariant::ChSePlusSpSe => Attention::ChSePlusSpSe(
                ChannelExcitation::new(&format!("{name}.ce"), channels, r, rng)?,
                SpatialExcitation::new(&format!("{name}.se"), channels, rng)?,
            ),
            AttentionVariant::Saca3d => Attention::Saca3d(Saca3d::new(name, channels, cfg, rng)?),
        })
    }

    pub fn variant(&self) -> AttentionVariant {
        match self {
            Attention::None => AttentionVariant::None,
            Attention::ChSe(_) => AttentionVariant::ChSe,
            Attention::ChSePlusSpSe(..) => AttentionVariant::ChSePlusSpSe,
            Attention::Saca3d(_) => AttentionVariant::Saca3d,
        }
    }

    pub fn forward(&mut self, x: &FeatureMap<T>, train: bool) -> Result<FeatureMap<T>> {
        match self {
            Attention::None => Ok(x.clone()),
            Attention::ChSe(ce) => ce.forward(x, train),
            Attention::ChSePlusSpSe(ce, se) => {
                let y = ce.forward(x, train)?;
                se.forward(&y, train)
            }
            Attention::Saca3d(s) => s.forward(x, train),
        }
    }

    pub fn backward(&mut self, grad_out: &FeatureMap<T>) -> FeatureMap<T> {
        match self {
            Attention::None => grad_out.clone(),
            Attention::ChSe(ce) => ce.backward(grad_out),
            Attention::ChSePlusSpSe(ce, se) => {
                let g = se.backward(grad_out);
                ce.backward(&g)
            }
            Attention::Saca3d(s) => s.backward(grad_out),
        }
    }
}

impl<T: Real> Parameterized<T> for Attention<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        match self {
            Attention::None => {}
            Attention::ChSe(ce) => ce.visit_params(f),
            Attention::ChSePlusSpSe(ce, se) => {
                ce.visit_params(f);
                se.visit_params(f);
            }
            Attention::Saca3d(s) => s.visit_params(f),
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        match self {
            Attention::None => {}
            Attention::ChSe(ce) => ce.visit_params_mut(f),
            Attention::ChSePlusSpSe(ce, se) => {
                ce.visit_params_mut(f);
                se.visit_params_mut(f);
            }
            Attention::Saca3d(s) => s.visit_params_mut(f),
        }
    }
}

/// One-shot stateless application of an attention variant with freshly
/// initialized parameters.
pub fn apply_attention<T: Real>(x: &FeatureMap<T>, cfg: &AttentionConfig, rng: &mut impl Rng) -> Result<FeatureMap<T>> {
    Attention::new("attn", x.channels(), cfg, rng)?.forward(x, false)
}
