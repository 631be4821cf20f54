//! Multibranch residual blocks and the adaptive weighted dilated convolution.
//!
//! An MBRes block routes its input through a 1×1×1 convolution, two grouped
//! 3×3×3 convolutions and a closing 1×1×1 convolution, each preceded by group
//! normalization and ReLU, with the residual connection around the whole unit.
//! The MBDRes variant swaps the first grouped 3×3×3 convolution for an
//! [`AdaptiveDilatedConv`]: three parallel grouped convolutions with dilation
//! rates 1, 2 and 3 whose outputs are summed with learnable scalar weights.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::norm::{PreAct, NORM_GROUPS};
use crate::tensor::{FeatureMap, Param, Parameterized, Real};

pub use crate::conv::{Conv3d, ConvSpec};

/// Dilation rates of the three parallel branches.
pub const DILATIONS: [usize; 3] = [1, 2, 3];

/// How the branch weights of an adaptive dilated layer behave.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    /// `w1, w2, w3` start equal and are trained.
    #[default]
    Learnable,
    /// `w1 = w2 = w3 = 1` for the whole run.
    FixedEqual,
    /// No dilated branches: a single dilation-1 convolution.
    Disabled,
}

impl std::fmt::Display for WeightMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            WeightMode::Learnable => "learnable",
            WeightMode::FixedEqual => "fixed_equal",
            WeightMode::Disabled => "disabled",
        })
    }
}

/// Snapshot of one layer's branch weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchWeights {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    pub mode: WeightMode,
}

impl BranchWeights {
    pub const INIT: f64 = 1.0;

    pub fn sum(&self) -> f64 {
        self.w1 + self.w2 + self.w3
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.w1, self.w2, self.w3]
    }
}

/// Three parallel grouped 3×3×3 convolutions (dilations 1, 2, 3) combined as
/// `w1·b1 + w2·b2 + w3·b3`.
#[derive(Clone, Debug)]
pub struct AdaptiveDilatedConv<T> {
    pub mode: WeightMode,
    /// One convolution per dilation rate; only the first exists when disabled.
    pub branches: Vec<Conv3d<T>>,
    /// `[w1, w2, w3]`; absent when disabled.
    pub weights: Option<Param<T>>,
    branch_outputs: Option<Vec<FeatureMap<T>>>,
}

impl<T: Real> AdaptiveDilatedConv<T> {
    pub fn new(name: &str, base: ConvSpec, mode: WeightMode, rng: &mut impl Rng) -> Result<Self> {
        if base.kernel != [3; 3] {
            return Err(Error::config(format!(
                "adaptive dilated layer needs a 3×3×3 kernel, got {:?}",
                base.kernel
            )));
        }
        let rates: &[usize] = if mode == WeightMode::Disabled {
            &DILATIONS[..1]
        } else {
            &DILATIONS
        };
        let branches = rates
            .iter()
            .map(|&d| Conv3d::new(&format!("{name}.d{d}"), base.dilation(d), rng))
            .collect::<Result<Vec<_>>>()?;
        let weights = (mode != WeightMode::Disabled).then(|| {
            let mut p = Param::filled(format!("{name}.weights"), vec![3], T::of(BranchWeights::INIT));
            p.frozen = mode == WeightMode::FixedEqual;
            p
        });
        Ok(Self {
            mode,
            branches,
            weights,
            branch_outputs: None,
        })
    }

    pub fn spec(&self) -> ConvSpec {
        self.branches[0].spec
    }

    pub fn branch_weights(&self) -> Option<BranchWeights> {
        self.weights.as_ref().map(|p| BranchWeights {
            w1: p.value[0].as_f64(),
            w2: p.value[1].as_f64(),
            w3: p.value[2].as_f64(),
            mode: self.mode,
        })
    }

    /// Overwrites `[w1, w2, w3]`; ignored when the layer is disabled.
    pub fn set_branch_weights(&mut self, w: [T; 3]) {
        if let Some(p) = self.weights.as_mut() {
            p.value.copy_from_slice(&w);
        }
    }

    pub fn forward(&mut self, x: &FeatureMap<T>, train: bool) -> Result<FeatureMap<T>> {
        let spec = self.spec();
        if x.channels() != spec.in_channels {
            return Err(Error::config(format!(
                "adaptive dilated layer expects {} channels, got {}",
                spec.in_channels,
                x.channels()
            )));
        }
        let outs = self
            .branches
            .iter_mut()
            .map(|b| b.forward(x, train))
            .collect::<Result<Vec<_>>>()?;
        let Some(weights) = &self.weights else {
            return Ok(outs.into_iter().next().expect("one branch"));
        };
        let mut y = FeatureMap::zeros(outs[0].shape());
        for (out, &w) in outs.iter().zip(&weights.value) {
            y.add_scaled(out, w);
        }
        self.branch_outputs = train.then_some(outs);
        Ok(y)
    }

    pub fn backward(&mut self, grad_out: &FeatureMap<T>) -> FeatureMap<T> {
        let Some(weights) = self.weights.as_mut() else {
            return self.branches[0].backward(grad_out);
        };
        let outs = self
            .branch_outputs
            .take()
            .expect("AdaptiveDilatedConv::backward called without a training forward pass");
        let mut grad_in: Option<FeatureMap<T>> = None;
        for (i, (branch, out)) in self.branches.iter_mut().zip(&outs).enumerate() {
            weights.grad[i] += grad_out.dot(out);
            let g = branch.backward(&grad_out.scale(weights.value[i]));
            match grad_in.as_mut() {
                Some(acc) => acc.add_assign(&g),
                None => grad_in = Some(g),
            }
        }
        grad_in.expect("three branches")
    }
}

impl<T: Real> Parameterized<T> for AdaptiveDilatedConv<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        for b in &self.branches {
            b.visit_params(f);
        }
        if let Some(w) = &self.weights {
            f(w);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        for b in &mut self.branches {
            b.visit_params_mut(f);
        }
        if let Some(w) = &mut self.weights {
            f(w);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub in_channels: usize,
    pub mid_channels: usize,
    pub out_channels: usize,
    pub groups: usize,
    /// Stride 2 on the first grouped 3×3×3 stage.
    pub downsample: bool,
    /// MBDRes (adaptive dilated first stage) rather than MBRes.
    pub dilated: bool,
    pub weight_mode: WeightMode,
}

impl BlockConfig {
    /// A block with `C_mid = C_out`.
    pub fn new(in_channels: usize, out_channels: usize, groups: usize) -> Self {
        Self {
            in_channels,
            mid_channels: out_channels,
            out_channels,
            groups,
            downsample: false,
            dilated: false,
            weight_mode: WeightMode::Learnable,
        }
    }

    pub fn downsample(mut self, yes: bool) -> Self {
        self.downsample = yes;
        self
    }

    pub fn dilated(mut self, mode: WeightMode) -> Self {
        self.dilated = true;
        self.weight_mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let g = self.groups;
        if g == 0 {
            return Err(Error::config("groups must be >= 1"));
        }
        for (what, c) in [
            ("in", self.in_channels),
            ("mid", self.mid_channels),
            ("out", self.out_channels),
        ] {
            if c == 0 || c % g != 0 {
                return Err(Error::config(format!(
                    "{what} channels {c} not divisible by groups {g}"
                )));
            }
            if c % NORM_GROUPS != 0 {
                return Err(Error::config(format!(
                    "{what} channels {c} not divisible by {NORM_GROUPS} normalization groups"
                )));
            }
        }
        Ok(())
    }

    pub fn stride(&self) -> usize {
        if self.downsample {
            2
        } else {
            1
        }
    }

    pub fn needs_projection(&self) -> bool {
        self.in_channels != self.out_channels || self.downsample
    }
}

/// First grouped 3×3×3 stage of a block.
#[derive(Clone, Debug)]
pub enum FirstStage<T> {
    Plain(Conv3d<T>),
    Adaptive(AdaptiveDilatedConv<T>),
}

impl<T: Real> FirstStage<T> {
    fn forward(&mut self, x: &FeatureMap<T>, train: bool) -> Result<FeatureMap<T>> {
        match self {
            FirstStage::Plain(c) => c.forward(x, train),
            FirstStage::Adaptive(a) => a.forward(x, train),
        }
    }

    fn backward(&mut self, g: &FeatureMap<T>) -> FeatureMap<T> {
        match self {
            FirstStage::Plain(c) => c.backward(g),
            FirstStage::Adaptive(a) => a.backward(g),
        }
    }

    /// The dilation-1 convolution (the whole stage for MBRes).
    pub fn primary_conv_mut(&mut self) -> &mut Conv3d<T> {
        match self {
            FirstStage::Plain(c) => c,
            FirstStage::Adaptive(a) => &mut a.branches[0],
        }
    }
}

/// An MBRes or MBDRes block depending on [`BlockConfig::dilated`].
#[derive(Clone, Debug)]
pub struct ResidualBlock<T> {
    pub cfg: BlockConfig,
    pub pre_in: PreAct<T>,
    pub conv_in: Conv3d<T>,
    pub pre_a: PreAct<T>,
    pub stage_a: FirstStage<T>,
    pub pre_b: PreAct<T>,
    pub conv_b: Conv3d<T>,
    pub pre_out: PreAct<T>,
    pub conv_out: Conv3d<T>,
    /// 1×1×1 projection when channels or resolution change.
    pub shortcut: Option<Conv3d<T>>,
}

impl<T: Real> ResidualBlock<T> {
    pub fn new(name: &str, cfg: BlockConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let BlockConfig {
            in_channels: cin,
            mid_channels: cmid,
            out_channels: cout,
            groups: g,
            ..
        } = cfg;
        let grouped = ConvSpec::new(3, cmid, cmid).groups(g);
        let stage_a = if cfg.dilated {
            FirstStage::Adaptive(AdaptiveDilatedConv::new(
                &format!("{name}.conv_a"),
                grouped.stride(cfg.stride()),
                cfg.weight_mode,
                rng,
            )?)
        } else {
            FirstStage::Plain(Conv3d::new(
                &format!("{name}.conv_a"),
                grouped.stride(cfg.stride()),
                rng,
            )?)
        };
        let shortcut = cfg
            .needs_projection()
            .then(|| {
                Conv3d::new(
                    &format!("{name}.shortcut"),
                    ConvSpec::new(1, cin, cout).stride(cfg.stride()),
                    rng,
                )
            })
            .transpose()?;
        Ok(Self {
            cfg,
            pre_in: PreAct::new(&format!("{name}.pre_in"), cin)?,
            conv_in: Conv3d::new(&format!("{name}.conv_in"), ConvSpec::new(1, cin, cmid), rng)?,
            pre_a: PreAct::new(&format!("{name}.pre_a"), cmid)?,
            stage_a,
            pre_b: PreAct::new(&format!("{name}.pre_b"), cmid)?,
            conv_b: Conv3d::new(&format!("{name}.conv_b"), grouped, rng)?,
            pre_out: PreAct::new(&format!("{name}.pre_out"), cmid)?,
            conv_out: Conv3d::new(&format!("{name}.conv_out"), ConvSpec::new(1, cmid, cout), rng)?,
            shortcut,
        })
    }

    pub fn adaptive(&self) -> Option<&AdaptiveDilatedConv<T>> {
        match &self.stage_a {
            FirstStage::Adaptive(a) => Some(a),
            FirstStage::Plain(_) => None,
        }
    }

    pub fn adaptive_mut(&mut self) -> Option<&mut AdaptiveDilatedConv<T>> {
        match &mut self.stage_a {
            FirstStage::Adaptive(a) => Some(a),
            FirstStage::Plain(_) => None,
        }
    }

    pub fn forward(&mut self, x: &FeatureMap<T>, train: bool) -> Result<FeatureMap<T>> {
        if x.channels() != self.cfg.in_channels {
            return Err(Error::config(format!(
                "block expects {} input channels, got {}",
                self.cfg.in_channels,
                x.channels()
            )));
        }
        let h = self.pre_in.forward(x, train)?;
        let h = self.conv_in.forward(&h, train)?;
        let h = self.pre_a.forward(&h, train)?;
        let h = self.stage_a.forward(&h, train)?;
        let h = self.pre_b.forward(&h, train)?;
        let h = self.conv_b.forward(&h, train)?;
        let h = self.pre_out.forward(&h, train)?;
        let mut out = self.conv_out.forward(&h, train)?;
        match self.shortcut.as_mut() {
            Some(proj) => out.add_assign(&proj.forward(x, train)?),
            None => out.add_assign(x),
        }
        Ok(out)
    }

    pub fn backward(&mut self, grad_out: &FeatureMap<T>) -> FeatureMap<T> {
        let g = self.conv_out.backward(grad_out);
        let g = self.pre_out.backward(&g);
        let g = self.conv_b.backward(&g);
        let g = self.pre_b.backward(&g);
        let g = self.stage_a.backward(&g);
        let g = self.pre_a.backward(&g);
        let g = self.conv_in.backward(&g);
        let mut g = self.pre_in.backward(&g);
        match self.shortcut.as_mut() {
            Some(proj) => g.add_assign(&proj.backward(grad_out)),
            None => g.add_assign(grad_out),
        }
        g
    }
}

impl<T: Real> Parameterized<T> for ResidualBlock<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.pre_in.visit_params(f);
        self.conv_in.visit_params(f);
        self.pre_a.visit_params(f);
        match &self.stage_a {
            FirstStage::Plain(c) => c.visit_params(f),
            FirstStage::Adaptive(a) => a.visit_params(f),
        }
        self.pre_b.visit_params(f);
        self.conv_b.visit_params(f);
        self.pre_out.visit_params(f);
        self.conv_out.visit_params(f);
        if let Some(s) = &self.shortcut {
            s.visit_params(f);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.pre_in.visit_params_mut(f);
        self.conv_in.visit_params_mut(f);
        self.pre_a.visit_params_mut(f);
        match &mut self.stage_a {
            FirstStage::Plain(c) => c.visit_params_mut(f),
            FirstStage::Adaptive(a) => a.visit_params_mut(f),
        }
        self.pre_b.visit_params_mut(f);
        self.conv_b.visit_params_mut(f);
        self.pre_out.visit_params_mut(f);
        self.conv_out.visit_params_mut(f);
        if let Some(s) = &mut self.shortcut {
            s.visit_params_mut(f);
        }
    }
}
