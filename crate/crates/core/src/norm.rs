//! Group normalization and the pre-activation (norm → ReLU) unit.

use crate::error::{Error, Result};
use crate::tensor::{FeatureMap, Param, Parameterized, Real};

pub const NORM_GROUPS: usize = 8;
const EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
struct NormCache<T> {
    normalized: FeatureMap<T>,
    inv_std: Vec<T>,
}

/// Group normalization with a per-channel affine transform.
#[derive(Clone, Debug)]
pub struct GroupNorm<T> {
    pub groups: usize,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    cache: Option<NormCache<T>>,
}

impl<T: Real> GroupNorm<T> {
    pub fn new(name: &str, channels: usize, groups: usize) -> Result<Self> {
        if groups == 0 || !channels.is_multiple_of(groups) {
            return Err(Error::config(format!(
                "group norm: {channels} channels not divisible into {groups} groups"
            )));
        }
        Ok(Self {
            groups,
            gamma: Param::filled(format!("{name}.gamma"), vec![channels], T::one()),
            beta: Param::filled(format!("{name}.beta"), vec![channels], T::zero()),
            cache: None,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward(&mut self, x: &FeatureMap<T>, train: bool) -> Result<FeatureMap<T>> {
        let c = self.channels();
        if x.channels() != c {
            return Err(Error::config(format!(
                "group norm expects {c} channels, got {}",
                x.channels()
            )));
        }
        let span = c / self.groups * x.voxels();
        let n = T::of(span as f64);
        let mut normalized = x.clone();
        let mut inv_std = Vec::with_capacity(self.groups);
        for chunk in normalized.data_mut().chunks_mut(span) {
            let mean = chunk.iter().copied().sum::<T>() / n;
            let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let istd = (var + T::of(EPS)).sqrt().recip();
            chunk.iter_mut().for_each(|v| *v = (*v - mean) * istd);
            inv_std.push(istd);
        }
        let mut out = normalized.clone();
        for ch in 0..c {
            let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
            out.channel_mut(ch).iter_mut().for_each(|v| *v = *v * g + b);
        }
        self.cache = train.then_some(NormCache { normalized, inv_std });
        Ok(out)
    }

    pub fn backward(&mut self, grad_out: &FeatureMap<T>) -> FeatureMap<T> {
        let NormCache { normalized, inv_std } = self
            .cache
            .take()
            .expect("GroupNorm::backward called without a training forward pass");
        let c = self.channels();
        let per_group = c / self.groups;
        let vox = normalized.voxels();
        let n = T::of((per_group * vox) as f64);
        let mut grad_in = FeatureMap::zeros(normalized.shape());
        for g in 0..self.groups {
            let mut sum_dxhat = T::zero();
            let mut sum_dxhat_xhat = T::zero();
            for ch in g * per_group..(g + 1) * per_group {
                let gamma = self.gamma.value[ch];
                let (mut dg, mut db) = (T::zero(), T::zero());
                for (&dy, &xh) in grad_out.channel(ch).iter().zip(normalized.channel(ch)) {
                    dg += dy * xh;
                    db += dy;
                    sum_dxhat += dy * gamma;
                    sum_dxhat_xhat += dy * gamma * xh;
                }
                self.gamma.grad[ch] += dg;
                self.beta.grad[ch] += db;
            }
            let istd = inv_std[g];
            for ch in g * per_group..(g + 1) * per_group {
                let gamma = self.gamma.value[ch];
                let dst = grad_in.channel_mut(ch);
                for ((d, &dy), &xh) in dst.iter_mut().zip(grad_out.channel(ch)).zip(normalized.channel(ch)) {
                    *d = istd * (dy * gamma - (sum_dxhat + xh * sum_dxhat_xhat) / n);
                }
            }
        }
        grad_in
    }
}

impl<T: Real> Parameterized<T> for GroupNorm<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.gamma);
        f(&self.beta);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}

/// Rectified linear unit remembering which activations were positive.
#[derive(Clone, Debug, Default)]
pub struct Relu {
    mask: Option<Vec<bool>>,
}

impl Relu {
    pub fn forward<T: Real>(&mut self, x: &FeatureMap<T>, train: bool) -> FeatureMap<T> {
        if train {
            self.mask = Some(x.data().iter().map(|&v| v > T::zero()).collect());
        }
        x.map(|v| v.max(T::zero()))
    }

    pub fn backward<T: Real>(&mut self, grad_out: &FeatureMap<T>) -> FeatureMap<T> {
        let mask = self
            .mask
            .take()
            .expect("Relu::backward called without a training forward pass");
        let mut g = grad_out.clone();
        for (v, keep) in g.data_mut().iter_mut().zip(mask) {
            if !keep {
                *v = T::zero();
            }
        }
        g
    }
}

/// Normalization followed by ReLU, as placed in front of every convolution of
/// a pre-activated residual unit.
#[derive(Clone, Debug)]
pub struct PreAct<T> {
    pub norm: GroupNorm<T>,
    relu: Relu,
}

impl<T: Real> PreAct<T> {
    pub fn new(name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            norm: GroupNorm::new(name, channels, NORM_GROUPS)?,
            relu: Relu::default(),
        })
    }

    pub fn forward(&mut self, x: &FeatureMap<T>, train: bool) -> Result<FeatureMap<T>> {
        let y = self.norm.forward(x, train)?;
        Ok(self.relu.forward(&y, train))
    }

    pub fn backward(&mut self, grad_out: &FeatureMap<T>) -> FeatureMap<T> {
        let g = self.relu.backward(grad_out);
        self.norm.backward(&g)
    }
}

impl<T: Real> Parameterized<T> for PreAct<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.norm.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.norm.visit_params_mut(f);
    }
}
