//! Grouped, strided, dilated 3D convolution with zero "same" padding.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{FeatureMap, Param, Parameterized, Real};

/// Convolution descriptor shared by layer instantiation and cost analysis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel: [usize; 3],
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: [usize; 3],
    /// Isotropic dilation rate.
    pub dilation: usize,
    pub groups: usize,
    pub has_bias: bool,
}

impl ConvSpec {
    /// Cubic kernel, stride 1, no dilation, no grouping, no bias.
    pub fn new(kernel: usize, in_channels: usize, out_channels: usize) -> Self {
        Self {
            kernel: [kernel; 3],
            in_channels,
            out_channels,
            stride: [1; 3],
            dilation: 1,
            groups: 1,
            has_bias: false,
        }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = [s; 3];
        self
    }

    pub fn dilation(mut self, d: usize) -> Self {
        self.dilation = d;
        self
    }

    pub fn groups(mut self, g: usize) -> Self {
        self.groups = g;
        self
    }

    pub fn bias(mut self, b: bool) -> Self {
        self.has_bias = b;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel.contains(&0) || self.stride.contains(&0) {
            return Err(Error::config(format!("kernel and stride must be >= 1: {self:?}")));
        }
        if self.kernel.iter().any(|k| k % 2 == 0) {
            return Err(Error::config(format!("only odd kernels are supported: {self:?}")));
        }
        if self.dilation == 0 || self.groups == 0 {
            return Err(Error::config(format!("dilation and groups must be >= 1: {self:?}")));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::config(format!("channel counts must be >= 1: {self:?}")));
        }
        if !self.in_channels.is_multiple_of(self.groups) || !self.out_channels.is_multiple_of(self.groups) {
            return Err(Error::config(format!(
                "channels {}→{} not divisible by groups {}",
                self.in_channels, self.out_channels, self.groups
            )));
        }
        Ok(())
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Zero padding per axis that preserves extents at stride 1.
    pub fn padding(&self) -> [usize; 3] {
        self.kernel.map(|k| self.dilation * (k - 1) / 2)
    }

    /// Output spatial extents for a given input; equals `ceil(n / stride)` per axis.
    pub fn output_extent(&self, input: [usize; 3]) -> [usize; 3] {
        let pad = self.padding();
        std::array::from_fn(|i| (input[i] + 2 * pad[i] - self.dilation * (self.kernel[i] - 1) - 1) / self.stride[i] + 1)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1; 3] && self.stride == [1; 3]
    }
}

#[derive(Clone, Copy)]
struct Geometry {
    cin_g: usize,
    cout_g: usize,
    kvol: usize,
    input: [usize; 3],
    output: [usize; 3],
}

impl Geometry {
    fn new(spec: &ConvSpec, input: [usize; 3]) -> Self {
        Self {
            cin_g: spec.in_channels / spec.groups,
            cout_g: spec.out_channels / spec.groups,
            kvol: spec.kernel_volume(),
            input,
            output: spec.output_extent(input),
        }
    }

    fn rows(&self) -> usize {
        self.cin_g * self.kvol
    }

    fn out_voxels(&self) -> usize {
        self.output.iter().product()
    }

    fn in_voxels(&self) -> usize {
        self.input.iter().product()
    }
}

/// Walks every (column row, output row segment, input row) triple of the
/// unfolded input of one group. `visit` receives the destination offset in the
/// column buffer, the source offset in the group's input channels and the
/// `(od, id)` range pairs along depth.
fn for_each_tap(
    spec: &ConvSpec,
    geo: &Geometry,
    mut visit: impl FnMut(usize, Option<usize>, &dyn Fn(usize) -> Option<usize>),
) {
    let [_, iw, id] = geo.input;
    let [oh, ow, od] = geo.output;
    let [kh, kw, kd] = spec.kernel;
    let pad = spec.padding().map(|p| p as isize);
    let dil = spec.dilation as isize;
    let stride = spec.stride.map(|s| s as isize);
    let n = geo.out_voxels();
    let in_vox = geo.in_voxels();
    for ci in 0..geo.cin_g {
        let mut kk = 0;
        for a in 0..kh {
            for b in 0..kw {
                for c in 0..kd {
                    let row_base = (ci * geo.kvol + kk) * n;
                    kk += 1;
                    let off_d = c as isize * dil - pad[2];
                    let depth_map = move |o: usize| {
                        let i = o as isize * stride[2] + off_d;
                        (i >= 0 && i < id as isize).then_some(i as usize)
                    };
                    for y in 0..oh {
                        let ih = y as isize * stride[0] + a as isize * dil - pad[0];
                        for x in 0..ow {
                            let iww = x as isize * stride[1] + b as isize * dil - pad[1];
                            let dst = row_base + (y * ow + x) * od;
                            let src = (ih >= 0 && ih < geo.input[0] as isize && iww >= 0 && iww < iw as isize)
                                .then(|| ci * in_vox + (ih as usize * iw + iww as usize) * id);
                            visit(dst, src, &depth_map);
                        }
                    }
                }
            }
        }
    }
}

fn im2col<T: Real>(spec: &ConvSpec, geo: &Geometry, group_input: &[T], col: &mut [T]) {
    let od = geo.output[2];
    for_each_tap(spec, geo, |dst, src, depth_map| {
        let out = &mut col[dst..dst + od];
        match src {
            None => out.iter_mut().for_each(|v| *v = T::zero()),
            Some(src) => {
                for (o, v) in out.iter_mut().enumerate() {
                    *v = depth_map(o).map_or(T::zero(), |i| group_input[src + i]);
                }
            }
        }
    });
}

fn col2im<T: Real>(spec: &ConvSpec, geo: &Geometry, col: &[T], group_grad: &mut [T]) {
    let od = geo.output[2];
    for_each_tap(spec, geo, |dst, src, depth_map| {
        if let Some(src) = src {
            for (o, &v) in col[dst..dst + od].iter().enumerate() {
                if let Some(i) = depth_map(o) {
                    group_grad[src + i] += v;
                }
            }
        }
    });
}

/// Stateless convolution with explicit weights (`[C_out, C_in/g, kh, kw, kd]`).
pub fn conv3d<T: Real>(x: &FeatureMap<T>, spec: &ConvSpec, weight: &[T], bias: Option<&[T]>) -> Result<FeatureMap<T>> {
    spec.validate()?;
    if x.channels() != spec.in_channels {
        return Err(Error::config(format!(
            "convolution expects {} input channels, got {}",
            spec.in_channels,
            x.channels()
        )));
    }
    let geo = Geometry::new(spec, x.spatial());
    let expected = spec.out_channels * geo.rows();
    if weight.len() != expected {
        return Err(Error::config(format!(
            "weight has {} values, expected {expected}",
            weight.len()
        )));
    }
    let [oh, ow, od] = geo.output;
    let n = geo.out_voxels();
    let mut out = FeatureMap::zeros([spec.out_channels, oh, ow, od]);
    let in_group = geo.cin_g * geo.in_voxels();
    let mut col = if spec.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); geo.rows() * n]
    };
    for g in 0..spec.groups {
        let gin = &x.data()[g * in_group..(g + 1) * in_group];
        let cols: &[T] = if spec.is_pointwise() {
            gin
        } else {
            im2col(spec, &geo, gin, &mut col);
            &col
        };
        let w = &weight[g * geo.cout_g * geo.rows()..(g + 1) * geo.cout_g * geo.rows()];
        let dst = &mut out.data_mut()[g * geo.cout_g * n..(g + 1) * geo.cout_g * n];
        crate::tensor::matmul(geo.cout_g, geo.rows(), n, w, cols, dst, false);
    }
    if let Some(bias) = bias {
        for (co, &b) in bias.iter().enumerate() {
            out.channel_mut(co).iter_mut().for_each(|v| *v += b);
        }
    }
    Ok(out)
}

/// A convolution layer owning its parameters and the cached input of the
/// last training-mode forward pass.
#[derive(Clone, Debug)]
pub struct Conv3d<T> {
    pub spec: ConvSpec,
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    input: Option<FeatureMap<T>>,
}

impl<T: Real> Conv3d<T> {
    /// He-normal initialized weights, zero bias.
    pub fn new(name: &str, spec: ConvSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let fan_in = spec.in_channels / spec.groups * spec.kernel_volume();
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
        let shape = vec![
            spec.out_channels,
            spec.in_channels / spec.groups,
            spec.kernel[0],
            spec.kernel[1],
            spec.kernel[2],
        ];
        let n = shape.iter().product();
        let values = (0..n).map(|_| T::of(normal.sample(rng))).collect();
        let weight = Param::new(format!("{name}.weight"), shape, values);
        let bias = spec
            .has_bias
            .then(|| Param::filled(format!("{name}.bias"), vec![spec.out_channels], T::zero()));
        Ok(Self {
            spec,
            weight,
            bias,
            input: None,
        })
    }

    pub fn forward(&mut self, x: &FeatureMap<T>, train: bool) -> Result<FeatureMap<T>> {
        let out = conv3d(
            x,
            &self.spec,
            &self.weight.value,
            self.bias.as_ref().map(|b| b.value.as_slice()),
        )?;
        self.input = train.then(|| x.clone());
        Ok(out)
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, grad_out: &FeatureMap<T>) -> FeatureMap<T> {
        let x = self
            .input
            .take()
            .expect("Conv3d::backward called without a training forward pass");
        let spec = self.spec;
        let geo = Geometry::new(&spec, x.spatial());
        let n = geo.out_voxels();
        let rows = geo.rows();
        assert_eq!(grad_out.shape()[0], spec.out_channels);
        assert_eq!(grad_out.spatial(), geo.output);

        if let Some(bias) = self.bias.as_mut() {
            for (co, g) in bias.grad.iter_mut().enumerate() {
                *g += grad_out.channel(co).iter().copied().sum::<T>();
            }
        }

        let mut grad_in = FeatureMap::zeros(x.shape());
        let in_group = geo.cin_g * geo.in_voxels();
        let pointwise = spec.is_pointwise();
        let mut col = if pointwise {
            Vec::new()
        } else {
            vec![T::zero(); rows * n]
        };
        let mut grad_col = vec![T::zero(); if pointwise { 0 } else { rows * n }];
        for g in 0..spec.groups {
            let gout = &grad_out.data()[g * geo.cout_g * n..(g + 1) * geo.cout_g * n];
            let gin = &x.data()[g * in_group..(g + 1) * in_group];
            let cols: &[T] = if pointwise {
                gin
            } else {
                im2col(&spec, &geo, gin, &mut col);
                &col
            };
            let wrange = g * geo.cout_g * rows..(g + 1) * geo.cout_g * rows;
            // dW = dY · colᵀ
            T::gemm(
                geo.cout_g,
                n,
                rows,
                T::one(),
                gout,
                (n as isize, 1),
                cols,
                (1, n as isize),
                T::one(),
                &mut self.weight.grad[wrange.clone()],
                (rows as isize, 1),
            );
            // dcol = Wᵀ · dY
            let w = &self.weight.value[wrange];
            let grad_in_group = &mut grad_in.data_mut()[g * in_group..(g + 1) * in_group];
            if pointwise {
                T::gemm(
                    rows,
                    geo.cout_g,
                    n,
                    T::one(),
                    w,
                    (1, rows as isize),
                    gout,
                    (n as isize, 1),
                    T::one(),
                    grad_in_group,
                    (n as isize, 1),
                );
            } else {
                T::gemm(
                    rows,
                    geo.cout_g,
                    n,
                    T::one(),
                    w,
                    (1, rows as isize),
                    gout,
                    (n as isize, 1),
                    T::zero(),
                    &mut grad_col,
                    (n as isize, 1),
                );
                col2im(&spec, &geo, &grad_col, grad_in_group);
            }
        }
        grad_in
    }

    pub fn clear_cache(&mut self) {
        self.input = None;
    }
}

impl<T: Real> Parameterized<T> for Conv3d<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.weight);
        if let Some(b) = &self.bias {
            f(b);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }
}
