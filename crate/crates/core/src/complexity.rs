//! Analytic parameter and FLOP accounting.
//!
//! Convention: a convolution costs `kh·kw·kd·(C_in/g)·C_out` parameters (plus
//! `C_out` for a bias) and `2·kh·kw·kd·(C_in/g)·C_out·h·w·d` FLOPs over its
//! output extent. Normalization affine parameters are counted as parameters
//! but bias, normalization, activation, upsampling, shuffling and the branch
//! weighting contribute no FLOPs. All three dilation branches of an adaptive
//! layer are counted since they all execute.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::attention::AttentionVariant;
use crate::blocks::{BlockConfig, WeightMode, DILATIONS};
use crate::conv::ConvSpec;
use crate::error::{Error, Result};
use crate::network::{Network, NetworkConfig};

pub fn conv_params(spec: &ConvSpec) -> u64 {
    let weights = spec.kernel_volume() as u64 * (spec.in_channels / spec.groups) as u64 * spec.out_channels as u64;
    weights + if spec.has_bias { spec.out_channels as u64 } else { 0 }
}

pub fn conv_flops(spec: &ConvSpec, out: [usize; 3]) -> u64 {
    2 * spec.kernel_volume() as u64
        * (spec.in_channels / spec.groups) as u64
        * spec.out_channels as u64
        * out.iter().map(|&v| v as u64).product::<u64>()
}

/// `(ungrouped, grouped)` parameter counts of the two 3×3×3 stages of a
/// residual unit. The grouped count is summed branch by branch over the `g`
/// parallel paths.
pub fn grouping_reduction_check(cin: usize, cmid: usize, cout: usize, g: usize) -> Result<(u64, u64)> {
    if g == 0 || !cin.is_multiple_of(g) || !cmid.is_multiple_of(g) || !cout.is_multiple_of(g) {
        return Err(Error::config(format!(
            "channels ({cin}, {cmid}, {cout}) not divisible by {g} groups"
        )));
    }
    let ungrouped = 27 * (cin * cmid + cmid * cout) as u64;
    let grouped = (0..g)
        .map(|_| 27 * ((cin / g) * (cmid / g) + (cmid / g) * (cout / g)) as u64)
        .sum();
    Ok((ungrouped, grouped))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub name: String,
    pub params: u64,
    pub flops: u64,
    /// `[channels, h, w, d]` of the layer output.
    pub output_shape: [usize; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub input_shape: [usize; 3],
    pub stage_widths: Vec<usize>,
    pub per_layer: Vec<LayerCost>,
    pub total_params: u64,
    pub total_flops: u64,
    /// Analytic parameters equal the instantiated model's, layer by layer.
    pub reconciled: bool,
    /// Layers whose counts disagree, as `(name, analytic, instantiated)`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub mismatches: Vec<(String, u64, u64)>,
}

impl ComplexityReport {
    pub fn params_millions(&self) -> f64 {
        self.total_params as f64 / 1e6
    }

    pub fn gflops(&self) -> f64 {
        self.total_flops as f64 / 1e9
    }

    /// Plain-text table followed by totals.
    pub fn to_table(&self) -> String {
        let width = self.per_layer.iter().map(|l| l.name.len()).max().unwrap_or(5).max(5);
        let mut s = String::new();
        let _ = writeln!(s, "{:<width$}  {:>10}  {:>16}  output", "layer", "params", "flops");
        for l in &self.per_layer {
            let [c, h, w, d] = l.output_shape;
            let _ = writeln!(
                s,
                "{:<width$}  {:>10}  {:>16}  {c}×{h}×{w}×{d}",
                l.name, l.params, l.flops
            );
        }
        let [h, w, d] = self.input_shape;
        let _ = writeln!(s, "input {h}×{w}×{d}, stage widths {:?}", self.stage_widths);
        let _ = writeln!(
            s,
            "total params {} ({:.3} M), total FLOPs {} ({:.3} G), reconciled: {}",
            self.total_params,
            self.params_millions(),
            self.total_flops,
            self.gflops(),
            self.reconciled
        );
        s
    }
}

struct Walker {
    layers: Vec<LayerCost>,
}

impl Walker {
    fn push(&mut self, name: String, params: u64, flops: u64, output_shape: [usize; 4]) {
        self.layers.push(LayerCost {
            name,
            params,
            flops,
            output_shape,
        });
    }

    fn conv(&mut self, name: String, spec: ConvSpec, input: [usize; 3]) -> [usize; 3] {
        let out = spec.output_extent(input);
        self.push(
            name,
            conv_params(&spec),
            conv_flops(&spec, out),
            [spec.out_channels, out[0], out[1], out[2]],
        );
        out
    }

    fn norm(&mut self, name: String, channels: usize, at: [usize; 3]) {
        self.push(name, 2 * channels as u64, 0, [channels, at[0], at[1], at[2]]);
    }

    fn block(&mut self, name: &str, cfg: BlockConfig, input: [usize; 3]) -> [usize; 3] {
        let (cin, cmid, cout, g) = (cfg.in_channels, cfg.mid_channels, cfg.out_channels, cfg.groups);
        let stride = if cfg.downsample { 2 } else { 1 };
        self.norm(format!("{name}.pre_in"), cin, input);
        self.conv(format!("{name}.conv_in"), ConvSpec::new(1, cin, cmid), input);
        self.norm(format!("{name}.pre_a"), cmid, input);
        let grouped = ConvSpec::new(3, cmid, cmid).groups(g).stride(stride);
        let mid = if cfg.dilated && cfg.weight_mode != WeightMode::Disabled {
            let mut out = input;
            for d in DILATIONS {
                out = self.conv(format!("{name}.conv_a.d{d}"), grouped.dilation(d), input);
            }
            self.push(format!("{name}.conv_a"), 3, 0, [cmid, out[0], out[1], out[2]]);
            out
        } else if cfg.dilated {
            self.conv(format!("{name}.conv_a.d1"), grouped, input)
        } else {
            self.conv(format!("{name}.conv_a"), grouped, input)
        };
        self.norm(format!("{name}.pre_b"), cmid, mid);
        self.conv(format!("{name}.conv_b"), ConvSpec::new(3, cmid, cmid).groups(g), mid);
        self.norm(format!("{name}.pre_out"), cmid, mid);
        self.conv(format!("{name}.conv_out"), ConvSpec::new(1, cmid, cout), mid);
        if cin != cout || cfg.downsample {
            self.conv(
                format!("{name}.shortcut"),
                ConvSpec::new(1, cin, cout).stride(stride),
                input,
            );
        }
        mid
    }
}

/// Walks the network graph for `cfg` at the given input extent without
/// instantiating it. `reconciled` is left `false`; see [`model_complexity`].
pub fn analyze(cfg: &NetworkConfig, input: [usize; 3]) -> Result<ComplexityReport> {
    cfg.validate()?;
    cfg.check_input([cfg.in_modalities, input[0], input[1], input[2]])?;
    let mut walk = Walker { layers: Vec::new() };
    let m = cfg.in_modalities;
    let r = cfg.attention.reduction_ratio;
    let pooled = [1, 1, 1];
    match cfg.attention.variant {
        AttentionVariant::None => {}
        AttentionVariant::ChSe | AttentionVariant::ChSePlusSpSe => {
            walk.conv("attention.ce.fc1".into(), ConvSpec::new(1, m, m / r).bias(true), pooled);
            walk.conv("attention.ce.fc2".into(), ConvSpec::new(1, m / r, m).bias(true), pooled);
            if cfg.attention.variant == AttentionVariant::ChSePlusSpSe {
                walk.conv("attention.se.fs".into(), ConvSpec::new(1, m, 1).bias(true), input);
            }
        }
        AttentionVariant::Saca3d => {
            let half = m / 2;
            walk.conv(
                "attention.ce.fc1".into(),
                ConvSpec::new(1, half, half / r).bias(true),
                pooled,
            );
            walk.conv(
                "attention.ce.fc2".into(),
                ConvSpec::new(1, half / r, half).bias(true),
                pooled,
            );
            walk.conv("attention.se.fs".into(), ConvSpec::new(1, half, 1).bias(true), input);
        }
    }
    let w = &cfg.stage_widths;
    let stem = walk.conv("stem".into(), ConvSpec::new(3, m, w[0]).stride(2), input);

    let mut skips = vec![(w[0], stem)];
    let mut cur = stem;
    let mut width = w[0];
    let mut index = 0;
    for (stage, &count) in cfg.block_layout.iter().enumerate() {
        for i in 0..count {
            index += 1;
            let block = BlockConfig::new(width, w[stage], cfg.groups)
                .downsample(i == 0)
                .dilated(cfg.weight_mode);
            cur = walk.block(&format!("encoder.block{index}"), block, cur);
            width = w[stage];
        }
        skips.push((width, cur));
    }
    skips.pop();
    for k in 0..cfg.stages() {
        let (skip_width, skip_at) = skips.pop().expect("one skip per decoder stage");
        let up = cur.map(|v| v * 2);
        if up != skip_at {
            return Err(Error::config(format!(
                "decoder stage {} upsamples to {up:?} but the skip is {skip_at:?}",
                k + 1
            )));
        }
        let name = format!("decoder.stage{}", k + 1);
        walk.conv(
            format!("{name}.fuse"),
            ConvSpec::new(1, width + skip_width, skip_width),
            up,
        );
        walk.norm(format!("{name}.fuse_norm"), skip_width, up);
        cur = walk.block(
            &format!("{name}.block"),
            BlockConfig::new(skip_width, skip_width, cfg.groups),
            up,
        );
        width = skip_width;
    }
    let full = cur.map(|v| v * 2);
    walk.conv("head".into(), ConvSpec::new(1, width, cfg.num_classes).bias(true), full);
    if full != input {
        return Err(Error::config(format!(
            "output extent {full:?} differs from input {input:?}"
        )));
    }

    let total_params = walk.layers.iter().map(|l| l.params).sum();
    let total_flops = walk.layers.iter().map(|l| l.flops).sum();
    Ok(ComplexityReport {
        input_shape: input,
        stage_widths: w.clone(),
        per_layer: walk.layers,
        total_params,
        total_flops,
        reconciled: false,
        mismatches: Vec::new(),
    })
}

/// Compares analytic per-layer parameter counts against an instantiated
/// network and records the outcome in the report.
pub fn reconcile<T: crate::tensor::Real>(report: &mut ComplexityReport, net: &Network<T>) {
    let analytic: BTreeMap<&str, u64> = report
        .per_layer
        .iter()
        .filter(|l| l.params > 0)
        .map(|l| (l.name.as_str(), l.params))
        .collect();
    let counted = net.param_counts_by_layer();
    let enumerated: BTreeMap<&str, u64> = counted.iter().map(|(n, c)| (n.as_str(), *c as u64)).collect();
    let mut mismatches = Vec::new();
    for name in analytic.keys().chain(enumerated.keys()) {
        let a = analytic.get(name).copied().unwrap_or(0);
        let e = enumerated.get(name).copied().unwrap_or(0);
        if a != e && !mismatches.iter().any(|(n, _, _): &(String, u64, u64)| n == name) {
            mismatches.push((name.to_string(), a, e));
        }
    }
    let total: u64 = enumerated.values().sum();
    report.reconciled = mismatches.is_empty() && total == report.total_params;
    report.mismatches = mismatches;
}

/// Analytic report for `cfg`, reconciled against a freshly built model.
pub fn model_complexity(cfg: &NetworkConfig, input: [usize; 3]) -> Result<ComplexityReport> {
    let mut report = analyze(cfg, input)?;
    let net = Network::<f32>::new(cfg, 0)?;
    reconcile(&mut report, &net);
    Ok(report)
}
