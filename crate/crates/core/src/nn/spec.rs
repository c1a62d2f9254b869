//! Declarative layer-by-layer network descriptions and the builders for the
//! four network roles.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Dims;

pub const LEAKY_SLOPE: f32 = 0.2;
pub const NORM_EPS: f64 = 1e-5;

/// Id of the generator / segmentation-branch output convolution.
pub const HEAD_ID: &str = "out.conv";
/// Post-activation outputs of the decoder's last two convolutions.
pub const TRUNK_TAPS: [&str; 2] = ["dec0.act_a", "dec0.act_b"];
/// Id of the attention block inside the fusion branch.
pub const ATTENTION_ID: &str = "fuse.attention";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv3d,
    TransposedConv3d,
    InstanceNorm,
    LeakyRelu,
    /// Appends the output of an earlier layer along the channel axis.
    ConcatSkip { source: String },
    SoftmaxChannels,
    /// Residual gating `x * (1 + m)` by an externally supplied attention map.
    MaskGuidance,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub id: String,
    pub kind: LayerKind,
    pub kernel: [usize; 3],
    pub stride: usize,
    pub padding: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub bias: bool,
}

impl LayerSpec {
    fn elementwise(id: String, kind: LayerKind, channels: usize) -> Self {
        Self { id, kind, kernel: [1; 3], stride: 1, padding: 0, in_channels: channels, out_channels: channels, bias: false }
    }

    pub fn conv(id: impl Into<String>, cin: usize, cout: usize, k: usize, stride: usize, padding: usize) -> Self {
        Self {
            id: id.into(),
            kind: LayerKind::Conv3d,
            kernel: [k; 3],
            stride,
            padding,
            in_channels: cin,
            out_channels: cout,
            bias: true,
        }
    }

    pub fn transposed(id: impl Into<String>, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        Self { kind: LayerKind::TransposedConv3d, ..Self::conv(id, cin, cout, k, stride, 0) }
    }

    pub fn norm(id: impl Into<String>, channels: usize) -> Self {
        Self::elementwise(id.into(), LayerKind::InstanceNorm, channels)
    }

    pub fn leaky_relu(id: impl Into<String>, channels: usize) -> Self {
        Self::elementwise(id.into(), LayerKind::LeakyRelu, channels)
    }

    pub fn softmax(id: impl Into<String>, channels: usize) -> Self {
        Self::elementwise(id.into(), LayerKind::SoftmaxChannels, channels)
    }

    pub fn mask_guidance(id: impl Into<String>, channels: usize) -> Self {
        Self::elementwise(id.into(), LayerKind::MaskGuidance, channels)
    }

    pub fn concat(id: impl Into<String>, source: impl Into<String>, prev: usize, skip: usize) -> Self {
        Self {
            out_channels: prev + skip,
            ..Self::elementwise(id.into(), LayerKind::ConcatSkip { source: source.into() }, prev)
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(self.kind, LayerKind::Conv3d | LayerKind::TransposedConv3d)
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Weight shape: `[out, in, k, k, k]` for convolutions,
    /// `[in, out, k, k, k]` for transposed convolutions.
    pub fn weight_shape(&self) -> Option<Vec<usize>> {
        let [kd, kh, kw] = self.kernel;
        match self.kind {
            LayerKind::Conv3d => Some(vec![self.out_channels, self.in_channels, kd, kh, kw]),
            LayerKind::TransposedConv3d => Some(vec![self.in_channels, self.out_channels, kd, kh, kw]),
            _ => None,
        }
    }

    pub fn bias_shape(&self) -> Option<Vec<usize>> {
        (self.has_params() && self.bias).then(|| vec![self.out_channels])
    }

    pub fn param_count(&self) -> usize {
        self.weight_shape().map_or(0, |s| s.iter().product())
            + self.bias_shape().map_or(0, |s| s.iter().product())
    }

    /// Spatial output size for a given input size.
    pub fn output_dims(&self, input: Dims) -> Result<Dims> {
        let mut out = input;
        for a in 0..3 {
            let (n, k, s, p) = (input[a], self.kernel[a], self.stride, self.padding);
            out[a] = match self.kind {
                LayerKind::Conv3d => {
                    if n + 2 * p < k {
                        return Err(Error::layer(
                            &self.id,
                            format!("input extent {n} with padding {p} is smaller than kernel {k}"),
                        ));
                    }
                    (n + 2 * p - k) / s + 1
                }
                LayerKind::TransposedConv3d => {
                    let full = (n - 1) * s + k;
                    if full <= 2 * p {
                        return Err(Error::layer(&self.id, "transposed convolution output is empty"));
                    }
                    full - 2 * p
                }
                _ => n,
            };
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub in_channels: usize,
    pub layers: Vec<LayerSpec>,
    pub taps: Vec<String>,
    /// Every spatial input extent must be a multiple of this.
    pub size_multiple: usize,
}

impl NetworkSpec {
    pub fn new(in_channels: usize, layers: Vec<LayerSpec>, taps: Vec<String>, size_multiple: usize) -> Result<Self> {
        let spec = Self { in_channels, layers, taps, size_multiple };
        spec.validate()?;
        Ok(spec)
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.id == id)
    }

    pub fn layer(&self, id: &str) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.id == id)
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map_or(self.in_channels, |l| l.out_channels)
    }

    /// Checks channel composition, skip sources and taps.
    pub fn validate(&self) -> Result<()> {
        if self.size_multiple == 0 {
            return Err(Error::InvalidValue("size_multiple must be >= 1".into()));
        }
        let mut channels = self.in_channels;
        let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
        for l in &self.layers {
            if seen.contains_key(l.id.as_str()) {
                return Err(Error::layer(&l.id, "duplicate layer id"));
            }
            if l.in_channels != channels || l.in_channels == 0 || l.out_channels == 0 {
                return Err(Error::layer(
                    &l.id,
                    format!("expects {} input channels, previous layer yields {channels}", l.in_channels),
                ));
            }
            match &l.kind {
                LayerKind::Conv3d | LayerKind::TransposedConv3d => {
                    if l.kernel.contains(&0) || l.stride == 0 {
                        return Err(Error::layer(&l.id, "kernel and stride must be >= 1"));
                    }
                }
                LayerKind::ConcatSkip { source } => {
                    let skip = seen
                        .get(source.as_str())
                        .ok_or_else(|| Error::layer(&l.id, format!("skip source `{source}` is not an earlier layer")))?;
                    if l.out_channels != l.in_channels + skip {
                        return Err(Error::layer(&l.id, "concat output channels do not add up"));
                    }
                }
                _ => {
                    if l.out_channels != l.in_channels || l.stride != 1 || l.padding != 0 {
                        return Err(Error::layer(&l.id, "elementwise layer must preserve shape"));
                    }
                }
            }
            seen.insert(&l.id, l.out_channels);
            channels = l.out_channels;
        }
        for t in &self.taps {
            if !seen.contains_key(t.as_str()) {
                return Err(Error::InvalidValue(format!("tap `{t}` names no layer")));
            }
        }
        Ok(())
    }

    /// Spatial size after every layer for a given input size.
    pub fn shape_trace(&self, input: Dims) -> Result<Vec<Dims>> {
        if input.iter().any(|&n| n == 0 || n % self.size_multiple != 0) {
            return Err(Error::Shape(format!(
                "input extent {input:?} must be a positive multiple of {}",
                self.size_multiple
            )));
        }
        let mut dims = Vec::with_capacity(self.layers.len());
        let mut cur = input;
        for l in &self.layers {
            cur = l.output_dims(cur)?;
            if let LayerKind::ConcatSkip { source } = &l.kind {
                let j = self.position(source).expect("validated");
                if dims[j] != cur {
                    return Err(Error::layer(
                        &l.id,
                        format!("skip `{source}` is {:?} but the incoming path is {cur:?}", dims[j]),
                    ));
                }
            }
            dims.push(cur);
        }
        Ok(dims)
    }

    pub fn output_dims(&self, input: Dims) -> Result<Dims> {
        Ok(self.shape_trace(input)?.last().copied().unwrap_or(input))
    }

    /// Smallest cubic input extent the network accepts.
    pub fn min_input_extent(&self) -> Option<usize> {
        (1..=1024usize)
            .filter(|n| n % self.size_multiple == 0)
            .find(|&n| self.shape_trace([n; 3]).is_ok())
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerSpec::param_count).sum()
    }

    /// Ids of the layers that carry parameters.
    pub fn param_layers(&self) -> impl Iterator<Item = &LayerSpec> {
        self.layers.iter().filter(|l| l.has_params())
    }
}

fn block(layers: &mut Vec<LayerSpec>, prefix: &str, suffix: &str, cin: usize, cout: usize, k: usize, stride: usize) {
    let pad = if k == 1 { 0 } else { 1 };
    layers.push(LayerSpec::conv(format!("{prefix}.conv{suffix}"), cin, cout, k, stride, pad));
    layers.push(LayerSpec::norm(format!("{prefix}.norm{suffix}"), cout));
    layers.push(LayerSpec::leaky_relu(format!("{prefix}.act{suffix}"), cout));
}

fn unet_trunk(in_channels: usize, base_filters: usize, depth: usize) -> Result<Vec<LayerSpec>> {
    if !(1..=2).contains(&in_channels) || base_filters == 0 || depth == 0 {
        return Err(Error::InvalidValue(format!(
            "U-Net needs in_channels in 1..=2, base_filters >= 1, depth >= 1 (got {in_channels}, {base_filters}, {depth})"
        )));
    }
    let width = |level: usize| base_filters << level;
    let mut layers = Vec::new();
    let mut cin = in_channels;
    for level in 0..=depth {
        let p = format!("enc{level}");
        if level > 0 {
            block(&mut layers, &format!("down{}", level - 1), "", width(level - 1), width(level), 3, 2);
            cin = width(level);
        }
        block(&mut layers, &p, "_a", cin, width(level), 3, 1);
        block(&mut layers, &p, "_b", width(level), width(level), 3, 1);
    }
    for level in (0..depth).rev() {
        let c = width(level);
        layers.push(LayerSpec::transposed(format!("up{level}.tconv"), width(level + 1), c, 2, 2));
        layers.push(LayerSpec::norm(format!("up{level}.norm"), c));
        layers.push(LayerSpec::leaky_relu(format!("up{level}.act"), c));
        layers.push(LayerSpec::concat(format!("up{level}.cat"), format!("enc{level}.act_b"), c, c));
        block(&mut layers, &format!("dec{level}"), "_a", 2 * c, c, 3, 1);
        block(&mut layers, &format!("dec{level}"), "_b", c, c, 3, 1);
    }
    Ok(layers)
}

fn trunk_taps() -> Vec<String> {
    TRUNK_TAPS.iter().map(|s| s.to_string()).collect()
}

/// U-Net translator with a linear single-kernel-per-channel output.
pub fn build_generator(in_channels: usize, base_filters: usize, depth: usize) -> Result<NetworkSpec> {
    let mut layers = unet_trunk(in_channels, base_filters, depth)?;
    layers.push(LayerSpec::conv(HEAD_ID, base_filters, in_channels, 1, 1, 0));
    NetworkSpec::new(in_channels, layers, trunk_taps(), 1 << depth)
}

/// The generator trunk with a four-kernel output and channel softmax.
pub fn build_seg_branch(in_channels: usize, base_filters: usize, depth: usize) -> Result<NetworkSpec> {
    let mut layers = unet_trunk(in_channels, base_filters, depth)?;
    layers.push(LayerSpec::conv(HEAD_ID, base_filters, 4, 1, 1, 0));
    layers.push(LayerSpec::softmax("out.softmax", 4));
    NetworkSpec::new(in_channels, layers, trunk_taps(), 1 << depth)
}

/// Patch discriminator: four stride-2 4³ convolutions (16, 32, 64, 128
/// filters) and a stride-1 4³ scoring convolution, all padded by 1, with
/// instance norm after every hidden convolution but the first.
pub fn build_discriminator(in_channels: usize) -> Result<NetworkSpec> {
    if !(1..=2).contains(&in_channels) {
        return Err(Error::InvalidValue(format!("discriminator in_channels must be 1 or 2, got {in_channels}")));
    }
    let layers = vec![
        LayerSpec::conv("L1", in_channels, 16, 4, 2, 1),
        LayerSpec::leaky_relu("L2", 16),
        LayerSpec::conv("L3", 16, 32, 4, 2, 1),
        LayerSpec::norm("L4", 32),
        LayerSpec::leaky_relu("L5", 32),
        LayerSpec::conv("L6", 32, 64, 4, 2, 1),
        LayerSpec::norm("L7", 64),
        LayerSpec::leaky_relu("L8", 64),
        LayerSpec::conv("L9", 64, 128, 4, 2, 1),
        LayerSpec::norm("L10", 128),
        LayerSpec::leaky_relu("L11", 128),
        LayerSpec::conv("L12", 128, 1, 4, 1, 1),
    ];
    NetworkSpec::new(in_channels, layers, Vec::new(), 1)
}

/// Fusion branch over the concatenated taps of both segmentation branches.
/// With `mask_guided = false` the attention block is left out and the
/// rest of the stack is unchanged.
pub fn build_fusion_branch(tap_channels: usize, mask_guided: bool) -> Result<NetworkSpec> {
    if tap_channels == 0 {
        return Err(Error::InvalidValue("tap_channels must be >= 1".into()));
    }
    let t = tap_channels;
    let mut layers = Vec::new();
    block(&mut layers, "fuse", "_a", 4 * t, 2 * t, 3, 1);
    if mask_guided {
        layers.push(LayerSpec::mask_guidance(ATTENTION_ID, 2 * t));
    }
    block(&mut layers, "fuse", "_b", 2 * t, t, 3, 1);
    layers.push(LayerSpec::conv("fuse.out", t, 4, 1, 1, 0));
    layers.push(LayerSpec::softmax("fuse.softmax", 4));
    NetworkSpec::new(4 * t, layers, Vec::new(), 1)
}
