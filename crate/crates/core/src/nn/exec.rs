//! Runs a [`NetworkSpec`] forward and backward.

use std::collections::{BTreeMap, BTreeSet};

use super::kernels::{self, ConvGeom};
use super::params::{check_params, zeros_like_spec, LayerParams, ParamSet};
use super::spec::{LayerKind, LayerSpec, NetworkSpec};
use crate::error::{Error, Result};
use crate::volume::{Dims, Volume};

/// Output and named intermediate features of a forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub output: Volume,
    pub taps: BTreeMap<String, Volume>,
}

/// Everything the backward pass needs: all layer outputs and the
/// per-channel normalisation statistics.
#[derive(Clone, Debug)]
pub struct Trace {
    ids: Vec<String>,
    input: Volume,
    attention: Option<Volume>,
    outputs: Vec<Option<Volume>>,
    inv_std: Vec<Vec<f32>>,
}

impl Trace {
    pub fn output(&self) -> &Volume {
        self.outputs.last().and_then(Option::as_ref).unwrap_or(&self.input)
    }

    pub fn layer_output(&self, id: &str) -> Option<&Volume> {
        let i = self.ids.iter().position(|x| x == id)?;
        self.outputs[i].as_ref()
    }

    pub fn input(&self) -> &Volume {
        &self.input
    }
}

/// Gradients of a scalar objective through one network.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub params: ParamSet,
    pub input: Option<Volume>,
    pub attention: Option<Volume>,
}

fn geom(l: &LayerSpec, in_dims: Dims, out_dims: Dims) -> ConvGeom {
    match l.kind {
        // the transposed layer is the adjoint of a correlation from its output grid
        LayerKind::TransposedConv3d => ConvGeom { in_dims: out_dims, out_dims: in_dims, kernel: l.kernel, stride: l.stride, padding: l.padding },
        _ => ConvGeom { in_dims, out_dims, kernel: l.kernel, stride: l.stride, padding: l.padding },
    }
}

fn spacing_for(input: &Volume, dims: Dims) -> [f64; 3] {
    let s = input.spacing();
    let d = input.dims();
    [0, 1, 2].map(|a| s[a] * d[a] as f64 / dims[a] as f64)
}

fn check_input(spec: &NetworkSpec, params: &ParamSet, input: &Volume) -> Result<Vec<Dims>> {
    if input.channels() != spec.in_channels {
        return Err(Error::Shape(format!(
            "network expects {} input channels, got {}",
            spec.in_channels,
            input.channels()
        )));
    }
    check_params(spec, params)?;
    spec.shape_trace(input.dims())
}

fn check_attention<'a>(l: &LayerSpec, attention: Option<&'a Volume>, dims: Dims) -> Result<&'a Volume> {
    let m = attention.ok_or_else(|| Error::layer(&l.id, "no attention map supplied"))?;
    if m.channels() != 1 || m.dims() != dims {
        return Err(Error::layer(&l.id, format!("attention map {:?}x{} does not match features {dims:?}", m.dims(), m.channels())));
    }
    Ok(m)
}

fn run(
    spec: &NetworkSpec,
    params: &ParamSet,
    input: &Volume,
    attention: Option<&Volume>,
    keep_all: bool,
) -> Result<Trace> {
    let dims = check_input(spec, params, input)?;
    let mut keep: BTreeSet<usize> = spec.taps.iter().filter_map(|t| spec.position(t)).collect();
    for l in &spec.layers {
        if let LayerKind::ConcatSkip { source } = &l.kind {
            keep.insert(spec.position(source).expect("validated"));
        }
    }
    let n = spec.layers.len();
    let mut outputs: Vec<Option<Volume>> = Vec::with_capacity(n);
    let mut inv_std = vec![Vec::new(); n];
    for (i, l) in spec.layers.iter().enumerate() {
        let x = if i == 0 { input } else { outputs[i - 1].as_ref().expect("previous output kept") };
        let out_dims = dims[i];
        let data = match &l.kind {
            LayerKind::Conv3d | LayerKind::TransposedConv3d => {
                let p = &params[&l.id];
                let b = p.bias.as_ref().map(|b| b.data.as_slice());
                let g = geom(l, x.dims(), out_dims);
                if l.kind == LayerKind::Conv3d {
                    kernels::conv_forward(x.data(), l.in_channels, &p.weight.data, b, l.out_channels, &g)
                } else {
                    kernels::tconv_forward(x.data(), l.in_channels, &p.weight.data, b, l.out_channels, &g)
                }
            }
            LayerKind::InstanceNorm => {
                let (y, s) = kernels::instance_norm_forward(x.data(), l.in_channels);
                inv_std[i] = s;
                y
            }
            LayerKind::LeakyRelu => kernels::leaky_relu_forward(x.data()),
            LayerKind::SoftmaxChannels => kernels::softmax_forward(x.data(), l.in_channels),
            LayerKind::ConcatSkip { source } => {
                let j = spec.position(source).expect("validated");
                let skip = outputs[j].as_ref().expect("skip source kept");
                let mut d = x.data().to_vec();
                d.extend_from_slice(skip.data());
                d
            }
            LayerKind::MaskGuidance => {
                let m = check_attention(l, attention, out_dims)?;
                let mut d = x.data().to_vec();
                for c in d.chunks_exact_mut(m.voxels()) {
                    for (v, &w) in c.iter_mut().zip(m.data()) {
                        *v *= 1.0 + w;
                    }
                }
                d
            }
        };
        outputs.push(Some(Volume::from_parts(l.out_channels, out_dims, spacing_for(input, out_dims), data)));
        if !keep_all && i > 0 && !keep.contains(&(i - 1)) {
            outputs[i - 1] = None;
        }
    }
    Ok(Trace {
        ids: spec.layers.iter().map(|l| l.id.clone()).collect(),
        input: input.clone(),
        attention: attention.cloned(),
        outputs,
        inv_std,
    })
}

/// Inference pass; only tapped and skip-connected features are retained.
pub fn forward(spec: &NetworkSpec, params: &ParamSet, input: &Volume, attention: Option<&Volume>) -> Result<Forward> {
    let trace = run(spec, params, input, attention, false)?;
    let taps = spec
        .taps
        .iter()
        .map(|t| (t.clone(), trace.layer_output(t).expect("tap kept").clone()))
        .collect();
    Ok(Forward { output: trace.output().clone(), taps })
}

/// Training pass that keeps every activation for [`backward`].
pub fn forward_trace(spec: &NetworkSpec, params: &ParamSet, input: &Volume, attention: Option<&Volume>) -> Result<Trace> {
    run(spec, params, input, attention, true)
}

fn accumulate(slot: &mut Option<Vec<f32>>, g: &[f32]) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g.to_vec()),
    }
}

/// Backpropagates `grad_output` (gradient w.r.t. the final output) and any
/// gradients w.r.t. tapped features.
pub fn backward(
    spec: &NetworkSpec,
    params: &ParamSet,
    trace: &Trace,
    grad_output: Option<&Volume>,
    tap_grads: &[(&str, &Volume)],
    need_input_grad: bool,
) -> Result<Gradients> {
    let n = spec.layers.len();
    let mut grads: Vec<Option<Vec<f32>>> = vec![None; n];
    if let Some(g) = grad_output {
        if g.dims() != trace.output().dims() || g.channels() != trace.output().channels() {
            return Err(Error::Shape("output gradient does not match the network output".into()));
        }
        grads[n - 1] = Some(g.data().to_vec());
    }
    for (id, g) in tap_grads {
        let i = spec.position(id).ok_or_else(|| Error::InvalidValue(format!("no layer `{id}`")))?;
        let y = trace.outputs[i].as_ref().expect("trace keeps all");
        if g.dims() != y.dims() || g.channels() != y.channels() {
            return Err(Error::layer(id, "tap gradient shape mismatch"));
        }
        accumulate(&mut grads[i], g.data());
    }
    let mut pgrads = zeros_like_spec(spec);
    let mut input_grad: Option<Vec<f32>> = None;
    let mut attention_grad: Option<Vec<f32>> = None;
    for i in (0..n).rev() {
        let Some(dy) = grads[i].take() else { continue };
        let l = &spec.layers[i];
        let x = if i == 0 { &trace.input } else { trace.outputs[i - 1].as_ref().expect("kept") };
        let y = trace.outputs[i].as_ref().expect("kept");
        let want_dx = i > 0 || need_input_grad;
        let dx: Option<Vec<f32>> = match &l.kind {
            LayerKind::Conv3d | LayerKind::TransposedConv3d => {
                let p: &LayerParams = &params[&l.id];
                let g = geom(l, x.dims(), y.dims());
                let (dx, dw, db) = if l.kind == LayerKind::Conv3d {
                    kernels::conv_backward(x.data(), l.in_channels, &p.weight.data, &dy, l.out_channels, &g, want_dx)
                } else {
                    kernels::tconv_backward(x.data(), l.in_channels, &p.weight.data, &dy, l.out_channels, &g, want_dx)
                };
                let slot = pgrads.get_mut(&l.id).expect("zeros_like_spec");
                slot.weight.data = dw;
                if let Some(b) = slot.bias.as_mut() {
                    b.data = db;
                }
                dx
            }
            LayerKind::InstanceNorm => Some(kernels::instance_norm_backward(y.data(), &trace.inv_std[i], &dy)),
            LayerKind::LeakyRelu => Some(kernels::leaky_relu_backward(x.data(), &dy)),
            LayerKind::SoftmaxChannels => Some(kernels::softmax_backward(y.data(), &dy, l.in_channels)),
            LayerKind::ConcatSkip { source } => {
                let j = spec.position(source).expect("validated");
                let split = x.data().len();
                accumulate(&mut grads[j], &dy[split..]);
                Some(dy[..split].to_vec())
            }
            LayerKind::MaskGuidance => {
                let m = trace.attention.as_ref().expect("forward checked attention");
                let nv = m.voxels();
                let mut dm = vec![0.0f32; nv];
                let mut dx = dy.clone();
                for (c, dxc) in dx.chunks_exact_mut(nv).enumerate() {
                    let xc = &x.data()[c * nv..(c + 1) * nv];
                    for v in 0..nv {
                        dm[v] += dxc[v] * xc[v];
                        dxc[v] *= 1.0 + m.data()[v];
                    }
                }
                accumulate(&mut attention_grad, &dm);
                Some(dx)
            }
        };
        if let Some(dx) = dx.filter(|_| want_dx) {
            if i == 0 {
                input_grad = Some(dx);
            } else {
                accumulate(&mut grads[i - 1], &dx);
            }
        }
    }
    let input = if need_input_grad {
        let g = input_grad.unwrap_or_else(|| vec![0.0; trace.input.data().len()]);
        Some(Volume::from_parts(trace.input.channels(), trace.input.dims(), trace.input.spacing(), g))
    } else {
        None
    };
    let attention = trace.attention.as_ref().map(|m| {
        let g = attention_grad.unwrap_or_else(|| vec![0.0; m.voxels()]);
        Volume::from_parts(1, m.dims(), m.spacing(), g)
    });
    Ok(Gradients { params: pgrads, input, attention })
}
