//! The appended convolution head: a short stack of 3x3, stride-1,
//! zero-padded convolutions applied to patch-resolution feature maps before
//! interpolation. With `residual` set each layer computes `x + conv(x)`.
//!
//! Activations and gradients are f64; parameters are kept in f64 during
//! training and stored as f32 in HED1 checkpoints.

mod adamw;
mod train;

use std::path::Path;

pub use adamw::{adamw_step, AdamWState};
pub use train::{pair_loss_and_grad, train, LossKind, TrainConfig, TrainOutcome};

use crate::error::{Error, Result};
use crate::featstore::FeatureMap;
use crate::geometry::write_atomic;

pub const KERNEL: usize = 3;
pub const MAX_LAYERS: usize = 3;
const HED1_MAGIC: &[u8; 4] = b"HED1";

/// Dense `h x w x c` activations, row-major `[row][col][channel]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Self {
            h,
            w,
            c,
            data: vec![0.0; h * w * c],
        }
    }

    pub fn from_map(m: &FeatureMap) -> Self {
        Self {
            h: m.hf,
            w: m.wf,
            c: m.channels,
            data: m.data.iter().map(|&v| v as f64).collect(),
        }
    }

    /// Back to a feature map with `template`'s patch and image geometry.
    pub fn to_map(&self, template: &FeatureMap) -> Result<FeatureMap> {
        if self.h != template.hf || self.w != template.wf {
            return Err(Error::config("activation grid does not match the template map"));
        }
        FeatureMap::new(
            self.c,
            template.patch,
            template.img_w,
            template.img_h,
            self.data.iter().map(|&v| v as f32).collect(),
        )
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, ch: usize) -> f64 {
        self.data[(y * self.w + x) * self.c + ch]
    }

    pub fn cell(&self, y: usize, x: usize) -> &[f64] {
        let o = (y * self.w + x) * self.c;
        &self.data[o..o + self.c]
    }

    pub fn cell_mut(&mut self, y: usize, x: usize) -> &mut [f64] {
        let o = (y * self.w + x) * self.c;
        &mut self.data[o..o + self.c]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub c_out: usize,
    pub c_in: usize,
    /// `[out][in][ky][kx]`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvLayer {
    pub fn zeros(c_out: usize, c_in: usize) -> Self {
        Self {
            c_out,
            c_in,
            weights: vec![0.0; c_out * c_in * KERNEL * KERNEL],
            bias: vec![0.0; c_out],
        }
    }

    #[inline]
    fn w_index(&self, o: usize, i: usize, ky: usize, kx: usize) -> usize {
        ((o * self.c_in + i) * KERNEL + ky) * KERNEL + kx
    }

    pub fn weight(&self, o: usize, i: usize, ky: usize, kx: usize) -> f64 {
        self.weights[self.w_index(o, i, ky, kx)]
    }

    pub fn set_weight(&mut self, o: usize, i: usize, ky: usize, kx: usize, v: f64) {
        let idx = self.w_index(o, i, ky, kx);
        self.weights[idx] = v;
    }

    fn forward(&self, x: &Tensor3) -> Tensor3 {
        let mut out = Tensor3::zeros(x.h, x.w, self.c_out);
        for y in 0..x.h {
            for xx in 0..x.w {
                let o_cell = out.cell_mut(y, xx);
                o_cell.copy_from_slice(&self.bias);
                for ky in 0..KERNEL {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= x.h as isize {
                        continue;
                    }
                    for kx in 0..KERNEL {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= x.w as isize {
                            continue;
                        }
                        let src = x.cell(sy as usize, sx as usize);
                        for (o, acc) in o_cell.iter_mut().enumerate() {
                            let base = (o * self.c_in * KERNEL + ky) * KERNEL + kx;
                            let mut s = 0.0;
                            for (i, &v) in src.iter().enumerate() {
                                s += self.weights[base + i * KERNEL * KERNEL] * v;
                            }
                            *acc += s;
                        }
                    }
                }
            }
        }
        out
    }

    /// Accumulates parameter grads into `g` and returns `dL/dx`.
    fn backward(&self, x: &Tensor3, d_out: &Tensor3, g: &mut ConvLayer) -> Tensor3 {
        let mut d_in = Tensor3::zeros(x.h, x.w, self.c_in);
        for y in 0..x.h {
            for xx in 0..x.w {
                let go = d_out.cell(y, xx);
                for (o, &gv) in go.iter().enumerate() {
                    g.bias[o] += gv;
                }
                for ky in 0..KERNEL {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= x.h as isize {
                        continue;
                    }
                    for kx in 0..KERNEL {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= x.w as isize {
                            continue;
                        }
                        let (sy, sx) = (sy as usize, sx as usize);
                        let src_off = (sy * x.w + sx) * x.c;
                        for (o, &gv) in go.iter().enumerate() {
                            if gv == 0.0 {
                                continue;
                            }
                            let base = (o * self.c_in * KERNEL + ky) * KERNEL + kx;
                            for i in 0..self.c_in {
                                let wi = base + i * KERNEL * KERNEL;
                                g.weights[wi] += gv * x.data[src_off + i];
                                d_in.data[src_off + i] += gv * self.weights[wi];
                            }
                        }
                    }
                }
            }
        }
        d_in
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub layers: Vec<ConvLayer>,
    pub residual: bool,
}

/// Gradients with the same layout as [`HeadParams`].
pub type HeadGrads = HeadParams;

impl HeadParams {
    /// Zero weights and biases with residual connections: the identity map.
    pub fn zero_init(channels: usize, layers: usize) -> Result<Self> {
        if layers > MAX_LAYERS {
            return Err(Error::config(format!("at most {MAX_LAYERS} conv layers are supported")));
        }
        Ok(Self {
            layers: (0..layers).map(|_| ConvLayer::zeros(channels, channels)).collect(),
            residual: true,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| ConvLayer::zeros(l.c_out, l.c_in))
                .collect(),
            residual: self.residual,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.len() > MAX_LAYERS {
            return Err(Error::config(format!(
                "{} conv layers, at most {MAX_LAYERS} supported",
                self.layers.len()
            )));
        }
        for (k, l) in self.layers.iter().enumerate() {
            if l.weights.len() != l.c_out * l.c_in * KERNEL * KERNEL || l.bias.len() != l.c_out {
                return Err(Error::config(format!("layer {k}: parameter sizes do not match dims")));
            }
            if self.residual && l.c_out != l.c_in {
                return Err(Error::config(format!(
                    "layer {k}: residual needs c_out == c_in, got {} vs {}",
                    l.c_out, l.c_in
                )));
            }
            if k > 0 && self.layers[k - 1].c_out != l.c_in {
                return Err(Error::config(format!("layer {k}: input channels do not chain")));
            }
        }
        if !self.params().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("head parameters"));
        }
        Ok(())
    }

    /// True when the head maps every input to itself exactly.
    pub fn is_identity(&self) -> bool {
        self.layers.is_empty() || (self.residual && self.params().all(|v| v == 0.0))
    }

    pub fn in_channels(&self) -> Option<usize> {
        self.layers.first().map(|l| l.c_in)
    }

    pub fn params(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Round every parameter to f32, the checkpoint precision.
    pub fn quantize(&mut self) {
        for p in self.params_mut() {
            *p = *p as f32 as f64;
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(HED1_MAGIC);
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.residual as u32).to_le_bytes());
        for l in &self.layers {
            out.extend_from_slice(&(l.c_out as u32).to_le_bytes());
            out.extend_from_slice(&(l.c_in as u32).to_le_bytes());
            for v in l.weights.iter().chain(&l.bias) {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != HED1_MAGIC {
            return Err(Error::format(0, "bad magic, expected HED1"));
        }
        let mut off = 4;
        let next_u32 = |off: &mut usize| -> Result<usize> {
            let b = bytes
                .get(*off..*off + 4)
                .ok_or_else(|| Error::format(*off, "truncated HED1"))?;
            *off += 4;
            Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
        };
        let n_layers = next_u32(&mut off)?;
        if n_layers > MAX_LAYERS {
            return Err(Error::format(4, format!("{n_layers} layers, at most {MAX_LAYERS}")));
        }
        let residual = match next_u32(&mut off)? {
            0 => false,
            1 => true,
            v => return Err(Error::format(8, format!("residual flag {v} is not 0 or 1"))),
        };
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let c_out = next_u32(&mut off)?;
            let c_in = next_u32(&mut off)?;
            let n = c_out * c_in * KERNEL * KERNEL + c_out;
            let payload = bytes
                .get(off..off + 4 * n)
                .ok_or_else(|| Error::format(bytes.len(), "truncated HED1 layer payload"))?;
            let mut vals = Vec::with_capacity(n);
            for (i, ch) in payload.chunks_exact(4).enumerate() {
                let v = f32::from_le_bytes(ch.try_into().unwrap());
                if !v.is_finite() {
                    return Err(Error::format(off + 4 * i, "non-finite parameter"));
                }
                vals.push(v as f64);
            }
            off += 4 * n;
            let bias = vals.split_off(c_out * c_in * KERNEL * KERNEL);
            layers.push(ConvLayer {
                c_out,
                c_in,
                weights: vals,
                bias,
            });
        }
        if off != bytes.len() {
            return Err(Error::format(off, "trailing bytes after HED1 payload"));
        }
        let p = Self { layers, residual };
        p.validate().map_err(|e| Error::format(4, e.to_string()))?;
        Ok(p)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes())
    }
}

/// Layer inputs saved by the forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Vec<Tensor3>,
}

fn check_input(x: &Tensor3, p: &HeadParams) -> Result<()> {
    p.validate()?;
    if let Some(c) = p.in_channels() {
        if c != x.c {
            return Err(Error::config(format!(
                "head expects {c} input channels, feature map has {}",
                x.c
            )));
        }
    }
    Ok(())
}

pub fn forward_tensor(x: &Tensor3, p: &HeadParams) -> Result<(Tensor3, ForwardCache)> {
    check_input(x, p)?;
    let mut cur = x.clone();
    let mut inputs = Vec::with_capacity(p.layers.len());
    for l in &p.layers {
        let mut y = l.forward(&cur);
        if p.residual {
            for (o, i) in y.data.iter_mut().zip(&cur.data) {
                *o += i;
            }
        }
        inputs.push(std::mem::replace(&mut cur, y));
    }
    Ok((cur, ForwardCache { inputs }))
}

pub fn backward_tensor(p: &HeadParams, cache: &ForwardCache, d_out: &Tensor3) -> Result<(HeadGrads, Tensor3)> {
    let mut grads = p.zeros_like();
    let mut d = d_out.clone();
    for (k, l) in p.layers.iter().enumerate().rev() {
        let x = &cache.inputs[k];
        if d.h != x.h || d.w != x.w || d.c != l.c_out {
            return Err(Error::config("upstream gradient shape does not match the forward pass"));
        }
        let mut d_in = l.backward(x, &d, &mut grads.layers[k]);
        if p.residual {
            for (a, b) in d_in.data.iter_mut().zip(&d.data) {
                *a += b;
            }
        }
        d = d_in;
    }
    Ok((grads, d))
}

/// Apply the head to a feature map. No normalization is applied here.
pub fn head_forward(m: &FeatureMap, p: &HeadParams) -> Result<FeatureMap> {
    let (y, _) = forward_tensor(&Tensor3::from_map(m), p)?;
    y.to_map(m)
}

/// Exact gradients of [`head_forward`] w.r.t. parameters and input.
pub fn head_backward(m: &FeatureMap, p: &HeadParams, d_out: &Tensor3) -> Result<(HeadGrads, Tensor3)> {
    let x = Tensor3::from_map(m);
    let (y, cache) = forward_tensor(&x, p)?;
    if d_out.h != y.h || d_out.w != y.w || d_out.c != y.c {
        return Err(Error::config(format!(
            "upstream gradient is {}x{}x{}, output is {}x{}x{}",
            d_out.h, d_out.w, d_out.c, y.h, y.w, y.c
        )));
    }
    backward_tensor(p, &cache, d_out)
}
