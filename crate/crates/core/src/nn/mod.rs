//! Minimal feed-forward layer stack with hand-written backward passes.
//!
//! Parameters of a [`Sequential`] live in one flat `Vec<f64>`; every layer
//! owns a contiguous range of it. Gradients use the same layout, which keeps
//! optimizers, momentum averaging and checkpointing layout-agnostic.

mod gemm;
pub mod optim;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use gemm::gemm;

use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Layer {
    /// Zero-padded ("same" for stride 1) convolution with bias.
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
    },
    /// Normalization over batch and spatial positions, per channel.
    BatchNorm {
        channels: usize,
    },
    Relu,
    LeakyRelu {
        slope: f64,
    },
    Sigmoid,
    /// Nearest-neighbour 2x upsampling.
    Upsample2x,
    GlobalAvgPool,
    /// Fully connected layer over the flattened sample.
    Linear {
        input: usize,
        output: usize,
    },
}

impl Layer {
    pub fn param_count(&self) -> usize {
        match *self {
            Layer::Conv2d {
                in_ch,
                out_ch,
                kernel,
                ..
            } => out_ch * in_ch * kernel * kernel + out_ch,
            Layer::BatchNorm { channels } => 2 * channels,
            Layer::Linear { input, output } => output * input + output,
            _ => 0,
        }
    }

    pub fn buffer_count(&self) -> usize {
        match *self {
            Layer::BatchNorm { channels } => 2 * channels,
            _ => 0,
        }
    }

    /// Output `(c, h, w)` for a sample of shape `(c, h, w)`, or `None` when
    /// the input does not fit the layer.
    pub fn output_shape(&self, c: usize, h: usize, w: usize) -> Option<(usize, usize, usize)> {
        match *self {
            Layer::Conv2d {
                in_ch,
                out_ch,
                kernel,
                stride,
            } => {
                if c != in_ch {
                    return None;
                }
                let pad = kernel / 2;
                if h + 2 * pad < kernel || w + 2 * pad < kernel {
                    return None;
                }
                Some((
                    out_ch,
                    (h + 2 * pad - kernel) / stride + 1,
                    (w + 2 * pad - kernel) / stride + 1,
                ))
            }
            Layer::BatchNorm { channels } => (c == channels).then_some((c, h, w)),
            Layer::Upsample2x => Some((c, 2 * h, 2 * w)),
            Layer::GlobalAvgPool => Some((c, 1, 1)),
            Layer::Linear { input, output } => (c * h * w == input).then_some((output, 1, 1)),
            Layer::Relu | Layer::LeakyRelu { .. } | Layer::Sigmoid => Some((c, h, w)),
        }
    }

    fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        match *self {
            Layer::Conv2d {
                in_ch,
                out_ch,
                kernel,
                ..
            } => vec![
                ("weight", vec![out_ch, in_ch, kernel, kernel]),
                ("bias", vec![out_ch]),
            ],
            Layer::BatchNorm { channels } => {
                vec![("gamma", vec![channels]), ("beta", vec![channels])]
            }
            Layer::Linear { input, output } => {
                vec![("weight", vec![output, input]), ("bias", vec![output])]
            }
            _ => Vec::new(),
        }
    }
}

enum Aux {
    None,
    Norm {
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        mean: Vec<f64>,
        var: Vec<f64>,
    },
}

/// Activations recorded by a training-mode forward pass.
pub struct Tape {
    inputs: Vec<Tensor>,
    aux: Vec<Aux>,
    pub output: Tensor,
}

impl Tape {
    /// Input of layer `i`; equivalently the output of layer `i - 1`.
    pub fn input(&self, i: usize) -> &Tensor {
        &self.inputs[i]
    }

    /// Output of layer `i`.
    pub fn activation(&self, i: usize) -> &Tensor {
        if i + 1 < self.inputs.len() {
            &self.inputs[i + 1]
        } else {
            &self.output
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sequential {
    layers: Vec<Layer>,
    offsets: Vec<usize>,
    buffer_offsets: Vec<usize>,
    n_params: usize,
    n_buffers: usize,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        let mut offsets = Vec::with_capacity(layers.len());
        let mut buffer_offsets = Vec::with_capacity(layers.len());
        let (mut n_params, mut n_buffers) = (0, 0);
        for l in &layers {
            offsets.push(n_params);
            buffer_offsets.push(n_buffers);
            n_params += l.param_count();
            n_buffers += l.buffer_count();
        }
        Sequential {
            layers,
            offsets,
            buffer_offsets,
            n_params,
            n_buffers,
        }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn param_count(&self) -> usize {
        self.n_params
    }

    pub fn buffer_count(&self) -> usize {
        self.n_buffers
    }

    pub fn output_shape(&self, c: usize, h: usize, w: usize) -> Option<(usize, usize, usize)> {
        self.layers
            .iter()
            .try_fold((c, h, w), |(c, h, w), l| l.output_shape(c, h, w))
    }

    /// Named parameter blocks `(name, shape)` in storage order.
    pub fn param_shapes(&self, prefix: &str) -> Vec<(String, Vec<usize>)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                l.param_shapes()
                    .into_iter()
                    .map(move |(name, shape)| (format!("{prefix}{i}.{name}"), shape))
            })
            .collect()
    }

    /// He-normal weights, zero biases, unit norm scales.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut params = vec![0.0; self.n_params];
        for (l, &off) in self.layers.iter().zip(&self.offsets) {
            match *l {
                Layer::Conv2d {
                    in_ch,
                    out_ch,
                    kernel,
                    ..
                } => {
                    let fan_in = in_ch * kernel * kernel;
                    let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
                    for p in &mut params[off..off + out_ch * fan_in] {
                        *p = dist.sample(rng);
                    }
                }
                Layer::Linear { input, output } => {
                    let dist = Normal::new(0.0, (2.0 / input as f64).sqrt()).unwrap();
                    for p in &mut params[off..off + output * input] {
                        *p = dist.sample(rng);
                    }
                }
                Layer::BatchNorm { channels } => {
                    params[off..off + channels].fill(1.0);
                }
                _ => {}
            }
        }
        params
    }

    /// Running mean 0 and running variance 1 for every normalization layer.
    pub fn init_buffers(&self) -> Vec<f64> {
        let mut buffers = vec![0.0; self.n_buffers];
        for (l, &off) in self.layers.iter().zip(&self.buffer_offsets) {
            if let Layer::BatchNorm { channels } = *l {
                buffers[off + channels..off + 2 * channels].fill(1.0);
            }
        }
        buffers
    }

    fn check_input(&self, x: &Tensor) {
        assert!(
            self.output_shape(x.c, x.h, x.w).is_some(),
            "input shape {:?} does not fit layer stack",
            x.shape()
        );
    }

    /// Training-mode forward pass (normalization uses batch statistics).
    pub fn forward(&self, params: &[f64], x: &Tensor) -> Tape {
        assert_eq!(params.len(), self.n_params, "parameter vector length");
        self.check_input(x);
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut aux = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for (l, &off) in self.layers.iter().zip(&self.offsets) {
            let p = &params[off..off + l.param_count()];
            let (out, a) = forward_layer(l, p, &cur, None);
            inputs.push(cur);
            aux.push(a);
            cur = out;
        }
        Tape {
            inputs,
            aux,
            output: cur,
        }
    }

    /// Inference-mode forward pass using stored running statistics.
    pub fn forward_eval(&self, params: &[f64], buffers: &[f64], x: &Tensor) -> Tensor {
        assert_eq!(params.len(), self.n_params, "parameter vector length");
        assert_eq!(buffers.len(), self.n_buffers, "buffer vector length");
        self.check_input(x);
        let mut cur = x.clone();
        for ((l, &off), &boff) in self
            .layers
            .iter()
            .zip(&self.offsets)
            .zip(&self.buffer_offsets)
        {
            let p = &params[off..off + l.param_count()];
            let b = &buffers[boff..boff + l.buffer_count()];
            cur = forward_layer(l, p, &cur, Some(b)).0;
        }
        cur
    }

    /// Exponential moving average of the batch statistics recorded in `tape`.
    pub fn update_running_stats(&self, buffers: &mut [f64], tape: &Tape, momentum: f64) {
        for ((l, &boff), a) in self.layers.iter().zip(&self.buffer_offsets).zip(&tape.aux) {
            if let (Layer::BatchNorm { channels }, Aux::Norm { mean, var, .. }) = (l, a) {
                for c in 0..*channels {
                    let rm = &mut buffers[boff + c];
                    *rm = (1.0 - momentum) * *rm + momentum * mean[c];
                    let rv = &mut buffers[boff + channels + c];
                    *rv = (1.0 - momentum) * *rv + momentum * var[c];
                }
            }
        }
    }

    /// Backpropagates `grad_out` through the stack, accumulating parameter
    /// gradients into `grads`. Returns the gradient w.r.t. the input when
    /// `need_input_grad` is set.
    pub fn backward(
        &self,
        params: &[f64],
        tape: &Tape,
        grad_out: Tensor,
        grads: &mut [f64],
        need_input_grad: bool,
    ) -> Option<Tensor> {
        assert_eq!(grads.len(), self.n_params, "gradient vector length");
        assert!(grad_out.same_shape(&tape.output), "gradient shape");
        let mut g = grad_out;
        for i in (0..self.layers.len()).rev() {
            let l = &self.layers[i];
            let off = self.offsets[i];
            let n = l.param_count();
            let want_dx = i > 0 || need_input_grad;
            let dx = backward_layer(
                l,
                &params[off..off + n],
                &tape.inputs[i],
                &tape.aux[i],
                &g,
                &mut grads[off..off + n],
                want_dx,
            );
            match dx {
                Some(d) => g = d,
                None => return None,
            }
        }
        Some(g)
    }
}

fn forward_layer(l: &Layer, p: &[f64], x: &Tensor, buffers: Option<&[f64]>) -> (Tensor, Aux) {
    match *l {
        Layer::Conv2d {
            out_ch,
            kernel,
            stride,
            ..
        } => (conv_forward(x, p, out_ch, kernel, stride), Aux::None),
        Layer::BatchNorm { channels } => batchnorm_forward(x, p, channels, buffers),
        Layer::Relu => (map(x, |v| v.max(0.0)), Aux::None),
        Layer::LeakyRelu { slope } => (map(x, |v| if v > 0.0 { v } else { slope * v }), Aux::None),
        Layer::Sigmoid => (map(x, sigmoid), Aux::None),
        Layer::Upsample2x => (upsample_forward(x), Aux::None),
        Layer::GlobalAvgPool => {
            let hw = (x.h * x.w) as f64;
            let mut out = Tensor::zeros(x.n, x.c, 1, 1);
            for (o, plane) in out.data.iter_mut().zip(x.data.chunks(x.h * x.w)) {
                *o = plane.iter().sum::<f64>() / hw;
            }
            (out, Aux::None)
        }
        Layer::Linear { input, output } => {
            let mut out = Tensor::zeros(x.n, output, 1, 1);
            for row in out.data.chunks_mut(output) {
                row.copy_from_slice(&p[output * input..]);
            }
            gemm(
                x.n,
                input,
                output,
                1.0,
                &x.data,
                false,
                p,
                true,
                1.0,
                &mut out.data,
            );
            (out, Aux::None)
        }
    }
}

fn backward_layer(
    l: &Layer,
    p: &[f64],
    x: &Tensor,
    aux: &Aux,
    dy: &Tensor,
    dp: &mut [f64],
    want_dx: bool,
) -> Option<Tensor> {
    match *l {
        Layer::Conv2d {
            out_ch,
            kernel,
            stride,
            ..
        } => conv_backward(x, p, dy, dp, out_ch, kernel, stride, want_dx),
        Layer::BatchNorm { channels } => {
            let Aux::Norm { xhat, inv_std, .. } = aux else {
                unreachable!("normalization tape entry")
            };
            Some(batchnorm_backward(x, p, xhat, inv_std, dy, dp, channels))
        }
        Layer::Relu => Some(zip_map(x, dy, |v, g| if v > 0.0 { g } else { 0.0 })),
        Layer::LeakyRelu { slope } => {
            Some(zip_map(x, dy, |v, g| if v > 0.0 { g } else { slope * g }))
        }
        Layer::Sigmoid => Some(zip_map(x, dy, |v, g| {
            let s = sigmoid(v);
            g * s * (1.0 - s)
        })),
        Layer::Upsample2x => Some(upsample_backward(x, dy)),
        Layer::GlobalAvgPool => {
            let hw = x.h * x.w;
            let mut dx = Tensor::zeros(x.n, x.c, x.h, x.w);
            for (plane, &g) in dx.data.chunks_mut(hw).zip(&dy.data) {
                plane.fill(g / hw as f64);
            }
            Some(dx)
        }
        Layer::Linear { input, output } => {
            let (dw, db) = dp.split_at_mut(output * input);
            gemm(
                output, x.n, input, 1.0, &dy.data, true, &x.data, false, 1.0, dw,
            );
            for row in dy.data.chunks(output) {
                for (b, g) in db.iter_mut().zip(row) {
                    *b += g;
                }
            }
            want_dx.then(|| {
                let mut dx = Tensor::zeros(x.n, x.c, x.h, x.w);
                gemm(
                    x.n,
                    output,
                    input,
                    1.0,
                    &dy.data,
                    false,
                    p,
                    false,
                    0.0,
                    &mut dx.data,
                );
                dx
            })
        }
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn map(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_vec(x.n, x.c, x.h, x.w, x.data.iter().map(|&v| f(v)).collect())
}

fn zip_map(x: &Tensor, g: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_vec(
        x.n,
        x.c,
        x.h,
        x.w,
        x.data.iter().zip(&g.data).map(|(&v, &d)| f(v, d)).collect(),
    )
}

fn im2col(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    oh: usize,
    ow: usize,
    cols: &mut [f64],
) {
    let pad = (k / 2) as isize;
    let p = oh * ow;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * p..][..p];
                for oy in 0..oh {
                    let iy = (oy * s + ky) as isize - pad;
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * s + kx) as isize - pad;
                        *d = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(
    cols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    oh: usize,
    ow: usize,
    dx: &mut [f64],
) {
    let pad = (k / 2) as isize;
    let p = oh * ow;
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * p..][..p];
                for oy in 0..oh {
                    let iy = (oy * s + ky) as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = iy as usize * w;
                    for ox in 0..ow {
                        let ix = (ox * s + kx) as isize - pad;
                        if ix >= 0 && ix < w as isize {
                            plane[base + ix as usize] += row[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn conv_dims(x: &Tensor, k: usize, s: usize) -> (usize, usize) {
    let pad = k / 2;
    ((x.h + 2 * pad - k) / s + 1, (x.w + 2 * pad - k) / s + 1)
}

fn conv_forward(x: &Tensor, p: &[f64], out_ch: usize, k: usize, s: usize) -> Tensor {
    let (oh, ow) = conv_dims(x, k, s);
    let kk = x.c * k * k;
    let (weight, bias) = p.split_at(out_ch * kk);
    let mut out = Tensor::zeros(x.n, out_ch, oh, ow);
    let mut cols = vec![0.0; kk * oh * ow];
    for n in 0..x.n {
        im2col(x.sample(n), x.c, x.h, x.w, k, s, oh, ow, &mut cols);
        let o = out.sample_mut(n);
        for (plane, &b) in o.chunks_mut(oh * ow).zip(bias) {
            plane.fill(b);
        }
        gemm(
            out_ch,
            kk,
            oh * ow,
            1.0,
            weight,
            false,
            &cols,
            false,
            1.0,
            o,
        );
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    x: &Tensor,
    p: &[f64],
    dy: &Tensor,
    dp: &mut [f64],
    out_ch: usize,
    k: usize,
    s: usize,
    want_dx: bool,
) -> Option<Tensor> {
    let (oh, ow) = (dy.h, dy.w);
    let kk = x.c * k * k;
    let weight = &p[..out_ch * kk];
    let (dw, db) = dp.split_at_mut(out_ch * kk);
    let mut cols = vec![0.0; kk * oh * ow];
    let mut dcols = vec![0.0; kk * oh * ow];
    let mut dx = want_dx.then(|| Tensor::zeros(x.n, x.c, x.h, x.w));
    for n in 0..x.n {
        let g = dy.sample(n);
        for (b, plane) in db.iter_mut().zip(g.chunks(oh * ow)) {
            *b += plane.iter().sum::<f64>();
        }
        im2col(x.sample(n), x.c, x.h, x.w, k, s, oh, ow, &mut cols);
        gemm(out_ch, oh * ow, kk, 1.0, g, false, &cols, true, 1.0, dw);
        if let Some(dx) = dx.as_mut() {
            gemm(
                kk,
                out_ch,
                oh * ow,
                1.0,
                weight,
                true,
                g,
                false,
                0.0,
                &mut dcols,
            );
            col2im(&dcols, x.c, x.h, x.w, k, s, oh, ow, dx.sample_mut(n));
        }
    }
    dx
}

fn batchnorm_forward(
    x: &Tensor,
    p: &[f64],
    channels: usize,
    running: Option<&[f64]>,
) -> (Tensor, Aux) {
    let (gamma, beta) = p.split_at(channels);
    let hw = x.h * x.w;
    let m = (x.n * hw) as f64;
    let mut mean = vec![0.0; channels];
    let mut var = vec![0.0; channels];
    match running {
        Some(buf) => {
            mean.copy_from_slice(&buf[..channels]);
            var.copy_from_slice(&buf[channels..]);
        }
        None => {
            for n in 0..x.n {
                for (c, plane) in x.sample(n).chunks(hw).enumerate() {
                    mean[c] += plane.iter().sum::<f64>();
                }
            }
            mean.iter_mut().for_each(|v| *v /= m);
            for n in 0..x.n {
                for (c, plane) in x.sample(n).chunks(hw).enumerate() {
                    var[c] += plane.iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>();
                }
            }
            var.iter_mut().for_each(|v| *v /= m);
        }
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut xhat = vec![0.0; x.len()];
    let mut out = Tensor::zeros(x.n, x.c, x.h, x.w);
    for (i, (&v, (xh, o))) in x
        .data
        .iter()
        .zip(xhat.iter_mut().zip(out.data.iter_mut()))
        .enumerate()
    {
        let c = (i / hw) % channels;
        *xh = (v - mean[c]) * inv_std[c];
        *o = gamma[c] * *xh + beta[c];
    }
    (
        out,
        Aux::Norm {
            xhat,
            inv_std,
            mean,
            var,
        },
    )
}

fn batchnorm_backward(
    x: &Tensor,
    p: &[f64],
    xhat: &[f64],
    inv_std: &[f64],
    dy: &Tensor,
    dp: &mut [f64],
    channels: usize,
) -> Tensor {
    let gamma = &p[..channels];
    let hw = x.h * x.w;
    let m = (x.n * hw) as f64;
    let mut sum_dy = vec![0.0; channels];
    let mut sum_dy_xhat = vec![0.0; channels];
    for (i, (&g, &xh)) in dy.data.iter().zip(xhat).enumerate() {
        let c = (i / hw) % channels;
        sum_dy[c] += g;
        sum_dy_xhat[c] += g * xh;
    }
    for c in 0..channels {
        dp[c] += sum_dy_xhat[c];
        dp[channels + c] += sum_dy[c];
    }
    let mut dx = Tensor::zeros(x.n, x.c, x.h, x.w);
    for (i, (d, (&g, &xh))) in dx.data.iter_mut().zip(dy.data.iter().zip(xhat)).enumerate() {
        let c = (i / hw) % channels;
        *d = gamma[c] * inv_std[c] / m * (m * g - sum_dy[c] - xh * sum_dy_xhat[c]);
    }
    dx
}

fn upsample_forward(x: &Tensor) -> Tensor {
    let (h2, w2) = (2 * x.h, 2 * x.w);
    let mut out = Tensor::zeros(x.n, x.c, h2, w2);
    for (src, dst) in x.data.chunks(x.h * x.w).zip(out.data.chunks_mut(h2 * w2)) {
        for y in 0..h2 {
            for xx in 0..w2 {
                dst[y * w2 + xx] = src[(y / 2) * x.w + xx / 2];
            }
        }
    }
    out
}

fn upsample_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(x.n, x.c, x.h, x.w);
    let (h2, w2) = (dy.h, dy.w);
    for (dst, src) in dx.data.chunks_mut(x.h * x.w).zip(dy.data.chunks(h2 * w2)) {
        for y in 0..h2 {
            for xx in 0..w2 {
                dst[(y / 2) * x.w + xx / 2] += src[y * w2 + xx];
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, n: usize, c: usize, h: usize, w: usize) -> Tensor {
        Tensor::from_vec(
            n,
            c,
            h,
            w,
            (0..n * c * h * w)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )
    }

    /// Scalar objective `sum(out * probe)`; returns the max relative error
    /// between analytic and central-difference gradients (params and input).
    fn grad_check(net: &Sequential, x: &Tensor, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = net.init_params(&mut rng);
        // perturb biases/scales away from their defaults
        for p in &mut params {
            *p += rng.random_range(-0.1..0.1);
        }
        let tape = net.forward(&params, x);
        let probe: Vec<f64> = (0..tape.output.len())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let objective = |params: &[f64], x: &Tensor| -> f64 {
            let out = net.forward(params, x).output;
            out.data.iter().zip(&probe).map(|(a, b)| a * b).sum()
        };
        let g = Tensor {
            data: probe.clone(),
            ..tape.output.clone()
        };
        let mut grads = vec![0.0; params.len()];
        let dx = net.backward(&params, &tape, g, &mut grads, true).unwrap();

        let h = 1e-5;
        let mut worst: f64 = 0.0;
        let rel = |a: f64, b: f64| (a - b).abs() / (a.abs().max(b.abs()).max(1e-6));
        for i in (0..params.len()).step_by((params.len() / 40).max(1)) {
            let mut pp = params.clone();
            pp[i] += h;
            let fp = objective(&pp, x);
            pp[i] -= 2.0 * h;
            let fm = objective(&pp, x);
            worst = worst.max(rel((fp - fm) / (2.0 * h), grads[i]));
        }
        for i in (0..x.len()).step_by((x.len() / 40).max(1)) {
            let mut xp = x.clone();
            xp.data[i] += h;
            let fp = objective(&params, &xp);
            xp.data[i] -= 2.0 * h;
            let fm = objective(&params, &xp);
            worst = worst.max(rel((fp - fm) / (2.0 * h), dx.data[i]));
        }
        worst
    }

    #[test]
    fn conv_shapes_follow_same_padding() {
        let l = Layer::Conv2d {
            in_ch: 32,
            out_ch: 16,
            kernel: 7,
            stride: 2,
        };
        assert_eq!(l.output_shape(32, 32, 32), Some((16, 16, 16)));
        let l = Layer::Conv2d {
            in_ch: 4,
            out_ch: 4,
            kernel: 3,
            stride: 2,
        };
        assert_eq!(l.output_shape(4, 1, 1), Some((4, 1, 1)));
        assert_eq!(l.output_shape(3, 8, 8), None);
    }

    #[test]
    fn conv_stack_gradients_match_finite_differences() {
        let net = Sequential::new(vec![
            Layer::Conv2d {
                in_ch: 2,
                out_ch: 3,
                kernel: 3,
                stride: 1,
            },
            Layer::LeakyRelu { slope: 0.2 },
            Layer::Conv2d {
                in_ch: 3,
                out_ch: 4,
                kernel: 3,
                stride: 2,
            },
            Layer::Relu,
            Layer::Upsample2x,
            Layer::Conv2d {
                in_ch: 4,
                out_ch: 2,
                kernel: 1,
                stride: 1,
            },
            Layer::Sigmoid,
        ]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_tensor(&mut rng, 2, 2, 6, 6);
        assert!(grad_check(&net, &x, 11) < 1e-5);
    }

    #[test]
    fn batchnorm_and_linear_gradients_match_finite_differences() {
        let net = Sequential::new(vec![
            Layer::Conv2d {
                in_ch: 3,
                out_ch: 4,
                kernel: 1,
                stride: 1,
            },
            Layer::BatchNorm { channels: 4 },
            Layer::GlobalAvgPool,
            Layer::Linear {
                input: 4,
                output: 5,
            },
            Layer::Relu,
            Layer::Linear {
                input: 5,
                output: 2,
            },
        ]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_tensor(&mut rng, 3, 3, 4, 4);
        assert!(grad_check(&net, &x, 13) < 1e-5);
    }

    #[test]
    fn batchnorm_output_is_standardized() {
        let net = Sequential::new(vec![Layer::BatchNorm { channels: 2 }]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_tensor(&mut rng, 4, 2, 3, 3);
        let params = net.init_params(&mut rng);
        let y = net.forward(&params, &x).output;
        for c in 0..2 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|n| (0..9).map(move |i| (n, i)))
                .map(|(n, i)| y.sample(n)[c * 9 + i])
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn eval_mode_uses_running_statistics() {
        let net = Sequential::new(vec![Layer::BatchNorm { channels: 1 }]);
        let params = vec![2.0, 1.0];
        let buffers = vec![0.5, 4.0];
        let x = Tensor::from_vec(1, 1, 1, 2, vec![0.5, 2.5]);
        let y = net.forward_eval(&params, &buffers, &x);
        let s = 1.0 / (4.0 + BN_EPS).sqrt();
        assert!((y.data[0] - 1.0).abs() < 1e-12);
        assert!((y.data[1] - (2.0 * 2.0 * s + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn upsample_repeats_pixels() {
        let x = Tensor::from_vec(1, 1, 1, 2, vec![1.0, 2.0]);
        let y = upsample_forward(&x);
        assert_eq!(y.data, vec![1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
    }
}
