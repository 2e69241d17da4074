//! Layers with explicit forward traces and hand-written backward passes.
//!
//! A forward call returns the output together with a [`Trace`] of whatever
//! each layer needs for its backward pass, so the same network can be applied
//! several times in one step and each application backpropagated separately.
//! Parameter gradients accumulate into [`Param::grad`] until cleared.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::losses::reflect;
use crate::tensor::{col2im, conv_out, gemm, im2col, Tensor};

const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
}

impl Param {
    fn zeros(n: usize) -> Self {
        Param {
            value: vec![0.0; n],
            grad: vec![0.0; n],
        }
    }

    fn normal(n: usize, std: f64, rng: &mut impl Rng) -> Self {
        let dist = Normal::new(0.0, std).expect("valid stddev");
        Param {
            value: (0..n).map(|_| dist.sample(rng) as f32).collect(),
            grad: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Serializable layer description used for checkpoint compatibility checks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerSpec {
    Conv { cin: usize, cout: usize, k: usize, stride: usize, pad: usize },
    ConvTranspose { cin: usize, cout: usize, k: usize, stride: usize, pad: usize, out_pad: usize },
    ReflectPad(usize),
    InstanceNorm,
    Relu,
    LeakyRelu,
    Tanh,
    Sigmoid,
    Residual(Vec<LayerSpec>),
    GlobalAvgPool,
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    /// `cout × (cin·k·k)`
    pub weight: Param,
    pub bias: Param,
}

impl Conv2d {
    pub fn new(cin: usize, cout: usize, k: usize, stride: usize, pad: usize, std: f64, rng: &mut impl Rng) -> Self {
        Conv2d {
            cin,
            cout,
            k,
            stride,
            pad,
            weight: Param::normal(cout * cin * k * k, std, rng),
            bias: Param::zeros(cout),
        }
    }
}

/// Fractionally strided convolution; the exact adjoint of a strided
/// [`Conv2d`] with the same kernel, stride and padding.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_pad: usize,
    /// `cin × (cout·k·k)`
    pub weight: Param,
    pub bias: Param,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        out_pad: usize,
        std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        ConvTranspose2d {
            cin,
            cout,
            k,
            stride,
            pad,
            out_pad,
            weight: Param::normal(cin * cout * k * k, std, rng),
            bias: Param::zeros(cout),
        }
    }

    fn out_size(&self, s: usize) -> usize {
        (s - 1) * self.stride + self.k + self.out_pad - 2 * self.pad
    }
}

#[derive(Debug, Clone)]
pub enum Layer {
    Conv(Conv2d),
    ConvTranspose(ConvTranspose2d),
    ReflectPad(usize),
    InstanceNorm,
    Relu,
    LeakyRelu(f32),
    Tanh,
    Sigmoid,
    Residual(Sequential),
    GlobalAvgPool,
}

#[derive(Debug)]
enum Cache {
    Cols { cols: Vec<Vec<f32>>, in_shape: [usize; 4] },
    Input(Tensor),
    Output(Tensor),
    Norm { normalized: Tensor, inv_std: Vec<f32> },
    Shape([usize; 4]),
    Residual(Trace),
}

/// Per-layer state recorded by a forward pass.
#[derive(Debug, Default)]
pub struct Trace(Vec<Cache>);

#[derive(Debug, Clone, Default)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Sequential { layers }
    }

    pub fn forward(&self, x: Tensor) -> (Tensor, Trace) {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut h = x;
        for layer in &self.layers {
            let (out, cache) = layer.forward(h, true);
            caches.push(cache.expect("trace requested"));
            h = out;
        }
        (h, Trace(caches))
    }

    /// Forward pass without recording a trace.
    pub fn infer(&self, x: Tensor) -> Tensor {
        self.layers.iter().fold(x, |h, layer| layer.forward(h, false).0)
    }

    /// Backpropagates `grad` through a trace of this network, returning the
    /// gradient with respect to the input. Parameter gradients are accumulated
    /// only when `param_grads` is set.
    pub fn backward(&mut self, trace: Trace, grad: Tensor, param_grads: bool) -> Tensor {
        let mut g = grad;
        for (layer, cache) in self.layers.iter_mut().zip(trace.0).rev() {
            g = layer.backward(cache, g, param_grads);
        }
        g
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv(c) => out.extend([&c.weight, &c.bias]),
                Layer::ConvTranspose(c) => out.extend([&c.weight, &c.bias]),
                Layer::Residual(s) => out.extend(s.params()),
                _ => {}
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Conv(c) => out.extend([&mut c.weight, &mut c.bias]),
                Layer::ConvTranspose(c) => out.extend([&mut c.weight, &mut c.bias]),
                Layer::Residual(s) => out.extend(s.params_mut()),
                _ => {}
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.grad.fill(0.0);
        }
    }

    pub fn spec(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(Layer::spec).collect()
    }
}

impl Layer {
    pub fn spec(&self) -> LayerSpec {
        match self {
            Layer::Conv(c) => LayerSpec::Conv {
                cin: c.cin,
                cout: c.cout,
                k: c.k,
                stride: c.stride,
                pad: c.pad,
            },
            Layer::ConvTranspose(c) => LayerSpec::ConvTranspose {
                cin: c.cin,
                cout: c.cout,
                k: c.k,
                stride: c.stride,
                pad: c.pad,
                out_pad: c.out_pad,
            },
            Layer::ReflectPad(p) => LayerSpec::ReflectPad(*p),
            Layer::InstanceNorm => LayerSpec::InstanceNorm,
            Layer::Relu => LayerSpec::Relu,
            Layer::LeakyRelu(_) => LayerSpec::LeakyRelu,
            Layer::Tanh => LayerSpec::Tanh,
            Layer::Sigmoid => LayerSpec::Sigmoid,
            Layer::Residual(s) => LayerSpec::Residual(s.spec()),
            Layer::GlobalAvgPool => LayerSpec::GlobalAvgPool,
        }
    }

    fn forward(&self, x: Tensor, keep: bool) -> (Tensor, Option<Cache>) {
        match self {
            Layer::Conv(conv) => conv_forward(conv, x, keep),
            Layer::ConvTranspose(conv) => {
                let y = conv_transpose_forward(conv, &x);
                (y, keep.then_some(Cache::Input(x)))
            }
            Layer::ReflectPad(p) => {
                let shape = x.shape();
                (reflect_pad(&x, *p), keep.then_some(Cache::Shape(shape)))
            }
            Layer::InstanceNorm => {
                let (y, inv_std) = instance_norm(x);
                let cache = keep.then(|| Cache::Norm {
                    normalized: y.clone(),
                    inv_std,
                });
                (y, cache)
            }
            Layer::Relu => {
                let mut y = x;
                y.data.iter_mut().for_each(|v| *v = v.max(0.0));
                let cache = keep.then(|| Cache::Output(y.clone()));
                (y, cache)
            }
            Layer::LeakyRelu(slope) => {
                let mut y = x.clone();
                y.data.iter_mut().for_each(|v| {
                    if *v < 0.0 {
                        *v *= slope
                    }
                });
                (y, keep.then_some(Cache::Input(x)))
            }
            Layer::Tanh => {
                let mut y = x;
                y.data.iter_mut().for_each(|v| *v = v.tanh());
                let cache = keep.then(|| Cache::Output(y.clone()));
                (y, cache)
            }
            Layer::Sigmoid => {
                let mut y = x;
                y.data.iter_mut().for_each(|v| *v = 1.0 / (1.0 + (-*v).exp()));
                let cache = keep.then(|| Cache::Output(y.clone()));
                (y, cache)
            }
            Layer::Residual(block) => {
                if keep {
                    let (mut y, trace) = block.forward(x.clone());
                    y.add_assign(&x);
                    (y, Some(Cache::Residual(trace)))
                } else {
                    let mut y = block.infer(x.clone());
                    y.add_assign(&x);
                    (y, None)
                }
            }
            Layer::GlobalAvgPool => {
                let plane = x.plane() as f64;
                let data = x
                    .data
                    .chunks_exact(x.plane())
                    .map(|p| (p.iter().map(|&v| v as f64).sum::<f64>() / plane) as f32)
                    .collect();
                let y = Tensor::from_vec(x.n, x.c, 1, 1, data).expect("pooled shape");
                (y, keep.then_some(Cache::Shape(x.shape())))
            }
        }
    }

    fn backward(&mut self, cache: Cache, g: Tensor, param_grads: bool) -> Tensor {
        match (self, cache) {
            (Layer::Conv(conv), Cache::Cols { cols, in_shape }) => conv_backward(conv, &cols, in_shape, &g, param_grads),
            (Layer::ConvTranspose(conv), Cache::Input(x)) => conv_transpose_backward(conv, &x, &g, param_grads),
            (Layer::ReflectPad(p), Cache::Shape(shape)) => reflect_pad_backward(&g, *p, shape),
            (Layer::InstanceNorm, Cache::Norm { normalized, inv_std }) => instance_norm_backward(&normalized, &inv_std, g),
            (Layer::Relu, Cache::Output(y)) => {
                let mut g = g;
                for (gv, yv) in g.data.iter_mut().zip(&y.data) {
                    if *yv <= 0.0 {
                        *gv = 0.0;
                    }
                }
                g
            }
            (Layer::LeakyRelu(slope), Cache::Input(x)) => {
                let mut g = g;
                for (gv, xv) in g.data.iter_mut().zip(&x.data) {
                    if *xv < 0.0 {
                        *gv *= *slope;
                    }
                }
                g
            }
            (Layer::Tanh, Cache::Output(y)) => {
                let mut g = g;
                for (gv, yv) in g.data.iter_mut().zip(&y.data) {
                    *gv *= 1.0 - yv * yv;
                }
                g
            }
            (Layer::Sigmoid, Cache::Output(y)) => {
                let mut g = g;
                for (gv, yv) in g.data.iter_mut().zip(&y.data) {
                    *gv *= yv * (1.0 - yv);
                }
                g
            }
            (Layer::Residual(block), Cache::Residual(trace)) => {
                let mut dx = block.backward(trace, g.clone(), param_grads);
                dx.add_assign(&g);
                dx
            }
            (Layer::GlobalAvgPool, Cache::Shape([n, c, h, w])) => {
                let inv = 1.0 / (h * w) as f32;
                let mut data = Vec::with_capacity(n * c * h * w);
                for v in &g.data {
                    data.extend(std::iter::repeat(v * inv).take(h * w));
                }
                Tensor::from_vec(n, c, h, w, data).expect("pool gradient shape")
            }
            _ => unreachable!("trace does not belong to this layer"),
        }
    }
}

fn conv_forward(conv: &Conv2d, x: Tensor, keep: bool) -> (Tensor, Option<Cache>) {
    assert_eq!(x.c, conv.cin, "conv expects {} input channels, got {}", conv.cin, x.c);
    let oh = conv_out(x.h, conv.k, conv.stride, conv.pad).expect("input smaller than kernel");
    let ow = conv_out(x.w, conv.k, conv.stride, conv.pad).expect("input smaller than kernel");
    let kk = conv.cin * conv.k * conv.k;
    let p = oh * ow;
    let mut y = Tensor::zeros(x.n, conv.cout, oh, ow);
    let mut all_cols = Vec::with_capacity(if keep { x.n } else { 0 });
    for i in 0..x.n {
        let cols = im2col(x.sample(i), x.c, x.h, x.w, conv.k, conv.stride, conv.pad);
        let out = y.sample_mut(i);
        for (o, b) in conv.bias.value.iter().enumerate() {
            out[o * p..(o + 1) * p].fill(*b);
        }
        gemm(conv.cout, kk, p, &conv.weight.value, false, &cols, false, 1.0, out);
        if keep {
            all_cols.push(cols);
        }
    }
    let cache = keep.then(|| Cache::Cols {
        cols: all_cols,
        in_shape: x.shape(),
    });
    (y, cache)
}

fn conv_backward(conv: &mut Conv2d, cols: &[Vec<f32>], in_shape: [usize; 4], g: &Tensor, param_grads: bool) -> Tensor {
    let [n, c, h, w] = in_shape;
    let kk = conv.cin * conv.k * conv.k;
    let p = g.plane();
    let mut dx = Tensor::zeros(n, c, h, w);
    let mut dcols = vec![0.0f32; kk * p];
    for i in 0..n {
        let gi = g.sample(i);
        if param_grads {
            gemm(conv.cout, p, kk, gi, false, &cols[i], true, 1.0, &mut conv.weight.grad);
            for (o, gb) in conv.bias.grad.iter_mut().enumerate() {
                *gb += gi[o * p..(o + 1) * p].iter().sum::<f32>();
            }
        }
        gemm(kk, conv.cout, p, &conv.weight.value, true, gi, false, 0.0, &mut dcols);
        let folded = col2im(&dcols, c, h, w, conv.k, conv.stride, conv.pad);
        dx.sample_mut(i).copy_from_slice(&folded);
    }
    dx
}

fn conv_transpose_forward(conv: &ConvTranspose2d, x: &Tensor) -> Tensor {
    assert_eq!(x.c, conv.cin, "transposed conv expects {} input channels, got {}", conv.cin, x.c);
    let (oh, ow) = (conv.out_size(x.h), conv.out_size(x.w));
    let okk = conv.cout * conv.k * conv.k;
    let p = x.plane();
    let mut y = Tensor::zeros(x.n, conv.cout, oh, ow);
    let mut cols = vec![0.0f32; okk * p];
    for i in 0..x.n {
        gemm(okk, conv.cin, p, &conv.weight.value, true, x.sample(i), false, 0.0, &mut cols);
        let mut folded = col2im(&cols, conv.cout, oh, ow, conv.k, conv.stride, conv.pad);
        let plane = oh * ow;
        for (o, b) in conv.bias.value.iter().enumerate() {
            folded[o * plane..(o + 1) * plane].iter_mut().for_each(|v| *v += b);
        }
        y.sample_mut(i).copy_from_slice(&folded);
    }
    y
}

fn conv_transpose_backward(conv: &mut ConvTranspose2d, x: &Tensor, g: &Tensor, param_grads: bool) -> Tensor {
    let okk = conv.cout * conv.k * conv.k;
    let p = x.plane();
    let mut dx = Tensor::zeros(x.n, x.c, x.h, x.w);
    for i in 0..x.n {
        let gcols = im2col(g.sample(i), g.c, g.h, g.w, conv.k, conv.stride, conv.pad);
        gemm(conv.cin, okk, p, &conv.weight.value, false, &gcols, false, 0.0, dx.sample_mut(i));
        if param_grads {
            gemm(conv.cin, p, okk, x.sample(i), false, &gcols, true, 1.0, &mut conv.weight.grad);
            let gp = g.plane();
            let gi = g.sample(i);
            for (o, gb) in conv.bias.grad.iter_mut().enumerate() {
                *gb += gi[o * gp..(o + 1) * gp].iter().sum::<f32>();
            }
        }
    }
    dx
}

fn reflect_pad(x: &Tensor, p: usize) -> Tensor {
    assert!(p < x.h && p < x.w, "reflection padding {p} needs a larger input than {}x{}", x.h, x.w);
    let (h, w) = (x.h + 2 * p, x.w + 2 * p);
    let mut y = Tensor::zeros(x.n, x.c, h, w);
    let rows: Vec<usize> = (0..h).map(|r| reflect(r as isize - p as isize, x.h)).collect();
    let cols: Vec<usize> = (0..w).map(|c| reflect(c as isize - p as isize, x.w)).collect();
    for (src, dst) in x.data.chunks_exact(x.plane()).zip(y.data.chunks_exact_mut(h * w)) {
        for (r, &sr) in rows.iter().enumerate() {
            let srow = &src[sr * x.w..(sr + 1) * x.w];
            for (c, &sc) in cols.iter().enumerate() {
                dst[r * w + c] = srow[sc];
            }
        }
    }
    y
}

fn reflect_pad_backward(g: &Tensor, p: usize, [n, c, h, w]: [usize; 4]) -> Tensor {
    let mut dx = Tensor::zeros(n, c, h, w);
    let rows: Vec<usize> = (0..g.h).map(|r| reflect(r as isize - p as isize, h)).collect();
    let cols: Vec<usize> = (0..g.w).map(|c| reflect(c as isize - p as isize, w)).collect();
    for (src, dst) in g.data.chunks_exact(g.plane()).zip(dx.data.chunks_exact_mut(h * w)) {
        for (r, &sr) in rows.iter().enumerate() {
            for (cc, &sc) in cols.iter().enumerate() {
                dst[sr * w + sc] += src[r * g.w + cc];
            }
        }
    }
    dx
}

fn instance_norm(x: Tensor) -> (Tensor, Vec<f32>) {
    let plane = x.plane();
    let mut y = x;
    let mut inv_std = Vec::with_capacity(y.n * y.c);
    for p in y.data.chunks_exact_mut(plane) {
        let mean = p.iter().map(|&v| v as f64).sum::<f64>() / plane as f64;
        let var = p.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / plane as f64;
        let inv = 1.0 / (var + NORM_EPS).sqrt();
        for v in p.iter_mut() {
            *v = ((*v as f64 - mean) * inv) as f32;
        }
        inv_std.push(inv as f32);
    }
    (y, inv_std)
}

fn instance_norm_backward(y: &Tensor, inv_std: &[f32], g: Tensor) -> Tensor {
    let plane = y.plane();
    let mut dx = g;
    for ((gp, yp), &inv) in dx
        .data
        .chunks_exact_mut(plane)
        .zip(y.data.chunks_exact(plane))
        .zip(inv_std)
    {
        let mean_g = gp.iter().map(|&v| v as f64).sum::<f64>() / plane as f64;
        let mean_gy = gp.iter().zip(yp).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>() / plane as f64;
        for (gv, &yv) in gp.iter_mut().zip(yp) {
            *gv = (inv as f64 * (*gv as f64 - mean_g - yv as f64 * mean_gy)) as f32;
        }
    }
    dx
}

/// Adam with bias correction over a fixed, ordered list of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(sizes: &[usize], beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn update(&mut self, params: &mut [&mut Param], lr: f64) {
        assert_eq!(params.len(), self.m.len(), "optimizer built for a different parameter list");
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let step_size = (lr / bc1) as f32;
        let inv_bc2 = 1.0 / bc2;
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.value.len() {
                let g = p.grad[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let denom = ((v[i] as f64 * inv_bc2).sqrt() + self.eps) as f32;
                p.value[i] -= step_size * m[i] / denom;
            }
        }
    }
}
