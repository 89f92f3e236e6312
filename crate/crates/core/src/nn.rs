//! Hand-differentiated layer kernels shared by the codec and the denoiser.
//!
//! Layers are stateless functions over explicit weights; callers keep whatever
//! activations they need for the backward pass.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::{gemm, Matrix, Operand, Real, Tensor};

/// Square convolution geometry. Weights are stored as an
/// `out × (in·k·k)` matrix so that adapters see a plain 2-D weight.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvSpec {
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            pad: kernel / 2,
        }
    }

    pub fn down(in_channels: usize, out_channels: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel: 3,
            stride: 2,
            pad: 1,
        }
    }

    pub fn weight_shape(&self) -> (usize, usize) {
        (
            self.out_channels,
            self.in_channels * self.kernel * self.kernel,
        )
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }
}

/// Unfolds `x` into a `(C·k·k) × (Ho·Wo)` patch matrix.
pub fn im2col<T: Real>(x: &Tensor<T>, spec: &ConvSpec) -> Vec<T> {
    let (c, h, w) = x.shape();
    let k = spec.kernel;
    let (ho, wo) = spec.output_size(h, w);
    let mut cols = vec![T::zero(); c * k * k * ho * wo];
    let pad = spec.pad as isize;
    for ci in 0..c {
        let plane = x.channel(ci);
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * spec.stride) as isize + ky as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let dst_row = &mut dst[oy * wo..(oy + 1) * wo];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * spec.stride) as isize + kx as isize - pad;
                        if ix >= 0 && ix < w as isize {
                            *d = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input grid.
pub fn col2im<T: Real>(cols: &[T], spec: &ConvSpec, h: usize, w: usize) -> Tensor<T> {
    let c = spec.in_channels;
    let k = spec.kernel;
    let (ho, wo) = spec.output_size(h, w);
    let mut x = Tensor::zeros(c, h, w);
    let pad = spec.pad as isize;
    for ci in 0..c {
        let plane = x.channel_mut(ci);
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * spec.stride) as isize + ky as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * spec.stride) as isize + kx as isize - pad;
                        if ix >= 0 && ix < w as isize {
                            plane[iy as usize * w + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Forward convolution. Returns the output and the patch matrix needed by
/// [`conv2d_backward`].
pub fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    weight: &Matrix<T>,
    bias: &[T],
    spec: &ConvSpec,
) -> (Tensor<T>, Vec<T>) {
    debug_assert_eq!(x.channels, spec.in_channels);
    debug_assert_eq!(weight.shape(), spec.weight_shape());
    let (ho, wo) = spec.output_size(x.height, x.width);
    let cols = im2col(x, spec);
    let mut y = Tensor::zeros(spec.out_channels, ho, wo);
    for (o, &b) in bias.iter().enumerate() {
        y.channel_mut(o).fill(b);
    }
    let kk = weight.cols;
    gemm(
        T::one(),
        weight.op(),
        Operand::new(&cols, kk, ho * wo),
        T::one(),
        &mut y.data,
    );
    (y, cols)
}

pub struct ConvGrads<T> {
    pub weight: Option<Matrix<T>>,
    pub bias: Vec<T>,
    pub input: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Real>(
    dy: &Tensor<T>,
    cols: &[T],
    weight: &Matrix<T>,
    spec: &ConvSpec,
    input_hw: (usize, usize),
    want_weight: bool,
    want_input: bool,
) -> ConvGrads<T> {
    let plane = dy.plane();
    let kk = weight.cols;
    let dy_op = Operand::new(&dy.data, spec.out_channels, plane);
    let bias = (0..spec.out_channels)
        .map(|o| dy.channel(o).iter().copied().sum())
        .collect();
    let weight_grad = want_weight.then(|| {
        let mut dw = Matrix::zeros(spec.out_channels, kk);
        gemm(
            T::one(),
            dy_op,
            Operand::new(cols, kk, plane).t(),
            T::zero(),
            &mut dw.data,
        );
        dw
    });
    let input = want_input.then(|| {
        let mut dcols = vec![T::zero(); kk * plane];
        gemm(T::one(), weight.op().t(), dy_op, T::zero(), &mut dcols);
        col2im(&dcols, spec, input_hw.0, input_hw.1)
    });
    ConvGrads {
        weight: weight_grad,
        bias,
        input,
    }
}

/// 2×2 stride-2 transposed convolution. `weight` is `(out·4) × in`, row
/// `o·4 + dy·2 + dx` producing output pixel `(2i+dy, 2j+dx)` of channel `o`.
pub fn upconv2x2_forward<T: Real>(x: &Tensor<T>, weight: &Matrix<T>, bias: &[T]) -> Tensor<T> {
    let (c, h, w) = x.shape();
    let out_c = bias.len();
    debug_assert_eq!(weight.shape(), (out_c * 4, c));
    let mut z = vec![T::zero(); out_c * 4 * h * w];
    gemm(
        T::one(),
        weight.op(),
        Operand::new(&x.data, c, h * w),
        T::zero(),
        &mut z,
    );
    let mut y = Tensor::zeros(out_c, 2 * h, 2 * w);
    let ow = 2 * w;
    for o in 0..out_c {
        let b = bias[o];
        let out = y.channel_mut(o);
        for s in 0..4 {
            let (sy, sx) = (s / 2, s % 2);
            let src = &z[(o * 4 + s) * h * w..(o * 4 + s + 1) * h * w];
            for i in 0..h {
                for j in 0..w {
                    out[(2 * i + sy) * ow + 2 * j + sx] = src[i * w + j] + b;
                }
            }
        }
    }
    y
}

pub fn upconv2x2_backward<T: Real>(
    dy: &Tensor<T>,
    x: &Tensor<T>,
    weight: &Matrix<T>,
    want_weight: bool,
    want_input: bool,
) -> ConvGrads<T> {
    let (c, h, w) = x.shape();
    let out_c = dy.channels;
    let ow = 2 * w;
    let mut dz = vec![T::zero(); out_c * 4 * h * w];
    let mut bias = vec![T::zero(); out_c];
    for o in 0..out_c {
        let g = dy.channel(o);
        bias[o] = g.iter().copied().sum();
        for s in 0..4 {
            let (sy, sx) = (s / 2, s % 2);
            let dst = &mut dz[(o * 4 + s) * h * w..(o * 4 + s + 1) * h * w];
            for i in 0..h {
                for j in 0..w {
                    dst[i * w + j] = g[(2 * i + sy) * ow + 2 * j + sx];
                }
            }
        }
    }
    let dz_op = Operand::new(&dz, out_c * 4, h * w);
    let weight_grad = want_weight.then(|| {
        let mut dw = Matrix::zeros(out_c * 4, c);
        gemm(
            T::one(),
            dz_op,
            Operand::new(&x.data, c, h * w).t(),
            T::zero(),
            &mut dw.data,
        );
        dw
    });
    let input = want_input.then(|| {
        let mut dx = Tensor::zeros(c, h, w);
        gemm(T::one(), weight.op().t(), dz_op, T::zero(), &mut dx.data);
        dx
    });
    ConvGrads {
        weight: weight_grad,
        bias,
        input,
    }
}

pub fn linear_forward<T: Real>(x: &[T], weight: &Matrix<T>, bias: &[T]) -> Vec<T> {
    let mut y = bias.to_vec();
    gemm(
        T::one(),
        weight.op(),
        Operand::new(x, x.len(), 1),
        T::one(),
        &mut y,
    );
    y
}

/// Returns `(dW, db, dx)`.
pub fn linear_backward<T: Real>(
    dy: &[T],
    x: &[T],
    weight: &Matrix<T>,
) -> (Matrix<T>, Vec<T>, Vec<T>) {
    let mut dw = Matrix::zeros(weight.rows, weight.cols);
    gemm(
        T::one(),
        Operand::new(dy, dy.len(), 1),
        Operand::new(x, 1, x.len()),
        T::zero(),
        &mut dw.data,
    );
    let mut dx = vec![T::zero(); x.len()];
    gemm(
        T::one(),
        weight.op().t(),
        Operand::new(dy, dy.len(), 1),
        T::zero(),
        &mut dx,
    );
    (dw, dy.to_vec(), dx)
}

pub fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub fn silu<T: Real>(x: T) -> T {
    x * sigmoid(x)
}

pub fn silu_grad<T: Real>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

pub fn silu_tensor<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(silu)
}

/// `dy ⊙ silu'(pre)`.
pub fn silu_backward<T: Real>(dy: &Tensor<T>, pre: &Tensor<T>) -> Tensor<T> {
    dy.zip_map(pre, |g, x| g * silu_grad(x))
}

pub fn add_channel_bias<T: Real>(x: &mut Tensor<T>, bias: &[T]) {
    for (c, &b) in bias.iter().enumerate() {
        for v in x.channel_mut(c) {
            *v += b;
        }
    }
}

pub fn channel_sums<T: Real>(x: &Tensor<T>) -> Vec<T> {
    (0..x.channels)
        .map(|c| x.channel(c).iter().copied().sum())
        .collect()
}

pub fn add_assign<T: Real>(acc: &mut [T], x: &[T]) {
    for (a, &b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}

/// He-normal initialisation scaled by `gain`.
pub fn he_matrix<T: Real, R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    fan_in: usize,
    gain: f64,
    rng: &mut R,
) -> Matrix<T> {
    let std = gain * (2.0 / fan_in.max(1) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::lit(z * std)
        })
        .collect();
    Matrix { rows, cols, data }
}

/// Adam with decoupled per-block state. Blocks are identified by position, so
/// callers must pass parameters in a stable order.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn update(&mut self, params: Vec<&mut [T]>, grads: Vec<&[T]>) {
        assert_eq!(params.len(), grads.len());
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![T::zero(); g.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let b1 = T::lit(self.beta1);
        let b2 = T::lit(self.beta2);
        let c1 = T::lit(1.0 - self.beta1.powi(self.step as i32));
        let c2 = T::lit(1.0 - self.beta2.powi(self.step as i32));
        let lr = T::lit(self.lr);
        let eps = T::lit(self.eps);
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            assert_eq!(p.len(), g.len());
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (T::one() - b1) * g[j];
                v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                p[j] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

impl<T: Real> Adam<T> {
    /// First and second moment buffers, in parameter-block order.
    pub fn moments(&self) -> (&[Vec<T>], &[Vec<T>]) {
        (&self.m, &self.v)
    }

    pub fn restore(&mut self, step: u64, m: Vec<Vec<T>>, v: Vec<Vec<T>>) {
        self.step = step;
        self.m = m;
        self.v = v;
    }
}

/// Convolution layer with its weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv<T> {
    pub spec: ConvSpec,
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Conv<T> {
    pub fn init<R: Rng + ?Sized>(spec: ConvSpec, gain: f64, rng: &mut R) -> Self {
        let (rows, cols) = spec.weight_shape();
        Conv {
            spec,
            weight: he_matrix(rows, cols, cols, gain, rng),
            bias: vec![T::zero(); spec.out_channels],
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> (Tensor<T>, Vec<T>) {
        conv2d_forward(x, &self.weight, &self.bias, &self.spec)
    }

    pub fn num_params(&self) -> usize {
        self.weight.data.len() + self.bias.len()
    }
}

/// 2×2 stride-2 transposed convolution layer.
#[derive(Clone, Debug, PartialEq)]
pub struct UpConv<T> {
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
}

impl<T: Real> UpConv<T> {
    pub fn init<R: Rng + ?Sized>(in_channels: usize, out_channels: usize, gain: f64, rng: &mut R) -> Self {
        UpConv {
            weight: he_matrix(out_channels * 4, in_channels, in_channels, gain, rng),
            bias: vec![T::zero(); out_channels],
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        upconv2x2_forward(x, &self.weight, &self.bias)
    }

    pub fn num_params(&self) -> usize {
        self.weight.data.len() + self.bias.len()
    }
}

/// Fully connected layer, `out × in` weight.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Linear<T> {
    pub fn init<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, gain: f64, rng: &mut R) -> Self {
        Linear {
            weight: he_matrix(out_dim, in_dim, in_dim, gain, rng),
            bias: vec![T::zero(); out_dim],
        }
    }

    pub fn forward(&self, x: &[T]) -> Vec<T> {
        linear_forward(x, &self.weight, &self.bias)
    }

    pub fn num_params(&self) -> usize {
        self.weight.data.len() + self.bias.len()
    }
}
