//! Scene-specific convolutional outpainter.
//!
//! The small image is pasted in the middle of a larger canvas with a fourth channel
//! marking the known pixels. A plain encoder–decoder predicts the whole canvas and the
//! known pixels are then copied back from the input, so only the border is synthesized.
//! Everything is deterministic: no dropout, no noise inputs.

use std::fmt::Debug;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use num_traits::Float;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::TrainingPair;
use crate::error::{NeoError, Result};
use crate::geometry::CameraIntrinsics;
use crate::image::ImageBuffer;
use crate::optim::{Adam, AdamConfig};
use crate::seeds::derive_seed;

/// Float types the network can run in. Matrix products go through `matrixmultiply`.
pub trait Scalar: Float + Send + Sync + Debug + Default + 'static {
    /// `c = a·b + beta·c` for row-major `a` (m×k), `b` (k×n), `c` (m×n), with optional
    /// transposition of `a` or `b` (the stored shapes are then k×m or n×k).
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], ta: bool, b: &[Self], tb: bool, beta: Self, c: &mut [Self]);
}

macro_rules! impl_scalar {
    ($t:ty, $f:path) => {
        impl Scalar for $t {
            fn gemm(m: usize, k: usize, n: usize, a: &[$t], ta: bool, b: &[$t], tb: bool, beta: $t, c: &mut [$t]) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
                let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
                // SAFETY: bounds asserted above; strides describe the row-major buffers.
                unsafe {
                    $f(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Identity,
    Relu,
    Logistic,
}

impl Activation {
    fn code(self) -> u32 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
            Activation::Logistic => 2,
        }
    }

    fn from_code(c: u32) -> Option<Self> {
        match c {
            0 => Some(Activation::Identity),
            1 => Some(Activation::Relu),
            2 => Some(Activation::Logistic),
            _ => None,
        }
    }
}

/// One convolution, optionally preceded by a 2× nearest-neighbour upsample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub upsample: bool,
    pub activation: Activation,
}

impl LayerSpec {
    pub const fn conv(in_channels: usize, out_channels: usize, stride: usize, activation: Activation) -> Self {
        LayerSpec {
            in_channels,
            out_channels,
            kernel: 3,
            stride,
            upsample: false,
            activation,
        }
    }

    pub const fn up(in_channels: usize, out_channels: usize, activation: Activation) -> Self {
        LayerSpec {
            in_channels,
            out_channels,
            kernel: 3,
            stride: 1,
            upsample: true,
            activation,
        }
    }

    fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
    }

    fn param_len(&self) -> usize {
        self.weight_len() + self.out_channels
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub layers: Vec<LayerSpec>,
}

impl Default for Architecture {
    fn default() -> Self {
        use Activation::*;
        Architecture {
            layers: vec![
                LayerSpec::conv(4, 16, 1, Relu),
                LayerSpec::conv(16, 32, 2, Relu),
                LayerSpec::conv(32, 32, 2, Relu),
                LayerSpec::conv(32, 32, 1, Relu),
                LayerSpec::up(32, 16, Relu),
                LayerSpec::up(16, 16, Relu),
                LayerSpec::conv(16, 3, 1, Logistic),
            ],
        }
    }
}

impl Architecture {
    /// Same layer shapes with every activation replaced by the identity.
    pub fn linearized(&self) -> Architecture {
        Architecture {
            layers: self
                .layers
                .iter()
                .map(|l| LayerSpec {
                    activation: Activation::Identity,
                    ..*l
                })
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .layers
            .first()
            .ok_or_else(|| NeoError::Architecture("no layers".into()))?;
        if first.in_channels != 4 {
            return Err(NeoError::Architecture("first layer must take 4 channels (RGB + mask)".into()));
        }
        if self.layers.last().map(|l| l.out_channels) != Some(3) {
            return Err(NeoError::Architecture("last layer must produce 3 channels".into()));
        }
        let mut scale: i32 = 0;
        for (i, w) in self.layers.windows(2).enumerate() {
            if w[0].out_channels != w[1].in_channels {
                return Err(NeoError::Architecture(format!(
                    "layer {} outputs {} channels but layer {} takes {}",
                    i,
                    w[0].out_channels,
                    i + 1,
                    w[1].in_channels
                )));
            }
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.kernel % 2 == 0 || l.kernel == 0 || !(l.stride == 1 || l.stride == 2) {
                return Err(NeoError::Architecture(format!(
                    "layer {i}: need an odd kernel and stride 1 or 2"
                )));
            }
            if l.upsample && l.stride != 1 {
                return Err(NeoError::Architecture(format!("layer {i}: upsample with stride")));
            }
            if l.upsample {
                scale -= 1;
            }
            if l.stride == 2 {
                scale += 1;
            }
            if scale < 0 {
                return Err(NeoError::Architecture(format!("layer {i} upsamples above input size")));
            }
        }
        if scale != 0 {
            return Err(NeoError::Architecture("output resolution differs from input".into()));
        }
        Ok(())
    }

    /// Factor the canvas sides must be divisible by.
    pub fn downsample_factor(&self) -> usize {
        let mut depth = 0usize;
        let mut max = 0usize;
        for l in &self.layers {
            if l.stride == 2 {
                depth += 1;
            }
            if l.upsample {
                depth = depth.saturating_sub(1);
            }
            max = max.max(depth);
        }
        1 << max
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerSpec::param_len).sum()
    }

    fn offsets(&self) -> Vec<usize> {
        let mut o = Vec::with_capacity(self.layers.len() + 1);
        let mut acc = 0;
        o.push(0);
        for l in &self.layers {
            acc += l.param_len();
            o.push(acc);
        }
        o
    }
}

/// Channel-major image tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Tensor {
            channels,
            height,
            width,
            data: vec![T::zero(); channels * height * width],
        }
    }

    fn plane(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    fn at(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.height + y) * self.width + x]
    }
}

fn cast<T: Scalar>(v: f32) -> T {
    T::from(v).expect("f32 fits every scalar")
}

/// Put `small` in the middle of a `large_intr`-sized canvas; channel 3 is 1 where pixels
/// are known.
pub fn canvas_embed<T: Scalar>(small: &ImageBuffer, large_intr: &CameraIntrinsics) -> Result<Tensor<T>> {
    let (w, h) = small.dims();
    let (lw, lh) = (large_intr.width, large_intr.height);
    if w > lw || h > lh || (lw - w) % 2 != 0 || (lh - h) % 2 != 0 {
        return Err(NeoError::InvalidArgument(format!(
            "{w}x{h} image cannot be centered on a {lw}x{lh} canvas"
        )));
    }
    let (x0, y0) = ((lw - w) / 2, (lh - h) / 2);
    let mut t = Tensor::zeros(4, lh, lw);
    for y in 0..h {
        for x in 0..w {
            let p = small.get(x, y);
            for (c, &v) in p.iter().enumerate() {
                t.data[(c * lh + y + y0) * lw + x + x0] = cast(v);
            }
            t.data[(3 * lh + y + y0) * lw + x + x0] = T::one();
        }
    }
    Ok(t)
}

fn target_tensor<T: Scalar>(img: &ImageBuffer) -> Tensor<T> {
    let (w, h) = img.dims();
    let mut t = Tensor::zeros(3, h, w);
    for y in 0..h {
        for x in 0..w {
            for (c, &v) in img.get(x, y).iter().enumerate() {
                t.data[(c * h + y) * w + x] = cast(v);
            }
        }
    }
    t
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutpaintModel<T> {
    arch: Architecture,
    params: Vec<T>,
}

/// Intermediate values kept for the backward pass.
struct Trace<T> {
    /// Input of every convolution (after upsampling).
    inputs: Vec<Tensor<T>>,
    /// Output of every layer (after activation).
    outputs: Vec<Tensor<T>>,
}

fn upsample2<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (t.height * 2, t.width * 2);
    let mut out = Tensor::zeros(t.channels, h, w);
    for c in 0..t.channels {
        for y in 0..h {
            for x in 0..w {
                out.data[(c * h + y) * w + x] = t.at(c, y / 2, x / 2);
            }
        }
    }
    out
}

fn upsample2_backward<T: Scalar>(g: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (g.height / 2, g.width / 2);
    let mut out = Tensor::zeros(g.channels, h, w);
    for c in 0..g.channels {
        for y in 0..g.height {
            for x in 0..g.width {
                let o = (c * h + y / 2) * w + x / 2;
                out.data[o] = out.data[o] + g.at(c, y, x);
            }
        }
    }
    out
}

fn out_size(n: usize, stride: usize) -> usize {
    n.div_ceil(stride)
}

/// Column matrix of shape (c·k·k) × (ho·wo) for a same-padded convolution.
fn im2col<T: Scalar>(t: &Tensor<T>, k: usize, stride: usize) -> Vec<T> {
    let (ho, wo) = (out_size(t.height, stride), out_size(t.width, stride));
    let pad = (k / 2) as isize;
    let n = ho * wo;
    let mut cols = vec![T::zero(); t.channels * k * k * n];
    for c in 0..t.channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * n;
                for oy in 0..ho {
                    let iy = (oy * stride) as isize + ky as isize - pad;
                    if iy < 0 || iy >= t.height as isize {
                        continue;
                    }
                    let src = (c * t.height + iy as usize) * t.width;
                    let dst = row + oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * stride) as isize + kx as isize - pad;
                        if ix >= 0 && ix < t.width as isize {
                            cols[dst + ox] = t.data[src + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], channels: usize, height: usize, width: usize, k: usize, stride: usize) -> Tensor<T> {
    let (ho, wo) = (out_size(height, stride), out_size(width, stride));
    let pad = (k / 2) as isize;
    let n = ho * wo;
    let mut t = Tensor::zeros(channels, height, width);
    for c in 0..channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * n;
                for oy in 0..ho {
                    let iy = (oy * stride) as isize + ky as isize - pad;
                    if iy < 0 || iy >= height as isize {
                        continue;
                    }
                    let dst = (c * height + iy as usize) * width;
                    for ox in 0..wo {
                        let ix = (ox * stride) as isize + kx as isize - pad;
                        if ix >= 0 && ix < width as isize {
                            let d = dst + ix as usize;
                            t.data[d] = t.data[d] + cols[row + oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
    t
}

fn logistic<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Deliberate backward-pass faults, used as negative controls for gradient checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BackwardFault {
    #[default]
    None,
    /// Pass gradients through ReLUs as if they were the identity.
    IgnoreReluMask,
}

impl<T: Scalar> OutpaintModel<T> {
    /// He-initialized weights from `seed`, zero biases, zero final layer.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(arch.param_count());
        let last = arch.layers.len() - 1;
        for (i, l) in arch.layers.iter().enumerate() {
            let fan_in = (l.in_channels * l.kernel * l.kernel) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive stddev");
            for _ in 0..l.weight_len() {
                let w = if i == last { 0.0 } else { normal.sample(&mut rng) };
                params.push(T::from(w).unwrap());
            }
            params.extend(std::iter::repeat(T::zero()).take(l.out_channels));
        }
        Ok(OutpaintModel { arch, params })
    }

    pub fn from_params(arch: Architecture, params: Vec<T>) -> Result<Self> {
        arch.validate()?;
        if params.len() != arch.param_count() {
            return Err(NeoError::Architecture(format!(
                "expected {} parameters, got {}",
                arch.param_count(),
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(NeoError::Architecture("non-finite parameter".into()));
        }
        Ok(OutpaintModel { arch, params })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    /// Convert parameters to another float width.
    pub fn cast<U: Scalar>(&self) -> OutpaintModel<U> {
        OutpaintModel {
            arch: self.arch.clone(),
            params: self.params.iter().map(|p| U::from(*p).unwrap()).collect(),
        }
    }

    fn check_canvas(&self, canvas: &Tensor<T>) -> Result<()> {
        let f = self.arch.downsample_factor();
        if canvas.channels != 4 || canvas.height % f != 0 || canvas.width % f != 0 || canvas.height == 0 || canvas.width == 0 {
            return Err(NeoError::Architecture(format!(
                "canvas {}x{}x{} must have 4 channels and sides divisible by {f}",
                canvas.channels, canvas.height, canvas.width
            )));
        }
        Ok(())
    }

    fn run(&self, canvas: &Tensor<T>) -> Trace<T> {
        let offsets = self.arch.offsets();
        let mut inputs = Vec::with_capacity(self.arch.layers.len());
        let mut outputs: Vec<Tensor<T>> = Vec::with_capacity(self.arch.layers.len());
        for (li, l) in self.arch.layers.iter().enumerate() {
            let prev = if li == 0 { canvas } else { &outputs[li - 1] };
            let x = if l.upsample { upsample2(prev) } else { prev.clone() };
            let (ho, wo) = (out_size(x.height, l.stride), out_size(x.width, l.stride));
            let n = ho * wo;
            let kk = l.in_channels * l.kernel * l.kernel;
            let cols = im2col(&x, l.kernel, l.stride);
            let p = &self.params[offsets[li]..offsets[li + 1]];
            let (w, b) = p.split_at(l.weight_len());
            let mut y = Tensor::zeros(l.out_channels, ho, wo);
            for (o, &bo) in b.iter().enumerate() {
                y.data[o * n..(o + 1) * n].iter_mut().for_each(|v| *v = bo);
            }
            T::gemm(l.out_channels, kk, n, w, false, &cols, false, T::one(), &mut y.data);
            match l.activation {
                Activation::Identity => {}
                Activation::Relu => y.data.iter_mut().for_each(|v| *v = v.max(T::zero())),
                Activation::Logistic => y.data.iter_mut().for_each(|v| *v = logistic(*v)),
            }
            inputs.push(x);
            outputs.push(y);
        }
        Trace { inputs, outputs }
    }

    /// Network prediction without compositing, 3×H×W.
    pub fn predict_raw(&self, canvas: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_canvas(canvas)?;
        Ok(self.run(canvas).outputs.pop().expect("at least one layer"))
    }

    /// Composite prediction: known pixels come from the canvas, the rest from the network.
    pub fn forward_tensor(&self, canvas: &Tensor<T>) -> Result<Tensor<T>> {
        let pred = self.predict_raw(canvas)?;
        Ok(composite(canvas, &pred))
    }

    pub fn forward(&self, canvas: &Tensor<T>) -> Result<ImageBuffer> {
        let out = self.forward_tensor(canvas)?;
        Ok(tensor_to_image(&out))
    }

    /// Embed, run and composite in one go.
    pub fn outpaint(&self, small: &ImageBuffer, large_intr: &CameraIntrinsics) -> Result<ImageBuffer> {
        self.forward(&canvas_embed(small, large_intr)?)
    }

    /// Mean absolute error of the composite against `target` and its parameter gradient.
    pub fn loss_and_grad(&self, canvas: &Tensor<T>, target: &Tensor<T>, fault: BackwardFault) -> Result<(T, Vec<T>)> {
        self.check_canvas(canvas)?;
        if target.channels != 3 || target.height != canvas.height || target.width != canvas.width {
            return Err(NeoError::Architecture("target does not match canvas".into()));
        }
        let trace = self.run(canvas);
        let pred = trace.outputs.last().expect("at least one layer");
        let plane = canvas.plane();
        let count = T::from(3 * plane).unwrap();
        let mut loss = T::zero();
        let mut g = Tensor::zeros(3, canvas.height, canvas.width);
        for c in 0..3 {
            for i in 0..plane {
                let m = canvas.data[3 * plane + i];
                let out = m * canvas.data[c * plane + i] + (T::one() - m) * pred.data[c * plane + i];
                let d = out - target.data[c * plane + i];
                loss = loss + d.abs();
                let s = if d > T::zero() {
                    T::one()
                } else if d < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                };
                g.data[c * plane + i] = (T::one() - m) * s / count;
            }
        }
        let grad = self.backward(&trace, g, fault);
        Ok((loss / count, grad))
    }

    pub fn loss(&self, canvas: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
        let out = self.forward_tensor(canvas)?;
        if out.data.len() != target.data.len() {
            return Err(NeoError::Architecture("target does not match canvas".into()));
        }
        let s = out
            .data
            .iter()
            .zip(&target.data)
            .fold(T::zero(), |acc, (a, b)| acc + (*a - *b).abs());
        Ok(s / T::from(out.data.len()).unwrap())
    }

    fn backward(&self, trace: &Trace<T>, mut g: Tensor<T>, fault: BackwardFault) -> Vec<T> {
        let offsets = self.arch.offsets();
        let mut grad = vec![T::zero(); self.params.len()];
        for li in (0..self.arch.layers.len()).rev() {
            let l = &self.arch.layers[li];
            let y = &trace.outputs[li];
            match l.activation {
                Activation::Identity => {}
                Activation::Relu => {
                    if fault != BackwardFault::IgnoreReluMask {
                        for (gv, yv) in g.data.iter_mut().zip(&y.data) {
                            if *yv <= T::zero() {
                                *gv = T::zero();
                            }
                        }
                    }
                }
                Activation::Logistic => {
                    for (gv, yv) in g.data.iter_mut().zip(&y.data) {
                        *gv = *gv * *yv * (T::one() - *yv);
                    }
                }
            }
            let x = &trace.inputs[li];
            let n = y.plane();
            let kk = l.in_channels * l.kernel * l.kernel;
            let cols = im2col(x, l.kernel, l.stride);
            let (gw, gb) = grad[offsets[li]..offsets[li + 1]].split_at_mut(l.weight_len());
            // dW = dY · colsᵀ
            T::gemm(l.out_channels, n, kk, &g.data, false, &cols, true, T::zero(), gw);
            for (o, b) in gb.iter_mut().enumerate() {
                *b = g.data[o * n..(o + 1) * n].iter().fold(T::zero(), |a, v| a + *v);
            }
            if li == 0 {
                break;
            }
            let w = &self.params[offsets[li]..offsets[li] + l.weight_len()];
            let mut dcols = vec![T::zero(); kk * n];
            // dcols = Wᵀ · dY
            T::gemm(kk, l.out_channels, n, w, true, &g.data, false, T::zero(), &mut dcols);
            let dx = col2im(&dcols, l.in_channels, x.height, x.width, l.kernel, l.stride);
            g = if l.upsample { upsample2_backward(&dx) } else { dx };
        }
        grad
    }
}

fn composite<T: Scalar>(canvas: &Tensor<T>, pred: &Tensor<T>) -> Tensor<T> {
    let plane = canvas.plane();
    let mut out = Tensor::zeros(3, canvas.height, canvas.width);
    for c in 0..3 {
        for i in 0..plane {
            let m = canvas.data[3 * plane + i];
            out.data[c * plane + i] = m * canvas.data[c * plane + i] + (T::one() - m) * pred.data[c * plane + i];
        }
    }
    out
}

fn tensor_to_image<T: Scalar>(t: &Tensor<T>) -> ImageBuffer {
    let plane = t.plane();
    ImageBuffer::from_fn(t.width, t.height, |x, y| {
        let i = y * t.width + x;
        let v = |c: usize| t.data[c * plane + i].to_f32().unwrap().clamp(0.0, 1.0);
        [v(0), v(1), v(2)]
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// The learning rate decays exponentially to this fraction of its start value.
    pub lr_final_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 3000,
            batch_size: 8,
            learning_rate: 2e-3,
            lr_final_fraction: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64| v > 0.0 && v.is_finite();
        if self.batch_size == 0
            || !pos(self.learning_rate)
            || !pos(self.lr_final_fraction)
            || !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !pos(self.eps)
        {
            return Err(NeoError::InvalidArgument(format!("bad training config {self:?}")));
        }
        Ok(())
    }

    fn lr_at(&self, it: usize) -> f64 {
        let t = if self.iterations > 1 {
            it as f64 / (self.iterations - 1) as f64
        } else {
            0.0
        };
        self.learning_rate * self.lr_final_fraction.powf(t)
    }
}

/// Precomputed canvases and targets for a set of pairs.
pub struct TrainingSet<T> {
    canvases: Vec<Tensor<T>>,
    targets: Vec<Tensor<T>>,
}

impl<T: Scalar> TrainingSet<T> {
    pub fn new(pairs: &[&TrainingPair], large_intr: &CameraIntrinsics) -> Result<Self> {
        if pairs.is_empty() {
            return Err(NeoError::InvalidArgument("training set is empty".into()));
        }
        let mut canvases = Vec::with_capacity(pairs.len());
        let mut targets = Vec::with_capacity(pairs.len());
        for p in pairs {
            if p.large.dims() != (large_intr.width, large_intr.height) {
                return Err(NeoError::InvalidArgument("large image does not match intrinsics".into()));
            }
            canvases.push(canvas_embed(&p.small, large_intr)?);
            targets.push(target_tensor(&p.large));
        }
        Ok(TrainingSet { canvases, targets })
    }

    pub fn len(&self) -> usize {
        self.canvases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.canvases.is_empty()
    }
}

/// Minibatch Adam on the composite L1 loss. Returns one mean batch loss per iteration,
/// each measured before that iteration's update.
pub fn train<T: Scalar>(
    model: &OutpaintModel<T>,
    data: &TrainingSet<T>,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(OutpaintModel<T>, Vec<f64>)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(NeoError::InvalidArgument("training set is empty".into()));
    }
    model.check_canvas(&data.canvases[0])?;
    let mut model = model.clone();
    let mut adam = Adam::<T>::new(
        model.params.len(),
        AdamConfig {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
        },
    );
    let n = data.len();
    let batch = cfg.batch_size.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let mut epoch = 0u64;
    let mut trace = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let mut idx = Vec::with_capacity(batch);
        while idx.len() < batch {
            if cursor == n {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, epoch));
                order.shuffle(&mut rng);
                epoch += 1;
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let results = idx
            .par_iter()
            .map(|&i| model.loss_and_grad(&data.canvases[i], &data.targets[i], BackwardFault::None))
            .collect::<Result<Vec<_>>>()?;
        // fixed-order reduction keeps runs bit-identical regardless of thread count
        let scale = T::one() / T::from(batch).unwrap();
        let mut grad = vec![T::zero(); model.params.len()];
        let mut loss = 0.0;
        for (l, g) in &results {
            loss += l.to_f64().unwrap();
            for (a, b) in grad.iter_mut().zip(g) {
                *a = *a + *b;
            }
        }
        loss /= batch as f64;
        if !loss.is_finite() {
            return Err(NeoError::TrainDiverged { iteration: it, loss });
        }
        trace.push(loss);
        let lr = T::from(cfg.lr_at(it)).unwrap();
        adam.begin_step();
        for (i, (p, g)) in model.params.iter_mut().zip(&grad).enumerate() {
            adam.update(i, p, *g * scale, lr);
        }
    }
    if model.params.iter().any(|p| !p.is_finite()) {
        return Err(NeoError::TrainDiverged {
            iteration: cfg.iterations,
            loss: f64::NAN,
        });
    }
    Ok((model, trace))
}

pub fn write_loss_trace(path: &Path, trace: &[f64]) -> Result<()> {
    let mut s = String::from("iteration,loss\n");
    for (i, l) in trace.iter().enumerate() {
        s.push_str(&format!("{i},{l}\n"));
    }
    fs::write(path, s).map_err(|e| NeoError::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelGradCheck {
    pub max_params: usize,
    pub step: f64,
    pub seed: u64,
    /// Absolute floor on the relative-error denominator.
    pub abs_floor: f64,
    pub fault: BackwardFault,
}

impl Default for ModelGradCheck {
    fn default() -> Self {
        ModelGradCheck {
            max_params: 500,
            step: 1e-3,
            seed: 0,
            abs_floor: 1e-8,
            fault: BackwardFault::None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelGradReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Probes skipped because the ±step evaluations fell on different sides of a ReLU or
    /// absolute-value kink, where a central difference does not estimate the derivative.
    pub skipped_kinks: usize,
}

impl<T: Scalar> OutpaintModel<T> {
    /// Sign pattern of every ReLU pre-activation and every band residual.
    fn kink_pattern(&self, canvas: &Tensor<T>, target: &Tensor<T>) -> Vec<bool> {
        let trace = self.run(canvas);
        let mut bits = Vec::new();
        for (l, y) in self.arch.layers.iter().zip(&trace.outputs) {
            if l.activation == Activation::Relu {
                bits.extend(y.data.iter().map(|v| *v > T::zero()));
            }
        }
        let out = composite(canvas, trace.outputs.last().expect("at least one layer"));
        let plane = canvas.plane();
        for (i, (o, t)) in out.data.iter().zip(&target.data).enumerate() {
            if canvas.data[3 * plane + i % plane] < T::one() {
                bits.push(*o > *t);
            }
        }
        bits
    }

    fn loss_f64(&self, canvas: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
        let out = self.forward_tensor(canvas)?;
        let s: f64 = out
            .data
            .iter()
            .zip(&target.data)
            .map(|(a, b)| (*a - *b).abs().to_f64().unwrap())
            .sum();
        Ok(s / out.data.len() as f64)
    }
}

/// Compare analytic gradients of the training loss with central differences on a random
/// subset of parameters. Probes that straddle a kink are replaced by other parameters.
pub fn grad_check_model<T: Scalar>(
    model: &OutpaintModel<T>,
    pair: &TrainingPair,
    large_intr: &CameraIntrinsics,
    opts: &ModelGradCheck,
) -> Result<ModelGradReport> {
    let canvas = canvas_embed::<T>(&pair.small, large_intr)?;
    let target = target_tensor::<T>(&pair.large);
    let (_, analytic) = model.loss_and_grad(&canvas, &target, opts.fault)?;
    let base = model.kink_pattern(&canvas, &target);
    let mut idx: Vec<usize> = (0..model.params.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    idx.shuffle(&mut rng);
    let h = T::from(opts.step).unwrap();
    let mut probe = model.clone();
    let mut report = ModelGradReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped_kinks: 0,
    };
    for &i in &idx {
        if report.checked == opts.max_params {
            break;
        }
        let orig = probe.params[i];
        probe.params[i] = orig + h;
        let up = probe.loss_f64(&canvas, &target)?;
        let smooth_up = probe.kink_pattern(&canvas, &target) == base;
        probe.params[i] = orig - h;
        let down = probe.loss_f64(&canvas, &target)?;
        let smooth_down = probe.kink_pattern(&canvas, &target) == base;
        probe.params[i] = orig;
        if !(smooth_up && smooth_down) {
            report.skipped_kinks += 1;
            continue;
        }
        let step = ((orig + h) - (orig - h)).to_f64().unwrap();
        let numeric = (up - down) / step;
        let a = analytic[i].to_f64().unwrap();
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.abs_floor);
        report.max_rel_error = report.max_rel_error.max(err);
        report.checked += 1;
    }
    Ok(report)
}

const MAGIC: &[u8; 4] = b"NEOM";
const VERSION: u32 = 1;

impl<T: Scalar> OutpaintModel<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(16 + self.arch.layers.len() * 24 + self.params.len() * 4);
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        b.extend_from_slice(&(self.arch.layers.len() as u32).to_le_bytes());
        for l in &self.arch.layers {
            for v in [
                l.in_channels as u32,
                l.out_channels as u32,
                l.kernel as u32,
                l.stride as u32,
                l.upsample as u32,
                l.activation.code(),
            ] {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        b.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            b.extend_from_slice(&p.to_f32().unwrap().to_le_bytes());
        }
        b
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let err = |m: &str| NeoError::Checkpoint(m.to_string());
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = buf.get(pos..pos + n).ok_or_else(|| err("truncated checkpoint"))?;
            pos += n;
            Ok(s)
        };
        if take(4)? != MAGIC {
            return Err(err("bad magic, not an outpainter checkpoint"));
        }
        let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().unwrap());
        let version = u32_at(take(4)?);
        if version != VERSION {
            return Err(NeoError::Checkpoint(format!("unsupported version {version}")));
        }
        let nl = u32_at(take(4)?) as usize;
        if nl > 1024 {
            return Err(err("implausible layer count"));
        }
        let mut layers = Vec::with_capacity(nl);
        for _ in 0..nl {
            let mut v = [0u32; 6];
            for x in &mut v {
                *x = u32_at(take(4)?);
            }
            layers.push(LayerSpec {
                in_channels: v[0] as usize,
                out_channels: v[1] as usize,
                kernel: v[2] as usize,
                stride: v[3] as usize,
                upsample: v[4] != 0,
                activation: Activation::from_code(v[5]).ok_or_else(|| err("unknown activation"))?,
            });
        }
        let arch = Architecture { layers };
        arch.validate().map_err(|e| NeoError::Checkpoint(e.to_string()))?;
        let count = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        if count != arch.param_count() {
            return Err(NeoError::Checkpoint(format!(
                "parameter count {count} does not match architecture ({})",
                arch.param_count()
            )));
        }
        let raw = take(count * 4)?;
        let params = raw
            .chunks_exact(4)
            .map(|c| T::from(f32::from_le_bytes(c.try_into().unwrap())).unwrap())
            .collect();
        if pos != buf.len() {
            return Err(err("trailing bytes after parameters"));
        }
        OutpaintModel::from_params(arch, params).map_err(|e| NeoError::Checkpoint(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| NeoError::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| NeoError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| NeoError::io(path, e))?;
        Self::from_bytes(&buf)
    }
}
