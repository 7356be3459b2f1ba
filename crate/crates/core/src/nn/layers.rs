//! Layers with explicit reverse-mode passes.
//!
//! Every layer caches what its backward pass needs during `forward`; calling
//! `backward` consumes the gradient of the loss with respect to the layer output,
//! accumulates parameter gradients into [`Param::grad`] and returns the gradient
//! with respect to the layer input. A layer therefore supports one outstanding
//! forward pass at a time.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::{FeatureMap, Scalar};

/// Trainable tensor with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(shape: Vec<usize>, value: Vec<T>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), value.len());
        let grad = vec![T::zero(); value.len()];
        Self { shape, value, grad }
    }

    pub fn filled(shape: Vec<usize>, v: T) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![v; n])
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }
}

/// Named parameter traversal, used by the optimizer, initializers and checkpoints.
pub trait HasParams<T: Scalar> {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>);
    fn collect_params_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, &'a mut Param<T>)>,
    );

    fn params(&self) -> Vec<(String, &Param<T>)> {
        let mut out = Vec::new();
        self.collect_params("", &mut out);
        out
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        let mut out = Vec::new();
        self.collect_params_mut("", &mut out);
        out
    }

    fn param_count(&self) -> usize {
        self.params().iter().map(|(_, p)| p.len()).sum()
    }

    fn zero_grad(&mut self) {
        for (_, p) in self.params_mut() {
            p.zero_grad();
        }
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Per-pass state: train/eval switch and the randomness source for dropout.
pub struct ForwardCtx {
    pub training: bool,
    /// Whether training passes refresh running normalization statistics.
    pub update_running_stats: bool,
    pub rng: ChaCha8Rng,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        use rand::SeedableRng;
        Self {
            training: false,
            update_running_stats: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn train(rng: ChaCha8Rng) -> Self {
        Self {
            training: true,
            update_running_stats: true,
            rng,
        }
    }

    /// Training-mode pass that leaves every stored quantity untouched.
    pub fn frozen(rng: ChaCha8Rng) -> Self {
        Self {
            update_running_stats: false,
            ..Self::train(rng)
        }
    }
}

#[inline]
fn conv_out(size: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - kernel) / stride + 1
}

/// Unfold `(c, h, w)` into a `(c*k*k) x (ho*wo)` patch matrix with zero padding.
pub(crate) fn im2col<T: Scalar>(
    input: &[T],
    (c, h, w): (usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
) -> (Vec<T>, usize, usize) {
    let ho = conv_out(h, k, stride, pad);
    let wo = conv_out(w, k, stride, pad);
    let p = ho * wo;
    let mut cols = vec![T::zero(); c * k * k * p];
    for ci in 0..c {
        let plane = &input[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    (cols, ho, wo)
}

/// Adjoint of [`im2col`]: scatter-add a patch matrix back onto a `(c, h, w)` grid.
pub(crate) fn col2im<T: Scalar>(
    cols: &[T],
    (c, h, w): (usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    (ho, wo): (usize, usize),
) -> Vec<T> {
    let p = ho * wo;
    let mut out = vec![T::zero(); c * h * w];
    for ci in 0..c {
        let plane = &mut out[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let srow = &src[oy * wo..(oy + 1) * wo];
                    for (ox, &s) in srow.iter().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += s;
                        }
                    }
                }
            }
        }
    }
    out
}

/// 2D convolution, weights laid out `(out, in, k, k)`.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    cache: Option<(Vec<T>, [usize; 3], usize, usize)>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        Self {
            weight: Param::filled(vec![out_channels, in_channels, kernel, kernel], T::zero()),
            bias: bias.then(|| Param::filled(vec![out_channels], T::zero())),
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &FeatureMap<T>) -> FeatureMap<T> {
        assert_eq!(x.channels(), self.in_channels, "conv input channels");
        let shape = x.shape();
        let (cols, ho, wo) = im2col(
            x.data(),
            (shape[0], shape[1], shape[2]),
            self.kernel,
            self.stride,
            self.pad,
        );
        let kk = self.in_channels * self.kernel * self.kernel;
        let p = ho * wo;
        let mut out = vec![T::zero(); self.out_channels * p];
        T::gemm(
            self.out_channels,
            kk,
            p,
            T::one(),
            &self.weight.value,
            (kk as isize, 1),
            &cols,
            (p as isize, 1),
            T::zero(),
            &mut out,
        );
        if let Some(b) = &self.bias {
            for (o, &bv) in b.value.iter().enumerate() {
                out[o * p..(o + 1) * p].iter_mut().for_each(|v| *v += bv);
            }
        }
        self.cache = Some((cols, shape, ho, wo));
        FeatureMap::from_vec(self.out_channels, ho, wo, out)
    }

    /// Backward pass; skips the input gradient when `need_input_grad` is false.
    pub fn backward_opt(
        &mut self,
        grad: &FeatureMap<T>,
        need_input_grad: bool,
    ) -> Option<FeatureMap<T>> {
        let (cols, shape, ho, wo) = self.cache.take().expect("conv backward without forward");
        let kk = self.in_channels * self.kernel * self.kernel;
        let p = ho * wo;
        assert_eq!(grad.shape(), [self.out_channels, ho, wo], "conv grad shape");
        T::gemm(
            self.out_channels,
            p,
            kk,
            T::one(),
            grad.data(),
            (p as isize, 1),
            &cols,
            (1, p as isize),
            T::one(),
            &mut self.weight.grad,
        );
        if let Some(b) = &mut self.bias {
            for (o, g) in b.grad.iter_mut().enumerate() {
                *g += grad.channel(o).iter().copied().sum::<T>();
            }
        }
        if !need_input_grad {
            return None;
        }
        let mut gcols = vec![T::zero(); kk * p];
        T::gemm(
            kk,
            self.out_channels,
            p,
            T::one(),
            &self.weight.value,
            (1, kk as isize),
            grad.data(),
            (p as isize, 1),
            T::zero(),
            &mut gcols,
        );
        let data = col2im(
            &gcols,
            (shape[0], shape[1], shape[2]),
            self.kernel,
            self.stride,
            self.pad,
            (ho, wo),
        );
        Some(FeatureMap::from_vec(shape[0], shape[1], shape[2], data))
    }

    pub fn backward(&mut self, grad: &FeatureMap<T>) -> FeatureMap<T> {
        self.backward_opt(grad, true).expect("input gradient requested")
    }
}

impl<T: Scalar> HasParams<T> for Conv2d<T> {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        out.push((join(prefix, "weight"), &self.weight));
        if let Some(b) = &self.bias {
            out.push((join(prefix, "bias"), b));
        }
    }

    fn collect_params_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, &'a mut Param<T>)>,
    ) {
        out.push((join(prefix, "weight"), &mut self.weight));
        if let Some(b) = &mut self.bias {
            out.push((join(prefix, "bias"), b));
        }
    }
}

/// Transposed 2D convolution, weights laid out `(in, out, k, k)`.
///
/// Output side is `(in - 1) * stride - 2 * pad + kernel + output_pad`.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub output_pad: usize,
    cache: Option<FeatureMap<T>>,
}

impl<T: Scalar> ConvTranspose2d<T> {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        output_pad: usize,
        bias: bool,
    ) -> Self {
        Self {
            weight: Param::filled(vec![in_channels, out_channels, kernel, kernel], T::zero()),
            bias: bias.then(|| Param::filled(vec![out_channels], T::zero())),
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
            output_pad,
            cache: None,
        }
    }

    fn out_size(&self, n: usize) -> usize {
        (n - 1) * self.stride + self.kernel + self.output_pad - 2 * self.pad
    }

    pub fn forward(&mut self, x: &FeatureMap<T>) -> FeatureMap<T> {
        assert_eq!(x.channels(), self.in_channels, "transposed conv input channels");
        let (hi, wi) = (x.height(), x.width());
        let (ho, wo) = (self.out_size(hi), self.out_size(wi));
        let okk = self.out_channels * self.kernel * self.kernel;
        let p = hi * wi;
        let mut cols = vec![T::zero(); okk * p];
        T::gemm(
            okk,
            self.in_channels,
            p,
            T::one(),
            &self.weight.value,
            (1, okk as isize),
            x.data(),
            (p as isize, 1),
            T::zero(),
            &mut cols,
        );
        let mut out = col2im(
            &cols,
            (self.out_channels, ho, wo),
            self.kernel,
            self.stride,
            self.pad,
            (hi, wi),
        );
        if let Some(b) = &self.bias {
            let plane = ho * wo;
            for (o, &bv) in b.value.iter().enumerate() {
                out[o * plane..(o + 1) * plane]
                    .iter_mut()
                    .for_each(|v| *v += bv);
            }
        }
        self.cache = Some(x.clone());
        FeatureMap::from_vec(self.out_channels, ho, wo, out)
    }

    pub fn backward(&mut self, grad: &FeatureMap<T>) -> FeatureMap<T> {
        let x = self.cache.take().expect("transposed conv backward without forward");
        let (hi, wi) = (x.height(), x.width());
        let okk = self.out_channels * self.kernel * self.kernel;
        let p = hi * wi;
        let (gcols, gh, gw) = im2col(
            grad.data(),
            (self.out_channels, grad.height(), grad.width()),
            self.kernel,
            self.stride,
            self.pad,
        );
        assert_eq!((gh, gw), (hi, wi), "transposed conv grad geometry");
        T::gemm(
            self.in_channels,
            p,
            okk,
            T::one(),
            x.data(),
            (p as isize, 1),
            &gcols,
            (1, p as isize),
            T::one(),
            &mut self.weight.grad,
        );
        if let Some(b) = &mut self.bias {
            for (o, g) in b.grad.iter_mut().enumerate() {
                *g += grad.channel(o).iter().copied().sum::<T>();
            }
        }
        let mut gx = vec![T::zero(); self.in_channels * p];
        T::gemm(
            self.in_channels,
            okk,
            p,
            T::one(),
            &self.weight.value,
            (okk as isize, 1),
            &gcols,
            (p as isize, 1),
            T::zero(),
            &mut gx,
        );
        FeatureMap::from_vec(self.in_channels, hi, wi, gx)
    }
}

impl<T: Scalar> HasParams<T> for ConvTranspose2d<T> {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        out.push((join(prefix, "weight"), &self.weight));
        if let Some(b) = &self.bias {
            out.push((join(prefix, "bias"), b));
        }
    }

    fn collect_params_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, &'a mut Param<T>)>,
    ) {
        out.push((join(prefix, "weight"), &mut self.weight));
        if let Some(b) = &mut self.bias {
            out.push((join(prefix, "bias"), b));
        }
    }
}

/// Per-channel normalization over the spatial plane with learned scale and shift.
///
/// With one sample per batch this coincides with batch normalization in
/// training mode. Layers built with [`InstanceNorm::with_running_stats`] also keep
/// exponential running estimates, updated by training passes and used instead of
/// the per-image statistics in evaluation passes.
#[derive(Debug, Clone)]
pub struct InstanceNorm<T> {
    pub scale: Param<T>,
    pub shift: Param<T>,
    /// Running `(mean, var)`; never receive gradients.
    pub running: Option<(Param<T>, Param<T>)>,
    pub momentum: T,
    pub eps: T,
    cache: Option<(FeatureMap<T>, Vec<T>, bool)>,
}

impl<T: Scalar> InstanceNorm<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            scale: Param::filled(vec![channels], T::one()),
            shift: Param::filled(vec![channels], T::zero()),
            running: None,
            momentum: T::c(0.1),
            eps: T::c(1e-5),
            cache: None,
        }
    }

    pub fn with_running_stats(channels: usize) -> Self {
        Self {
            running: Some((
                Param::filled(vec![channels], T::zero()),
                Param::filled(vec![channels], T::one()),
            )),
            ..Self::new(channels)
        }
    }

    pub fn forward_ctx(&mut self, x: &FeatureMap<T>, ctx: &ForwardCtx) -> FeatureMap<T> {
        match &mut self.running {
            Some((rm, rv)) if !ctx.training => {
                let mut xhat = x.clone();
                let mut out = x.clone();
                let mut invs = Vec::with_capacity(x.channels());
                for c in 0..x.channels() {
                    let inv = T::one() / (rv.value[c] + self.eps).sqrt();
                    invs.push(inv);
                    let (mean, g, b) = (rm.value[c], self.scale.value[c], self.shift.value[c]);
                    for ((h, o), &v) in xhat
                        .channel_mut(c)
                        .iter_mut()
                        .zip(out.channel_mut(c).iter_mut())
                        .zip(x.channel(c))
                    {
                        *h = (v - mean) * inv;
                        *o = g * *h + b;
                    }
                }
                self.cache = Some((xhat, invs, false));
                out
            }
            Some(_) if ctx.update_running_stats => {
                let n = T::c(x.plane_len() as f64);
                let m = self.momentum;
                let (rm, rv) = self.running.as_mut().expect("running stats");
                for c in 0..x.channels() {
                    let plane = x.channel(c);
                    let mean = plane.iter().copied().sum::<T>() / n;
                    let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
                    rm.value[c] = (T::one() - m) * rm.value[c] + m * mean;
                    rv.value[c] = (T::one() - m) * rv.value[c] + m * var;
                }
                self.forward(x)
            }
            _ => self.forward(x),
        }
    }

    /// Normalize with the statistics of `x` itself.
    pub fn forward(&mut self, x: &FeatureMap<T>) -> FeatureMap<T> {
        let n = T::c(x.plane_len() as f64);
        let mut xhat = x.clone();
        let mut inv_stds = Vec::with_capacity(x.channels());
        let mut out = x.clone();
        for c in 0..x.channels() {
            let plane = x.channel(c);
            let mean = plane.iter().copied().sum::<T>() / n;
            let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let inv = T::one() / (var + self.eps).sqrt();
            inv_stds.push(inv);
            let (g, b) = (self.scale.value[c], self.shift.value[c]);
            for ((h, o), &v) in xhat
                .channel_mut(c)
                .iter_mut()
                .zip(out.channel_mut(c).iter_mut())
                .zip(plane)
            {
                *h = (v - mean) * inv;
                *o = g * *h + b;
            }
        }
        self.cache = Some((xhat, inv_stds, true));
        out
    }

    pub fn backward(&mut self, grad: &FeatureMap<T>) -> FeatureMap<T> {
        let (xhat, inv_stds, own_stats) = self.cache.take().expect("norm backward without forward");
        let n = T::c(xhat.plane_len() as f64);
        let mut gx = grad.clone();
        if !own_stats {
            for c in 0..grad.channels() {
                let k = self.scale.value[c] * inv_stds[c];
                for ((o, &a), &b) in gx.channel_mut(c).iter_mut().zip(grad.channel(c)).zip(xhat.channel(c)) {
                    self.scale.grad[c] += a * b;
                    self.shift.grad[c] += a;
                    *o = k * a;
                }
            }
            return gx;
        }
        for c in 0..grad.channels() {
            let gy = grad.channel(c);
            let xh = xhat.channel(c);
            let g = self.scale.value[c];
            let mut sum_gy = T::zero();
            let mut sum_gy_xh = T::zero();
            for (&a, &b) in gy.iter().zip(xh) {
                sum_gy += a;
                sum_gy_xh += a * b;
            }
            self.scale.grad[c] += sum_gy_xh;
            self.shift.grad[c] += sum_gy;
            let k = g * inv_stds[c] / n;
            for ((o, &a), &b) in gx.channel_mut(c).iter_mut().zip(gy).zip(xh) {
                *o = k * (n * a - sum_gy - b * sum_gy_xh);
            }
        }
        gx
    }
}

impl<T: Scalar> HasParams<T> for InstanceNorm<T> {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        out.push((join(prefix, "scale"), &self.scale));
        out.push((join(prefix, "shift"), &self.shift));
        if let Some((m, v)) = &self.running {
            out.push((join(prefix, "running_mean"), m));
            out.push((join(prefix, "running_var"), v));
        }
    }

    fn collect_params_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, &'a mut Param<T>)>,
    ) {
        out.push((join(prefix, "scale"), &mut self.scale));
        out.push((join(prefix, "shift"), &mut self.shift));
        if let Some((m, v)) = &mut self.running {
            out.push((join(prefix, "running_mean"), m));
            out.push((join(prefix, "running_var"), v));
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Relu<T> {
    cache: Option<FeatureMap<T>>,
}

impl<T: Scalar> Relu<T> {
    pub fn new() -> Self {
        Self { cache: None }
    }

    pub fn forward(&mut self, x: &FeatureMap<T>) -> FeatureMap<T> {
        let out = x.map(|v| if v > T::zero() { v } else { T::zero() });
        self.cache = Some(out.clone());
        out
    }

    pub fn backward(&mut self, grad: &FeatureMap<T>) -> FeatureMap<T> {
        let out = self.cache.take().expect("relu backward without forward");
        grad.zip_map(&out, |g, o| if o > T::zero() { g } else { T::zero() })
    }
}

#[derive(Debug, Clone, Default)]
pub struct Tanh<T> {
    cache: Option<FeatureMap<T>>,
}

impl<T: Scalar> Tanh<T> {
    pub fn new() -> Self {
        Self { cache: None }
    }

    pub fn forward(&mut self, x: &FeatureMap<T>) -> FeatureMap<T> {
        let out = x.map(|v| v.tanh());
        self.cache = Some(out.clone());
        out
    }

    pub fn backward(&mut self, grad: &FeatureMap<T>) -> FeatureMap<T> {
        let out = self.cache.take().expect("tanh backward without forward");
        grad.zip_map(&out, |g, o| g * (T::one() - o * o))
    }
}

/// Inverted dropout: active only when the context is in training mode.
#[derive(Debug, Clone)]
pub struct Dropout<T> {
    pub rate: f64,
    cache: Option<Option<Vec<T>>>,
}

impl<T: Scalar> Dropout<T> {
    pub fn new(rate: f64) -> Self {
        assert!((0.0..1.0).contains(&rate), "dropout rate in [0, 1)");
        Self { rate, cache: None }
    }

    pub fn forward(&mut self, x: &FeatureMap<T>, ctx: &mut ForwardCtx) -> FeatureMap<T> {
        if !ctx.training || self.rate == 0.0 {
            self.cache = Some(None);
            return x.clone();
        }
        let keep = T::c(1.0 / (1.0 - self.rate));
        let mask: Vec<T> = (0..x.len())
            .map(|_| {
                if ctx.rng.gen::<f64>() >= self.rate {
                    keep
                } else {
                    T::zero()
                }
            })
            .collect();
        let mut out = x.clone();
        out.data_mut()
            .iter_mut()
            .zip(&mask)
            .for_each(|(v, &m)| *v *= m);
        self.cache = Some(Some(mask));
        out
    }

    pub fn backward(&mut self, grad: &FeatureMap<T>) -> FeatureMap<T> {
        match self.cache.take().expect("dropout backward without forward") {
            None => grad.clone(),
            Some(mask) => {
                let mut g = grad.clone();
                g.data_mut()
                    .iter_mut()
                    .zip(&mask)
                    .for_each(|(v, &m)| *v *= m);
                g
            }
        }
    }
}

/// `x + norm(conv(dropout(relu(norm(conv(x))))))`.
#[derive(Debug, Clone)]
pub struct ResidualBlock<T> {
    pub conv1: Conv2d<T>,
    pub norm1: InstanceNorm<T>,
    relu: Relu<T>,
    dropout: Dropout<T>,
    pub conv2: Conv2d<T>,
    pub norm2: InstanceNorm<T>,
}

impl<T: Scalar> ResidualBlock<T> {
    pub fn new(channels: usize, dropout: f64) -> Self {
        Self {
            conv1: Conv2d::new(channels, channels, 3, 1, 1, false),
            norm1: InstanceNorm::new(channels),
            relu: Relu::new(),
            dropout: Dropout::new(dropout),
            conv2: Conv2d::new(channels, channels, 3, 1, 1, false),
            norm2: InstanceNorm::new(channels),
        }
    }

    pub fn dropout_rate(&self) -> f64 {
        self.dropout.rate
    }

    pub fn forward(&mut self, x: &FeatureMap<T>, ctx: &mut ForwardCtx) -> FeatureMap<T> {
        let h = self.conv1.forward(x);
        let h = self.norm1.forward(&h);
        let h = self.relu.forward(&h);
        let h = self.dropout.forward(&h, ctx);
        let h = self.conv2.forward(&h);
        let mut out = self.norm2.forward(&h);
        out.add_assign(x);
        out
    }

    pub fn backward(&mut self, grad: &FeatureMap<T>) -> FeatureMap<T> {
        let g = self.norm2.backward(grad);
        let g = self.conv2.backward(&g);
        let g = self.dropout.backward(&g);
        let g = self.relu.backward(&g);
        let g = self.norm1.backward(&g);
        let mut g = self.conv1.backward(&g);
        g.add_assign(grad);
        g
    }
}

impl<T: Scalar> HasParams<T> for ResidualBlock<T> {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        self.conv1.collect_params(&join(prefix, "conv1"), out);
        self.norm1.collect_params(&join(prefix, "norm1"), out);
        self.conv2.collect_params(&join(prefix, "conv2"), out);
        self.norm2.collect_params(&join(prefix, "norm2"), out);
    }

    fn collect_params_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, &'a mut Param<T>)>,
    ) {
        self.conv1.collect_params_mut(&join(prefix, "conv1"), out);
        self.norm1.collect_params_mut(&join(prefix, "norm1"), out);
        self.conv2.collect_params_mut(&join(prefix, "conv2"), out);
        self.norm2.collect_params_mut(&join(prefix, "norm2"), out);
    }
}

/// Closed set of layer kinds used by the networks in this crate.
#[derive(Debug, Clone)]
pub enum Layer<T> {
    Conv(Conv2d<T>),
    ConvTranspose(ConvTranspose2d<T>),
    Norm(InstanceNorm<T>),
    Relu(Relu<T>),
    Tanh(Tanh<T>),
    Dropout(Dropout<T>),
    Residual(ResidualBlock<T>),
}

impl<T: Scalar> Layer<T> {
    pub fn forward(&mut self, x: &FeatureMap<T>, ctx: &mut ForwardCtx) -> FeatureMap<T> {
        match self {
            Layer::Conv(l) => l.forward(x),
            Layer::ConvTranspose(l) => l.forward(x),
            Layer::Norm(l) => l.forward_ctx(x, ctx),
            Layer::Relu(l) => l.forward(x),
            Layer::Tanh(l) => l.forward(x),
            Layer::Dropout(l) => l.forward(x, ctx),
            Layer::Residual(l) => l.forward(x, ctx),
        }
    }

    pub fn backward(&mut self, grad: &FeatureMap<T>) -> FeatureMap<T> {
        match self {
            Layer::Conv(l) => l.backward(grad),
            Layer::ConvTranspose(l) => l.backward(grad),
            Layer::Norm(l) => l.backward(grad),
            Layer::Relu(l) => l.backward(grad),
            Layer::Tanh(l) => l.backward(grad),
            Layer::Dropout(l) => l.backward(grad),
            Layer::Residual(l) => l.backward(grad),
        }
    }

    fn label(&self) -> &'static str {
        match self {
            Layer::Conv(_) => "conv",
            Layer::ConvTranspose(_) => "tconv",
            Layer::Norm(_) => "norm",
            Layer::Relu(_) => "relu",
            Layer::Tanh(_) => "tanh",
            Layer::Dropout(_) => "dropout",
            Layer::Residual(_) => "res",
        }
    }
}

/// Layer chain.
#[derive(Debug, Clone, Default)]
pub struct Sequential<T> {
    pub layers: Vec<Layer<T>>,
}

impl<T: Scalar> Sequential<T> {
    pub fn new(layers: Vec<Layer<T>>) -> Self {
        Self { layers }
    }

    pub fn forward(&mut self, x: &FeatureMap<T>, ctx: &mut ForwardCtx) -> FeatureMap<T> {
        let mut h = x.clone();
        for layer in &mut self.layers {
            h = layer.forward(&h, ctx);
        }
        h
    }

    /// Backward through the chain. When the first layer is a convolution and
    /// `need_input_grad` is false its data gradient is skipped.
    pub fn backward_opt(
        &mut self,
        grad: &FeatureMap<T>,
        need_input_grad: bool,
    ) -> Option<FeatureMap<T>> {
        let mut g = grad.clone();
        for (i, layer) in self.layers.iter_mut().enumerate().rev() {
            if i == 0 && !need_input_grad {
                if let Layer::Conv(c) = layer {
                    c.backward_opt(&g, false);
                    return None;
                }
            }
            g = layer.backward(&g);
        }
        Some(g)
    }

    pub fn backward(&mut self, grad: &FeatureMap<T>) -> FeatureMap<T> {
        self.backward_opt(grad, true).expect("input gradient requested")
    }
}

impl<T: Scalar> HasParams<T> for Sequential<T> {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        for (i, layer) in self.layers.iter().enumerate() {
            let p = join(prefix, &format!("{i}.{}", layer.label()));
            match layer {
                Layer::Conv(l) => l.collect_params(&p, out),
                Layer::ConvTranspose(l) => l.collect_params(&p, out),
                Layer::Norm(l) => l.collect_params(&p, out),
                Layer::Residual(l) => l.collect_params(&p, out),
                Layer::Relu(_) | Layer::Tanh(_) | Layer::Dropout(_) => {}
            }
        }
    }

    fn collect_params_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, &'a mut Param<T>)>,
    ) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let p = join(prefix, &format!("{i}.{}", layer.label()));
            match layer {
                Layer::Conv(l) => l.collect_params_mut(&p, out),
                Layer::ConvTranspose(l) => l.collect_params_mut(&p, out),
                Layer::Norm(l) => l.collect_params_mut(&p, out),
                Layer::Residual(l) => l.collect_params_mut(&p, out),
                Layer::Relu(_) | Layer::Tanh(_) | Layer::Dropout(_) => {}
            }
        }
    }
}

/// Channel-wise softmax at every pixel.
pub fn softmax_channels<T: Scalar>(logits: &FeatureMap<T>) -> FeatureMap<T> {
    let (c, n) = (logits.channels(), logits.plane_len());
    let mut out = logits.clone();
    let data = out.data_mut();
    for i in 0..n {
        let mut max = T::neg_infinity();
        for k in 0..c {
            max = max.max(data[k * n + i]);
        }
        let mut sum = T::zero();
        for k in 0..c {
            let e = (data[k * n + i] - max).exp();
            data[k * n + i] = e;
            sum += e;
        }
        for k in 0..c {
            data[k * n + i] /= sum;
        }
    }
    out
}

/// Pull a gradient with respect to softmax probabilities back to the logits.
pub fn softmax_backward<T: Scalar>(probs: &FeatureMap<T>, grad: &FeatureMap<T>) -> FeatureMap<T> {
    let (c, n) = (probs.channels(), probs.plane_len());
    let p = probs.data();
    let g = grad.data();
    let mut out = FeatureMap::zeros(c, probs.height(), probs.width());
    let o = out.data_mut();
    for i in 0..n {
        let dot: T = (0..c).map(|k| p[k * n + i] * g[k * n + i]).sum();
        for k in 0..c {
            o[k * n + i] = p[k * n + i] * (g[k * n + i] - dot);
        }
    }
    out
}
