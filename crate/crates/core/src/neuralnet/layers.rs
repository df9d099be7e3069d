use rand::Rng;

use super::{matmul, shape_err, NetError, Scalar, Tensor3};

fn uniform_vec<T: Scalar, R: Rng + ?Sized>(rng: &mut R, n: usize, bound: f64) -> Vec<T> {
    (0..n).map(|_| T::of(rng.gen_range(-bound..bound))).collect()
}

/// 1D convolution, stride 1, computed as im2col followed by one GEMM over
/// the whole batch.
#[derive(Debug, Clone)]
pub struct Conv1d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub padding: usize,
    /// `(out, in, kernel)` row-major.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    pub grad_weight: Vec<T>,
    pub grad_bias: Vec<T>,
    cache: Option<ConvCache<T>>,
}

#[derive(Debug, Clone)]
struct ConvCache<T> {
    cols: Vec<T>,
    batch: usize,
    in_len: usize,
    out_len: usize,
}

impl<T: Scalar> Conv1d<T> {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_channels * kernel) as f64;
        let weight = uniform_vec(rng, out_channels * in_channels * kernel, (6.0 / fan_in).sqrt());
        let bias = uniform_vec(rng, out_channels, 1.0 / fan_in.sqrt());
        Self::from_params(in_channels, out_channels, kernel, padding, weight, bias)
            .expect("consistent sizes")
    }

    pub fn from_params(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        padding: usize,
        weight: Vec<T>,
        bias: Vec<T>,
    ) -> Result<Self, NetError> {
        if weight.len() != out_channels * in_channels * kernel || bias.len() != out_channels {
            return shape_err(format!(
                "conv weights {} / bias {} for ({out_channels}, {in_channels}, {kernel})",
                weight.len(),
                bias.len()
            ));
        }
        Ok(Self {
            in_channels,
            out_channels,
            kernel,
            padding,
            grad_weight: vec![T::zero(); weight.len()],
            grad_bias: vec![T::zero(); out_channels],
            weight,
            bias,
            cache: None,
        })
    }

    pub fn output_len(&self, len: usize) -> Option<usize> {
        (len + 2 * self.padding).checked_sub(self.kernel).map(|v| v + 1)
    }

    pub fn forward(&mut self, x: &Tensor3<T>, train: bool) -> Result<Tensor3<T>, NetError> {
        if x.channels != self.in_channels {
            return shape_err(format!(
                "conv expects {} input channels, got shape {:?}",
                self.in_channels,
                x.shape()
            ));
        }
        let Some(out_len) = self.output_len(x.len) else {
            return shape_err(format!(
                "conv kernel {} longer than padded input {:?}",
                self.kernel,
                x.shape()
            ));
        };
        let (b, ck, n) = (x.batch, self.in_channels * self.kernel, x.batch * out_len);
        let cols = self.im2col(x, out_len);
        let mut y = vec![T::zero(); self.out_channels * n];
        matmul(self.out_channels, ck, n, &self.weight, false, &cols, false, &mut y, false);
        let mut out = Tensor3::zeros(b, self.out_channels, out_len);
        for bi in 0..b {
            for o in 0..self.out_channels {
                let src = &y[o * n + bi * out_len..o * n + (bi + 1) * out_len];
                let bias = self.bias[o];
                for (d, &s) in out.row_mut(bi, o).iter_mut().zip(src) {
                    *d = s + bias;
                }
            }
        }
        self.cache = train.then_some(ConvCache {
            cols,
            batch: b,
            in_len: x.len,
            out_len,
        });
        Ok(out)
    }

    /// Rows `(c, j)`, columns `(b, t)`: `x[b, c, t + j - padding]`.
    fn im2col(&self, x: &Tensor3<T>, out_len: usize) -> Vec<T> {
        let n = x.batch * out_len;
        let mut cols = vec![T::zero(); self.in_channels * self.kernel * n];
        let p = self.padding as isize;
        for c in 0..self.in_channels {
            for j in 0..self.kernel {
                let row = &mut cols[(c * self.kernel + j) * n..(c * self.kernel + j + 1) * n];
                let shift = j as isize - p;
                for bi in 0..x.batch {
                    let src = x.row(bi, c);
                    let dst = &mut row[bi * out_len..(bi + 1) * out_len];
                    // valid t: 0 <= t + shift < len
                    let lo = (-shift).max(0) as usize;
                    let hi = ((x.len as isize - shift).min(out_len as isize)).max(0) as usize;
                    if lo < hi {
                        let s0 = (lo as isize + shift) as usize;
                        dst[lo..hi].copy_from_slice(&src[s0..s0 + hi - lo]);
                    }
                }
            }
        }
        cols
    }

    pub fn backward(&mut self, dy: &Tensor3<T>) -> Result<Tensor3<T>, NetError> {
        let cache = self.cache.take().ok_or(NetError::StaleCache)?;
        if dy.shape() != (cache.batch, self.out_channels, cache.out_len) {
            return shape_err(format!(
                "conv gradient {:?} vs output ({}, {}, {})",
                dy.shape(),
                cache.batch,
                self.out_channels,
                cache.out_len
            ));
        }
        let (b, out_len) = (cache.batch, cache.out_len);
        let n = b * out_len;
        let ck = self.in_channels * self.kernel;
        let mut dym = vec![T::zero(); self.out_channels * n];
        for bi in 0..b {
            for o in 0..self.out_channels {
                let row = dy.row(bi, o);
                dym[o * n + bi * out_len..o * n + (bi + 1) * out_len].copy_from_slice(row);
                self.grad_bias[o] += row.iter().copied().sum::<T>();
            }
        }
        matmul(self.out_channels, n, ck, &dym, false, &cache.cols, true, &mut self.grad_weight, true);
        let mut dcols = vec![T::zero(); ck * n];
        matmul(ck, self.out_channels, n, &self.weight, true, &dym, false, &mut dcols, false);
        let mut dx = Tensor3::zeros(b, self.in_channels, cache.in_len);
        let p = self.padding as isize;
        for c in 0..self.in_channels {
            for j in 0..self.kernel {
                let row = &dcols[(c * self.kernel + j) * n..(c * self.kernel + j + 1) * n];
                let shift = j as isize - p;
                for bi in 0..b {
                    let src = &row[bi * out_len..(bi + 1) * out_len];
                    let lo = (-shift).max(0) as usize;
                    let hi = ((cache.in_len as isize - shift).min(out_len as isize)).max(0) as usize;
                    if lo < hi {
                        let s0 = (lo as isize + shift) as usize;
                        let dst = &mut dx.row_mut(bi, c)[s0..s0 + hi - lo];
                        for (d, &s) in dst.iter_mut().zip(&src[lo..hi]) {
                            *d += s;
                        }
                    }
                }
            }
        }
        Ok(dx)
    }

    pub fn zero_grad(&mut self) {
        self.grad_weight.iter_mut().for_each(|g| *g = T::zero());
        self.grad_bias.iter_mut().for_each(|g| *g = T::zero());
    }
}

#[derive(Debug, Clone, Default)]
pub struct Relu {
    mask: Option<Vec<bool>>,
    shape: (usize, usize, usize),
}

impl Relu {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward<T: Scalar>(&mut self, x: &Tensor3<T>, train: bool) -> Tensor3<T> {
        if train {
            self.mask = Some(x.data.iter().map(|&v| v > T::zero()).collect());
            self.shape = x.shape();
        }
        x.map(|v| if v > T::zero() { v } else { T::zero() })
    }

    pub(crate) fn pattern(&self) -> Vec<usize> {
        self.mask.iter().flatten().map(|&m| m as usize).collect()
    }

    pub fn backward<T: Scalar>(&mut self, dy: &Tensor3<T>) -> Result<Tensor3<T>, NetError> {
        let mask = self.mask.take().ok_or(NetError::StaleCache)?;
        if dy.shape() != self.shape {
            return shape_err(format!("relu gradient {:?} vs {:?}", dy.shape(), self.shape));
        }
        let mut dx = dy.clone();
        for (d, m) in dx.data.iter_mut().zip(mask) {
            if !m {
                *d = T::zero();
            }
        }
        Ok(dx)
    }
}

#[derive(Debug, Clone)]
pub struct MaxPool1d {
    pub kernel: usize,
    pub stride: usize,
    argmax: Option<Vec<usize>>,
    in_shape: (usize, usize, usize),
}

impl MaxPool1d {
    pub fn new(kernel: usize, stride: usize) -> Self {
        Self {
            kernel,
            stride,
            argmax: None,
            in_shape: (0, 0, 0),
        }
    }

    pub fn output_len(&self, len: usize) -> Option<usize> {
        len.checked_sub(self.kernel).map(|v| v / self.stride + 1)
    }

    pub fn forward<T: Scalar>(&mut self, x: &Tensor3<T>, train: bool) -> Result<Tensor3<T>, NetError> {
        let Some(out_len) = self.output_len(x.len) else {
            return shape_err(format!("pool kernel {} longer than input {:?}", self.kernel, x.shape()));
        };
        let mut out = Tensor3::zeros(x.batch, x.channels, out_len);
        let mut arg = Vec::with_capacity(if train { out.data.len() } else { 0 });
        for bi in 0..x.batch {
            for c in 0..x.channels {
                let src = x.row(bi, c);
                let dst = out.row_mut(bi, c);
                for (t, d) in dst.iter_mut().enumerate() {
                    let start = t * self.stride;
                    let mut best = start;
                    for i in start + 1..start + self.kernel {
                        if src[i] > src[best] {
                            best = i;
                        }
                    }
                    *d = src[best];
                    if train {
                        arg.push(best);
                    }
                }
            }
        }
        if train {
            self.argmax = Some(arg);
            self.in_shape = x.shape();
        }
        Ok(out)
    }

    pub(crate) fn pattern(&self) -> Vec<usize> {
        self.argmax.clone().unwrap_or_default()
    }

    pub fn backward<T: Scalar>(&mut self, dy: &Tensor3<T>) -> Result<Tensor3<T>, NetError> {
        let arg = self.argmax.take().ok_or(NetError::StaleCache)?;
        let (b, c, l) = self.in_shape;
        if dy.data.len() != arg.len() || dy.batch != b || dy.channels != c {
            return shape_err(format!("pool gradient {:?} vs input {:?}", dy.shape(), self.in_shape));
        }
        let mut dx = Tensor3::zeros(b, c, l);
        let out_len = dy.len;
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * out_len;
                let row = dx.row_mut(bi, ci);
                for t in 0..out_len {
                    row[arg[base + t]] += dy.data[base + t];
                }
            }
        }
        Ok(dx)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm1d<T> {
    pub channels: usize,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub grad_gamma: Vec<T>,
    pub grad_beta: Vec<T>,
    pub eps: f64,
    pub momentum: f64,
    cache: Option<BnCache<T>>,
}

#[derive(Debug, Clone)]
struct BnCache<T> {
    x_hat: Tensor3<T>,
    inv_std: Vec<T>,
    batch_stats: bool,
}

impl<T: Scalar> BatchNorm1d<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            grad_gamma: vec![T::zero(); channels],
            grad_beta: vec![T::zero(); channels],
            eps: 1e-5,
            momentum: 0.1,
            cache: None,
        }
    }

    /// `train` selects batch statistics and updates the running estimates;
    /// otherwise the running estimates are used. `keep_cache` stores what
    /// backward needs.
    pub fn forward(&mut self, x: &Tensor3<T>, train: bool, keep_cache: bool) -> Result<Tensor3<T>, NetError> {
        if x.channels != self.channels {
            return shape_err(format!("batchnorm expects {} channels, got {:?}", self.channels, x.shape()));
        }
        let count = x.batch * x.len;
        if train && count < 2 {
            return Err(NetError::DegenerateBatch);
        }
        let mut x_hat = Tensor3::zeros(x.batch, x.channels, x.len);
        let mut inv_std = vec![T::zero(); self.channels];
        let mut out = Tensor3::zeros(x.batch, x.channels, x.len);
        for c in 0..self.channels {
            let (mean, var) = if train {
                let mut sum = 0.0f64;
                for bi in 0..x.batch {
                    sum += x.row(bi, c).iter().map(|v| v.as_f64()).sum::<f64>();
                }
                let mean = sum / count as f64;
                let mut sq = 0.0f64;
                for bi in 0..x.batch {
                    sq += x.row(bi, c).iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>();
                }
                let var = sq / count as f64;
                let unbiased = sq / (count - 1) as f64;
                let m = self.momentum;
                self.running_mean[c] = T::of((1.0 - m) * self.running_mean[c].as_f64() + m * mean);
                self.running_var[c] = T::of((1.0 - m) * self.running_var[c].as_f64() + m * unbiased);
                (mean, var)
            } else {
                (self.running_mean[c].as_f64(), self.running_var[c].as_f64())
            };
            let inv = 1.0 / (var + self.eps).sqrt();
            inv_std[c] = T::of(inv);
            let (mean, inv) = (T::of(mean), T::of(inv));
            let (g, b) = (self.gamma[c], self.beta[c]);
            for bi in 0..x.batch {
                let src = x.row(bi, c);
                let start = (bi * x.channels + c) * x.len;
                for t in 0..x.len {
                    let h = (src[t] - mean) * inv;
                    x_hat.data[start + t] = h;
                    out.data[start + t] = h * g + b;
                }
            }
        }
        self.cache = keep_cache.then_some(BnCache {
            x_hat,
            inv_std,
            batch_stats: train,
        });
        Ok(out)
    }

    pub fn backward(&mut self, dy: &Tensor3<T>) -> Result<Tensor3<T>, NetError> {
        let cache = self.cache.take().ok_or(NetError::StaleCache)?;
        dy.same_shape(&cache.x_hat, "batchnorm gradient")?;
        let (b, ch, l) = dy.shape();
        let n = T::of((b * l) as f64);
        let mut dx = Tensor3::zeros(b, ch, l);
        for c in 0..ch {
            let mut sum_dy = T::zero();
            let mut sum_dy_xh = T::zero();
            for bi in 0..b {
                for (&d, &h) in dy.row(bi, c).iter().zip(cache.x_hat.row(bi, c)) {
                    sum_dy += d;
                    sum_dy_xh += d * h;
                }
            }
            self.grad_gamma[c] += sum_dy_xh;
            self.grad_beta[c] += sum_dy;
            let g = self.gamma[c];
            let inv = cache.inv_std[c];
            for bi in 0..b {
                let start = (bi * ch + c) * l;
                for t in 0..l {
                    let d = dy.data[start + t];
                    dx.data[start + t] = if cache.batch_stats {
                        let h = cache.x_hat.data[start + t];
                        g * inv * (d - sum_dy / n - h * sum_dy_xh / n)
                    } else {
                        g * inv * d
                    };
                }
            }
        }
        Ok(dx)
    }

    pub fn zero_grad(&mut self) {
        self.grad_gamma.iter_mut().for_each(|g| *g = T::zero());
        self.grad_beta.iter_mut().for_each(|g| *g = T::zero());
    }
}

/// Mean over the length axis, output length 1.
#[derive(Debug, Clone, Default)]
pub struct GlobalAvgPool {
    in_len: Option<usize>,
}

impl GlobalAvgPool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward<T: Scalar>(&mut self, x: &Tensor3<T>, train: bool) -> Tensor3<T> {
        let mut out = Tensor3::zeros(x.batch, x.channels, 1);
        let inv = T::of(1.0 / x.len as f64);
        for bi in 0..x.batch {
            for c in 0..x.channels {
                out.data[bi * x.channels + c] = x.row(bi, c).iter().copied().sum::<T>() * inv;
            }
        }
        if train {
            self.in_len = Some(x.len);
        }
        out
    }

    pub fn backward<T: Scalar>(&mut self, dy: &Tensor3<T>) -> Result<Tensor3<T>, NetError> {
        let len = self.in_len.take().ok_or(NetError::StaleCache)?;
        if dy.len != 1 {
            return shape_err(format!("pooled gradient must have length 1, got {:?}", dy.shape()));
        }
        let mut dx = Tensor3::zeros(dy.batch, dy.channels, len);
        let inv = T::of(1.0 / len as f64);
        for bi in 0..dy.batch {
            for c in 0..dy.channels {
                let g = dy.data[bi * dy.channels + c] * inv;
                dx.row_mut(bi, c).iter_mut().for_each(|v| *v = g);
            }
        }
        Ok(dx)
    }
}

/// Fully connected layer on `(batch, features)` row-major matrices.
#[derive(Debug, Clone)]
pub struct Dense<T> {
    pub inputs: usize,
    pub outputs: usize,
    /// `(outputs, inputs)` row-major.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    pub grad_weight: Vec<T>,
    pub grad_bias: Vec<T>,
    cache: Option<(Vec<T>, usize)>,
}

impl<T: Scalar> Dense<T> {
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let fan_in = inputs as f64;
        let weight = uniform_vec(rng, inputs * outputs, (6.0 / fan_in).sqrt());
        let bias = uniform_vec(rng, outputs, 1.0 / fan_in.sqrt());
        Self::from_params(inputs, outputs, weight, bias).expect("consistent sizes")
    }

    pub fn from_params(inputs: usize, outputs: usize, weight: Vec<T>, bias: Vec<T>) -> Result<Self, NetError> {
        if weight.len() != inputs * outputs || bias.len() != outputs {
            return shape_err(format!(
                "dense weights {} / bias {} for {inputs} -> {outputs}",
                weight.len(),
                bias.len()
            ));
        }
        Ok(Self {
            inputs,
            outputs,
            grad_weight: vec![T::zero(); weight.len()],
            grad_bias: vec![T::zero(); outputs],
            weight,
            bias,
            cache: None,
        })
    }

    pub fn forward(&mut self, x: &[T], batch: usize, train: bool) -> Result<Vec<T>, NetError> {
        if x.len() != batch * self.inputs {
            return shape_err(format!(
                "dense expects ({batch}, {}), got {} values",
                self.inputs,
                x.len()
            ));
        }
        let mut y = vec![T::zero(); batch * self.outputs];
        for bi in 0..batch {
            y[bi * self.outputs..(bi + 1) * self.outputs].copy_from_slice(&self.bias);
        }
        matmul(batch, self.inputs, self.outputs, x, false, &self.weight, true, &mut y, true);
        self.cache = train.then(|| (x.to_vec(), batch));
        Ok(y)
    }

    pub fn backward(&mut self, dy: &[T]) -> Result<Vec<T>, NetError> {
        let (x, batch) = self.cache.take().ok_or(NetError::StaleCache)?;
        if dy.len() != batch * self.outputs {
            return shape_err(format!(
                "dense gradient has {} values, expected ({batch}, {})",
                dy.len(),
                self.outputs
            ));
        }
        matmul(self.outputs, batch, self.inputs, dy, true, &x, false, &mut self.grad_weight, true);
        for bi in 0..batch {
            for (g, &d) in self.grad_bias.iter_mut().zip(&dy[bi * self.outputs..(bi + 1) * self.outputs]) {
                *g += d;
            }
        }
        let mut dx = vec![T::zero(); batch * self.inputs];
        matmul(batch, self.outputs, self.inputs, dy, false, &self.weight, false, &mut dx, false);
        Ok(dx)
    }

    pub fn zero_grad(&mut self) {
        self.grad_weight.iter_mut().for_each(|g| *g = T::zero());
        self.grad_bias.iter_mut().for_each(|g| *g = T::zero());
    }
}

/// Nearest-neighbour upsampling to a fixed output length.
#[derive(Debug, Clone)]
pub struct Upsample1d {
    pub target: usize,
    in_len: Option<usize>,
}

impl Upsample1d {
    pub fn new(target: usize) -> Self {
        Self { target, in_len: None }
    }

    fn source(&self, t: usize, in_len: usize) -> usize {
        t * in_len / self.target
    }

    pub fn forward<T: Scalar>(&mut self, x: &Tensor3<T>, train: bool) -> Tensor3<T> {
        let mut out = Tensor3::zeros(x.batch, x.channels, self.target);
        for bi in 0..x.batch {
            for c in 0..x.channels {
                let src = x.row(bi, c);
                let dst = out.row_mut(bi, c);
                for (t, d) in dst.iter_mut().enumerate() {
                    *d = src[t * x.len / self.target];
                }
            }
        }
        if train {
            self.in_len = Some(x.len);
        }
        out
    }

    pub fn backward<T: Scalar>(&mut self, dy: &Tensor3<T>) -> Result<Tensor3<T>, NetError> {
        let in_len = self.in_len.take().ok_or(NetError::StaleCache)?;
        if dy.len != self.target {
            return shape_err(format!("upsample gradient {:?} vs length {}", dy.shape(), self.target));
        }
        let mut dx = Tensor3::zeros(dy.batch, dy.channels, in_len);
        for bi in 0..dy.batch {
            for c in 0..dy.channels {
                let src = dy.row(bi, c).to_vec();
                let dst = dx.row_mut(bi, c);
                for (t, &g) in src.iter().enumerate() {
                    dst[self.source(t, in_len)] += g;
                }
            }
        }
        Ok(dx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t1(v: &[f64]) -> Tensor3<f64> {
        Tensor3::from_vec(v.to_vec(), 1, 1, v.len()).unwrap()
    }

    fn random_tensor(rng: &mut ChaCha8Rng, b: usize, c: usize, l: usize) -> Tensor3<f64> {
        Tensor3::from_vec((0..b * c * l).map(|_| rng.gen_range(-1.0..1.0)).collect(), b, c, l).unwrap()
    }

    #[test]
    fn conv_hand_example() {
        let mut conv = Conv1d::from_params(1, 1, 3, 0, vec![1.0, 0.0, -1.0], vec![0.0]).unwrap();
        assert_eq!(conv.forward(&t1(&[1.0, 2.0, 3.0]), false).unwrap().data, vec![-2.0]);
    }

    #[test]
    fn conv_identity_and_bias() {
        let x = t1(&[0.5, -1.0, 2.0, 7.0]);
        let mut id = Conv1d::from_params(1, 1, 3, 1, vec![0.0, 1.0, 0.0], vec![0.0]).unwrap();
        assert_eq!(id.forward(&x, false).unwrap(), x);
        let mut bias = Conv1d::from_params(1, 1, 3, 1, vec![0.0; 3], vec![4.5]).unwrap();
        assert!(bias.forward(&x, false).unwrap().data.iter().all(|&v| v == 4.5));
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut conv = Conv1d::<f64>::new(3, 4, 9, 1, &mut rng);
        let x = random_tensor(&mut rng, 2, 3, 20);
        let y = conv.forward(&x, false).unwrap();
        assert_eq!(y.shape(), (2, 4, 14));
        for b in 0..2 {
            for o in 0..4 {
                for t in 0..14 {
                    let mut s = conv.bias[o];
                    for c in 0..3 {
                        for j in 0..9 {
                            let idx = t as isize + j as isize - 1;
                            if (0..20).contains(&idx) {
                                s += conv.weight[(o * 3 + c) * 9 + j] * x.at(b, c, idx as usize);
                            }
                        }
                    }
                    assert!((y.at(b, o, t) - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv_shape_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut conv = Conv1d::<f64>::new(2, 2, 9, 1, &mut rng);
        let wrong_channels = random_tensor(&mut rng, 1, 3, 20);
        assert!(matches!(conv.forward(&wrong_channels, false), Err(NetError::ShapeError(_))));
        let too_short = random_tensor(&mut rng, 1, 2, 6);
        assert!(matches!(conv.forward(&too_short, false), Err(NetError::ShapeError(_))));
        assert_eq!(conv.backward(&random_tensor(&mut rng, 1, 2, 3)), Err(NetError::StaleCache));
    }

    #[test]
    fn relu_examples() {
        let mut r = Relu::new();
        assert_eq!(r.forward(&t1(&[-1.0, 0.0, 2.0]), false).data, vec![0.0, 0.0, 2.0]);
        assert!(r.forward(&t1(&[-1.0, -3.0]), false).data.iter().all(|&v| v == 0.0));
        let x = t1(&[-0.5, 0.25, 3.0, -2.0]);
        let once = r.forward(&x, false);
        assert_eq!(r.forward(&once, false), once);
    }

    #[test]
    fn maxpool_examples() {
        let mut p = MaxPool1d::new(4, 2);
        assert_eq!(p.forward(&t1(&[1.0, 3.0, 2.0, 5.0, 4.0, 0.0]), false).unwrap().data, vec![5.0, 5.0]);
        assert_eq!(p.forward(&t1(&[2.0; 8]), false).unwrap().data, vec![2.0; 3]);
        let inc: Vec<f64> = (0..10).map(f64::from).collect();
        assert_eq!(p.forward(&t1(&inc), false).unwrap().data, vec![3.0, 5.0, 7.0, 9.0]);
        assert!(matches!(p.forward(&t1(&[1.0, 2.0, 3.0]), false), Err(NetError::ShapeError(_))));
    }

    #[test]
    fn maxpool_ties_route_to_first() {
        let mut p = MaxPool1d::new(4, 2);
        p.forward(&t1(&[1.0, 1.0, 1.0, 1.0]), true).unwrap();
        let dx = p.backward(&t1(&[1.0])).unwrap();
        assert_eq!(dx.data, vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn batchnorm_standardizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_tensor(&mut rng, 5, 3, 7).map(|v| 10.0 * v + 2.0);
        let mut bn = BatchNorm1d::<f64>::new(3);
        let y = bn.forward(&x, true, false).unwrap();
        for c in 0..3 {
            let vals: Vec<f64> = (0..5).flat_map(|b| y.row(b, c).to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-6, "{var}");
        }
        bn.gamma = vec![2.0; 3];
        bn.beta = vec![3.0; 3];
        let z = bn.forward(&y, true, false).unwrap();
        for c in 0..3 {
            let vals: Vec<f64> = (0..5).flat_map(|b| z.row(b, c).to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
            assert!((mean - 3.0).abs() < 1e-6);
            assert!((sd - 2.0).abs() < 1e-4);
        }
    }

    #[test]
    fn batchnorm_eval_uses_running_stats() {
        let mut bn = BatchNorm1d::<f64>::new(1);
        bn.gamma = vec![1.5];
        bn.beta = vec![-0.5];
        let x = t1(&[0.0, 1.0, -2.0]);
        let y = bn.forward(&x, false, false).unwrap();
        let scale = 1.0 / (1.0f64 + 1e-5).sqrt();
        for (a, b) in y.data.iter().zip(&x.data) {
            assert!((a - (b * scale * 1.5 - 0.5)).abs() < 1e-12);
        }
        assert_eq!(bn.running_mean, vec![0.0]);
    }

    #[test]
    fn batchnorm_degenerate_batch() {
        let mut bn = BatchNorm1d::<f64>::new(1);
        assert_eq!(bn.forward(&t1(&[3.0]), true, true), Err(NetError::DegenerateBatch));
        assert!(bn.forward(&t1(&[3.0]), false, false).is_ok());
    }

    #[test]
    fn batchnorm_running_stats_converge() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut bn = BatchNorm1d::<f64>::new(2);
        for _ in 0..200 {
            let x = random_tensor(&mut rng, 16, 2, 128).map(|v| 3.0 * v + 1.0);
            bn.forward(&x, true, false).unwrap();
        }
        let x = random_tensor(&mut rng, 16, 2, 128).map(|v| 3.0 * v + 1.0);
        let train = bn.clone().forward(&x, true, false).unwrap();
        let eval = bn.forward(&x, false, false).unwrap();
        let rms = |v: &[f64]| (v.iter().map(|a| a * a).sum::<f64>() / v.len() as f64).sqrt();
        let diff: Vec<f64> = train.data.iter().zip(&eval.data).map(|(a, b)| a - b).collect();
        assert!(rms(&diff) < 0.05 * rms(&train.data), "{}", rms(&diff));
        assert!(bn.running_var.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn gap_examples() {
        let mut g = GlobalAvgPool::new();
        assert_eq!(g.forward(&t1(&[2.0, 4.0, 6.0]), false).data, vec![4.0]);
        assert_eq!(g.forward(&t1(&[1.25; 5]), false).data, vec![1.25]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_tensor(&mut rng, 2, 3, 11);
        let y = random_tensor(&mut rng, 2, 3, 11);
        let combo = Tensor3::from_vec(
            x.data.iter().zip(&y.data).map(|(a, b)| 2.0 * a - 0.5 * b).collect(),
            2,
            3,
            11,
        )
        .unwrap();
        let (gx, gy, gc) = (g.forward(&x, false), g.forward(&y, false), g.forward(&combo, false));
        for i in 0..6 {
            assert!((gc.data[i] - (2.0 * gx.data[i] - 0.5 * gy.data[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn dense_forward() {
        let mut d = Dense::from_params(2, 3, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0], vec![0.0, 1.0, -1.0]).unwrap();
        assert_eq!(d.forward(&[2.0, 3.0], 1, false).unwrap(), vec![2.0, 4.0, 4.0]);
        assert!(d.forward(&[2.0], 1, false).is_err());
    }

    #[test]
    fn upsample_nearest() {
        let mut u = Upsample1d::new(5);
        assert_eq!(u.forward(&t1(&[1.0, 2.0]), false).data, vec![1.0, 1.0, 1.0, 2.0, 2.0]);
        u.forward(&t1(&[1.0, 2.0]), true);
        assert_eq!(u.backward(&t1(&[1.0; 5])).unwrap().data, vec![3.0, 2.0]);
    }

    mod finite_differences {
        use super::*;

        const H: f64 = 1e-3;
        const SEEDS: u64 = 60;

        fn close(a: f64, n: f64) -> bool {
            (a - n).abs() <= 1e-4 * a.abs().max(n.abs()) + 1e-9
        }

        /// `f(i, d)` is the scalar objective with entry `i` moved by `d`.
        fn check(what: &str, analytic: &[f64], mut f: impl FnMut(usize, f64) -> f64) {
            for (i, &a) in analytic.iter().enumerate() {
                let fd = (f(i, H) - f(i, -H)) / (2.0 * H);
                assert!(close(a, fd), "{what}[{i}]: analytic {a} vs numeric {fd}");
            }
        }

        fn dot(a: &[f64], b: &[f64]) -> f64 {
            a.iter().zip(b).map(|(x, y)| x * y).sum()
        }

        fn nudge(x: &Tensor3<f64>, i: usize, d: f64) -> Tensor3<f64> {
            let mut y = x.clone();
            y.data[i] += d;
            y
        }

        #[test]
        fn conv() {
            for seed in 0..SEEDS {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let (cin, cout) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
                let kernel = [3, 5, 9][rng.gen_range(0..3)];
                let padding = rng.gen_range(0..=2);
                let len = rng.gen_range(kernel..kernel + 12);
                let mut conv = Conv1d::<f64>::new(cin, cout, kernel, padding, &mut rng);
                let b = rng.gen_range(1..=3);
                let x = random_tensor(&mut rng, b, cin, len);
                let y = conv.forward(&x, true).unwrap();
                let r = random_tensor(&mut rng, y.batch, y.channels, y.len);
                let dx = conv.backward(&r).unwrap();
                let base = conv.clone();
                check("conv input", &dx.data, |i, d| dot(&base.clone().forward(&nudge(&x, i, d), false).unwrap().data, &r.data));
                check("conv weight", &conv.grad_weight, |i, d| {
                    let mut c = base.clone();
                    c.weight[i] += d;
                    dot(&c.forward(&x, false).unwrap().data, &r.data)
                });
                check("conv bias", &conv.grad_bias, |i, d| {
                    let mut c = base.clone();
                    c.bias[i] += d;
                    dot(&c.forward(&x, false).unwrap().data, &r.data)
                });
            }
        }

        #[test]
        fn dense() {
            for seed in 0..SEEDS {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let (nin, nout, b) = (rng.gen_range(1..=6), rng.gen_range(1..=6), rng.gen_range(1..=4));
                let mut layer = Dense::<f64>::new(nin, nout, &mut rng);
                let x: Vec<f64> = (0..b * nin).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let r: Vec<f64> = (0..b * nout).map(|_| rng.gen_range(-1.0..1.0)).collect();
                layer.forward(&x, b, true).unwrap();
                let dx = layer.backward(&r).unwrap();
                let base = layer.clone();
                check("dense input", &dx, |i, d| {
                    let mut x2 = x.clone();
                    x2[i] += d;
                    dot(&base.clone().forward(&x2, b, false).unwrap(), &r)
                });
                check("dense weight", &layer.grad_weight, |i, d| {
                    let mut l = base.clone();
                    l.weight[i] += d;
                    dot(&l.forward(&x, b, false).unwrap(), &r)
                });
                check("dense bias", &layer.grad_bias, |i, d| {
                    let mut l = base.clone();
                    l.bias[i] += d;
                    dot(&l.forward(&x, b, false).unwrap(), &r)
                });
            }
        }

        #[test]
        fn relu() {
            for seed in 0..SEEDS {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                // keep every value clear of the kink
                let x = random_tensor(&mut rng, 2, 2, 10).map(|v| if v >= 0.0 { v + 0.01 } else { v - 0.01 });
                let r = random_tensor(&mut rng, 2, 2, 10);
                let mut layer = Relu::new();
                layer.forward(&x, true);
                let dx = layer.backward(&r).unwrap();
                check("relu input", &dx.data, |i, d| dot(&Relu::new().forward(&nudge(&x, i, d), false).data, &r.data));
            }
        }

        #[test]
        fn maxpool() {
            for seed in 0..SEEDS {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let (b, c, l) = (rng.gen_range(1..=3), rng.gen_range(1..=3), rng.gen_range(4..20));
                // distinct values 0.01 apart so no window has a near tie
                let mut vals: Vec<f64> = (0..b * c * l).map(|i| i as f64 * 0.01).collect();
                for i in (1..vals.len()).rev() {
                    vals.swap(i, rng.gen_range(0..=i));
                }
                let x = Tensor3::from_vec(vals, b, c, l).unwrap();
                let mut pool = MaxPool1d::new(4, 2);
                let y = pool.forward(&x, true).unwrap();
                let r = random_tensor(&mut rng, b, c, y.len);
                let dx = pool.backward(&r).unwrap();
                check("maxpool input", &dx.data, |i, d| {
                    dot(&MaxPool1d::new(4, 2).forward(&nudge(&x, i, d), false).unwrap().data, &r.data)
                });
            }
        }

        #[test]
        fn batchnorm() {
            for seed in 0..SEEDS {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let (b, c, l) = (rng.gen_range(2..=4), rng.gen_range(1..=3), rng.gen_range(3..10));
                let x = random_tensor(&mut rng, b, c, l);
                let r = random_tensor(&mut rng, b, c, l);
                let mut bn = BatchNorm1d::<f64>::new(c);
                bn.gamma = (0..c).map(|_| rng.gen_range(0.5..2.0)).collect();
                bn.beta = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
                for train in [true, false] {
                    if !train {
                        bn.running_mean = (0..c).map(|_| rng.gen_range(-0.5..0.5)).collect();
                        bn.running_var = (0..c).map(|_| rng.gen_range(0.5..2.0)).collect();
                    }
                    let frozen = bn.clone();
                    bn.zero_grad();
                    bn.forward(&x, train, true).unwrap();
                    let dx = bn.backward(&r).unwrap();
                    let eval = |m: &mut BatchNorm1d<f64>, x: &Tensor3<f64>| dot(&m.forward(x, train, false).unwrap().data, &r.data);
                    check("batchnorm input", &dx.data, |i, d| eval(&mut frozen.clone(), &nudge(&x, i, d)));
                    check("batchnorm gamma", &bn.grad_gamma, |i, d| {
                        let mut m = frozen.clone();
                        m.gamma[i] += d;
                        eval(&mut m, &x)
                    });
                    check("batchnorm beta", &bn.grad_beta, |i, d| {
                        let mut m = frozen.clone();
                        m.beta[i] += d;
                        eval(&mut m, &x)
                    });
                }
            }
        }

        #[test]
        fn global_average_pool() {
            for seed in 0..SEEDS {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let l = rng.gen_range(1..12);
                let x = random_tensor(&mut rng, 2, 3, l);
                let r = random_tensor(&mut rng, 2, 3, 1);
                let mut gap = GlobalAvgPool::new();
                gap.forward(&x, true);
                let dx = gap.backward(&r).unwrap();
                check("gap input", &dx.data, |i, d| dot(&GlobalAvgPool::new().forward(&nudge(&x, i, d), false).data, &r.data));
            }
        }

        #[test]
        fn upsample() {
            for seed in 0..SEEDS {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let l = rng.gen_range(1..10);
                let target = rng.gen_range(l..3 * l + 4);
                let x = random_tensor(&mut rng, 2, 2, l);
                let r = random_tensor(&mut rng, 2, 2, target);
                let mut up = Upsample1d::new(target);
                up.forward(&x, true);
                let dx = up.backward(&r).unwrap();
                check("upsample input", &dx.data, |i, d| dot(&Upsample1d::new(target).forward(&nudge(&x, i, d), false).data, &r.data));
            }
        }
    }
}
