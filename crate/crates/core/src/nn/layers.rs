use super::param::join;
use super::{Module, Param, Scalar, Tensor, Visitor};

/// Whether batch statistics or running averages drive batch normalisation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// Per-channel batch normalisation over `(N, H, W)`.
#[derive(Clone, Debug)]
pub struct BatchNorm2d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    cache: Option<BnCache<T>>,
}

#[derive(Clone, Debug)]
struct BnCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
    mode: Mode,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::filled(&[channels], T::one()),
            beta: Param::zeros(&[channels]),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let [n, c, h, w] = x.shape();
        assert_eq!(c, self.gamma.len(), "batch-norm channel mismatch");
        let count = n * h * w;
        let eps = T::of(BN_EPS);
        let mut xhat = Tensor::zeros(x.shape());
        let mut out = Tensor::zeros(x.shape());
        let mut inv_std = vec![T::zero(); c];
        for ch in 0..c {
            let (mean, var) = match mode {
                Mode::Train => {
                    let mut s = 0.0f64;
                    for i in 0..n {
                        s += x.channel(i, ch).iter().map(|v| v.as_f64()).sum::<f64>();
                    }
                    let mean = s / count as f64;
                    let mut ss = 0.0f64;
                    for i in 0..n {
                        ss += x
                            .channel(i, ch)
                            .iter()
                            .map(|v| {
                                let d = v.as_f64() - mean;
                                d * d
                            })
                            .sum::<f64>();
                    }
                    let var = ss / count as f64;
                    let unbiased = if count > 1 { ss / (count - 1) as f64 } else { var };
                    let m = T::of(BN_MOMENTUM);
                    self.running_mean[ch] = (T::one() - m) * self.running_mean[ch] + m * T::of(mean);
                    self.running_var[ch] = (T::one() - m) * self.running_var[ch] + m * T::of(unbiased);
                    (T::of(mean), T::of(var))
                }
                Mode::Eval => (self.running_mean[ch], self.running_var[ch]),
            };
            let istd = T::one() / (var + eps).sqrt();
            inv_std[ch] = istd;
            let g = self.gamma.value[ch];
            let b = self.beta.value[ch];
            for i in 0..n {
                let src = x.channel(i, ch);
                let xh = xhat.channel_mut(i, ch);
                for (d, &s) in xh.iter_mut().zip(src) {
                    *d = (s - mean) * istd;
                }
                let xh = xhat.channel(i, ch);
                for (o, &v) in out.channel_mut(i, ch).iter_mut().zip(xh) {
                    *o = g * v + b;
                }
            }
        }
        self.cache = Some(BnCache { xhat, inv_std, mode });
        out
    }

    pub fn backward(&mut self, grad: &Tensor<T>) -> Tensor<T> {
        let cache = self.cache.as_ref().expect("batch-norm backward before forward");
        let [n, c, h, w] = grad.shape();
        let count = T::of((n * h * w) as f64);
        let trainable = self.gamma.trainable;
        let mut gx = Tensor::zeros(grad.shape());
        for ch in 0..c {
            let mut sum_g = T::zero();
            let mut sum_gx = T::zero();
            for i in 0..n {
                for (&g, &xh) in grad.channel(i, ch).iter().zip(cache.xhat.channel(i, ch)) {
                    sum_g = sum_g + g;
                    sum_gx = sum_gx + g * xh;
                }
            }
            if trainable {
                self.gamma.grad[ch] = self.gamma.grad[ch] + sum_gx;
                self.beta.grad[ch] = self.beta.grad[ch] + sum_g;
            }
            let scale = self.gamma.value[ch] * cache.inv_std[ch];
            for i in 0..n {
                let g = grad.channel(i, ch);
                let xh = cache.xhat.channel(i, ch);
                let dst = gx.channel_mut(i, ch);
                match cache.mode {
                    Mode::Train => {
                        let k = scale / count;
                        for ((d, &gg), &xx) in dst.iter_mut().zip(g).zip(xh) {
                            *d = k * (count * gg - sum_g - xx * sum_gx);
                        }
                    }
                    Mode::Eval => {
                        for (d, &gg) in dst.iter_mut().zip(g) {
                            *d = scale * gg;
                        }
                    }
                }
            }
        }
        gx
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}

impl<T: Scalar> Module<T> for BatchNorm2d<T> {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor<T>) {
        v.param(&join(prefix, "gamma"), &mut self.gamma);
        v.param(&join(prefix, "beta"), &mut self.beta);
        v.buffer(&join(prefix, "running_mean"), &mut self.running_mean);
        v.buffer(&join(prefix, "running_var"), &mut self.running_var);
    }
}

/// Rectified linear unit with cached activity mask.
#[derive(Clone, Debug, Default)]
pub struct Relu {
    mask: Vec<bool>,
}

impl Relu {
    pub fn forward<T: Scalar>(&mut self, x: &Tensor<T>) -> Tensor<T> {
        self.mask = x.data().iter().map(|&v| v > T::zero()).collect();
        x.map(|v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn backward<T: Scalar>(&self, grad: &Tensor<T>) -> Tensor<T> {
        let mut g = grad.clone();
        for (v, &m) in g.data_mut().iter_mut().zip(&self.mask) {
            if !m {
                *v = T::zero();
            }
        }
        g
    }
}

/// 2×2 max pooling with stride 2.
#[derive(Clone, Debug, Default)]
pub struct MaxPool2 {
    argmax: Vec<usize>,
    input_shape: [usize; 4],
}

impl MaxPool2 {
    pub fn forward<T: Scalar>(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let [n, c, h, w] = x.shape();
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Tensor::zeros([n, c, oh, ow]);
        self.argmax.clear();
        self.argmax.reserve(out.len());
        self.input_shape = x.shape();
        let data = x.data();
        for i in 0..n {
            for ch in 0..c {
                for y in 0..oh {
                    for xx in 0..ow {
                        let base = x.index(i, ch, 2 * y, 2 * xx);
                        let cands = [base, base + 1, base + w, base + w + 1];
                        let mut best = cands[0];
                        for &idx in &cands[1..] {
                            if data[idx] > data[best] {
                                best = idx;
                            }
                        }
                        self.argmax.push(best);
                        out.set(i, ch, y, xx, data[best]);
                    }
                }
            }
        }
        out
    }

    pub fn backward<T: Scalar>(&self, grad: &Tensor<T>) -> Tensor<T> {
        let mut gx = Tensor::zeros(self.input_shape);
        let dst = gx.data_mut();
        for (&idx, &g) in self.argmax.iter().zip(grad.data()) {
            dst[idx] = dst[idx] + g;
        }
        gx
    }
}

/// Nearest-neighbour 2× upsampling.
pub fn upsample2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let mut out = Tensor::zeros([n, c, 2 * h, 2 * w]);
    for i in 0..n {
        for ch in 0..c {
            let src = x.channel(i, ch);
            let dst = out.channel_mut(i, ch);
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
    }
    out
}

/// Adjoint of [`upsample2`]: sums each 2×2 block.
pub fn upsample2_backward<T: Scalar>(grad: &Tensor<T>) -> Tensor<T> {
    let [n, c, h2, w2] = grad.shape();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut out = Tensor::zeros([n, c, h, w]);
    for i in 0..n {
        for ch in 0..c {
            let src = grad.channel(i, ch);
            let dst = out.channel_mut(i, ch);
            for y in 0..h2 {
                for xx in 0..w2 {
                    let d = &mut dst[(y / 2) * w + xx / 2];
                    *d = *d + src[y * w2 + xx];
                }
            }
        }
    }
    out
}

pub fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

/// Softmax over the channel axis of every pixel.
pub fn softmax_channels<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let [n, k, h, w] = logits.shape();
    let hw = h * w;
    let mut out = Tensor::zeros(logits.shape());
    for i in 0..n {
        let src = logits.sample(i);
        let dst = out.sample_mut(i);
        for p in 0..hw {
            let mut m = T::neg_infinity();
            for c in 0..k {
                m = m.max(src[c * hw + p]);
            }
            let mut z = T::zero();
            for c in 0..k {
                let e = (src[c * hw + p] - m).exp();
                dst[c * hw + p] = e;
                z = z + e;
            }
            for c in 0..k {
                dst[c * hw + p] = dst[c * hw + p] / z;
            }
        }
    }
    out
}

/// Gradient w.r.t. logits given probabilities and the gradient w.r.t. probabilities.
pub fn softmax_channels_backward<T: Scalar>(probs: &Tensor<T>, grad: &Tensor<T>) -> Tensor<T> {
    let [n, k, h, w] = probs.shape();
    let hw = h * w;
    let mut out = Tensor::zeros(probs.shape());
    for i in 0..n {
        let p = probs.sample(i);
        let g = grad.sample(i);
        let dst = out.sample_mut(i);
        for px in 0..hw {
            let mut dot = T::zero();
            for c in 0..k {
                dot = dot + p[c * hw + px] * g[c * hw + px];
            }
            for c in 0..k {
                dst[c * hw + px] = p[c * hw + px] * (g[c * hw + px] - dot);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batchnorm_train_output_is_standardised() {
        let x = Tensor::from_vec([2, 1, 1, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let mut bn = BatchNorm2d::new(1);
        let y = bn.forward(&x, Mode::Train);
        let mean: f64 = y.data().iter().sum::<f64>() / 4.0;
        let var: f64 = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
        // running stats moved 10% toward batch stats (unbiased var 5/3)
        assert!((bn.running_mean[0] - 0.25).abs() < 1e-12);
        assert!((bn.running_var[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let x = Tensor::from_vec([1, 1, 2, 2], vec![0.1f64, 0.7, 0.3, 0.2]).unwrap();
        let mut mp = MaxPool2::default();
        let y = mp.forward(&x);
        assert_eq!(y.data(), &[0.7]);
        let g = mp.backward(&Tensor::full([1, 1, 1, 1], 2.0));
        assert_eq!(g.data(), &[0.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn upsample_adjoint() {
        let x = Tensor::from_vec([1, 1, 1, 2], vec![1.0f64, 2.0]).unwrap();
        let up = upsample2(&x);
        assert_eq!(up.data(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
        let back = upsample2_backward(&up);
        assert_eq!(back.data(), &[4.0, 8.0]);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let p = softmax_channels(&Tensor::<f64>::zeros([1, 2, 2, 2]));
        assert!(p.data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }
}
