use rand::Rng;

use super::param::join;
use super::scalar::mat;
use super::{Module, Param, Scalar, Tensor, Visitor};

/// Square 2-D convolution, stride 1, "same" zero padding, optional dilation.
#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    dilation: usize,
    input: Option<Tensor<T>>,
    cols: Vec<T>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        dilation: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(kernel % 2 == 1, "same padding needs an odd kernel");
        assert!(dilation >= 1);
        let fan_in = in_channels * kernel * kernel;
        Self {
            weight: Param::he_normal(&[out_channels, in_channels, kernel, kernel], fan_in, rng),
            bias: Param::zeros(&[out_channels]),
            in_channels,
            out_channels,
            kernel,
            dilation,
            input: None,
            cols: Vec::new(),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn dilation(&self) -> usize {
        self.dilation
    }

    fn pad(&self) -> usize {
        self.dilation * (self.kernel - 1) / 2
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let [n, c, h, w] = x.shape();
        assert_eq!(c, self.in_channels, "conv input channel mismatch");
        let hw = h * w;
        let mut out = Tensor::zeros([n, self.out_channels, h, w]);
        for i in 0..n {
            let dst = out.sample_mut(i);
            for (o, plane) in dst.chunks_mut(hw).enumerate() {
                plane.fill(self.bias.value[o]);
            }
            if self.kernel == 1 {
                mat::mm(self.out_channels, c, hw, &self.weight.value, x.sample(i), T::one(), dst);
            } else {
                im2col(
                    x.sample(i),
                    c,
                    h,
                    w,
                    self.kernel,
                    self.dilation,
                    self.pad(),
                    &mut self.cols,
                );
                mat::mm(
                    self.out_channels,
                    self.patch_len(),
                    hw,
                    &self.weight.value,
                    &self.cols,
                    T::one(),
                    dst,
                );
            }
        }
        self.input = Some(x.clone());
        out
    }

    /// Accumulates parameter gradients (when trainable) and returns the input gradient.
    pub fn backward(&mut self, grad: &Tensor<T>) -> Tensor<T> {
        let x = self.input.take().expect("conv backward before forward");
        let [n, c, h, w] = x.shape();
        let hw = h * w;
        let k = self.patch_len();
        let trainable = self.weight.trainable;
        let mut gx = Tensor::zeros(x.shape());
        let mut gcols = vec![T::zero(); if self.kernel == 1 { 0 } else { k * hw }];
        for i in 0..n {
            let gy = grad.sample(i);
            if trainable {
                for (o, plane) in gy.chunks(hw).enumerate() {
                    let s: T = plane.iter().copied().sum();
                    self.bias.grad[o] = self.bias.grad[o] + s;
                }
            }
            if self.kernel == 1 {
                if trainable {
                    mat::mm_bt(self.out_channels, hw, c, gy, x.sample(i), T::one(), &mut self.weight.grad);
                }
                mat::mm_at(c, self.out_channels, hw, &self.weight.value, gy, T::zero(), gx.sample_mut(i));
            } else {
                if trainable {
                    im2col(
                        x.sample(i),
                        c,
                        h,
                        w,
                        self.kernel,
                        self.dilation,
                        self.pad(),
                        &mut self.cols,
                    );
                    mat::mm_bt(self.out_channels, hw, k, gy, &self.cols, T::one(), &mut self.weight.grad);
                }
                mat::mm_at(k, self.out_channels, hw, &self.weight.value, gy, T::zero(), &mut gcols);
                col2im(&gcols, c, h, w, self.kernel, self.dilation, self.pad(), gx.sample_mut(i));
            }
        }
        self.input = Some(x);
        gx
    }

    pub fn clear_cache(&mut self) {
        self.input = None;
    }
}

impl<T: Scalar> Module<T> for Conv2d<T> {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor<T>) {
        v.param(&join(prefix, "weight"), &mut self.weight);
        v.param(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Range of output columns `x` for which `x + offset` lies inside `[0, len)`.
#[inline]
fn valid_range(len: usize, offset: isize) -> (usize, usize) {
    let lo = (-offset).max(0) as usize;
    let hi = (len as isize - offset).clamp(0, len as isize) as usize;
    (lo.min(hi), hi)
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    src: &[T],
    c: usize,
    h: usize,
    w: usize,
    kernel: usize,
    dilation: usize,
    pad: usize,
    cols: &mut Vec<T>,
) {
    let hw = h * w;
    cols.clear();
    cols.resize(c * kernel * kernel * hw, T::zero());
    for ch in 0..c {
        let plane = &src[ch * hw..(ch + 1) * hw];
        for ki in 0..kernel {
            let dy = (ki * dilation) as isize - pad as isize;
            let (ylo, yhi) = valid_range(h, dy);
            for kj in 0..kernel {
                let dx = (kj * dilation) as isize - pad as isize;
                let (xlo, xhi) = valid_range(w, dx);
                let row = ((ch * kernel + ki) * kernel + kj) * hw;
                let dst = &mut cols[row..row + hw];
                if xlo >= xhi {
                    continue;
                }
                for y in ylo..yhi {
                    let sy = (y as isize + dy) as usize;
                    let s0 = (sy * w) as isize + xlo as isize + dx;
                    let s0 = s0 as usize;
                    dst[y * w + xlo..y * w + xhi].copy_from_slice(&plane[s0..s0 + (xhi - xlo)]);
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    kernel: usize,
    dilation: usize,
    pad: usize,
    dst: &mut [T],
) {
    let hw = h * w;
    for ch in 0..c {
        let plane = &mut dst[ch * hw..(ch + 1) * hw];
        for ki in 0..kernel {
            let dy = (ki * dilation) as isize - pad as isize;
            let (ylo, yhi) = valid_range(h, dy);
            for kj in 0..kernel {
                let dx = (kj * dilation) as isize - pad as isize;
                let (xlo, xhi) = valid_range(w, dx);
                if xlo >= xhi {
                    continue;
                }
                let row = ((ch * kernel + ki) * kernel + kj) * hw;
                let src = &cols[row..row + hw];
                for y in ylo..yhi {
                    let sy = (y as isize + dy) as usize;
                    let s0 = ((sy * w) as isize + xlo as isize + dx) as usize;
                    for (d, &g) in plane[s0..s0 + (xhi - xlo)]
                        .iter_mut()
                        .zip(&src[y * w + xlo..y * w + xhi])
                    {
                        *d = *d + g;
                    }
                }
            }
        }
    }
}
