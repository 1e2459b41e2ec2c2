use rand::Rng;

use crate::nn::{join, sigmoid, BatchNorm2d, Conv2d, Mode, Module, Relu, Scalar, Tensor, Visitor};

/// Coordinate attention: direction-aware channel gating built from two 1-D
/// global average pools (along width and along height).
///
/// The pooled profiles of length `H` and `W` are stacked along one spatial
/// axis, mixed by a shared 1×1 conv + BN + ReLU with channel reduction, split
/// again and turned into sigmoid gates `g_h` (per row) and `g_w` (per column).
/// The output is `x * g_h * g_w` with broadcasting.
#[derive(Clone, Debug)]
pub struct CoordAttention<T> {
    shared: Conv2d<T>,
    bn: BatchNorm2d<T>,
    relu: Relu,
    conv_h: Conv2d<T>,
    conv_w: Conv2d<T>,
    cache: Option<AttnCache<T>>,
}

#[derive(Clone, Debug)]
struct AttnCache<T> {
    x: Tensor<T>,
    gate_h: Tensor<T>,
    gate_w: Tensor<T>,
}

/// Hidden width of the shared transform: `channels / reduction`, at least 8.
pub fn reduced_channels(channels: usize, reduction: usize) -> usize {
    (channels / reduction.max(1)).max(8)
}

impl<T: Scalar> CoordAttention<T> {
    pub fn new(channels: usize, reduction: usize, rng: &mut impl Rng) -> Self {
        let mid = reduced_channels(channels, reduction);
        Self {
            shared: Conv2d::new(channels, mid, 1, 1, rng),
            bn: BatchNorm2d::new(mid),
            relu: Relu::default(),
            conv_h: Conv2d::new(mid, channels, 1, 1, rng),
            conv_w: Conv2d::new(mid, channels, 1, 1, rng),
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let [n, c, h, w] = x.shape();
        // [n, c, h + w, 1]: rows first, then columns
        let mut pooled = Tensor::zeros([n, c, h + w, 1]);
        let inv_w = T::one() / T::of(w as f64);
        let inv_h = T::one() / T::of(h as f64);
        for i in 0..n {
            for ch in 0..c {
                let src = x.channel(i, ch);
                let dst = pooled.channel_mut(i, ch);
                for y in 0..h {
                    let row = &src[y * w..(y + 1) * w];
                    dst[y] = row.iter().copied().sum::<T>() * inv_w;
                    for (xx, &v) in row.iter().enumerate() {
                        dst[h + xx] = dst[h + xx] + v;
                    }
                }
                for v in &mut dst[h..] {
                    *v = *v * inv_h;
                }
            }
        }
        let mixed = self.shared.forward(&pooled);
        let mixed = self.bn.forward(&mixed, mode);
        let mixed = self.relu.forward(&mixed);
        let (part_h, part_w) = split_spatial(&mixed, h);
        let gate_h = self.conv_h.forward(&part_h).map(sigmoid);
        let gate_w = self.conv_w.forward(&part_w).map(sigmoid);

        let mut out = Tensor::zeros(x.shape());
        for i in 0..n {
            for ch in 0..c {
                let gh = gate_h.channel(i, ch);
                let gw = gate_w.channel(i, ch);
                let src = x.channel(i, ch);
                let dst = out.channel_mut(i, ch);
                for y in 0..h {
                    for xx in 0..w {
                        dst[y * w + xx] = src[y * w + xx] * gh[y] * gw[xx];
                    }
                }
            }
        }
        self.cache = Some(AttnCache {
            x: x.clone(),
            gate_h,
            gate_w,
        });
        out
    }

    pub fn backward(&mut self, grad: &Tensor<T>) -> Tensor<T> {
        let AttnCache { x, gate_h, gate_w } =
            self.cache.take().expect("attention backward before forward");
        let [n, c, h, w] = x.shape();
        let mut gx = Tensor::zeros(x.shape());
        let mut g_gate_h = Tensor::zeros(gate_h.shape());
        let mut g_gate_w = Tensor::zeros(gate_w.shape());
        for i in 0..n {
            for ch in 0..c {
                let gh = gate_h.channel(i, ch);
                let gw = gate_w.channel(i, ch);
                let src = x.channel(i, ch);
                let g = grad.channel(i, ch);
                let mut acc_h = vec![T::zero(); h];
                let mut acc_w = vec![T::zero(); w];
                let dst = gx.channel_mut(i, ch);
                for y in 0..h {
                    for xx in 0..w {
                        let k = y * w + xx;
                        let gs = g[k] * src[k];
                        dst[k] = g[k] * gh[y] * gw[xx];
                        acc_h[y] = acc_h[y] + gs * gw[xx];
                        acc_w[xx] = acc_w[xx] + gs * gh[y];
                    }
                }
                // through the sigmoid
                for (d, (&a, &s)) in g_gate_h.channel_mut(i, ch).iter_mut().zip(acc_h.iter().zip(gh)) {
                    *d = a * s * (T::one() - s);
                }
                for (d, (&a, &s)) in g_gate_w.channel_mut(i, ch).iter_mut().zip(acc_w.iter().zip(gw)) {
                    *d = a * s * (T::one() - s);
                }
            }
        }
        let g_part_h = self.conv_h.backward(&g_gate_h);
        let g_part_w = self.conv_w.backward(&g_gate_w);
        let g_mixed = concat_spatial(&g_part_h, &g_part_w);
        let g_mixed = self.relu.backward(&g_mixed);
        let g_mixed = self.bn.backward(&g_mixed);
        let g_pooled = self.shared.backward(&g_mixed);

        let inv_w = T::one() / T::of(w as f64);
        let inv_h = T::one() / T::of(h as f64);
        for i in 0..n {
            for ch in 0..c {
                let gp = g_pooled.channel(i, ch).to_vec();
                let dst = gx.channel_mut(i, ch);
                for y in 0..h {
                    let gr = gp[y] * inv_w;
                    for xx in 0..w {
                        let k = y * w + xx;
                        dst[k] = dst[k] + gr + gp[h + xx] * inv_h;
                    }
                }
            }
        }
        self.cache = Some(AttnCache { x, gate_h, gate_w });
        gx
    }

    /// Gates from the last forward pass: `(g_h [n,c,h,1], g_w [n,c,w,1])`.
    pub fn last_gates(&self) -> Option<(&Tensor<T>, &Tensor<T>)> {
        self.cache.as_ref().map(|c| (&c.gate_h, &c.gate_w))
    }
}

impl<T: Scalar> Module<T> for CoordAttention<T> {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor<T>) {
        self.shared.visit(&join(prefix, "shared"), v);
        self.bn.visit(&join(prefix, "bn"), v);
        self.conv_h.visit(&join(prefix, "conv_h"), v);
        self.conv_w.visit(&join(prefix, "conv_w"), v);
    }
}

/// Split `[n, c, h + w, 1]` into `[n, c, h, 1]` and `[n, c, w, 1]`.
fn split_spatial<T: Scalar>(t: &Tensor<T>, h: usize) -> (Tensor<T>, Tensor<T>) {
    let [n, c, hw, _] = t.shape();
    let w = hw - h;
    let mut a = Tensor::zeros([n, c, h, 1]);
    let mut b = Tensor::zeros([n, c, w, 1]);
    for i in 0..n {
        for ch in 0..c {
            let src = t.channel(i, ch);
            a.channel_mut(i, ch).copy_from_slice(&src[..h]);
            b.channel_mut(i, ch).copy_from_slice(&src[h..]);
        }
    }
    (a, b)
}

fn concat_spatial<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, _] = a.shape();
    let w = b.height();
    let mut out = Tensor::zeros([n, c, h + w, 1]);
    for i in 0..n {
        for ch in 0..c {
            let dst = out.channel_mut(i, ch);
            dst[..h].copy_from_slice(a.channel(i, ch));
            dst[h..].copy_from_slice(b.channel(i, ch));
        }
    }
    out
}
