use rand::Rng;

use super::attention::CoordAttention;
use crate::nn::{join, upsample2, upsample2_backward, BatchNorm2d, Conv2d, MaxPool2, Mode, Module, Relu, Scalar, Tensor, Visitor};

/// 3×3 convolution followed by ReLU and batch normalisation.
#[derive(Clone, Debug)]
pub struct ConvUnit<T> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
    relu: Relu,
}

impl<T: Scalar> ConvUnit<T> {
    pub fn new(cin: usize, cout: usize, dilation: usize, rng: &mut impl Rng) -> Self {
        Self {
            conv: Conv2d::new(cin, cout, 3, dilation, rng),
            bn: BatchNorm2d::new(cout),
            relu: Relu::default(),
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let y = self.conv.forward(x);
        let y = self.relu.forward(&y);
        self.bn.forward(&y, mode)
    }

    pub fn backward(&mut self, grad: &Tensor<T>) -> Tensor<T> {
        let g = self.bn.backward(grad);
        let g = self.relu.backward(&g);
        self.conv.backward(&g)
    }
}

impl<T: Scalar> Module<T> for ConvUnit<T> {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor<T>) {
        self.conv.visit(&join(prefix, "conv"), v);
        self.bn.visit(&join(prefix, "bn"), v);
    }
}

#[derive(Clone, Debug)]
enum Shortcut<T> {
    Identity,
    Projection(Conv2d<T>),
}

/// Encoder stage: two conv units, optional residual shortcut, optional
/// coordinate attention, then 2×2 max pooling.
#[derive(Clone, Debug)]
pub struct EncoderBlock<T> {
    first: ConvUnit<T>,
    second: ConvUnit<T>,
    shortcut: Option<Shortcut<T>>,
    attention: Option<CoordAttention<T>>,
    pool: MaxPool2,
}

impl<T: Scalar> EncoderBlock<T> {
    pub fn new(
        cin: usize,
        cout: usize,
        residual: bool,
        attention: Option<usize>,
        rng: &mut impl Rng,
    ) -> Self {
        let first = ConvUnit::new(cin, cout, 1, rng);
        let second = ConvUnit::new(cout, cout, 1, rng);
        let shortcut = residual.then(|| {
            if cin == cout {
                Shortcut::Identity
            } else {
                Shortcut::Projection(Conv2d::new(cin, cout, 1, 1, rng))
            }
        });
        let attention = attention.map(|r| CoordAttention::new(cout, r, rng));
        Self {
            first,
            second,
            shortcut,
            attention,
            pool: MaxPool2::default(),
        }
    }

    /// Returns `(skip, pooled)`; the skip tensor feeds the matching decoder stage.
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> (Tensor<T>, Tensor<T>) {
        let h = self.first.forward(x, mode);
        let mut h = self.second.forward(&h, mode);
        match &mut self.shortcut {
            Some(Shortcut::Identity) => h.add_assign(x),
            Some(Shortcut::Projection(p)) => h.add_assign(&p.forward(x)),
            None => {}
        }
        if let Some(att) = &mut self.attention {
            h = att.forward(&h, mode);
        }
        let pooled = self.pool.forward(&h);
        (h, pooled)
    }

    pub fn backward(&mut self, grad_skip: &Tensor<T>, grad_pooled: &Tensor<T>) -> Tensor<T> {
        let mut g = self.pool.backward(grad_pooled);
        g.add_assign(grad_skip);
        if let Some(att) = &mut self.attention {
            g = att.backward(&g);
        }
        let g_main = self.second.backward(&g);
        let mut gx = self.first.backward(&g_main);
        match &mut self.shortcut {
            Some(Shortcut::Identity) => gx.add_assign(&g),
            Some(Shortcut::Projection(p)) => gx.add_assign(&p.backward(&g)),
            None => {}
        }
        gx
    }
}

impl<T: Scalar> Module<T> for EncoderBlock<T> {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor<T>) {
        self.first.visit(&join(prefix, "unit1"), v);
        self.second.visit(&join(prefix, "unit2"), v);
        if let Some(Shortcut::Projection(p)) = &mut self.shortcut {
            p.visit(&join(prefix, "proj"), v);
        }
        if let Some(att) = &mut self.attention {
            att.visit(&join(prefix, "attention"), v);
        }
    }
}

/// Cascade of dilated conv units where each layer reads the running sum of
/// all earlier layer outputs and the block emits the sum of every output.
///
/// With input `x`: `s_0 = x`, `o_i = unit_i(s_{i-1})`, `s_i = o_1 + … + o_i`,
/// and the block returns `s_n`.
#[derive(Clone, Debug)]
pub struct DilatedCascade<T> {
    units: Vec<ConvUnit<T>>,
}

impl<T: Scalar> DilatedCascade<T> {
    pub fn new(channels: usize, rates: &[usize], rng: &mut impl Rng) -> Self {
        Self {
            units: rates
                .iter()
                .map(|&r| ConvUnit::new(channels, channels, r, rng))
                .collect(),
        }
    }

    pub fn units_mut(&mut self) -> &mut [ConvUnit<T>] {
        &mut self.units
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let mut running: Option<Tensor<T>> = None;
        for unit in &mut self.units {
            let out = unit.forward(running.as_ref().unwrap_or(x), mode);
            match &mut running {
                Some(s) => s.add_assign(&out),
                None => running = Some(out),
            }
        }
        running.unwrap_or_else(|| x.clone())
    }

    pub fn backward(&mut self, grad: &Tensor<T>) -> Tensor<T> {
        if self.units.is_empty() {
            return grad.clone();
        }
        // g_running holds dL/ds_i; since s_i = s_{i-1} + unit_i(s_{i-1}),
        // dL/ds_{i-1} = dL/ds_i + unit_i^T(dL/ds_i). The first unit reads x.
        let mut g_running = grad.clone();
        let mut gx = None;
        for i in (0..self.units.len()).rev() {
            let g_in = self.units[i].backward(&g_running);
            if i == 0 {
                gx = Some(g_in);
            } else {
                g_running.add_assign(&g_in);
            }
        }
        gx.expect("non-empty cascade")
    }
}

impl<T: Scalar> Module<T> for DilatedCascade<T> {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor<T>) {
        for (i, u) in self.units.iter_mut().enumerate() {
            u.visit(&join(prefix, &format!("dilated{i}")), v);
        }
    }
}

/// Bottleneck: entry conv unit, then either the dilated cascade or a plain
/// second conv unit.
#[derive(Clone, Debug)]
pub struct Bottleneck<T> {
    entry: ConvUnit<T>,
    body: BottleneckBody<T>,
}

#[derive(Clone, Debug)]
enum BottleneckBody<T> {
    Dilated(DilatedCascade<T>),
    Plain(ConvUnit<T>),
}

impl<T: Scalar> Bottleneck<T> {
    pub fn new(cin: usize, cout: usize, dilation_rates: Option<&[usize]>, rng: &mut impl Rng) -> Self {
        let entry = ConvUnit::new(cin, cout, 1, rng);
        let body = match dilation_rates {
            Some(r) => BottleneckBody::Dilated(DilatedCascade::new(cout, r, rng)),
            None => BottleneckBody::Plain(ConvUnit::new(cout, cout, 1, rng)),
        };
        Self { entry, body }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let h = self.entry.forward(x, mode);
        match &mut self.body {
            BottleneckBody::Dilated(d) => d.forward(&h, mode),
            BottleneckBody::Plain(u) => u.forward(&h, mode),
        }
    }

    pub fn backward(&mut self, grad: &Tensor<T>) -> Tensor<T> {
        let g = match &mut self.body {
            BottleneckBody::Dilated(d) => d.backward(grad),
            BottleneckBody::Plain(u) => u.backward(grad),
        };
        self.entry.backward(&g)
    }
}

impl<T: Scalar> Module<T> for Bottleneck<T> {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor<T>) {
        self.entry.visit(&join(prefix, "entry"), v);
        match &mut self.body {
            BottleneckBody::Dilated(d) => d.visit(prefix, v),
            BottleneckBody::Plain(u) => u.visit(&join(prefix, "unit2"), v),
        }
    }
}

/// Decoder stage: nearest upsample + conv unit, concatenate the skip, two conv units.
#[derive(Clone, Debug)]
pub struct DecoderBlock<T> {
    up: ConvUnit<T>,
    first: ConvUnit<T>,
    second: ConvUnit<T>,
    up_channels: usize,
}

impl<T: Scalar> DecoderBlock<T> {
    pub fn new(cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        Self {
            up: ConvUnit::new(cin, cout, 1, rng),
            first: ConvUnit::new(2 * cout, cout, 1, rng),
            second: ConvUnit::new(cout, cout, 1, rng),
            up_channels: cout,
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, skip: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let up = self.up.forward(&upsample2(x), mode);
        let cat = Tensor::concat_channels(&up, skip);
        let h = self.first.forward(&cat, mode);
        self.second.forward(&h, mode)
    }

    /// Returns `(grad_input, grad_skip)`.
    pub fn backward(&mut self, grad: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
        let g = self.second.backward(grad);
        let g = self.first.backward(&g);
        let (g_up, g_skip) = g.split_channels(self.up_channels);
        let g_up = self.up.backward(&g_up);
        (upsample2_backward(&g_up), g_skip)
    }
}

impl<T: Scalar> Module<T> for DecoderBlock<T> {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor<T>) {
        self.up.visit(&join(prefix, "up"), v);
        self.first.visit(&join(prefix, "unit1"), v);
        self.second.visit(&join(prefix, "unit2"), v);
    }
}
