//! CoordDR-UNet: residual encoder with coordinate attention, dilated
//! bottleneck and a mirrored decoder ending in a per-pixel softmax.

mod attention;
mod blocks;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use attention::{reduced_channels, CoordAttention};
pub use blocks::{Bottleneck, ConvUnit, DecoderBlock, DilatedCascade, EncoderBlock};

use crate::error::{Error, Result};
use crate::nn::{
    join, softmax_channels, softmax_channels_backward, Conv2d, Mode, Module, Param, ParamFn,
    Scalar, Tensor, Visitor,
};

/// Architecture hyperparameters. Turning all three toggles off yields a plain UNet.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of stacked slices (odd); 1 is the 2-D variant.
    pub in_channels: usize,
    pub num_classes: usize,
    /// Number of 2× down-sampling stages.
    pub encoder_depth: usize,
    pub base_channels: usize,
    pub dilation_rates: Vec<usize>,
    pub use_attention: bool,
    pub use_residual: bool,
    pub use_dilated_bottleneck: bool,
    pub attention_reduction: usize,
    pub input_height: usize,
    pub input_width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            num_classes: 2,
            encoder_depth: 4,
            base_channels: 32,
            dilation_rates: vec![1, 2, 4, 8],
            use_attention: true,
            use_residual: true,
            use_dilated_bottleneck: true,
            attention_reduction: 16,
            input_height: 128,
            input_width: 160,
        }
    }
}

impl ModelConfig {
    /// Same depth and width with attention, residuals and dilation disabled.
    pub fn plain_unet(&self) -> Self {
        Self {
            use_attention: false,
            use_residual: false,
            use_dilated_bottleneck: false,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.in_channels == 0 || self.in_channels % 2 == 0 {
            return fail(format!("in_channels must be odd, got {}", self.in_channels));
        }
        if self.num_classes < 2 {
            return fail(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if self.encoder_depth == 0 || self.base_channels == 0 {
            return fail("encoder_depth and base_channels must be positive".into());
        }
        if self.dilation_rates.is_empty()
            || self.dilation_rates[0] == 0
            || self.dilation_rates.windows(2).any(|w| w[0] >= w[1])
        {
            return fail(format!(
                "dilation_rates must be non-empty, positive and strictly increasing: {:?}",
                self.dilation_rates
            ));
        }
        if self.attention_reduction == 0 {
            return fail("attention_reduction must be positive".into());
        }
        let f = 1usize << self.encoder_depth;
        if self.input_height == 0
            || self.input_width == 0
            || self.input_height % f != 0
            || self.input_width % f != 0
        {
            return fail(format!(
                "input {}x{} not divisible by 2^{}",
                self.input_height, self.input_width, self.encoder_depth
            ));
        }
        Ok(())
    }

    /// Channel width of encoder stage `i`; index `encoder_depth` is the bottleneck.
    pub fn stage_channels(&self, i: usize) -> usize {
        self.base_channels << i
    }

    /// `(C, H, W)` of the latent tensor for one sample.
    pub fn latent_shape(&self) -> [usize; 3] {
        [
            self.stage_channels(self.encoder_depth),
            self.input_height >> self.encoder_depth,
            self.input_width >> self.encoder_depth,
        ]
    }
}

/// Which parameters receive gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    All,
    /// Only the final 1×1 classification conv.
    HeadOnly,
    None,
}

/// Result of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput<T> {
    pub probs: Tensor<T>,
    pub latent: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct CoordDrUNet<T> {
    config: ModelConfig,
    encoders: Vec<EncoderBlock<T>>,
    bottleneck: Bottleneck<T>,
    decoders: Vec<DecoderBlock<T>>,
    head: Conv2d<T>,
    trainable: Trainable,
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> CoordDrUNet<T> {
    /// He-normal conv weights, zero biases, from a seeded generator.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let attention = config.use_attention.then_some(config.attention_reduction);
        let mut encoders = Vec::with_capacity(config.encoder_depth);
        let mut cin = config.in_channels;
        for i in 0..config.encoder_depth {
            let cout = config.stage_channels(i);
            encoders.push(EncoderBlock::new(cin, cout, config.use_residual, attention, &mut rng));
            cin = cout;
        }
        let rates = config
            .use_dilated_bottleneck
            .then_some(config.dilation_rates.as_slice());
        let bottleneck = Bottleneck::new(
            cin,
            config.stage_channels(config.encoder_depth),
            rates,
            &mut rng,
        );
        let mut decoders = Vec::with_capacity(config.encoder_depth);
        for i in (0..config.encoder_depth).rev() {
            decoders.push(DecoderBlock::new(
                config.stage_channels(i + 1),
                config.stage_channels(i),
                &mut rng,
            ));
        }
        let head = Conv2d::new(config.base_channels, config.num_classes, 1, 1, &mut rng);
        Ok(Self {
            config,
            encoders,
            bottleneck,
            decoders,
            head,
            trainable: Trainable::All,
            cache: None,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn trainable(&self) -> Trainable {
        self.trainable
    }

    pub fn set_trainable(&mut self, t: Trainable) {
        self.trainable = t;
        let head_weight = self.head.weight.value.as_ptr();
        let head_bias = self.head.bias.value.as_ptr();
        self.visit_params(|_, p| {
            let is_head =
                std::ptr::eq(p.value.as_ptr(), head_weight) || std::ptr::eq(p.value.as_ptr(), head_bias);
            p.trainable = match t {
                Trainable::All => true,
                Trainable::HeadOnly => is_head,
                Trainable::None => false,
            };
        });
    }

    pub fn head_mut(&mut self) -> &mut Conv2d<T> {
        &mut self.head
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let [_, c, h, w] = x.shape();
        if c != self.config.in_channels {
            return Err(Error::Shape(format!(
                "model expects {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        if h != self.config.input_height || w != self.config.input_width {
            return Err(Error::Shape(format!(
                "model expects {}x{} input, got {h}x{w}",
                self.config.input_height, self.config.input_width
            )));
        }
        Ok(())
    }

    fn encode(&mut self, x: &Tensor<T>, mode: Mode) -> (Vec<Tensor<T>>, Tensor<T>) {
        let mut skips = Vec::with_capacity(self.encoders.len());
        let mut h = x.clone();
        for enc in &mut self.encoders {
            let (skip, pooled) = enc.forward(&h, mode);
            skips.push(skip);
            h = pooled;
        }
        let latent = self.bottleneck.forward(&h, mode);
        (skips, latent)
    }

    /// Full pass returning class probabilities and the bottleneck latent.
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<ForwardOutput<T>> {
        self.check_input(x)?;
        let (skips, latent) = self.encode(x, mode);
        let mut h = latent.clone();
        for (dec, skip) in self.decoders.iter_mut().zip(skips.iter().rev()) {
            h = dec.forward(&h, skip, mode);
        }
        let logits = self.head.forward(&h);
        let probs = softmax_channels(&logits);
        self.cache = Some(probs.clone());
        Ok(ForwardOutput { probs, latent })
    }

    /// Encoder and bottleneck only.
    pub fn encode_latent(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        self.check_input(x)?;
        Ok(self.encode(x, mode).1)
    }

    /// Backpropagate from the probability map (and optionally from an extra
    /// loss term on the latent) into parameter gradients.
    pub fn backward(&mut self, grad_probs: &Tensor<T>, grad_latent: Option<&Tensor<T>>) {
        let probs = self.cache.take().expect("model backward before forward");
        let g_logits = softmax_channels_backward(&probs, grad_probs);
        self.cache = Some(probs);
        let mut g = self.head.backward(&g_logits);
        match self.trainable {
            Trainable::HeadOnly | Trainable::None => return,
            Trainable::All => {}
        }
        let mut g_skips = Vec::with_capacity(self.decoders.len());
        for dec in self.decoders.iter_mut().rev() {
            let (gi, gs) = dec.backward(&g);
            g_skips.push(gs);
            g = gi;
        }
        if let Some(gl) = grad_latent {
            g.add_assign(gl);
        }
        let mut g = self.bottleneck.backward(&g);
        // g_skips is ordered shallow → deep after the reversed decoder walk
        for (enc, gs) in self.encoders.iter_mut().zip(g_skips.iter()).rev() {
            g = enc.backward(gs, &g);
        }
    }

    pub fn zero_grad(&mut self) {
        self.visit_params(|_, p| p.zero_grad());
    }

    pub fn visit_params(&mut self, f: impl FnMut(&str, &mut Param<T>)) {
        self.visit("", &mut ParamFn(f));
    }

    pub fn num_params(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(|_, p| n += p.len());
        n
    }

    /// Flat copy of every parameter and buffer in visit order.
    pub fn state(&mut self) -> Vec<(String, Vec<T>)> {
        struct Collect<T>(Vec<(String, Vec<T>)>);
        impl<T: Scalar> Visitor<T> for Collect<T> {
            fn param(&mut self, name: &str, p: &mut Param<T>) {
                self.0.push((name.to_string(), p.value.clone()));
            }
            fn buffer(&mut self, name: &str, b: &mut [T]) {
                self.0.push((name.to_string(), b.to_vec()));
            }
        }
        let mut c = Collect(Vec::new());
        self.visit("", &mut c);
        c.0
    }

    /// Overwrite parameters and buffers from a [`CoordDrUNet::state`]-shaped list.
    pub fn load_state(&mut self, state: &[(String, Vec<T>)]) -> Result<()> {
        struct Load<'a, T> {
            src: std::slice::Iter<'a, (String, Vec<T>)>,
            err: Option<String>,
        }
        impl<T: Scalar> Load<'_, T> {
            fn take(&mut self, name: &str, dst: &mut [T]) {
                if self.err.is_some() {
                    return;
                }
                match self.src.next() {
                    Some((n, v)) if n == name && v.len() == dst.len() => dst.copy_from_slice(v),
                    Some((n, v)) => {
                        self.err = Some(format!(
                            "expected {name} ({} values), found {n} ({} values)",
                            dst.len(),
                            v.len()
                        ))
                    }
                    None => self.err = Some(format!("missing tensor {name}")),
                }
            }
        }
        impl<T: Scalar> Visitor<T> for Load<'_, T> {
            fn param(&mut self, name: &str, p: &mut Param<T>) {
                self.take(name, &mut p.value);
            }
            fn buffer(&mut self, name: &str, b: &mut [T]) {
                self.take(name, b);
            }
        }
        let mut l = Load {
            src: state.iter(),
            err: None,
        };
        self.visit("", &mut l);
        if let Some(e) = l.err {
            return Err(Error::Checkpoint(e));
        }
        if l.src.next().is_some() {
            return Err(Error::Checkpoint("state has extra tensors".into()));
        }
        Ok(())
    }

    /// Copy into another element type (e.g. `f32` weights into an `f64` model).
    pub fn cast<U: Scalar>(&mut self) -> CoordDrUNet<U> {
        let mut other = CoordDrUNet::<U>::new(self.config.clone(), 0).expect("validated config");
        let state: Vec<(String, Vec<U>)> = self
            .state()
            .into_iter()
            .map(|(n, v)| (n, v.into_iter().map(|x| U::of(x.as_f64())).collect()))
            .collect();
        other.load_state(&state).expect("same architecture");
        other.set_trainable(self.trainable);
        other
    }
}

impl<T: Scalar> Module<T> for CoordDrUNet<T> {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor<T>) {
        for (i, e) in self.encoders.iter_mut().enumerate() {
            e.visit(&join(prefix, &format!("enc{i}")), v);
        }
        self.bottleneck.visit(&join(prefix, "bottleneck"), v);
        for (i, d) in self.decoders.iter_mut().enumerate() {
            d.visit(&join(prefix, &format!("dec{i}")), v);
        }
        self.head.visit(&join(prefix, "head"), v);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            base_channels: 4,
            encoder_depth: 2,
            input_height: 16,
            input_width: 16,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn validation_rejects_bad_configs() {
        assert!(ModelConfig::default().validate().is_ok());
        let even = ModelConfig { in_channels: 2, ..tiny() };
        assert!(even.validate().is_err());
        let rates = ModelConfig { dilation_rates: vec![1, 4, 2], ..tiny() };
        assert!(rates.validate().is_err());
        let odd_size = ModelConfig { input_height: 18, ..tiny() };
        assert!(odd_size.validate().is_err());
        let one_class = ModelConfig { num_classes: 1, ..tiny() };
        assert!(one_class.validate().is_err());
    }

    #[test]
    fn default_latent_shape() {
        assert_eq!(ModelConfig::default().latent_shape(), [512, 8, 10]);
    }

    #[test]
    fn rejects_wrong_input() {
        let mut m = CoordDrUNet::<f32>::new(tiny(), 0).unwrap();
        assert!(m.forward(&Tensor::zeros([1, 1, 16, 16]), Mode::Eval).is_err());
        assert!(m.forward(&Tensor::zeros([1, 3, 16, 8]), Mode::Eval).is_err());
    }

    #[test]
    fn state_round_trip() {
        let mut a = CoordDrUNet::<f32>::new(tiny(), 1).unwrap();
        let mut b = CoordDrUNet::<f32>::new(tiny(), 2).unwrap();
        b.load_state(&a.state()).unwrap();
        assert_eq!(a.state(), b.state());
    }

    #[test]
    fn head_only_marks_two_tensors_trainable() {
        let mut m = CoordDrUNet::<f32>::new(tiny(), 0).unwrap();
        m.set_trainable(Trainable::HeadOnly);
        let mut names = Vec::new();
        m.visit_params(|n, p| {
            if p.trainable {
                names.push(n.to_string())
            }
        });
        assert_eq!(names, vec!["head.weight", "head.bias"]);
    }
}
