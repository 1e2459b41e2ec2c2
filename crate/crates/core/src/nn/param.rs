use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::Scalar;

/// A trainable tensor together with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub value: Vec<T>,
    pub grad: Vec<T>,
    pub shape: Vec<usize>,
    /// Frozen parameters never accumulate gradient.
    pub trainable: bool,
}

impl<T: Scalar> Param<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            value: vec![T::zero(); len],
            grad: vec![T::zero(); len],
            shape: shape.to_vec(),
            trainable: true,
        }
    }

    pub fn filled(shape: &[usize], v: T) -> Self {
        let mut p = Self::zeros(shape);
        p.value.fill(v);
        p
    }

    /// He-normal initialisation, `std = sqrt(2 / fan_in)`.
    pub fn he_normal(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(shape);
        let std = (2.0 / fan_in as f64).sqrt();
        for v in &mut p.value {
            let z: f64 = StandardNormal.sample(rng);
            *v = T::of(z * std);
        }
        p
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }
}

/// Walks every parameter and persistent buffer of a module tree in a fixed order.
pub trait Visitor<T> {
    fn param(&mut self, name: &str, p: &mut Param<T>);
    /// Non-trainable state such as batch-norm running statistics.
    fn buffer(&mut self, name: &str, b: &mut [T]);
}

pub trait Module<T: Scalar> {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor<T>);
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Adapter turning a closure over parameters into a [`Visitor`].
pub struct ParamFn<F>(pub F);

impl<T, F: FnMut(&str, &mut Param<T>)> Visitor<T> for ParamFn<F> {
    fn param(&mut self, name: &str, p: &mut Param<T>) {
        (self.0)(name, p)
    }
    fn buffer(&mut self, _: &str, _: &mut [T]) {}
}
