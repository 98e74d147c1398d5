//! Parameter construction helpers and the small building blocks shared by layers.

use rand::Rng;

use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Registers parameters under a dotted name prefix, drawing initial values from `rng`.
pub struct Builder<'a, T, R: ?Sized> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut R,
    prefix: String,
}

impl<'a, T: Scalar, R: Rng + ?Sized> Builder<'a, T, R> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut R, prefix: impl Into<String>) -> Self {
        Self {
            store,
            rng,
            prefix: prefix.into(),
        }
    }

    /// Child builder with `name` appended to the prefix.
    pub fn sub(&mut self, name: &str) -> Builder<'_, T, R> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        Builder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn tensor(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        let n = self.full_name(name);
        self.store.add(n, value)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let v = Tensor::randn(shape.to_vec(), std, self.rng);
        self.tensor(name, v)
    }

    /// Normal with variance `1/fan_in`, where `fan_in = shape[0]`.
    pub fn fan_in(&mut self, name: &str, shape: &[usize]) -> ParamId {
        let std = 1.0 / (shape[0] as f64).sqrt();
        self.normal(name, shape, std)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.tensor(name, Tensor::zeros(shape.to_vec()))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.tensor(name, Tensor::ones(shape.to_vec()))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub const DEFAULT_EPS: f64 = 1e-5;

    pub fn new<T: Scalar, R: Rng + ?Sized>(b: &mut Builder<'_, T, R>, d: usize) -> Self {
        Self {
            gamma: b.ones("gamma", &[d]),
            beta: b.zeros("beta", &[d]),
            eps: Self::DEFAULT_EPS,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layernorm(x, g, b, T::lit(self.eps))
    }
}

/// `x[L, in] · W[in, out] (+ b)`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        b: &mut Builder<'_, T, R>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        zero: bool,
    ) -> Self {
        let weight = if zero {
            b.zeros(name, &[fan_in, fan_out])
        } else {
            b.fan_in(name, &[fan_in, fan_out])
        };
        let bias = bias.then(|| b.zeros(&format!("{name}_bias"), &[fan_out]));
        Self { weight, bias }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(bid) => {
                let bv = tape.param(store, bid);
                tape.add_bias(y, bv)
            }
            None => Ok(y),
        }
    }
}
