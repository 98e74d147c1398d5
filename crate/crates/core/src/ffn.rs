//! Feed-forward sub-layers: the low-rank factorized FFN and the dense two-layer FFN.

use rand::Rng;

use crate::error::Result;
use crate::nn::Builder;
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

/// `ReLU(x·U1·V1 + b1)·U2·V2 + b2`, evaluated as four matmuls so neither `U1·V1`
/// nor `U2·V2` is ever formed.
#[derive(Clone, Debug)]
pub struct LmfFfn {
    pub u1: ParamId,
    pub v1: ParamId,
    pub b1: ParamId,
    pub u2: ParamId,
    pub v2: ParamId,
    pub b2: ParamId,
    pub rank: usize,
}

impl LmfFfn {
    /// With `zero_out`, `V2` and `b2` start at zero so the layer outputs zero.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        b: &mut Builder<'_, T, R>,
        d: usize,
        d_hidden: usize,
        rank: usize,
        zero_out: bool,
    ) -> Self {
        let u1 = b.fan_in("u1", &[d, rank]);
        let v1 = b.fan_in("v1", &[rank, d_hidden]);
        let b1 = b.zeros("b1", &[d_hidden]);
        let u2 = b.fan_in("u2", &[d_hidden, rank]);
        let v2 = if zero_out {
            b.zeros("v2", &[rank, d])
        } else {
            b.fan_in("v2", &[rank, d])
        };
        let b2 = b.zeros("b2", &[d]);
        Self {
            u1,
            v1,
            b1,
            u2,
            v2,
            b2,
            rank,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let [u1, v1, b1, u2, v2, b2] =
            [self.u1, self.v1, self.b1, self.u2, self.v2, self.b2].map(|id| tape.param(store, id));
        let h = tape.matmul(x, u1)?;
        let h = tape.matmul(h, v1)?;
        let h = tape.add_bias(h, b1)?;
        let h = tape.relu(h);
        let h = tape.matmul(h, u2)?;
        let h = tape.matmul(h, v2)?;
        tape.add_bias(h, b2)
    }

    /// `R_f·(d + d_hidden)·2 + d_hidden + d`.
    pub fn param_count(d: usize, d_hidden: usize, rank: usize) -> usize {
        rank * (d + d_hidden) * 2 + d_hidden + d
    }
}

/// `ReLU(x·W1 + b1)·W2 + b2`.
#[derive(Clone, Debug)]
pub struct DenseFfn {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl DenseFfn {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        b: &mut Builder<'_, T, R>,
        d: usize,
        d_hidden: usize,
        zero_out: bool,
    ) -> Self {
        let w1 = b.fan_in("w1", &[d, d_hidden]);
        let b1 = b.zeros("b1", &[d_hidden]);
        let w2 = if zero_out {
            b.zeros("w2", &[d_hidden, d])
        } else {
            b.fan_in("w2", &[d_hidden, d])
        };
        let b2 = b.zeros("b2", &[d]);
        Self { w1, b1, w2, b2 }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let [w1, b1, w2, b2] = [self.w1, self.b1, self.w2, self.b2].map(|id| tape.param(store, id));
        let h = tape.matmul(x, w1)?;
        let h = tape.add_bias(h, b1)?;
        let h = tape.relu(h);
        let h = tape.matmul(h, w2)?;
        tape.add_bias(h, b2)
    }
}
