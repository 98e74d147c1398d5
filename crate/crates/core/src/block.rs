//! Pre-norm transformer blocks: the Hypoformer block (HTT attention + LMF FFN)
//! and the plain ViT block (dense QKV attention + dense FFN).
//!
//! Both compute `y = x + attn(ln1(x))` followed by `y + ffn(ln2(y))`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{DenseAttention, HttAttention, HttSplit};
use crate::error::Result;
use crate::ffn::{DenseFfn, LmfFfn};
use crate::nn::{Builder, LayerNorm};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    #[default]
    Hypoformer,
    Vit,
}

/// Width and factorization settings shared by every block of a stack.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockDims {
    pub d: usize,
    pub heads: usize,
    pub d_hidden: usize,
    pub lmf_rank: usize,
    pub split: HttSplit,
}

#[derive(Clone, Debug)]
pub enum Attn {
    Htt(HttAttention),
    Dense(DenseAttention),
}

#[derive(Clone, Debug)]
pub enum Ffn {
    Lmf(LmfFfn),
    Dense(DenseFfn),
}

#[derive(Clone, Debug)]
pub struct Block {
    pub kind: BlockKind,
    pub ln1: LayerNorm,
    pub attn: Attn,
    pub ln2: LayerNorm,
    pub ffn: Ffn,
}

impl Block {
    /// With `zero_out`, the attention output projection and the last FFN factor
    /// start at zero, so the freshly built block is the identity map.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        b: &mut Builder<'_, T, R>,
        kind: BlockKind,
        dims: &BlockDims,
        zero_out: bool,
    ) -> Self {
        let d = dims.d;
        let ln1 = LayerNorm::new(&mut b.sub("ln1"), d);
        let attn = match kind {
            BlockKind::Hypoformer => Attn::Htt(HttAttention::new(
                &mut b.sub("attn"),
                dims.split.clone(),
                dims.heads,
                zero_out,
            )),
            BlockKind::Vit => Attn::Dense(DenseAttention::new(&mut b.sub("attn"), d, dims.heads, zero_out)),
        };
        let ln2 = LayerNorm::new(&mut b.sub("ln2"), d);
        let ffn = match kind {
            BlockKind::Hypoformer => Ffn::Lmf(LmfFfn::new(
                &mut b.sub("ffn"),
                d,
                dims.d_hidden,
                dims.lmf_rank,
                zero_out,
            )),
            BlockKind::Vit => Ffn::Dense(DenseFfn::new(&mut b.sub("ffn"), d, dims.d_hidden, zero_out)),
        };
        Self {
            kind,
            ln1,
            attn,
            ln2,
            ffn,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.ln1.forward(tape, store, x)?;
        let a = match &self.attn {
            Attn::Htt(m) => m.forward(tape, store, h)?,
            Attn::Dense(m) => m.forward(tape, store, h)?,
        };
        let y = tape.add(x, a)?;
        let h = self.ln2.forward(tape, store, y)?;
        let f = match &self.ffn {
            Ffn::Lmf(m) => m.forward(tape, store, h)?,
            Ffn::Dense(m) => m.forward(tape, store, h)?,
        };
        tape.add(y, f)
    }
}

/// Runs `blocks` in order.
pub fn run_stack<T: Scalar>(
    blocks: &[Block],
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    mut x: Var,
) -> Result<Var> {
    for blk in blocks {
        x = blk.forward(tape, store, x)?;
    }
    Ok(x)
}
