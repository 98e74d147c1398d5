//! Multi-head attention: the shared scaled-dot core, a dense-QKV layer and the
//! hybrid tensor-train (HTT) layer whose QKV projection concatenates a dense part
//! and a TT part.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::nn::{Builder, Linear};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tt::{balanced_factors, tt_linear_forward, TtCores, TtShape};

/// Scaled dot-product attention over `q, k, v: [B, n, width]` split into `heads`
/// heads of width `width / heads`; softmax temperature is `sqrt(width / heads)`.
///
/// `logit_shift` adds a constant to every logit; softmax is invariant to it, which
/// the tests use as a check.
pub fn scaled_dot_attention<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    logit_shift: Option<T>,
) -> Result<Var> {
    let shape = tape.shape(q).to_vec();
    let [b, n, width] = shape[..] else {
        bail!(Dimension, "attention expects [B, n, width], got {:?}", shape);
    };
    if heads == 0 || width % heads != 0 {
        bail!(Config, "width {width} is not divisible by {heads} heads");
    }
    let dh = width / heads;
    let split = |tape: &mut Tape<T>, t: Var| -> Result<Var> {
        if heads == 1 {
            return Ok(t);
        }
        let r = tape.reshape(t, &[b, n, heads, dh])?;
        let p = tape.permute(r, &[0, 2, 1, 3])?;
        tape.reshape(p, &[b * heads, n, dh])
    };
    let (qh, kh, vh) = (split(tape, q)?, split(tape, k)?, split(tape, v)?);
    let logits = tape.bmm_nt(qh, kh)?;
    let mut logits = tape.mul_const(logits, T::one() / T::from_usize_lossy(dh).sqrt());
    if let Some(c) = logit_shift {
        logits = tape.add_const(logits, c);
    }
    let probs = tape.softmax_lastdim(logits);
    let out = tape.bmm(probs, vh)?;
    if heads == 1 {
        return Ok(out);
    }
    let r = tape.reshape(out, &[b, heads, n, dh])?;
    let p = tape.permute(r, &[0, 2, 1, 3])?;
    tape.reshape(p, &[b, n, width])
}

/// Runs attention on `[L, d]` projections and applies the output projection.
fn attend_and_project<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    (q, k, v): (Var, Var, Var),
    heads: usize,
    w_out: &Linear,
    logit_shift: Option<T>,
) -> Result<Var> {
    let [l, d] = tape.shape(q)[..] else {
        bail!(Dimension, "expected [L, d] projections");
    };
    let q3 = tape.reshape(q, &[1, l, d])?;
    let k3 = tape.reshape(k, &[1, l, d])?;
    let v3 = tape.reshape(v, &[1, l, d])?;
    let o = scaled_dot_attention(tape, q3, k3, v3, heads, logit_shift)?;
    let o = tape.reshape(o, &[l, d])?;
    w_out.forward(tape, store, o)
}

/// Splits `[L, 3w]` into three `[L, w]` blocks.
fn split3<T: Scalar>(tape: &mut Tape<T>, x: Var, w: usize) -> Result<(Var, Var, Var)> {
    Ok((
        tape.narrow(x, 1, 0, w)?,
        tape.narrow(x, 1, w, w)?,
        tape.narrow(x, 1, 2 * w, w)?,
    ))
}

/// Standard attention with a single dense `d × 3d` QKV projection (no bias).
#[derive(Clone, Debug)]
pub struct DenseAttention {
    pub qkv: Linear,
    pub out: Linear,
    pub d: usize,
    pub heads: usize,
}

impl DenseAttention {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        b: &mut Builder<'_, T, R>,
        d: usize,
        heads: usize,
        zero_out: bool,
    ) -> Self {
        Self {
            qkv: Linear::new(b, "w_qkv", d, 3 * d, false, false),
            out: Linear::new(b, "w_out", d, d, false, zero_out),
            d,
            heads,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        self.forward_shifted(tape, store, x, None)
    }

    pub fn forward_shifted<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        logit_shift: Option<T>,
    ) -> Result<Var> {
        let qkv = self.qkv.forward(tape, store, x)?;
        let parts = split3(tape, qkv, self.d)?;
        attend_and_project(tape, store, parts, self.heads, &self.out, logit_shift)
    }
}

/// Resolved dense/TT split of the QKV projection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HttSplit {
    pub d: usize,
    /// Width of each of q₁, k₁, v₁ (the dense share).
    pub dense_width: usize,
    /// Width of each of q₂, k₂, v₂ (the TT share).
    pub tt_width: usize,
    pub requested_alpha: f64,
    pub effective_alpha: f64,
    /// TT geometry mapping `d → 3·tt_width`, absent when `tt_width == 0`.
    pub tt: Option<TtShape>,
}

impl HttSplit {
    /// Rounds `alpha·d` to an integer dense width, then moves the split by the
    /// fewest columns needed for `3·(d − dense_width)` to factor into `cores`
    /// factors that are all ≥ 2 (when any such split exists).
    pub fn resolve(d: usize, alpha: f64, cores: usize, rank: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) || alpha.is_nan() {
            bail!(Config, "alpha = {alpha} must lie in [0, 1]");
        }
        if d == 0 || cores == 0 || rank == 0 {
            bail!(Config, "d, TT cores and TT rank must be positive");
        }
        let nominal = (alpha * d as f64).round() as usize;
        let mk = |dense: usize, tt: Option<TtShape>| Self {
            d,
            dense_width: dense,
            tt_width: d - dense,
            requested_alpha: alpha,
            effective_alpha: dense as f64 / d as f64,
            tt,
        };
        if nominal == d {
            return Ok(mk(d, None));
        }
        let in_factors = balanced_factors(d, cores, 2)
            .or_else(|| balanced_factors(d, cores, 1))
            .expect("factorization with unit factors always exists");
        let admissible = |dense: usize| -> Option<Vec<usize>> {
            if dense >= d {
                return None;
            }
            balanced_factors(3 * (d - dense), cores, 2)
        };
        let mut chosen = None;
        // the pure-TT endpoint never acquires a dense share
        let search = if nominal == 0 { 0 } else { d };
        if nominal == 0 {
            chosen = admissible(0).map(|f| (0, f));
        }
        for delta in 0..search {
            let below = nominal.checked_sub(delta);
            let above = nominal + delta;
            let cands = [below, Some(above)];
            for dense in cands.into_iter().flatten().filter(|&v| v > 0) {
                if let Some(f) = admissible(dense) {
                    chosen = Some((dense, f));
                    break;
                }
            }
            if chosen.is_some() {
                break;
            }
        }
        let (dense, out_factors) = match chosen {
            Some(c) => c,
            None => (
                nominal,
                balanced_factors(3 * (d - nominal), cores, 1).expect("unit factors"),
            ),
        };
        let shape = TtShape::new(in_factors, out_factors, rank)?;
        Ok(mk(dense, Some(shape)))
    }

    pub fn dense_params(&self) -> usize {
        self.d * 3 * self.dense_width
    }

    pub fn tt_params(&self) -> usize {
        self.tt.as_ref().map_or(0, |s| s.param_count())
    }
}

/// Hybrid tensor-train attention.
#[derive(Clone, Debug)]
pub struct HttAttention {
    pub split: HttSplit,
    pub dense: Option<Linear>,
    pub tt_cores: Vec<ParamId>,
    pub out: Linear,
    pub heads: usize,
}

impl HttAttention {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        b: &mut Builder<'_, T, R>,
        split: HttSplit,
        heads: usize,
        zero_out: bool,
    ) -> Self {
        let d = split.d;
        let dense = (split.dense_width > 0)
            .then(|| Linear::new(b, "w_dense", d, 3 * split.dense_width, false, false));
        let tt_cores = match &split.tt {
            Some(shape) => {
                let cores = TtCores::<T>::random(shape.clone(), b.rng);
                cores
                    .cores
                    .into_iter()
                    .enumerate()
                    .map(|(i, c)| b.tensor(&format!("tt_core{i}"), c))
                    .collect()
            }
            None => Vec::new(),
        };
        Self {
            out: Linear::new(b, "w_out", d, d, false, zero_out),
            split,
            dense,
            tt_cores,
            heads,
        }
    }

    /// q, k, v of width `d` each, formed by concatenating dense and TT shares.
    pub fn qkv<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<(Var, Var, Var)> {
        let dense = match &self.dense {
            Some(lin) => {
                let y = lin.forward(tape, store, x)?;
                Some(split3(tape, y, self.split.dense_width)?)
            }
            None => None,
        };
        let tt = match &self.split.tt {
            Some(shape) => {
                let cores: Vec<Var> = self.tt_cores.iter().map(|&c| tape.param(store, c)).collect();
                let y = tt_linear_forward(tape, x, &cores, shape)?;
                Some(split3(tape, y, self.split.tt_width)?)
            }
            None => None,
        };
        match (dense, tt) {
            (Some(a), None) | (None, Some(a)) => Ok(a),
            (Some((q1, k1, v1)), Some((q2, k2, v2))) => Ok((
                tape.concat(&[q1, q2], 1)?,
                tape.concat(&[k1, k2], 1)?,
                tape.concat(&[v1, v2], 1)?,
            )),
            (None, None) => bail!(Config, "HTT attention has neither dense nor TT projection"),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        self.forward_shifted(tape, store, x, None)
    }

    pub fn forward_shifted<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        logit_shift: Option<T>,
    ) -> Result<Var> {
        let parts = self.qkv(tape, store, x)?;
        attend_and_project(tape, store, parts, self.heads, &self.out, logit_shift)
    }

    /// Parameters of the QKV projection only (`|W_dense| + TT`).
    pub fn projection_params<T: Scalar>(&self, store: &ParamStore<T>) -> usize {
        let dense = self.dense.as_ref().map_or(0, |l| store.value(l.weight).numel());
        let tt: usize = self.tt_cores.iter().map(|&c| store.value(c).numel()).sum();
        dense + tt
    }
}

/// Asymptotic cost estimates for an HTT projection of an `N × N` matrix:
/// time `αN² + D·(max[αN, (1−α)N])^{1+1/D}·R²` and
/// space `αN² + D·(1−α)^{1/D}·N^{2/D}·R²`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct HttComplexity {
    pub time: f64,
    pub space: f64,
}

pub fn htt_complexity(alpha: f64, n: f64, cores: f64, rank: f64) -> Result<HttComplexity> {
    if !(0.0..=1.0).contains(&alpha) {
        bail!(Config, "alpha = {alpha} must lie in [0, 1]");
    }
    if n <= 0.0 || cores <= 0.0 || rank <= 0.0 {
        bail!(Config, "N, D and R must be positive");
    }
    let big = (alpha * n).max((1.0 - alpha) * n);
    // no TT share at alpha = 1, so the TT term drops out (dense limit N²)
    let tt_time = if alpha < 1.0 {
        cores * big.powf(1.0 + 1.0 / cores) * rank * rank
    } else {
        0.0
    };
    let time = alpha * n * n + tt_time;
    let space = alpha * n * n + cores * (1.0 - alpha).powf(1.0 / cores) * n.powf(2.0 / cores) * rank * rank;
    Ok(HttComplexity { time, space })
}
