//! Reverse-mode differentiation over a per-step operation tape.
//!
//! A [`Tape`] records every differentiable operation in execution order, so the
//! recorded sequence is topological by construction. [`Tape::backward`] walks it
//! once in reverse. Tapes are meant to live for a single training step.

use std::collections::HashMap;

use crate::error::{bail, Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{kernels, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Bmm(Var, Var),
    BmmNt(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    ScaleBy(Var, Var),
    MulConst(Var, T),
    AddConst(Var),
    Relu(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    WeightedSse {
        pred: Var,
        target: Vec<T>,
        weights: Vec<T>,
    },
    Conv2d {
        x: Var,
        kernel: Var,
        bias: Var,
        padding: usize,
    },
    Upsample2x(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of executed operations and their saved intermediates.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Grads<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("grad shape"))
    }
}

/// Splits `shape` around `axis` into (outer, axis extent, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert!(value.all_finite(), "non-finite value produced by {op:?}");
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a leaf. Compute-path leaves must be finite.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Binds a parameter as a leaf; repeated calls within one tape share the leaf so
    /// that gradients from several uses accumulate.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.leaf(store.value(id).clone(), store.is_trainable(id));
        self.params.insert(id, v);
        v
    }

    pub fn bound_params(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.params.iter().map(|(&p, &v)| (p, v))
    }

    // ----- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out = self.value(a).matmul(self.value(b)).map_err(|_| {
            Error::Dimension(format!("matmul of {:?} and {:?}", sa, sb))
        })?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// Batched product `[B,m,k]·[B,k,n] -> [B,m,n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (bs, m, k, n) = match (sa.as_slice(), sb.as_slice()) {
            ([b1, m, k], [b2, k2, n]) if b1 == b2 && k == k2 => (*b1, *m, *k, *n),
            _ => bail!(Dimension, "bmm of {:?} and {:?}", sa, sb),
        };
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); bs * m * n];
        for i in 0..bs {
            kernels::matmul(
                &av[i * m * k..(i + 1) * m * k],
                &bv[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new([bs, m, n], out)?, Op::Bmm(a, b), rg))
    }

    /// Batched product with the second operand transposed: `[B,m,k]·[B,n,k]ᵀ -> [B,m,n]`.
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (bs, m, k, n) = match (sa.as_slice(), sb.as_slice()) {
            ([b1, m, k], [b2, n, k2]) if b1 == b2 && k == k2 => (*b1, *m, *k, *n),
            _ => bail!(Dimension, "bmm_nt of {:?} and {:?}", sa, sb),
        };
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); bs * m * n];
        for i in 0..bs {
            kernels::matmul_nt(
                &av[i * m * k..(i + 1) * m * k],
                &bv[i * n * k..(i + 1) * n * k],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new([bs, m, n], out)?, Op::BmmNt(a, b), rg))
    }

    // ----- element-wise -----------------------------------------------------

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            bail!(
                Dimension,
                "{what} of {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            );
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = Tensor::new(
            self.shape(a).to_vec(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(&x, &y)| x + y)
                .collect(),
        )?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = Tensor::new(
            self.shape(a).to_vec(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(&x, &y)| x * y)
                .collect(),
        )?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Adds `bias[n]` to every last-axis slice of `x[..., n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.value(x).last_dim();
        if self.shape(bias) != [n] {
            bail!(
                Dimension,
                "bias {:?} does not match last extent of {:?}",
                self.shape(bias),
                self.shape(x)
            );
        }
        let b = self.value(bias).data();
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(&v, &bb)| v + bb))
            .collect();
        let out = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(out, Op::AddBias(x, bias), rg))
    }

    /// Multiplies every element of `x` by the single element of `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            bail!(Dimension, "scale_by expects a one-element scale, got {:?}", self.shape(s));
        }
        let sv = self.value(s).item();
        let out = self.value(x).map(|v| v * sv);
        let rg = self.rg(&[x, s]);
        Ok(self.push(out, Op::ScaleBy(x, s), rg))
    }

    pub fn mul_const(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v * c);
        let rg = self.rg(&[x]);
        self.push(out, Op::MulConst(x, c), rg)
    }

    pub fn add_const(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v + c);
        let rg = self.rg(&[x]);
        self.push(out, Op::AddConst(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        let rg = self.rg(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let (c, a, half) = (T::lit(GELU_C), T::lit(GELU_A), T::lit(0.5));
        let out = self
            .value(x)
            .map(|v| half * v * (T::one() + (c * (v + a * v * v * v)).tanh()));
        let rg = self.rg(&[x]);
        self.push(out, Op::Gelu(x), rg)
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax_lastdim(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.last_dim();
        let mut out = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks(n) {
            let m = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let start = out.len();
            let mut s = T::zero();
            for &v in row {
                let e = (v - m).exp();
                s += e;
                out.push(e);
            }
            for o in &mut out[start..] {
                *o /= s;
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(out, Op::Softmax(x), rg)
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            bail!(
                Dimension,
                "layernorm affine {:?}/{:?} vs input {:?}",
                self.shape(gamma),
                self.shape(beta),
                self.shape(x)
            );
        }
        let dt = T::from_usize_lossy(d);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let xv = self.value(x);
        let rows = xv.numel() / d;
        let mut xhat = Vec::with_capacity(xv.numel());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks(d) {
            let mut mean = T::zero();
            for &v in row {
                mean += v;
            }
            mean /= dt;
            let mut var = T::zero();
            for &v in row {
                var += (v - mean) * (v - mean);
            }
            var /= dt;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    // ----- layout -----------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshaped(shape.to_vec()).map_err(|_| {
            Error::Dimension(format!("cannot reshape {:?} into {:?}", self.shape(x), shape))
        })?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            bail!(Dimension, "invalid permutation {:?} for shape {:?}", axes, shape);
        }
        let mut data = Vec::new();
        kernels::permute(self.value(x).data(), &shape, axes, &mut data);
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let out = Tensor::new(out_shape, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Permute(x, axes.to_vec()), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.permute(x, &[1, 0])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            bail!(Dimension, "concat of zero tensors");
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            bail!(Dimension, "concat axis {axis} out of range for {:?}", base);
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                bail!(Dimension, "concat along {axis}: {:?} vs {:?}", s, base);
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let s = self.shape(v);
                let chunk = s[axis] * inner;
                data.extend_from_slice(&self.value(v).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::new(shape, data)?;
        let rg = self.rg(inputs);
        Ok(self.push(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            bail!(
                Dimension,
                "narrow axis {axis} [{start}, {}) out of range for {:?}",
                start + len,
                shape
            );
        }
        let (outer, ext, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * ext * inner + start * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let out = Tensor::new(out_shape, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Narrow { x, axis, start }, rg))
    }

    /// Selects rows (first-axis slices) by index; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if idx.is_empty() {
            bail!(Dimension, "gather_rows with no indices");
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= shape[0]) {
            bail!(Dimension, "row {bad} out of range for {:?}", shape);
        }
        let inner: usize = shape[1..].iter().product();
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(idx.len() * inner);
        for &i in idx {
            data.extend_from_slice(&src[i * inner..(i + 1) * inner]);
        }
        let mut out_shape = shape;
        out_shape[0] = idx.len();
        let out = Tensor::new(out_shape, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            out,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    // ----- reductions and losses -------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.sum() / T::from_usize_lossy(v.numel());
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// `Σ w·(pred − target)²` over elements with `w ≠ 0`.
    ///
    /// Elements with zero weight are skipped entirely, so their target (and
    /// prediction) values may be anything, including NaN.
    pub fn weighted_sse(&mut self, pred: Var, target: &Tensor<T>, weights: &Tensor<T>) -> Result<Var> {
        if self.shape(pred) != target.shape() || target.shape() != weights.shape() {
            bail!(
                Dimension,
                "weighted_sse shapes: pred {:?}, target {:?}, weights {:?}",
                self.shape(pred),
                target.shape(),
                weights.shape()
            );
        }
        let mut acc = T::zero();
        for ((&p, &t), &w) in self
            .value(pred)
            .data()
            .iter()
            .zip(target.data())
            .zip(weights.data())
        {
            if w != T::zero() {
                acc += w * (p - t) * (p - t);
            }
        }
        let rg = self.rg(&[pred]);
        Ok(self.push(
            Tensor::scalar(acc),
            Op::WeightedSse {
                pred,
                target: target.data().to_vec(),
                weights: weights.data().to_vec(),
            },
            rg,
        ))
    }

    /// Mean squared error over elements where `mask` is 1.
    pub fn mse(&mut self, pred: Var, target: &Tensor<T>, mask: &Tensor<T>) -> Result<Var> {
        let count = mask.data().iter().filter(|&&m| m != T::zero()).count();
        if count == 0 {
            return Err(Error::EmptyMask);
        }
        let inv = T::one() / T::from_usize_lossy(count);
        let weights = mask.map(|m| if m != T::zero() { inv } else { T::zero() });
        self.weighted_sse(pred, target, &weights)
    }

    // ----- spatial ----------------------------------------------------------

    /// Stride-1 cross-correlation of `x[C_in,H,W]` with `kernel[C_out,C_in,kh,kw]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Var, padding: usize) -> Result<Var> {
        let (xs, ks, bs) = (
            self.shape(x).to_vec(),
            self.shape(kernel).to_vec(),
            self.shape(bias).to_vec(),
        );
        let (ci, h, w, co, kh, kw) = match (xs.as_slice(), ks.as_slice()) {
            ([ci, h, w], [co, ci2, kh, kw]) if ci == ci2 => (*ci, *h, *w, *co, *kh, *kw),
            _ => bail!(Dimension, "conv2d input {:?} with kernel {:?}", xs, ks),
        };
        if bs != [co] {
            bail!(Dimension, "conv2d bias {:?} for {co} output channels", bs);
        }
        if kh > h + 2 * padding || kw > w + 2 * padding {
            bail!(
                Dimension,
                "conv2d kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * padding,
                w + 2 * padding
            );
        }
        let (oh, ow) = (h + 2 * padding - kh + 1, w + 2 * padding - kw + 1);
        let (xv, kv, bv) = (
            self.value(x).data(),
            self.value(kernel).data(),
            self.value(bias).data(),
        );
        let mut out = vec![T::zero(); co * oh * ow];
        for o in 0..co {
            let plane = &mut out[o * oh * ow..(o + 1) * oh * ow];
            plane.iter_mut().for_each(|v| *v = bv[o]);
            for c in 0..ci {
                let xin = &xv[c * h * w..(c + 1) * h * w];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let kval = kv[((o * ci + c) * kh + ky) * kw + kx];
                        conv_tap(xin, plane, h, w, oh, ow, ky, kx, padding, kval);
                    }
                }
            }
        }
        let out = Tensor::new([co, oh, ow], out)?;
        let rg = self.rg(&[x, kernel, bias]);
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                kernel,
                bias,
                padding,
            },
            rg,
        ))
    }

    /// Nearest-neighbour 2x upsampling of `x[C,H,W]`.
    pub fn upsample_nearest2x(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = match self.shape(x) {
            [c, h, w] => (*c, *h, *w),
            s => bail!(Dimension, "upsample expects [C,H,W], got {:?}", s),
        };
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(c * 4 * h * w);
        for ch in 0..c {
            for y in 0..2 * h {
                let row = &xv[(ch * h + y / 2) * w..(ch * h + y / 2 + 1) * w];
                for &v in row {
                    out.push(v);
                    out.push(v);
                }
            }
        }
        let out = Tensor::new([c, 2 * h, 2 * w], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Upsample2x(x), rg))
    }

    // ----- backward ---------------------------------------------------------

    /// Reverse sweep from a one-element root.
    pub fn backward(&self, root: Var) -> Result<Grads<T>> {
        if self.value(root).numel() != 1 {
            bail!(
                Contract,
                "backward requires a scalar root, got shape {:?}",
                self.shape(root)
            );
        }
        let n = root.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![T::one()]);
        for i in (0..n).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Grads {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let nn = self.shape(b)[1];
                if self.wants(a) {
                    let mut ga = vec![T::zero(); m * k];
                    kernels::matmul_nt(g, self.value(b).data(), &mut ga, m, nn, k);
                    accumulate(grads, a, ga);
                }
                if self.wants(b) {
                    let mut gb = vec![T::zero(); k * nn];
                    kernels::matmul_tn(self.value(a).data(), g, &mut gb, m, k, nn);
                    accumulate(grads, b, gb);
                }
            }
            &Op::Bmm(a, b) => {
                let (bs, m, k) = dims3(self.shape(a));
                let nn = self.shape(b)[2];
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                if self.wants(a) {
                    let mut ga = vec![T::zero(); bs * m * k];
                    for t in 0..bs {
                        kernels::matmul_nt(
                            &g[t * m * nn..(t + 1) * m * nn],
                            &bv[t * k * nn..(t + 1) * k * nn],
                            &mut ga[t * m * k..(t + 1) * m * k],
                            m,
                            nn,
                            k,
                        );
                    }
                    accumulate(grads, a, ga);
                }
                if self.wants(b) {
                    let mut gb = vec![T::zero(); bs * k * nn];
                    for t in 0..bs {
                        kernels::matmul_tn(
                            &av[t * m * k..(t + 1) * m * k],
                            &g[t * m * nn..(t + 1) * m * nn],
                            &mut gb[t * k * nn..(t + 1) * k * nn],
                            m,
                            k,
                            nn,
                        );
                    }
                    accumulate(grads, b, gb);
                }
            }
            &Op::BmmNt(a, b) => {
                // out[m,n] = a[m,k] b[n,k]^T
                let (bs, m, k) = dims3(self.shape(a));
                let nn = self.shape(b)[1];
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                if self.wants(a) {
                    let mut ga = vec![T::zero(); bs * m * k];
                    for t in 0..bs {
                        kernels::matmul(
                            &g[t * m * nn..(t + 1) * m * nn],
                            &bv[t * nn * k..(t + 1) * nn * k],
                            &mut ga[t * m * k..(t + 1) * m * k],
                            m,
                            nn,
                            k,
                        );
                    }
                    accumulate(grads, a, ga);
                }
                if self.wants(b) {
                    let mut gb = vec![T::zero(); bs * nn * k];
                    for t in 0..bs {
                        kernels::matmul_tn(
                            &g[t * m * nn..(t + 1) * m * nn],
                            &av[t * m * k..(t + 1) * m * k],
                            &mut gb[t * nn * k..(t + 1) * nn * k],
                            m,
                            nn,
                            k,
                        );
                    }
                    accumulate(grads, b, gb);
                }
            }
            &Op::Add(a, b) => {
                if self.wants(a) {
                    accumulate(grads, a, g.to_vec());
                }
                if self.wants(b) {
                    accumulate(grads, b, g.to_vec());
                }
            }
            &Op::Mul(a, b) => {
                if self.wants(a) {
                    let bv = self.value(b).data();
                    accumulate(grads, a, g.iter().zip(bv).map(|(&gg, &y)| gg * y).collect());
                }
                if self.wants(b) {
                    let av = self.value(a).data();
                    accumulate(grads, b, g.iter().zip(av).map(|(&gg, &y)| gg * y).collect());
                }
            }
            &Op::AddBias(x, bias) => {
                if self.wants(x) {
                    accumulate(grads, x, g.to_vec());
                }
                if self.wants(bias) {
                    let n = self.value(bias).numel();
                    let mut gb = vec![T::zero(); n];
                    for row in g.chunks(n) {
                        for (acc, &v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    accumulate(grads, bias, gb);
                }
            }
            &Op::ScaleBy(x, s) => {
                let sv = self.value(s).item();
                if self.wants(x) {
                    accumulate(grads, x, g.iter().map(|&v| v * sv).collect());
                }
                if self.wants(s) {
                    let mut acc = T::zero();
                    for (&gg, &xv) in g.iter().zip(self.value(x).data()) {
                        acc += gg * xv;
                    }
                    accumulate(grads, s, vec![acc]);
                }
            }
            &Op::MulConst(x, c) => {
                if self.wants(x) {
                    accumulate(grads, x, g.iter().map(|&v| v * c).collect());
                }
            }
            &Op::AddConst(x) | &Op::Reshape(x) => {
                if self.wants(x) {
                    accumulate(grads, x, g.to_vec());
                }
            }
            &Op::Relu(x) => {
                if self.wants(x) {
                    let xv = self.value(x).data();
                    accumulate(
                        grads,
                        x,
                        g.iter()
                            .zip(xv)
                            .map(|(&gg, &v)| if v > T::zero() { gg } else { T::zero() })
                            .collect(),
                    );
                }
            }
            &Op::Gelu(x) => {
                if self.wants(x) {
                    let (c, a, half) = (T::lit(GELU_C), T::lit(GELU_A), T::lit(0.5));
                    let three = T::lit(3.0);
                    let xv = self.value(x).data();
                    let gx = g
                        .iter()
                        .zip(xv)
                        .map(|(&gg, &v)| {
                            let u = c * (v + a * v * v * v);
                            let t = u.tanh();
                            let du = c * (T::one() + three * a * v * v);
                            let d = half * (T::one() + t) + half * v * (T::one() - t * t) * du;
                            gg * d
                        })
                        .collect();
                    accumulate(grads, x, gx);
                }
            }
            &Op::Softmax(x) => {
                if self.wants(x) {
                    let n = node.value.last_dim();
                    let mut gx = Vec::with_capacity(g.len());
                    for (gr, yr) in g.chunks(n).zip(out.chunks(n)) {
                        let mut dot = T::zero();
                        for (&a, &b) in gr.iter().zip(yr) {
                            dot += a * b;
                        }
                        gx.extend(gr.iter().zip(yr).map(|(&a, &y)| y * (a - dot)));
                    }
                    accumulate(grads, x, gx);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = node.value.last_dim();
                let dt = T::from_usize_lossy(d);
                let gam = self.value(*gamma).data();
                if self.wants(*gamma) {
                    let mut gg = vec![T::zero(); d];
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                    accumulate(grads, *gamma, gg);
                }
                if self.wants(*beta) {
                    let mut gb = vec![T::zero(); d];
                    for gr in g.chunks(d) {
                        for j in 0..d {
                            gb[j] += gr[j];
                        }
                    }
                    accumulate(grads, *beta, gb);
                }
                if self.wants(*x) {
                    let mut gx = Vec::with_capacity(g.len());
                    for ((gr, hr), &r) in g.chunks(d).zip(xhat.chunks(d)).zip(rstd) {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..d {
                            let gh = gr[j] * gam[j];
                            s1 += gh;
                            s2 += gh * hr[j];
                        }
                        for j in 0..d {
                            let gh = gr[j] * gam[j];
                            gx.push(r / dt * (dt * gh - s1 - hr[j] * s2));
                        }
                    }
                    accumulate(grads, *x, gx);
                }
            }
            Op::Permute(x, axes) => {
                if self.wants(*x) {
                    let mut inv = vec![0; axes.len()];
                    for (i, &a) in axes.iter().enumerate() {
                        inv[a] = i;
                    }
                    let mut gx = Vec::new();
                    kernels::permute(g, node.value.shape(), &inv, &mut gx);
                    accumulate(grads, *x, gx);
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &v in inputs {
                    let ext = self.shape(v)[*axis];
                    if self.wants(v) {
                        let mut gv = Vec::with_capacity(outer * ext * inner);
                        for o in 0..outer {
                            let base = o * total * inner + offset * inner;
                            gv.extend_from_slice(&g[base..base + ext * inner]);
                        }
                        accumulate(grads, v, gv);
                    }
                    offset += ext;
                }
            }
            &Op::Narrow { x, axis, start } => {
                if self.wants(x) {
                    let xs = self.shape(x);
                    let (outer, ext, inner) = split_axis(xs, axis);
                    let len = node.value.shape()[axis];
                    let mut gx = vec![T::zero(); outer * ext * inner];
                    for o in 0..outer {
                        let base = o * ext * inner + start * inner;
                        gx[base..base + len * inner]
                            .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                    }
                    accumulate(grads, x, gx);
                }
            }
            Op::GatherRows { x, idx } => {
                if self.wants(*x) {
                    let xv = self.value(*x);
                    let inner = xv.numel() / xv.shape()[0];
                    let mut gx = vec![T::zero(); xv.numel()];
                    for (r, &src) in idx.iter().enumerate() {
                        for j in 0..inner {
                            gx[src * inner + j] += g[r * inner + j];
                        }
                    }
                    accumulate(grads, *x, gx);
                }
            }
            &Op::Sum(x) => {
                if self.wants(x) {
                    accumulate(grads, x, vec![g[0]; self.value(x).numel()]);
                }
            }
            &Op::Mean(x) => {
                if self.wants(x) {
                    let n = self.value(x).numel();
                    accumulate(grads, x, vec![g[0] / T::from_usize_lossy(n); n]);
                }
            }
            Op::WeightedSse {
                pred,
                target,
                weights,
            } => {
                if self.wants(*pred) {
                    let two = T::lit(2.0);
                    let pv = self.value(*pred).data();
                    let gp = pv
                        .iter()
                        .zip(target)
                        .zip(weights)
                        .map(|((&p, &t), &w)| {
                            if w != T::zero() {
                                g[0] * two * w * (p - t)
                            } else {
                                T::zero()
                            }
                        })
                        .collect();
                    accumulate(grads, *pred, gp);
                }
            }
            &Op::Conv2d {
                x,
                kernel,
                bias,
                padding,
            } => {
                let (ci, h, w) = dims3(self.shape(x));
                let ks = self.shape(kernel);
                let (co, kh, kw) = (ks[0], ks[2], ks[3]);
                let (_, oh, ow) = dims3(node.value.shape());
                let (xv, kv) = (self.value(x).data(), self.value(kernel).data());
                if self.wants(bias) {
                    let gb = (0..co)
                        .map(|o| {
                            let mut acc = T::zero();
                            for &v in &g[o * oh * ow..(o + 1) * oh * ow] {
                                acc += v;
                            }
                            acc
                        })
                        .collect();
                    accumulate(grads, bias, gb);
                }
                if self.wants(kernel) {
                    let mut gk = vec![T::zero(); kv.len()];
                    for o in 0..co {
                        let gplane = &g[o * oh * ow..(o + 1) * oh * ow];
                        for c in 0..ci {
                            let xin = &xv[c * h * w..(c + 1) * h * w];
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    gk[((o * ci + c) * kh + ky) * kw + kx] =
                                        conv_tap_dot(xin, gplane, h, w, oh, ow, ky, kx, padding);
                                }
                            }
                        }
                    }
                    accumulate(grads, kernel, gk);
                }
                if self.wants(x) {
                    let mut gx = vec![T::zero(); ci * h * w];
                    for o in 0..co {
                        let gplane = &g[o * oh * ow..(o + 1) * oh * ow];
                        for c in 0..ci {
                            let gin = &mut gx[c * h * w..(c + 1) * h * w];
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let kval = kv[((o * ci + c) * kh + ky) * kw + kx];
                                    conv_tap_transpose(gin, gplane, h, w, oh, ow, ky, kx, padding, kval);
                                }
                            }
                        }
                    }
                    accumulate(grads, x, gx);
                }
            }
            &Op::Upsample2x(x) => {
                if self.wants(x) {
                    let (c, h, w) = dims3(self.shape(x));
                    let mut gx = vec![T::zero(); c * h * w];
                    for ch in 0..c {
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                gx[(ch * h + y / 2) * w + xx / 2] += g[(ch * 2 * h + y) * 2 * w + xx];
                            }
                        }
                    }
                    accumulate(grads, x, gx);
                }
            }
        }
    }
}

fn dims3(s: &[usize]) -> (usize, usize, usize) {
    (s[0], s[1], s[2])
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Valid output range along one axis for kernel offset `k`: outputs `o` whose input
/// coordinate `o + k - pad` lies in `[0, n)`.
#[inline]
fn tap_range(n: usize, on: usize, k: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k);
    let hi = (n + pad).saturating_sub(k).min(on);
    (lo, hi.max(lo))
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn conv_tap<T: Scalar>(
    xin: &[T],
    plane: &mut [T],
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    ky: usize,
    kx: usize,
    pad: usize,
    kval: T,
) {
    let (y0, y1) = tap_range(h, oh, ky, pad);
    let (x0, x1) = tap_range(w, ow, kx, pad);
    for oy in y0..y1 {
        let iy = oy + ky - pad;
        let src = &xin[iy * w + x0 + kx - pad..iy * w + x1 + kx - pad];
        let dst = &mut plane[oy * ow + x0..oy * ow + x1];
        for (d, &s) in dst.iter_mut().zip(src) {
            *d += kval * s;
        }
    }
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn conv_tap_dot<T: Scalar>(
    xin: &[T],
    gplane: &[T],
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    ky: usize,
    kx: usize,
    pad: usize,
) -> T {
    let (y0, y1) = tap_range(h, oh, ky, pad);
    let (x0, x1) = tap_range(w, ow, kx, pad);
    let mut acc = T::zero();
    for oy in y0..y1 {
        let iy = oy + ky - pad;
        let src = &xin[iy * w + x0 + kx - pad..iy * w + x1 + kx - pad];
        let gg = &gplane[oy * ow + x0..oy * ow + x1];
        for (&s, &gv) in src.iter().zip(gg) {
            acc += s * gv;
        }
    }
    acc
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn conv_tap_transpose<T: Scalar>(
    gin: &mut [T],
    gplane: &[T],
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    ky: usize,
    kx: usize,
    pad: usize,
    kval: T,
) {
    let (y0, y1) = tap_range(h, oh, ky, pad);
    let (x0, x1) = tap_range(w, ow, kx, pad);
    for oy in y0..y1 {
        let iy = oy + ky - pad;
        let dst = &mut gin[iy * w + x0 + kx - pad..iy * w + x1 + kx - pad];
        let gg = &gplane[oy * ow + x0..oy * ow + x1];
        for (d, &gv) in dst.iter_mut().zip(gg) {
            *d += kval * gv;
        }
    }
}
