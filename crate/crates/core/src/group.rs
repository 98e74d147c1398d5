//! Spectral group embedding.
//!
//! The band axis is partitioned into `k` groups. Each group runs through its own
//! local group attention (LGA) block, a gate keeps the `top_m` most relevant
//! groups, the concatenation runs through one global group attention (GGA)
//! block, and each group is patchified into tokens.
//!
//! LGA and GGA are block attention, then grid attention, then a channel FFN, each
//! pre-norm residual. The MBConv stage of the MaxViT design is omitted.
//!
//! Spatial features are kept in token layout `[H·W, c]` (row-major pixels,
//! channels last) so attention treats channels as token features. Grid
//! attention uses `grid` as the cell side: pixels with the same offset inside
//! their cell attend to each other.
//!
//! Token order is group-major, then row-major over spatial patches; each token
//! flattens its `c_g × p × p` slice in (channel, row, column) order.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::scaled_dot_attention;
use crate::error::{bail, Result};
use crate::nn::{Builder, LayerNorm, Linear};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SensorTag {
    Blue,
    Red,
    Swir,
}

impl SensorTag {
    pub const ALL: [SensorTag; 3] = [SensorTag::Blue, SensorTag::Red, SensorTag::Swir];

    fn index(self) -> usize {
        self as usize
    }
}

/// Band counts per spectrometer, ordered blue | red | SWIR by wavelength.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BandProfile {
    pub blue: usize,
    pub red: usize,
    pub swir: usize,
}

impl BandProfile {
    pub const PACE: BandProfile = BandProfile {
        blue: 119,
        red: 163,
        swir: 9,
    };

    pub fn total(&self) -> usize {
        self.blue + self.red + self.swir
    }

    pub fn counts(&self) -> [usize; 3] {
        [self.blue, self.red, self.swir]
    }

    pub fn tags(&self) -> Vec<SensorTag> {
        SensorTag::ALL
            .iter()
            .zip(self.counts())
            .flat_map(|(&t, n)| std::iter::repeat_n(t, n))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpectralGroupSpec {
    pub k: usize,
    /// Group id of every band.
    pub assignment: Vec<usize>,
    pub tags: Vec<SensorTag>,
}

impl SpectralGroupSpec {
    pub fn channels(&self) -> usize {
        self.assignment.len()
    }

    /// Band indices of group `g`, ascending.
    pub fn members(&self, g: usize) -> Vec<usize> {
        (0..self.assignment.len()).filter(|&b| self.assignment[b] == g).collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for &g in &self.assignment {
            s[g] += 1;
        }
        s
    }

    /// (blue, red, swir) counts of group `g`.
    pub fn sensor_counts(&self, g: usize) -> [usize; 3] {
        let mut c = [0; 3];
        for (b, &gb) in self.assignment.iter().enumerate() {
            if gb == g {
                c[self.tags[b].index()] += 1;
            }
        }
        c
    }

    /// First channel of each group in the group-major concatenation.
    pub fn offsets(&self) -> Vec<usize> {
        self.sizes()
            .iter()
            .scan(0, |acc, &n| {
                let o = *acc;
                *acc += n;
                Some(o)
            })
            .collect()
    }
}

/// Assigns band `b` (in wavelength order) to group `b mod k`, so every group
/// samples the full spectral range and the leftover `C mod k` bands land in the
/// first groups.
pub fn build_group_spec(tags: &[SensorTag], k: usize, min_per_group: [usize; 3]) -> Result<SpectralGroupSpec> {
    if k == 0 {
        bail!(Config, "group count k must be positive");
    }
    if tags.len() < k {
        bail!(Config, "{} bands cannot fill {k} groups", tags.len());
    }
    for (t, &min) in SensorTag::ALL.iter().zip(&min_per_group) {
        let have = tags.iter().filter(|&&x| x == *t).count();
        if have < k * min {
            bail!(
                Config,
                "{t:?} minimum of {min} bands per group is infeasible: {have} bands < {k}·{min}"
            );
        }
    }
    let spec = SpectralGroupSpec {
        k,
        assignment: (0..tags.len()).map(|b| b % k).collect(),
        tags: tags.to_vec(),
    };
    for g in 0..k {
        let counts = spec.sensor_counts(g);
        for ((t, &min), have) in SensorTag::ALL.iter().zip(&min_per_group).zip(counts) {
            if have < min {
                bail!(
                    Config,
                    "group {g} receives {have} {t:?} bands, below the minimum of {min}; reorder the band table"
                );
            }
        }
    }
    Ok(spec)
}

/// How pixels are grouped for one attention pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Partition {
    /// Non-overlapping `P × P` windows.
    Block(usize),
    /// Same offset inside `G × G` cells.
    Grid(usize),
}

impl Partition {
    fn side(self) -> usize {
        match self {
            Partition::Block(s) | Partition::Grid(s) => s,
        }
    }

    fn check(self, h: usize, w: usize) -> Result<()> {
        let s = self.side();
        if s == 0 || !h.is_multiple_of(s) || !w.is_multiple_of(s) {
            bail!(Config, "{self:?} does not divide the {h}×{w} extent");
        }
        Ok(())
    }

    /// `[H·W, c]` → `[groups, members, c]`.
    fn split<T: Scalar>(self, tape: &mut Tape<T>, x: Var, h: usize, w: usize) -> Result<Var> {
        let c = tape.shape(x)[1];
        let s = self.side();
        let (hs, ws) = (h / s, w / s);
        let r = tape.reshape(x, &[hs, s, ws, s, c])?;
        match self {
            Partition::Block(_) => {
                let p = tape.permute(r, &[0, 2, 1, 3, 4])?;
                tape.reshape(p, &[hs * ws, s * s, c])
            }
            Partition::Grid(_) => {
                let p = tape.permute(r, &[1, 3, 0, 2, 4])?;
                tape.reshape(p, &[s * s, hs * ws, c])
            }
        }
    }

    /// Inverse of [`Partition::split`].
    fn merge<T: Scalar>(self, tape: &mut Tape<T>, x: Var, h: usize, w: usize) -> Result<Var> {
        let c = tape.shape(x)[2];
        let s = self.side();
        let (hs, ws) = (h / s, w / s);
        let p = match self {
            Partition::Block(_) => {
                let r = tape.reshape(x, &[hs, ws, s, s, c])?;
                tape.permute(r, &[0, 2, 1, 3, 4])?
            }
            Partition::Grid(_) => {
                let r = tape.reshape(x, &[s, s, hs, ws, c])?;
                tape.permute(r, &[2, 0, 3, 1, 4])?
            }
        };
        tape.reshape(p, &[h * w, c])
    }
}

/// Single-head partitioned self-attention over pixels, pre-norm residual.
#[derive(Clone, Debug)]
pub struct SpatialAttention {
    pub norm: LayerNorm,
    pub qkv: Linear,
    pub out: Linear,
    pub c: usize,
}

impl SpatialAttention {
    pub fn new<T: Scalar, R: Rng + ?Sized>(b: &mut Builder<'_, T, R>, c: usize, zero_out: bool) -> Self {
        Self {
            norm: LayerNorm::new(&mut b.sub("norm"), c),
            qkv: Linear::new(b, "w_qkv", c, 3 * c, false, false),
            out: Linear::new(b, "w_out", c, c, false, zero_out),
            c,
        }
    }

    /// `x + W_out·attn(LN(x))` with attention restricted by `part`.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        (h, w): (usize, usize),
        part: Partition,
    ) -> Result<Var> {
        part.check(h, w)?;
        if tape.shape(x) != [h * w, self.c] {
            bail!(Dimension, "expected [{}, {}] features, got {:?}", h * w, self.c, tape.shape(x));
        }
        let n = self.norm.forward(tape, store, x)?;
        let qkv = self.qkv.forward(tape, store, n)?;
        let parts = part.split(tape, qkv, h, w)?;
        let q = tape.narrow(parts, 2, 0, self.c)?;
        let k = tape.narrow(parts, 2, self.c, self.c)?;
        let v = tape.narrow(parts, 2, 2 * self.c, self.c)?;
        let o = scaled_dot_attention(tape, q, k, v, 1, None)?;
        let o = part.merge(tape, o, h, w)?;
        let o = self.out.forward(tape, store, o)?;
        tape.add(x, o)
    }
}

/// Pre-norm residual channel FFN with GELU.
#[derive(Clone, Debug)]
pub struct ChannelFfn {
    pub norm: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl ChannelFfn {
    pub fn new<T: Scalar, R: Rng + ?Sized>(b: &mut Builder<'_, T, R>, c: usize, mult: usize, zero_out: bool) -> Self {
        Self {
            norm: LayerNorm::new(&mut b.sub("norm"), c),
            fc1: Linear::new(b, "fc1", c, mult * c, true, false),
            fc2: Linear::new(b, "fc2", mult * c, c, true, zero_out),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let n = self.norm.forward(tape, store, x)?;
        let h = self.fc1.forward(tape, store, n)?;
        let h = tape.gelu(h);
        let o = self.fc2.forward(tape, store, h)?;
        tape.add(x, o)
    }
}

/// Block attention, grid attention and a channel FFN; the shared structure of
/// LGA and GGA.
#[derive(Clone, Debug)]
pub struct GroupAttentionBlock {
    pub block: SpatialAttention,
    pub grid: SpatialAttention,
    pub ffn: ChannelFfn,
    pub window: usize,
    pub cell: usize,
}

impl GroupAttentionBlock {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        b: &mut Builder<'_, T, R>,
        c: usize,
        window: usize,
        cell: usize,
        ffn_mult: usize,
        zero_out: bool,
    ) -> Self {
        Self {
            block: SpatialAttention::new(&mut b.sub("block"), c, zero_out),
            grid: SpatialAttention::new(&mut b.sub("grid"), c, zero_out),
            ffn: ChannelFfn::new(&mut b.sub("ffn"), c, ffn_mult, zero_out),
            window,
            cell,
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        hw: (usize, usize),
    ) -> Result<Var> {
        self.forward_kept(tape, store, x, hw, None)
    }

    /// Like [`forward`](Self::forward), multiplying every sublayer output by the
    /// constant `keep` (same shape as `x`) so that hidden pixel rows stay zero.
    pub fn forward_kept<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        hw: (usize, usize),
        keep: Option<Var>,
    ) -> Result<Var> {
        let hold = |tape: &mut Tape<T>, y: Var| match keep {
            Some(k) => tape.mul(y, k),
            None => Ok(y),
        };
        let y = self.block.forward(tape, store, x, hw, Partition::Block(self.window))?;
        let y = hold(tape, y)?;
        let y = self.grid.forward(tape, store, y, hw, Partition::Grid(self.cell))?;
        let y = hold(tape, y)?;
        let y = self.ffn.forward(tape, store, y)?;
        hold(tape, y)
    }
}

/// `[rows, c]` tensor of ones on visible rows and zeros on hidden ones.
fn keep_rows<T: Scalar>(visible: &[bool], c: usize) -> Tensor<T> {
    let data = visible
        .iter()
        .flat_map(|&v| std::iter::repeat_n(if v { T::one() } else { T::zero() }, c))
        .collect();
    Tensor::new(vec![visible.len(), c], data).expect("keep mask shape")
}

/// Indices of the `m` largest logits, ties broken towards the lower index,
/// returned in ascending index order.
pub fn top_m_indices<T: Scalar>(logits: &[T], m: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    let mut kept = order[..m.min(logits.len())].to_vec();
    kept.sort_unstable();
    kept
}

/// Hard top-m gate over group features.
///
/// Each group is pooled to its mean, the `k` descriptors map to `k` logits
/// through `W_gate`, the `top_m` best groups are kept and scaled by
/// `top_m · softmax(kept logits)`, and the others are zeroed. With `top_m = k`
/// and equal logits every group is scaled by exactly one.
#[derive(Clone, Debug)]
pub struct Gate {
    pub w_gate: ParamId,
    pub top_m: usize,
}

#[derive(Clone, Debug)]
pub struct GateOutput {
    pub features: Vec<Var>,
    pub kept: Vec<usize>,
    pub logits: Var,
}

impl Gate {
    pub fn new<T: Scalar, R: Rng + ?Sized>(b: &mut Builder<'_, T, R>, k: usize, top_m: usize) -> Self {
        Self {
            w_gate: b.fan_in("w_gate", &[k, k]),
            top_m,
        }
    }

    pub fn select<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, groups: &[Var]) -> Result<GateOutput> {
        let k = groups.len();
        if self.top_m == 0 || self.top_m > k {
            bail!(Config, "top_m = {} must lie in [1, {k}]", self.top_m);
        }
        let pooled: Vec<Var> = groups.iter().map(|&g| tape.mean(g)).collect();
        let desc = tape.concat(&pooled, 0)?;
        let desc = tape.reshape(desc, &[1, k])?;
        let w = tape.param(store, self.w_gate);
        let logits = tape.matmul(desc, w)?;
        let kept = top_m_indices(tape.value(logits).data(), self.top_m);
        let col = tape.reshape(logits, &[k, 1])?;
        let sel = tape.gather_rows(col, &kept)?;
        let sel = tape.reshape(sel, &[1, kept.len()])?;
        let probs = tape.softmax_lastdim(sel);
        let weights = tape.mul_const(probs, T::from_usize_lossy(self.top_m));
        let mut features = Vec::with_capacity(k);
        for (g, &feat) in groups.iter().enumerate() {
            match kept.iter().position(|&x| x == g) {
                Some(j) => {
                    let wj = tape.narrow(weights, 1, j, 1)?;
                    features.push(tape.scale_by(feat, wj)?);
                }
                None => {
                    let z = Tensor::zeros(tape.shape(feat).to_vec());
                    features.push(tape.constant(z));
                }
            }
        }
        Ok(GateOutput { features, kept, logits })
    }
}

/// Per-group patch projection plus a learned positional embedding.
#[derive(Clone, Debug)]
pub struct Tokenizer {
    pub w_tok: Vec<ParamId>,
    pub pos: ParamId,
    pub patch: usize,
    pub d: usize,
}

impl Tokenizer {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        b: &mut Builder<'_, T, R>,
        sizes: &[usize],
        patch: usize,
        spatial: usize,
        d: usize,
    ) -> Self {
        let w_tok = sizes
            .iter()
            .enumerate()
            .map(|(g, &c)| b.fan_in(&format!("w_tok{g}"), &[c * patch * patch, d]))
            .collect();
        Self {
            w_tok,
            pos: b.zeros("pos", &[sizes.len() * spatial, d]),
            patch,
            d,
        }
    }

    /// Group features `[H·W, c_g]` → tokens `[L, d]`.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        groups: &[Var],
        (h, w): (usize, usize),
    ) -> Result<Var> {
        let p = self.patch;
        if h % p != 0 || w % p != 0 {
            bail!(Config, "patch {p} does not divide the {h}×{w} extent");
        }
        if groups.len() != self.w_tok.len() {
            bail!(Dimension, "{} group features for {} tokenizers", groups.len(), self.w_tok.len());
        }
        let mut parts = Vec::with_capacity(groups.len());
        for (&g, &wid) in groups.iter().zip(&self.w_tok) {
            let patches = patchify(tape, g, h, w, p)?;
            let wv = tape.param(store, wid);
            parts.push(tape.matmul(patches, wv)?);
        }
        let tokens = tape.concat(&parts, 0)?;
        let pos = tape.param(store, self.pos);
        tape.add(tokens, pos)
    }
}

/// `[H·W, c]` → `[(H/p)·(W/p), c·p·p]`, each row flattened as (channel, row, column).
pub fn patchify<T: Scalar>(tape: &mut Tape<T>, x: Var, h: usize, w: usize, p: usize) -> Result<Var> {
    let c = tape.shape(x)[1];
    let r = tape.reshape(x, &[h / p, p, w / p, p, c])?;
    let t = tape.permute(r, &[0, 2, 4, 1, 3])?;
    tape.reshape(t, &[(h / p) * (w / p), c * p * p])
}

/// Splits a `[C, H, W]` cube into per-group features in token layout `[H·W, c_g]`.
/// NaN pixels become zero.
pub fn group_features<T: Scalar>(cube: &Tensor<T>, spec: &SpectralGroupSpec) -> Result<Vec<Tensor<T>>> {
    let [c, h, w] = cube.shape()[..] else {
        bail!(Dimension, "expected a [C, H, W] cube, got {:?}", cube.shape());
    };
    if c != spec.channels() {
        bail!(Dimension, "cube has {c} bands, group spec expects {}", spec.channels());
    }
    let hw = h * w;
    let src = cube.data();
    (0..spec.k)
        .map(|g| {
            let bands = spec.members(g);
            let cg = bands.len();
            let mut data = vec![T::zero(); hw * cg];
            for (j, &b) in bands.iter().enumerate() {
                for (px, &v) in src[b * hw..(b + 1) * hw].iter().enumerate() {
                    data[px * cg + j] = if v.is_finite() { v } else { T::zero() };
                }
            }
            Tensor::new([hw, cg], data)
        })
        .collect()
}

/// Pixel targets of every token, `[L, c_g·p·p]` per group concatenated in token
/// order, with NaN kept where the cube is NaN.
pub fn token_targets<T: Scalar>(cube: &Tensor<T>, spec: &SpectralGroupSpec, p: usize) -> Result<Vec<Tensor<T>>> {
    let [_, h, w] = cube.shape()[..] else {
        bail!(Dimension, "expected a [C, H, W] cube, got {:?}", cube.shape());
    };
    if h % p != 0 || w % p != 0 {
        bail!(Config, "patch {p} does not divide the {h}×{w} extent");
    }
    let (sh, sw) = (h / p, w / p);
    (0..spec.k)
        .map(|g| {
            let bands = spec.members(g);
            let width = bands.len() * p * p;
            let mut data = Vec::with_capacity(sh * sw * width);
            for py in 0..sh {
                for px in 0..sw {
                    for &b in &bands {
                        for y in 0..p {
                            for x in 0..p {
                                data.push(cube.get(&[b, py * p + y, px * p + x]));
                            }
                        }
                    }
                }
            }
            Tensor::new([sh * sw, width], data)
        })
        .collect()
}

/// The full group-embed stage: LGA per group, gate, GGA, tokenizer.
#[derive(Clone, Debug)]
pub struct GroupEmbed {
    pub spec: SpectralGroupSpec,
    pub lga: Vec<GroupAttentionBlock>,
    pub gate: Gate,
    pub gga: GroupAttentionBlock,
    pub tokenizer: Tokenizer,
    pub extent: (usize, usize),
}

#[derive(Clone, Copy, Debug)]
pub struct GroupEmbedDims {
    pub d: usize,
    pub patch: usize,
    pub tile: usize,
    pub window: usize,
    pub cell: usize,
    pub ffn_mult: usize,
    pub top_m: usize,
}

impl GroupEmbed {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        b: &mut Builder<'_, T, R>,
        spec: SpectralGroupSpec,
        dims: GroupEmbedDims,
        zero_out: bool,
    ) -> Self {
        let sizes = spec.sizes();
        let lga = sizes
            .iter()
            .enumerate()
            .map(|(g, &c)| {
                GroupAttentionBlock::new(&mut b.sub(&format!("lga{g}")), c, dims.window, dims.cell, dims.ffn_mult, zero_out)
            })
            .collect();
        let gate = Gate::new(&mut b.sub("gate"), spec.k, dims.top_m);
        let gga = GroupAttentionBlock::new(
            &mut b.sub("gga"),
            spec.channels(),
            dims.window,
            dims.cell,
            dims.ffn_mult,
            zero_out,
        );
        let s = dims.tile / dims.patch;
        let tokenizer = Tokenizer::new(&mut b.sub("tok"), &sizes, dims.patch, s * s, dims.d);
        Self {
            spec,
            lga,
            gate,
            gga,
            tokenizer,
            extent: (dims.tile, dims.tile),
        }
    }

    /// LGA outputs of every group, `[H·W, c_g]` each.
    ///
    /// `visible[g][pixel]` marks the pixels of group `g` that carry data; hidden
    /// pixel rows are held at zero through every sublayer.
    pub fn local<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        groups: &[Var],
        visible: Option<&[Vec<bool>]>,
    ) -> Result<Vec<Var>> {
        groups
            .iter()
            .zip(&self.lga)
            .enumerate()
            .map(|(g, (&x, blk))| {
                let keep = visible.map(|v| {
                    let c = tape.shape(x)[1];
                    tape.constant(keep_rows(&v[g], c))
                });
                blk.forward_kept(tape, store, x, self.extent, keep)
            })
            .collect()
    }

    /// Group features → GGA output `[H·W, C]` in group-major channel order.
    pub fn mix<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        groups: &[Var],
        visible: Option<&[Vec<bool>]>,
    ) -> Result<Var> {
        let local = self.local(tape, store, groups, visible)?;
        let gated = self.gate.select(tape, store, &local)?;
        let cat = tape.concat(&gated.features, 1)?;
        let keep = visible.map(|v| {
            let any: Vec<bool> = (0..v[0].len()).map(|i| v.iter().any(|g| g[i])).collect();
            tape.constant(keep_rows(&any, self.spec.channels()))
        });
        self.gga.forward_kept(tape, store, cat, self.extent, keep)
    }

    /// Group features → tokens `[L, d]`.
    pub fn forward_features<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        groups: &[Var],
        visible: Option<&[Vec<bool>]>,
    ) -> Result<Var> {
        let z = self.mix(tape, store, groups, visible)?;
        let sizes = self.spec.sizes();
        let mut split = Vec::with_capacity(sizes.len());
        for (&off, &c) in self.spec.offsets().iter().zip(&sizes) {
            split.push(tape.narrow(z, 1, off, c)?);
        }
        self.tokenizer.forward(tape, store, &split, self.extent)
    }

    /// `[C, H, W]` cube → tokens `[L, d]`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, cube: &Tensor<T>) -> Result<Var> {
        let (h, w) = self.extent;
        if cube.shape()[1..] != [h, w] {
            bail!(Dimension, "cube {:?} does not match the {h}×{w} tile", cube.shape());
        }
        let groups: Vec<Var> = group_features(cube, &self.spec)?
            .into_iter()
            .map(|t| tape.constant(t))
            .collect();
        self.forward_features(tape, store, &groups, None)
    }
}
