//! The assembled network: group-embed encoder, MAE decoder and retrieval head,
//! all registered in one [`ParamStore`] under the prefixes `encoder.`,
//! `decoder.` and `head.`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::block::{run_stack, Block};
use crate::config::{FoldMode, ModelConfig};
use crate::error::{bail, Result};
use crate::group::{GroupEmbed, GroupEmbedDims};
use crate::nn::{Builder, LayerNorm, Linear};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const ENCODER: &str = "encoder.";
pub const DECODER: &str = "decoder.";
pub const HEAD: &str = "head.";

#[derive(Clone, Debug)]
pub struct Encoder {
    pub embed: GroupEmbed,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
}

impl Encoder {
    /// Runs the transformer stack on the rows `visible` of `tokens` (all rows
    /// when `None`).
    pub fn encode<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        tokens: Var,
        visible: Option<&[usize]>,
    ) -> Result<Var> {
        let x = match visible {
            Some(idx) => tape.gather_rows(tokens, idx)?,
            None => tokens,
        };
        let x = run_stack(&self.blocks, tape, store, x)?;
        self.norm.forward(tape, store, x)
    }
}

#[derive(Clone, Debug)]
pub struct MaeDecoder {
    pub mask_token: ParamId,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
    /// Per-group map from `d` to the token's `c_g·p²` pixels.
    pub recon: Vec<Linear>,
}

impl MaeDecoder {
    /// Scatters `encoded` (rows in `visible` order) back into all `L` slots with
    /// the mask token elsewhere, re-adds `pos`, decodes, and returns each
    /// group's `[S, c_g·p²]` reconstruction.
    pub fn decode<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        encoded: Var,
        visible: &[usize],
        pos: Var,
    ) -> Result<Vec<Var>> {
        let l = tape.shape(pos)[0];
        let v = visible.len();
        if tape.shape(encoded)[0] != v {
            bail!(Dimension, "{} encoded rows for {v} visible slots", tape.shape(encoded)[0]);
        }
        let mut slot = vec![usize::MAX; l];
        for (j, &i) in visible.iter().enumerate() {
            slot[i] = j;
        }
        let masked = l - v;
        let full = if masked > 0 {
            let mt = tape.param(store, self.mask_token);
            let reps = tape.gather_rows(mt, &vec![0; masked])?;
            let pool = tape.concat(&[encoded, reps], 0)?;
            let mut next = v;
            let order: Vec<usize> = slot
                .iter()
                .map(|&s| {
                    if s == usize::MAX {
                        next += 1;
                        next - 1
                    } else {
                        s
                    }
                })
                .collect();
            tape.gather_rows(pool, &order)?
        } else {
            tape.gather_rows(encoded, &slot)?
        };
        let x = tape.add(full, pos)?;
        let x = run_stack(&self.blocks, tape, store, x)?;
        let x = self.norm.forward(tape, store, x)?;
        let groups = self.recon.len();
        let s = l / groups;
        let mut out = Vec::with_capacity(groups);
        for (g, lin) in self.recon.iter().enumerate() {
            let rows = tape.narrow(x, 0, g * s, s)?;
            out.push(lin.forward(tape, store, rows)?);
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct HeadStage {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub norm: LayerNorm,
}

/// Token fold, `log2(p)` stages of upsample + conv3×3 + channel layernorm + GELU,
/// then a 1×1 conv to the four retrieval maps.
#[derive(Clone, Debug)]
pub struct RetrievalHead {
    pub fold: FoldMode,
    pub k: usize,
    pub side: usize,
    pub d: usize,
    pub stages: Vec<HeadStage>,
    pub out_kernel: ParamId,
    pub out_bias: ParamId,
}

pub const TASKS: usize = 4;

impl RetrievalHead {
    pub fn new<T: Scalar, R: Rng + ?Sized>(b: &mut Builder<'_, T, R>, cfg: &ModelConfig) -> Self {
        let c0 = match cfg.fold {
            FoldMode::Mean => cfg.d,
            FoldMode::Concat => cfg.k * cfg.d,
        };
        let mut c_in = c0;
        let stages = (0..cfg.head_stages())
            .map(|i| {
                let co = cfg.head_channels;
                let mut sb = b.sub(&format!("stage{i}"));
                let std = 1.0 / ((c_in * 9) as f64).sqrt();
                let st = HeadStage {
                    kernel: sb.normal("kernel", &[co, c_in, 3, 3], std),
                    bias: sb.zeros("bias", &[co]),
                    norm: LayerNorm::new(&mut sb.sub("norm"), co),
                };
                c_in = co;
                st
            })
            .collect();
        let std = 1.0 / (c_in as f64).sqrt();
        Self {
            fold: cfg.fold,
            k: cfg.k,
            side: cfg.tile / cfg.patch,
            d: cfg.d,
            stages,
            out_kernel: b.normal("out_kernel", &[TASKS, c_in, 1, 1], std),
            out_bias: b.zeros("out_bias", &[TASKS]),
        }
    }

    /// `[L, d]` tokens → `[c, side, side]` feature map.
    fn fold<T: Scalar>(&self, tape: &mut Tape<T>, z: Var) -> Result<Var> {
        let s = self.side * self.side;
        let l = self.k * s;
        if tape.shape(z) != [l, self.d] {
            bail!(
                Contract,
                "retrieval head expects [{l}, {}] tokens, got {:?}",
                self.d,
                tape.shape(z)
            );
        }
        let folded = match self.fold {
            FoldMode::Mean => {
                let inv = T::one() / T::from_usize_lossy(self.k);
                // avg[g·s + j, j] = 1/k
                let mut avg = Tensor::zeros([l, s]);
                for g in 0..self.k {
                    for j in 0..s {
                        avg.data_mut()[(g * s + j) * s + j] = inv;
                    }
                }
                let a = tape.constant(avg);
                let zt = tape.transpose(z)?;
                tape.matmul(zt, a)?
            }
            FoldMode::Concat => {
                let r = tape.reshape(z, &[self.k, s, self.d])?;
                let p = tape.permute(r, &[0, 2, 1])?;
                tape.reshape(p, &[self.k * self.d, s])?
            }
        };
        let c = tape.shape(folded)[0];
        tape.reshape(folded, &[c, self.side, self.side])
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, z: Var) -> Result<Var> {
        let mut x = self.fold(tape, z)?;
        for st in &self.stages {
            let up = tape.upsample_nearest2x(x)?;
            let k = tape.param(store, st.kernel);
            let b = tape.param(store, st.bias);
            let y = tape.conv2d(up, k, b, 1)?;
            let y = channel_norm(tape, store, &st.norm, y)?;
            x = tape.gelu(y);
        }
        let k = tape.param(store, self.out_kernel);
        let b = tape.param(store, self.out_bias);
        tape.conv2d(x, k, b, 0)
    }
}

/// Layernorm over the channel axis of a `[C, H, W]` map.
fn channel_norm<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, norm: &LayerNorm, x: Var) -> Result<Var> {
    let [c, h, w] = tape.shape(x)[..] else {
        bail!(Dimension, "channel norm expects [C, H, W]");
    };
    let flat = tape.reshape(x, &[c, h * w])?;
    let t = tape.transpose(flat)?;
    let n = norm.forward(tape, store, t)?;
    let back = tape.transpose(n)?;
    tape.reshape(back, &[c, h, w])
}

/// Parameters plus module layout of the whole network.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub encoder: Encoder,
    pub decoder: MaeDecoder,
    pub head: RetrievalHead,
}

impl<T: Scalar> Model<T> {
    /// Builds every parameter from `config.seed` in a fixed order.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let spec = config.group_spec()?;
        let dims = config.block_dims()?;
        let sizes = spec.sizes();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let zero = config.zero_init_residual;

        let encoder = {
            let mut b = Builder::new(&mut store, &mut rng, "encoder");
            let gdims = GroupEmbedDims {
                d: config.d,
                patch: config.patch,
                tile: config.tile,
                window: config.window,
                cell: config.grid,
                ffn_mult: config.group_ffn_mult,
                top_m: config.top_m,
            };
            let embed = GroupEmbed::new(&mut b.sub("embed"), spec, gdims, zero);
            let blocks = (0..config.n_enc)
                .map(|i| Block::new(&mut b.sub(&format!("block{i}")), config.block_kind, &dims, zero))
                .collect();
            let norm = LayerNorm::new(&mut b.sub("norm"), config.d);
            Encoder { embed, blocks, norm }
        };
        let decoder = {
            let mut b = Builder::new(&mut store, &mut rng, "decoder");
            let mask_token = b.normal("mask_token", &[1, config.d], 0.02);
            let blocks = (0..config.n_dec)
                .map(|i| Block::new(&mut b.sub(&format!("block{i}")), config.block_kind, &dims, zero))
                .collect();
            let norm = LayerNorm::new(&mut b.sub("norm"), config.d);
            let p2 = config.patch * config.patch;
            let recon = sizes
                .iter()
                .enumerate()
                .map(|(g, &c)| Linear::new(&mut b, &format!("recon{g}"), config.d, c * p2, true, false))
                .collect();
            MaeDecoder {
                mask_token,
                blocks,
                norm,
                recon,
            }
        };
        let head = RetrievalHead::new(&mut Builder::new(&mut store, &mut rng, "head"), &config);
        Ok(Self {
            config,
            store,
            encoder,
            decoder,
            head,
        })
    }

    /// Encoder output for a whole tile, every token visible.
    pub fn encode_tile(&self, tape: &mut Tape<T>, cube: &Tensor<T>) -> Result<Var> {
        let tokens = self.encoder.embed.forward(tape, &self.store, cube)?;
        self.encoder.encode(tape, &self.store, tokens, None)
    }

    /// Retrieval maps `[4, H, W]` for one tile.
    pub fn retrieve(&self, tape: &mut Tape<T>, cube: &Tensor<T>) -> Result<Var> {
        let z = self.encode_tile(tape, cube)?;
        self.head.forward(tape, &self.store, z)
    }

    /// Retrieval maps for one tile as a plain tensor.
    pub fn predict(&self, cube: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let y = self.retrieve(&mut tape, cube)?;
        Ok(tape.value(y).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check, readout, GradCheckConfig};
    use rand::SeedableRng;

    fn tiny() -> ModelConfig {
        ModelConfig::audit()
    }

    #[test]
    fn default_model_shapes() {
        let cfg = tiny();
        let m = Model::<f64>::new(cfg.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cube = Tensor::randn([24, 16, 16], 1.0, &mut rng);
        let mut tape = Tape::new();
        let z = m.encode_tile(&mut tape, &cube).unwrap();
        assert_eq!(tape.shape(z), &[cfg.tokens(), cfg.d]);
        let y = m.head.forward(&mut tape, &m.store, z).unwrap();
        assert_eq!(tape.shape(y), &[4, 16, 16]);
    }

    #[test]
    fn construction_is_deterministic() {
        let a = Model::<f32>::new(tiny()).unwrap();
        let b = Model::<f32>::new(tiny()).unwrap();
        assert_eq!(a.store.hash_prefix(""), b.store.hash_prefix(""));
    }

    #[test]
    fn wrong_token_count_is_contract_error() {
        let m = Model::<f64>::new(tiny()).unwrap();
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros([3, 16]));
        let err = m.head.forward(&mut tape, &m.store, z).unwrap_err();
        assert!(matches!(err, crate::error::Error::Contract(_)));
    }

    #[test]
    fn zero_tokens_give_zero_maps() {
        let m = Model::<f64>::new(tiny()).unwrap();
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros([m.config.tokens(), 16]));
        let y = m.head.forward(&mut tape, &m.store, z).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn head_shape_at_paper_geometry() {
        let cfg = ModelConfig {
            d: 16,
            heads: 2,
            k: 9,
            tile: 96,
            head_channels: 2,
            ..ModelConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f32>::new();
        let head = RetrievalHead::new(&mut Builder::new(&mut store, &mut rng, "head"), &cfg);
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::randn([1296, 16], 1.0, &mut rng));
        let y = head.forward(&mut tape, &store, z).unwrap();
        assert_eq!(tape.shape(y), &[4, 96, 96]);
    }

    #[test]
    fn concat_fold_matches_layout() {
        let cfg = ModelConfig {
            fold: FoldMode::Concat,
            ..tiny()
        };
        let m = Model::<f64>::new(cfg.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::randn([cfg.tokens(), cfg.d], 1.0, &mut rng));
        let y = m.head.forward(&mut tape, &m.store, z).unwrap();
        assert_eq!(tape.shape(y), &[4, 16, 16]);
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        let cfg = ModelConfig {
            d: 4,
            heads: 1,
            tile: 8,
            patch: 4,
            window: 4,
            grid: 4,
            head_channels: 3,
            ..tiny()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::<f64>::new();
        let head = RetrievalHead::new(&mut Builder::new(&mut store, &mut rng, "head"), &cfg);
        for id in store.ids().collect::<Vec<_>>() {
            if store.value(id).rank() == 1 {
                let n = store.value(id).numel();
                *store.value_mut(id) = Tensor::randn([n], 0.3, &mut rng);
            }
        }
        let z = Tensor::randn([cfg.tokens(), 4], 1.0, &mut rng);
        let report = check(&mut store, &GradCheckConfig::default(), |tape, s| {
            let zv = tape.leaf(z.clone(), true);
            let y = head.forward(tape, s, zv)?;
            readout(tape, y, 4)
        })
        .unwrap();
        assert!(report.passed(1e-4), "{report:?}");
    }
}
