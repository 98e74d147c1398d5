//! Parameter accounting and forward-time measurements for `hyperfm bench`.

use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{htt_complexity, HttComplexity, HttSplit};
use crate::block::{Block, BlockDims, BlockKind};
use crate::config::ModelConfig;
use crate::error::{bail, Result};
use crate::ffn::LmfFfn;
use crate::model::Model;
use crate::nn::Builder;
use crate::params::ParamStore;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Parameter counts of one submodule, enumerated from the live store.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Count {
    pub name: String,
    pub params: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BlockCounts {
    /// `|W_dense| + TT cores` (hypoformer) or `|W_qkv|` (vit).
    pub qkv_projection: usize,
    pub attn_out: usize,
    pub ffn: usize,
    pub norms: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TimingRow {
    pub n: usize,
    pub hypoformer_median_s: f64,
    pub vit_median_s: f64,
    pub ratio: f64,
    pub htt_time_estimate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub block_kind: BlockKind,
    pub d: usize,
    pub d_hidden: usize,
    pub split: HttSplit,
    pub submodules: Vec<Count>,
    pub total: usize,
    pub block: BlockCounts,
    pub dense_qkv: usize,
    pub dense_ffn: usize,
    pub qkv_ratio: f64,
    pub ffn_ratio: f64,
    pub lmf_formula: usize,
    pub complexity: HttComplexity,
    pub timings: Vec<TimingRow>,
}

#[derive(Clone, Debug)]
pub struct TimingOptions {
    pub widths: Vec<usize>,
    pub tokens: usize,
    pub reps: usize,
}

impl Default for TimingOptions {
    fn default() -> Self {
        Self {
            widths: vec![192, 384, 768, 1536],
            tokens: 64,
            reps: 5,
        }
    }
}

fn count_where(store: &ParamStore<f32>, f: impl Fn(&str) -> bool) -> usize {
    store
        .iter()
        .filter(|(_, p)| f(&p.name))
        .map(|(_, p)| p.value.numel())
        .sum()
}

fn block_counts(store: &ParamStore<f32>, prefix: &str) -> BlockCounts {
    let attn = format!("{prefix}.attn.");
    BlockCounts {
        qkv_projection: count_where(store, |n| {
            n.starts_with(&attn) && (n.ends_with("w_dense") || n.ends_with("w_qkv") || n.contains("tt_core"))
        }),
        attn_out: count_where(store, |n| n.starts_with(&attn) && n.ends_with("w_out")),
        ffn: store.count_prefix(&format!("{prefix}.ffn.")),
        norms: store.count_prefix(&format!("{prefix}.ln1.")) + store.count_prefix(&format!("{prefix}.ln2.")),
    }
}

/// Median forward time of one block at width `n` over `reps` runs.
fn time_block(kind: BlockKind, dims: &BlockDims, tokens: usize, reps: usize) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(dims.d as u64);
    let mut store = ParamStore::<f32>::new();
    let blk = Block::new(&mut Builder::new(&mut store, &mut rng, "b"), kind, dims, false);
    let x = Tensor::<f32>::randn([tokens, dims.d], 1.0, &mut rng);
    let run = || -> Result<f64> {
        let t0 = Instant::now();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = blk.forward(&mut tape, &store, xv)?;
        std::hint::black_box(tape.value(y));
        Ok(t0.elapsed().as_secs_f64())
    };
    run()?;
    let mut times = (0..reps.max(1)).map(|_| run()).collect::<Result<Vec<_>>>()?;
    times.sort_by(f64::total_cmp);
    Ok(times[times.len() / 2])
}

/// Hypoformer vs ViT block forward medians at each width, with the
/// configuration's α, D, R and the conventional `d_hidden = 4n`, `R_f = n/4`.
pub fn time_blocks(cfg: &ModelConfig, opts: &TimingOptions) -> Result<Vec<TimingRow>> {
    opts.widths
        .iter()
        .map(|&n| {
            let split = HttSplit::resolve(n, cfg.alpha, cfg.tt_cores, cfg.tt_rank)?;
            let estimate = htt_complexity(split.effective_alpha, n as f64, cfg.tt_cores as f64, cfg.tt_rank as f64)?;
            let dims = BlockDims {
                d: n,
                heads: cfg.heads,
                d_hidden: 4 * n,
                lmf_rank: (n / 4).max(1),
                split,
            };
            let hyp = time_block(BlockKind::Hypoformer, &dims, opts.tokens, opts.reps)?;
            let vit = time_block(BlockKind::Vit, &dims, opts.tokens, opts.reps)?;
            Ok(TimingRow {
                n,
                hypoformer_median_s: hyp,
                vit_median_s: vit,
                ratio: hyp / vit,
                htt_time_estimate: estimate.time,
            })
        })
        .collect()
}

/// Counts every parameter of the model described by `cfg` and, if `timing` is
/// given, times the two block families.
///
/// For a hypoformer configuration with `α < 1`, a QKV projection that is not
/// strictly smaller than `3d²` is reported as a contract violation.
pub fn bench(cfg: &ModelConfig, timing: Option<&TimingOptions>) -> Result<BenchReport> {
    let model = Model::<f32>::new(cfg.clone())?;
    let store = &model.store;
    let embed = "encoder.embed.";
    let submodules = vec![
        ("encoder.embed.lga", count_where(store, |n| n.starts_with(&format!("{embed}lga")))),
        ("encoder.embed.gate", store.count_prefix(&format!("{embed}gate."))),
        ("encoder.embed.gga", store.count_prefix(&format!("{embed}gga."))),
        ("encoder.embed.tokenizer", store.count_prefix(&format!("{embed}tok."))),
        ("encoder.blocks", count_where(store, |n| n.starts_with("encoder.block"))),
        ("encoder.norm", store.count_prefix("encoder.norm.")),
        ("decoder.blocks", count_where(store, |n| n.starts_with("decoder.block"))),
        ("decoder.mask_token+norm", store.count_prefix("decoder.mask_token") + store.count_prefix("decoder.norm.")),
        ("decoder.recon", count_where(store, |n| n.starts_with("decoder.recon"))),
        ("head", store.count_prefix("head.")),
    ]
    .into_iter()
    .map(|(name, params)| Count {
        name: name.into(),
        params,
    })
    .collect::<Vec<_>>();
    let total = store.count();
    let listed: usize = submodules.iter().map(|c| c.params).sum();
    if listed != total {
        bail!(Contract, "submodule counts sum to {listed}, store holds {total}");
    }
    let block = block_counts(store, "encoder.block0");
    let d = cfg.d;
    let dense_qkv = 3 * d * d;
    let dense_ffn = 2 * d * cfg.d_hidden;
    let split = cfg.split()?;
    if cfg.block_kind == BlockKind::Hypoformer {
        let expected = split.dense_params() + split.tt_params();
        if block.qkv_projection != expected {
            bail!(Contract, "QKV projection enumerates {} parameters, expected {expected}", block.qkv_projection);
        }
        if split.effective_alpha < 1.0 && block.qkv_projection >= dense_qkv {
            bail!(Contract, "QKV projection {} is not below the dense 3d² = {dense_qkv}", block.qkv_projection);
        }
    }
    let complexity = htt_complexity(split.effective_alpha, d as f64, cfg.tt_cores as f64, cfg.tt_rank as f64)?;
    let timings = match timing {
        Some(opts) => time_blocks(cfg, opts)?,
        None => Vec::new(),
    };
    Ok(BenchReport {
        block_kind: cfg.block_kind,
        d,
        d_hidden: cfg.d_hidden,
        submodules,
        total,
        qkv_ratio: block.qkv_projection as f64 / dense_qkv as f64,
        ffn_ratio: block.ffn as f64 / dense_ffn as f64,
        lmf_formula: LmfFfn::param_count(d, cfg.d_hidden, cfg.lmf_rank),
        block,
        dense_qkv,
        dense_ffn,
        split,
        complexity,
        timings,
    })
}

impl BenchReport {
    pub fn text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "block_kind\t{:?}", self.block_kind);
        let _ = writeln!(s, "d\t{}\td_hidden\t{}", self.d, self.d_hidden);
        let _ = writeln!(
            s,
            "alpha\trequested {}\teffective {:.6}\tdense_width {}\ttt_width {}",
            self.split.requested_alpha, self.split.effective_alpha, self.split.dense_width, self.split.tt_width
        );
        if let Some(tt) = &self.split.tt {
            let _ = writeln!(
                s,
                "tt\tin {:?}\tout {:?}\tranks {:?}\tparams {}",
                tt.in_factors,
                tt.out_factors,
                tt.ranks,
                tt.param_count()
            );
        }
        let _ = writeln!(s, "# parameters per submodule");
        for c in &self.submodules {
            let _ = writeln!(s, "{}\t{}", c.name, c.params);
        }
        let _ = writeln!(s, "total\t{}", self.total);
        let _ = writeln!(s, "# per block");
        let _ = writeln!(s, "qkv_projection\t{}\tdense_3d2\t{}\tratio\t{:.6}", self.block.qkv_projection, self.dense_qkv, self.qkv_ratio);
        let _ = writeln!(s, "ffn\t{}\tdense_2d_dhidden\t{}\tratio\t{:.6}", self.block.ffn, self.dense_ffn, self.ffn_ratio);
        let _ = writeln!(s, "lmf_formula\t{}", self.lmf_formula);
        let _ = writeln!(s, "attn_out\t{}\tnorms\t{}", self.block.attn_out, self.block.norms);
        let _ = writeln!(
            s,
            "htt_complexity\tN {}\ttime {:.6e}\tspace {:.6e}",
            self.d, self.complexity.time, self.complexity.space
        );
        if !self.timings.is_empty() {
            let _ = writeln!(s, "# forward time, median seconds\nn\thypoformer\tvit\tratio\thtt_time_estimate");
            for t in &self.timings {
                let _ = writeln!(
                    s,
                    "{}\t{:.6e}\t{:.6e}\t{:.4}\t{:.6e}",
                    t.n, t.hypoformer_median_s, t.vit_median_s, t.ratio, t.htt_time_estimate
                );
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_counts_match_formulas() {
        let cfg = ModelConfig::toy();
        let r = bench(&cfg, None).unwrap();
        let split = cfg.split().unwrap();
        assert_eq!(r.block.qkv_projection, split.dense_params() + split.tt_params());
        assert_eq!(r.block.ffn, r.lmf_formula);
        assert!(r.block.qkv_projection < 3 * cfg.d * cfg.d);
    }

    #[test]
    fn dense_limit_has_unit_ratio() {
        let cfg = ModelConfig {
            alpha: 1.0,
            lmf_rank: 128,
            ..ModelConfig::toy()
        };
        let r = bench(&cfg, None).unwrap();
        assert_eq!(r.block.qkv_projection, r.dense_qkv);
        assert_eq!(r.qkv_ratio, 1.0);
    }

    #[test]
    fn vit_counts_dense() {
        let cfg = ModelConfig {
            block_kind: BlockKind::Vit,
            ..ModelConfig::toy()
        };
        let r = bench(&cfg, None).unwrap();
        assert_eq!(r.block.qkv_projection, 3 * 128 * 128);
        assert_eq!(r.block.ffn, 2 * 128 * 512 + 512 + 128);
    }
}
