//! Masked-autoencoder pretraining.
//!
//! Masked token pixels are zeroed in the input before the group embed, only the
//! visible tokens enter the encoder, and the loss is the pixel-mean squared error
//! per masked token, averaged over masked tokens. Targets are the standardized
//! input pixels; NaN pixels carry no weight.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{MaskMode, ModelConfig, TrainConfig};
use crate::error::{bail, Error, Result};
use crate::group::{group_features, token_targets};
use crate::model::Model;
use crate::optim::{AdamW, Schedule};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Partition of `[0, L)` into visible and masked token slots, both ascending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenMask {
    pub visible: Vec<usize>,
    pub masked: Vec<usize>,
}

impl TokenMask {
    pub fn none(l: usize) -> Self {
        Self {
            visible: (0..l).collect(),
            masked: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.visible.len() + self.masked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Uniform random mask hiding `floor(ratio·L)` of `L` slots.
pub fn sample_mask<R: Rng + ?Sized>(l: usize, ratio: f64, rng: &mut R) -> Result<TokenMask> {
    if !(0.0..1.0).contains(&ratio) {
        bail!(Config, "mask ratio {ratio} must lie in [0, 1)");
    }
    let m = (ratio * l as f64).floor() as usize;
    let mut perm: Vec<usize> = (0..l).collect();
    perm.shuffle(rng);
    let mut masked = perm[..m].to_vec();
    let mut visible = perm[m..].to_vec();
    masked.sort_unstable();
    visible.sort_unstable();
    Ok(TokenMask { visible, masked })
}

/// Masks whole spatial patches across all `k` groups.
pub fn sample_spatial_mask<R: Rng + ?Sized>(k: usize, s: usize, ratio: f64, rng: &mut R) -> Result<TokenMask> {
    let spatial = sample_mask(s, ratio, rng)?;
    let expand = |idx: &[usize]| {
        let mut v: Vec<usize> = (0..k).flat_map(|g| idx.iter().map(move |&i| g * s + i)).collect();
        v.sort_unstable();
        v
    };
    Ok(TokenMask {
        visible: expand(&spatial.visible),
        masked: expand(&spatial.masked),
    })
}

pub fn sample_for_config<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<TokenMask> {
    match cfg.mask_mode {
        MaskMode::Token => sample_mask(cfg.tokens(), cfg.mask_ratio, rng),
        MaskMode::Spatial => sample_spatial_mask(cfg.k, cfg.spatial_tokens(), cfg.mask_ratio, rng),
    }
}

/// Encoder output and per-group reconstructions of one forward pass.
#[derive(Clone, Debug)]
pub struct MaeOutput {
    pub encoded: Var,
    /// `[S, c_g·p²]` per group, token order as in the target layout.
    pub recon: Vec<Var>,
}

/// Zeroes the pixels of every masked token in group-feature layout `[H·W, c_g]`
/// and returns the per-group pixel visibility.
fn hide_masked<T: Scalar>(feats: &mut [Tensor<T>], masked: &[usize], w: usize, p: usize, s: usize) -> Vec<Vec<bool>> {
    let per_row = w / p;
    let mut visible: Vec<Vec<bool>> = feats.iter().map(|f| vec![true; f.shape()[0]]).collect();
    for &t in masked {
        let (g, sp) = (t / s, t % s);
        let (py, px) = (sp / per_row, sp % per_row);
        let cg = feats[g].shape()[1];
        let data = feats[g].data_mut();
        for y in py * p..(py + 1) * p {
            for x in px * p..(px + 1) * p {
                let base = (y * w + x) * cg;
                data[base..base + cg].fill(T::zero());
                visible[g][y * w + x] = false;
            }
        }
    }
    visible
}

pub fn mae_forward<T: Scalar>(
    model: &Model<T>,
    tape: &mut Tape<T>,
    input: &Tensor<T>,
    mask: &TokenMask,
) -> Result<MaeOutput> {
    let cfg = &model.config;
    let l = cfg.tokens();
    if mask.len() != l {
        bail!(Contract, "mask covers {} slots, model has {l} tokens", mask.len());
    }
    if mask.visible.is_empty() {
        bail!(Contract, "mask leaves no visible token");
    }
    let embed = &model.encoder.embed;
    let mut feats = group_features(input, &embed.spec)?;
    let visible = hide_masked(&mut feats, &mask.masked, cfg.tile, cfg.patch, cfg.spatial_tokens());
    let groups: Vec<Var> = feats.into_iter().map(|f| tape.constant(f)).collect();
    let hidden = (!mask.masked.is_empty()).then_some(visible.as_slice());
    let tokens = embed.forward_features(tape, &model.store, &groups, hidden)?;
    let encoded = model
        .encoder
        .encode(tape, &model.store, tokens, Some(&mask.visible))?;
    debug_assert_eq!(tape.shape(encoded)[0], mask.visible.len());
    let pos = tape.param(&model.store, embed.tokenizer.pos);
    let recon = model
        .decoder
        .decode(tape, &model.store, encoded, &mask.visible, pos)?;
    Ok(MaeOutput { encoded, recon })
}

/// Mean over `slots` of each token's mean squared error over its finite target
/// pixels. Tokens without a finite pixel are skipped.
///
/// `recon[g]` and `targets[g]` are `[S, width_g]`; slot `t` is row `t mod S`
/// of group `t / S`.
pub fn recon_loss<T: Scalar>(
    tape: &mut Tape<T>,
    recon: &[Var],
    targets: &[Tensor<T>],
    slots: &[usize],
) -> Result<Var> {
    if recon.len() != targets.len() || recon.is_empty() {
        bail!(Dimension, "{} reconstructions for {} target groups", recon.len(), targets.len());
    }
    let s = targets[0].shape()[0];
    let mut weights: Vec<Tensor<T>> = targets.iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
    let mut counted = 0usize;
    for &t in slots {
        let (g, row) = (t / s, t % s);
        let Some(tg) = targets.get(g) else {
            bail!(Dimension, "slot {t} outside the {} groups", targets.len());
        };
        let width = tg.shape()[1];
        let px = &tg.data()[row * width..(row + 1) * width];
        let valid = px.iter().filter(|v| v.is_finite()).count();
        if valid == 0 {
            continue;
        }
        counted += 1;
        let inv = T::one() / T::from_usize_lossy(valid);
        for (w, v) in weights[g].data_mut()[row * width..(row + 1) * width].iter_mut().zip(px) {
            *w = if v.is_finite() { inv } else { T::zero() };
        }
    }
    if counted == 0 {
        return Err(Error::EmptyMask);
    }
    let scale = T::one() / T::from_usize_lossy(counted);
    let mut total: Option<Var> = None;
    for ((&r, t), w) in recon.iter().zip(targets).zip(&weights) {
        if tape.shape(r) != t.shape() {
            bail!(Dimension, "reconstruction {:?} vs target {:?}", tape.shape(r), t.shape());
        }
        let w = w.map(|v| v * scale);
        let sse = tape.weighted_sse(r, t, &w)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, sse)?,
            None => sse,
        });
    }
    Ok(total.expect("at least one group"))
}

/// Reconstruction loss of one tile under `mask`, honouring the config's
/// all-token flag and the zero-ratio fallback.
pub fn mae_loss<T: Scalar>(
    model: &Model<T>,
    tape: &mut Tape<T>,
    input: &Tensor<T>,
    targets: &[Tensor<T>],
    mask: &TokenMask,
) -> Result<Var> {
    let out = mae_forward(model, tape, input, mask)?;
    let cfg = &model.config;
    let all: Vec<usize>;
    let slots = if cfg.loss_all_tokens || mask.masked.is_empty() {
        if cfg.mask_ratio > 0.0 && mask.masked.is_empty() && !cfg.loss_all_tokens {
            bail!(Contract, "empty masked set with mask ratio {}", cfg.mask_ratio);
        }
        all = (0..mask.len()).collect();
        &all[..]
    } else {
        &mask.masked[..]
    };
    recon_loss(tape, &out.recon, targets, slots)
}

/// A pretraining sample: standardized input cube (NaN allowed) and its token targets.
#[derive(Clone, Debug)]
pub struct MaeSample<T> {
    pub input: Tensor<T>,
    pub targets: Vec<Tensor<T>>,
}

impl<T: Scalar> MaeSample<T> {
    pub fn new(model: &Model<T>, input: Tensor<T>) -> Result<Self> {
        let targets = token_targets(&input, &model.encoder.embed.spec, model.config.patch)?;
        Ok(Self { input, targets })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub wallclock_s: f64,
}

pub const METRICS_HEADER: &str = "epoch\ttrain_loss\tval_loss\twallclock_s";

impl EpochMetrics {
    pub fn tsv(&self) -> String {
        format!(
            "{}\t{:.9e}\t{:.9e}\t{:.3}",
            self.epoch, self.train_loss, self.val_loss, self.wallclock_s
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub history: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub best_val: f64,
    pub steps: usize,
}

/// Fixed per-sample masks for validation, independent of the training stream.
pub fn validation_masks(cfg: &ModelConfig, n: usize, seed: u64) -> Result<Vec<TokenMask>> {
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15 ^ i as u64);
            sample_for_config(cfg, &mut rng)
        })
        .collect()
}

/// Mean loss over `samples` with the given masks.
pub fn mean_loss<T: Scalar>(model: &Model<T>, samples: &[MaeSample<T>], masks: &[TokenMask]) -> Result<f64> {
    let mut acc = 0.0;
    for (s, m) in samples.iter().zip(masks) {
        let mut tape = Tape::new();
        let l = mae_loss(model, &mut tape, &s.input, &s.targets, m)?;
        acc += tape.value(l).item().as_f64();
    }
    Ok(acc / samples.len() as f64)
}

/// Generic epoch loop shared by pretraining and finetuning: shuffled mini-batches,
/// gradient averaging in sample order, AdamW under the warmup-cosine schedule,
/// early stopping on the validation score, best parameters restored at the end.
pub(crate) fn train_epochs<T, S, L, V>(
    model: &mut Model<T>,
    train: &[S],
    cfg: &TrainConfig,
    log: &mut dyn Write,
    mut sample_loss: L,
    mut validate: V,
) -> Result<TrainReport>
where
    T: Scalar,
    L: FnMut(&Model<T>, &mut Tape<T>, &S, &mut ChaCha8Rng) -> Result<Var>,
    V: FnMut(&Model<T>) -> Result<f64>,
{
    cfg.validate()?;
    if train.is_empty() {
        bail!(Config, "training set is empty");
    }
    let batches = train.len().div_ceil(cfg.batch);
    let mut total = cfg.epochs * batches;
    if let Some(cap) = cfg.max_steps {
        total = total.min(cap);
    }
    let schedule = Schedule::new(cfg.lr, cfg.warmup_frac, total);
    let mut opt = AdamW::from_config(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let start = Instant::now();
    writeln!(log, "{METRICS_HEADER}")?;

    let mut report = TrainReport {
        history: Vec::new(),
        best_epoch: 0,
        best_val: f64::INFINITY,
        steps: 0,
    };
    let mut best = model.store.clone();
    let mut since_best = 0usize;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch) {
            if report.steps >= total {
                break;
            }
            model.store.zero_grad();
            let inv = T::one() / T::from_usize_lossy(chunk.len());
            for &i in chunk {
                let mut tape = Tape::new();
                let loss = sample_loss(model, &mut tape, &train[i], &mut rng)?;
                epoch_loss += tape.value(loss).item().as_f64();
                seen += 1;
                let scaled = tape.mul_const(loss, inv);
                let grads = tape.backward(scaled)?;
                model.store.accumulate(&tape, &grads);
            }
            opt.step(&mut model.store, schedule.lr(report.steps));
            report.steps += 1;
        }
        let val = validate(model)?;
        let m = EpochMetrics {
            epoch,
            train_loss: if seen > 0 { epoch_loss / seen as f64 } else { f64::NAN },
            val_loss: val,
            wallclock_s: start.elapsed().as_secs_f64(),
        };
        writeln!(log, "{}", m.tsv())?;
        log::info!("epoch {epoch}: train {:.6} val {:.6}", m.train_loss, val);
        report.history.push(m);
        if val < report.best_val {
            report.best_val = val;
            report.best_epoch = epoch;
            best = model.store.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best > cfg.patience {
                break;
            }
        }
        if report.steps >= total {
            break;
        }
    }
    model.store = best;
    model.store.zero_grad();
    Ok(report)
}

/// MAE pretraining with early stopping on the validation reconstruction loss.
/// Per-epoch metrics go to `log` as tab-separated lines.
pub fn pretrain_loop<T: Scalar>(
    model: &mut Model<T>,
    train: &[MaeSample<T>],
    val: &[MaeSample<T>],
    cfg: &TrainConfig,
    log: &mut dyn Write,
) -> Result<TrainReport> {
    if val.is_empty() {
        bail!(Config, "validation set is empty");
    }
    let val_masks = validation_masks(&model.config, val.len(), cfg.seed)?;
    train_epochs(
        model,
        train,
        cfg,
        log,
        |m, tape, s: &MaeSample<T>, rng| {
            let mask = sample_for_config(&m.config, rng)?;
            mae_loss(m, tape, &s.input, &s.targets, &mask)
        },
        |m| mean_loss(m, val, &val_masks),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check, GradCheckConfig};

    #[test]
    fn mask_counts_and_partition() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = sample_mask(1296, 0.75, &mut rng).unwrap();
        assert_eq!(m.masked.len(), 972);
        assert_eq!(m.visible.len(), 324);
        let mut all: Vec<usize> = m.visible.iter().chain(&m.masked).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..1296).collect::<Vec<_>>());
        let m0 = sample_mask(10, 0.0, &mut rng).unwrap();
        assert_eq!(m0.visible.len(), 10);
        assert!(sample_mask(10, 1.0, &mut rng).is_err());
    }

    #[test]
    fn mask_is_seed_deterministic() {
        let a = sample_mask(50, 0.5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_mask(50, 0.5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn spatial_mask_ties_groups() {
        let m = sample_spatial_mask(3, 4, 0.5, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(m.masked.len(), 6);
        for &t in &m.masked {
            for g in 0..3 {
                assert!(m.masked.contains(&(g * 4 + t % 4)));
            }
        }
    }

    #[test]
    fn hand_loss() {
        let mut tape = Tape::<f64>::new();
        let r = tape.constant(Tensor::new([3, 1], vec![1.0, 7.0, 3.0]).unwrap());
        let t = Tensor::new([3, 1], vec![0.0, 0.0, 0.0]).unwrap();
        let l = recon_loss(&mut tape, &[r], &[t], &[0, 2]).unwrap();
        assert_eq!(tape.value(l).item(), 5.0);
    }

    #[test]
    fn perfect_reconstruction_is_zero() {
        let mut tape = Tape::<f64>::new();
        let t = Tensor::new([2, 2], vec![1.0, f64::NAN, 3.0, 4.0]).unwrap();
        let r = tape.constant(t.map(|v| if v.is_nan() { 9.0 } else { v }));
        let l = recon_loss(&mut tape, &[r], &[t], &[0, 1]).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn visible_slot_gradient_is_zero() {
        let mut tape = Tape::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = tape.leaf(Tensor::randn([4, 3], 1.0, &mut rng), true);
        let t = Tensor::randn([4, 3], 1.0, &mut rng);
        let l = recon_loss(&mut tape, &[r], &[t], &[1, 3]).unwrap();
        let g = tape.backward(l).unwrap().get(r).unwrap();
        for row in [0, 2] {
            assert!(g.data()[row * 3..row * 3 + 3].iter().all(|&v| v == 0.0));
        }
        assert!(g.data()[3..6].iter().any(|&v| v != 0.0));
    }

    fn audit_model() -> Model<f64> {
        Model::new(ModelConfig::audit()).unwrap()
    }

    fn cube(seed: u64) -> Tensor<f64> {
        Tensor::randn([24, 16, 16], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn encoder_sees_visible_count_and_decoder_all() {
        let m = audit_model();
        let input = cube(1);
        let mask = sample_for_config(&m.config, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let mut tape = Tape::new();
        let out = mae_forward(&m, &mut tape, &input, &mask).unwrap();
        assert_eq!(tape.shape(out.encoded), &[mask.visible.len(), 16]);
        let rows: usize = out.recon.iter().map(|&r| tape.shape(r)[0]).sum();
        assert_eq!(rows, m.config.tokens());
    }

    #[test]
    fn masked_pixels_never_reach_encoder_or_loss() {
        let m = audit_model();
        let input = cube(3);
        let sample = MaeSample::new(&m, input.clone()).unwrap();
        let mask = sample_for_config(&m.config, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let run = |x: &Tensor<f64>| {
            let mut tape = Tape::new();
            let out = mae_forward(&m, &mut tape, x, &mask).unwrap();
            let enc = tape.value(out.encoded).clone();
            let l = recon_loss(&mut tape, &out.recon, &sample.targets, &mask.masked).unwrap();
            (enc, tape.value(l).item())
        };
        let (e0, l0) = run(&input);
        let mut garbage = input.clone();
        let spec = &m.encoder.embed.spec;
        let s = m.config.spatial_tokens();
        let per_row = m.config.tile / m.config.patch;
        let p = m.config.patch;
        for &t in &mask.masked {
            let (g, sp) = (t / s, t % s);
            for b in spec.members(g) {
                for y in 0..p {
                    for x in 0..p {
                        let (yy, xx) = ((sp / per_row) * p + y, (sp % per_row) * p + x);
                        garbage.data_mut()[(b * 16 + yy) * 16 + xx] = 1e3 * (b as f64 + 1.0);
                    }
                }
            }
        }
        let (e1, l1) = run(&garbage);
        assert_eq!(e0.data(), e1.data());
        assert_eq!(l0.to_bits(), l1.to_bits());
    }

    #[test]
    fn zero_input_with_no_mask_has_zero_loss() {
        let cfg = ModelConfig {
            mask_ratio: 0.0,
            zero_init_residual: true,
            ..ModelConfig::audit()
        };
        let m = Model::<f64>::new(cfg).unwrap();
        let input = Tensor::zeros([24, 16, 16]);
        let sample = MaeSample::new(&m, input).unwrap();
        let mask = TokenMask::none(m.config.tokens());
        let mut tape = Tape::new();
        let l = mae_loss(&m, &mut tape, &sample.input, &sample.targets, &mask).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn full_step_passes_gradient_audit() {
        let mut m = audit_model();
        let sample = MaeSample::new(&m, cube(5)).unwrap();
        let mask = sample_for_config(&m.config, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let cfg = GradCheckConfig {
            max_coords: 4,
            ..GradCheckConfig::default()
        };
        let model = m.clone();
        let report = check(&mut m.store, &cfg, |tape, store| {
            let mm = Model {
                store: store.clone(),
                ..model.clone()
            };
            mae_loss(&mm, tape, &sample.input, &sample.targets, &mask)
        })
        .unwrap();
        assert!(report.passed(1e-4), "{report:?}");
    }

    #[test]
    fn patience_zero_stops_after_first_regression() {
        let mut m = audit_model();
        let train = vec![MaeSample::new(&m, cube(7)).unwrap()];
        let val = train.clone();
        let cfg = TrainConfig {
            epochs: 50,
            batch: 1,
            patience: 0,
            lr: 0.5,
            ..TrainConfig::pretrain()
        };
        let mut log = Vec::new();
        let r = pretrain_loop(&mut m, &train, &val, &cfg, &mut log).unwrap();
        let n = r.history.len();
        let mut best = f64::INFINITY;
        for (i, e) in r.history.iter().enumerate() {
            let improved = e.val_loss < best;
            best = best.min(e.val_loss);
            assert!(improved || i == n - 1, "kept going after epoch {}", e.epoch);
        }
        assert!(n == 50 || r.history[n - 1].val_loss >= r.best_val);
        let text = String::from_utf8(log).unwrap();
        assert_eq!(text.lines().count(), r.history.len() + 1);
    }
}
