//! Cloud-property retrieval: target transforms, the multi-task masked loss,
//! finetuning, scene-level inference with overlap averaging and evaluation.
//!
//! Task channel order is COT, CER, CWP, CTH.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{bail, Error, Result};
use crate::mae::{train_epochs, TrainReport};
use crate::model::{Model, HEAD, TASKS};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Cot,
    Cer,
    Cwp,
    Cth,
}

impl Task {
    pub const ALL: [Task; TASKS] = [Task::Cot, Task::Cer, Task::Cwp, Task::Cth];

    pub fn name(self) -> &'static str {
        match self {
            Task::Cot => "cot",
            Task::Cer => "cer",
            Task::Cwp => "cwp",
            Task::Cth => "cth",
        }
    }

    /// COT and CWP are trained on `log1p` of the raw value.
    pub fn uses_log(self) -> bool {
        matches!(self, Task::Cot | Task::Cwp)
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Per task: optional `log1p`, then `(v − mean) / std`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskTransforms {
    pub mean: [f64; TASKS],
    pub std: [f64; TASKS],
}

impl Default for TaskTransforms {
    fn default() -> Self {
        Self {
            mean: [0.0; TASKS],
            std: [1.0; TASKS],
        }
    }
}

impl TaskTransforms {
    /// Normalization constants from the finite pixels of raw `[4, H, W]` targets.
    /// Tasks without any finite pixel keep mean 0 and std 1.
    pub fn fit<'a, T: Scalar>(targets: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        let mut sum = [0.0; TASKS];
        let mut sq = [0.0; TASKS];
        let mut n = [0usize; TASKS];
        let all: Vec<&Tensor<T>> = targets.into_iter().collect();
        for t in &all {
            for (task, plane) in Task::ALL.iter().zip(t.data().chunks(t.numel() / TASKS)) {
                let i = *task as usize;
                for v in plane.iter().map(|v| v.as_f64()).filter(|v| v.is_finite()) {
                    sum[i] += Self::pre(*task, v);
                    n[i] += 1;
                }
            }
        }
        let mut out = Self::default();
        for i in 0..TASKS {
            if n[i] > 0 {
                out.mean[i] = sum[i] / n[i] as f64;
            }
        }
        for t in &all {
            for (task, plane) in Task::ALL.iter().zip(t.data().chunks(t.numel() / TASKS)) {
                let i = *task as usize;
                for v in plane.iter().map(|v| v.as_f64()).filter(|v| v.is_finite()) {
                    let dlt = Self::pre(*task, v) - out.mean[i];
                    sq[i] += dlt * dlt;
                }
            }
        }
        for i in 0..TASKS {
            if n[i] > 0 {
                let s = (sq[i] / n[i] as f64).sqrt();
                out.std[i] = if s > 0.0 { s } else { 1.0 };
            }
        }
        out
    }

    fn pre(task: Task, v: f64) -> f64 {
        if task.uses_log() {
            v.ln_1p()
        } else {
            v
        }
    }

    pub fn forward(&self, task: Task, v: f64) -> f64 {
        let i = task as usize;
        (Self::pre(task, v) - self.mean[i]) / self.std[i]
    }

    pub fn inverse(&self, task: Task, v: f64) -> f64 {
        let i = task as usize;
        let u = v * self.std[i] + self.mean[i];
        if task.uses_log() {
            u.exp_m1()
        } else {
            u
        }
    }

    fn apply<T: Scalar>(&self, maps: &Tensor<T>, f: impl Fn(&Self, Task, f64) -> f64) -> Tensor<T> {
        let plane = maps.numel() / TASKS;
        let mut out = maps.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = T::lit(f(self, Task::ALL[i / plane], v.as_f64()));
        }
        out
    }

    /// Raw `[4, H, W]` maps → training space; NaN stays NaN.
    pub fn forward_maps<T: Scalar>(&self, maps: &Tensor<T>) -> Tensor<T> {
        self.apply(maps, Self::forward)
    }

    pub fn inverse_maps<T: Scalar>(&self, maps: &Tensor<T>) -> Tensor<T> {
        self.apply(maps, Self::inverse)
    }
}

/// 1 where `t` is finite, else 0.
pub fn validity<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    t.map(|v| if v.is_finite() { T::one() } else { T::zero() })
}

/// Unweighted mean of the per-task masked MSEs of `pred [4, H, W]`; tasks
/// without a valid pixel are left out of the mean.
pub fn multitask_loss<T: Scalar>(
    tape: &mut Tape<T>,
    pred: Var,
    target: &Tensor<T>,
    valid: &Tensor<T>,
) -> Result<Var> {
    let shape = tape.shape(pred).to_vec();
    if shape.len() != 3 || shape[0] != TASKS || target.shape() != shape || valid.shape() != shape {
        bail!(
            Dimension,
            "multitask loss shapes: pred {:?}, target {:?}, validity {:?}",
            shape,
            target.shape(),
            valid.shape()
        );
    }
    let plane = shape[1] * shape[2];
    let mut weights = Tensor::zeros(shape.clone());
    let mut live = 0usize;
    for t in 0..TASKS {
        let m = &valid.data()[t * plane..(t + 1) * plane];
        let n = m.iter().filter(|&&v| v != T::zero()).count();
        if n == 0 {
            continue;
        }
        live += 1;
        let inv = T::one() / T::from_usize_lossy(n);
        for (w, &mv) in weights.data_mut()[t * plane..(t + 1) * plane].iter_mut().zip(m) {
            if mv != T::zero() {
                *w = inv;
            }
        }
    }
    if live == 0 {
        bail!(Contract, "all four tasks have no valid pixel");
    }
    let scale = T::one() / T::from_usize_lossy(live);
    let weights = weights.map(|w| w * scale);
    tape.weighted_sse(pred, target, &weights)
}

/// A finetuning sample: standardized input cube and transformed targets.
#[derive(Clone, Debug)]
pub struct RetrievalSample<T> {
    pub input: Tensor<T>,
    pub target: Tensor<T>,
    pub valid: Tensor<T>,
}

impl<T: Scalar> RetrievalSample<T> {
    /// `raw_target` is `[4, H, W]` in physical units with NaN where invalid.
    pub fn new(input: Tensor<T>, raw_target: &Tensor<T>, transforms: &TaskTransforms) -> Self {
        let target = transforms.forward_maps(raw_target);
        let valid = validity(&target);
        Self { input, target, valid }
    }

    pub fn has_valid(&self) -> bool {
        self.valid.data().iter().any(|&v| v != T::zero())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneMode {
    DecoderOnly,
    Full,
}

impl std::str::FromStr for FinetuneMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "decoder_only" => Ok(Self::DecoderOnly),
            "full" => Ok(Self::Full),
            other => Err(Error::Config(format!("unknown finetune mode {other:?}"))),
        }
    }
}

pub fn sample_loss<T: Scalar>(model: &Model<T>, tape: &mut Tape<T>, s: &RetrievalSample<T>) -> Result<Var> {
    let pred = model.retrieve(tape, &s.input)?;
    multitask_loss(tape, pred, &s.target, &s.valid)
}

/// Mean multitask loss over the samples that have at least one valid pixel.
pub fn mean_multitask_loss<T: Scalar>(model: &Model<T>, samples: &[RetrievalSample<T>]) -> Result<f64> {
    let mut acc = 0.0;
    let mut n = 0usize;
    for s in samples.iter().filter(|s| s.has_valid()) {
        let mut tape = Tape::new();
        let l = sample_loss(model, &mut tape, s)?;
        acc += tape.value(l).item().as_f64();
        n += 1;
    }
    if n == 0 {
        bail!(Contract, "no sample has a valid target pixel");
    }
    Ok(acc / n as f64)
}

/// Finetunes for retrieval. `DecoderOnly` trains parameters under `head.` and
/// leaves every other parameter bit-identical; `Full` trains everything.
/// Samples without any valid target pixel are skipped.
pub fn finetune<T: Scalar>(
    model: &mut Model<T>,
    train: &[RetrievalSample<T>],
    val: &[RetrievalSample<T>],
    mode: FinetuneMode,
    cfg: &TrainConfig,
    log: &mut dyn Write,
) -> Result<TrainReport> {
    let train: Vec<RetrievalSample<T>> = train.iter().filter(|s| s.has_valid()).cloned().collect();
    if train.is_empty() {
        bail!(Config, "no training tile has a valid target pixel");
    }
    match mode {
        FinetuneMode::DecoderOnly => model.store.set_trainable_prefixes(&[HEAD]),
        FinetuneMode::Full => model.store.set_all_trainable(true),
    }
    let report = train_epochs(
        model,
        &train,
        cfg,
        log,
        |m, tape, s: &RetrievalSample<T>, _| sample_loss(m, tape, s),
        |m| mean_multitask_loss(m, val),
    );
    model.store.set_all_trainable(true);
    report
}

/// Window origins along one axis: stride `tile`, last window anchored to the end.
pub fn tile_origins(extent: usize, tile: usize) -> Vec<usize> {
    let mut o: Vec<usize> = (0..extent / tile).map(|i| i * tile).collect();
    if !extent.is_multiple_of(tile) {
        o.push(extent - tile);
    }
    o
}

/// Copies the `[C, tile, tile]` window at `(y, x)` out of a `[C, H, W]` scene.
pub fn crop<T: Scalar>(scene: &Tensor<T>, (y, x): (usize, usize), tile: usize) -> Result<Tensor<T>> {
    let [c, h, w] = scene.shape()[..] else {
        bail!(Dimension, "expected a [C, H, W] scene, got {:?}", scene.shape());
    };
    if y + tile > h || x + tile > w {
        bail!(Dimension, "window at ({y}, {x}) of side {tile} leaves the {h}×{w} scene");
    }
    let mut data = Vec::with_capacity(c * tile * tile);
    for ch in 0..c {
        for r in y..y + tile {
            let base = (ch * h + r) * w;
            data.extend_from_slice(&scene.data()[base + x..base + x + tile]);
        }
    }
    Tensor::new([c, tile, tile], data)
}

/// Predicts a whole scene tile by tile and averages overlapping predictions.
///
/// `predict` maps a `[C, tile, tile]` window and its origin to `[4, tile, tile]`
/// maps in training space. Windows step by `tile`; when `tile` does not divide
/// an extent, the last row or column of windows is anchored to the border. The
/// per-pixel sum is divided by the per-pixel count, and `transforms`, if given,
/// are inverted afterwards.
pub fn patchwise_infer<T: Scalar, F>(
    scene: &Tensor<T>,
    tile: usize,
    transforms: Option<&TaskTransforms>,
    mut predict: F,
) -> Result<Tensor<T>>
where
    F: FnMut(&Tensor<T>, (usize, usize)) -> Result<Tensor<T>>,
{
    let [_, h, w] = scene.shape()[..] else {
        bail!(Dimension, "expected a [C, H, W] scene, got {:?}", scene.shape());
    };
    if h < tile || w < tile {
        bail!(Contract, "scene {h}×{w} is smaller than one {tile}×{tile} window");
    }
    let mut sum = vec![T::zero(); TASKS * h * w];
    let mut count = vec![0u32; h * w];
    for &y in &tile_origins(h, tile) {
        for &x in &tile_origins(w, tile) {
            let window = crop(scene, (y, x), tile)?;
            let pred = predict(&window, (y, x))?;
            if pred.shape() != [TASKS, tile, tile] {
                bail!(Contract, "prediction {:?} is not [4, {tile}, {tile}]", pred.shape());
            }
            for t in 0..TASKS {
                for r in 0..tile {
                    for c in 0..tile {
                        sum[(t * h + y + r) * w + x + c] += pred.data()[(t * tile + r) * tile + c];
                    }
                }
            }
            for r in 0..tile {
                for c in 0..tile {
                    count[(y + r) * w + x + c] += 1;
                }
            }
        }
    }
    let data = sum
        .iter()
        .enumerate()
        .map(|(i, &s)| s / T::from_usize_lossy(count[i % (h * w)] as usize))
        .collect();
    let merged = Tensor::new([TASKS, h, w], data)?;
    Ok(match transforms {
        Some(tr) => tr.inverse_maps(&merged),
        None => merged,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRow {
    pub task: Task,
    pub n_valid_pixels: usize,
    pub mse_transformed: f64,
    pub mse_raw: f64,
}

/// Per-task MSE over every pixel where both prediction and target are finite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<TaskRow>,
}

pub const EVAL_HEADER: &str = "task\tn_valid_pixels\tmse_transformed\tmse_raw";

impl EvalReport {
    pub fn tsv(&self) -> String {
        let mut s = format!("{EVAL_HEADER}\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{}\t{}\t{:.9e}\t{:.9e}\n",
                r.task, r.n_valid_pixels, r.mse_transformed, r.mse_raw
            ));
        }
        s
    }
}

/// Compares raw-unit prediction and target scenes `[4, H, W]`. The transformed
/// column applies `transforms` to both sides first.
pub fn evaluate<T: Scalar>(preds: &[Tensor<T>], targets: &[Tensor<T>], transforms: &TaskTransforms) -> Result<EvalReport> {
    if preds.len() != targets.len() {
        bail!(Dimension, "{} predictions for {} targets", preds.len(), targets.len());
    }
    let mut n = [0usize; TASKS];
    let mut raw = [0.0f64; TASKS];
    let mut tr = [0.0f64; TASKS];
    for (p, t) in preds.iter().zip(targets) {
        if p.shape() != t.shape() || p.shape().first() != Some(&TASKS) {
            bail!(Dimension, "prediction {:?} vs target {:?}", p.shape(), t.shape());
        }
        let plane = p.numel() / TASKS;
        for (i, (&pv, &tv)) in p.data().iter().zip(t.data()).enumerate() {
            let (pv, tv) = (pv.as_f64(), tv.as_f64());
            if !pv.is_finite() || !tv.is_finite() {
                continue;
            }
            let task = Task::ALL[i / plane];
            let k = task as usize;
            n[k] += 1;
            raw[k] += (pv - tv) * (pv - tv);
            let d = transforms.forward(task, pv) - transforms.forward(task, tv);
            tr[k] += d * d;
        }
    }
    let rows = Task::ALL
        .iter()
        .map(|&task| {
            let k = task as usize;
            let div = |s: f64| if n[k] > 0 { s / n[k] as f64 } else { f64::NAN };
            TaskRow {
                task,
                n_valid_pixels: n[k],
                mse_transformed: div(tr[k]),
                mse_raw: div(raw[k]),
            }
        })
        .collect();
    Ok(EvalReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn transform_round_trip() {
        let tr = TaskTransforms {
            mean: [0.5, 10.0, 2.0, 3000.0],
            std: [1.3, 4.0, 0.7, 900.0],
        };
        for task in Task::ALL {
            for i in 0..=100 {
                let v = i as f64 * 100.0;
                let back = tr.inverse(task, tr.forward(task, v));
                assert!((back - v).abs() <= 1e-6 * v.max(1.0), "{task} {v} {back}");
            }
        }
    }

    #[test]
    fn fit_standardizes() {
        let t = Tensor::<f64>::from_fn([4, 2, 2], |i| if i % 4 == 3 { f64::NAN } else { i as f64 });
        let tr = TaskTransforms::fit([&t]);
        let z = tr.forward_maps(&t);
        for task in 0..4 {
            let vals: Vec<f64> = z.data()[task * 4..task * 4 + 4].iter().copied().filter(|v| v.is_finite()).collect();
            let mean = vals.iter().sum::<f64>() / 3.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
            assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
        }
        assert!(z.data()[3].is_nan());
    }

    fn maps(vals: [f64; 4]) -> Tensor<f64> {
        Tensor::from_fn([4, 1, 2], |i| vals[i / 2])
    }

    #[test]
    fn loss_renormalizes_over_live_tasks() {
        let mut tape = Tape::new();
        let pred = tape.constant(maps([1.0, 3f64.sqrt(), 0.0, 0.0]));
        let target = Tensor::zeros([4, 1, 2]);
        let valid = Tensor::from_fn([4, 1, 2], |i| if i < 4 { 1.0 } else { 0.0 });
        let l = multitask_loss(&mut tape, pred, &target, &valid).unwrap();
        assert!((tape.value(l).item() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn loss_ignores_invalid_pixels_and_rejects_all_empty() {
        let mut tape = Tape::new();
        let target = Tensor::from_fn([4, 1, 2], |i| if i % 2 == 0 { 1.0 } else { f64::NAN });
        let valid = validity(&target);
        let a = tape.constant(maps([1.0; 4]));
        let b = tape.constant(Tensor::from_fn([4, 1, 2], |i| if i % 2 == 0 { 1.0 } else { 1e6 }));
        let la = multitask_loss(&mut tape, a, &target, &valid).unwrap();
        let lb = multitask_loss(&mut tape, b, &target, &valid).unwrap();
        assert_eq!(tape.value(la).item(), 0.0);
        assert_eq!(tape.value(lb).item(), 0.0);
        let err = multitask_loss(&mut tape, a, &target, &Tensor::zeros([4, 1, 2])).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn origins_anchor_last_window() {
        assert_eq!(tile_origins(96, 96), vec![0]);
        assert_eq!(tile_origins(100, 96), vec![0, 4]);
        assert_eq!(tile_origins(192, 96), vec![0, 96]);
        assert_eq!(tile_origins(200, 96), vec![0, 96, 104]);
    }

    #[test]
    fn overlap_columns_average() {
        let scene = Tensor::<f64>::zeros([2, 96, 100]);
        let out = patchwise_infer(&scene, 96, None, |_, (_, x)| {
            Ok(Tensor::full([4, 96, 96], if x == 0 { 1.0 } else { 3.0 }))
        })
        .unwrap();
        assert_eq!(out.shape(), &[4, 96, 100]);
        for t in 0..4 {
            for r in [0, 50, 95] {
                assert_eq!(out.get(&[t, r, 0]), 1.0);
                assert_eq!(out.get(&[t, r, 3]), 1.0);
                assert_eq!(out.get(&[t, r, 4]), 2.0);
                assert_eq!(out.get(&[t, r, 95]), 2.0);
                assert_eq!(out.get(&[t, r, 96]), 3.0);
                assert_eq!(out.get(&[t, r, 99]), 3.0);
            }
        }
    }

    #[test]
    fn single_window_and_exact_stitching() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let scene = Tensor::<f64>::randn([4, 192, 192], 1.0, &mut rng);
        let mut calls = 0;
        let out = patchwise_infer(&scene, 96, None, |w, _| {
            calls += 1;
            Ok(w.clone())
        })
        .unwrap();
        assert_eq!(calls, 4);
        assert_eq!(out.data(), scene.data());
        let small = crop(&scene, (0, 0), 96).unwrap();
        let one = patchwise_infer(&small, 96, None, |w, _| Ok(w.map(|v| 2.0 * v))).unwrap();
        assert_eq!(one.data(), small.map(|v| 2.0 * v).data());
        let err = patchwise_infer(&crop(&scene, (0, 0), 95).unwrap(), 96, None, |w, _| Ok(w.clone())).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn evaluate_matches_flat_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tr = TaskTransforms::default();
        let preds: Vec<Tensor<f64>> = (0..3).map(|_| Tensor::rand_uniform([4, 3, 5], 0.0, 2.0, &mut rng)).collect();
        let targets: Vec<Tensor<f64>> = (0..3)
            .map(|_| Tensor::rand_uniform([4, 3, 5], 0.0, 2.0, &mut rng).map(|v| if v > 1.7 { f64::NAN } else { v }))
            .collect();
        let rep = evaluate(&preds, &targets, &tr).unwrap();
        for task in Task::ALL {
            let k = task as usize;
            let mut flat = Vec::new();
            for (p, t) in preds.iter().zip(&targets) {
                for i in k * 15..(k + 1) * 15 {
                    if t.data()[i].is_finite() {
                        flat.push((p.data()[i], t.data()[i]));
                    }
                }
            }
            let mse = flat.iter().map(|(p, t)| (p - t).powi(2)).sum::<f64>() / flat.len() as f64;
            let row = &rep.rows[k];
            assert_eq!(row.n_valid_pixels, flat.len());
            assert!((row.mse_raw - mse).abs() < 1e-12);
        }
        let same = evaluate(&targets, &targets, &tr).unwrap();
        assert!(same.rows.iter().all(|r| r.mse_raw == 0.0 && r.mse_transformed == 0.0));
    }

    #[test]
    fn evaluate_hand_pixel() {
        let tr = TaskTransforms::default();
        let p = Tensor::<f64>::new([4, 1, 1], vec![0.0, 2.0, 1.0, 5.0]).unwrap();
        let t = Tensor::<f64>::new([4, 1, 1], vec![1.0, 4.0, 1.0, 2.0]).unwrap();
        let r = evaluate(&[p], &[t], &tr).unwrap();
        let raw: Vec<f64> = r.rows.iter().map(|r| r.mse_raw).collect();
        assert_eq!(raw, vec![1.0, 4.0, 0.0, 9.0]);
        assert!((r.rows[0].mse_transformed - 2f64.ln().powi(2)).abs() < 1e-15);
    }
}
