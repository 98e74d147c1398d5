//! `pretrain`, `finetune`, `infer`, `eval` and `bench`.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use hyperfm::bench::TimingOptions;
use hyperfm::checkpoint::{load_checkpoint, read_manifest, save_checkpoint};
use hyperfm::config::Precision;
use hyperfm::downstream::{self, patchwise_infer, FinetuneMode, RetrievalSample, TaskTransforms};
use hyperfm::mae::{self, MaeSample, TrainReport};
use hyperfm::model::{ENCODER, TASKS};
use hyperfm::{Error, Model, ModelConfig, Result, RunConfig, Scalar, Tensor};
use hyperfm_datapipe::granule::{GranuleKind, GranuleMeta, GranuleRecord};
use hyperfm_datapipe::pipeline::{sha256_hex, SplitManifest, MANIFEST_FILE, STATS_FILE};
use hyperfm_datapipe::stats::ChannelStats;
use hyperfm_datapipe::synth::Split;
use hyperfm_datapipe::tiles::PatchTile;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::manifest::{beside, RunManifest, RUN_MANIFEST};
use crate::{BenchArgs, EvalArgs, FinetuneArgs, InferArgs, PretrainArgs};

pub const REPORT: &str = "report.json";
pub const METRICS: &str = "metrics.tsv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub wallclock_s: f64,
}

/// What `pretrain` and `finetune` leave in `report.json`; the schema does not
/// depend on the block family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub command: String,
    pub block_kind: hyperfm::block::BlockKind,
    pub mode: Option<FinetuneMode>,
    pub param_count: usize,
    pub train_tiles: usize,
    pub val_tiles: usize,
    pub steps: usize,
    pub best_epoch: usize,
    pub best_val: f64,
    pub encoder_sha256_before: String,
    pub encoder_sha256_after: String,
    pub history: Vec<EpochRow>,
}

pub fn load_run(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => {
            let cfg = RunConfig::default();
            cfg.validate()?;
            Ok(cfg)
        }
    }
}

/// A preprocessed directory: manifest plus the train-split statistics bound to it.
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: SplitManifest,
    pub manifest_sha256: String,
    pub stats: ChannelStats,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let manifest_sha256 = sha256_hex(&fs::read(&path)?);
        let manifest = SplitManifest::load(&path)?;
        let stats_path = root.join(STATS_FILE);
        if !stats_path.exists() {
            return Err(Error::Data(format!(
                "{} is missing; the train split of {} is empty",
                stats_path.display(),
                path.display()
            )));
        }
        let stats = ChannelStats::load(&stats_path)?;
        if stats.manifest_sha256 != manifest_sha256 {
            return Err(Error::Data(format!(
                "{} was computed for manifest {}, found {manifest_sha256}",
                stats_path.display(),
                stats.manifest_sha256
            )));
        }
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
            manifest_sha256,
            stats,
        })
    }

    /// Standardized tiles of one split, checked against the model geometry.
    pub fn tiles(&self, split: Split, cfg: &ModelConfig) -> Result<Vec<PatchTile>> {
        let tiles = self.manifest.load_split(&self.root, split)?;
        for t in &tiles {
            if t.meta.window != cfg.tile {
                return Err(Error::Config(format!(
                    "tiles are {0}×{0} but model.tile = {1}; set model.tile to {0} or re-run preprocess with --window {1}",
                    t.meta.window, cfg.tile
                )));
            }
            if t.meta.bands != cfg.bands {
                return Err(Error::Config(format!(
                    "tiles carry bands {:?} but model.bands = {:?}",
                    t.meta.bands, cfg.bands
                )));
            }
        }
        tiles.iter().map(|t| self.stats.standardize(t)).collect()
    }

    /// Train and validation tiles; validation falls back to train when empty.
    pub fn train_val(&self, cfg: &ModelConfig) -> Result<(Vec<PatchTile>, Vec<PatchTile>)> {
        let train = self.tiles(Split::Train, cfg)?;
        if train.is_empty() {
            return Err(Error::Data(format!("{} lists no train tiles", self.root.display())));
        }
        let mut val = self.tiles(Split::Val, cfg)?;
        if val.is_empty() {
            log::warn!("validation split is empty; early stopping monitors the train tiles");
            val = train.clone();
        }
        Ok((train, val))
    }

    fn extra(&self) -> Result<serde_json::Value> {
        Ok(json!({
            "stats": serde_json::to_value(&self.stats)?,
            "data_manifest_sha256": self.manifest_sha256,
        }))
    }
}

fn summary<T: Scalar>(
    command: &str,
    model: &Model<T>,
    mode: Option<FinetuneMode>,
    sizes: (usize, usize),
    before: String,
    r: &TrainReport,
) -> TrainSummary {
    TrainSummary {
        command: command.into(),
        block_kind: model.config.block_kind,
        mode,
        param_count: model.store.count(),
        train_tiles: sizes.0,
        val_tiles: sizes.1,
        steps: r.steps,
        best_epoch: r.best_epoch,
        best_val: r.best_val,
        encoder_sha256_before: before,
        encoder_sha256_after: model.store.hash_prefix(ENCODER),
        history: r
            .history
            .iter()
            .map(|m| EpochRow {
                epoch: m.epoch,
                train_loss: m.train_loss,
                val_loss: m.val_loss,
                wallclock_s: m.wallclock_s,
            })
            .collect(),
    }
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)? + "\n")?;
    Ok(())
}

fn metrics_log(out: &Path) -> Result<BufWriter<File>> {
    fs::create_dir_all(out)?;
    Ok(BufWriter::new(File::create(out.join(METRICS))?))
}

pub fn pretrain(a: &PretrainArgs) -> Result<()> {
    let run = load_run(a.config.as_deref())?;
    let s = match run.model.precision {
        Precision::Single => pretrain_as::<f32>(&run, a)?,
        Precision::Double => pretrain_as::<f64>(&run, a)?,
    };
    println!(
        "pretrain\tsteps {}\tbest_epoch {}\tbest_val {:.6e}\tparams {}",
        s.steps, s.best_epoch, s.best_val, s.param_count
    );
    Ok(())
}

fn pretrain_as<T: Scalar>(run: &RunConfig, a: &PretrainArgs) -> Result<TrainSummary> {
    let ds = Dataset::open(&a.data)?;
    let (train, val) = ds.train_val(&run.model)?;
    let mut model = Model::<T>::new(run.model.clone())?;
    let samples = |tiles: &[PatchTile]| -> Result<Vec<MaeSample<T>>> {
        tiles.iter().map(|t| MaeSample::new(&model, t.tensors::<T>().0)).collect()
    };
    let (tr, va) = (samples(&train)?, samples(&val)?);
    let before = model.store.hash_prefix(ENCODER);
    let mut log = metrics_log(&a.out)?;
    let r = mae::pretrain_loop(&mut model, &tr, &va, &run.pretrain, &mut log)?;
    let mut extra = ds.extra()?;
    extra["stage"] = json!("pretrain");
    save_checkpoint(&a.out, &model, extra)?;
    let s = summary("pretrain", &model, None, (tr.len(), va.len()), before, &r);
    write_json(&a.out.join(REPORT), &s)?;
    RunManifest::new("pretrain", run.model.seed, run)?
        .input(&a.data.join(MANIFEST_FILE))?
        .input(&a.data.join(STATS_FILE))?
        .inputs(a.config.iter())?
        .write(&a.out.join(RUN_MANIFEST))?;
    Ok(s)
}

pub fn finetune(a: &FinetuneArgs) -> Result<()> {
    let run = load_run(a.config.as_deref())?;
    let s = match run.model.precision {
        Precision::Single => finetune_as::<f32>(&run, a)?,
        Precision::Double => finetune_as::<f64>(&run, a)?,
    };
    println!(
        "finetune\tmode {:?}\tsteps {}\tbest_epoch {}\tbest_val {:.6e}\tencoder_unchanged {}",
        a.mode,
        s.steps,
        s.best_epoch,
        s.best_val,
        s.encoder_sha256_before == s.encoder_sha256_after
    );
    Ok(())
}

fn finetune_as<T: Scalar>(run: &RunConfig, a: &FinetuneArgs) -> Result<TrainSummary> {
    let ds = Dataset::open(&a.data)?;
    let (train, val) = ds.train_val(&run.model)?;
    let mut model = match &a.ckpt {
        Some(dir) => load_checkpoint::<T>(dir, Some(&run.model))?.0,
        None => {
            log::warn!("no --ckpt given; finetuning from the seeded initialization");
            Model::<T>::new(run.model.clone())?
        }
    };
    let raw: Vec<(Tensor<T>, Tensor<T>)> = train.iter().map(|t| t.tensors::<T>()).collect();
    let transforms = TaskTransforms::fit(raw.iter().map(|(_, y)| y));
    let samples = |tiles: &[PatchTile]| -> Vec<RetrievalSample<T>> {
        tiles
            .iter()
            .map(|t| {
                let (x, y) = t.tensors::<T>();
                RetrievalSample::new(x, &y, &transforms)
            })
            .collect()
    };
    let (tr, va) = (samples(&train), samples(&val));
    let before = model.store.hash_prefix(ENCODER);
    let mut log = metrics_log(&a.out)?;
    let r = downstream::finetune(&mut model, &tr, &va, a.mode, &run.finetune, &mut log)?;
    let s = summary("finetune", &model, Some(a.mode), (tr.len(), va.len()), before, &r);
    if a.mode == FinetuneMode::DecoderOnly && s.encoder_sha256_before != s.encoder_sha256_after {
        return Err(Error::Contract("decoder_only finetuning changed encoder parameters".into()));
    }
    let mut extra = ds.extra()?;
    extra["stage"] = json!("finetune");
    extra["mode"] = serde_json::to_value(a.mode)?;
    extra["transforms"] = serde_json::to_value(&transforms)?;
    save_checkpoint(&a.out, &model, extra)?;
    write_json(&a.out.join(REPORT), &s)?;
    RunManifest::new("finetune", run.model.seed, run)?
        .input(&a.data.join(MANIFEST_FILE))?
        .input(&a.data.join(STATS_FILE))?
        .inputs(a.config.iter())?
        .inputs(a.ckpt.iter().map(|d| d.join(hyperfm::checkpoint::BLOB)).collect::<Vec<_>>().iter())?
        .write(&a.out.join(RUN_MANIFEST))?;
    Ok(s)
}

fn extra_field<V: for<'de> Deserialize<'de>>(extra: &serde_json::Value, key: &str, ckpt: &Path) -> Result<V> {
    let v = extra.get(key).ok_or_else(|| {
        Error::Manifest(format!("{} records no {key}; produce it with finetune", ckpt.display()))
    })?;
    Ok(serde_json::from_value(v.clone())?)
}

pub fn transforms_of(ckpt: &Path) -> Result<TaskTransforms> {
    extra_field(&read_manifest(ckpt)?.extra, "transforms", ckpt)
}

pub fn infer(a: &InferArgs) -> Result<()> {
    let pred = match read_manifest(&a.ckpt)?.dtype.as_str() {
        "f64" => infer_as::<f64>(a)?,
        _ => infer_as::<f32>(a)?,
    };
    pred.save(&a.out)?;
    RunManifest::new("infer", 0, &json!({"ckpt": a.ckpt, "scene": a.scene}))?
        .input(&a.ckpt.join(hyperfm::checkpoint::BLOB))?
        .input(&a.scene)?
        .write(&beside(&a.out))?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn infer_as<T: Scalar>(a: &InferArgs) -> Result<GranuleRecord> {
    let (model, man) = load_checkpoint::<T>(&a.ckpt, None)?;
    let stats: ChannelStats = extra_field(&man.extra, "stats", &a.ckpt)?;
    let transforms: TaskTransforms = extra_field(&man.extra, "transforms", &a.ckpt)?;
    let scene = GranuleRecord::load(&a.scene)?.mask_invalid();
    let m = &scene.meta;
    if m.kind != GranuleKind::L1b {
        return Err(Error::Data(format!("{} is not an L1B granule", a.scene.display())));
    }
    if m.bands != Some(model.config.bands) {
        return Err(Error::Config(format!(
            "scene bands {:?} differ from model bands {:?}",
            m.bands, model.config.bands
        )));
    }
    let plane = scene.plane();
    let data = scene
        .data
        .chunks(plane)
        .zip(stats.mean.iter().zip(&stats.std))
        .flat_map(|(ch, (&mu, &sd))| ch.iter().map(move |&v| T::lit((f64::from(v) - mu) / sd)))
        .collect();
    let cube = Tensor::new([m.channels(), m.height, m.width], data)?;
    let maps = patchwise_infer(&cube, model.config.tile, Some(&transforms), |w, _| model.predict(w))?;
    GranuleRecord::new(
        GranuleMeta {
            id: format!("{}.PRED", m.id.trim_end_matches(".L1B")),
            kind: GranuleKind::L2,
            bands: None,
            ..m.clone()
        },
        maps.data().iter().map(|v| v.as_f64() as f32).collect(),
        vec![0; TASKS * plane],
    )
}

fn l2_tensor(path: &Path) -> Result<Tensor<f64>> {
    let g = GranuleRecord::load(path)?.mask_invalid();
    if g.meta.kind != GranuleKind::L2 {
        return Err(Error::Data(format!("{} is not an L2 granule", path.display())));
    }
    Tensor::new(
        [TASKS, g.meta.height, g.meta.width],
        g.data.iter().map(|&v| f64::from(v)).collect(),
    )
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    if a.pred.len() != a.target.len() {
        return Err(Error::Config(format!(
            "{} prediction files for {} target files",
            a.pred.len(),
            a.target.len()
        )));
    }
    let transforms = match &a.ckpt {
        Some(c) => transforms_of(c)?,
        None => {
            log::warn!("no --ckpt given; the transformed column uses log1p without normalization");
            TaskTransforms::default()
        }
    };
    let preds = a.pred.iter().map(|p| l2_tensor(p)).collect::<Result<Vec<_>>>()?;
    let targets = a.target.iter().map(|p| l2_tensor(p)).collect::<Result<Vec<_>>>()?;
    let report = downstream::evaluate(&preds, &targets, &transforms)?;
    print!("{}", report.tsv());
    if let Some(out) = &a.out {
        if let Some(parent) = out.parent() {
            fs::create_dir_all(parent)?;
        }
        write_json(out, &report)?;
        fs::write(out.with_extension("tsv"), report.tsv())?;
        RunManifest::new("eval", 0, &json!({"transforms": transforms}))?
            .inputs(a.pred.iter().chain(&a.target))?
            .write(&beside(out))?;
    }
    Ok(())
}

pub fn bench(a: &BenchArgs) -> Result<()> {
    let run = load_run(a.config.as_deref())?;
    let timing = (!a.no_timing).then(|| TimingOptions {
        widths: a.widths.clone(),
        tokens: a.tokens,
        reps: a.reps,
    });
    let report = hyperfm::bench::bench(&run.model, timing.as_ref())?;
    print!("{}", report.text());
    if let Some(path) = &a.json {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        write_json(path, &report)?;
        RunManifest::new("bench", run.model.seed, &run)?
            .inputs(a.config.iter())?
            .write(&beside(path))?;
    }
    Ok(())
}
