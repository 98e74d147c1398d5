//! Granule directories in, tile files plus split manifest and statistics out.

use std::fs;
use std::path::{Path, PathBuf};

use hyperfm::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::container;
use crate::granule::{GranuleMeta, GranuleRecord, GRANULE_MAGIC};
use crate::matching::{match_granules, DELTA_T};
use crate::stats::compute_stats_files;
use crate::synth::Split;
use crate::tiles::{extract_patches, ExtractOptions, PatchTile, Provenance};

pub const MANIFEST_FORMAT: &str = "hyperfm-tiles-1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const STATS_FILE: &str = "stats.json";
const TILE_DIR: &str = "tiles";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    #[serde(flatten)]
    pub extract: ExtractOptions,
    /// Pairing tolerance in seconds.
    pub delta_t: i64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            extract: ExtractOptions::default(),
            delta_t: DELTA_T,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputFile {
    pub name: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TileEntry {
    /// Path relative to the manifest's directory.
    pub path: String,
    pub split: Option<Split>,
    pub provenance: Provenance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub format: String,
    pub config: PreprocessConfig,
    pub l1b_inputs: Vec<InputFile>,
    pub l2_inputs: Vec<InputFile>,
    pub kept: usize,
    pub discarded: usize,
    pub unmatched_l1b: Vec<String>,
    pub unmatched_l2: Vec<String>,
    pub tiles: Vec<TileEntry>,
}

impl SplitManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let m: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        if m.format != MANIFEST_FORMAT {
            return Err(Error::Data(format!(
                "{}: format {}, expected {MANIFEST_FORMAT}",
                path.display(),
                m.format
            )));
        }
        Ok(m)
    }

    /// Tile paths of one split, resolved against `root` (the manifest's directory).
    pub fn paths(&self, root: &Path, split: Split) -> Vec<PathBuf> {
        self.tiles
            .iter()
            .filter(|t| t.split == Some(split))
            .map(|t| root.join(&t.path))
            .collect()
    }

    pub fn load_split(&self, root: &Path, split: Split) -> Result<Vec<PatchTile>> {
        self.paths(root, split).iter().map(|p| PatchTile::load(p)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PreprocessReport {
    pub pairs: usize,
    pub kept: usize,
    pub discarded: usize,
    pub unmatched_l1b: Vec<String>,
    pub unmatched_l2: Vec<String>,
    pub manifest_sha256: String,
    pub stats_written: bool,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// `*.gran` files of `dir`, sorted by name.
pub fn list_granules(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e == "gran"))
        .collect();
    v.sort();
    Ok(v)
}

fn inputs(paths: &[PathBuf]) -> Result<Vec<InputFile>> {
    paths
        .iter()
        .map(|p| {
            Ok(InputFile {
                name: p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
                sha256: sha256_hex(&fs::read(p)?),
            })
        })
        .collect()
}

/// Masks, pairs, windows and filters every granule, writing tiles under
/// `out/tiles`, the split manifest and, when the train split is non-empty, the
/// train-split channel statistics.
///
/// Tiles are named by L1B id and window origin, and the manifest lists them in
/// (granule id, origin) order, so identical inputs give byte-identical outputs.
pub fn preprocess(l1b_dir: &Path, l2_dir: &Path, out: &Path, cfg: &PreprocessConfig) -> Result<PreprocessReport> {
    cfg.extract.validate()?;
    let l1b_paths = list_granules(l1b_dir)?;
    let l2_paths = list_granules(l2_dir)?;
    if l1b_paths.is_empty() {
        log::warn!("no L1B granules in {}", l1b_dir.display());
    }
    let read = |p: &PathBuf| container::read_meta::<GranuleMeta>(p, GRANULE_MAGIC);
    let l1b_meta = l1b_paths.iter().map(read).collect::<Result<Vec<_>>>()?;
    let l2_meta = l2_paths.iter().map(read).collect::<Result<Vec<_>>>()?;
    let matches = match_granules(&l1b_meta, &l2_meta, cfg.delta_t);

    let tile_dir = out.join(TILE_DIR);
    fs::create_dir_all(&tile_dir)?;
    let mut pairs = matches.pairs.clone();
    pairs.sort_by(|a, b| l1b_meta[a.0].id.cmp(&l1b_meta[b.0].id));
    let (mut kept, mut discarded) = (0, 0);
    let mut tiles = Vec::new();
    for &(i, j) in &pairs {
        let a = GranuleRecord::load(&l1b_paths[i])?.mask_invalid();
        let b = GranuleRecord::load(&l2_paths[j])?.mask_invalid();
        let e = extract_patches(&a, &b, &cfg.extract)?;
        kept += e.kept;
        discarded += e.discarded;
        for t in e.tiles {
            let [y, x] = t.meta.provenance.origin;
            let rel = format!("{TILE_DIR}/{}_r{y:05}_c{x:05}.tile", a.meta.id);
            t.save(&out.join(&rel))?;
            tiles.push(TileEntry {
                path: rel,
                split: Split::of_date(&t.meta.provenance.date),
                provenance: t.meta.provenance,
            });
        }
    }
    let names = |idx: &[usize], metas: &[GranuleMeta]| idx.iter().map(|&k| metas[k].id.clone()).collect::<Vec<_>>();
    let unmatched_l1b = names(&matches.unmatched_l1b, &l1b_meta);
    let unmatched_l2 = names(&matches.unmatched_l2, &l2_meta);
    for id in &unmatched_l1b {
        log::warn!("L1B granule {id} has no L2 granule within {} s", cfg.delta_t);
    }
    let manifest = SplitManifest {
        format: MANIFEST_FORMAT.into(),
        config: *cfg,
        l1b_inputs: inputs(&l1b_paths)?,
        l2_inputs: inputs(&l2_paths)?,
        kept,
        discarded,
        unmatched_l1b: unmatched_l1b.clone(),
        unmatched_l2: unmatched_l2.clone(),
        tiles,
    };
    let bytes = serde_json::to_string_pretty(&manifest)? + "\n";
    fs::write(out.join(MANIFEST_FILE), &bytes)?;
    let manifest_sha256 = sha256_hex(bytes.as_bytes());

    let train = manifest.paths(out, Split::Train);
    let stats_written = if train.is_empty() {
        log::warn!("train split is empty; no channel statistics written");
        false
    } else {
        let mut stats = compute_stats_files(&train)?;
        stats.manifest_sha256 = manifest_sha256.clone();
        stats.save(&out.join(STATS_FILE))?;
        true
    };
    Ok(PreprocessReport {
        pairs: pairs.len(),
        kept,
        discarded,
        unmatched_l1b,
        unmatched_l2,
        manifest_sha256,
        stats_written,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{synth_granules, write_granules, SynthConfig};
    use hyperfm::group::BandProfile;

    fn small() -> (tempfile::TempDir, PreprocessConfig) {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            n_pairs: 4,
            height: 24,
            width: 24,
            bands: BandProfile { blue: 2, red: 3, swir: 1 },
            ..SynthConfig::default()
        };
        write_granules(dir.path(), &synth_granules(&cfg).unwrap()).unwrap();
        let pc = PreprocessConfig {
            extract: ExtractOptions {
                window: 8,
                stride: 8,
                t_nan: 0.5,
                ..ExtractOptions::default()
            },
            ..PreprocessConfig::default()
        };
        (dir, pc)
    }

    #[test]
    fn empty_directories_give_an_empty_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        fs::create_dir_all(&a).unwrap();
        fs::create_dir_all(&b).unwrap();
        let r = preprocess(&a, &b, &dir.path().join("out"), &PreprocessConfig::default()).unwrap();
        assert_eq!((r.pairs, r.kept, r.discarded), (0, 0, 0));
        assert!(!r.stats_written);
        let m = SplitManifest::load(&dir.path().join("out").join(MANIFEST_FILE)).unwrap();
        assert!(m.tiles.is_empty());
    }

    #[test]
    fn rerun_is_byte_identical_and_splits_load() {
        let (dir, pc) = small();
        let (l1b, l2) = (dir.path().join("l1b"), dir.path().join("l2"));
        let out = dir.path().join("out");
        let first = preprocess(&l1b, &l2, &out, &pc).unwrap();
        let bytes = fs::read(out.join(MANIFEST_FILE)).unwrap();
        let second = preprocess(&l1b, &l2, &out, &pc).unwrap();
        assert_eq!(fs::read(out.join(MANIFEST_FILE)).unwrap(), bytes);
        assert_eq!(first, second);
        assert_eq!(first.pairs, 4);
        assert_eq!(first.kept + first.discarded, 4 * 9);
        let m = SplitManifest::load(&out.join(MANIFEST_FILE)).unwrap();
        let train = m.load_split(&out, Split::Train).unwrap();
        let val = m.load_split(&out, Split::Val).unwrap();
        assert!(!train.is_empty() && !val.is_empty());
        assert!(train.iter().all(|t| Split::of_date(&t.meta.provenance.date) == Some(Split::Train)));
        let stats = crate::stats::ChannelStats::load(&out.join(STATS_FILE)).unwrap();
        assert_eq!(stats.manifest_sha256, first.manifest_sha256);
    }
}
