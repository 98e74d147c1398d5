//! Per-channel statistics of the training split and input standardization.

use std::path::{Path, PathBuf};

use hyperfm::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::tiles::PatchTile;

/// Population mean and standard deviation per input channel, NaN excluded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// SHA-256 of the split manifest the statistics were computed from.
    pub manifest_sha256: String,
}

fn channel_slices(tile: &PatchTile) -> impl Iterator<Item = &[f32]> {
    let plane = tile.meta.window * tile.meta.window;
    tile.input.chunks(plane)
}

/// Two passes over the tiles: means first, then squared deviations.
///
/// A channel without valid pixels, or whose valid pixels are all equal, is an
/// error naming the channel.
pub fn compute_stats(tiles: &[PatchTile]) -> Result<ChannelStats> {
    two_pass(|visit| tiles.iter().try_for_each(|t| visit(t)))
}

/// [`compute_stats`] over tile files, reading each file once per pass.
pub fn compute_stats_files(paths: &[PathBuf]) -> Result<ChannelStats> {
    two_pass(|visit| paths.iter().try_for_each(|p| visit(&PatchTile::load(p)?)))
}

fn two_pass<F>(each: F) -> Result<ChannelStats>
where
    F: Fn(&mut dyn FnMut(&PatchTile) -> Result<()>) -> Result<()>,
{
    let mut channels: Option<usize> = None;
    let mut sum: Vec<f64> = Vec::new();
    let mut count: Vec<usize> = Vec::new();
    each(&mut |t| {
        let c = *channels.get_or_insert(t.channels());
        if t.channels() != c {
            return Err(Error::Data(format!(
                "tile {} has {} channels, expected {c}",
                t.meta.provenance.l1b_id,
                t.channels()
            )));
        }
        sum.resize(c, 0.0);
        count.resize(c, 0);
        for (ch, s) in channel_slices(t).enumerate() {
            for &v in s.iter().filter(|v| !v.is_nan()) {
                sum[ch] += f64::from(v);
                count[ch] += 1;
            }
        }
        Ok(())
    })?;
    if channels.is_none() {
        return Err(Error::Data("statistics need at least one tile".into()));
    }
    if let Some(ch) = count.iter().position(|&n| n == 0) {
        return Err(Error::Data(format!("channel {ch} has no valid pixels in the training split")));
    }
    let mean: Vec<f64> = sum.iter().zip(&count).map(|(s, &n)| s / n as f64).collect();
    let mut sq = vec![0.0f64; mean.len()];
    each(&mut |t| {
        for (ch, s) in channel_slices(t).enumerate() {
            for &v in s.iter().filter(|v| !v.is_nan()) {
                sq[ch] += (f64::from(v) - mean[ch]).powi(2);
            }
        }
        Ok(())
    })?;
    let std: Vec<f64> = sq.iter().zip(&count).map(|(q, &n)| (q / n as f64).sqrt()).collect();
    if let Some(ch) = std.iter().position(|&s| s <= 0.0) {
        return Err(Error::Data(format!(
            "channel {ch} is constant ({}) over {} valid pixels; its standard deviation is zero",
            mean[ch], count[ch]
        )));
    }
    Ok(ChannelStats {
        mean,
        std,
        manifest_sha256: String::new(),
    })
}

impl ChannelStats {
    fn check(&self, tile: &PatchTile) -> Result<()> {
        if tile.channels() != self.mean.len() {
            return Err(Error::Data(format!(
                "tile has {} channels, statistics cover {}",
                tile.channels(),
                self.mean.len()
            )));
        }
        Ok(())
    }

    fn apply(&self, tile: &PatchTile, f: impl Fn(f64, f64, f64) -> f64) -> Result<PatchTile> {
        self.check(tile)?;
        let plane = tile.meta.window * tile.meta.window;
        let mut out = tile.clone();
        for (ch, s) in out.input.chunks_mut(plane).enumerate() {
            for v in s.iter_mut().filter(|v| !v.is_nan()) {
                *v = f(f64::from(*v), self.mean[ch], self.std[ch]) as f32;
            }
        }
        Ok(out)
    }

    /// `(x − mean) / std` per input channel; NaN stays NaN.
    pub fn standardize(&self, tile: &PatchTile) -> Result<PatchTile> {
        self.apply(tile, |x, m, s| (x - m) / s)
    }

    pub fn destandardize(&self, tile: &PatchTile) -> Result<PatchTile> {
        self.apply(tile, |x, m, s| x * s + m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if s.mean.len() != s.std.len() || s.std.iter().any(|&v| v.is_nan() || v <= 0.0) {
            return Err(Error::Data(format!("{}: malformed channel statistics", path.display())));
        }
        Ok(s)
    }
}
