//! Sliding-window patch extraction and the tile file format.

use std::path::Path;

use hyperfm::group::BandProfile;
use hyperfm::{Error, Result, Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::container::{self, Array, ArrayData};
use crate::granule::{GranuleKind, GranuleRecord, L2_PLANES};

pub const TILE_MAGIC: &[u8; 8] = b"HSPTILE1";
pub const WINDOW: usize = 96;
pub const T_NAN: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub l1b_id: String,
    pub l2_id: String,
    /// Window origin `[row, column]` in the granule.
    pub origin: [usize; 2],
    pub l1b_timestamp: i64,
    pub l2_timestamp: i64,
    pub date: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TileMeta {
    pub provenance: Provenance,
    pub bands: BandProfile,
    pub window: usize,
    pub t_nan: f64,
}

/// One window: radiance `[C, w, w]` and targets `[4, w, w]`, NaN where invalid.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchTile {
    pub meta: TileMeta,
    pub input: Vec<f32>,
    pub target: Vec<f32>,
}

fn nan_fraction(v: &[f32]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.iter().filter(|x| x.is_nan()).count() as f64 / v.len() as f64
}

impl PatchTile {
    pub fn channels(&self) -> usize {
        self.meta.bands.total()
    }

    pub fn input_nan_fraction(&self) -> f64 {
        nan_fraction(&self.input)
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.meta.window;
        let plane = w * w;
        if self.input.len() != self.channels() * plane || self.target.len() != L2_PLANES.len() * plane {
            return Err(Error::Data(format!(
                "tile {:?}: extents do not match {}×{w}×{w} / 4×{w}×{w}",
                self.meta.provenance.origin,
                self.channels()
            )));
        }
        let f = self.input_nan_fraction();
        if f >= self.meta.t_nan {
            return Err(Error::Data(format!(
                "tile {} {:?}: input NaN fraction {f} is not below {}",
                self.meta.provenance.l1b_id, self.meta.provenance.origin, self.meta.t_nan
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let w = self.meta.window;
        let arrays = [
            Array {
                name: "input".into(),
                shape: vec![self.channels(), w, w],
                data: ArrayData::F32(self.input.clone()),
            },
            Array {
                name: "target".into(),
                shape: vec![L2_PLANES.len(), w, w],
                data: ArrayData::F32(self.target.clone()),
            },
        ];
        container::write(path, TILE_MAGIC, &self.meta, &arrays)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, mut arrays): (TileMeta, _) = container::read(path, TILE_MAGIC)?;
        let w = meta.window;
        let input = container::take_f32(&mut arrays, "input", &[meta.bands.total(), w, w])?;
        let target = container::take_f32(&mut arrays, "target", &[L2_PLANES.len(), w, w])?;
        let t = Self { meta, input, target };
        t.validate()?;
        Ok(t)
    }

    /// Input `[C, w, w]` and target `[4, w, w]` tensors in the requested precision.
    pub fn tensors<T: Scalar>(&self) -> (Tensor<T>, Tensor<T>) {
        let w = self.meta.window;
        let cast = |v: &[f32]| v.iter().map(|&x| T::lit(f64::from(x))).collect::<Vec<T>>();
        (
            Tensor::new(vec![self.channels(), w, w], cast(&self.input)).expect("validated extents"),
            Tensor::new(vec![L2_PLANES.len(), w, w], cast(&self.target)).expect("validated extents"),
        )
    }
}

/// Which planes the NaN threshold is measured over.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NanScope {
    #[default]
    Input,
    Combined,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractOptions {
    pub window: usize,
    pub stride: usize,
    pub t_nan: f64,
    pub nan_scope: NanScope,
}

impl Default for ExtractOptions {
    fn default() -> Self {
        Self {
            window: WINDOW,
            stride: WINDOW,
            t_nan: T_NAN,
            nan_scope: NanScope::Input,
        }
    }
}

impl ExtractOptions {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.stride == 0 {
            return Err(Error::Config("window and stride must be positive".into()));
        }
        if !(self.t_nan > 0.0 && self.t_nan <= 1.0) {
            return Err(Error::Config(format!("t_nan = {} must lie in (0, 1]", self.t_nan)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Extraction {
    pub tiles: Vec<PatchTile>,
    pub kept: usize,
    pub discarded: usize,
}

/// Window origins along one axis: `i·stride` while the window fits.
pub fn window_origins(extent: usize, window: usize, stride: usize) -> Vec<usize> {
    if extent < window {
        return Vec::new();
    }
    (0..=(extent - window) / stride).map(|i| i * stride).collect()
}

fn crop(data: &[f32], channels: usize, (h, w): (usize, usize), (y0, x0): (usize, usize), win: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(channels * win * win);
    for c in 0..channels {
        for y in y0..y0 + win {
            let row = (c * h + y) * w;
            out.extend_from_slice(&data[row + x0..row + x0 + win]);
        }
    }
    out
}

/// Cuts aligned, already masked L1B/L2 granules into windows and keeps those
/// whose NaN fraction is below `t_nan`.
pub fn extract_patches(l1b: &GranuleRecord, l2: &GranuleRecord, opts: &ExtractOptions) -> Result<Extraction> {
    opts.validate()?;
    let (a, b) = (&l1b.meta, &l2.meta);
    if a.kind != GranuleKind::L1b || b.kind != GranuleKind::L2 {
        return Err(Error::Data(format!("expected an (L1B, L2) pair, got ({}, {})", a.id, b.id)));
    }
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::Data(format!(
            "granules {} and {} are not aligned: {}×{} vs {}×{}",
            a.id, b.id, a.height, a.width, b.height, b.width
        )));
    }
    let bands = a.bands.expect("validated L1B");
    let hw = (a.height, a.width);
    let rows = window_origins(hw.0, opts.window, opts.stride);
    let cols = window_origins(hw.1, opts.window, opts.stride);
    if rows.is_empty() || cols.is_empty() {
        log::warn!("granule {} ({}×{}) is smaller than the {} window", a.id, hw.0, hw.1, opts.window);
    }
    let mut out = Extraction::default();
    for &y in &rows {
        for &x in &cols {
            let input = crop(&l1b.data, bands.total(), hw, (y, x), opts.window);
            let target = crop(&l2.data, L2_PLANES.len(), hw, (y, x), opts.window);
            let frac = match opts.nan_scope {
                NanScope::Input => nan_fraction(&input),
                NanScope::Combined => {
                    let n = input.iter().chain(&target).filter(|v| v.is_nan()).count();
                    n as f64 / (input.len() + target.len()) as f64
                }
            };
            if frac >= opts.t_nan {
                out.discarded += 1;
                continue;
            }
            out.kept += 1;
            out.tiles.push(PatchTile {
                meta: TileMeta {
                    provenance: Provenance {
                        l1b_id: a.id.clone(),
                        l2_id: b.id.clone(),
                        origin: [y, x],
                        l1b_timestamp: a.timestamp,
                        l2_timestamp: b.timestamp,
                        date: a.date.clone(),
                    },
                    bands,
                    window: opts.window,
                    t_nan: opts.t_nan,
                },
                input,
                target,
            });
        }
    }
    Ok(out)
}
