//! Procedural granule pairs for desk-scale runs.
//!
//! A scene is a smooth, band-correlated clear-sky background with elliptical
//! cloud blobs. Inside a blob the cloud optical thickness, effective radius,
//! water path and top height vary together with a radial profile, and the
//! radiance rises with optical thickness while the SWIR bands absorb more for
//! larger droplets. Targets are NaN outside clouds. A configurable fraction of
//! quality flags is corrupted.

use std::fs;
use std::path::{Path, PathBuf};

use hyperfm::group::BandProfile;
use hyperfm::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::granule::{GranuleKind, GranuleMeta, GranuleRecord};

pub const TRAIN_DATES: [&str; 12] = [
    "2024-05-10",
    "2024-06-10",
    "2024-07-10",
    "2024-08-10",
    "2024-09-11",
    "2024-10-10",
    "2024-11-10",
    "2024-12-10",
    "2025-01-10",
    "2025-02-10",
    "2025-03-10",
    "2025-04-10",
];
pub const VAL_DATES: [&str; 2] = ["2025-02-28", "2025-04-28"];
pub const TEST_DATES: [&str; 2] = ["2025-02-20", "2025-03-20"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn of_date(date: &str) -> Option<Split> {
        if TRAIN_DATES.contains(&date) {
            Some(Split::Train)
        } else if VAL_DATES.contains(&date) {
            Some(Split::Val)
        } else if TEST_DATES.contains(&date) {
            Some(Split::Test)
        } else {
            None
        }
    }
}

/// Acquisition days in the order synthetic granules cycle through them, so a
/// short run already touches every split.
pub fn date_cycle() -> [&'static str; 16] {
    let t = TRAIN_DATES;
    [
        t[0], t[1], t[2], VAL_DATES[0], t[3], t[4], t[5], TEST_DATES[0], t[6], t[7], t[8], VAL_DATES[1], t[9],
        t[10], t[11], TEST_DATES[1],
    ]
}

/// Seconds since the epoch at midnight UTC of a `YYYY-MM-DD` day.
pub fn date_to_epoch(date: &str) -> Result<i64> {
    let bad = || Error::Data(format!("malformed date {date:?}"));
    let mut it = date.split('-').map(|p| p.parse::<i64>().map_err(|_| bad()));
    let (y, m, d) = match (it.next(), it.next(), it.next(), it.next()) {
        (Some(y), Some(m), Some(d), None) => (y?, m?, d?),
        _ => return Err(bad()),
    };
    if !(1..=12).contains(&m) || !(1..=31).contains(&d) {
        return Err(bad());
    }
    // days from civil, proleptic Gregorian
    let y = if m <= 2 { y - 1 } else { y };
    let era = y.div_euclid(400);
    let yoe = y - era * 400;
    let mp = (m + 9) % 12;
    let doy = (153 * mp + 2) / 5 + d - 1;
    let doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    Ok((era * 146_097 + doe - 719_468) * 86_400)
}

/// Centre wavelength in nm of band `b` (blue 314–605, red 600–895, SWIR 940–2258).
pub fn wavelength(bands: &BandProfile, b: usize) -> f64 {
    let lerp = |i: usize, n: usize, lo: f64, hi: f64| {
        if n <= 1 {
            lo
        } else {
            lo + (hi - lo) * i as f64 / (n - 1) as f64
        }
    };
    if b < bands.blue {
        lerp(b, bands.blue, 314.0, 605.0)
    } else if b < bands.blue + bands.red {
        lerp(b - bands.blue, bands.red, 600.0, 895.0)
    } else {
        lerp(b - bands.blue - bands.red, bands.swir, 940.0, 2258.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub id: String,
    pub timestamp: i64,
    pub date: String,
    pub height: usize,
    pub width: usize,
    pub bands: BandProfile,
    pub seed: u64,
    pub cloud_fraction: f64,
    pub flag_fraction: f64,
}

struct Blob {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
    tau: f64,
    cer: f64,
    cth: f64,
}

impl Blob {
    /// `1 − r²` inside the ellipse, `None` outside.
    fn profile(&self, y: f64, x: f64) -> Option<f64> {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = (dx * self.cos + dy * self.sin) / self.a;
        let v = (-dx * self.sin + dy * self.cos) / self.b;
        let r2 = u * u + v * v;
        (r2 < 1.0).then_some(1.0 - r2)
    }
}

/// Dominant blob and its profile per pixel.
fn cloud_field(rng: &mut ChaCha8Rng, h: usize, w: usize, target: f64) -> (Vec<Blob>, Vec<Option<(usize, f64)>>) {
    let mut blobs = Vec::new();
    let mut field: Vec<Option<(usize, f64)>> = vec![None; h * w];
    let total = (h * w) as f64;
    let mut covered = 0usize;
    let side = h.min(w) as f64;
    while (covered as f64) / total < target && blobs.len() < 400 {
        let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let blob = Blob {
            cy: rng.random_range(0.0..h as f64),
            cx: rng.random_range(0.0..w as f64),
            a: side * rng.random_range(0.08..0.25),
            b: side * rng.random_range(0.08..0.25),
            cos: theta.cos(),
            sin: theta.sin(),
            tau: rng.random_range(0.5..1.0),
            cer: rng.random_range(6.0..20.0),
            cth: rng.random_range(1500.0..9000.0),
        };
        let mut next = field.clone();
        let mut next_cov = covered;
        let id = blobs.len();
        for (i, cell) in next.iter_mut().enumerate() {
            let (y, x) = ((i / w) as f64 + 0.5, (i % w) as f64 + 0.5);
            if let Some(p) = blob.profile(y, x) {
                match cell {
                    None => {
                        *cell = Some((id, p));
                        next_cov += 1;
                    }
                    Some((_, q)) if *q < p => *cell = Some((id, p)),
                    _ => {}
                }
            }
        }
        let before = (covered as f64 / total - target).abs();
        let after = (next_cov as f64 / total - target).abs();
        if after > before && next_cov as f64 / total > target {
            break;
        }
        blobs.push(blob);
        field = next;
        covered = next_cov;
    }
    (blobs, field)
}

/// Builds an aligned (L1B, L2) pair; the L2 granule shares id stem and timestamp.
pub fn synth_scene(spec: &SceneSpec) -> Result<(GranuleRecord, GranuleRecord)> {
    if !(0.0..=1.0).contains(&spec.cloud_fraction) || !(0.0..=1.0).contains(&spec.flag_fraction) {
        return Err(Error::Config("cloud and flag fractions must lie in [0, 1]".into()));
    }
    let (h, w) = (spec.height, spec.width);
    let plane = h * w;
    let c = spec.bands.total();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (blobs, field) = cloud_field(&mut rng, h, w, spec.cloud_fraction);
    let (f1, f2): (f64, f64) = (rng.random_range(0.5..2.0), rng.random_range(0.5..2.0));
    let (p1, p2): (f64, f64) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
    let lambdas: Vec<f64> = (0..c).map(|b| wavelength(&spec.bands, b)).collect();

    let mut targets = vec![f32::NAN; 4 * plane];
    let mut radiance = vec![0.0f32; c * plane];
    for i in 0..plane {
        let (y, x) = ((i / w) as f64 / h as f64, (i % w) as f64 / w as f64);
        let surface = 0.5
            + 0.2 * (2.0 * std::f64::consts::PI * (y * f1 + p1)).sin() * (2.0 * std::f64::consts::PI * (x * f2 + p2)).cos();
        let cloud = field[i].map(|(id, p)| {
            let b = &blobs[id];
            let cot = 2.0 + 48.0 * b.tau * p.powf(1.5);
            let cer = b.cer + 4.0 * p;
            let cwp = 2.0 / 3.0 * cot * cer;
            let cth = b.cth + 500.0 * p;
            (cot, cer, cwp, cth)
        });
        if let Some((cot, cer, cwp, cth)) = cloud {
            for (k, v) in [cot, cer, cwp, cth].into_iter().enumerate() {
                targets[k * plane + i] = v as f32;
            }
        }
        for (band, &lam) in lambdas.iter().enumerate() {
            let rayleigh = 0.08 * (400.0 / lam).powi(4);
            let clear = rayleigh + surface * if lam > 700.0 { 0.3 } else { 0.1 };
            let value = match cloud {
                Some((cot, cer, _, _)) => {
                    let albedo = cot / (cot + 7.0);
                    let absorb = if lam > 1000.0 { (lam - 1000.0) / 1300.0 * cer / 30.0 } else { 0.0 };
                    clear * (1.0 - albedo) + 0.9 * albedo * (1.0 - absorb)
                }
                None => clear,
            };
            let noise: f64 = rng.random_range(-0.002..0.002);
            radiance[band * plane + i] = (value + noise) as f32;
        }
    }

    let mut l1_flags = vec![0u8; c * plane];
    let mut l2_flags = vec![0u8; 4 * plane];
    for i in 0..plane {
        let roll: f64 = rng.random();
        // flag 2 marks a non-fatal condition that the L1B masking rule keeps
        let flag = if roll < spec.flag_fraction {
            1
        } else if roll < 1.5 * spec.flag_fraction {
            2
        } else {
            0
        };
        if flag != 0 {
            for b in 0..c {
                l1_flags[b * plane + i] = flag;
            }
        }
        for k in 0..4 {
            if rng.random::<f64>() < spec.flag_fraction {
                l2_flags[k * plane + i] = 1;
            }
        }
    }
    let meta = |kind, suffix: &str, bands| GranuleMeta {
        id: format!("{}.{suffix}", spec.id),
        kind,
        timestamp: spec.timestamp,
        date: spec.date.clone(),
        height: h,
        width: w,
        bands,
    };
    Ok((
        GranuleRecord::new(meta(GranuleKind::L1b, "L1B", Some(spec.bands)), radiance, l1_flags)?,
        GranuleRecord::new(meta(GranuleKind::L2, "L2", None), targets, l2_flags)?,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_pairs: usize,
    pub cloud_fraction: f64,
    pub height: usize,
    pub width: usize,
    pub bands: BandProfile,
    pub flag_fraction: f64,
    /// L2 timestamps are offset from their L1B by up to this many seconds.
    pub max_offset_s: i64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_pairs: 4,
            cloud_fraction: 0.6,
            height: 192,
            width: 192,
            bands: BandProfile::PACE,
            flag_fraction: 0.002,
            max_offset_s: 5,
        }
    }
}

/// `n_pairs` scenes cycling through the split dates.
pub fn synth_granules(cfg: &SynthConfig) -> Result<Vec<(GranuleRecord, GranuleRecord)>> {
    if cfg.height < 1 || cfg.width < 1 {
        return Err(Error::Config("granule extents must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dates = date_cycle();
    (0..cfg.n_pairs)
        .map(|i| {
            let date = dates[i % dates.len()];
            let t = date_to_epoch(date)? + 43_200 + 300 * (i / dates.len()) as i64;
            let spec = SceneSpec {
                id: format!("SYNTH_OCI.{}.{i:04}", date.replace('-', "")),
                timestamp: t,
                date: date.into(),
                height: cfg.height,
                width: cfg.width,
                bands: cfg.bands,
                seed: rng.random(),
                cloud_fraction: cfg.cloud_fraction,
                flag_fraction: cfg.flag_fraction,
            };
            let offset = rng.random_range(-cfg.max_offset_s..=cfg.max_offset_s);
            let (a, mut b) = synth_scene(&spec)?;
            b.meta.timestamp += offset;
            Ok((a, b))
        })
        .collect()
}

/// Writes each pair as `l1b/<id>.gran` and `l2/<id>.gran` under `dir`.
pub fn write_granules(dir: &Path, pairs: &[(GranuleRecord, GranuleRecord)]) -> Result<Vec<PathBuf>> {
    let (d1, d2) = (dir.join("l1b"), dir.join("l2"));
    fs::create_dir_all(&d1)?;
    fs::create_dir_all(&d2)?;
    let mut paths = Vec::new();
    for (a, b) in pairs {
        for (g, d) in [(a, &d1), (b, &d2)] {
            let p = d.join(format!("{}.gran", g.meta.id));
            g.save(&p)?;
            paths.push(p);
        }
    }
    Ok(paths)
}
