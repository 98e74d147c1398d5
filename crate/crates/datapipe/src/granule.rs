//! Granule records and their on-disk form.
//!
//! An L1B granule holds top-of-atmosphere radiance ordered blue | red | SWIR
//! with one quality byte per band and pixel. An L2 granule holds the four cloud
//! property planes with one quality byte per plane and pixel. Array names follow
//! the PACE OCI variables they stand in for:
//!
//! | array | PACE product variable |
//! |---|---|
//! | `rhot_blue`, `qual_blue` | `PACE_OCI_L1B_SCI` `observation_data/rhot_blue`, `qual_blue` |
//! | `rhot_red`, `qual_red` | `observation_data/rhot_red`, `qual_red` |
//! | `rhot_SWIR`, `qual_SWIR` | `observation_data/rhot_SWIR`, `qual_SWIR` |
//! | `cot_21`, `cer_21`, `cwp`, `cth` | `PACE_OCI_L2_CLOUD` `geophysical_data/…` |
//!
//! L2 quality arrays carry the plane name prefixed with `qual_`.

use std::path::Path;

use hyperfm::group::BandProfile;
use hyperfm::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::container::{self, Array, ArrayData};

pub const GRANULE_MAGIC: &[u8; 8] = b"HSPGRAN1";

/// L2 plane names in task order (COT, CER, CWP, CTH).
pub const L2_PLANES: [&str; 4] = ["cot_21", "cer_21", "cwp", "cth"];
const L1B_GROUPS: [&str; 3] = ["blue", "red", "SWIR"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GranuleKind {
    #[serde(rename = "L1B")]
    L1b,
    #[serde(rename = "L2")]
    L2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GranuleMeta {
    pub id: String,
    pub kind: GranuleKind,
    /// Seconds since the Unix epoch.
    pub timestamp: i64,
    /// Acquisition day, `YYYY-MM-DD`.
    pub date: String,
    pub height: usize,
    pub width: usize,
    /// Band table of an L1B granule.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bands: Option<BandProfile>,
}

impl GranuleMeta {
    pub fn channels(&self) -> usize {
        match self.kind {
            GranuleKind::L1b => self.bands.map_or(0, |b| b.total()),
            GranuleKind::L2 => L2_PLANES.len(),
        }
    }
}

/// A granule with its payload `[channels, H, W]` and matching quality flags.
#[derive(Clone, Debug, PartialEq)]
pub struct GranuleRecord {
    pub meta: GranuleMeta,
    pub data: Vec<f32>,
    pub flags: Vec<u8>,
}

impl GranuleRecord {
    pub fn new(meta: GranuleMeta, data: Vec<f32>, flags: Vec<u8>) -> Result<Self> {
        let r = Self { meta, data, flags };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.meta;
        if m.kind == GranuleKind::L1b && m.bands.is_none() {
            return Err(Error::Data(format!("L1B granule {} has no band table", m.id)));
        }
        if m.kind == GranuleKind::L2 && m.bands.is_some() {
            return Err(Error::Data(format!("L2 granule {} carries a band table", m.id)));
        }
        let n = m.channels() * m.height * m.width;
        if self.data.len() != n || self.flags.len() != n {
            return Err(Error::Data(format!(
                "granule {}: payload {} and flags {} elements, expected {n}",
                m.id,
                self.data.len(),
                self.flags.len()
            )));
        }
        Ok(())
    }

    pub fn plane(&self) -> usize {
        self.meta.height * self.meta.width
    }

    /// Sets flagged pixels to NaN: L1B where the flag equals 1, L2 where it is
    /// nonzero. Idempotent.
    pub fn mask_invalid(mut self) -> Self {
        let invalid: fn(u8) -> bool = match self.meta.kind {
            GranuleKind::L1b => |q| q == 1,
            GranuleKind::L2 => |q| q != 0,
        };
        for (v, &q) in self.data.iter_mut().zip(&self.flags) {
            if invalid(q) {
                *v = f32::NAN;
            }
        }
        self
    }

    fn array_names(&self) -> Vec<(String, String, usize)> {
        match self.meta.kind {
            GranuleKind::L1b => {
                let counts = self.meta.bands.expect("validated").counts();
                L1B_GROUPS
                    .iter()
                    .zip(counts)
                    .map(|(g, c)| (format!("rhot_{g}"), format!("qual_{g}"), c))
                    .collect()
            }
            GranuleKind::L2 => L2_PLANES
                .iter()
                .map(|p| (p.to_string(), format!("qual_{p}"), 1))
                .collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let (h, w) = (self.meta.height, self.meta.width);
        let plane = self.plane();
        let mut arrays = Vec::new();
        let mut start = 0;
        for (name, qual, c) in self.array_names() {
            let span = start * plane..(start + c) * plane;
            let shape = if self.meta.kind == GranuleKind::L1b {
                vec![c, h, w]
            } else {
                vec![h, w]
            };
            arrays.push(Array {
                name,
                shape: shape.clone(),
                data: ArrayData::F32(self.data[span.clone()].to_vec()),
            });
            arrays.push(Array {
                name: qual,
                shape,
                data: ArrayData::U8(self.flags[span].to_vec()),
            });
            start += c;
        }
        container::write(path, GRANULE_MAGIC, &self.meta, &arrays)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, mut arrays): (GranuleMeta, _) = container::read(path, GRANULE_MAGIC)?;
        let (h, w) = (meta.height, meta.width);
        let mut r = Self {
            meta,
            data: Vec::new(),
            flags: Vec::new(),
        };
        if r.meta.kind == GranuleKind::L1b && r.meta.bands.is_none() {
            return Err(Error::Data(format!("{}: L1B granule has no band table", path.display())));
        }
        for (name, qual, c) in r.array_names() {
            let shape = if r.meta.kind == GranuleKind::L1b {
                vec![c, h, w]
            } else {
                vec![h, w]
            };
            r.data.extend(container::take_f32(&mut arrays, &name, &shape)?);
            r.flags.extend(container::take_u8(&mut arrays, &qual, &shape)?);
        }
        r.validate()?;
        Ok(r)
    }
}
