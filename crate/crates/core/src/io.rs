//! On-disk formats.
//!
//! Every array is a raw little-endian `f32` payload (`name.vol`) next to a JSON
//! sidecar (`name.vol.json`) describing its shape:
//!
//! ```json
//! {"dims": [64, 64, 64], "spacing": [3.0, 3.0, 3.0], "origin": [-94.5, -94.5, -94.5]}
//! ```
//!
//! Volumes are x-fastest. Views are stored as `[W, H, 1]`, w-fastest. Ray
//! volumes are stored as `[W, H, S]` with `"layout": "rays"` and are
//! s-fastest within each pixel. In-memory values are `f64`; the payload keeps
//! `f32` precision, so reading back a written file and writing it again
//! reproduces the same bytes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Grid3, RayVolume, View, Volume3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub dims: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spacing: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layout: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_len: Option<f64>,
}

impl Sidecar {
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let s: Sidecar = serde_json::from_slice(bytes).map_err(|e| Error::Sidecar(e.to_string()))?;
        if s.dims.len() != 3 {
            return Err(Error::Sidecar(format!("expected 3 dims, got {}", s.dims.len())));
        }
        if s.dims.contains(&0) {
            return Err(Error::Sidecar("dims must be >= 1".into()));
        }
        Ok(s)
    }

    /// Number of payload bytes implied by `dims`.
    pub fn payload_len(&self) -> Result<usize> {
        self.dims
            .iter()
            .try_fold(4usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Sidecar("dims overflow".into()))
    }

    fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("sidecar serializes")
    }
}

pub fn encode_payload(values: &[f64]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(values.len() * 4);
    for &v in values {
        let f = v as f32;
        if !f.is_finite() {
            return Err(Error::param(format!("value {v} not representable as finite f32")));
        }
        out.extend_from_slice(&f.to_le_bytes());
    }
    Ok(out)
}

/// Decode a payload checked against its sidecar.
pub fn decode_payload(sidecar: &Sidecar, payload: &[u8]) -> Result<Vec<f64>> {
    let expected = sidecar.payload_len()?;
    if payload.len() != expected {
        return Err(Error::SizeMismatch {
            expected,
            actual: payload.len(),
        });
    }
    payload
        .chunks_exact(4)
        .map(|c| {
            let f = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            if f.is_finite() {
                Ok(f as f64)
            } else {
                Err(Error::param("payload contains non-finite values"))
            }
        })
        .collect()
}

/// `foo.vol` -> `foo.vol.json`
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn write_pair(path: &Path, sidecar: &Sidecar, payload: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(payload)?;
    fs::write(sidecar_path(path), sidecar.to_json())?;
    Ok(())
}

fn read_pair(path: &Path) -> Result<(Vec<u8>, Vec<u8>)> {
    let sc = sidecar_path(path);
    let header = fs::read(&sc).map_err(|e| Error::Sidecar(format!("{}: {e}", sc.display())))?;
    let payload = fs::read(path)?;
    Ok((header, payload))
}

impl Volume3 {
    pub fn sidecar(&self) -> Sidecar {
        let g = self.grid();
        Sidecar {
            dims: g.dims.to_vec(),
            spacing: Some(g.spacing),
            origin: Some(g.origin),
            layout: None,
            step_len: None,
        }
    }

    pub fn decode(header: &[u8], payload: &[u8]) -> Result<Self> {
        let sc = Sidecar::parse(header)?;
        if sc.layout.as_deref().is_some_and(|l| l != "volume") {
            return Err(Error::Sidecar("not a volume sidecar".into()));
        }
        let spacing = sc.spacing.unwrap_or([1.0; 3]);
        let origin = sc.origin.unwrap_or([0.0; 3]);
        let grid = Grid3::new([sc.dims[0], sc.dims[1], sc.dims[2]], spacing, origin)
            .map_err(|e| Error::Sidecar(e.to_string()))?;
        let data = decode_payload(&sc, payload)?;
        Volume3::from_data(grid, data)
    }
}

pub fn write_volume(vol: &Volume3, path: impl AsRef<Path>) -> Result<()> {
    write_pair(path.as_ref(), &vol.sidecar(), &encode_payload(vol.data())?)
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume3> {
    let (h, p) = read_pair(path.as_ref())?;
    Volume3::decode(&h, &p)
}

impl View {
    pub fn sidecar(&self) -> Sidecar {
        Sidecar {
            dims: vec![self.width, self.height, 1],
            spacing: None,
            origin: None,
            layout: Some("view".into()),
            step_len: None,
        }
    }

    pub fn decode(header: &[u8], payload: &[u8]) -> Result<Self> {
        let sc = Sidecar::parse(header)?;
        if sc.dims[2] != 1 {
            return Err(Error::Sidecar("view sidecar must have dims [W, H, 1]".into()));
        }
        let data = decode_payload(&sc, payload)?;
        View::from_data(sc.dims[0], sc.dims[1], data)
    }
}

pub fn write_view(view: &View, path: impl AsRef<Path>) -> Result<()> {
    write_pair(path.as_ref(), &view.sidecar(), &encode_payload(&view.data)?)
}

pub fn read_view(path: impl AsRef<Path>) -> Result<View> {
    let (h, p) = read_pair(path.as_ref())?;
    View::decode(&h, &p)
}

impl RayVolume {
    pub fn sidecar(&self) -> Sidecar {
        Sidecar {
            dims: vec![self.width, self.height, self.steps],
            spacing: None,
            origin: None,
            layout: Some("rays".into()),
            step_len: Some(self.step_len),
        }
    }

    pub fn decode(header: &[u8], payload: &[u8]) -> Result<Self> {
        let sc = Sidecar::parse(header)?;
        if sc.layout.as_deref() != Some("rays") {
            return Err(Error::Sidecar("ray volume sidecar needs layout \"rays\"".into()));
        }
        let data = decode_payload(&sc, payload)?;
        RayVolume::from_data(sc.dims[0], sc.dims[1], sc.dims[2], sc.step_len.unwrap_or(0.0), data)
    }
}

pub fn write_rays(r: &RayVolume, path: impl AsRef<Path>) -> Result<()> {
    write_pair(path.as_ref(), &r.sidecar(), &encode_payload(&r.data)?)
}

pub fn read_rays(path: impl AsRef<Path>) -> Result<RayVolume> {
    let (h, p) = read_pair(path.as_ref())?;
    RayVolume::decode(&h, &p)
}

/// Binary PGM of the axial slice `z`, linearly mapped from `[lo, hi]` to 0..255.
pub fn write_pgm_slice(vol: &Volume3, z: usize, (lo, hi): (f64, f64), path: impl AsRef<Path>) -> Result<()> {
    let [nx, ny, nz] = vol.dims();
    if z >= nz {
        return Err(Error::IndexOutOfRange {
            what: "slice",
            index: z,
            limit: nz,
        });
    }
    let scale = if hi > lo { 255.0 / (hi - lo) } else { 0.0 };
    let mut out = format!("P5\n{nx} {ny}\n255\n").into_bytes();
    for y in (0..ny).rev() {
        for x in 0..nx {
            let v = ((vol.get(x, y, z) - lo) * scale).round().clamp(0.0, 255.0);
            out.push(v as u8);
        }
    }
    if let Some(parent) = path.as_ref().parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, out)?;
    Ok(())
}
