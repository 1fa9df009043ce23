//! Dense flow fields and the EVAF file format.

use std::path::Path;

use thiserror::Error;

use crate::events::SensorGeometry;

pub const EVAF_MAGIC: [u8; 4] = *b"EVAF";
const EVAF_HEADER_LEN: usize = 4 + 8 + 1 + 8;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("flow is {found} but {expected} was expected")]
    Shape {
        expected: SensorGeometry,
        found: SensorGeometry,
    },
    #[error("duration must be positive and finite, got {0}")]
    Duration(f64),
    #[error("plane has {found} values, expected {expected}")]
    PlaneLength { expected: usize, found: usize },
    #[error("malformed flow file: {0}")]
    Format(String),
    #[error("non-finite flow value at valid pixel {0}")]
    NonFinite(usize),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, FlowError>;

/// Per-pixel displacement `(u, v)` in pixels accumulated over `duration`
/// seconds, with a validity mask for sparse ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    geometry: SensorGeometry,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub valid: Vec<bool>,
    duration: f64,
}

impl FlowField {
    pub fn new(geometry: SensorGeometry, u: Vec<f64>, v: Vec<f64>, duration: f64) -> Result<Self> {
        let valid = vec![true; geometry.pixels()];
        Self::with_mask(geometry, u, v, valid, duration)
    }

    pub fn with_mask(
        geometry: SensorGeometry,
        u: Vec<f64>,
        v: Vec<f64>,
        valid: Vec<bool>,
        duration: f64,
    ) -> Result<Self> {
        let n = geometry.pixels();
        for len in [u.len(), v.len(), valid.len()] {
            if len != n {
                return Err(FlowError::PlaneLength { expected: n, found: len });
            }
        }
        if !(duration > 0.0 && duration.is_finite()) {
            return Err(FlowError::Duration(duration));
        }
        Ok(FlowField { geometry, u, v, valid, duration })
    }

    pub fn zeros(geometry: SensorGeometry, duration: f64) -> Result<Self> {
        let n = geometry.pixels();
        Self::new(geometry, vec![0.0; n], vec![0.0; n], duration)
    }

    pub fn uniform(geometry: SensorGeometry, du: f64, dv: f64, duration: f64) -> Result<Self> {
        let n = geometry.pixels();
        Self::new(geometry, vec![du; n], vec![dv; n], duration)
    }

    pub fn from_fn(
        geometry: SensorGeometry,
        duration: f64,
        mut f: impl FnMut(usize, usize) -> (f64, f64),
    ) -> Result<Self> {
        let (w, h) = (geometry.width as usize, geometry.height as usize);
        let mut u = Vec::with_capacity(w * h);
        let mut v = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let (a, b) = f(x, y);
                u.push(a);
                v.push(b);
            }
        }
        Self::new(geometry, u, v, duration)
    }

    pub fn geometry(&self) -> SensorGeometry {
        self.geometry
    }

    pub fn duration(&self) -> f64 {
        self.duration
    }

    pub fn width(&self) -> usize {
        self.geometry.width as usize
    }

    pub fn height(&self) -> usize {
        self.geometry.height as usize
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> (f64, f64) {
        let i = y * self.width() + x;
        (self.u[i], self.v[i])
    }

    pub fn n_valid(&self) -> usize {
        self.valid.iter().filter(|&&m| m).count()
    }

    /// Same displacement multiplied by `s` (duration unchanged).
    pub fn scaled(&self, s: f64) -> FlowField {
        FlowField {
            geometry: self.geometry,
            u: self.u.iter().map(|a| a * s).collect(),
            v: self.v.iter().map(|a| a * s).collect(),
            valid: self.valid.clone(),
            duration: self.duration,
        }
    }

    pub fn with_duration(mut self, duration: f64) -> Result<FlowField> {
        if !(duration > 0.0 && duration.is_finite()) {
            return Err(FlowError::Duration(duration));
        }
        self.duration = duration;
        Ok(self)
    }

    pub fn check_same_geometry(&self, other: &FlowField) -> Result<()> {
        if self.geometry != other.geometry {
            return Err(FlowError::Shape { expected: self.geometry, found: other.geometry });
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.u.iter().chain(&self.v).zip(self.valid.iter().chain(&self.valid)).all(|(a, &m)| !m || a.is_finite())
    }
}

/// Encodes as EVAF, writing a mask section only when some pixel is invalid.
pub fn encode_evaf(flow: &FlowField) -> Vec<u8> {
    let has_mask = flow.valid.iter().any(|&m| !m);
    encode_evaf_with(flow, has_mask)
}

pub fn encode_evaf_with(flow: &FlowField, has_mask: bool) -> Vec<u8> {
    let n = flow.geometry.pixels();
    let mut out = Vec::with_capacity(EVAF_HEADER_LEN + n * 9);
    out.extend_from_slice(&EVAF_MAGIC);
    out.extend_from_slice(&flow.geometry.height.to_le_bytes());
    out.extend_from_slice(&flow.geometry.width.to_le_bytes());
    out.push(has_mask as u8);
    out.extend_from_slice(&flow.duration.to_le_bytes());
    for plane in [&flow.u, &flow.v] {
        for &a in plane.iter() {
            out.extend_from_slice(&(a as f32).to_le_bytes());
        }
    }
    if has_mask {
        out.extend(flow.valid.iter().map(|&m| m as u8));
    }
    out
}

pub fn decode_evaf(bytes: &[u8]) -> Result<FlowField> {
    let bad = |m: String| FlowError::Format(m);
    if bytes.len() < EVAF_HEADER_LEN {
        return Err(bad(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if bytes[..4] != EVAF_MAGIC {
        return Err(bad("bad magic".into()));
    }
    let height = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    let width = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    let has_mask = match bytes[12] {
        0 => false,
        1 => true,
        b => return Err(bad(format!("has_mask byte {b}"))),
    };
    let duration = f64::from_le_bytes(bytes[13..21].try_into().unwrap());
    let geometry = SensorGeometry::new(width, height).map_err(|e| bad(e.to_string()))?;
    let n = geometry.pixels() as u128;
    let expected = n * 8 + if has_mask { n } else { 0 };
    let body = &bytes[EVAF_HEADER_LEN..];
    if body.len() as u128 != expected {
        return Err(bad(format!("expected {expected} body bytes, found {}", body.len())));
    }
    let n = n as usize;
    let plane = |off: usize| -> Vec<f64> {
        body[off..off + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect()
    };
    let u = plane(0);
    let v = plane(4 * n);
    let valid = if has_mask {
        body[8 * n..]
            .iter()
            .map(|&b| match b {
                0 => Ok(false),
                1 => Ok(true),
                b => Err(bad(format!("mask byte {b}"))),
            })
            .collect::<Result<Vec<bool>>>()?
    } else {
        vec![true; n]
    };
    let flow = FlowField::with_mask(geometry, u, v, valid, duration)?;
    if let Some(i) = (0..n).find(|&i| flow.valid[i] && !(flow.u[i].is_finite() && flow.v[i].is_finite())) {
        return Err(FlowError::NonFinite(i));
    }
    Ok(flow)
}

pub fn save_flow(path: &Path, flow: &FlowField) -> Result<()> {
    std::fs::write(path, encode_evaf(flow))?;
    Ok(())
}

pub fn load_flow(path: &Path) -> Result<FlowField> {
    decode_evaf(&std::fs::read(path)?)
}
