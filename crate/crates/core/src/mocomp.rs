//! Bilinear sampling, backward warping, motion-compensated event frames and
//! the variance-ratio flow quality scores (FWL and its count-normalized
//! rectified variant, RFWL).

use std::io::Write;

use thiserror::Error;

use crate::events::{EventWindow, SensorGeometry};
use crate::flow::FlowField;

#[derive(Debug, Error)]
pub enum MocompError {
    #[error("flow is {flow} but events are {events}")]
    Geometry {
        flow: SensorGeometry,
        events: SensorGeometry,
    },
    #[error("raster has {found} values, expected {expected}")]
    Shape { expected: usize, found: usize },
    #[error("window has no events")]
    EmptyWindow,
    #[error("zero-flow frame has zero variance; the ratio is undefined")]
    ZeroVariance,
    #[error("{which} frame has zero total count")]
    ZeroCount { which: &'static str },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MocompError>;

/// Four-neighbour bilinear interpolation of a row-major `width x height`
/// raster. Positions outside `[0, W-1] x [0, H-1]` sample as zero.
#[inline]
pub fn bilinear_sample(raster: &[f64], width: usize, height: usize, x: f64, y: f64) -> f64 {
    match bilinear_taps(width, height, x, y) {
        Some(t) => t.iter().map(|&(i, w)| raster[i] * w).sum(),
        None => 0.0,
    }
}

/// Indices and weights of the four bilinear neighbours, or `None` when the
/// position lies outside the raster. Neighbours past the last row/column only
/// ever carry zero weight and are clamped.
#[inline]
pub fn bilinear_taps(width: usize, height: usize, x: f64, y: f64) -> Option<[(usize, f64); 4]> {
    if !(x >= 0.0 && y >= 0.0 && x <= (width - 1) as f64 && y <= (height - 1) as f64) {
        return None;
    }
    let x0 = (x.floor() as usize).min(width - 1);
    let y0 = (y.floor() as usize).min(height - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    Some([
        (y0 * width + x0, (1.0 - fx) * (1.0 - fy)),
        (y0 * width + x1, fx * (1.0 - fy)),
        (y1 * width + x0, (1.0 - fx) * fy),
        (y1 * width + x1, fx * fy),
    ])
}

/// Backward warp of a `channels x H x W` feature: output(c, y, x) samples
/// channel c of the input at `(x + u, y + v)`.
pub fn backward_warp(input: &[f64], channels: usize, flow: &FlowField) -> Result<Vec<f64>> {
    let (w, h) = (flow.width(), flow.height());
    let n = w * h;
    if input.len() != channels * n {
        return Err(MocompError::Shape { expected: channels * n, found: input.len() });
    }
    let mut out = vec![0.0; input.len()];
    for y in 0..h {
        for x in 0..w {
            let (u, v) = flow.at(x, y);
            if let Some(taps) = bilinear_taps(w, h, x as f64 + u, y as f64 + v) {
                for c in 0..channels {
                    let src = &input[c * n..(c + 1) * n];
                    out[c * n + y * w + x] = taps.iter().map(|&(i, wt)| src[i] * wt).sum();
                }
            }
        }
    }
    Ok(out)
}

/// Motion-compensated event count image.
#[derive(Debug, Clone, PartialEq)]
pub struct McFrame {
    pub counts: Vec<f64>,
    pub geometry: SensorGeometry,
    /// Events splatted into the frame.
    pub n_in: usize,
    /// Events offered.
    pub n_total: usize,
    pub t_ref: f64,
}

impl McFrame {
    pub fn sum(&self) -> f64 {
        self.counts.iter().sum()
    }

    /// Population variance over all pixels.
    pub fn variance(&self) -> f64 {
        population_variance(self.counts.iter().copied())
    }

    /// Variance of the frame divided by its own total count.
    pub fn normalized_variance(&self) -> Result<f64> {
        let s = self.sum();
        if s <= 0.0 {
            return Err(MocompError::ZeroCount { which: "compensated" });
        }
        Ok(population_variance(self.counts.iter().map(|c| c / s)))
    }

    /// 16-bit binary PGM, scaled so the brightest pixel maps to 65535.
    pub fn write_pgm<W: Write>(&self, out: &mut W) -> Result<()> {
        let (w, h) = (self.geometry.width, self.geometry.height);
        write!(out, "P5\n{w} {h}\n65535\n")?;
        let max = self.counts.iter().cloned().fold(0.0f64, f64::max);
        let scale = if max > 0.0 { 65535.0 / max } else { 0.0 };
        let mut buf = Vec::with_capacity(self.counts.len() * 2);
        for &c in &self.counts {
            buf.extend_from_slice(&((c * scale).round().clamp(0.0, 65535.0) as u16).to_be_bytes());
        }
        out.write_all(&buf)?;
        Ok(())
    }
}

pub fn population_variance(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let mut n = 0usize;
    let mut sum = 0.0;
    for v in values.clone() {
        sum += v;
        n += 1;
    }
    if n == 0 {
        return 0.0;
    }
    let mean = sum / n as f64;
    values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64
}

/// Moves every event to `t_ref` along the flow sampled at its own position
/// and splats a unit count bilinearly. Events that land outside the sensor
/// are dropped.
pub fn motion_compensate(window: &EventWindow, flow: &FlowField, t_ref: f64) -> Result<McFrame> {
    let geometry = window.geometry();
    if flow.geometry() != geometry {
        return Err(MocompError::Geometry { flow: flow.geometry(), events: geometry });
    }
    let (w, h) = (geometry.width as usize, geometry.height as usize);
    let inv_duration = 1.0 / flow.duration();
    let mut counts = vec![0.0; w * h];
    let mut n_in = 0;
    for e in window.events() {
        let u = bilinear_sample(&flow.u, w, h, e.x, e.y);
        let v = bilinear_sample(&flow.v, w, h, e.x, e.y);
        let dt = t_ref - e.t_seconds();
        let x = e.x + dt * (u * inv_duration);
        let y = e.y + dt * (v * inv_duration);
        if let Some(taps) = bilinear_taps(w, h, x, y) {
            for (i, wt) in taps {
                counts[i] += wt;
            }
            n_in += 1;
        }
    }
    Ok(McFrame { counts, geometry, n_in, n_total: window.len(), t_ref })
}

/// Both frames of a variance-ratio evaluation plus the derived scores.
#[derive(Debug, Clone)]
pub struct WarpEvaluation {
    pub compensated: McFrame,
    pub raw: McFrame,
    pub var_compensated: f64,
    pub var_raw: f64,
    pub fwl: Option<f64>,
    pub rfwl: Option<f64>,
}

pub fn evaluate_warp(window: &EventWindow, flow: &FlowField, t_ref: f64) -> Result<WarpEvaluation> {
    if window.is_empty() {
        return Err(MocompError::EmptyWindow);
    }
    let compensated = motion_compensate(window, flow, t_ref)?;
    let zero = FlowField::zeros(flow.geometry(), flow.duration()).expect("duration already validated");
    let raw = motion_compensate(window, &zero, t_ref)?;
    let var_compensated = compensated.variance();
    let var_raw = raw.variance();
    let fwl = (var_raw > 0.0).then(|| var_compensated / var_raw);
    let rfwl = match (compensated.normalized_variance(), raw.normalized_variance()) {
        (Ok(a), Ok(b)) if b > 0.0 => Some(a / b),
        _ => None,
    };
    Ok(WarpEvaluation { compensated, raw, var_compensated, var_raw, fwl, rfwl })
}

/// Flow Warp Loss: variance of the compensated frame over that of the
/// uncompensated frame.
pub fn fwl(window: &EventWindow, flow: &FlowField, t_ref: f64) -> Result<f64> {
    if window.is_empty() {
        return Err(MocompError::EmptyWindow);
    }
    let compensated = motion_compensate(window, flow, t_ref)?;
    let raw = motion_compensate(window, &zero_like(flow), t_ref)?;
    let var_raw = raw.variance();
    if var_raw <= 0.0 {
        return Err(MocompError::ZeroVariance);
    }
    Ok(compensated.variance() / var_raw)
}

/// Rectified Flow Warp Loss: like [`fwl`] but each frame is first divided
/// by its own total count, so events pushed out of the sensor do not bias
/// the score.
pub fn rfwl(window: &EventWindow, flow: &FlowField, t_ref: f64) -> Result<f64> {
    let compensated = motion_compensate(window, flow, t_ref)?;
    let raw = motion_compensate(window, &zero_like(flow), t_ref)?;
    let num = compensated.normalized_variance()?;
    let den = raw.normalized_variance().map_err(|_| MocompError::ZeroCount { which: "uncompensated" })?;
    if den <= 0.0 {
        return Err(MocompError::ZeroVariance);
    }
    Ok(num / den)
}

fn zero_like(flow: &FlowField) -> FlowField {
    FlowField::zeros(flow.geometry(), flow.duration()).expect("duration already validated")
}
