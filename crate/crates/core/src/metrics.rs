//! Supervised flow metrics, the L1 training objective, time-dense RFWL
//! profiling and trajectory integration.

use thiserror::Error;

use crate::events::{seconds_to_us, EventWindow};
use crate::flow::{FlowError, FlowField};
use crate::mocomp::{bilinear_sample, rfwl};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no valid ground-truth pixels")]
    NoValidPixels,
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error("flow sequence is empty")]
    EmptySequence,
    #[error("flow sequence is inconsistent: {0}")]
    Sequence(String),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// How angular error is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AngularConvention {
    /// Angle between homogeneous `(u, v, 1)` vectors.
    #[default]
    Homogeneous3d,
    /// Angle between the planar `(u, v)` vectors; zero when either vanishes.
    Planar2d,
}

/// Which pixels count as outliers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OutlierConvention {
    /// Endpoint error above 3 px and above 5% of the ground-truth magnitude.
    #[default]
    AbsoluteAndRelative,
    /// Endpoint error above 3 px only.
    AbsoluteOnly,
}

fn valid_pairs<'a>(
    pred: &'a FlowField,
    gt: &'a FlowField,
) -> Result<impl Iterator<Item = ((f64, f64), (f64, f64))> + Clone + 'a> {
    gt.check_same_geometry(pred)?;
    if !gt.valid.iter().any(|&m| m) {
        return Err(MetricsError::NoValidPixels);
    }
    Ok((0..gt.valid.len())
        .filter(move |&i| gt.valid[i])
        .map(move |i| ((pred.u[i], pred.v[i]), (gt.u[i], gt.v[i]))))
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for v in it {
        s += v;
        n += 1;
    }
    s / n as f64
}

#[inline]
fn endpoint(p: (f64, f64), g: (f64, f64)) -> f64 {
    (p.0 - g.0).hypot(p.1 - g.1)
}

/// Mean endpoint error over valid pixels.
pub fn epe(pred: &FlowField, gt: &FlowField) -> Result<f64> {
    Ok(mean(valid_pairs(pred, gt)?.map(|(p, g)| endpoint(p, g))))
}

/// Percentage of valid pixels whose endpoint error strictly exceeds `n` px.
pub fn n_pixel_error(pred: &FlowField, gt: &FlowField, n: f64) -> Result<f64> {
    Ok(100.0 * mean(valid_pairs(pred, gt)?.map(|(p, g)| (endpoint(p, g) > n) as u8 as f64)))
}

pub fn angular_error(pred: &FlowField, gt: &FlowField) -> Result<f64> {
    angular_error_with(pred, gt, AngularConvention::default())
}

pub fn angular_error_with(pred: &FlowField, gt: &FlowField, convention: AngularConvention) -> Result<f64> {
    let angle = move |(p, g): ((f64, f64), (f64, f64))| -> f64 {
        let cos = match convention {
            AngularConvention::Homogeneous3d => {
                (p.0 * g.0 + p.1 * g.1 + 1.0) / ((p.0 * p.0 + p.1 * p.1 + 1.0) * (g.0 * g.0 + g.1 * g.1 + 1.0)).sqrt()
            }
            AngularConvention::Planar2d => {
                let norms = p.0.hypot(p.1) * g.0.hypot(g.1);
                if norms == 0.0 {
                    return 0.0;
                }
                (p.0 * g.0 + p.1 * g.1) / norms
            }
        };
        cos.clamp(-1.0, 1.0).acos().to_degrees()
    };
    Ok(mean(valid_pairs(pred, gt)?.map(angle)))
}

pub fn outlier_pct(pred: &FlowField, gt: &FlowField) -> Result<f64> {
    outlier_pct_with(pred, gt, OutlierConvention::default())
}

pub fn outlier_pct_with(pred: &FlowField, gt: &FlowField, convention: OutlierConvention) -> Result<f64> {
    Ok(100.0
        * mean(valid_pairs(pred, gt)?.map(|(p, g)| {
            let e = endpoint(p, g);
            let outlier = match convention {
                OutlierConvention::AbsoluteAndRelative => e > 3.0 && e > 0.05 * g.0.hypot(g.1),
                OutlierConvention::AbsoluteOnly => e > 3.0,
            };
            outlier as u8 as f64
        })))
}

/// Mean over valid pixels of `|du| + |dv|`.
pub fn l1_loss(pred: &FlowField, gt: &FlowField) -> Result<f64> {
    Ok(mean(valid_pairs(pred, gt)?.map(|(p, g)| (p.0 - g.0).abs() + (p.1 - g.1).abs())))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub epe: f64,
    pub ae_degrees: f64,
    pub npe_1px: f64,
    pub npe_3px: f64,
    pub outlier_pct: f64,
    pub n_valid: usize,
}

pub const METRICS_HEADER: &str = "epe,ae_deg,npe1,npe3,outlier_pct,n_valid";

impl EvalReport {
    pub fn compute(pred: &FlowField, gt: &FlowField, ae: AngularConvention, outliers: OutlierConvention) -> Result<Self> {
        Ok(EvalReport {
            epe: epe(pred, gt)?,
            ae_degrees: angular_error_with(pred, gt, ae)?,
            npe_1px: n_pixel_error(pred, gt, 1.0)?,
            npe_3px: n_pixel_error(pred, gt, 3.0)?,
            outlier_pct: outlier_pct_with(pred, gt, outliers)?,
            n_valid: gt.n_valid(),
        })
    }

    pub fn to_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epe, self.ae_degrees, self.npe_1px, self.npe_3px, self.outlier_pct, self.n_valid
        )
    }

    pub fn parse_row(row: &str) -> Option<Self> {
        let f: Vec<&str> = row.trim().split(',').collect();
        if f.len() != 6 {
            return None;
        }
        let num = |s: &str| s.trim().parse::<f64>().ok();
        Some(EvalReport {
            epe: num(f[0])?,
            ae_degrees: num(f[1])?,
            npe_1px: num(f[2])?,
            npe_3px: num(f[3])?,
            outlier_pct: num(f[4])?,
            n_valid: f[5].trim().parse().ok()?,
        })
    }

    /// Average of several reports weighted by their valid-pixel counts.
    pub fn merge(reports: &[EvalReport]) -> Option<EvalReport> {
        let total: usize = reports.iter().map(|r| r.n_valid).sum();
        if total == 0 {
            return None;
        }
        let w = |f: fn(&EvalReport) -> f64| reports.iter().map(|r| f(r) * r.n_valid as f64).sum::<f64>() / total as f64;
        Some(EvalReport {
            epe: w(|r| r.epe),
            ae_degrees: w(|r| r.ae_degrees),
            npe_1px: w(|r| r.npe_1px),
            npe_3px: w(|r| r.npe_3px),
            outlier_pct: w(|r| r.outlier_pct),
            n_valid: total,
        })
    }
}

/// Time-dense output `V_{0,1} .. V_{0,B-1}`; element `j - 1` spans `j * tau`
/// seconds from the shared anchor `t0`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSequence {
    pub flows: Vec<FlowField>,
    /// Anchor time in seconds.
    pub t0: f64,
    /// Bin spacing in seconds.
    pub tau: f64,
}

impl FlowSequence {
    pub fn new(flows: Vec<FlowField>, t0: f64, tau: f64) -> Result<Self> {
        if flows.is_empty() {
            return Err(MetricsError::EmptySequence);
        }
        let g = flows[0].geometry();
        for (k, f) in flows.iter().enumerate() {
            if f.geometry() != g {
                return Err(MetricsError::Sequence(format!("element {k} is {}, expected {g}", f.geometry())));
            }
            if k > 0 && f.duration() <= flows[k - 1].duration() {
                return Err(MetricsError::Sequence(format!("duration of element {k} does not increase")));
            }
        }
        Ok(FlowSequence { flows, t0, tau })
    }

    /// Number of emitted steps, `B - 1`.
    pub fn len(&self) -> usize {
        self.flows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flows.is_empty()
    }

    /// Flow `V_{0,j}` for `j` in `1..=len()`.
    pub fn step(&self, j: usize) -> &FlowField {
        &self.flows[j - 1]
    }

    pub fn time(&self, j: usize) -> f64 {
        self.t0 + j as f64 * self.tau
    }

    /// Straight-line interpolation of the last flow: `(j / (B-1)) * V_{0,B-1}`.
    pub fn linear_baseline(&self) -> FlowSequence {
        let last = self.flows.last().expect("non-empty");
        let n = self.len() as f64;
        let flows = (1..=self.len())
            .map(|j| {
                last.scaled(j as f64 / n)
                    .with_duration(self.flows[j - 1].duration())
                    .expect("durations already validated")
            })
            .collect();
        FlowSequence { flows, t0: self.t0, tau: self.tau }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryPoint {
    pub j: usize,
    pub x: f64,
    pub y: f64,
    /// The seed lay outside the raster, so zero displacement was used.
    pub out_of_bounds: bool,
}

/// Anchored trajectories: point `j` is `seed + V_{0,j}(seed)`, sampled
/// bilinearly.
pub fn integrate_trajectory(seq: &FlowSequence, seeds: &[(f64, f64)]) -> Vec<Vec<TrajectoryPoint>> {
    seeds
        .iter()
        .map(|&(sx, sy)| {
            seq.flows
                .iter()
                .enumerate()
                .map(|(k, f)| {
                    let (w, h) = (f.width(), f.height());
                    let inside = sx >= 0.0 && sy >= 0.0 && sx <= (w - 1) as f64 && sy <= (h - 1) as f64;
                    let du = bilinear_sample(&f.u, w, h, sx, sy);
                    let dv = bilinear_sample(&f.v, w, h, sx, sy);
                    TrajectoryPoint { j: k + 1, x: sx + du, y: sy + dv, out_of_bounds: !inside }
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProfileEntry {
    pub j: usize,
    /// RFWL of `V_{0,j}` on the events of `[t0, t_j]`.
    pub model: Option<f64>,
    /// RFWL of the linearly interpolated final flow on the same events.
    pub baseline: Option<f64>,
    pub events: usize,
}

/// Per-step RFWL of a time-dense sequence against the linear-interpolation
/// baseline built from its own final flow. Entries whose sub-window is empty
/// (or degenerate) are `None`.
pub fn dense_rfwl_profile(seq: &FlowSequence, window: &EventWindow) -> Result<Vec<ProfileEntry>> {
    if seq.is_empty() {
        return Err(MetricsError::EmptySequence);
    }
    if seq.flows[0].geometry() != window.geometry() {
        return Err(MetricsError::Flow(FlowError::Shape {
            expected: window.geometry(),
            found: seq.flows[0].geometry(),
        }));
    }
    let baseline = seq.linear_baseline();
    let t0_us = seconds_to_us(seq.t0);
    let mut out = Vec::with_capacity(seq.len());
    for j in 1..=seq.len() {
        let tj_us = seconds_to_us(seq.time(j)).max(t0_us);
        let sub = window.slice(t0_us, tj_us).expect("t0 <= tj");
        let score = |f: &FlowField| if sub.is_empty() { None } else { rfwl(&sub, f, seq.t0).ok() };
        out.push(ProfileEntry { j, model: score(seq.step(j)), baseline: score(baseline.step(j)), events: sub.len() });
    }
    Ok(out)
}
