//! Geometric event simulator with analytic ground-truth flow and trajectories.
//!
//! Each generator point of a [`ScenePattern`] travels along the trajectory
//! given by a [`MotionModel`] and fires one event per `1 / rate` pixels of
//! arc length. Positions are exact, so flow and trajectories are closed-form.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::events::{seconds_to_us, Event, EventError, EventWindow, Polarity, SensorGeometry};
use crate::flow::FlowField;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("scene pattern has no generator points")]
    EmptyPattern,
    #[error("generator point ({x}, {y}) starts outside the sensor")]
    PointOutOfBounds { x: f64, y: f64 },
    #[error("{name} must be positive and finite, got {value}")]
    NonPositive { name: &'static str, value: f64 },
    #[error("times must be sorted ascending")]
    UnsortedTimes,
    #[error(transparent)]
    Events(#[from] EventError),
    #[error(transparent)]
    Flow(#[from] crate::flow::FlowError),
}

pub type Result<T> = std::result::Result<T, SimError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MotionModel {
    /// Translation at `(vx, vy)` pixels per second.
    ConstantVelocity { vx: f64, vy: f64 },
    /// Rotation about `(cx, cy)` at `omega` radians per second.
    CircularArc { cx: f64, cy: f64, omega: f64 },
}

impl MotionModel {
    /// Position after `dt` seconds of a point currently at `p`.
    #[inline]
    pub fn advance(&self, p: (f64, f64), dt: f64) -> (f64, f64) {
        match *self {
            MotionModel::ConstantVelocity { vx, vy } => (p.0 + vx * dt, p.1 + vy * dt),
            MotionModel::CircularArc { cx, cy, omega } => {
                let (s, c) = (omega * dt).sin_cos();
                let (dx, dy) = (p.0 - cx, p.1 - cy);
                (cx + c * dx - s * dy, cy + s * dx + c * dy)
            }
        }
    }

    /// Position at time `t` of the point that starts at `p0` at `t = 0`.
    pub fn position(&self, p0: (f64, f64), t: f64) -> (f64, f64) {
        self.advance(p0, t)
    }

    /// Displacement over `[t0, t1]` of the scene point located at `p` at `t0`.
    pub fn displacement(&self, p: (f64, f64), t0: f64, t1: f64) -> (f64, f64) {
        let q = self.advance(p, t1 - t0);
        (q.0 - p.0, q.1 - p.1)
    }

    /// Speed in pixels per second of the point at `p`.
    pub fn speed(&self, p: (f64, f64)) -> f64 {
        match *self {
            MotionModel::ConstantVelocity { vx, vy } => vx.hypot(vy),
            MotionModel::CircularArc { cx, cy, omega } => omega.abs() * (p.0 - cx).hypot(p.1 - cy),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorPoint {
    pub x: f64,
    pub y: f64,
    pub polarity: Polarity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenePattern {
    pub points: Vec<GeneratorPoint>,
    pub geometry: SensorGeometry,
}

impl ScenePattern {
    pub fn new(points: Vec<GeneratorPoint>, geometry: SensorGeometry) -> Result<Self> {
        if points.is_empty() {
            return Err(SimError::EmptyPattern);
        }
        if let Some(p) = points.iter().find(|p| !geometry.contains(p.x, p.y)) {
            return Err(SimError::PointOutOfBounds { x: p.x, y: p.y });
        }
        Ok(ScenePattern { points, geometry })
    }

    /// Checkerboard-style corner lattice with alternating polarity.
    pub fn corner_lattice(geometry: SensorGeometry, spacing: f64, margin: f64) -> Result<Self> {
        let mut points = Vec::new();
        let (w, h) = ((geometry.width - 1) as f64, (geometry.height - 1) as f64);
        let mut y = margin;
        let mut row = 0usize;
        while y <= h - margin {
            let mut x = margin;
            let mut col = 0usize;
            while x <= w - margin {
                let polarity = if (row + col) % 2 == 0 { Polarity::Positive } else { Polarity::Negative };
                points.push(GeneratorPoint { x, y, polarity });
                x += spacing;
                col += 1;
            }
            y += spacing;
            row += 1;
        }
        Self::new(points, geometry)
    }

    /// Vertical bar edges: each bar contributes a positive leading edge and a
    /// negative trailing edge sampled at every row between `y0` and `y1`.
    pub fn bars(geometry: SensorGeometry, columns: &[(f64, f64)], y0: f64, y1: f64) -> Result<Self> {
        let mut points = Vec::new();
        for &(left, right) in columns {
            let mut y = y0;
            while y <= y1 {
                points.push(GeneratorPoint { x: left, y, polarity: Polarity::Positive });
                points.push(GeneratorPoint { x: right, y, polarity: Polarity::Negative });
                y += 1.0;
            }
        }
        Self::new(points, geometry)
    }

    /// `count` points drawn uniformly inside a `margin`-inset frame.
    pub fn random_points(geometry: SensorGeometry, count: usize, margin: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, h) = ((geometry.width - 1) as f64, (geometry.height - 1) as f64);
        let points = (0..count)
            .map(|_| GeneratorPoint {
                x: rng.gen_range(margin..=w - margin).round(),
                y: rng.gen_range(margin..=h - margin).round(),
                polarity: if rng.gen_bool(0.5) { Polarity::Positive } else { Polarity::Negative },
            })
            .collect();
        Self::new(points, geometry)
    }

    /// Points on a ring of `radius` around `(cx, cy)`, one per `spacing` px.
    pub fn ring(geometry: SensorGeometry, cx: f64, cy: f64, radius: f64, spacing: f64) -> Result<Self> {
        let n = ((2.0 * PI * radius / spacing).round() as usize).max(1);
        let points = (0..n)
            .map(|k| {
                let a = 2.0 * PI * k as f64 / n as f64;
                GeneratorPoint {
                    x: cx + radius * a.cos(),
                    y: cy + radius * a.sin(),
                    polarity: if k % 2 == 0 { Polarity::Positive } else { Polarity::Negative },
                }
            })
            .collect();
        Self::new(points, geometry)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimOptions {
    /// Round event positions to the nearest pixel (sensor-like output).
    pub round_positions: bool,
    /// Uniform background noise, events per second per pixel.
    pub noise_rate: f64,
    pub seed: u64,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions { round_positions: true, noise_rate: 0.0, seed: 0 }
    }
}

/// Generates a time-sorted event window over `[0, duration]`.
pub fn generate_events(pattern: &ScenePattern, motion: &MotionModel, duration: f64, rate: f64) -> Result<EventWindow> {
    generate_events_with(pattern, motion, duration, rate, &SimOptions::default())
}

pub fn generate_events_with(
    pattern: &ScenePattern,
    motion: &MotionModel,
    duration: f64,
    rate: f64,
    options: &SimOptions,
) -> Result<EventWindow> {
    if pattern.points.is_empty() {
        return Err(SimError::EmptyPattern);
    }
    for (name, value) in [("duration", duration), ("rate", rate)] {
        if !(value > 0.0 && value.is_finite()) {
            return Err(SimError::NonPositive { name, value });
        }
    }
    let geometry = pattern.geometry;
    let (wmax, hmax) = ((geometry.width - 1) as f64, (geometry.height - 1) as f64);
    let mut events = Vec::new();
    for point in &pattern.points {
        let start = (point.x, point.y);
        let speed = motion.speed(start);
        // Constant speed along either trajectory: arc length s at t = s / speed.
        let steps = if speed > 0.0 { (speed * duration * rate + 1e-9).floor() as u64 } else { 0 };
        for k in 0..=steps {
            let t = if speed > 0.0 { k as f64 / (rate * speed) } else { 0.0 };
            let t = t.min(duration);
            let (mut x, mut y) = motion.position(start, t);
            if options.round_positions {
                x = x.round();
                y = y.round();
            }
            if !(x >= 0.0 && y >= 0.0 && x <= wmax && y <= hmax) {
                break;
            }
            events.push(Event::new(seconds_to_us(t), x, y, point.polarity));
        }
    }
    if options.noise_rate > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
        let count = (options.noise_rate * duration * geometry.pixels() as f64).round() as usize;
        for _ in 0..count {
            let t = rng.gen_range(0.0..=duration);
            let (mut x, mut y) = (rng.gen_range(0.0..=wmax), rng.gen_range(0.0..=hmax));
            if options.round_positions {
                x = x.round();
                y = y.round();
            }
            let p = if rng.gen_bool(0.5) { Polarity::Positive } else { Polarity::Negative };
            events.push(Event::new(seconds_to_us(t), x, y, p));
        }
    }
    Ok(EventWindow::from_unsorted(events, 0, seconds_to_us(duration), geometry)?)
}

/// Dense flow over `[t0, t1]`: each pixel holds the displacement of the
/// scene point located there at `t0`.
pub fn ground_truth_flow(motion: &MotionModel, t0: f64, t1: f64, geometry: SensorGeometry) -> Result<FlowField> {
    let span = t1 - t0;
    if !(span > 0.0 && span.is_finite()) {
        return Err(SimError::NonPositive { name: "t1 - t0", value: span });
    }
    Ok(FlowField::from_fn(geometry, span, |x, y| motion.displacement((x as f64, y as f64), t0, t1))?)
}

/// [`ground_truth_flow`] restricted to pixels that fired during
/// `[t0, t0 + support)`, i.e. where a scene point sits near the anchor time.
pub fn masked_ground_truth_flow(
    motion: &MotionModel,
    window: &EventWindow,
    t0: f64,
    t1: f64,
    support: f64,
) -> Result<FlowField> {
    let dense = ground_truth_flow(motion, t0, t1, window.geometry())?;
    let w = window.geometry().width as usize;
    let mut valid = vec![false; dense.valid.len()];
    for e in window.events() {
        let t = e.t_seconds();
        if t >= t0 && t < t0 + support {
            valid[e.y.round() as usize * w + e.x.round() as usize] = true;
        }
    }
    let duration = dense.duration();
    Ok(FlowField::with_mask(window.geometry(), dense.u, dense.v, valid, duration)?)
}

/// Exact positions of each seed (given at `t = 0`) at each requested time.
pub fn ground_truth_trajectory(motion: &MotionModel, seeds: &[(f64, f64)], times: &[f64]) -> Result<Vec<Vec<(f64, f64)>>> {
    if times.windows(2).any(|w| w[1] < w[0]) {
        return Err(SimError::UnsortedTimes);
    }
    Ok(seeds.iter().map(|&s| times.iter().map(|&t| motion.position(s, t)).collect()).collect())
}

/// Renders the motion as `key=value` manifest lines.
pub fn describe_motion(motion: &MotionModel) -> Vec<(String, String)> {
    match *motion {
        MotionModel::ConstantVelocity { vx, vy } => vec![
            ("motion".into(), "const".into()),
            ("vx".into(), vx.to_string()),
            ("vy".into(), vy.to_string()),
        ],
        MotionModel::CircularArc { cx, cy, omega } => vec![
            ("motion".into(), "arc".into()),
            ("cx".into(), cx.to_string()),
            ("cy".into(), cy.to_string()),
            ("omega".into(), omega.to_string()),
        ],
    }
}
