//! Voxel Grid and Unified Voxel Grid construction, batch and streaming.
//!
//! Both builders accumulate in `f64` in event order and cast to `f32` once,
//! so the streaming builder reproduces the batch tensor bit-for-bit.

use thiserror::Error;

use crate::events::{us_to_seconds, Event, EventWindow, SensorGeometry};

pub const EVGR_MAGIC: [u8; 4] = *b"EVGR";
const EVGR_HEADER_LEN: usize = 4 + 12 + 1 + 8 + 8;

#[derive(Debug, Error)]
pub enum ReprError {
    #[error("window has no events")]
    EmptyWindow,
    #[error("at least 2 bins are required, got {0}")]
    TooFewBins(usize),
    #[error("bin spacing must be positive and finite, got {0}")]
    BadTau(f64),
    #[error("bins [{covered_start:.6}, {covered_end:.6}] s do not cover window [{window_start:.6}, {window_end:.6}] s")]
    Coverage {
        covered_start: f64,
        covered_end: f64,
        window_start: f64,
        window_end: f64,
    },
    #[error("geometry mismatch: spec {spec}, window {window}")]
    GeometryMismatch {
        spec: SensorGeometry,
        window: SensorGeometry,
    },
    #[error("event at t={t}us arrived after t={prev}us; already emitted bins touched: {emitted:?}")]
    OutOfOrder { t: u64, prev: u64, emitted: Vec<usize> },
    #[error("stream already finished")]
    Finished,
    #[error("malformed grid file: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ReprError>;

/// Triangular kernel `max(0, 1 - |a|)`.
#[inline]
pub fn kernel(a: f64) -> f64 {
    (1.0 - a.abs()).max(0.0)
}

/// Bin layout: `bins` centers at `t0 + b * tau` seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinSpec {
    pub bins: usize,
    pub tau: f64,
    pub t0: f64,
    pub geometry: SensorGeometry,
}

/// Slack allowed when checking that a spec covers a window.
const COVERAGE_SLACK_S: f64 = 1e-6;

impl BinSpec {
    pub fn new(bins: usize, tau: f64, t0: f64, geometry: SensorGeometry) -> Result<Self> {
        if bins < 2 {
            return Err(ReprError::TooFewBins(bins));
        }
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(ReprError::BadTau(tau));
        }
        Ok(BinSpec { bins, tau, t0, geometry })
    }

    /// Spreads `bins` centers evenly over `[t_start, t_end]` of the window.
    pub fn for_window(window: &EventWindow, bins: usize) -> Result<Self> {
        let t0 = us_to_seconds(window.t_start());
        let duration = us_to_seconds(window.t_end()) - t0;
        if bins < 2 {
            return Err(ReprError::TooFewBins(bins));
        }
        Self::new(bins, duration / (bins - 1) as f64, t0, window.geometry())
    }

    #[inline]
    pub fn center(&self, b: usize) -> f64 {
        self.t0 + b as f64 * self.tau
    }

    /// Time span covered by the bin centers, `(B - 1) * tau`.
    pub fn duration(&self) -> f64 {
        (self.bins - 1) as f64 * self.tau
    }

    pub fn end(&self) -> f64 {
        self.center(self.bins - 1)
    }

    /// Emission rate of a bin-by-bin consumer, in Hz.
    pub fn rate_hz(&self) -> f64 {
        1.0 / self.tau
    }

    /// Continuous bin coordinate `(t - t0) / tau` of an event timestamp.
    #[inline]
    fn coordinate(&self, t_us: u64) -> f64 {
        (us_to_seconds(t_us) - self.t0) / self.tau
    }

    fn check_covers(&self, window: &EventWindow) -> Result<()> {
        if self.geometry != window.geometry() {
            return Err(ReprError::GeometryMismatch { spec: self.geometry, window: window.geometry() });
        }
        let ws = us_to_seconds(window.t_start());
        let we = us_to_seconds(window.t_end());
        if self.t0 > ws + COVERAGE_SLACK_S || self.end() < we - COVERAGE_SLACK_S {
            return Err(ReprError::Coverage {
                covered_start: self.t0,
                covered_end: self.end(),
                window_start: ws,
                window_end: we,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridKind {
    VoxelGrid,
    UnifiedVoxelGrid,
}

impl GridKind {
    fn code(self) -> u8 {
        match self {
            GridKind::VoxelGrid => 0,
            GridKind::UnifiedVoxelGrid => 1,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(GridKind::VoxelGrid),
            1 => Some(GridKind::UnifiedVoxelGrid),
            _ => None,
        }
    }
}

/// A `B x H x W` tensor, bin-major then row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub data: Vec<f32>,
    pub spec: BinSpec,
    pub kind: GridKind,
}

impl Grid {
    pub fn bins(&self) -> usize {
        self.spec.bins
    }

    pub fn geometry(&self) -> SensorGeometry {
        self.spec.geometry
    }

    /// Image of bin `b`.
    pub fn bin(&self, b: usize) -> &[f32] {
        let n = self.spec.geometry.pixels();
        &self.data[b * n..(b + 1) * n]
    }

    pub fn at(&self, b: usize, y: usize, x: usize) -> f32 {
        let w = self.spec.geometry.width as usize;
        self.bin(b)[y * w + x]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }
}

/// Bookkeeping from a build: how many events contributed and how many were dropped.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BuildReport {
    pub events_in: usize,
    pub accumulated: usize,
    pub dropped_temporal: usize,
    pub dropped_spatial: usize,
}

/// Adds `weight * p` bilinearly around `(x, y)` into one `H x W` image.
/// Returns false when no in-bounds pixel receives weight.
#[inline]
fn splat(image: &mut [f64], width: usize, height: usize, x: f64, y: f64, value: f64) -> bool {
    let x0f = x.floor();
    let y0f = y.floor();
    let fx = x - x0f;
    let fy = y - y0f;
    let x0 = x0f as i64;
    let y0 = y0f as i64;
    let mut hit = false;
    for (dy, wy) in [(0i64, 1.0 - fy), (1, fy)] {
        if wy == 0.0 {
            continue;
        }
        let yy = y0 + dy;
        if yy < 0 || yy >= height as i64 {
            continue;
        }
        let row = yy as usize * width;
        for (dx, wx) in [(0i64, 1.0 - fx), (1, fx)] {
            if wx == 0.0 {
                continue;
            }
            let xx = x0 + dx;
            if xx < 0 || xx >= width as i64 {
                continue;
            }
            image[row + xx as usize] += value * wx * wy;
            hit = true;
        }
    }
    hit
}

/// Temporal contributions `(bin, weight)` for a continuous bin coordinate.
/// Zero-weight neighbours are omitted, so an event at a bin center touches
/// exactly one bin.
#[inline]
fn temporal_taps(u: f64, bins: usize) -> [(Option<usize>, f64); 2] {
    let lo = u.floor();
    let frac = u - lo;
    let tap = |b: f64, w: f64| {
        if w > 0.0 && b >= 0.0 && b < bins as f64 {
            (Some(b as usize), w)
        } else {
            (None, 0.0)
        }
    };
    [tap(lo, 1.0 - frac), tap(lo + 1.0, frac)]
}

fn accumulate(
    acc: &mut [f64],
    geometry: SensorGeometry,
    bins: usize,
    events: &[Event],
    coordinate: impl Fn(&Event) -> f64,
) -> BuildReport {
    let (w, h) = (geometry.width as usize, geometry.height as usize);
    let n = w * h;
    let mut report = BuildReport { events_in: events.len(), ..Default::default() };
    for e in events {
        let taps = temporal_taps(coordinate(e), bins);
        if taps.iter().all(|t| t.0.is_none()) {
            report.dropped_temporal += 1;
            continue;
        }
        let mut hit = false;
        for (b, wt) in taps {
            if let Some(b) = b {
                hit |= splat(&mut acc[b * n..(b + 1) * n], w, h, e.x, e.y, e.p.sign() * wt);
            }
        }
        if hit {
            report.accumulated += 1;
        } else {
            report.dropped_spatial += 1;
        }
    }
    report
}

fn cast(acc: &[f64]) -> Vec<f32> {
    acc.iter().map(|&v| v as f32).collect()
}

/// Classic Voxel Grid: timestamps normalized by the first and last event so
/// that `t* = (B-1)(t - t_1)/(t_N - t_1)`.
pub fn build_voxel_grid(window: &EventWindow, bins: usize) -> Result<Grid> {
    build_voxel_grid_with_report(window, bins).map(|(g, _)| g)
}

pub fn build_voxel_grid_with_report(window: &EventWindow, bins: usize) -> Result<(Grid, BuildReport)> {
    if bins < 2 {
        return Err(ReprError::TooFewBins(bins));
    }
    let events = window.events();
    let (first, last) = match (events.first(), events.last()) {
        (Some(a), Some(b)) => (a.t, b.t),
        _ => return Err(ReprError::EmptyWindow),
    };
    let span = (last - first) as f64;
    let scale = if span > 0.0 { (bins - 1) as f64 / span } else { 0.0 };
    let geometry = window.geometry();
    let mut acc = vec![0.0f64; bins * geometry.pixels()];
    let report = accumulate(&mut acc, geometry, bins, events, |e| (e.t - first) as f64 * scale);
    let tau = if span > 0.0 { us_to_seconds(last - first) / (bins - 1) as f64 } else { 1.0 };
    let spec = BinSpec { bins, tau, t0: us_to_seconds(first), geometry };
    Ok((Grid { data: cast(&acc), spec, kind: GridKind::VoxelGrid }, report))
}

/// Unified Voxel Grid: every bin uses the same triangular kernel of half-width
/// `tau` around its center.
pub fn build_unified_voxel_grid(window: &EventWindow, spec: &BinSpec) -> Result<Grid> {
    build_unified_voxel_grid_with_report(window, spec).map(|(g, _)| g)
}

pub fn build_unified_voxel_grid_with_report(window: &EventWindow, spec: &BinSpec) -> Result<(Grid, BuildReport)> {
    let (acc, report) = unified_accumulator(window, spec)?;
    Ok((Grid { data: cast(&acc), spec: *spec, kind: GridKind::UnifiedVoxelGrid }, report))
}

/// The f64 `B x H x W` accumulator behind a UVG, before the f32 cast.
pub fn unified_accumulator(window: &EventWindow, spec: &BinSpec) -> Result<(Vec<f64>, BuildReport)> {
    spec.check_covers(window)?;
    let mut acc = vec![0.0f64; spec.bins * spec.geometry.pixels()];
    let report = accumulate(&mut acc, spec.geometry, spec.bins, window.events(), |e| spec.coordinate(e.t));
    Ok((acc, report))
}

/// A finalized UVG bin.
#[derive(Debug, Clone, PartialEq)]
pub struct EmittedBin {
    pub index: usize,
    pub image: Vec<f32>,
}

/// Incremental UVG builder. Bin `b` is emitted as soon as an event with
/// `t >= t_b + tau` is pushed, or at [`StreamingBinner::finish`].
#[derive(Debug)]
pub struct StreamingBinner {
    spec: BinSpec,
    /// Accumulators for bins `next_emit ..`; at most two are ever live.
    pending: Vec<Vec<f64>>,
    next_emit: usize,
    last_t: Option<u64>,
    report: BuildReport,
    finished: bool,
}

impl StreamingBinner {
    pub fn new(spec: BinSpec) -> Self {
        StreamingBinner {
            spec,
            pending: Vec::new(),
            next_emit: 0,
            last_t: None,
            report: BuildReport::default(),
            finished: false,
        }
    }

    pub fn spec(&self) -> &BinSpec {
        &self.spec
    }

    /// Index of the next bin that will be emitted.
    pub fn next_bin(&self) -> usize {
        self.next_emit
    }

    pub fn report(&self) -> BuildReport {
        self.report
    }

    fn slot(&mut self, b: usize) -> &mut Vec<f64> {
        let rel = b - self.next_emit;
        let n = self.spec.geometry.pixels();
        while self.pending.len() <= rel {
            self.pending.push(vec![0.0; n]);
        }
        &mut self.pending[rel]
    }

    fn emit_front(&mut self) -> EmittedBin {
        let image = if self.pending.is_empty() {
            vec![0.0f32; self.spec.geometry.pixels()]
        } else {
            cast(&self.pending.remove(0))
        };
        let bin = EmittedBin { index: self.next_emit, image };
        self.next_emit += 1;
        bin
    }

    /// Feeds one event; returns the bins it finalized, in order.
    pub fn push(&mut self, event: &Event) -> Result<Vec<EmittedBin>> {
        if self.finished {
            return Err(ReprError::Finished);
        }
        let u = self.spec.coordinate(event.t);
        if let Some(prev) = self.last_t {
            if event.t < prev {
                let emitted = temporal_taps(u, self.spec.bins)
                    .iter()
                    .filter_map(|t| t.0)
                    .filter(|&b| b < self.next_emit)
                    .collect();
                return Err(ReprError::OutOfOrder { t: event.t, prev, emitted });
            }
        }
        self.last_t = Some(event.t);
        self.report.events_in += 1;

        // Everything strictly before floor(u) can no longer receive weight.
        let mut out = Vec::new();
        while self.next_emit < self.spec.bins && (self.next_emit as f64 + 1.0) <= u {
            out.push(self.emit_front());
        }

        let taps = temporal_taps(u, self.spec.bins);
        if taps.iter().all(|t| t.0.is_none()) {
            self.report.dropped_temporal += 1;
            return Ok(out);
        }
        let (w, h) = (self.spec.geometry.width as usize, self.spec.geometry.height as usize);
        let mut hit = false;
        for (b, wt) in taps {
            if let Some(b) = b {
                debug_assert!(b >= self.next_emit);
                let img = self.slot(b);
                hit |= splat(img, w, h, event.x, event.y, event.p.sign() * wt);
            }
        }
        if hit {
            self.report.accumulated += 1;
        } else {
            self.report.dropped_spatial += 1;
        }
        Ok(out)
    }

    /// Flushes every remaining bin (all-zero where no event landed).
    pub fn finish(&mut self) -> Result<Vec<EmittedBin>> {
        if self.finished {
            return Err(ReprError::Finished);
        }
        self.finished = true;
        let mut out = Vec::new();
        while self.next_emit < self.spec.bins {
            out.push(self.emit_front());
        }
        Ok(out)
    }
}

/// Runs a whole feed through a [`StreamingBinner`], collecting emissions.
pub fn stream_bins<'a, I>(events: I, spec: BinSpec) -> Result<Vec<EmittedBin>>
where
    I: IntoIterator<Item = &'a Event>,
{
    let mut binner = StreamingBinner::new(spec);
    let mut out = Vec::with_capacity(spec.bins);
    for e in events {
        out.extend(binner.push(e)?);
    }
    out.extend(binner.finish()?);
    Ok(out)
}

/// Concatenates emitted bins into a UVG grid.
pub fn assemble_grid(spec: BinSpec, bins: &[EmittedBin]) -> Result<Grid> {
    if bins.len() != spec.bins || bins.iter().enumerate().any(|(i, b)| b.index != i) {
        return Err(ReprError::Format(format!("expected bins 0..{} in order", spec.bins)));
    }
    let mut data = Vec::with_capacity(spec.bins * spec.geometry.pixels());
    for b in bins {
        data.extend_from_slice(&b.image);
    }
    Ok(Grid { data, spec, kind: GridKind::UnifiedVoxelGrid })
}

pub fn encode_evgr(grid: &Grid) -> Vec<u8> {
    let mut out = Vec::with_capacity(EVGR_HEADER_LEN + grid.data.len() * 4);
    out.extend_from_slice(&EVGR_MAGIC);
    out.extend_from_slice(&(grid.spec.bins as u32).to_le_bytes());
    out.extend_from_slice(&grid.spec.geometry.height.to_le_bytes());
    out.extend_from_slice(&grid.spec.geometry.width.to_le_bytes());
    out.push(grid.kind.code());
    out.extend_from_slice(&grid.spec.tau.to_le_bytes());
    out.extend_from_slice(&grid.spec.t0.to_le_bytes());
    for v in &grid.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_evgr(bytes: &[u8]) -> Result<Grid> {
    let bad = |m: String| ReprError::Format(m);
    if bytes.len() < EVGR_HEADER_LEN {
        return Err(bad(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if bytes[..4] != EVGR_MAGIC {
        return Err(bad("bad magic".into()));
    }
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let f64_at = |i: usize| f64::from_le_bytes(bytes[i..i + 8].try_into().unwrap());
    let (bins, height, width) = (u32_at(4) as usize, u32_at(8), u32_at(12));
    let kind = GridKind::from_code(bytes[16]).ok_or_else(|| bad(format!("kind byte {}", bytes[16])))?;
    let tau = f64_at(17);
    let t0 = f64_at(25);
    let geometry = SensorGeometry::new(width, height).map_err(|e| bad(e.to_string()))?;
    if !t0.is_finite() {
        return Err(bad(format!("t0 {t0}")));
    }
    let spec = BinSpec::new(bins, tau, t0, geometry)?;
    let values = (bins as u128) * geometry.pixels() as u128;
    let body = &bytes[EVGR_HEADER_LEN..];
    if body.len() as u128 != values * 4 {
        return Err(bad(format!("expected {} value bytes, found {}", values * 4, body.len())));
    }
    let mut data = Vec::with_capacity(values as usize);
    for c in body.chunks_exact(4) {
        let v = f32::from_le_bytes(c.try_into().unwrap());
        if !v.is_finite() {
            return Err(bad("non-finite value".into()));
        }
        data.push(v);
    }
    Ok(Grid { data, spec, kind })
}

pub fn save_grid(path: &std::path::Path, grid: &Grid) -> Result<()> {
    std::fs::write(path, encode_evgr(grid))?;
    Ok(())
}

pub fn load_grid(path: &std::path::Path) -> Result<Grid> {
    decode_evgr(&std::fs::read(path)?)
}
