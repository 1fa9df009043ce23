//! Event data model, EVT1 binary / text codecs and time-window slicing.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use thiserror::Error;

/// Magic bytes opening every EVT1 file.
pub const EVT1_MAGIC: [u8; 4] = *b"EVT1";
pub const EVT1_VERSION: u32 = 1;
const EVT1_HEADER_LEN: usize = 4 + 4 + 4 + 4 + 8;
const EVT1_RECORD_LEN: usize = 14;
/// Largest coordinate representable in the 8.8 fixed-point record fields.
pub const EVT1_MAX_COORD: f64 = u16::MAX as f64 / 256.0;

#[derive(Debug, Error)]
pub enum EventError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("malformed record {index}: {reason}")]
    Record { index: usize, reason: String },
    #[error("timestamp regression at record {index}: t={t} follows t={prev}")]
    TimestampRegression { index: usize, t: u64, prev: u64 },
    #[error("record {index} at ({x}, {y}) lies outside the {width}x{height} sensor")]
    OutOfBounds {
        index: usize,
        x: f64,
        y: f64,
        width: u32,
        height: u32,
    },
    #[error("invalid slice: t0={t0} > t1={t1}")]
    InvalidSlice { t0: u64, t1: u64 },
    #[error("invalid geometry {width}x{height}")]
    Geometry { width: u32, height: u32 },
    #[error("coordinate {0} is not representable in EVT1 fixed point")]
    Unrepresentable(f64),
}

pub type Result<T> = std::result::Result<T, EventError>;

/// Sign of a brightness change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Polarity {
    Negative,
    Positive,
}

impl Polarity {
    /// Maps the raw on-disk bit (0/1) to a polarity.
    pub fn from_raw(bit: u8) -> Option<Self> {
        match bit {
            0 => Some(Polarity::Negative),
            1 => Some(Polarity::Positive),
            _ => None,
        }
    }

    pub fn raw(self) -> u8 {
        match self {
            Polarity::Negative => 0,
            Polarity::Positive => 1,
        }
    }

    /// -1.0 or +1.0.
    #[inline]
    pub fn sign(self) -> f64 {
        match self {
            Polarity::Negative => -1.0,
            Polarity::Positive => 1.0,
        }
    }
}

/// A single sensor event. `t` is in microseconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event {
    pub t: u64,
    pub x: f64,
    pub y: f64,
    pub p: Polarity,
}

impl Event {
    pub fn new(t: u64, x: f64, y: f64, p: Polarity) -> Self {
        Event { t, x, y, p }
    }

    /// Timestamp in seconds.
    #[inline]
    pub fn t_seconds(&self) -> f64 {
        us_to_seconds(self.t)
    }
}

#[inline]
pub fn us_to_seconds(t: u64) -> f64 {
    t as f64 * 1e-6
}

/// Nearest microsecond for a non-negative time in seconds.
#[inline]
pub fn seconds_to_us(t: f64) -> u64 {
    (t * 1e6).round().max(0.0) as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SensorGeometry {
    pub width: u32,
    pub height: u32,
}

impl SensorGeometry {
    pub fn new(width: u32, height: u32) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(EventError::Geometry { width, height });
        }
        Ok(SensorGeometry { width, height })
    }

    #[inline]
    pub fn pixels(&self) -> usize {
        self.width as usize * self.height as usize
    }

    /// True when `(x, y)` lies in `[0, W-1] x [0, H-1]`.
    #[inline]
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= 0.0 && y >= 0.0 && x <= (self.width - 1) as f64 && y <= (self.height - 1) as f64
    }
}

impl fmt::Display for SensorGeometry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.width, self.height)
    }
}

/// Interval convention used when slicing a window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Interval {
    /// `t0 <= t <= t1`
    #[default]
    Closed,
    /// `t0 <= t < t1`, for partitioning a stream without duplicates.
    HalfOpen,
}

/// A time-sorted, immutable set of events over `[t_start, t_end]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EventWindow {
    events: Vec<Event>,
    t_start: u64,
    t_end: u64,
    geometry: SensorGeometry,
}

impl EventWindow {
    /// Validates ordering, bounds and window coverage.
    pub fn new(events: Vec<Event>, t_start: u64, t_end: u64, geometry: SensorGeometry) -> Result<Self> {
        validate_events(&events, geometry)?;
        if t_start > t_end {
            return Err(EventError::InvalidSlice { t0: t_start, t1: t_end });
        }
        if let (Some(first), Some(last)) = (events.first(), events.last()) {
            if first.t < t_start || last.t > t_end {
                return Err(EventError::Record {
                    index: if first.t < t_start { 0 } else { events.len() - 1 },
                    reason: format!("timestamp outside window [{t_start}, {t_end}]"),
                });
            }
        }
        Ok(EventWindow { events, t_start, t_end, geometry })
    }

    /// Window spanning exactly the first to the last event (0..0 when empty).
    pub fn from_events(events: Vec<Event>, geometry: SensorGeometry) -> Result<Self> {
        let (t_start, t_end) = match (events.first(), events.last()) {
            (Some(a), Some(b)) => (a.t, b.t),
            _ => (0, 0),
        };
        Self::new(events, t_start, t_end, geometry)
    }

    /// Sorts (stably) before validating.
    pub fn from_unsorted(mut events: Vec<Event>, t_start: u64, t_end: u64, geometry: SensorGeometry) -> Result<Self> {
        events.sort_by_key(|e| e.t);
        Self::new(events, t_start, t_end, geometry)
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn into_events(self) -> Vec<Event> {
        self.events
    }

    pub fn t_start(&self) -> u64 {
        self.t_start
    }

    pub fn t_end(&self) -> u64 {
        self.t_end
    }

    pub fn geometry(&self) -> SensorGeometry {
        self.geometry
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Closed-interval slice `[t0, t1]`.
    pub fn slice(&self, t0: u64, t1: u64) -> Result<EventWindow> {
        self.slice_with(t0, t1, Interval::Closed)
    }

    pub fn slice_with(&self, t0: u64, t1: u64, interval: Interval) -> Result<EventWindow> {
        if t0 > t1 {
            return Err(EventError::InvalidSlice { t0, t1 });
        }
        let lo = self.events.partition_point(|e| e.t < t0);
        let hi = match interval {
            Interval::Closed => self.events.partition_point(|e| e.t <= t1),
            Interval::HalfOpen => self.events.partition_point(|e| e.t < t1),
        };
        let events = if lo < hi { self.events[lo..hi].to_vec() } else { Vec::new() };
        Ok(EventWindow { events, t_start: t0, t_end: t1, geometry: self.geometry })
    }
}

/// Slices `window` to the closed interval `[t0, t1]`.
pub fn slice_window(window: &EventWindow, t0: u64, t1: u64) -> Result<EventWindow> {
    window.slice(t0, t1)
}

fn validate_events(events: &[Event], geometry: SensorGeometry) -> Result<()> {
    let mut prev = 0u64;
    for (index, e) in events.iter().enumerate() {
        if index > 0 && e.t < prev {
            return Err(EventError::TimestampRegression { index, t: e.t, prev });
        }
        if !e.x.is_finite() || !e.y.is_finite() || !geometry.contains(e.x, e.y) {
            return Err(EventError::OutOfBounds {
                index,
                x: e.x,
                y: e.y,
                width: geometry.width,
                height: geometry.height,
            });
        }
        prev = e.t;
    }
    Ok(())
}

/// On-disk flavor of an event file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventFormat {
    Binary,
    Text,
}

impl EventFormat {
    /// `.txt`/`.csv` are text, anything else binary.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("txt") | Some("csv") => EventFormat::Text,
            _ => EventFormat::Binary,
        }
    }
}

pub fn load_events(path: &Path, format: EventFormat) -> Result<EventWindow> {
    let bytes = std::fs::read(path)?;
    match format {
        EventFormat::Binary => decode_evt1(&bytes),
        EventFormat::Text => decode_text(&bytes),
    }
}

pub fn save_events(path: &Path, window: &EventWindow, format: EventFormat) -> Result<()> {
    let bytes = match format {
        EventFormat::Binary => encode_evt1(window)?,
        EventFormat::Text => {
            let mut out = Vec::new();
            write_text(&mut out, window)?;
            out
        }
    };
    std::fs::write(path, bytes)?;
    Ok(())
}

fn read_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

fn read_u64(b: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(b[at..at + 8].try_into().unwrap())
}

fn read_u16(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes(b[at..at + 2].try_into().unwrap())
}

/// Decodes an EVT1 byte buffer. The result spans the first to last event.
pub fn decode_evt1(bytes: &[u8]) -> Result<EventWindow> {
    if bytes.len() < EVT1_HEADER_LEN {
        return Err(EventError::Header(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if bytes[..4] != EVT1_MAGIC {
        return Err(EventError::Header("bad magic".into()));
    }
    let version = read_u32(bytes, 4);
    if version != EVT1_VERSION {
        return Err(EventError::Header(format!("unsupported version {version}")));
    }
    let geometry = SensorGeometry::new(read_u32(bytes, 8), read_u32(bytes, 12))
        .map_err(|e| EventError::Header(e.to_string()))?;
    let count = read_u64(bytes, 16);
    let body = &bytes[EVT1_HEADER_LEN..];
    let expected = (count as u128) * EVT1_RECORD_LEN as u128;
    if body.len() as u128 != expected {
        return Err(EventError::Header(format!(
            "count {count} needs {expected} body bytes, found {}",
            body.len()
        )));
    }
    let mut events = Vec::with_capacity(count as usize);
    for (index, rec) in body.chunks_exact(EVT1_RECORD_LEN).enumerate() {
        let t = read_u64(rec, 0);
        let x = read_u16(rec, 8) as f64 / 256.0;
        let y = read_u16(rec, 10) as f64 / 256.0;
        let p = Polarity::from_raw(rec[12]).ok_or_else(|| EventError::Record {
            index,
            reason: format!("polarity byte {}", rec[12]),
        })?;
        if rec[13] != 0 {
            return Err(EventError::Record { index, reason: "non-zero pad byte".into() });
        }
        events.push(Event { t, x, y, p });
    }
    EventWindow::from_events(events, geometry)
}

fn to_q8(v: f64) -> Result<u16> {
    let q = v * 256.0;
    if !(0.0..=u16::MAX as f64).contains(&q) || q.fract() != 0.0 {
        return Err(EventError::Unrepresentable(v));
    }
    Ok(q as u16)
}

/// Encodes a window as EVT1. Coordinates must be exact multiples of 1/256
/// below 256.
pub fn encode_evt1(window: &EventWindow) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(EVT1_HEADER_LEN + window.len() * EVT1_RECORD_LEN);
    out.extend_from_slice(&EVT1_MAGIC);
    out.extend_from_slice(&EVT1_VERSION.to_le_bytes());
    out.extend_from_slice(&window.geometry.width.to_le_bytes());
    out.extend_from_slice(&window.geometry.height.to_le_bytes());
    out.extend_from_slice(&(window.len() as u64).to_le_bytes());
    for e in window.events() {
        out.extend_from_slice(&e.t.to_le_bytes());
        out.extend_from_slice(&to_q8(e.x)?.to_le_bytes());
        out.extend_from_slice(&to_q8(e.y)?.to_le_bytes());
        out.push(e.p.raw());
        out.push(0);
    }
    Ok(out)
}

/// Decodes the text format: `# evt1 W H` then `t_us,x,y,p` lines.
/// Blank lines and further `#` comments are skipped.
pub fn decode_text(bytes: &[u8]) -> Result<EventWindow> {
    let text = std::str::from_utf8(bytes).map_err(|e| EventError::Header(e.to_string()))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| EventError::Header("empty file".into()))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 4 || fields[0] != "#" || fields[1] != "evt1" {
        return Err(EventError::Header(format!("expected `# evt1 W H`, found {header:?}")));
    }
    let parse_dim = |s: &str| s.parse::<u32>().map_err(|e| EventError::Header(format!("{s:?}: {e}")));
    let geometry = SensorGeometry::new(parse_dim(fields[2])?, parse_dim(fields[3])?)
        .map_err(|e| EventError::Header(e.to_string()))?;

    let mut events = Vec::new();
    for line in lines {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let index = events.len();
        let bad = |reason: String| EventError::Record { index, reason };
        let parts: Vec<&str> = line.split(',').map(str::trim).collect();
        if parts.len() != 4 {
            return Err(bad(format!("expected 4 fields, found {}", parts.len())));
        }
        let t = parts[0].parse::<u64>().map_err(|e| bad(format!("t: {e}")))?;
        let x = parts[1].parse::<f64>().map_err(|e| bad(format!("x: {e}")))?;
        let y = parts[2].parse::<f64>().map_err(|e| bad(format!("y: {e}")))?;
        let p = parts[3]
            .parse::<u8>()
            .ok()
            .and_then(Polarity::from_raw)
            .ok_or_else(|| bad(format!("polarity {:?}", parts[3])))?;
        events.push(Event { t, x, y, p });
    }
    EventWindow::from_events(events, geometry)
}

pub fn write_text<W: Write>(out: &mut W, window: &EventWindow) -> Result<()> {
    writeln!(out, "# evt1 {} {}", window.geometry.width, window.geometry.height)?;
    for e in window.events() {
        writeln!(out, "{},{},{},{}", e.t, e.x, e.y, e.p.raw())?;
    }
    Ok(())
}

/// Line-oriented reader used by tools that stream text events.
pub fn read_text<R: BufRead>(mut reader: R) -> Result<EventWindow> {
    let mut buf = Vec::new();
    reader.read_to_end(&mut buf)?;
    decode_text(&buf)
}
