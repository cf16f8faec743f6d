//! Event-stream data model: sorted asynchronous events, temporal binning into
//! signed stacks, and signed per-pixel integration between two timestamps.

mod io;

pub use io::{read_events, read_stack, write_events, write_stack};

use std::fmt;
use std::io as stdio;
use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EventError {
    #[error("sensor dimensions must be non-zero (got {width}x{height})")]
    ZeroDims { width: usize, height: usize },
    #[error("window length must be positive (got [{t0}, {t1}])")]
    EmptyWindow { t0: f64, t1: f64 },
    #[error("bin count must be at least 1")]
    ZeroBins,
    #[error("half-width must be positive (got {0})")]
    NonPositiveHalfWidth(f64),
    #[error("event {index} at ({x}, {y}) lies outside a {width}x{height} sensor")]
    OutOfBounds {
        index: usize,
        x: u32,
        y: u32,
        width: usize,
        height: usize,
    },
    #[error("event {index} has timestamp {t} which is not sorted or not finite")]
    Unsorted { index: usize, t: f64 },
    #[error("event {index} at t={t} lies outside the stream span [{begin}, {end}]")]
    OutsideSpan {
        index: usize,
        t: f64,
        begin: f64,
        end: f64,
    },
    #[error("invalid time span [{0}, {1}]")]
    BadSpan(f64, f64),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: stdio::Error,
    },
    #[error("stack file: {0}")]
    BadStack(String),
}

/// Sign of a log-intensity change.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Polarity {
    Positive,
    Negative,
}

impl Polarity {
    pub fn from_sign(p: i64) -> Option<Self> {
        match p {
            1 => Some(Polarity::Positive),
            -1 => Some(Polarity::Negative),
            _ => None,
        }
    }

    #[inline]
    pub fn sign(self) -> i32 {
        match self {
            Polarity::Positive => 1,
            Polarity::Negative => -1,
        }
    }
}

impl fmt::Display for Polarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.sign())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Event {
    /// Seconds.
    pub t: f64,
    pub x: u32,
    pub y: u32,
    pub p: Polarity,
}

impl Event {
    pub fn new(t: f64, x: u32, y: u32, p: Polarity) -> Self {
        Self { t, x, y, p }
    }
}

/// Time-ordered events from a `width` x `height` sensor over `[t_begin, t_end]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EventStream {
    events: Vec<Event>,
    width: usize,
    height: usize,
    t_begin: f64,
    t_end: f64,
}

impl EventStream {
    /// Validates sortedness, bounds and span membership.
    pub fn new(
        events: Vec<Event>,
        width: usize,
        height: usize,
        t_begin: f64,
        t_end: f64,
    ) -> Result<Self, EventError> {
        if width == 0 || height == 0 {
            return Err(EventError::ZeroDims { width, height });
        }
        if !(t_begin.is_finite() && t_end.is_finite() && t_begin <= t_end) {
            return Err(EventError::BadSpan(t_begin, t_end));
        }
        let mut prev = f64::NEG_INFINITY;
        for (index, e) in events.iter().enumerate() {
            if !e.t.is_finite() || e.t < prev {
                return Err(EventError::Unsorted { index, t: e.t });
            }
            prev = e.t;
            if e.x as usize >= width || e.y as usize >= height {
                return Err(EventError::OutOfBounds {
                    index,
                    x: e.x,
                    y: e.y,
                    width,
                    height,
                });
            }
            if e.t < t_begin || e.t > t_end {
                return Err(EventError::OutsideSpan {
                    index,
                    t: e.t,
                    begin: t_begin,
                    end: t_end,
                });
            }
        }
        Ok(Self {
            events,
            width,
            height,
            t_begin,
            t_end,
        })
    }

    pub fn empty(width: usize, height: usize, t_begin: f64, t_end: f64) -> Result<Self, EventError> {
        Self::new(Vec::new(), width, height, t_begin, t_end)
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn span(&self) -> (f64, f64) {
        (self.t_begin, self.t_end)
    }

    /// Index of the first event with `t > bound`.
    fn upper_bound(&self, bound: f64) -> usize {
        self.events.partition_point(|e| e.t <= bound)
    }

    /// Index of the first event with `t >= bound`.
    fn lower_bound(&self, bound: f64) -> usize {
        self.events.partition_point(|e| e.t < bound)
    }
}

/// Dense `height` x `width` grid of signed values.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid2D {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Grid2D {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }
}

/// `bins` x `height` x `width` signed event counts over `[t0, t1]`, bin-major.
#[derive(Clone, Debug, PartialEq)]
pub struct EventStack {
    pub bins: usize,
    pub height: usize,
    pub width: usize,
    pub t0: f64,
    pub t1: f64,
    pub data: Vec<f32>,
}

impl EventStack {
    pub fn zeros(bins: usize, height: usize, width: usize, t0: f64, t1: f64) -> Self {
        Self {
            bins,
            height,
            width,
            t0,
            t1,
            data: vec![0.0; bins * height * width],
        }
    }

    #[inline]
    pub fn get(&self, bin: usize, y: usize, x: usize) -> f32 {
        self.data[(bin * self.height + y) * self.width + x]
    }

    pub fn bin(&self, bin: usize) -> &[f32] {
        let plane = self.height * self.width;
        &self.data[bin * plane..(bin + 1) * plane]
    }

    /// Sum over the bin axis.
    pub fn collapse(&self) -> Grid2D {
        let mut out = Grid2D::zeros(self.height, self.width);
        for b in 0..self.bins {
            for (o, v) in out.data.iter_mut().zip(self.bin(b)) {
                *o += v;
            }
        }
        out
    }
}

/// Bin index of timestamp `t` for `bins` equal slices of `[t0, t1]`: half-open
/// bins with the last one closed. `None` outside the window.
#[inline]
pub fn bin_index(t: f64, t0: f64, t1: f64, bins: usize) -> Option<usize> {
    if t < t0 || t > t1 {
        return None;
    }
    let frac = (t - t0) / (t1 - t0);
    let b = (frac * bins as f64).floor() as usize;
    Some(b.min(bins - 1))
}

/// Accumulates event polarities into `bins` temporal slices of `[t0, t1]`.
/// Events outside the window are ignored.
pub fn stack_events(
    stream: &EventStream,
    t0: f64,
    t1: f64,
    bins: usize,
    height: usize,
    width: usize,
) -> Result<EventStack, EventError> {
    if !(t1 - t0 > 0.0) || !t0.is_finite() || !t1.is_finite() {
        return Err(EventError::EmptyWindow { t0, t1 });
    }
    if bins == 0 {
        return Err(EventError::ZeroBins);
    }
    if height == 0 || width == 0 {
        return Err(EventError::ZeroDims { width, height });
    }
    let mut stack = EventStack::zeros(bins, height, width, t0, t1);
    let lo = stream.lower_bound(t0);
    let hi = stream.upper_bound(t1);
    for e in &stream.events[lo..hi] {
        let (x, y) = (e.x as usize, e.y as usize);
        if x >= width || y >= height {
            continue;
        }
        if let Some(b) = bin_index(e.t, t0, t1, bins) {
            stack.data[(b * height + y) * width + x] += e.p.sign() as f32;
        }
    }
    Ok(stack)
}

/// Signed per-pixel polarity sum over `(min(tau, t), max(tau, t)]`, negated when
/// `t < tau`, so that `integrate(s, a, b) == -integrate(s, b, a)`.
pub fn integrate(stream: &EventStream, tau: f64, t: f64) -> Grid2D {
    let (w, h) = (stream.width, stream.height);
    let mut counts = vec![0i32; w * h];
    let (a, b) = if tau <= t { (tau, t) } else { (t, tau) };
    let lo = stream.upper_bound(a);
    let hi = stream.upper_bound(b);
    if lo < hi {
        for e in &stream.events[lo..hi] {
            counts[e.y as usize * w + e.x as usize] += e.p.sign();
        }
    }
    let sign = if t < tau { -1 } else { 1 };
    Grid2D {
        height: h,
        width: w,
        data: counts.into_iter().map(|c| (sign * c) as f32).collect(),
    }
}

/// Cumulative signed counts `C(t)` of events with timestamp `<= t` for several
/// query times at once, in a single sweep. `integrate(s, a, b) == C(b) - C(a)`.
pub fn cumulative_counts(stream: &EventStream, times: &[f64]) -> Vec<Vec<i32>> {
    let plane = stream.width * stream.height;
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&i, &j| times[i].total_cmp(&times[j]));
    let mut out = vec![Vec::new(); times.len()];
    let mut acc = vec![0i32; plane];
    let mut cursor = 0usize;
    for &qi in &order {
        let end = stream.upper_bound(times[qi]).max(cursor);
        for e in &stream.events[cursor..end] {
            acc[e.y as usize * stream.width + e.x as usize] += e.p.sign();
        }
        cursor = end;
        out[qi] = acc.clone();
    }
    out
}

/// Stack over `[tau - half_width, tau + half_width]`. The bin geometry is always
/// anchored at the nominal window, so any part of it outside the stream's span
/// simply accumulates nothing.
pub fn tau_centered_stack(
    stream: &EventStream,
    tau: f64,
    half_width: f64,
    bins: usize,
) -> Result<EventStack, EventError> {
    if !(half_width > 0.0) {
        return Err(EventError::NonPositiveHalfWidth(half_width));
    }
    stack_events(
        stream,
        tau - half_width,
        tau + half_width,
        bins,
        stream.height,
        stream.width,
    )
}
