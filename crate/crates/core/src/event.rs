//! Event-stream data model, file I/O, event-to-frame conversion, and
//! RGB/event temporal alignment.
//!
//! Two event file formats are supported:
//!
//! - `EVT-TXT`: UTF-8 text. Line 1 is `EVT1 <W> <H>`, each following line is
//!   `<x> <y> <t> <p>` with single spaces and `p` in {1, -1}. Lines starting
//!   with `#` are comments.
//! - `EVT-BIN`: magic `EVB1`, u32 W, u32 H, u64 count, then `count` records
//!   of (u16 x, u16 y, u64 t, i8 p), little-endian.
//!
//! Frame sequences serialize as `FRM1`: magic, u32 T, u32 H, u32 W, then
//! T*H*W*3 little-endian f32 values in row-major order.

use thiserror::Error;

/// Per-pixel, per-bin event count at which a channel saturates to 1.0.
///
/// Polarity-split count images: OFF events fill channel 0, ON events fill
/// channel 2, channel 1 stays zero; counts are divided by this constant and
/// clamped to [0, 1].
pub const SATURATION_EVENTS: f32 = 5.0;

pub const EVT_TXT_MAGIC: &str = "EVT1";
pub const EVT_BIN_MAGIC: &[u8; 4] = b"EVB1";
pub const FRAME_MAGIC: &[u8; 4] = b"FRM1";

#[derive(Debug, Error)]
pub enum EventError {
    #[error("format error: {0}")]
    Format(String),
    #[error("line {line}: coordinate ({x}, {y}) out of bounds for {w}x{h}")]
    Bounds {
        line: usize,
        x: u32,
        y: u32,
        w: u16,
        h: u16,
    },
    #[error("line {line}: polarity must be 1 or -1, got {value}")]
    Polarity { line: usize, value: i64 },
    #[error("bin edges must be strictly increasing")]
    BinEdges,
    #[error("alignment mismatch on axis {axis}: rgb {rgb} vs evt {evt}")]
    Alignment {
        axis: &'static str,
        rgb: usize,
        evt: usize,
    },
    #[error("frame values must lie in [0, 1]")]
    FrameRange,
    #[error("frame times must be strictly increasing and have T+1 entries")]
    FrameTimes,
    #[error("empty frame sequence")]
    Empty,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EventError>;

/// One sensor event: pixel column, pixel row, microsecond timestamp, and
/// polarity (+1 ON, -1 OFF).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EventPoint {
    pub x: u16,
    pub y: u16,
    pub t: u64,
    pub p: i8,
}

/// Time-sorted event list with its sensor resolution. Ties in `t` preserve
/// input order.
#[derive(Clone, Debug, PartialEq)]
pub struct EventStream {
    width: u16,
    height: u16,
    events: Vec<EventPoint>,
}

impl EventStream {
    /// Builds a stream, validating bounds and polarity and stable-sorting by
    /// timestamp.
    pub fn new(width: u16, height: u16, mut events: Vec<EventPoint>) -> Result<Self> {
        for (i, e) in events.iter().enumerate() {
            if e.x >= width || e.y >= height {
                return Err(EventError::Bounds {
                    line: i + 1,
                    x: e.x as u32,
                    y: e.y as u32,
                    w: width,
                    h: height,
                });
            }
            if e.p != 1 && e.p != -1 {
                return Err(EventError::Polarity {
                    line: i + 1,
                    value: e.p as i64,
                });
            }
        }
        events.sort_by_key(|e| e.t);
        Ok(EventStream {
            width,
            height,
            events,
        })
    }

    pub fn resolution(&self) -> (u16, u16) {
        (self.width, self.height)
    }

    pub fn events(&self) -> &[EventPoint] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

/// T x H x W x 3 frame stack with values in [0, 1]. `frame_times` carries the
/// T+1 bin boundaries (microseconds) for event-derived sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    t: usize,
    h: usize,
    w: usize,
    data: Vec<f32>,
    frame_times: Option<Vec<u64>>,
}

impl FrameSequence {
    pub fn new(t: usize, h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != t * h * w * 3 {
            return Err(EventError::Format(format!(
                "frame data length {} != {}x{}x{}x3",
                data.len(),
                t,
                h,
                w
            )));
        }
        if data.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(EventError::FrameRange);
        }
        Ok(FrameSequence {
            t,
            h,
            w,
            data,
            frame_times: None,
        })
    }

    pub fn with_frame_times(mut self, times: Vec<u64>) -> Result<Self> {
        if times.len() != self.t + 1 || times.windows(2).any(|p| p[0] >= p[1]) {
            return Err(EventError::FrameTimes);
        }
        self.frame_times = Some(times);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.t
    }

    pub fn is_empty(&self) -> bool {
        self.t == 0
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn frame_times(&self) -> Option<&[u64]> {
        self.frame_times.as_deref()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Value at (frame, row, col, channel).
    pub fn at(&self, t: usize, y: usize, x: usize, c: usize) -> f32 {
        self.data[((t * self.h + y) * self.w + x) * 3 + c]
    }

    /// The raw values of one frame (H*W*3 slice).
    pub fn frame(&self, t: usize) -> &[f32] {
        let stride = self.h * self.w * 3;
        &self.data[t * stride..(t + 1) * stride]
    }

    /// New sequence containing the given frames in order. Frame times are
    /// dropped (a subset of frames has no contiguous bin boundaries).
    pub fn select_frames(&self, indices: &[usize]) -> FrameSequence {
        let stride = self.h * self.w * 3;
        let mut data = Vec::with_capacity(indices.len() * stride);
        for &i in indices {
            data.extend_from_slice(self.frame(i));
        }
        FrameSequence {
            t: indices.len(),
            h: self.h,
            w: self.w,
            data,
            frame_times: None,
        }
    }
}

/// Token ids of the ground-truth translation (content tokens only; no
/// bos/eos markers). See [`crate::translate::TokenSequence`].
pub use crate::translate::TokenSequence;

/// Temporally aligned RGB and event frame stacks plus the target tokens.
#[derive(Clone, Debug)]
pub struct AlignedSample {
    pub rgb: FrameSequence,
    pub evt: FrameSequence,
    pub tokens: TokenSequence,
    pub meta: String,
}

/// Parses the EVT-TXT format. Events are re-sorted by timestamp; already
/// sorted input keeps its order.
pub fn parse_event_file(bytes: &[u8]) -> Result<EventStream> {
    let text = std::str::from_utf8(bytes)
        .map_err(|_| EventError::Format("EVT-TXT is not valid UTF-8".into()))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .by_ref()
        .find(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .ok_or_else(|| EventError::Format("missing EVT1 header".into()))?;
    let mut parts = header.split(' ');
    if parts.next() != Some(EVT_TXT_MAGIC) {
        return Err(EventError::Format(format!("bad header line: {header:?}")));
    }
    let width: u16 = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| EventError::Format("header width".into()))?;
    let height: u16 = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| EventError::Format("header height".into()))?;
    if parts.next().is_some() {
        return Err(EventError::Format("trailing tokens in header".into()));
    }

    let mut events = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(' ').collect();
        if fields.len() != 4 {
            return Err(EventError::Format(format!(
                "line {line_no}: expected `x y t p`, got {trimmed:?}"
            )));
        }
        let x: u32 = fields[0]
            .parse()
            .map_err(|_| EventError::Format(format!("line {line_no}: bad x {:?}", fields[0])))?;
        let y: u32 = fields[1]
            .parse()
            .map_err(|_| EventError::Format(format!("line {line_no}: bad y {:?}", fields[1])))?;
        let t: u64 = fields[2]
            .parse()
            .map_err(|_| EventError::Format(format!("line {line_no}: bad t {:?}", fields[2])))?;
        let p: i64 = fields[3]
            .parse()
            .map_err(|_| EventError::Format(format!("line {line_no}: bad p {:?}", fields[3])))?;
        if x >= width as u32 || y >= height as u32 {
            return Err(EventError::Bounds {
                line: line_no,
                x,
                y,
                w: width,
                h: height,
            });
        }
        if p != 1 && p != -1 {
            return Err(EventError::Polarity {
                line: line_no,
                value: p,
            });
        }
        events.push(EventPoint {
            x: x as u16,
            y: y as u16,
            t,
            p: p as i8,
        });
    }
    EventStream::new(width, height, events)
}

/// Writes the EVT-TXT representation.
pub fn write_event_file(stream: &EventStream) -> Vec<u8> {
    let mut out = String::new();
    out.push_str(&format!(
        "{EVT_TXT_MAGIC} {} {}\n",
        stream.width, stream.height
    ));
    for e in &stream.events {
        out.push_str(&format!("{} {} {} {}\n", e.x, e.y, e.t, e.p));
    }
    out.into_bytes()
}

/// Parses the EVT-BIN format.
pub fn parse_event_bin(bytes: &[u8]) -> Result<EventStream> {
    let mut cursor = bytes;
    let magic = take(&mut cursor, 4)?;
    if magic != EVT_BIN_MAGIC {
        return Err(EventError::Format("bad EVT-BIN magic".into()));
    }
    let width = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap());
    let height = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap());
    if width > u16::MAX as u32 || height > u16::MAX as u32 {
        return Err(EventError::Format("resolution exceeds u16 range".into()));
    }
    let count = u64::from_le_bytes(take(&mut cursor, 8)?.try_into().unwrap());
    let mut events = Vec::with_capacity(count as usize);
    for i in 0..count {
        let x = u16::from_le_bytes(take(&mut cursor, 2)?.try_into().unwrap());
        let y = u16::from_le_bytes(take(&mut cursor, 2)?.try_into().unwrap());
        let t = u64::from_le_bytes(take(&mut cursor, 8)?.try_into().unwrap());
        let p = take(&mut cursor, 1)?[0] as i8;
        if x as u32 >= width || y as u32 >= height {
            return Err(EventError::Bounds {
                line: i as usize + 1,
                x: x as u32,
                y: y as u32,
                w: width as u16,
                h: height as u16,
            });
        }
        if p != 1 && p != -1 {
            return Err(EventError::Polarity {
                line: i as usize + 1,
                value: p as i64,
            });
        }
        events.push(EventPoint { x, y, t, p });
    }
    if !cursor.is_empty() {
        return Err(EventError::Format("trailing bytes after events".into()));
    }
    EventStream::new(width as u16, height as u16, events)
}

/// Writes the EVT-BIN representation.
pub fn write_event_bin(stream: &EventStream) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + stream.events.len() * 13);
    out.extend_from_slice(EVT_BIN_MAGIC);
    out.extend_from_slice(&(stream.width as u32).to_le_bytes());
    out.extend_from_slice(&(stream.height as u32).to_le_bytes());
    out.extend_from_slice(&(stream.events.len() as u64).to_le_bytes());
    for e in &stream.events {
        out.extend_from_slice(&e.x.to_le_bytes());
        out.extend_from_slice(&e.y.to_le_bytes());
        out.extend_from_slice(&e.t.to_le_bytes());
        out.push(e.p as u8);
    }
    out
}

fn take<'a>(cursor: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if cursor.len() < n {
        return Err(EventError::Format("unexpected end of input".into()));
    }
    let (head, tail) = cursor.split_at(n);
    *cursor = tail;
    Ok(head)
}

/// Writes a frame sequence in the FRM1 layout (frame times are not stored).
pub fn write_frames(frames: &FrameSequence) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + frames.data.len() * 4);
    out.extend_from_slice(FRAME_MAGIC);
    out.extend_from_slice(&(frames.t as u32).to_le_bytes());
    out.extend_from_slice(&(frames.h as u32).to_le_bytes());
    out.extend_from_slice(&(frames.w as u32).to_le_bytes());
    for &v in &frames.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parses the FRM1 layout.
pub fn parse_frames(bytes: &[u8]) -> Result<FrameSequence> {
    let mut cursor = bytes;
    let magic = take(&mut cursor, 4)?;
    if magic != FRAME_MAGIC {
        return Err(EventError::Format("bad FRM1 magic".into()));
    }
    let t = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap()) as usize;
    let h = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap()) as usize;
    let n = t * h * w * 3;
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        let v = f32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap());
        data.push(v);
    }
    if !cursor.is_empty() {
        return Err(EventError::Format("trailing bytes after frame data".into()));
    }
    FrameSequence::new(t, h, w, data)
}

fn check_bin_edges(bin_edges: &[u64]) -> Result<usize> {
    if bin_edges.len() < 2 || bin_edges.windows(2).any(|p| p[0] >= p[1]) {
        return Err(EventError::BinEdges);
    }
    Ok(bin_edges.len() - 1)
}

/// Accumulates events into polarity-split count frames.
///
/// Frame `t` collects events with timestamps in `[edge_t, edge_{t+1})`.
/// ON counts land in channel 2, OFF counts in channel 0; each count is
/// divided by [`SATURATION_EVENTS`] and clamped to [0, 1].
pub fn events_to_frames(stream: &EventStream, bin_edges: &[u64]) -> Result<FrameSequence> {
    let t_bins = check_bin_edges(bin_edges)?;
    let (w, h) = (stream.width as usize, stream.height as usize);
    let mut data = vec![0.0f32; t_bins * h * w * 3];
    for e in &stream.events {
        let Some(bin) = find_bin(bin_edges, e.t) else {
            continue;
        };
        let c = if e.p == 1 { 2 } else { 0 };
        let idx = ((bin * h + e.y as usize) * w + e.x as usize) * 3 + c;
        data[idx] += 1.0;
    }
    for v in &mut data {
        *v = (*v / SATURATION_EVENTS).min(1.0);
    }
    FrameSequence::new(t_bins, h, w, data)?.with_frame_times(bin_edges.to_vec())
}

/// Number of events per bin, regardless of polarity.
pub fn event_count_per_frame(stream: &EventStream, bin_edges: &[u64]) -> Result<Vec<usize>> {
    let t_bins = check_bin_edges(bin_edges)?;
    let mut counts = vec![0usize; t_bins];
    for e in &stream.events {
        if let Some(bin) = find_bin(bin_edges, e.t) {
            counts[bin] += 1;
        }
    }
    Ok(counts)
}

/// Bin index for timestamp `t` under half-open bins, or None when outside.
fn find_bin(edges: &[u64], t: u64) -> Option<usize> {
    if t < edges[0] || t >= *edges.last().unwrap() {
        return None;
    }
    // partition_point returns the count of edges <= t; the bin is one less.
    Some(edges.partition_point(|&e| e <= t) - 1)
}

/// Uniform division of the stream's `[t_min, t_max]` span into `bins` bins
/// (the fallback when no RGB frame timestamps are available). The last edge
/// lands one past `t_max` so the final event is binned.
pub fn uniform_bin_edges(stream: &EventStream, bins: usize) -> Result<Vec<u64>> {
    if bins == 0 {
        return Err(EventError::BinEdges);
    }
    if stream.is_empty() {
        return Ok((0..=bins as u64).collect());
    }
    let t_min = stream.events.first().unwrap().t;
    let t_max = stream.events.last().unwrap().t;
    let span = (t_max - t_min + 1).max(bins as u64);
    let mut edges: Vec<u64> = (0..=bins as u64)
        .map(|i| t_min + i * span / bins as u64)
        .collect();
    // Integer division can repeat edges on tiny spans; enforce strictness.
    for i in 1..edges.len() {
        if edges[i] <= edges[i - 1] {
            edges[i] = edges[i - 1] + 1;
        }
    }
    Ok(edges)
}

/// Wraps already matched RGB/event stacks into an [`AlignedSample`]. No
/// resampling happens here; a shape mismatch on T, H, or W is an error naming
/// the axis.
pub fn align(
    rgb: FrameSequence,
    evt: FrameSequence,
    tokens: TokenSequence,
    meta: impl Into<String>,
) -> Result<AlignedSample> {
    for (axis, a, b) in [
        ("T", rgb.t, evt.t),
        ("H", rgb.h, evt.h),
        ("W", rgb.w, evt.w),
    ] {
        if a != b {
            return Err(EventError::Alignment {
                axis,
                rgb: a,
                evt: b,
            });
        }
    }
    Ok(AlignedSample {
        rgb,
        evt,
        tokens,
        meta: meta.into(),
    })
}
