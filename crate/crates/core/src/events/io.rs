//! `EVT1` text event files and `ESTK` binary stack files.
//!
//! `EVT1` is one header line `EVT1 W H [t_begin t_end]` followed by one
//! `t x y p` record per line. Timestamps are written with the shortest
//! representation that parses back to the same `f64`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Event, EventError, EventStack, EventStream, Polarity};

const STACK_MAGIC: &[u8; 4] = b"ESTK";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EventError + '_ {
    move |source| EventError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_events(stream: &EventStream, path: impl AsRef<Path>) -> Result<(), EventError> {
    let path = path.as_ref();
    let file = File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    let (t0, t1) = stream.span();
    (|| -> std::io::Result<()> {
        writeln!(out, "EVT1 {} {} {:?} {:?}", stream.width(), stream.height(), t0, t1)?;
        for e in stream.events() {
            writeln!(out, "{:?} {} {} {}", e.t, e.x, e.y, e.p)?;
        }
        out.flush()
    })()
    .map_err(io_err(path))
}

pub fn read_events(path: impl AsRef<Path>) -> Result<EventStream, EventError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(io_err(path))?;
    parse_events(BufReader::new(file)).map_err(|e| match e {
        EventError::Io { source, .. } => EventError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => other,
    })
}

fn parse_err(line: usize, message: impl Into<String>) -> EventError {
    EventError::Parse {
        line,
        message: message.into(),
    }
}

pub(crate) fn parse_events(reader: impl BufRead) -> Result<EventStream, EventError> {
    let mut lines = reader.lines();
    let header = match lines.next() {
        Some(l) => l.map_err(|source| EventError::Io {
            path: Default::default(),
            source,
        })?,
        None => return Err(parse_err(1, "missing EVT1 header")),
    };
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.first() != Some(&"EVT1") || !(fields.len() == 3 || fields.len() == 5) {
        return Err(parse_err(1, format!("malformed header {header:?}")));
    }
    let dim = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| parse_err(1, format!("bad dimension {s:?}")))
    };
    let (width, height) = (dim(fields[1])?, dim(fields[2])?);
    if width == 0 || height == 0 {
        return Err(parse_err(1, "zero sensor dimension"));
    }
    let span = if fields.len() == 5 {
        let t = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| parse_err(1, format!("bad span bound {s:?}")))
        };
        Some((t(fields[3])?, t(fields[4])?))
    } else {
        None
    };

    let mut events = Vec::new();
    let mut prev = f64::NEG_INFINITY;
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line.map_err(|source| EventError::Io {
            path: Default::default(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let mut next = |what: &str| {
            it.next()
                .ok_or_else(|| parse_err(lineno, format!("missing {what}")))
        };
        let t: f64 = next("timestamp")?
            .parse()
            .map_err(|_| parse_err(lineno, "bad timestamp"))?;
        let x: u32 = next("x")?.parse().map_err(|_| parse_err(lineno, "bad x"))?;
        let y: u32 = next("y")?.parse().map_err(|_| parse_err(lineno, "bad y"))?;
        let p_raw: i64 = next("polarity")?
            .parse()
            .map_err(|_| parse_err(lineno, "bad polarity"))?;
        if it.next().is_some() {
            return Err(parse_err(lineno, "trailing fields"));
        }
        let p = Polarity::from_sign(p_raw)
            .ok_or_else(|| parse_err(lineno, format!("polarity must be -1 or 1, got {p_raw}")))?;
        if !t.is_finite() || t < prev {
            return Err(parse_err(lineno, format!("timestamp {t} is not sorted")));
        }
        if x as usize >= width || y as usize >= height {
            return Err(parse_err(
                lineno,
                format!("coordinate ({x}, {y}) outside {width}x{height}"),
            ));
        }
        prev = t;
        events.push(Event::new(t, x, y, p));
    }
    let (t_begin, t_end) = span.unwrap_or_else(|| {
        let end = events.last().map_or(0.0, |e| e.t);
        (0.0f64.min(events.first().map_or(0.0, |e| e.t)), end)
    });
    EventStream::new(events, width, height, t_begin, t_end).map_err(|e| parse_err(1, e.to_string()))
}

pub fn write_stack(stack: &EventStack, path: impl AsRef<Path>) -> Result<(), EventError> {
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(32 + 4 * stack.data.len());
    buf.extend_from_slice(STACK_MAGIC);
    for d in [stack.bins, stack.height, stack.width] {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    buf.extend_from_slice(&stack.t0.to_le_bytes());
    buf.extend_from_slice(&stack.t1.to_le_bytes());
    for v in &stack.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, buf).map_err(io_err(path))
}

pub fn read_stack(path: impl AsRef<Path>) -> Result<EventStack, EventError> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(io_err(path))?;
    if bytes.len() < 32 || &bytes[..4] != STACK_MAGIC {
        return Err(EventError::BadStack("missing ESTK magic".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let (bins, height, width) = (u32_at(4), u32_at(8), u32_at(12));
    let (t0, t1) = (f64_at(16), f64_at(24));
    let n = bins * height * width;
    if bytes.len() != 32 + 4 * n {
        return Err(EventError::BadStack(format!(
            "expected {} payload bytes, found {}",
            4 * n,
            bytes.len() - 32
        )));
    }
    let data = bytes[32..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(EventStack {
        bins,
        height,
        width,
        t0,
        t1,
        data,
    })
}
