//! On-disk formats, little-endian throughout.
//!
//! * events: `"EVT1"`, u32 count, then `count` 14-byte records
//!   `{x: u16, y: u16, t: i64, p: i8, pad: u8}`.
//! * frames: `"FRM1"`, u32 H, u32 W, u32 C, u32 T, then `T·H·W·C` f32 values.
//! * ground truth: one `frame_idx,cx,cy,w,h` line per frame.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{BBox, Event, EventStream};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

const EVENT_MAGIC: &[u8; 4] = b"EVT1";
const FRAME_MAGIC: &[u8; 4] = b"FRM1";
const EVENT_RECORD: usize = 14;

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn encode_events(events: &[Event]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + events.len() * EVENT_RECORD);
    out.extend_from_slice(EVENT_MAGIC);
    out.extend_from_slice(&(events.len() as u32).to_le_bytes());
    for e in events {
        out.extend_from_slice(&e.x.to_le_bytes());
        out.extend_from_slice(&e.y.to_le_bytes());
        out.extend_from_slice(&e.t.to_le_bytes());
        out.push(e.p as u8);
        out.push(0);
    }
    out
}

pub fn decode_events(bytes: &[u8]) -> Result<Vec<Event>> {
    if bytes.len() < 8 || &bytes[..4] != EVENT_MAGIC {
        return Err(Error::format("event file", "missing EVT1 header"));
    }
    let count = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body = &bytes[8..];
    if body.len() != count * EVENT_RECORD {
        return Err(Error::format(
            "event file",
            format!("{count} records need {} bytes, found {}", count * EVENT_RECORD, body.len()),
        ));
    }
    Ok(body
        .chunks_exact(EVENT_RECORD)
        .map(|r| Event {
            x: u16::from_le_bytes([r[0], r[1]]),
            y: u16::from_le_bytes([r[2], r[3]]),
            t: i64::from_le_bytes(r[4..12].try_into().unwrap()),
            p: r[12] as i8,
        })
        .collect())
}

pub fn write_events(path: &Path, events: &[Event]) -> Result<()> {
    fs::write(path, encode_events(events))?;
    Ok(())
}

/// Reads an event file and validates it against the sensor size.
pub fn read_events(path: &Path, height: usize, width: usize) -> Result<EventStream> {
    let events = decode_events(&fs::read(path)?)?;
    EventStream::new(events, height, width)
}

/// `T` frames of `[H, W, C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameStack {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub frames: Vec<Tensor>,
}

impl FrameStack {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

pub fn write_frames(path: &Path, stack: &FrameStack) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(FRAME_MAGIC)?;
    for v in [stack.height, stack.width, stack.channels, stack.frames.len()] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    for f in &stack.frames {
        for &v in f.data() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_frames(path: &Path) -> Result<FrameStack> {
    let mut r = BufReader::new(fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != FRAME_MAGIC {
        return Err(Error::format("frame file", "missing FRM1 header"));
    }
    let h = read_u32(&mut r)? as usize;
    let w = read_u32(&mut r)? as usize;
    let c = read_u32(&mut r)? as usize;
    let t = read_u32(&mut r)? as usize;
    let per = h * w * c;
    let mut buf = vec![0u8; per * 4];
    let mut frames = Vec::with_capacity(t);
    for i in 0..t {
        r.read_exact(&mut buf)
            .map_err(|e| Error::format("frame file", format!("frame {i}: {e}")))?;
        let data = buf
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        frames.push(Tensor::new(&[h, w, c], data)?);
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::format("frame file", format!("{} trailing bytes", rest.len())));
    }
    Ok(FrameStack {
        height: h,
        width: w,
        channels: c,
        frames,
    })
}

pub fn write_ground_truth(path: &Path, boxes: &[BBox]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for (i, b) in boxes.iter().enumerate() {
        writeln!(w, "{i},{},{},{},{}", b.cx, b.cy, b.w, b.h)?;
    }
    w.flush()?;
    Ok(())
}

/// Parses `frame_idx,cx,cy,w,h` lines; frames must be listed in order from 0.
pub fn read_ground_truth(path: &Path) -> Result<Vec<BBox>> {
    let r = BufReader::new(fs::File::open(path)?);
    let mut boxes = Vec::new();
    for (ln, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let bad = |msg: &str| Error::format("ground truth", format!("line {}: {msg}", ln + 1));
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 5 {
            return Err(bad("expected frame_idx,cx,cy,w,h"));
        }
        let idx: usize = fields[0].parse().map_err(|_| bad("bad frame index"))?;
        if idx != boxes.len() {
            return Err(bad("frame indices must be consecutive from 0"));
        }
        let mut v = [0.0; 4];
        for (slot, f) in v.iter_mut().zip(&fields[1..]) {
            *slot = f.parse().map_err(|_| bad("bad number"))?;
        }
        boxes.push(BBox::new(v[0], v[1], v[2], v[3]));
    }
    Ok(boxes)
}
