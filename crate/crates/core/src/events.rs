//! Event records and the two on-disk stream formats.
//!
//! Text: one event per line, `t x y p` with `t` in seconds and `p` in {0, 1}.
//! Binary: a 16-byte header (`FETAPEVT`, u16 width, u16 height, 4 reserved
//! bytes) followed by 16-byte little-endian records: u64 microseconds, u16 x,
//! u16 y, u8 polarity, 3 pad bytes.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"FETAPEVT";
const RECORD: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Polarity {
    Negative,
    Positive,
}

impl Polarity {
    pub fn sign(self) -> i8 {
        match self {
            Polarity::Negative => -1,
            Polarity::Positive => 1,
        }
    }

    pub fn from_bit(bit: u8) -> Option<Self> {
        match bit {
            0 => Some(Polarity::Negative),
            1 => Some(Polarity::Positive),
            _ => None,
        }
    }

    pub fn bit(self) -> u8 {
        (self == Polarity::Positive) as u8
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Event {
    pub x: u16,
    pub y: u16,
    pub t_us: u64,
    pub polarity: Polarity,
}

impl Event {
    pub fn new(x: u16, y: u16, t_us: u64, polarity: Polarity) -> Self {
        Self { x, y, t_us, polarity }
    }
}

/// Time-sorted events from a sensor of `width` × `height` pixels.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct EventStream {
    events: Vec<Event>,
    width: usize,
    height: usize,
}

impl EventStream {
    pub fn new(width: usize, height: usize, events: Vec<Event>) -> Result<Self> {
        if width == 0 || height == 0 || width > u16::MAX as usize + 1 || height > u16::MAX as usize + 1 {
            return Err(Error::Config(format!("sensor geometry {width}x{height}")));
        }
        if let Some(i) = events.windows(2).position(|w| w[1].t_us < w[0].t_us) {
            return Err(Error::Ordering(format!(
                "event {} at {} us precedes event {} at {} us",
                i + 1,
                events[i + 1].t_us,
                i,
                events[i].t_us
            )));
        }
        if let Some(e) = events.iter().find(|e| e.x as usize >= width || e.y as usize >= height) {
            return Err(Error::Usage(format!("event at ({}, {}) outside {width}x{height} sensor", e.x, e.y)));
        }
        Ok(Self { events, width, height })
    }

    pub fn empty(width: usize, height: usize) -> Result<Self> {
        Self::new(width, height, Vec::new())
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Events with `t_start <= t <= t_end`.
    pub fn window(&self, t_start: u64, t_end: u64) -> &[Event] {
        window(&self.events, t_start, t_end)
    }

    pub fn into_events(self) -> Vec<Event> {
        self.events
    }

    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(16 + RECORD * self.events.len());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(self.width as u16).to_le_bytes());
        buf.extend_from_slice(&(self.height as u16).to_le_bytes());
        buf.extend_from_slice(&[0; 4]);
        for e in &self.events {
            buf.extend_from_slice(&e.t_us.to_le_bytes());
            buf.extend_from_slice(&e.x.to_le_bytes());
            buf.extend_from_slice(&e.y.to_le_bytes());
            buf.push(e.polarity.bit());
            buf.extend_from_slice(&[0; 3]);
        }
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn read_binary(path: &Path) -> Result<Self> {
        let buf = fs::read(path)?;
        if buf.len() < 16 || &buf[..8] != MAGIC {
            return Err(Error::format(path, "missing FETAPEVT header"));
        }
        let width = u16::from_le_bytes([buf[8], buf[9]]) as usize;
        let height = u16::from_le_bytes([buf[10], buf[11]]) as usize;
        let body = &buf[16..];
        if body.len() % RECORD != 0 {
            return Err(Error::format(path, format!("{} trailing bytes", body.len() % RECORD)));
        }
        let mut events = Vec::with_capacity(body.len() / RECORD);
        for (i, r) in body.chunks_exact(RECORD).enumerate() {
            let t_us = u64::from_le_bytes(r[..8].try_into().expect("8-byte slice"));
            let x = u16::from_le_bytes([r[8], r[9]]);
            let y = u16::from_le_bytes([r[10], r[11]]);
            let polarity =
                Polarity::from_bit(r[12]).ok_or_else(|| Error::format(path, format!("record {i}: polarity {}", r[12])))?;
            events.push(Event { x, y, t_us, polarity });
        }
        Self::new(width, height, events)
    }

    /// Reads the text format. The sensor size is not part of the file, so it
    /// is passed in.
    pub fn read_text(path: &Path, width: usize, height: usize) -> Result<Self> {
        let reader = BufReader::new(fs::File::open(path)?);
        let mut events = Vec::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |what: &str| Error::format(path, format!("line {}: {what}", lineno + 1));
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 4 {
                return Err(bad("expected `t x y p`"));
            }
            let t: f64 = f[0].parse().map_err(|_| bad("bad timestamp"))?;
            if !(t >= 0.0) {
                return Err(bad("negative timestamp"));
            }
            let x: u16 = f[1].parse().map_err(|_| bad("bad x"))?;
            let y: u16 = f[2].parse().map_err(|_| bad("bad y"))?;
            let p: u8 = f[3].parse().map_err(|_| bad("bad polarity"))?;
            let polarity = Polarity::from_bit(p).ok_or_else(|| bad("polarity must be 0 or 1"))?;
            events.push(Event { x, y, t_us: (t * 1e6).round() as u64, polarity });
        }
        Self::new(width, height, events)
    }

    pub fn write_text(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(fs::File::create(path)?);
        for e in &self.events {
            writeln!(out, "{}.{:06} {} {} {}", e.t_us / 1_000_000, e.t_us % 1_000_000, e.x, e.y, e.polarity.bit())?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Sub-slice of time-sorted `events` with `t_start <= t <= t_end`.
pub fn window(events: &[Event], t_start: u64, t_end: u64) -> &[Event] {
    let lo = events.partition_point(|e| e.t_us < t_start);
    let hi = events.partition_point(|e| e.t_us <= t_end);
    &events[lo..hi.max(lo)]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> EventStream {
        EventStream::new(
            8,
            6,
            vec![
                Event::new(1, 2, 10, Polarity::Positive),
                Event::new(7, 5, 10, Polarity::Negative),
                Event::new(0, 0, 2_500_001, Polarity::Positive),
            ],
        )
        .unwrap()
    }

    #[test]
    fn unsorted_stream_is_an_ordering_error() {
        let ev = vec![Event::new(0, 0, 5, Polarity::Positive), Event::new(0, 0, 4, Polarity::Positive)];
        assert!(matches!(EventStream::new(2, 2, ev), Err(Error::Ordering(_))));
    }

    #[test]
    fn out_of_sensor_event_rejected() {
        let ev = vec![Event::new(2, 0, 5, Polarity::Positive)];
        assert!(EventStream::new(2, 2, ev).is_err());
    }

    #[test]
    fn binary_roundtrip_and_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ev.bin");
        let s = sample();
        s.write_binary(&p).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(bytes.len(), 16 + 3 * 16);
        assert_eq!(&bytes[..8], b"FETAPEVT");
        assert_eq!(bytes[8], 8);
        assert_eq!(bytes[16 + 16 + 12], 0);
        assert_eq!(EventStream::read_binary(&p).unwrap(), s);
    }

    #[test]
    fn text_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ev.txt");
        let s = sample();
        s.write_text(&p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("0.000010 1 2 1\n"));
        assert_eq!(EventStream::read_text(&p, 8, 6).unwrap(), s);
    }

    #[test]
    fn window_bounds_are_inclusive() {
        let s = sample();
        assert_eq!(s.window(10, 10).len(), 2);
        assert_eq!(s.window(11, 2_500_000).len(), 0);
        assert_eq!(s.window(0, u64::MAX).len(), 3);
    }
}
