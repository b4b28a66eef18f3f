//! On-disk formats: event files (text and binary), flow rasters, IWE dumps.
//!
//! All binary formats are little-endian.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::events::{Event, EventStream, Polarity, SensorSize};
use crate::grid::Grid;

pub const EVENT_MAGIC: &[u8; 4] = b"AQEV";
pub const EVENT_VERSION: u16 = 1;
pub const EVENT_HEADER_LEN: usize = 16;
pub const EVENT_RECORD_LEN: usize = 13;

pub const FLOW_MAGIC: &[u8; 4] = b"AQFL";
pub const FLOW_HEADER_LEN: usize = 12;
/// Flow values are displacements in px per partition window.
pub const FLOW_FLAG_PER_WINDOW: u32 = 1;

pub const IWE_MAGIC: &[u8; 4] = b"AQIW";
pub const PHI_MAGIC: &[u8; 4] = b"AQPH";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventFormat {
    Text,
    Binary,
}

impl std::str::FromStr for EventFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(EventFormat::Text),
            "binary" => Ok(EventFormat::Binary),
            other => Err(Error::invalid(format!("unknown event format '{other}'"))),
        }
    }
}

/// Reads an event file, sniffing the binary magic. Text files without a
/// `# width,height` header are assigned `fallback_sensor`.
pub fn read_events(path: impl AsRef<Path>, fallback_sensor: SensorSize) -> Result<EventStream> {
    let mut bytes = Vec::new();
    File::open(path.as_ref())?.read_to_end(&mut bytes)?;
    if bytes.starts_with(EVENT_MAGIC) {
        decode_binary_events(&bytes)
    } else {
        parse_text_events(BufReader::new(bytes.as_slice()), fallback_sensor)
    }
}

pub fn write_events(stream: &EventStream, path: impl AsRef<Path>, format: EventFormat) -> Result<()> {
    let mut out = BufWriter::new(File::create(path.as_ref())?);
    match format {
        EventFormat::Text => write_text_events(stream, &mut out)?,
        EventFormat::Binary => out.write_all(&encode_binary_events(stream))?,
    }
    out.flush()?;
    Ok(())
}

fn parse_polarity(token: &str, location: impl Fn() -> String) -> Result<Polarity> {
    match token {
        "1" | "+1" => Ok(Polarity::Positive),
        "0" | "-1" => Ok(Polarity::Negative),
        other => Err(Error::parse(location(), format!("bad polarity '{other}'"))),
    }
}

/// Parses `t_us,x,y,p` lines. Blank lines and `#` comments other than the
/// size header are skipped.
pub fn parse_text_events(reader: impl BufRead, fallback_sensor: SensorSize) -> Result<EventStream> {
    let mut sensor = None;
    let mut events = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        let location = || format!("line {}", lineno + 1);
        if trimmed.is_empty() {
            continue;
        }
        if let Some(rest) = trimmed.strip_prefix('#') {
            if sensor.is_none() && events.is_empty() {
                if let Some(size) = parse_size_header(rest) {
                    sensor = Some(size);
                }
            }
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(Error::parse(
                location(),
                format!("expected 4 comma-separated fields, found {}", fields.len()),
            ));
        }
        let t: u64 = fields[0]
            .parse()
            .map_err(|_| Error::parse(location(), format!("bad timestamp '{}'", fields[0])))?;
        let x: u16 = fields[1]
            .parse()
            .map_err(|_| Error::parse(location(), format!("bad x '{}'", fields[1])))?;
        let y: u16 = fields[2]
            .parse()
            .map_err(|_| Error::parse(location(), format!("bad y '{}'", fields[2])))?;
        let p = parse_polarity(fields[3], location)?;
        events.push(Event::new(x, y, t, p));
    }
    EventStream::new(events, sensor.unwrap_or(fallback_sensor))
}

fn parse_size_header(rest: &str) -> Option<SensorSize> {
    let (w, h) = rest.trim().split_once(',')?;
    Some(SensorSize::new(w.trim().parse().ok()?, h.trim().parse().ok()?))
}

pub fn write_text_events(stream: &EventStream, out: &mut impl Write) -> Result<()> {
    let s = stream.sensor();
    writeln!(out, "# {},{}", s.width, s.height)?;
    for e in stream.events() {
        writeln!(out, "{},{},{},{}", e.t, e.x, e.y, e.p.bit())?;
    }
    Ok(())
}

pub fn encode_binary_events(stream: &EventStream) -> Vec<u8> {
    let s = stream.sensor();
    let mut buf = Vec::with_capacity(EVENT_HEADER_LEN + EVENT_RECORD_LEN * stream.len());
    buf.extend_from_slice(EVENT_MAGIC);
    buf.extend_from_slice(&EVENT_VERSION.to_le_bytes());
    buf.extend_from_slice(&s.width.to_le_bytes());
    buf.extend_from_slice(&s.height.to_le_bytes());
    buf.extend_from_slice(&[0u8; 6]);
    for e in stream.events() {
        buf.extend_from_slice(&e.t.to_le_bytes());
        buf.extend_from_slice(&e.x.to_le_bytes());
        buf.extend_from_slice(&e.y.to_le_bytes());
        buf.push(e.p.bit());
    }
    buf
}

fn u16_at(bytes: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([bytes[at], bytes[at + 1]])
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

pub fn decode_binary_events(bytes: &[u8]) -> Result<EventStream> {
    if bytes.len() < EVENT_HEADER_LEN {
        return Err(Error::parse("offset 0", "truncated event header"));
    }
    if &bytes[..4] != EVENT_MAGIC {
        return Err(Error::parse("offset 0", "missing AQEV magic"));
    }
    let version = u16_at(bytes, 4);
    if version != EVENT_VERSION {
        return Err(Error::parse("offset 4", format!("unsupported version {version}")));
    }
    let sensor = SensorSize::new(u16_at(bytes, 6), u16_at(bytes, 8));
    let body = &bytes[EVENT_HEADER_LEN..];
    if body.len() % EVENT_RECORD_LEN != 0 {
        let offset = EVENT_HEADER_LEN + body.len() / EVENT_RECORD_LEN * EVENT_RECORD_LEN;
        return Err(Error::parse(format!("offset {offset}"), "truncated event record"));
    }
    let mut events = Vec::with_capacity(body.len() / EVENT_RECORD_LEN);
    for (i, rec) in body.chunks_exact(EVENT_RECORD_LEN).enumerate() {
        let t = u64::from_le_bytes(rec[..8].try_into().unwrap());
        let p = Polarity::from_bit(rec[12]).ok_or_else(|| {
            Error::parse(
                format!("offset {}", EVENT_HEADER_LEN + i * EVENT_RECORD_LEN + 12),
                format!("bad polarity byte {}", rec[12]),
            )
        })?;
        events.push(Event::new(u16_at(rec, 8), u16_at(rec, 10), t, p));
    }
    EventStream::new(events, sensor)
}

/// Two-plane float32 flow raster. Invalid pixels hold NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowRaster {
    pub flags: u32,
    pub u: Grid<f32>,
    pub v: Grid<f32>,
}

impl FlowRaster {
    pub fn width(&self) -> usize {
        self.u.width()
    }

    pub fn height(&self) -> usize {
        self.u.height()
    }

    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.u[(x, y)].is_finite() && self.v[(x, y)].is_finite()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (w, h) = (self.width(), self.height());
        let mut buf = Vec::with_capacity(FLOW_HEADER_LEN + 8 * w * h);
        buf.extend_from_slice(FLOW_MAGIC);
        buf.extend_from_slice(&(w as u16).to_le_bytes());
        buf.extend_from_slice(&(h as u16).to_le_bytes());
        buf.extend_from_slice(&self.flags.to_le_bytes());
        for plane in [&self.u, &self.v] {
            for value in plane.iter() {
                buf.extend_from_slice(&value.to_le_bytes());
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < FLOW_HEADER_LEN || &bytes[..4] != FLOW_MAGIC {
            return Err(Error::parse("offset 0", "missing AQFL header"));
        }
        let (w, h) = (u16_at(bytes, 4) as usize, u16_at(bytes, 6) as usize);
        let flags = u32_at(bytes, 8);
        let planes = read_f32_planes(&bytes[FLOW_HEADER_LEN..], w, h, 2, FLOW_HEADER_LEN)?;
        let mut planes = planes.into_iter();
        Ok(Self {
            flags,
            u: planes.next().unwrap(),
            v: planes.next().unwrap(),
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn read_f32_planes(
    body: &[u8],
    w: usize,
    h: usize,
    n: usize,
    base_offset: usize,
) -> Result<Vec<Grid<f32>>> {
    let expected = 4 * w * h * n;
    if body.len() != expected {
        return Err(Error::parse(
            format!("offset {}", base_offset + body.len().min(expected)),
            format!("expected {expected} payload bytes, found {}", body.len()),
        ));
    }
    Ok(body
        .chunks_exact(4 * w * h)
        .map(|plane| {
            let data = plane
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            Grid::from_vec(w, h, data)
        })
        .collect())
}

fn encode_planes(magic: &[u8; 4], w: usize, h: usize, planes: &[&Grid<f64>]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(8 + 4 * w * h * planes.len());
    buf.extend_from_slice(magic);
    buf.extend_from_slice(&(w as u16).to_le_bytes());
    buf.extend_from_slice(&(h as u16).to_le_bytes());
    for plane in planes {
        for &value in plane.iter() {
            buf.extend_from_slice(&(value as f32).to_le_bytes());
        }
    }
    buf
}

fn decode_planes(bytes: &[u8], magic: &[u8; 4], n: usize) -> Result<Vec<Grid<f32>>> {
    if bytes.len() < 8 || &bytes[..4] != magic {
        return Err(Error::parse(
            "offset 0",
            format!("missing {} header", String::from_utf8_lossy(magic)),
        ));
    }
    read_f32_planes(&bytes[8..], u16_at(bytes, 4) as usize, u16_at(bytes, 6) as usize, n, 8)
}

/// IWE debug dump: `T_pos`, `T_neg`, `delta` planes.
pub fn encode_iwe(t_pos: &Grid<f64>, t_neg: &Grid<f64>, delta: &Grid<f64>) -> Vec<u8> {
    encode_planes(IWE_MAGIC, delta.width(), delta.height(), &[t_pos, t_neg, delta])
}

pub fn decode_iwe(bytes: &[u8]) -> Result<[Grid<f32>; 3]> {
    let planes = decode_planes(bytes, IWE_MAGIC, 3)?;
    Ok(planes.try_into().unwrap())
}

/// Single-plane scaling-rate raster written next to flow rasters.
pub fn encode_phi(phi: &Grid<f64>) -> Vec<u8> {
    encode_planes(PHI_MAGIC, phi.width(), phi.height(), &[phi])
}

pub fn decode_phi(bytes: &[u8]) -> Result<Grid<f32>> {
    Ok(decode_planes(bytes, PHI_MAGIC, 1)?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_stream(n: usize) -> EventStream {
        let events = (0..n)
            .map(|i| {
                let p = if i % 3 == 0 {
                    Polarity::Negative
                } else {
                    Polarity::Positive
                };
                Event::new((i * 7 % 346) as u16, (i * 13 % 260) as u16, 10 * i as u64, p)
            })
            .collect();
        EventStream::new(events, SensorSize::default()).unwrap()
    }

    #[test]
    fn text_line_parses() {
        let s = parse_text_events("1500,10,20,1\n".as_bytes(), SensorSize::default()).unwrap();
        assert_eq!(s.events(), &[Event::new(10, 20, 1500, Polarity::Positive)]);
        let s = parse_text_events("7,1,2,0\n".as_bytes(), SensorSize::default()).unwrap();
        assert_eq!(s.events()[0].p, Polarity::Negative);
    }

    #[test]
    fn text_header_sets_sensor() {
        let s = parse_text_events("# 64,48\n0,63,47,1\n".as_bytes(), SensorSize::default()).unwrap();
        assert_eq!(s.sensor(), SensorSize::new(64, 48));
        assert!(parse_text_events("# 64,48\n0,64,0,1\n".as_bytes(), SensorSize::default()).is_err());
    }

    #[test]
    fn malformed_text_reports_line() {
        let err = parse_text_events("0,1,1,1\n5,1,x,1\n".as_bytes(), SensorSize::default()).unwrap_err();
        match err {
            Error::Parse { location, .. } => assert_eq!(location, "line 2"),
            other => panic!("unexpected {other:?}"),
        }
        let err = parse_text_events("5,1,1,1\n4,1,1,1\n".as_bytes(), SensorSize::default()).unwrap_err();
        assert!(matches!(err, Error::SortOrder { index: 1, .. }));
        assert!(parse_text_events("5,1,1,2\n".as_bytes(), SensorSize::default()).is_err());
    }

    #[test]
    fn binary_round_trip_is_byte_exact() {
        let stream = sample_stream(1000);
        let bytes = encode_binary_events(&stream);
        assert_eq!(bytes.len(), EVENT_HEADER_LEN + 1000 * EVENT_RECORD_LEN);
        let back = decode_binary_events(&bytes).unwrap();
        assert_eq!(back, stream);
        assert_eq!(encode_binary_events(&back), bytes);
    }

    #[test]
    fn binary_header_layout() {
        let bytes = encode_binary_events(&EventStream::empty(SensorSize::new(346, 260)));
        assert_eq!(&bytes[..4], b"AQEV");
        assert_eq!(&bytes[4..6], &1u16.to_le_bytes());
        assert_eq!(&bytes[6..8], &346u16.to_le_bytes());
        assert_eq!(&bytes[8..10], &260u16.to_le_bytes());
        assert_eq!(&bytes[10..16], &[0u8; 6]);
    }

    #[test]
    fn truncated_binary_reports_offset() {
        let mut bytes = encode_binary_events(&sample_stream(3));
        bytes.pop();
        match decode_binary_events(&bytes) {
            Err(Error::Parse { location, .. }) => assert_eq!(location, "offset 42"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn file_round_trip_both_formats() {
        let dir = tempfile::tempdir().unwrap();
        let stream = sample_stream(250);
        for (name, fmt) in [("a.txt", EventFormat::Text), ("a.aqev", EventFormat::Binary)] {
            let path = dir.path().join(name);
            write_events(&stream, &path, fmt).unwrap();
            let back = read_events(&path, SensorSize::new(1, 1)).unwrap();
            assert_eq!(back, stream);
        }
    }

    #[test]
    fn flow_raster_round_trip_keeps_nan() {
        let mut u = Grid::filled(5, 4, 0.25f32);
        u[(2, 1)] = f32::NAN;
        let v = Grid::from_vec(5, 4, (0..20).map(|i| i as f32 * -0.5).collect());
        let raster = FlowRaster { flags: FLOW_FLAG_PER_WINDOW, u, v };
        let bytes = raster.to_bytes();
        assert_eq!(&bytes[..4], b"AQFL");
        assert_eq!(bytes.len(), 12 + 2 * 4 * 20);
        let back = FlowRaster::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert!(!back.is_valid(2, 1));
        assert!(back.is_valid(0, 0));
    }

    #[test]
    fn iwe_dump_layout() {
        let a = Grid::filled(3, 2, 0.5);
        let b = Grid::filled(3, 2, 0.0);
        let c = Grid::filled(3, 2, 2.0);
        let bytes = encode_iwe(&a, &b, &c);
        assert_eq!(bytes.len(), 8 + 3 * 6 * 4);
        let [ta, _, d] = decode_iwe(&bytes).unwrap();
        assert_eq!(ta[(1, 1)], 0.5);
        assert_eq!(d[(2, 0)], 2.0);
    }

    proptest! {
        #[test]
        fn text_round_trip(raw in proptest::collection::vec((0u16..346, 0u16..260, 0u64..50, any::<bool>()), 0..60)) {
            let mut t = 0;
            let events: Vec<Event> = raw
                .into_iter()
                .map(|(x, y, dt, pos)| {
                    t += dt;
                    Event::new(x, y, t, if pos { Polarity::Positive } else { Polarity::Negative })
                })
                .collect();
            let stream = EventStream::new(events, SensorSize::default()).unwrap();
            let mut buf = Vec::new();
            write_text_events(&stream, &mut buf).unwrap();
            let back = parse_text_events(buf.as_slice(), SensorSize::new(1, 1)).unwrap();
            prop_assert_eq!(back, stream);
        }
    }
}
