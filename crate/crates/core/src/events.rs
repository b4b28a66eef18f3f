//! Event atoms, fixed-count partitioning and count encoding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;

/// DAVIS346 resolution, the sensor every public underwater event dataset uses.
pub const DEFAULT_SENSOR: SensorSize = SensorSize {
    width: 346,
    height: 260,
};

/// Default number of events per partition.
pub const DEFAULT_PARTITION_LEN: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SensorSize {
    pub width: u16,
    pub height: u16,
}

impl SensorSize {
    pub fn new(width: u16, height: u16) -> Self {
        Self { width, height }
    }

    pub fn contains(&self, x: u16, y: u16) -> bool {
        x < self.width && y < self.height
    }

    pub fn pixels(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

impl Default for SensorSize {
    fn default() -> Self {
        DEFAULT_SENSOR
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Polarity {
    Negative,
    Positive,
}

impl Polarity {
    pub fn sign(self) -> i8 {
        match self {
            Polarity::Positive => 1,
            Polarity::Negative => -1,
        }
    }

    /// On-disk bit: 1 for positive, 0 for negative.
    pub fn bit(self) -> u8 {
        match self {
            Polarity::Positive => 1,
            Polarity::Negative => 0,
        }
    }

    pub fn from_bit(bit: u8) -> Option<Self> {
        match bit {
            1 => Some(Polarity::Positive),
            0 => Some(Polarity::Negative),
            _ => None,
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Polarity::Positive => Polarity::Negative,
            Polarity::Negative => Polarity::Positive,
        }
    }
}

/// A single brightness-change event. `t` is in microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Event {
    pub x: u16,
    pub y: u16,
    pub t: u64,
    pub p: Polarity,
}

impl Event {
    pub fn new(x: u16, y: u16, t: u64, p: Polarity) -> Self {
        Self { x, y, t, p }
    }

    /// Timestamp in milliseconds.
    pub fn t_ms(&self) -> f64 {
        self.t as f64 * 1e-3
    }
}

fn check_sorted(events: &[Event]) -> Result<()> {
    for (i, w) in events.windows(2).enumerate() {
        if w[1].t < w[0].t {
            return Err(Error::SortOrder {
                index: i + 1,
                prev: w[0].t,
                next: w[1].t,
            });
        }
    }
    Ok(())
}

fn check_bounds(events: &[Event], sensor: SensorSize) -> Result<()> {
    match events.iter().position(|e| !sensor.contains(e.x, e.y)) {
        Some(index) => {
            let e = events[index];
            Err(Error::OutOfBounds {
                index,
                x: e.x as u32,
                y: e.y as u32,
                width: sensor.width,
                height: sensor.height,
            })
        }
        None => Ok(()),
    }
}

/// Time-ordered events on a sensor of known size.
#[derive(Debug, Clone, PartialEq)]
pub struct EventStream {
    events: Vec<Event>,
    sensor: SensorSize,
}

impl EventStream {
    /// Validates sort order and sensor bounds.
    pub fn new(events: Vec<Event>, sensor: SensorSize) -> Result<Self> {
        check_bounds(&events, sensor)?;
        check_sorted(&events)?;
        Ok(Self { events, sensor })
    }

    pub fn empty(sensor: SensorSize) -> Self {
        Self {
            events: Vec::new(),
            sensor,
        }
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn into_events(self) -> Vec<Event> {
        self.events
    }

    pub fn sensor(&self) -> SensorSize {
        self.sensor
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Events inside `[x0, x0 + w) x [y0, y0 + h)`, shifted to the crop origin.
    pub fn crop(&self, x0: u16, y0: u16, w: u16, h: u16) -> EventStream {
        let events = self
            .events
            .iter()
            .filter(|e| e.x >= x0 && e.x < x0 + w && e.y >= y0 && e.y < y0 + h)
            .map(|e| Event::new(e.x - x0, e.y - y0, e.t, e.p))
            .collect();
        EventStream {
            events,
            sensor: SensorSize::new(w, h),
        }
    }
}

/// A window of consecutive events; the unit the loss is evaluated on.
#[derive(Debug, Clone, PartialEq)]
pub struct EventPartition {
    events: Vec<Event>,
}

impl EventPartition {
    pub fn new(events: Vec<Event>) -> Result<Self> {
        check_sorted(&events)?;
        Ok(Self { events })
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

    /// First timestamp (us); 0 for an empty partition.
    pub fn t0(&self) -> u64 {
        self.events.first().map_or(0, |e| e.t)
    }

    /// Last timestamp (us); 0 for an empty partition.
    pub fn t_last(&self) -> u64 {
        self.events.last().map_or(0, |e| e.t)
    }

    pub fn duration_ms(&self) -> f64 {
        (self.t_last() - self.t0()) as f64 * 1e-3
    }

    /// Sub-partition of events satisfying `keep`, order preserved.
    pub fn filter(&self, mut keep: impl FnMut(&Event) -> bool) -> EventPartition {
        EventPartition {
            events: self.events.iter().copied().filter(|e| keep(e)).collect(),
        }
    }
}

/// Result of splitting a stream into fixed-count partitions.
#[derive(Debug, Clone, PartialEq)]
pub struct Partitioned {
    pub partitions: Vec<EventPartition>,
    /// Trailing events that did not fill a whole partition.
    pub remainder: Vec<Event>,
}

/// Splits `events` into consecutive, non-overlapping windows of exactly `k`
/// events. The sub-`k` tail is returned in `remainder`.
pub fn partition_by_count(events: &[Event], k: usize) -> Result<Partitioned> {
    if k == 0 {
        return Err(Error::invalid("partition size K must be at least 1"));
    }
    check_sorted(events)?;
    let full = events.len() / k * k;
    let partitions = events[..full]
        .chunks_exact(k)
        .map(|c| EventPartition { events: c.to_vec() })
        .collect();
    Ok(Partitioned {
        partitions,
        remainder: events[full..].to_vec(),
    })
}

/// Per-pixel, per-polarity event tallies.
#[derive(Debug, Clone, PartialEq)]
pub struct EventCountImage {
    pub pos: Grid<u32>,
    pub neg: Grid<u32>,
}

impl EventCountImage {
    pub fn total(&self) -> u64 {
        self.pos.iter().chain(self.neg.iter()).map(|&c| c as u64).sum()
    }

    /// Both polarities summed, as reals.
    pub fn pooled(&self) -> Grid<f64> {
        let data = self
            .pos
            .iter()
            .zip(self.neg.iter())
            .map(|(&p, &n)| (p + n) as f64)
            .collect();
        Grid::from_vec(self.pos.width(), self.pos.height(), data)
    }
}

pub fn count_encode(events: &[Event], sensor: SensorSize) -> Result<EventCountImage> {
    check_bounds(events, sensor)?;
    let (w, h) = (sensor.width as usize, sensor.height as usize);
    let mut pos = Grid::new(w, h);
    let mut neg = Grid::new(w, h);
    for e in events {
        let cell = (e.x as usize, e.y as usize);
        match e.p {
            Polarity::Positive => pos[cell] += 1,
            Polarity::Negative => neg[cell] += 1,
        }
    }
    Ok(EventCountImage { pos, neg })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn ramp(n: usize) -> Vec<Event> {
        (0..n)
            .map(|i| Event::new((i % 7) as u16, (i % 5) as u16, i as u64, Polarity::Positive))
            .collect()
    }

    #[test]
    fn partitions_and_remainder() {
        let ev = ramp(2500);
        let parts = partition_by_count(&ev, 1000).unwrap();
        assert_eq!(parts.partitions.len(), 2);
        assert_eq!(parts.remainder.len(), 500);
        assert!(parts.partitions.iter().all(|p| p.len() == 1000));

        let exact = partition_by_count(&ramp(1000), 1000).unwrap();
        assert_eq!(exact.partitions.len(), 1);
        assert!(exact.remainder.is_empty());
    }

    #[test]
    fn default_partition_len_is_one_thousand() {
        let parts = partition_by_count(&ramp(3000), DEFAULT_PARTITION_LEN).unwrap();
        assert!(parts.partitions.iter().all(|p| p.len() == 1000));
    }

    #[test]
    fn empty_stream_gives_no_partitions() {
        let parts = partition_by_count(&[], 10).unwrap();
        assert!(parts.partitions.is_empty());
        assert!(parts.remainder.is_empty());
    }

    #[test]
    fn unsorted_stream_is_rejected() {
        let mut ev = ramp(10);
        ev.swap(3, 4);
        match partition_by_count(&ev, 2) {
            Err(Error::SortOrder { index, .. }) => assert_eq!(index, 4),
            other => panic!("expected sort error, got {other:?}"),
        }
        assert!(partition_by_count(&ramp(3), 0).is_err());
    }

    #[test]
    fn count_encode_tallies_by_polarity() {
        let ev = [
            Event::new(5, 5, 0, Polarity::Positive),
            Event::new(5, 5, 1, Polarity::Positive),
            Event::new(5, 5, 2, Polarity::Negative),
        ];
        let img = count_encode(&ev, SensorSize::new(10, 10)).unwrap();
        assert_eq!(img.pos[(5, 5)], 2);
        assert_eq!(img.neg[(5, 5)], 1);
        assert_eq!(img.total(), 3);

        let empty = count_encode(&[], SensorSize::new(4, 3)).unwrap();
        assert!(empty.pos.iter().chain(empty.neg.iter()).all(|&c| c == 0));
    }

    #[test]
    fn count_encode_matches_scalar_tally() {
        let sensor = SensorSize::new(32, 24);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let ev: Vec<Event> = (0..1000)
            .map(|i| {
                let p = if rng.gen_bool(0.5) {
                    Polarity::Positive
                } else {
                    Polarity::Negative
                };
                Event::new(rng.gen_range(0..32), rng.gen_range(0..24), i, p)
            })
            .collect();
        let n_pos = ev.iter().filter(|e| e.p == Polarity::Positive).count() as u64;
        let img = count_encode(&ev, sensor).unwrap();
        let sum_pos: u64 = img.pos.iter().map(|&c| c as u64).sum();
        let sum_neg: u64 = img.neg.iter().map(|&c| c as u64).sum();
        assert_eq!(sum_pos, n_pos);
        assert_eq!(sum_neg, 1000 - n_pos);
    }

    #[test]
    fn count_encode_reports_offending_index() {
        let ev = [
            Event::new(1, 1, 0, Polarity::Positive),
            Event::new(9, 1, 1, Polarity::Positive),
        ];
        match count_encode(&ev, SensorSize::new(8, 8)) {
            Err(Error::OutOfBounds { index, x, .. }) => {
                assert_eq!(index, 1);
                assert_eq!(x, 9);
            }
            other => panic!("expected bounds error, got {other:?}"),
        }
    }

    #[test]
    fn stream_rejects_out_of_sensor_events() {
        let ev = vec![Event::new(3, 9, 0, Polarity::Negative)];
        assert!(EventStream::new(ev, SensorSize::new(4, 4)).is_err());
    }

    proptest! {
        #[test]
        fn partitions_concatenate_to_input(n in 0usize..400, k in 1usize..60) {
            let ev = ramp(n);
            let parts = partition_by_count(&ev, k).unwrap();
            let mut joined: Vec<Event> = parts
                .partitions
                .iter()
                .flat_map(|p| p.events().iter().copied())
                .collect();
            joined.extend_from_slice(&parts.remainder);
            prop_assert_eq!(joined, ev);
            prop_assert!(parts.remainder.len() < k);
        }

        #[test]
        fn count_mass_equals_partition_size(n in 0usize..300) {
            let ev = ramp(n);
            let img = count_encode(&ev, SensorSize::new(7, 5)).unwrap();
            prop_assert_eq!(img.total(), n as u64);
        }
    }
}
