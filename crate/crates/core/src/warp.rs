//! Motion model and image of warped events (IWE).
//!
//! An event at `x` with timestamp `t` is propagated to the reference time
//! `t_ref` as `x' = x + v (t_ref - t) + phi (x - x_c) (t_ref - t)`, where
//! `x_c` is the centroid of the partition. Warped events are splatted with a
//! bilinear kernel into per-polarity average-timestamp images.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{Event, EventPartition, Polarity, SensorSize};
use crate::grid::Grid;

/// Stability offset added to the IWE denominators.
pub const DEFAULT_EPS_DENOM: f64 = 1e-9;

/// Local motion: velocity in px/ms and isotropic scaling rate in 1/ms
/// (positive for expansion).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Theta {
    pub vx: f64,
    pub vy: f64,
    pub phi: f64,
}

impl Theta {
    pub const ZERO: Theta = Theta {
        vx: 0.0,
        vy: 0.0,
        phi: 0.0,
    };

    pub fn new(vx: f64, vy: f64, phi: f64) -> Self {
        Self { vx, vy, phi }
    }

    pub fn translation(vx: f64, vy: f64) -> Self {
        Self { vx, vy, phi: 0.0 }
    }

    pub fn is_finite(&self) -> bool {
        self.vx.is_finite() && self.vy.is_finite() && self.phi.is_finite()
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.vx, self.vy, self.phi]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }
}

/// Grid of [`Theta`] cells covering the sensor. A 1x1 grid is a single global
/// motion; a grid of sensor size is per-pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionField {
    sensor: SensorSize,
    cols: usize,
    rows: usize,
    cell_w: usize,
    cell_h: usize,
    cells: Vec<Theta>,
}

impl MotionField {
    /// `cols x rows` cells of `theta`; cell extents are rounded up so the
    /// grid always covers the sensor.
    pub fn filled(sensor: SensorSize, cols: usize, rows: usize, theta: Theta) -> Self {
        assert!(cols >= 1 && rows >= 1, "motion field needs at least one cell");
        let cell_w = (sensor.width as usize).div_ceil(cols).max(1);
        let cell_h = (sensor.height as usize).div_ceil(rows).max(1);
        Self {
            sensor,
            cols,
            rows,
            cell_w,
            cell_h,
            cells: vec![theta; cols * rows],
        }
    }

    pub fn uniform(sensor: SensorSize, theta: Theta) -> Self {
        Self::filled(sensor, 1, 1, theta)
    }

    pub fn zeros(sensor: SensorSize, cols: usize, rows: usize) -> Self {
        Self::filled(sensor, cols, rows, Theta::ZERO)
    }

    /// Grid of square patches of `patch` px.
    pub fn patches(sensor: SensorSize, patch: usize) -> Self {
        let patch = patch.max(1);
        let cols = (sensor.width as usize).div_ceil(patch).max(1);
        let rows = (sensor.height as usize).div_ceil(patch).max(1);
        let mut field = Self::zeros(sensor, cols, rows);
        field.cell_w = patch;
        field.cell_h = patch;
        field
    }

    pub fn per_pixel(sensor: SensorSize) -> Self {
        Self::zeros(sensor, sensor.width as usize, sensor.height as usize)
    }

    pub fn sensor(&self) -> SensorSize {
        self.sensor
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cell_size(&self) -> (usize, usize) {
        (self.cell_w, self.cell_h)
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn cells(&self) -> &[Theta] {
        &self.cells
    }

    pub fn cells_mut(&mut self) -> &mut [Theta] {
        &mut self.cells
    }

    pub fn cell(&self, col: usize, row: usize) -> Theta {
        self.cells[row * self.cols + col]
    }

    pub fn set_cell(&mut self, col: usize, row: usize, theta: Theta) {
        self.cells[row * self.cols + col] = theta;
    }

    /// Index of the cell containing pixel `(x, y)`.
    pub fn cell_index(&self, x: u16, y: u16) -> usize {
        let col = (x as usize / self.cell_w).min(self.cols - 1);
        let row = (y as usize / self.cell_h).min(self.rows - 1);
        row * self.cols + col
    }

    pub fn at(&self, x: u16, y: u16) -> Theta {
        self.cells[self.cell_index(x, y)]
    }

    /// Pixel rectangle `(x0, y0, x1, y1)` (exclusive ends) covered by a cell.
    pub fn cell_bounds(&self, index: usize) -> (usize, usize, usize, usize) {
        let (col, row) = (index % self.cols, index / self.cols);
        let x0 = col * self.cell_w;
        let y0 = row * self.cell_h;
        let x1 = if col + 1 == self.cols {
            self.sensor.width as usize
        } else {
            (x0 + self.cell_w).min(self.sensor.width as usize)
        };
        let y1 = if row + 1 == self.rows {
            self.sensor.height as usize
        } else {
            (y0 + self.cell_h).min(self.sensor.height as usize)
        };
        (x0, y0, x1, y1)
    }

    pub fn is_finite(&self) -> bool {
        self.cells.iter().all(Theta::is_finite)
    }

    /// Same geometry, every cell replaced.
    pub fn with_cells(&self, cells: Vec<Theta>) -> Self {
        assert_eq!(cells.len(), self.cells.len());
        Self {
            cells,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Centroid {
    pub x: f64,
    pub y: f64,
}

pub fn compute_centroid(events: &[Event]) -> Result<Centroid> {
    if events.is_empty() {
        return Err(Error::Undefined {
            what: "centroid",
            reason: "partition is empty".into(),
        });
    }
    let n = events.len() as f64;
    let (sx, sy) = events
        .iter()
        .fold((0.0, 0.0), |(sx, sy), e| (sx + e.x as f64, sy + e.y as f64));
    Ok(Centroid { x: sx / n, y: sy / n })
}

/// Propagates an event to `t_ref_ms`.
pub fn warp_event(e: &Event, theta: Theta, centroid: Centroid, t_ref_ms: f64) -> (f64, f64) {
    let dt = t_ref_ms - e.t_ms();
    let (x, y) = (e.x as f64, e.y as f64);
    (
        x + theta.vx * dt + theta.phi * (x - centroid.x) * dt,
        y + theta.vy * dt + theta.phi * (y - centroid.y) * dt,
    )
}

/// Which end of the partition events are warped to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reference {
    /// First timestamp; normalized times run 0 -> 1 through the partition.
    Start,
    /// Last timestamp; normalized times run 1 -> 0.
    End,
}

impl Reference {
    pub fn time_us(self, partition: &EventPartition) -> u64 {
        match self {
            Reference::Start => partition.t0(),
            Reference::End => partition.t_last(),
        }
    }
}

/// Per-event quantities shared by the IWE and its derivatives.
#[derive(Debug, Clone, Copy)]
pub(crate) struct WarpedEvent {
    pub x: f64,
    pub y: f64,
    /// Normalized distance in time from the reference, in `[0, 1]`.
    pub s: f64,
    pub positive: bool,
    pub cell: usize,
    /// `t_ref - t` in ms.
    pub dt: f64,
    pub rx: f64,
    pub ry: f64,
}

pub(crate) fn warp_partition(
    partition: &EventPartition,
    field: &MotionField,
    reference: Reference,
) -> Vec<WarpedEvent> {
    let events = partition.events();
    let Ok(centroid) = compute_centroid(events) else {
        return Vec::new();
    };
    let t_ref_us = reference.time_us(partition);
    let t_ref = t_ref_us as f64 * 1e-3;
    let span = (partition.t_last() - partition.t0()) as f64;
    events
        .iter()
        .map(|e| {
            let cell = field.cell_index(e.x, e.y);
            let theta = field.cells[cell];
            let (x, y) = warp_event(e, theta, centroid, t_ref);
            let s = if span > 0.0 {
                e.t.abs_diff(t_ref_us) as f64 / span
            } else {
                0.0
            };
            WarpedEvent {
                x,
                y,
                s,
                positive: e.p == Polarity::Positive,
                cell,
                dt: t_ref - e.t_ms(),
                rx: e.x as f64 - centroid.x,
                ry: e.y as f64 - centroid.y,
            }
        })
        .collect()
}

/// Bilinear footprint of one warped event: up to four `(px, py, weight,
/// d weight/dx', d weight/dy')` taps inside the window.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Tap {
    pub px: i64,
    pub py: i64,
    pub w: f64,
    pub dwdx: f64,
    pub dwdy: f64,
}

pub(crate) fn taps(x: f64, y: f64) -> Option<[Tap; 4]> {
    if !(x.is_finite() && y.is_finite()) || x.abs() > 1e9 || y.abs() > 1e9 {
        return None;
    }
    let (fx0, fy0) = (x.floor(), y.floor());
    let (fx, fy) = (x - fx0, y - fy0);
    let (ix, iy) = (fx0 as i64, fy0 as i64);
    let wx = [(1.0 - fx, -1.0), (fx, 1.0)];
    let wy = [(1.0 - fy, -1.0), (fy, 1.0)];
    let mut out = [Tap {
        px: 0,
        py: 0,
        w: 0.0,
        dwdx: 0.0,
        dwdy: 0.0,
    }; 4];
    for (j, &(wyv, dwy)) in wy.iter().enumerate() {
        for (i, &(wxv, dwx)) in wx.iter().enumerate() {
            out[j * 2 + i] = Tap {
                px: ix + i as i64,
                py: iy + j as i64,
                w: wxv * wyv,
                dwdx: dwx * wyv,
                dwdy: wxv * dwy,
            };
        }
    }
    Some(out)
}

/// Accumulation window: a sensor-clipped rectangle holding per-polarity
/// weighted timestamp sums and weights.
#[derive(Debug, Clone)]
pub(crate) struct Accumulator {
    pub x0: i64,
    pub y0: i64,
    pub w: usize,
    pub h: usize,
    pub s_pos: Vec<f64>,
    pub c_pos: Vec<f64>,
    pub s_neg: Vec<f64>,
    pub c_neg: Vec<f64>,
    pub dropped: f64,
}

impl Accumulator {
    /// Window covering the whole sensor.
    pub fn full(sensor: SensorSize) -> Self {
        Self::with_window(0, 0, sensor.width as usize, sensor.height as usize)
    }

    /// Smallest sensor-clipped window holding every tap of `warped`.
    pub fn fitted(sensor: SensorSize, warped: &[WarpedEvent]) -> Self {
        let (mut xmin, mut ymin, mut xmax, mut ymax) = (i64::MAX, i64::MAX, i64::MIN, i64::MIN);
        for e in warped {
            if let Some(t) = taps(e.x, e.y) {
                xmin = xmin.min(t[0].px);
                ymin = ymin.min(t[0].py);
                xmax = xmax.max(t[3].px);
                ymax = ymax.max(t[3].py);
            }
        }
        let xmin = xmin.max(0);
        let ymin = ymin.max(0);
        let xmax = xmax.min(sensor.width as i64 - 1);
        let ymax = ymax.min(sensor.height as i64 - 1);
        if xmin > xmax || ymin > ymax {
            return Self::with_window(0, 0, 0, 0);
        }
        Self::with_window(xmin, ymin, (xmax - xmin + 1) as usize, (ymax - ymin + 1) as usize)
    }

    fn with_window(x0: i64, y0: i64, w: usize, h: usize) -> Self {
        let n = w * h;
        Self {
            x0,
            y0,
            w,
            h,
            s_pos: vec![0.0; n],
            c_pos: vec![0.0; n],
            s_neg: vec![0.0; n],
            c_neg: vec![0.0; n],
            dropped: 0.0,
        }
    }

    #[inline]
    pub fn index(&self, px: i64, py: i64) -> Option<usize> {
        let (lx, ly) = (px - self.x0, py - self.y0);
        (lx >= 0 && ly >= 0 && (lx as usize) < self.w && (ly as usize) < self.h)
            .then(|| ly as usize * self.w + lx as usize)
    }

    pub fn splat(&mut self, e: &WarpedEvent) {
        let Some(taps) = taps(e.x, e.y) else {
            self.dropped += 1.0;
            return;
        };
        for tap in taps {
            if tap.w == 0.0 {
                continue;
            }
            match self.index(tap.px, tap.py) {
                Some(i) => {
                    if e.positive {
                        self.s_pos[i] += tap.w * e.s;
                        self.c_pos[i] += tap.w;
                    } else {
                        self.s_neg[i] += tap.w * e.s;
                        self.c_neg[i] += tap.w;
                    }
                }
                None => self.dropped += tap.w,
            }
        }
    }
}

/// Image of warped events at one reference time.
#[derive(Debug, Clone, PartialEq)]
pub struct Iwe {
    /// Average normalized timestamp of positive events.
    pub t_pos: Grid<f64>,
    /// Average normalized timestamp of negative events.
    pub t_neg: Grid<f64>,
    /// Warped event mass, both polarities pooled.
    pub delta: Grid<f64>,
    /// Kernel mass that landed outside the sensor.
    pub dropped_mass: f64,
}

impl Iwe {
    pub fn dropped_fraction(&self, n_events: usize) -> f64 {
        if n_events == 0 {
            0.0
        } else {
            self.dropped_mass / n_events as f64
        }
    }

    /// Pixels holding any warped mass.
    pub fn active_pixels(&self) -> usize {
        self.delta.iter().filter(|&&d| d > 0.0).count()
    }
}

pub fn build_iwe(partition: &EventPartition, field: &MotionField, reference: Reference) -> Iwe {
    build_iwe_with_eps(partition, field, reference, DEFAULT_EPS_DENOM)
}

pub fn build_iwe_with_eps(
    partition: &EventPartition,
    field: &MotionField,
    reference: Reference,
    eps: f64,
) -> Iwe {
    let sensor = field.sensor();
    let mut acc = Accumulator::full(sensor);
    for e in warp_partition(partition, field, reference) {
        acc.splat(&e);
    }
    let (w, h) = (acc.w, acc.h);
    let t = |s: &[f64], c: &[f64]| -> Grid<f64> {
        Grid::from_vec(w, h, s.iter().zip(c).map(|(s, c)| s / (c + eps)).collect())
    };
    Iwe {
        t_pos: t(&acc.s_pos, &acc.c_pos),
        t_neg: t(&acc.s_neg, &acc.c_neg),
        delta: Grid::from_vec(w, h, acc.c_pos.iter().zip(&acc.c_neg).map(|(a, b)| a + b).collect()),
        dropped_mass: acc.dropped,
    }
}
