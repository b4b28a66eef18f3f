//! Flow color wheel and scalar heatmaps.
//!
//! Hue follows the flow direction (0° = +x), saturation grows with magnitude
//! up to `max_mag`, so zero flow renders white. Invalid pixels are black.

use crate::flow::PixelFlow;
use crate::grid::Grid;

pub type Rgb = [u8; 3];

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MaxMagnitude {
    Fixed(f64),
    /// 99th percentile of valid magnitudes.
    Auto,
}

pub const AUTO_PERCENTILE: f64 = 0.99;

#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<Rgb>,
}

impl RgbImage {
    pub fn get(&self, x: usize, y: usize) -> Rgb {
        self.pixels[y * self.width + x]
    }

    /// Binary PPM (P6).
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.pixels.iter().flatten());
        out
    }
}

/// HSV with full value to RGB; `hue_deg` in [0, 360).
pub fn hsv_to_rgb(hue_deg: f64, sat: f64) -> Rgb {
    let h = hue_deg.rem_euclid(360.0) / 60.0;
    let s = sat.clamp(0.0, 1.0);
    let f = h - h.floor();
    let (p, q, t) = (1.0 - s, 1.0 - s * f, 1.0 - s * (1.0 - f));
    let (r, g, b) = match h as u32 {
        0 => (1.0, t, p),
        1 => (q, 1.0, p),
        2 => (p, 1.0, t),
        3 => (p, q, 1.0),
        4 => (t, p, 1.0),
        _ => (1.0, p, q),
    };
    let byte = |c: f64| (c * 255.0).round() as u8;
    [byte(r), byte(g), byte(b)]
}

fn percentile(mut values: Vec<f64>, q: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(f64::total_cmp);
    let idx = ((values.len() - 1) as f64 * q).round() as usize;
    values[idx]
}

/// Resolves `Auto` against the valid magnitudes of `flow`.
pub fn resolve_max(flow: &PixelFlow, max_mag: MaxMagnitude) -> f64 {
    match max_mag {
        MaxMagnitude::Fixed(m) => m,
        MaxMagnitude::Auto => percentile(
            flow.flow
                .iter()
                .zip(flow.valid.iter())
                .filter(|(_, &ok)| ok)
                .map(|(f, _)| f[0].hypot(f[1]))
                .collect(),
            AUTO_PERCENTILE,
        ),
    }
}

pub fn flow_to_color(flow: &PixelFlow, max_mag: MaxMagnitude) -> RgbImage {
    let max = resolve_max(flow, max_mag);
    let pixels = flow
        .flow
        .iter()
        .zip(flow.valid.iter())
        .map(|(f, &ok)| {
            if !ok || !f[0].is_finite() || !f[1].is_finite() {
                return [0, 0, 0];
            }
            let mag = f[0].hypot(f[1]);
            let sat = if max > 0.0 { mag / max } else { 0.0 };
            hsv_to_rgb(f[1].atan2(f[0]).to_degrees(), sat)
        })
        .collect();
    RgbImage {
        width: flow.width(),
        height: flow.height(),
        pixels,
    }
}

/// Blue-white-red heatmap; zero is white, `±max_abs` saturates.
/// Non-finite values render black.
pub fn diverging_heatmap(values: &Grid<f64>, max_abs: Option<f64>) -> RgbImage {
    let max = max_abs.unwrap_or_else(|| values.iter().filter(|v| v.is_finite()).fold(0.0, |m, v| m.max(v.abs())));
    let pixels = values
        .iter()
        .map(|&v| {
            if !v.is_finite() {
                return [0, 0, 0];
            }
            let a = if max > 0.0 { (v / max).clamp(-1.0, 1.0) } else { 0.0 };
            let fade = ((1.0 - a.abs()) * 255.0).round() as u8;
            if a >= 0.0 {
                [255, fade, fade]
            } else {
                [fade, fade, 255]
            }
        })
        .collect();
    RgbImage {
        width: values.width(),
        height: values.height(),
        pixels,
    }
}
