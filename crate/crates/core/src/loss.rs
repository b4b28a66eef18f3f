//! Self-supervised contrast-maximization objective and its analytic gradient.
//!
//! For each reference time the loss is the sum over pixels and polarities of
//! `f(T) = T^2 + lambda0 * tanh^2(|T| / eps_tanh)`, divided by the number of
//! pixels holding warped events. It is evaluated at both ends of the
//! partition; a Charbonnier smoothness term over 4-connected cells of the
//! motion field is added with weight `lambda`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::EventPartition;
use crate::warp::{taps, warp_partition, Accumulator, Iwe, MotionField, Reference, Theta, WarpedEvent};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Smoothness weight.
    pub lambda: f64,
    /// Weight of the L0 (tanh^2) term.
    pub lambda0: f64,
    /// Charbonnier exponent.
    pub beta: f64,
    /// Charbonnier offset.
    pub eps_charb: f64,
    /// Scale inside the tanh^2 approximation, in normalized-time units.
    pub eps_tanh: f64,
    /// Offset in the IWE and loss denominators.
    pub eps_denom: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.001,
            lambda0: 0.01,
            beta: 0.45,
            eps_charb: 0.001,
            eps_tanh: 0.01,
            eps_denom: 1e-9,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lambda >= 0.0
            && self.lambda0 >= 0.0
            && self.beta > 0.0
            && self.beta < 1.0
            && self.eps_charb > 0.0
            && self.eps_tanh > 0.0
            && self.eps_denom > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid loss config: {self:?}")))
        }
    }

    /// Per-pixel energy `f(T)`.
    #[inline]
    pub fn pixel_energy(&self, t: f64) -> f64 {
        if self.lambda0 == 0.0 {
            t * t
        } else {
            let th = (t.abs() / self.eps_tanh).tanh();
            t * t + self.lambda0 * th * th
        }
    }

    /// `df/dT`.
    #[inline]
    fn pixel_energy_grad(&self, t: f64) -> f64 {
        if self.lambda0 == 0.0 {
            2.0 * t
        } else {
            let th = (t.abs() / self.eps_tanh).tanh();
            2.0 * t + self.lambda0 * 2.0 * th * (1.0 - th * th) * t.signum() / self.eps_tanh
        }
    }

    /// Charbonnier penalty `(d^2 + eps^2)^beta`.
    #[inline]
    pub fn charbonnier(&self, d: f64) -> f64 {
        (d * d + self.eps_charb * self.eps_charb).powf(self.beta)
    }

    #[inline]
    fn charbonnier_grad(&self, d: f64) -> f64 {
        let e2 = self.eps_charb * self.eps_charb;
        2.0 * self.beta * d * (d * d + e2).powf(self.beta - 1.0)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cm_forward: f64,
    pub cm_backward: f64,
    pub smoothness: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn assemble(cm_forward: f64, cm_backward: f64, smoothness: f64, lambda: f64) -> Result<Self> {
        for (term, v) in [
            ("forward contrast loss", cm_forward),
            ("backward contrast loss", cm_backward),
            ("smoothness loss", smoothness),
        ] {
            if !v.is_finite() {
                return Err(Error::NonFinite { term: term.into() });
            }
        }
        Ok(Self {
            cm_forward,
            cm_backward,
            smoothness,
            total: cm_forward + cm_backward + lambda * smoothness,
        })
    }
}

/// `sum_i tanh^2(|x_i| / eps_tanh)`, a smooth count of non-zero entries.
pub fn l0_approx(values: &[f64], eps_tanh: f64) -> f64 {
    values
        .iter()
        .map(|v| {
            let t = (v.abs() / eps_tanh).tanh();
            t * t
        })
        .sum()
}

/// Contrast loss of a prebuilt IWE.
pub fn cm_loss_at(iwe: &Iwe, cfg: &LossConfig) -> f64 {
    let numerator: f64 = iwe
        .t_pos
        .iter()
        .zip(iwe.t_neg.iter())
        .map(|(&tp, &tn)| cfg.pixel_energy(tp) + cfg.pixel_energy(tn))
        .sum();
    numerator / (iwe.active_pixels() as f64 + cfg.eps_denom)
}

/// Forward/backward contrast loss at one reference, optionally with
/// `dL/dtheta` accumulated into `grad` (one entry per field cell).
fn cm_directional(
    partition: &EventPartition,
    field: &MotionField,
    reference: Reference,
    cfg: &LossConfig,
    grad: Option<&mut [Theta]>,
) -> f64 {
    cm_directional_with_dropped(partition, field, reference, cfg, grad).0
}

/// As `cm_directional`, also returning the bilinear mass that fell outside
/// the sensor.
fn cm_directional_with_dropped(
    partition: &EventPartition,
    field: &MotionField,
    reference: Reference,
    cfg: &LossConfig,
    grad: Option<&mut [Theta]>,
) -> (f64, f64) {
    let warped = warp_partition(partition, field, reference);
    if warped.is_empty() {
        return (0.0, 0.0);
    }
    let mut acc = Accumulator::fitted(field.sensor(), &warped);
    for e in &warped {
        acc.splat(e);
    }

    let eps = cfg.eps_denom;
    let n = acc.s_pos.len();
    let mut t_pos = vec![0.0; n];
    let mut t_neg = vec![0.0; n];
    let mut numerator = 0.0;
    let mut active = 0usize;
    for i in 0..n {
        t_pos[i] = acc.s_pos[i] / (acc.c_pos[i] + eps);
        t_neg[i] = acc.s_neg[i] / (acc.c_neg[i] + eps);
        numerator += cfg.pixel_energy(t_pos[i]) + cfg.pixel_energy(t_neg[i]);
        if acc.c_pos[i] + acc.c_neg[i] > 0.0 {
            active += 1;
        }
    }
    let denom = active as f64 + eps;
    let loss = numerator / denom;

    if let Some(grad) = grad {
        // dL/dw for an event of time s at a pixel is g * (s - T), with
        // g = f'(T) / (denom * (C + eps)).
        let scale = |t: f64, c: f64| cfg.pixel_energy_grad(t) / (denom * (c + eps));
        let g_pos: Vec<f64> = (0..n).map(|i| scale(t_pos[i], acc.c_pos[i])).collect();
        let g_neg: Vec<f64> = (0..n).map(|i| scale(t_neg[i], acc.c_neg[i])).collect();
        for e in &warped {
            let (dx, dy) = event_position_grad(&acc, e, &t_pos, &t_neg, &g_pos, &g_neg);
            if dx == 0.0 && dy == 0.0 {
                continue;
            }
            let cell = &mut grad[e.cell];
            cell.vx += dx * e.dt;
            cell.vy += dy * e.dt;
            cell.phi += (dx * e.rx + dy * e.ry) * e.dt;
        }
    }
    (loss, acc.dropped)
}

/// `(dL/dx', dL/dy')` for one warped event.
fn event_position_grad(
    acc: &Accumulator,
    e: &WarpedEvent,
    t_pos: &[f64],
    t_neg: &[f64],
    g_pos: &[f64],
    g_neg: &[f64],
) -> (f64, f64) {
    let Some(taps) = taps(e.x, e.y) else {
        return (0.0, 0.0);
    };
    let (t, g) = if e.positive { (t_pos, g_pos) } else { (t_neg, g_neg) };
    let (mut dx, mut dy) = (0.0, 0.0);
    for tap in taps {
        if let Some(i) = acc.index(tap.px, tap.py) {
            let dl_dw = g[i] * (e.s - t[i]);
            dx += dl_dw * tap.dwdx;
            dy += dl_dw * tap.dwdy;
        }
    }
    (dx, dy)
}

/// Bidirectional contrast loss together with the larger of the two
/// fractions of event mass warped off the sensor.
pub fn cm_loss_and_dropped(partition: &EventPartition, field: &MotionField, cfg: &LossConfig) -> (f64, f64) {
    let (fwd, df) = cm_directional_with_dropped(partition, field, Reference::Start, cfg, None);
    let (bwd, db) = cm_directional_with_dropped(partition, field, Reference::End, cfg, None);
    let n = partition.len().max(1) as f64;
    (fwd + bwd, df.max(db) / n)
}

/// Contrast loss evaluated at the first and last timestamp of the partition.
pub fn cm_loss_bidirectional(partition: &EventPartition, field: &MotionField, cfg: &LossConfig) -> (f64, f64) {
    (
        cm_directional(partition, field, Reference::Start, cfg, None),
        cm_directional(partition, field, Reference::End, cfg, None),
    )
}

/// Visits each unordered 4-connected pair of cells once.
fn for_each_neighbor_pair(field: &MotionField, mut f: impl FnMut(usize, usize)) {
    let (cols, rows) = (field.cols(), field.rows());
    for r in 0..rows {
        for c in 0..cols {
            let i = r * cols + c;
            if c + 1 < cols {
                f(i, i + 1);
            }
            if r + 1 < rows {
                f(i, i + cols);
            }
        }
    }
}

/// Number of unordered 4-connected cell pairs.
pub fn neighbor_pairs(field: &MotionField) -> usize {
    let (c, r) = (field.cols(), field.rows());
    (c - 1) * r + c * (r - 1)
}

pub fn smoothness_loss(field: &MotionField, cfg: &LossConfig) -> f64 {
    let cells = field.cells();
    let mut total = 0.0;
    for_each_neighbor_pair(field, |a, b| {
        let (ta, tb) = (cells[a].to_array(), cells[b].to_array());
        total += (0..3).map(|k| cfg.charbonnier(ta[k] - tb[k])).sum::<f64>();
    });
    total
}

fn smoothness_grad(field: &MotionField, cfg: &LossConfig, scale: f64, grad: &mut [Theta]) {
    let cells = field.cells();
    for_each_neighbor_pair(field, |a, b| {
        let (ta, tb) = (cells[a].to_array(), cells[b].to_array());
        let mut ga = grad[a].to_array();
        let mut gb = grad[b].to_array();
        for k in 0..3 {
            let d = scale * cfg.charbonnier_grad(ta[k] - tb[k]);
            ga[k] += d;
            gb[k] -= d;
        }
        grad[a] = Theta::from_array(ga);
        grad[b] = Theta::from_array(gb);
    });
}

pub fn total_loss(partition: &EventPartition, field: &MotionField, cfg: &LossConfig) -> Result<LossBreakdown> {
    let (fwd, bwd) = cm_loss_bidirectional(partition, field, cfg);
    LossBreakdown::assemble(fwd, bwd, smoothness_loss(field, cfg), cfg.lambda)
}

/// Total loss and `dL/dtheta`, returned as a field of the same geometry.
pub fn total_loss_and_gradient(
    partition: &EventPartition,
    field: &MotionField,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, MotionField)> {
    let mut grad = vec![Theta::ZERO; field.len()];
    let fwd = cm_directional(partition, field, Reference::Start, cfg, Some(&mut grad));
    let bwd = cm_directional(partition, field, Reference::End, cfg, Some(&mut grad));
    let smooth = smoothness_loss(field, cfg);
    smoothness_grad(field, cfg, cfg.lambda, &mut grad);
    let breakdown = LossBreakdown::assemble(fwd, bwd, smooth, cfg.lambda)?;
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            term: "loss gradient".into(),
        });
    }
    Ok((breakdown, field.with_cells(grad)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::{Event, Polarity, SensorSize};
    use crate::warp::build_iwe;

    fn ev(x: u16, y: u16, t: u64, pos: bool) -> Event {
        Event::new(x, y, t, if pos { Polarity::Positive } else { Polarity::Negative })
    }

    #[test]
    fn l0_examples() {
        assert_eq!(l0_approx(&[0.0; 5], 0.01), 0.0);
        let big = l0_approx(&[1.0, -2.0, 0.5, 3.0], 0.01);
        assert!((big - 4.0).abs() / 4.0 < 1e-3);
        let one = l0_approx(&[0.01], 0.01);
        assert!((one - 1f64.tanh().powi(2)).abs() < 1e-12);
        assert!((one - 0.5800).abs() < 1e-4);
    }

    #[test]
    fn empty_iwe_has_zero_loss() {
        let sensor = SensorSize::new(8, 8);
        let p = EventPartition::new(vec![]).unwrap();
        let iwe = build_iwe(&p, &MotionField::uniform(sensor, Theta::ZERO), Reference::Start);
        assert_eq!(cm_loss_at(&iwe, &LossConfig::default()), 0.0);
    }

    fn aligned_pair() -> EventPartition {
        EventPartition::new(vec![ev(5, 5, 0, true), ev(6, 5, 1000, true)]).unwrap()
    }

    #[test]
    fn aligned_pair_loss() {
        let cfg = LossConfig::default();
        let sensor = SensorSize::new(10, 10);
        let field = MotionField::uniform(sensor, Theta::translation(1.0, 0.0));
        let loss = cm_loss_at(&build_iwe(&aligned_pair(), &field, Reference::Start), &cfg);
        let expected = (0.25 + 0.01 * (0.5f64 / 0.01).tanh().powi(2)) / (1.0 + 1e-9);
        assert!((loss - expected).abs() < 1e-9, "{loss} vs {expected}");
        assert!((loss - 0.26).abs() < 1e-3);

        let still = MotionField::uniform(sensor, Theta::ZERO);
        let misaligned = cm_loss_at(&build_iwe(&aligned_pair(), &still, Reference::Start), &cfg);
        // one pixel with T = 0, one with T = 1
        let t1: f64 = 1.0 / (1.0 + 1e-9);
        let expected = (t1 * t1 + 0.01 * (t1 / 0.01).tanh().powi(2)) / (2.0 + 1e-9);
        assert!((misaligned - expected).abs() < 1e-9, "{misaligned} vs {expected}");
        assert!((misaligned - 0.505).abs() < 1e-3);
        assert!(misaligned > loss);
    }

    #[test]
    fn fitted_window_matches_full_sensor() {
        let cfg = LossConfig::default();
        let sensor = SensorSize::new(10, 10);
        let field = MotionField::uniform(sensor, Theta::new(0.7, 0.2, 0.1));
        let p = EventPartition::new(vec![
            ev(5, 5, 0, true),
            ev(6, 5, 400, false),
            ev(2, 8, 900, true),
            ev(9, 1, 1000, false),
        ])
        .unwrap();
        let (f, b) = cm_loss_bidirectional(&p, &field, &cfg);
        let f_full = cm_loss_at(&build_iwe(&p, &field, Reference::Start), &cfg);
        let b_full = cm_loss_at(&build_iwe(&p, &field, Reference::End), &cfg);
        assert!((f - f_full).abs() < 1e-12 && (b - b_full).abs() < 1e-12);
    }

    #[test]
    fn zero_duration_partition_is_symmetric() {
        let cfg = LossConfig::default();
        let sensor = SensorSize::new(10, 10);
        let p = EventPartition::new(vec![ev(1, 1, 7, true), ev(3, 4, 7, false), ev(8, 2, 7, true)]).unwrap();
        let field = MotionField::uniform(sensor, Theta::translation(2.0, -1.0));
        let (f, b) = cm_loss_bidirectional(&p, &field, &cfg);
        assert_eq!(f, b);
    }

    #[test]
    fn reversing_events_swaps_directions() {
        let cfg = LossConfig::default();
        let sensor = SensorSize::new(20, 20);
        let events = vec![
            ev(5, 5, 0, true),
            ev(6, 5, 300, true),
            ev(7, 6, 700, false),
            ev(9, 9, 1000, true),
            ev(4, 12, 1600, false),
        ];
        let t_end = 1600;
        let reversed: Vec<Event> = events.iter().rev().map(|e| Event::new(e.x, e.y, t_end - e.t, e.p)).collect();
        let theta = Theta::new(0.8, -0.4, 0.05);
        let neg = Theta::new(-0.8, 0.4, -0.05);
        let a = cm_loss_bidirectional(&EventPartition::new(events).unwrap(), &MotionField::uniform(sensor, theta), &cfg);
        let b = cm_loss_bidirectional(&EventPartition::new(reversed).unwrap(), &MotionField::uniform(sensor, neg), &cfg);
        assert!((a.0 - b.1).abs() < 1e-12 && (a.1 - b.0).abs() < 1e-12, "{a:?} {b:?}");
    }

    #[test]
    fn smoothness_examples() {
        let cfg = LossConfig::default();
        let rho0 = (1e-6f64).powf(0.45);
        assert!((rho0 - 1.995e-3).abs() < 1e-6);

        let sensor = SensorSize::new(40, 30);
        let constant = MotionField::filled(sensor, 4, 3, Theta::new(1.0, 2.0, 0.1));
        let pairs = neighbor_pairs(&constant);
        assert_eq!(pairs, 3 * 3 + 4 * 2);
        assert!((smoothness_loss(&constant, &cfg) - pairs as f64 * 3.0 * rho0).abs() < 1e-12);

        assert_eq!(smoothness_loss(&MotionField::uniform(sensor, Theta::new(5.0, 1.0, 0.0)), &cfg), 0.0);

        let mut two = MotionField::zeros(sensor, 2, 1);
        two.set_cell(1, 0, Theta::translation(1.0, 0.0));
        let rho1 = (1.0f64 + 1e-6).powf(0.45);
        assert!((rho1 - 1.0).abs() < 1e-5);
        assert!((smoothness_loss(&two, &cfg) - (rho1 + 2.0 * rho0)).abs() < 1e-12);
    }

    #[test]
    fn zero_lambda0_is_plain_square() {
        let cfg = LossConfig {
            lambda0: 0.0,
            ..LossConfig::default()
        };
        for t in [0.0, 0.013, 0.5, 1.0] {
            assert_eq!(cfg.pixel_energy(t).to_bits(), (t * t).to_bits());
        }
    }

    #[test]
    fn no_events_gives_zero_loss_and_gradient() {
        let cfg = LossConfig::default();
        let field = MotionField::uniform(SensorSize::new(8, 8), Theta::new(1.0, 1.0, 0.1));
        let (b, g) = total_loss_and_gradient(&EventPartition::new(vec![]).unwrap(), &field, &cfg).unwrap();
        assert_eq!(b.total, 0.0);
        assert!(g.cells().iter().all(|t| *t == Theta::ZERO));
    }

    #[test]
    fn breakdown_total_adds_weighted_smoothness() {
        let cfg = LossConfig::default();
        let sensor = SensorSize::new(16, 16);
        let mut field = MotionField::zeros(sensor, 2, 2);
        field.set_cell(0, 1, Theta::new(0.5, 0.1, 0.02));
        let p = EventPartition::new(vec![ev(1, 1, 0, true), ev(9, 12, 500, false), ev(3, 14, 800, true)]).unwrap();
        let b = total_loss(&p, &field, &cfg).unwrap();
        assert!((b.total - (b.cm_forward + b.cm_backward + cfg.lambda * b.smoothness)).abs() < 1e-15);
    }
}
