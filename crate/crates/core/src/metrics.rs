//! Supervised and unsupervised flow metrics, firing rates and the energy model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{EventPartition, SensorSize};
use crate::flow::PixelFlow;
use crate::grid::Grid;
use crate::warp::{build_iwe, MotionField, Reference, DEFAULT_EPS_DENOM};

/// Endpoint errors above this many pixels count as outliers.
pub const OUTLIER_PX: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowEvalResult {
    pub aee: f64,
    pub outlier_pct_3px: f64,
    pub n_valid: usize,
}

/// Pixels that received at least one event of the partition.
pub fn event_mask(partition: &EventPartition, sensor: SensorSize) -> Grid<bool> {
    let mut mask = Grid::filled(sensor.width as usize, sensor.height as usize, false);
    for e in partition.events() {
        if sensor.contains(e.x, e.y) {
            mask[(e.x as usize, e.y as usize)] = true;
        }
    }
    mask
}

/// Mean endpoint error and strict 3 px outlier percentage over pixels valid
/// in `pred`, `reference` and the optional `mask`.
pub fn aee_and_outliers(pred: &PixelFlow, reference: &PixelFlow, mask: Option<&Grid<bool>>) -> Result<FlowEvalResult> {
    pred.check_same_shape(reference)?;
    if let Some(m) = mask {
        if m.width() != pred.width() || m.height() != pred.height() {
            return Err(Error::invalid(format!(
                "mask is {}x{}, flow is {}x{}",
                m.width(),
                m.height(),
                pred.width(),
                pred.height()
            )));
        }
    }
    let mut sum = 0.0;
    let mut outliers = 0usize;
    let mut n = 0usize;
    for (i, (p, r)) in pred.flow.iter().zip(reference.flow.iter()).enumerate() {
        let keep = pred.valid.as_slice()[i] && reference.valid.as_slice()[i] && mask.is_none_or(|m| m.as_slice()[i]);
        if !keep {
            continue;
        }
        let err = (p[0] - r[0]).hypot(p[1] - r[1]);
        if !err.is_finite() {
            return Err(Error::NonFinite {
                term: "endpoint error".into(),
            });
        }
        sum += err;
        if err > OUTLIER_PX {
            outliers += 1;
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::Undefined {
            what: "AEE",
            reason: "no valid pixels under the mask".into(),
        });
    }
    Ok(FlowEvalResult {
        aee: sum / n as f64,
        outlier_pct_3px: 100.0 * outliers as f64 / n as f64,
        n_valid: n,
    })
}

/// Flow warp loss: variance of the pooled warped count image over the
/// variance of the unwarped one, both at the first timestamp.
pub fn fwl(partition: &EventPartition, field: &MotionField) -> Result<f64> {
    let zero = MotionField::uniform(field.sensor(), Default::default());
    let base = build_iwe(partition, &zero, Reference::Start).delta.variance();
    if base <= 0.0 {
        return Err(Error::Undefined {
            what: "FWL",
            reason: "unwarped count image has zero variance".into(),
        });
    }
    let warped = build_iwe(partition, field, Reference::Start).delta.variance();
    ratio("FWL", warped, base)
}

/// Ratio of squared average timestamps: `sum(T+^2 + T-^2) / active pixels`
/// of the warped IWE over the same quantity at zero flow, both at the first
/// timestamp.
pub fn rsat(partition: &EventPartition, field: &MotionField) -> Result<f64> {
    let sq = |f: &MotionField| {
        let iwe = build_iwe(partition, f, Reference::Start);
        let sum = iwe.t_pos.iter().chain(iwe.t_neg.iter()).map(|t| t * t).sum::<f64>();
        sum / (iwe.active_pixels() as f64 + DEFAULT_EPS_DENOM)
    };
    let zero = MotionField::uniform(field.sensor(), Default::default());
    let base = sq(&zero);
    if base <= 0.0 {
        return Err(Error::Undefined {
            what: "RSAT",
            reason: "zero-flow timestamp image is empty".into(),
        });
    }
    ratio("RSAT", sq(field), base)
}

fn ratio(what: &str, num: f64, den: f64) -> Result<f64> {
    let r = num / den;
    if r.is_finite() {
        Ok(r)
    } else {
        Err(Error::NonFinite { term: what.into() })
    }
}

/// Spike count of one layer over a recording.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerActivity {
    pub name: String,
    pub spikes: u64,
    pub neuron_steps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiringRate {
    /// Percentage over all layers.
    pub total_pct: f64,
    pub per_layer: Vec<(String, f64)>,
}

pub fn firing_rate(layers: &[LayerActivity]) -> FiringRate {
    let pct = |s: u64, n: u64| if n == 0 { 0.0 } else { 100.0 * s as f64 / n as f64 };
    let spikes = layers.iter().map(|l| l.spikes).sum();
    let steps = layers.iter().map(|l| l.neuron_steps).sum();
    FiringRate {
        total_pct: pct(spikes, steps),
        per_layer: layers.iter().map(|l| (l.name.clone(), pct(l.spikes, l.neuron_steps))).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpKind {
    Dense,
    Spiking,
}

/// Per-operation energy in picojoules.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnergyModel {
    pub e_mac: f64,
    pub e_ac: f64,
}

impl Default for EnergyModel {
    fn default() -> Self {
        Self { e_mac: 4.6, e_ac: 0.9 }
    }
}

impl EnergyModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.e_ac > 0.0 && self.e_mac > 0.0 && self.e_ac < self.e_mac) {
            return Err(Error::invalid(format!(
                "energy model needs 0 < e_ac < e_mac, got e_ac={} e_mac={}",
                self.e_ac, self.e_mac
            )));
        }
        Ok(())
    }
}

/// Energy in millijoules for `ops` operations.
pub fn estimate_energy(ops: u64, kind: OpKind, model: &EnergyModel) -> f64 {
    let pj = match kind {
        OpKind::Dense => model.e_mac,
        OpKind::Spiking => model.e_ac,
    };
    ops as f64 * pj * 1e-9
}
