//! Self-supervised training with the contrast-maximization loss.
//!
//! Each update runs the network over a buffer of consecutive partitions,
//! accumulates the loss of every timestep on one tape, backpropagates through
//! time and applies an Adam step with a cosine learning-rate schedule.

use aqflow_core::loss::total_loss_and_gradient;
use aqflow_core::{partition_by_count, Error, EventPartition, EventStream, LossBreakdown, LossConfig, MotionField, Result};
use serde::{Deserialize, Serialize};

use crate::net::{NetState, Network, SpikeRecord};
use crate::tape::{Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Crop {
    pub x: u16,
    pub y: u16,
    pub width: u16,
    pub height: u16,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Events per partition.
    pub events_per_partition: usize,
    /// Partitions per update.
    pub buffer_len: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub max_updates: Option<usize>,
    pub crop: Option<Crop>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            events_per_partition: 1000,
            buffer_len: 10,
            learning_rate: 1e-3,
            epochs: 1,
            max_updates: None,
            crop: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.events_per_partition == 0 || self.buffer_len == 0 {
            return Err(Error::InvalidArgument("partition and buffer sizes must be positive".into()));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidArgument("learning rate must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub update: usize,
    #[serde(rename = "cm_fwd")]
    pub cm_forward: f64,
    #[serde(rename = "cm_bwd")]
    pub cm_backward: f64,
    #[serde(rename = "smooth")]
    pub smoothness: f64,
    pub total: f64,
    /// Percent of neuron-steps that spiked, over all layers.
    #[serde(rename = "firing_rate")]
    pub firing_rate_pct: f64,
    pub epoch: usize,
    pub events: usize,
    #[serde(rename = "lr")]
    pub learning_rate: f64,
}

/// Mean loss of a buffer with its parameter gradients.
#[derive(Debug, Clone)]
pub struct BufferGradient {
    pub loss: LossBreakdown,
    pub grads: Vec<Tensor>,
    pub state: NetState,
    pub record: SpikeRecord,
    pub fields: Vec<MotionField>,
}

/// Forward pass over `buffer` from `state` and backpropagation through time.
/// With `smooth_spikes` the forward pass uses the surrogate in place of the
/// step function, which makes the gradient exact.
pub fn buffer_gradient(
    net: &Network,
    state: &NetState,
    buffer: &[EventPartition],
    loss: &LossConfig,
    smooth_spikes: bool,
) -> Result<BufferGradient> {
    if buffer.is_empty() {
        return Err(Error::InvalidArgument("empty training buffer".into()));
    }
    let mut tape = Tape::new();
    tape.smooth_spikes = smooth_spikes;
    let p = net.bind(&mut tape);
    let mut st = Network::bind_state(&mut tape, state);
    let scale = 1.0 / buffer.len() as f64;
    let mut seeds = Vec::with_capacity(buffer.len());
    let mut sum = LossBreakdown::default();
    let mut record = SpikeRecord::default();
    let mut fields = Vec::with_capacity(buffer.len());
    for part in buffer {
        if part.is_empty() {
            return Err(Error::InvalidArgument("empty partition".into()));
        }
        let x = tape.leaf(net.encode(part)?);
        let out = net.step(&mut tape, &p, x, &st)?;
        let field = net.decode(tape.value(out.out), part);
        let (l, g) = total_loss_and_gradient(part, &field, loss)?;
        sum.cm_forward += scale * l.cm_forward;
        sum.cm_backward += scale * l.cm_backward;
        sum.smoothness += scale * l.smoothness;
        sum.total += scale * l.total;
        let mut seed = net.encode_grad(&g, part);
        seed.data.iter_mut().for_each(|v| *v *= scale);
        seeds.push((out.out, seed));
        record.push_step(net, out.spikes.iter().map(|&s| tape.value(s).clone()).collect());
        fields.push(field);
        st = out.state;
    }
    let all = tape.backward(&seeds)?;
    let grads = p
        .iter()
        .zip(net.params())
        .map(|(v, t)| all[v.index()].clone().unwrap_or_else(|| Tensor::zeros(&t.shape)))
        .collect();
    Ok(BufferGradient {
        loss: sum,
        grads,
        state: Network::read_state(&tape, &st),
        record,
        fields,
    })
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

impl Adam {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(&p.shape)).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            for (j, (w, &gj)) in p.data.iter_mut().zip(&g.data).enumerate() {
                let m = &mut self.m[i].data[j];
                let v = &mut self.v[i].data[j];
                *m = self.beta1 * *m + (1.0 - self.beta1) * gj;
                *v = self.beta2 * *v + (1.0 - self.beta2) * gj * gj;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Cosine decay from `base` to zero over `total` updates.
pub fn cosine_lr(base: f64, update: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let frac = (update as f64 / total as f64).min(1.0);
    0.5 * base * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Crops `stream` as configured and splits it into full partitions.
pub fn training_partitions(stream: &EventStream, cfg: &TrainConfig) -> Result<Vec<EventPartition>> {
    let cropped;
    let stream = match cfg.crop {
        Some(c) => {
            let s = stream.sensor();
            if c.width == 0 || c.height == 0 || c.x as u32 + c.width as u32 > s.width as u32 || c.y as u32 + c.height as u32 > s.height as u32 {
                return Err(Error::InvalidArgument(format!("crop {c:?} does not fit the {}x{} sensor", s.width, s.height)));
            }
            cropped = stream.crop(c.x, c.y, c.width, c.height);
            &cropped
        }
        None => stream,
    };
    Ok(partition_by_count(stream.events(), cfg.events_per_partition)?.partitions)
}

fn finite(params: &[Tensor]) -> bool {
    params.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
}

/// Trains `net` on `partitions`, calling `on_row` after every update. The
/// recurrent state is carried across buffers and reset at each epoch. On a
/// non-finite loss or update the last good parameters are kept and
/// [`Error::Diverged`] is returned.
pub fn train(
    net: &mut Network,
    partitions: &[EventPartition],
    cfg: &TrainConfig,
    loss: &LossConfig,
    mut on_row: impl FnMut(&TrainLogRow),
) -> Result<Vec<TrainLogRow>> {
    cfg.validate()?;
    loss.validate()?;
    let per_epoch = partitions.len() / cfg.buffer_len;
    if per_epoch == 0 {
        return Err(Error::InvalidArgument(format!(
            "{} partitions do not fill a buffer of {}",
            partitions.len(),
            cfg.buffer_len
        )));
    }
    let total = cfg.max_updates.map_or(per_epoch * cfg.epochs, |m| m.min(per_epoch * cfg.epochs));
    let mut adam = Adam::new(net.params());
    let mut rows = Vec::with_capacity(total);
    'epochs: for epoch in 0..cfg.epochs {
        let mut state = net.initial_state();
        for buffer in partitions.chunks_exact(cfg.buffer_len) {
            let update = rows.len();
            if update >= total {
                break 'epochs;
            }
            let bg = buffer_gradient(net, &state, buffer, loss, false).map_err(|e| match e {
                Error::NonFinite { term } => Error::Diverged(format!("{term} at update {update}")),
                other => other,
            })?;
            if !finite(&bg.grads) {
                return Err(Error::Diverged(format!("non-finite gradient at update {update}")));
            }
            let lr = cosine_lr(cfg.learning_rate, update, total);
            let last_good = net.params().to_vec();
            if lr > 0.0 {
                adam.step(net.params_mut(), &bg.grads, lr);
                net.clamp_thresholds();
            }
            if !finite(net.params()) {
                net.params_mut().clone_from_slice(&last_good);
                return Err(Error::Diverged(format!("non-finite parameters at update {update}")));
            }
            let row = TrainLogRow {
                update,
                cm_forward: bg.loss.cm_forward,
                cm_backward: bg.loss.cm_backward,
                smoothness: bg.loss.smoothness,
                total: bg.loss.total,
                firing_rate_pct: bg.record.firing_rate().total_pct,
                epoch,
                events: buffer.iter().map(EventPartition::len).sum(),
                learning_rate: lr,
            };
            on_row(&row);
            rows.push(row);
            state = bg.state;
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0.1, 0, 10), 0.1);
        assert!((cosine_lr(0.1, 5, 10) - 0.05).abs() < 1e-15);
        assert!(cosine_lr(0.1, 10, 10).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = vec![Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap()];
        let g = vec![Tensor::new(vec![3], vec![0.5, -4.0, 0.0]).unwrap()];
        let mut adam = Adam::new(&p);
        adam.step(&mut p, &g, 0.1);
        assert!((p[0].data[0] - 0.9).abs() < 1e-6);
        assert!((p[0].data[1] - 2.1).abs() < 1e-6);
        assert_eq!(p[0].data[2], 3.0);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { buffer_len: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { learning_rate: f64::NAN, ..TrainConfig::default() }.validate().is_err());
    }
}
