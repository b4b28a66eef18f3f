//! Leaky integrate-and-fire neurons with hard reset.

use aqflow_core::{Error, Result};

use crate::tape::{Tape, Tensor, Var};

pub const DEFAULT_SLOPE: f64 = 2.0;
pub const MIN_THRESHOLD: f64 = 0.01;

/// Per-channel membrane decay and firing threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct LIFParams {
    pub zeta: Vec<f64>,
    pub v_th: Vec<f64>,
}

impl LIFParams {
    pub fn uniform(channels: usize, zeta: f64, v_th: f64) -> Self {
        Self {
            zeta: vec![zeta; channels],
            v_th: vec![v_th; channels],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.zeta.len() != self.v_th.len() {
            return Err(Error::InvalidArgument("zeta and v_th differ in length".into()));
        }
        if !self.zeta.iter().all(|z| (0.0..=1.0).contains(z)) {
            return Err(Error::InvalidArgument("zeta must lie in [0, 1]".into()));
        }
        if !self.v_th.iter().all(|&v| v >= MIN_THRESHOLD) {
            return Err(Error::InvalidArgument(format!("v_th must be >= {MIN_THRESHOLD}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LIFState {
    pub u: Tensor,
    pub s_prev: Tensor,
}

impl LIFState {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            u: Tensor::zeros(shape),
            s_prev: Tensor::zeros(shape),
        }
    }
}

/// `u = zeta u_prev + (1 - zeta) drive`, spike where `u >= v_th`, then reset
/// spiking neurons to zero. Returns `(u_after_reset, spikes)`.
pub(crate) fn lif_update(tape: &mut Tape, u_prev: Var, drive: Var, zeta: Var, v_th: Var, slope: f64) -> Result<(Var, Var)> {
    let leak = tape.chan_mul(u_prev, zeta)?;
    let gain = tape.affine(zeta, -1.0, 1.0);
    let inject = tape.chan_mul(drive, gain)?;
    let u = tape.add(leak, inject)?;
    let s = tape.spike(u, v_th, slope)?;
    let keep = tape.affine(s, -1.0, 1.0);
    let u = tape.mul(u, keep)?;
    Ok((u, s))
}

/// One LIF update from precomputed feedforward and recurrent currents.
pub fn lif_step(state: &LIFState, params: &LIFParams, feedforward: &Tensor, recurrent: &Tensor) -> Result<(LIFState, Tensor)> {
    params.validate()?;
    for (what, t) in [("s_prev", &state.s_prev), ("feedforward", feedforward), ("recurrent", recurrent)] {
        if t.shape != state.u.shape {
            return Err(Error::InvalidArgument(format!(
                "{what} shape {:?} differs from state {:?}",
                t.shape, state.u.shape
            )));
        }
    }
    if params.zeta.len() != state.u.channels() {
        return Err(Error::InvalidArgument(format!(
            "{} channel parameters for {} channels",
            params.zeta.len(),
            state.u.channels()
        )));
    }
    let mut tape = Tape::new();
    let u_prev = tape.leaf(state.u.clone());
    let ff = tape.leaf(feedforward.clone());
    let rec = tape.leaf(recurrent.clone());
    let zeta = tape.leaf(Tensor::new(vec![params.zeta.len()], params.zeta.clone())?);
    let v_th = tape.leaf(Tensor::new(vec![params.v_th.len()], params.v_th.clone())?);
    let drive = tape.add(ff, rec)?;
    let (u, s) = lif_update(&mut tape, u_prev, drive, zeta, v_th, DEFAULT_SLOPE)?;
    let spikes = tape.value(s).clone();
    Ok((
        LIFState {
            u: tape.value(u).clone(),
            s_prev: spikes.clone(),
        },
        spikes,
    ))
}
