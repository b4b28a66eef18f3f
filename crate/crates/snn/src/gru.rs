//! Convolutional gated recurrent unit.

use aqflow_core::{Error, Result};

use crate::tape::{Tape, Tensor, Var};

/// Gate kernels are `[Ch, Cx + Ch, k, k]`, biases `[Ch]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGruWeights {
    pub wz: Tensor,
    pub bz: Tensor,
    pub wr: Tensor,
    pub br: Tensor,
    pub wn: Tensor,
    pub bn: Tensor,
}

impl ConvGruWeights {
    pub fn zeros(input: usize, hidden: usize, k: usize) -> Self {
        let w = Tensor::zeros(&[hidden, input + hidden, k, k]);
        let b = Tensor::zeros(&[hidden]);
        Self {
            wz: w.clone(),
            bz: b.clone(),
            wr: w.clone(),
            br: b.clone(),
            wn: w,
            bn: b,
        }
    }
}

pub(crate) struct GruVars {
    pub wz: Var,
    pub bz: Var,
    pub wr: Var,
    pub br: Var,
    pub wn: Var,
    pub bn: Var,
}

/// `h' = (1 - z) h + z n` with update gate `z`, reset gate `r` and
/// candidate `n = tanh(W_n [x, r h] + b_n)`.
pub(crate) fn gru_update(tape: &mut Tape, x: Var, h: Var, w: &GruVars) -> Result<Var> {
    let xh = tape.concat(&[x, h])?;
    let z = tape.conv(xh, w.wz, Some(w.bz), 1)?;
    let z = tape.sigmoid(z);
    let r = tape.conv(xh, w.wr, Some(w.br), 1)?;
    let r = tape.sigmoid(r);
    let rh = tape.mul(r, h)?;
    let xrh = tape.concat(&[x, rh])?;
    let n = tape.conv(xrh, w.wn, Some(w.bn), 1)?;
    let n = tape.tanh(n);
    let keep = tape.affine(z, -1.0, 1.0);
    let old = tape.mul(keep, h)?;
    let new = tape.mul(z, n)?;
    tape.add(old, new)
}

pub fn convgru_step(state: &Tensor, input: &Tensor, weights: &ConvGruWeights) -> Result<Tensor> {
    let (ch, h, w) = state.chw();
    let (cx, hx, wx) = input.chw();
    if (h, w) != (hx, wx) {
        return Err(Error::InvalidArgument(format!(
            "input {:?} and state {:?} differ spatially",
            input.shape, state.shape
        )));
    }
    if weights.wz.shape.len() != 4 || weights.wz.shape[..2] != [ch, cx + ch] {
        return Err(Error::InvalidArgument(format!(
            "gate kernel {:?} does not fit {cx} inputs and {ch} hidden channels",
            weights.wz.shape
        )));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(input.clone());
    let hv = tape.leaf(state.clone());
    let vars = GruVars {
        wz: tape.leaf(weights.wz.clone()),
        bz: tape.leaf(weights.bz.clone()),
        wr: tape.leaf(weights.wr.clone()),
        br: tape.leaf(weights.br.clone()),
        wn: tape.leaf(weights.wn.clone()),
        bn: tape.leaf(weights.bn.clone()),
    };
    let out = gru_update(&mut tape, x, hv, &vars)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: &[usize], scale: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|i| scale * ((i as f64 * 0.37).sin())).collect()).unwrap()
    }

    fn weights() -> ConvGruWeights {
        ConvGruWeights {
            wz: ramp(&[2, 3, 3, 3], 0.3),
            bz: Tensor::zeros(&[2]),
            wr: ramp(&[2, 3, 3, 3], -0.2),
            br: Tensor::zeros(&[2]),
            wn: ramp(&[2, 3, 3, 3], 0.5),
            bn: Tensor::filled(&[2], 0.1),
        }
    }

    #[test]
    fn closed_update_gate_keeps_state() {
        let mut w = weights();
        w.bz = Tensor::filled(&[2], -1e9);
        let h = ramp(&[2, 4, 4], 0.8);
        assert_eq!(convgru_step(&h, &ramp(&[1, 4, 4], 2.0), &w).unwrap(), h);
    }

    #[test]
    fn open_update_gate_takes_candidate() {
        let mut w = weights();
        w.bz = Tensor::filled(&[2], 1e9);
        let h = ramp(&[2, 4, 4], 0.8);
        let x = ramp(&[1, 4, 4], 2.0);
        let out = convgru_step(&h, &x, &w).unwrap();

        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let hv = tape.leaf(h);
        let wr = tape.leaf(w.wr.clone());
        let br = tape.leaf(w.br.clone());
        let wn = tape.leaf(w.wn.clone());
        let bn = tape.leaf(w.bn.clone());
        let xh = tape.concat(&[xv, hv]).unwrap();
        let r = tape.conv(xh, wr, Some(br), 1).unwrap();
        let r = tape.sigmoid(r);
        let rh = tape.mul(r, hv).unwrap();
        let xrh = tape.concat(&[xv, rh]).unwrap();
        let n = tape.conv(xrh, wn, Some(bn), 1).unwrap();
        let n = tape.tanh(n);
        assert_eq!(&out, tape.value(n));
    }

    #[test]
    fn all_zero_stays_zero() {
        let out = convgru_step(&Tensor::zeros(&[2, 3, 3]), &Tensor::zeros(&[1, 3, 3]), &ConvGruWeights::zeros(1, 2, 3)).unwrap();
        assert!(out.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn state_stays_inside_unit_interval() {
        let w = weights();
        let mut h = Tensor::zeros(&[2, 4, 4]);
        for t in 0..50 {
            h = convgru_step(&h, &ramp(&[1, 4, 4], 10.0 * (t as f64).cos()), &w).unwrap();
            assert!(h.data.iter().all(|v| v.abs() < 1.0));
        }
    }

    #[test]
    fn mismatched_shapes_are_errors() {
        let w = weights();
        assert!(convgru_step(&Tensor::zeros(&[2, 4, 4]), &Tensor::zeros(&[1, 3, 4]), &w).is_err());
        assert!(convgru_step(&Tensor::zeros(&[2, 4, 4]), &Tensor::zeros(&[2, 4, 4]), &w).is_err());
    }
}
