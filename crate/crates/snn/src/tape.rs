//! Minimal reverse-mode autodiff over small dense tensors.
//!
//! Feature maps are `[C, H, W]`, vectors `[N]`, conv kernels
//! `[Cout, Cin, k, k]`. Every operation appends a node to the tape; `backward`
//! walks the tape in reverse and returns one gradient per node.

use aqflow_core::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::InvalidArgument(format!(
                "shape {shape:?} does not hold {} values",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(C, H, W)` of a feature map.
    pub fn chw(&self) -> (usize, usize, usize) {
        match self.shape[..] {
            [c, h, w] => (c, h, w),
            [c] => (c, 1, 1),
            _ => panic!("not a feature map: {:?}", self.shape),
        }
    }

    pub fn channels(&self) -> usize {
        self.shape[0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv { x: Var, w: Var, b: Option<Var>, stride: usize },
    Add(Var, Var),
    Mul(Var, Var),
    /// `a * x + c`
    Affine { x: Var, a: f64 },
    /// Per-channel (or scalar when `s` has one entry) product and sum.
    ChanMul { x: Var, s: Var },
    ChanAdd { x: Var, s: Var },
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Softplus(Var),
    Spike { u: Var, th: Var, slope: f64 },
    Concat(Vec<Var>),
    UpNearest(Var),
    UpBilinear(Var),
    MaxPool { x: Var, argmax: Vec<usize> },
    ChanMean(Var),
    Linear { x: Var, w: Var, b: Var },
    Sum(Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Arctan surrogate: `H(x) ~ atan(pi/2 * a * x) / pi + 1/2`.
pub fn surrogate(x: f64, slope: f64) -> f64 {
    (std::f64::consts::FRAC_PI_2 * slope * x).atan() / std::f64::consts::PI + 0.5
}

pub fn surrogate_grad(x: f64, slope: f64) -> f64 {
    let z = std::f64::consts::FRAC_PI_2 * slope * x;
    slope / 2.0 / (1.0 + z * z)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn conv_out(n: usize, k: usize, stride: usize) -> usize {
    (n + 2 * (k / 2) - k) / stride + 1
}

/// Sample positions and weights of a linear resampling from `n_in` to
/// `n_out` samples (half-pixel centers, edge clamped).
fn bilinear_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    /// Replace the spike step by its surrogate in the forward pass too.
    pub smooth_spikes: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    fn same_shape(&self, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (&self.value(a).shape, &self.value(b).shape);
        if sa != sb {
            return Err(Error::InvalidArgument(format!("shape mismatch {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = self.value(x);
        let out = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&a| f(a)).collect(),
        };
        self.push(out, op)
    }

    /// Same-padded convolution; `w` is `[Cout, Cin, k, k]` with odd `k`.
    pub fn conv(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let (cin, h, wd) = self.value(x).chw();
        let ws = &self.value(w).shape;
        if ws.len() != 4 || ws[1] != cin || ws[2] != ws[3] || ws[2] % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "kernel {ws:?} does not fit a {cin}-channel input"
            )));
        }
        let (cout, k) = (ws[0], ws[2]);
        if let Some(b) = b {
            if self.value(b).shape != [cout] {
                return Err(Error::InvalidArgument("conv bias shape".into()));
            }
        }
        let (ho, wo) = (conv_out(h, k, stride), conv_out(wd, k, stride));
        let pad = (k / 2) as isize;
        let xv = &self.value(x).data;
        let wv = &self.value(w).data;
        let mut out = vec![0.0; cout * ho * wo];
        for co in 0..cout {
            let bias = b.map_or(0.0, |b| self.value(b).data[co]);
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias;
                    for ci in 0..cin {
                        for ky in 0..k {
                            let iy = (oy * stride) as isize + ky as isize - pad;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * stride) as isize + kx as isize - pad;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                acc += wv[((co * cin + ci) * k + ky) * k + kx]
                                    * xv[(ci * h + iy as usize) * wd + ix as usize];
                            }
                        }
                    }
                    out[(co * ho + oy) * wo + ox] = acc;
                }
            }
        }
        Ok(self.push(Tensor { shape: vec![cout, ho, wo], data: out }, Op::Conv { x, w, b, stride }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let data = self.value(a).data.iter().zip(&self.value(b).data).map(|(x, y)| x + y).collect();
        let shape = self.value(a).shape.clone();
        Ok(self.push(Tensor { shape, data }, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let data = self.value(a).data.iter().zip(&self.value(b).data).map(|(x, y)| x * y).collect();
        let shape = self.value(a).shape.clone();
        Ok(self.push(Tensor { shape, data }, Op::Mul(a, b)))
    }

    pub fn affine(&mut self, x: Var, a: f64, c: f64) -> Var {
        self.map(x, |v| a * v + c, Op::Affine { x, a })
    }

    fn chan_check(&self, x: Var, s: Var) -> Result<usize> {
        let c = self.value(x).channels();
        let n = self.value(s).len();
        if self.value(s).shape.len() != 1 || (n != c && n != 1) {
            return Err(Error::InvalidArgument(format!(
                "channel operand of length {n} for {c} channels"
            )));
        }
        Ok(self.value(x).len() / c)
    }

    fn chan_index(s_len: usize, i: usize, per: usize) -> usize {
        if s_len == 1 {
            0
        } else {
            i / per
        }
    }

    pub fn chan_mul(&mut self, x: Var, s: Var) -> Result<Var> {
        let per = self.chan_check(x, s)?;
        let (xv, sv) = (self.value(x), self.value(s));
        let data = (0..xv.len())
            .map(|i| xv.data[i] * sv.data[Self::chan_index(sv.len(), i, per)])
            .collect();
        let shape = xv.shape.clone();
        Ok(self.push(Tensor { shape, data }, Op::ChanMul { x, s }))
    }

    pub fn chan_add(&mut self, x: Var, s: Var) -> Result<Var> {
        let per = self.chan_check(x, s)?;
        let (xv, sv) = (self.value(x), self.value(s));
        let data = (0..xv.len())
            .map(|i| xv.data[i] + sv.data[Self::chan_index(sv.len(), i, per)])
            .collect();
        let shape = xv.shape.clone();
        Ok(self.push(Tensor { shape, data }, Op::ChanAdd { x, s }))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, f64::tanh, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.map(x, softplus, Op::Softplus(x))
    }

    /// Spikes where `u >= th` per channel; backward uses the arctan surrogate.
    pub fn spike(&mut self, u: Var, th: Var, slope: f64) -> Result<Var> {
        let per = self.chan_check(u, th)?;
        let smooth = self.smooth_spikes;
        let (uv, tv) = (self.value(u), self.value(th));
        let data = (0..uv.len())
            .map(|i| {
                let x = uv.data[i] - tv.data[Self::chan_index(tv.len(), i, per)];
                if smooth {
                    surrogate(x, slope)
                } else if x >= 0.0 {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        let shape = uv.shape.clone();
        Ok(self.push(Tensor { shape, data }, Op::Spike { u, th, slope }))
    }

    /// Stacks feature maps along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let (_, h, w) = self.value(parts[0]).chw();
        let mut data = Vec::new();
        let mut c = 0;
        for &p in parts {
            let (pc, ph, pw) = self.value(p).chw();
            if (ph, pw) != (h, w) {
                return Err(Error::InvalidArgument("concat of different spatial sizes".into()));
            }
            c += pc;
            data.extend_from_slice(&self.value(p).data);
        }
        Ok(self.push(Tensor { shape: vec![c, h, w], data }, Op::Concat(parts.to_vec())))
    }

    fn resample(&mut self, x: Var, size: (usize, usize), bilinear: bool) -> Var {
        let (c, h, w) = self.value(x).chw();
        let (ho, wo) = size;
        let xv = &self.value(x).data;
        let mut out = vec![0.0; c * ho * wo];
        if bilinear {
            let (ty, tx) = (bilinear_taps(h, ho), bilinear_taps(w, wo));
            for ch in 0..c {
                for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                        let at = |y: usize, x: usize| xv[(ch * h + y) * w + x];
                        out[(ch * ho + oy) * wo + ox] = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1))
                            + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1));
                    }
                }
            }
        } else {
            for ch in 0..c {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let (iy, ix) = ((oy * h / ho).min(h - 1), (ox * w / wo).min(w - 1));
                        out[(ch * ho + oy) * wo + ox] = xv[(ch * h + iy) * w + ix];
                    }
                }
            }
        }
        let op = if bilinear { Op::UpBilinear(x) } else { Op::UpNearest(x) };
        self.push(Tensor { shape: vec![c, ho, wo], data: out }, op)
    }

    /// Nearest-neighbour resize to `size = (H, W)`.
    pub fn up_nearest(&mut self, x: Var, size: (usize, usize)) -> Var {
        self.resample(x, size, false)
    }

    pub fn up_bilinear(&mut self, x: Var, size: (usize, usize)) -> Var {
        self.resample(x, size, true)
    }

    /// 2x2 max pooling with stride 2; odd edges pool over what remains.
    pub fn max_pool(&mut self, x: Var) -> Var {
        let (c, h, w) = self.value(x).chw();
        let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
        let xv = &self.value(x).data;
        let mut out = vec![0.0; c * ho * wo];
        let mut argmax = vec![0; c * ho * wo];
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = (f64::NEG_INFINITY, 0);
                    for y in 2 * oy..(2 * oy + 2).min(h) {
                        for xx in 2 * ox..(2 * ox + 2).min(w) {
                            let i = (ch * h + y) * w + xx;
                            if xv[i] > best.0 {
                                best = (xv[i], i);
                            }
                        }
                    }
                    let o = (ch * ho + oy) * wo + ox;
                    out[o] = best.0;
                    argmax[o] = best.1;
                }
            }
        }
        self.push(Tensor { shape: vec![c, ho, wo], data: out }, Op::MaxPool { x, argmax })
    }

    /// Spatial mean per channel, `[C, H, W] -> [C]`.
    pub fn chan_mean(&mut self, x: Var) -> Var {
        let (c, h, w) = self.value(x).chw();
        let n = (h * w) as f64;
        let data = self.value(x).data.chunks(h * w).map(|ch| ch.iter().sum::<f64>() / n).collect();
        self.push(Tensor { shape: vec![c], data }, Op::ChanMean(x))
    }

    /// `w x + b` with `w: [M, N]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let n = self.value(x).len();
        let ws = &self.value(w).shape;
        if ws.len() != 2 || ws[1] != n || self.value(b).shape != [ws[0]] {
            return Err(Error::InvalidArgument(format!("linear {ws:?} on length {n}")));
        }
        let m = ws[0];
        let (xv, wv, bv) = (&self.value(x).data, &self.value(w).data, &self.value(b).data);
        let data = (0..m)
            .map(|i| bv[i] + (0..n).map(|j| wv[i * n + j] * xv[j]).sum::<f64>())
            .collect();
        Ok(self.push(Tensor { shape: vec![m], data }, Op::Linear { x, w, b }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        self.push(Tensor { shape: vec![1], data: vec![s] }, Op::Sum(x))
    }

    /// Gradients of `sum_i <seed_i, node_i>` with respect to every node.
    pub fn backward(&self, seeds: &[(Var, Tensor)]) -> Result<Vec<Option<Tensor>>> {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for (v, g) in seeds {
            if g.shape != self.value(*v).shape {
                return Err(Error::InvalidArgument("seed gradient shape".into()));
            }
            accumulate(&mut grads, *v, &g.data, &g.shape);
        }
        for i in (0..self.nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(grads)
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &self.nodes[i].value;
        let val = |v: Var| &self.nodes[v.0].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv { x, w, b, stride } => {
                let xv = val(*x);
                let (cin, h, wd) = xv.chw();
                let ws = &val(*w).shape;
                let (cout, k) = (ws[0], ws[2]);
                let (_, ho, wo) = out.chw();
                let pad = (k / 2) as isize;
                let wv = &val(*w).data;
                let mut gx = vec![0.0; xv.len()];
                let mut gw = vec![0.0; wv.len()];
                let mut gb = vec![0.0; cout];
                for co in 0..cout {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let go = g.data[(co * ho + oy) * wo + ox];
                            if go == 0.0 {
                                continue;
                            }
                            gb[co] += go;
                            for ci in 0..cin {
                                for ky in 0..k {
                                    let iy = (oy * stride) as isize + ky as isize - pad;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..k {
                                        let ix = (ox * stride) as isize + kx as isize - pad;
                                        if ix < 0 || ix >= wd as isize {
                                            continue;
                                        }
                                        let xi = (ci * h + iy as usize) * wd + ix as usize;
                                        let wi = ((co * cin + ci) * k + ky) * k + kx;
                                        gx[xi] += go * wv[wi];
                                        gw[wi] += go * xv.data[xi];
                                    }
                                }
                            }
                        }
                    }
                }
                accumulate(grads, *x, &gx, &xv.shape);
                accumulate(grads, *w, &gw, ws);
                if let Some(b) = b {
                    accumulate(grads, *b, &gb, &[cout]);
                }
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, &g.data, &g.shape);
                accumulate(grads, *b, &g.data, &g.shape);
            }
            Op::Mul(a, b) => {
                let ga: Vec<f64> = g.data.iter().zip(&val(*b).data).map(|(g, y)| g * y).collect();
                let gb: Vec<f64> = g.data.iter().zip(&val(*a).data).map(|(g, x)| g * x).collect();
                accumulate(grads, *a, &ga, &g.shape);
                accumulate(grads, *b, &gb, &g.shape);
            }
            Op::Affine { x, a } => {
                let gx: Vec<f64> = g.data.iter().map(|g| g * a).collect();
                accumulate(grads, *x, &gx, &g.shape);
            }
            Op::ChanMul { x, s } => {
                let (xv, sv) = (val(*x), val(*s));
                let per = xv.len() / xv.channels();
                let mut gs = vec![0.0; sv.len()];
                let mut gx = vec![0.0; xv.len()];
                for j in 0..xv.len() {
                    let c = Self::chan_index(sv.len(), j, per);
                    gx[j] = g.data[j] * sv.data[c];
                    gs[c] += g.data[j] * xv.data[j];
                }
                accumulate(grads, *x, &gx, &xv.shape);
                accumulate(grads, *s, &gs, &sv.shape);
            }
            Op::ChanAdd { x, s } => {
                let (xv, sv) = (val(*x), val(*s));
                let per = xv.len() / xv.channels();
                let mut gs = vec![0.0; sv.len()];
                for j in 0..xv.len() {
                    gs[Self::chan_index(sv.len(), j, per)] += g.data[j];
                }
                accumulate(grads, *x, &g.data, &xv.shape);
                accumulate(grads, *s, &gs, &sv.shape);
            }
            Op::Sigmoid(x) => {
                let gx: Vec<f64> = g.data.iter().zip(&out.data).map(|(g, y)| g * y * (1.0 - y)).collect();
                accumulate(grads, *x, &gx, &g.shape);
            }
            Op::Tanh(x) => {
                let gx: Vec<f64> = g.data.iter().zip(&out.data).map(|(g, y)| g * (1.0 - y * y)).collect();
                accumulate(grads, *x, &gx, &g.shape);
            }
            Op::Relu(x) => {
                let gx: Vec<f64> = g.data.iter().zip(&val(*x).data).map(|(g, v)| if *v > 0.0 { *g } else { 0.0 }).collect();
                accumulate(grads, *x, &gx, &g.shape);
            }
            Op::Softplus(x) => {
                let gx: Vec<f64> = g.data.iter().zip(&val(*x).data).map(|(g, v)| g * sigmoid(*v)).collect();
                accumulate(grads, *x, &gx, &g.shape);
            }
            Op::Spike { u, th, slope } => {
                let (uv, tv) = (val(*u), val(*th));
                let per = uv.len() / uv.channels();
                let mut gu = vec![0.0; uv.len()];
                let mut gt = vec![0.0; tv.len()];
                for j in 0..uv.len() {
                    let c = Self::chan_index(tv.len(), j, per);
                    let d = g.data[j] * surrogate_grad(uv.data[j] - tv.data[c], *slope);
                    gu[j] = d;
                    gt[c] -= d;
                }
                accumulate(grads, *u, &gu, &uv.shape);
                accumulate(grads, *th, &gt, &tv.shape);
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = val(p).len();
                    accumulate(grads, p, &g.data[off..off + n], &val(p).shape);
                    off += n;
                }
            }
            Op::UpNearest(x) | Op::UpBilinear(x) => {
                let xv = val(*x);
                let (c, h, w) = xv.chw();
                let (_, ho, wo) = out.chw();
                let mut gx = vec![0.0; xv.len()];
                if matches!(self.nodes[i].op, Op::UpBilinear(_)) {
                    let (ty, tx) = (bilinear_taps(h, ho), bilinear_taps(w, wo));
                    for ch in 0..c {
                        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                                let go = g.data[(ch * ho + oy) * wo + ox];
                                let mut put = |y: usize, x: usize, wgt: f64| gx[(ch * h + y) * w + x] += go * wgt;
                                put(y0, x0, (1.0 - fy) * (1.0 - fx));
                                put(y0, x1, (1.0 - fy) * fx);
                                put(y1, x0, fy * (1.0 - fx));
                                put(y1, x1, fy * fx);
                            }
                        }
                    }
                } else {
                    for ch in 0..c {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let (iy, ix) = ((oy * h / ho).min(h - 1), (ox * w / wo).min(w - 1));
                                gx[(ch * h + iy) * w + ix] += g.data[(ch * ho + oy) * wo + ox];
                            }
                        }
                    }
                }
                accumulate(grads, *x, &gx, &xv.shape);
            }
            Op::MaxPool { x, argmax } => {
                let mut gx = vec![0.0; val(*x).len()];
                for (o, &src) in argmax.iter().enumerate() {
                    gx[src] += g.data[o];
                }
                accumulate(grads, *x, &gx, &val(*x).shape);
            }
            Op::ChanMean(x) => {
                let xv = val(*x);
                let (c, h, w) = xv.chw();
                let n = h * w;
                let gx: Vec<f64> = (0..c * n).map(|j| g.data[j / n] / n as f64).collect();
                accumulate(grads, *x, &gx, &xv.shape);
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (val(*x), val(*w));
                let (m, n) = (wv.shape[0], wv.shape[1]);
                let mut gx = vec![0.0; n];
                let mut gw = vec![0.0; m * n];
                for r in 0..m {
                    for j in 0..n {
                        gx[j] += g.data[r] * wv.data[r * n + j];
                        gw[r * n + j] = g.data[r] * xv.data[j];
                    }
                }
                accumulate(grads, *x, &gx, &xv.shape);
                accumulate(grads, *w, &gw, &wv.shape);
                accumulate(grads, *b, &g.data, &[m]);
            }
            Op::Sum(x) => {
                let xv = val(*x);
                accumulate(grads, *x, &vec![g.data[0]; xv.len()], &xv.shape);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: &[f64], shape: &[usize]) {
    match &mut grads[v.0] {
        Some(t) => t.data.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        slot => {
            *slot = Some(Tensor {
                shape: shape.to_vec(),
                data: g.to_vec(),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central differences of a scalar graph against `backward`, for
    /// every entry of every leaf.
    fn check(build: impl Fn(&mut Tape, &[Var]) -> Var, leaves: Vec<Tensor>) {
        let eval = |ls: &[Tensor]| {
            let mut t = Tape::new();
            let vs: Vec<Var> = ls.iter().map(|l| t.leaf(l.clone())).collect();
            let out = build(&mut t, &vs);
            let s = t.sum(out);
            (t, vs, s)
        };
        let (t, vs, s) = eval(&leaves);
        let grads = t.backward(&[(s, Tensor::filled(&[1], 1.0))]).unwrap();
        let h = 1e-6;
        for (li, leaf) in leaves.iter().enumerate() {
            let g = grads[vs[li].index()].clone().unwrap_or_else(|| Tensor::zeros(&leaf.shape));
            for j in 0..leaf.len() {
                let mut plus = leaves.clone();
                plus[li].data[j] += h;
                let mut minus = leaves.clone();
                minus[li].data[j] -= h;
                let (tp, _, sp) = eval(&plus);
                let (tm, _, sm) = eval(&minus);
                let fd = (tp.value(sp).data[0] - tm.value(sm).data[0]) / (2.0 * h);
                let err = (fd - g.data[j]).abs() / fd.abs().max(1.0);
                assert!(err < 1e-6, "leaf {li} entry {j}: fd {fd} analytic {}", g.data[j]);
            }
        }
    }

    #[test]
    fn conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for stride in [1, 2] {
            let leaves = vec![random(&mut rng, &[2, 5, 4]), random(&mut rng, &[3, 2, 3, 3]), random(&mut rng, &[3])];
            check(
                |t, v| {
                    let c = t.conv(v[0], v[1], Some(v[2]), stride).unwrap();
                    t.tanh(c)
                },
                leaves,
            );
        }
    }

    #[test]
    fn elementwise_and_channel_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let leaves = vec![random(&mut rng, &[2, 3, 3]), random(&mut rng, &[2, 3, 3]), random(&mut rng, &[2]), random(&mut rng, &[1])];
        check(
            |t, v| {
                let a = t.mul(v[0], v[1]).unwrap();
                let b = t.chan_mul(a, v[2]).unwrap();
                let c = t.chan_add(b, v[3]).unwrap();
                let d = t.sigmoid(c);
                let e = t.softplus(v[0]);
                let f = t.affine(e, -0.5, 1.0);
                let g = t.add(d, f).unwrap();
                let sq = t.mul(g, g).unwrap();
                t.relu(sq)
            },
            leaves,
        );
    }

    #[test]
    fn resampling_and_pooling_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let leaves = vec![random(&mut rng, &[2, 3, 5])];
        check(
            |t, v| {
                let up = t.up_bilinear(v[0], (6, 10));
                let sq = t.mul(up, up).unwrap();
                let near = t.up_nearest(v[0], (6, 10));
                let pooled = t.max_pool(near);
                let cat = t.concat(&[pooled, v[0]]).unwrap();
                let m = t.chan_mean(sq);
                let s = t.sum(m);
                let cs = t.sum(cat);
                t.add(s, cs).unwrap()
            },
            leaves,
        );
    }

    #[test]
    fn linear_and_smooth_spike_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let leaves = vec![random(&mut rng, &[3]), random(&mut rng, &[2, 3]), random(&mut rng, &[2]), random(&mut rng, &[2])];
        check(
            |t, v| {
                t.smooth_spikes = true;
                let y = t.linear(v[0], v[1], v[2]).unwrap();
                t.spike(y, v[3], 2.0).unwrap()
            },
            leaves,
        );
    }

    #[test]
    fn hard_spikes_are_binary() {
        let mut t = Tape::new();
        let u = t.leaf(Tensor::new(vec![2, 1, 2], vec![0.5, 1.0, -3.0, 2.0]).unwrap());
        let th = t.leaf(Tensor::new(vec![2], vec![1.0, 1.5]).unwrap());
        let s = t.spike(u, th, 2.0).unwrap();
        assert_eq!(t.value(s).data, vec![0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn shape_mismatches_are_errors() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::zeros(&[1, 2, 2]));
        let b = t.leaf(Tensor::zeros(&[1, 2, 3]));
        assert!(t.add(a, b).is_err());
        let w = t.leaf(Tensor::zeros(&[1, 2, 3, 3]));
        assert!(t.conv(a, w, None, 1).is_err());
        let s = t.leaf(Tensor::zeros(&[3]));
        assert!(t.chan_mul(a, s).is_err());
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
    }
}
