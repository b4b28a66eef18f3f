//! Two-pathway spiking flow network.
//!
//! Pathway A runs at full resolution, pathway B at half resolution. From the
//! second layer on, each A layer also receives the upsampled spikes of the
//! previous B layer and each B layer the max-pooled spikes of the previous A
//! layer. The last layer of each pathway is gated by channel attention; the
//! gated B output feeds a ConvGRU whose state is upsampled and fused with the
//! gated A output by a 1x1 head.

use aqflow_core::metrics::{firing_rate, FiringRate, LayerActivity};
use aqflow_core::{count_encode, Error, EventPartition, MotionField, Result, SensorSize, Theta};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::gru::{gru_update, GruVars};
use crate::lif::{lif_update, LIFState, MIN_THRESHOLD};
use crate::tape::{conv_out, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    /// Channels per layer of the full-resolution pathway.
    pub pathway_a: Vec<usize>,
    /// Channels per layer of the half-resolution pathway.
    pub pathway_b: Vec<usize>,
    pub kernel: usize,
    /// Channel reduction inside the attention blocks.
    pub attention_reduction: usize,
    pub predict_phi: bool,
    pub surrogate_slope: f64,
    pub v_th_init: f64,
    /// Membrane decay at initialisation.
    pub zeta_init: f64,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            pathway_a: vec![8, 8],
            pathway_b: vec![16, 16],
            kernel: 3,
            attention_reduction: 2,
            predict_phi: true,
            surrogate_slope: 2.0,
            v_th_init: 0.3,
            zeta_init: 0.5,
            seed: 0,
        }
    }
}

impl NetworkConfig {
    /// Two channels per layer in both pathways.
    pub fn toy() -> Self {
        Self {
            pathway_a: vec![2, 2],
            pathway_b: vec![2, 2],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if self.pathway_a.is_empty() || self.pathway_a.len() != self.pathway_b.len() {
            return bad("pathways need the same, non-zero number of layers");
        }
        if self.pathway_a.iter().chain(&self.pathway_b).any(|&c| c == 0) {
            return bad("every layer needs at least one channel");
        }
        if self.kernel % 2 == 0 {
            return bad("kernel size must be odd");
        }
        if self.attention_reduction == 0 {
            return bad("attention reduction must be at least 1");
        }
        if !(self.surrogate_slope > 0.0) {
            return bad("surrogate slope must be positive");
        }
        if !(self.v_th_init >= MIN_THRESHOLD) {
            return bad("initial threshold is below the minimum");
        }
        if !(self.zeta_init > 0.0 && self.zeta_init < 1.0) {
            return bad("initial decay must lie in (0, 1)");
        }
        Ok(())
    }

    fn out_channels(&self) -> usize {
        if self.predict_phi {
            3
        } else {
            2
        }
    }
}

#[derive(Debug, Clone)]
struct LayerIx {
    w: usize,
    b: usize,
    skip: Option<usize>,
    rec: usize,
    zeta: usize,
    v_th: usize,
}

#[derive(Debug, Clone)]
struct AttentionIx {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    gain: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    a: Vec<LayerIx>,
    b: Vec<LayerIx>,
    att_a: AttentionIx,
    att_b: AttentionIx,
    gru: [usize; 6],
    head_w: usize,
    head_b: usize,
}

/// Recurrent state carried between timesteps.
#[derive(Debug, Clone, PartialEq)]
pub struct NetState {
    pub a: Vec<LIFState>,
    pub b: Vec<LIFState>,
    pub hidden: Tensor,
}

/// Spike maps of every LIF layer, one per timestep.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SpikeRecord {
    pub names: Vec<String>,
    pub maps: Vec<Vec<Tensor>>,
}

impl SpikeRecord {
    pub fn steps(&self) -> usize {
        self.maps.first().map_or(0, Vec::len)
    }

    pub fn activity(&self) -> Vec<LayerActivity> {
        self.names
            .iter()
            .zip(&self.maps)
            .map(|(name, maps)| LayerActivity {
                name: name.clone(),
                spikes: maps.iter().map(|m| m.data.iter().filter(|&&v| v != 0.0).count() as u64).sum(),
                neuron_steps: maps.iter().map(|m| m.len() as u64).sum(),
            })
            .collect()
    }

    pub fn firing_rate(&self) -> FiringRate {
        firing_rate(&self.activity())
    }

    pub(crate) fn push_step(&mut self, net: &Network, spikes: Vec<Tensor>) {
        if self.names.is_empty() {
            self.names = net.layer_names().to_vec();
            self.maps = vec![Vec::new(); self.names.len()];
        }
        for (m, s) in self.maps.iter_mut().zip(spikes) {
            m.push(s);
        }
    }
}

/// Parameter count and operations of a recorded run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCount {
    pub params: usize,
    /// Multiply-accumulates of layers with real-valued input.
    pub dense_macs: u64,
    /// Accumulates triggered by binary spikes.
    pub synaptic_ops: u64,
    pub steps: usize,
}

impl OpCount {
    pub fn total(&self) -> u64 {
        self.dense_macs + self.synaptic_ops
    }
}

/// Weights plus bias of a `k x k` convolution.
pub fn conv_params(cin: usize, cout: usize, k: usize, bias: bool) -> usize {
    cout * cin * k * k + if bias { cout } else { 0 }
}

/// Tape variables of one timestep's recurrent state.
#[derive(Debug, Clone)]
pub(crate) struct StepState {
    pub a: Vec<(Var, Var)>,
    pub b: Vec<(Var, Var)>,
    pub hidden: Var,
}

pub(crate) struct StepOut {
    pub out: Var,
    pub state: StepState,
    pub spikes: Vec<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    cfg: NetworkConfig,
    sensor: SensorSize,
    names: Vec<String>,
    params: Vec<Tensor>,
    layer_names: Vec<String>,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor {
        shape: shape.to_vec(),
        data: (0..n).map(|_| rng.gen_range(-bound..=bound)).collect(),
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl Network {
    pub fn new(cfg: NetworkConfig, sensor: SensorSize) -> Result<Self> {
        cfg.validate()?;
        if sensor.width == 0 || sensor.height == 0 {
            return Err(Error::InvalidArgument("sensor must not be empty".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let k = cfg.kernel;
        let mut names = Vec::new();
        let mut params = Vec::new();
        let mut add = |name: String, t: Tensor| {
            names.push(name);
            params.push(t);
        };
        for (tag, chans) in [("a", &cfg.pathway_a), ("b", &cfg.pathway_b)] {
            let other = if tag == "a" { &cfg.pathway_b } else { &cfg.pathway_a };
            for (i, &c) in chans.iter().enumerate() {
                let cin = if i == 0 { 2 } else { chans[i - 1] };
                let mut fan_in = cin * k * k;
                if i > 0 {
                    fan_in += other[i - 1] * k * k;
                }
                let bound = (6.0 / fan_in as f64).sqrt();
                add(format!("{tag}{i}.w"), uniform(&mut rng, &[c, cin, k, k], bound));
                add(format!("{tag}{i}.b"), Tensor::zeros(&[c]));
                if i > 0 {
                    add(format!("{tag}{i}.skip"), uniform(&mut rng, &[c, other[i - 1], k, k], bound));
                }
                let rec_bound = 0.5 * (3.0 / (c * k * k) as f64).sqrt();
                add(format!("{tag}{i}.rec"), uniform(&mut rng, &[c, c, k, k], rec_bound));
                add(format!("{tag}{i}.zeta"), Tensor::filled(&[c], logit(cfg.zeta_init)));
                add(format!("{tag}{i}.v_th"), Tensor::filled(&[c], cfg.v_th_init));
            }
        }
        let ca = *cfg.pathway_a.last().unwrap();
        let cb = *cfg.pathway_b.last().unwrap();
        for (tag, c) in [("att_a", ca), ("att_b", cb)] {
            let m = (c / cfg.attention_reduction).max(1);
            add(format!("{tag}.w1"), uniform(&mut rng, &[m, c], (3.0 / c as f64).sqrt()));
            add(format!("{tag}.b1"), Tensor::zeros(&[m]));
            add(format!("{tag}.w2"), uniform(&mut rng, &[1, m], (3.0 / m as f64).sqrt()));
            add(format!("{tag}.b2"), Tensor::filled(&[1], 1.0));
            add(format!("{tag}.gain"), Tensor::zeros(&[1]));
        }
        let gru_bound = (1.0 / (2 * cb * k * k) as f64).sqrt();
        for g in ["z", "r", "n"] {
            add(format!("gru.w{g}"), uniform(&mut rng, &[cb, 2 * cb, k, k], gru_bound));
            add(format!("gru.b{g}"), Tensor::zeros(&[cb]));
        }
        let head_in = ca + cb;
        add("head.w".into(), uniform(&mut rng, &[cfg.out_channels(), head_in, 1, 1], 0.1 / (head_in as f64).sqrt()));
        add("head.b".into(), Tensor::zeros(&[cfg.out_channels()]));

        let layer_names = (0..cfg.pathway_a.len())
            .map(|i| format!("a{i}"))
            .chain((0..cfg.pathway_b.len()).map(|i| format!("b{i}")))
            .collect();
        Ok(Self {
            cfg,
            sensor,
            names,
            params,
            layer_names,
        })
    }

    /// Rebuilds a network from named tensors, checking them against the
    /// layout implied by `cfg`.
    pub fn from_parts(cfg: NetworkConfig, sensor: SensorSize, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let mut net = Self::new(cfg, sensor)?;
        if tensors.len() != net.params.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} tensors, got {}",
                net.params.len(),
                tensors.len()
            )));
        }
        for (i, (name, t)) in tensors.into_iter().enumerate() {
            if name != net.names[i] || t.shape != net.params[i].shape {
                return Err(Error::InvalidArgument(format!(
                    "tensor {name} {:?} does not match {} {:?}",
                    t.shape, net.names[i], net.params[i].shape
                )));
            }
            net.params[i] = t;
        }
        Ok(net)
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn sensor(&self) -> SensorSize {
        self.sensor
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    fn index(&self, name: &str) -> usize {
        self.names.iter().position(|n| n == name).expect("parameter layout")
    }

    fn layout(&self) -> Layout {
        let layer = |tag: &str, i: usize| LayerIx {
            w: self.index(&format!("{tag}{i}.w")),
            b: self.index(&format!("{tag}{i}.b")),
            skip: (i > 0).then(|| self.index(&format!("{tag}{i}.skip"))),
            rec: self.index(&format!("{tag}{i}.rec")),
            zeta: self.index(&format!("{tag}{i}.zeta")),
            v_th: self.index(&format!("{tag}{i}.v_th")),
        };
        let att = |tag: &str| AttentionIx {
            w1: self.index(&format!("{tag}.w1")),
            b1: self.index(&format!("{tag}.b1")),
            w2: self.index(&format!("{tag}.w2")),
            b2: self.index(&format!("{tag}.b2")),
            gain: self.index(&format!("{tag}.gain")),
        };
        let n = self.cfg.pathway_a.len();
        Layout {
            a: (0..n).map(|i| layer("a", i)).collect(),
            b: (0..n).map(|i| layer("b", i)).collect(),
            att_a: att("att_a"),
            att_b: att("att_b"),
            gru: ["gru.wz", "gru.bz", "gru.wr", "gru.br", "gru.wn", "gru.bn"].map(|s| self.index(s)),
            head_w: self.index("head.w"),
            head_b: self.index("head.b"),
        }
    }

    /// Keeps every firing threshold at or above the minimum.
    pub fn clamp_thresholds(&mut self) {
        for (name, t) in self.names.iter().zip(self.params.iter_mut()) {
            if name.ends_with(".v_th") {
                for v in &mut t.data {
                    *v = v.max(MIN_THRESHOLD);
                }
            }
        }
    }

    fn full_size(&self) -> (usize, usize) {
        (self.sensor.height as usize, self.sensor.width as usize)
    }

    fn half_size(&self) -> (usize, usize) {
        let (h, w) = self.full_size();
        (conv_out(h, self.cfg.kernel, 2), conv_out(w, self.cfg.kernel, 2))
    }

    pub fn initial_state(&self) -> NetState {
        let (h, w) = self.full_size();
        let (hh, hw) = self.half_size();
        NetState {
            a: self.cfg.pathway_a.iter().map(|&c| LIFState::zeros(&[c, h, w])).collect(),
            b: self.cfg.pathway_b.iter().map(|&c| LIFState::zeros(&[c, hh, hw])).collect(),
            hidden: Tensor::zeros(&[*self.cfg.pathway_b.last().unwrap(), hh, hw]),
        }
    }

    /// Two-channel event count image of a partition.
    pub fn encode(&self, partition: &EventPartition) -> Result<Tensor> {
        let img = count_encode(partition.events(), self.sensor)?;
        let data = img.pos.iter().chain(img.neg.iter()).map(|&c| c as f64).collect();
        let (h, w) = self.full_size();
        Tensor::new(vec![2, h, w], data)
    }

    /// Scale that maps the raw phi output to a relative expansion per window.
    fn phi_scale(&self) -> f64 {
        self.sensor.width.max(self.sensor.height) as f64 / 2.0
    }

    fn window_ms(partition: &EventPartition) -> f64 {
        partition.duration_ms().max(1e-3)
    }

    /// Head output (per-window displacement) to a per-pixel motion field.
    pub(crate) fn decode(&self, out: &Tensor, partition: &EventPartition) -> MotionField {
        let d = Self::window_ms(partition);
        let s = self.phi_scale();
        let n = out.len() / out.channels();
        let mut field = MotionField::per_pixel(self.sensor);
        for (i, th) in field.cells_mut().iter_mut().enumerate() {
            let phi = if self.cfg.predict_phi { out.data[2 * n + i] / (d * s) } else { 0.0 };
            *th = Theta::new(out.data[i] / d, out.data[n + i] / d, phi);
        }
        field
    }

    /// Loss gradient with respect to a motion field, mapped onto the head output.
    pub(crate) fn encode_grad(&self, grad: &MotionField, partition: &EventPartition) -> Tensor {
        let d = Self::window_ms(partition);
        let s = self.phi_scale();
        let (h, w) = self.full_size();
        let n = h * w;
        let mut t = Tensor::zeros(&[self.cfg.out_channels(), h, w]);
        for (i, g) in grad.cells().iter().enumerate() {
            t.data[i] = g.vx / d;
            t.data[n + i] = g.vy / d;
            if self.cfg.predict_phi {
                t.data[2 * n + i] = g.phi / (d * s);
            }
        }
        t
    }

    pub(crate) fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.clone())).collect()
    }

    pub(crate) fn bind_state(tape: &mut Tape, st: &NetState) -> StepState {
        let mut pair = |l: &LIFState| (tape.leaf(l.u.clone()), tape.leaf(l.s_prev.clone()));
        StepState {
            a: st.a.iter().map(&mut pair).collect(),
            b: st.b.iter().map(&mut pair).collect(),
            hidden: tape.leaf(st.hidden.clone()),
        }
    }

    pub(crate) fn read_state(tape: &Tape, st: &StepState) -> NetState {
        let lif = |&(u, s): &(Var, Var)| LIFState {
            u: tape.value(u).clone(),
            s_prev: tape.value(s).clone(),
        };
        NetState {
            a: st.a.iter().map(lif).collect(),
            b: st.b.iter().map(lif).collect(),
            hidden: tape.value(st.hidden).clone(),
        }
    }

    fn lif_layer(&self, tape: &mut Tape, p: &[Var], ix: &LayerIx, input: Var, skip: Option<Var>, state: (Var, Var), stride: usize) -> Result<(Var, Var)> {
        let mut drive = tape.conv(input, p[ix.w], Some(p[ix.b]), stride)?;
        if let (Some(s), Some(w)) = (skip, ix.skip) {
            let c = tape.conv(s, p[w], None, 1)?;
            drive = tape.add(drive, c)?;
        }
        let rec = tape.conv(state.1, p[ix.rec], None, 1)?;
        let drive = tape.add(drive, rec)?;
        let zeta = tape.sigmoid(p[ix.zeta]);
        lif_update(tape, state.0, drive, zeta, p[ix.v_th], self.cfg.surrogate_slope)
    }

    /// Channel gate `sigmoid(softplus(gain) m_c + o)`, where `m_c` is the
    /// channel's mean activity and `o` a shared context term.
    fn attention(&self, tape: &mut Tape, p: &[Var], ix: &AttentionIx, x: Var) -> Result<(Var, Var)> {
        let m = tape.chan_mean(x);
        let ctx = tape.linear(m, p[ix.w1], p[ix.b1])?;
        let ctx = tape.relu(ctx);
        let o = tape.linear(ctx, p[ix.w2], p[ix.b2])?;
        let gain = tape.softplus(p[ix.gain]);
        let g = tape.chan_mul(m, gain)?;
        let g = tape.chan_add(g, o)?;
        let g = tape.sigmoid(g);
        Ok((tape.chan_mul(x, g)?, g))
    }

    pub(crate) fn step(&self, tape: &mut Tape, p: &[Var], x: Var, st: &StepState) -> Result<StepOut> {
        let ly = self.layout();
        let full = self.full_size();
        let mut a: Vec<(Var, Var)> = Vec::with_capacity(ly.a.len());
        let mut b: Vec<(Var, Var)> = Vec::with_capacity(ly.b.len());
        for i in 0..ly.a.len() {
            let (na, nb) = if i == 0 {
                (
                    self.lif_layer(tape, p, &ly.a[0], x, None, st.a[0], 1)?,
                    self.lif_layer(tape, p, &ly.b[0], x, None, st.b[0], 2)?,
                )
            } else {
                let (sa, sb) = (a[i - 1].1, b[i - 1].1);
                let up = tape.up_nearest(sb, full);
                let down = tape.max_pool(sa);
                (
                    self.lif_layer(tape, p, &ly.a[i], sa, Some(up), st.a[i], 1)?,
                    self.lif_layer(tape, p, &ly.b[i], sb, Some(down), st.b[i], 1)?,
                )
            };
            a.push(na);
            b.push(nb);
        }
        let (ga, _) = self.attention(tape, p, &ly.att_a, a.last().unwrap().1)?;
        let (gb, _) = self.attention(tape, p, &ly.att_b, b.last().unwrap().1)?;
        let g = &ly.gru;
        let vars = GruVars {
            wz: p[g[0]],
            bz: p[g[1]],
            wr: p[g[2]],
            br: p[g[3]],
            wn: p[g[4]],
            bn: p[g[5]],
        };
        let hidden = gru_update(tape, gb, st.hidden, &vars)?;
        let up = tape.up_bilinear(hidden, full);
        let fused = tape.concat(&[ga, up])?;
        let out = tape.conv(fused, p[ly.head_w], Some(p[ly.head_b]), 1)?;
        let spikes = a.iter().chain(&b).map(|&(_, s)| s).collect();
        Ok(StepOut {
            out,
            state: StepState { a, b, hidden },
            spikes,
        })
    }

    fn check_partition(&self, p: &EventPartition) -> Result<()> {
        if p.is_empty() {
            return Err(Error::InvalidArgument("empty partition".into()));
        }
        Ok(())
    }

    /// Runs one timestep per partition from `state`, updating it in place.
    /// Returns the motion field of every timestep.
    pub fn run(&self, state: &mut NetState, partitions: &[EventPartition]) -> Result<(Vec<MotionField>, SpikeRecord)> {
        let mut fields = Vec::with_capacity(partitions.len());
        let mut record = SpikeRecord::default();
        for part in partitions {
            self.check_partition(part)?;
            let mut tape = Tape::new();
            let p = self.bind(&mut tape);
            let st = Self::bind_state(&mut tape, state);
            let x = tape.leaf(self.encode(part)?);
            let out = self.step(&mut tape, &p, x, &st)?;
            record.push_step(self, out.spikes.iter().map(|&s| tape.value(s).clone()).collect());
            fields.push(self.decode(tape.value(out.out), part));
            *state = Self::read_state(&tape, &out.state);
        }
        Ok((fields, record))
    }

    /// Motion field of the last partition, starting from rest.
    pub fn forward(&self, partitions: &[EventPartition]) -> Result<(MotionField, SpikeRecord)> {
        if partitions.is_empty() {
            return Err(Error::InvalidArgument("no partitions to run on".into()));
        }
        let mut state = self.initial_state();
        let (mut fields, record) = self.run(&mut state, partitions)?;
        Ok((fields.pop().unwrap(), record))
    }

    pub(crate) fn layer_names(&self) -> &[String] {
        &self.layer_names
    }

    /// Counts parameters, dense MACs and spike-driven accumulates of a run.
    /// A spike into a convolution costs one accumulate per output it reaches.
    pub fn count_params_and_ops(&self, record: &SpikeRecord) -> Result<OpCount> {
        let n = self.cfg.pathway_a.len();
        if record.names != self.layer_names && !record.names.is_empty() {
            return Err(Error::InvalidArgument("spike record does not belong to this network".into()));
        }
        let k = self.cfg.kernel;
        let (h, w) = self.full_size();
        let (hh, hw) = self.half_size();
        let (ca, cb) = (*self.cfg.pathway_a.last().unwrap(), *self.cfg.pathway_b.last().unwrap());
        let steps = record.steps();
        let mut dense = 0u64;
        let mut sparse = 0u64;

        let per_step_dense = {
            let input = (self.cfg.pathway_a[0] * h * w + self.cfg.pathway_b[0] * hh * hw) * 2 * k * k;
            let att = |c: usize| {
                let m = (c / self.cfg.attention_reduction).max(1);
                c * m + m + c
            };
            let gru = 3 * cb * 2 * cb * k * k * hh * hw;
            let head = self.cfg.out_channels() * (ca + cb) * h * w;
            let upsample = 4 * cb * h * w;
            input + att(ca) + att(cb) + gru + head + upsample
        };
        dense += (per_step_dense * steps) as u64;

        let idx = |tag: char, i: usize| if tag == 'a' { i } else { n + i };
        for t in 0..steps {
            for i in 0..n {
                for tag in ['a', 'b'] {
                    let (c, size) = if tag == 'a' {
                        (self.cfg.pathway_a[i], (h, w))
                    } else {
                        (self.cfg.pathway_b[i], (hh, hw))
                    };
                    let own = &record.maps[idx(tag, i)];
                    if t > 0 {
                        sparse += fan_out(&own[t - 1], k, 1, size) * c as u64;
                    }
                    if i > 0 {
                        let (same, other) = if tag == 'a' { ('a', 'b') } else { ('b', 'a') };
                        sparse += fan_out(&record.maps[idx(same, i - 1)][t], k, 1, size) * c as u64;
                        let src = &record.maps[idx(other, i - 1)][t];
                        let moved = if tag == 'a' { up_nearest(src, size) } else { max_pool(src) };
                        sparse += fan_out(&moved, k, 1, size) * c as u64;
                    }
                }
            }
        }
        Ok(OpCount {
            params: self.num_params(),
            dense_macs: dense,
            synaptic_ops: sparse,
            steps,
        })
    }
}

/// Output positions along one axis reached by an input at `pos`.
fn reach(pos: usize, k: usize, stride: usize, out: usize) -> u64 {
    let pad = k / 2;
    (0..k)
        .filter(|&kk| {
            let o = pos + pad;
            o >= kk && (o - kk) % stride == 0 && (o - kk) / stride < out
        })
        .count() as u64
}

/// Accumulates per output channel caused by the non-zero entries of `x`.
fn fan_out(x: &Tensor, k: usize, stride: usize, out: (usize, usize)) -> u64 {
    let (c, h, w) = x.chw();
    let mut total = 0;
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                if x.data[(ch * h + y) * w + xx] != 0.0 {
                    total += reach(y, k, stride, out.0) * reach(xx, k, stride, out.1);
                }
            }
        }
    }
    total
}

fn up_nearest(x: &Tensor, size: (usize, usize)) -> Tensor {
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let u = tape.up_nearest(v, size);
    tape.value(u).clone()
}

fn max_pool(x: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let u = tape.max_pool(v);
    tape.value(u).clone()
}
