//! Synthetic underwater event camera with analytic ground-truth flow.
//!
//! A procedural intensity pattern is advected by the stationary velocity
//! field `v + phi (x - c)`, attenuated by `exp(-alpha z)`, and sampled at
//! pixel centers. Each pixel integrates its log intensity on a fine time
//! grid and fires whenever the change since its last event reaches the
//! contrast threshold.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{Event, EventStream, Polarity, SensorSize};
use crate::flow::PixelFlow;
use crate::grid::Grid;

/// Intensity never drops below this, so the log is always defined.
pub const INTENSITY_FLOOR: f64 = 0.05;
/// Minimum number of integration steps over the scene duration.
pub const MIN_STEPS: usize = 2000;
/// Largest allowed integration step in ms.
pub const MAX_STEP_MS: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Pattern {
    /// Straight edge; the bright side lies along the normal at
    /// `orientation_deg` (0 = bright towards +x).
    StepEdge { orientation_deg: f64 },
    /// Sinusoidal grating varying along `orientation_deg`.
    BarGrating { period: f64, orientation_deg: f64 },
    /// Bright disk on a dark background.
    Disk { radius: f64 },
    /// Bright dots on a dark background, one per `spacing`-sized lattice
    /// cell at a seeded jittered position.
    Dots { spacing: f64, radius: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub pattern: Pattern,
    /// Pattern anchor at t = 0 (edge point, grating phase origin, disk center).
    pub origin: [f64; 2],
    /// px/ms
    pub velocity: [f64; 2],
    /// Radial expansion rate in 1/ms about `center`.
    pub divergence: f64,
    /// Expansion center; the sensor center when absent.
    pub center: Option<[f64; 2]>,
    /// Attenuation coefficient, 1/m.
    pub attenuation: f64,
    /// Depth, m.
    pub depth: f64,
    /// Log-intensity contrast threshold.
    pub contrast_threshold: f64,
    /// Spurious events per pixel per second.
    pub noise_rate: f64,
    pub duration_ms: f64,
    pub sensor: SensorSize,
    /// Dark and bright pattern intensities.
    pub low: f64,
    pub high: f64,
    /// Width of the intensity ramp across an edge, px.
    pub edge_width: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            pattern: Pattern::Disk { radius: 14.0 },
            origin: [30.18, 37.5],
            velocity: [1.732, 1.0],
            divergence: 0.0,
            center: None,
            attenuation: 0.0,
            depth: 0.0,
            contrast_threshold: 0.5,
            noise_rate: 0.0,
            duration_ms: 20.0,
            sensor: SensorSize::new(96, 96),
            low: 0.2,
            high: 1.0,
            edge_width: 5.0,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::invalid(format!("invalid scene: {msg}")));
        if !(self.contrast_threshold > 0.0) {
            return bad("contrast_threshold must be > 0");
        }
        if !(self.attenuation >= 0.0) || !(self.depth >= 0.0) {
            return bad("attenuation and depth must be >= 0");
        }
        if !(self.duration_ms > 0.0) {
            return bad("duration_ms must be > 0");
        }
        if !(self.noise_rate >= 0.0) {
            return bad("noise_rate must be >= 0");
        }
        if !(self.low > 0.0 && self.high > 0.0) || !(self.edge_width > 0.0) {
            return bad("intensities and edge_width must be > 0");
        }
        if self.sensor.width == 0 || self.sensor.height == 0 {
            return bad("sensor must be non-empty");
        }
        match self.pattern {
            Pattern::BarGrating { period, .. } if !(period > 0.0) => bad("grating period must be > 0"),
            Pattern::Disk { radius } if !(radius > 0.0) => bad("disk radius must be > 0"),
            Pattern::Dots { spacing, radius } if !(radius > 0.0 && spacing > 2.0 * radius) => {
                bad("dots need 0 < 2 radius < spacing")
            }
            _ => Ok(()),
        }
    }

    pub fn expansion_center(&self) -> [f64; 2] {
        self.center.unwrap_or([
            (self.sensor.width as f64 - 1.0) / 2.0,
            (self.sensor.height as f64 - 1.0) / 2.0,
        ])
    }

    /// Integration step count over the whole duration.
    pub fn steps(&self) -> usize {
        MIN_STEPS.max((self.duration_ms / MAX_STEP_MS).ceil() as usize)
    }

    /// Pattern intensity at pattern coordinates (before attenuation).
    fn base_intensity(&self, p: [f64; 2]) -> f64 {
        let ramp = |xi: f64| (xi / self.edge_width + 0.5).clamp(0.0, 1.0);
        let along = |deg: f64| {
            let a = deg.to_radians();
            (p[0] - self.origin[0]) * a.cos() + (p[1] - self.origin[1]) * a.sin()
        };
        let level = match self.pattern {
            Pattern::StepEdge { orientation_deg } => ramp(along(orientation_deg)),
            Pattern::BarGrating { period, orientation_deg } => {
                0.5 + 0.5 * (std::f64::consts::TAU * along(orientation_deg) / period).sin()
            }
            Pattern::Disk { radius } => {
                let r = ((p[0] - self.origin[0]).powi(2) + (p[1] - self.origin[1]).powi(2)).sqrt();
                ramp(radius - r)
            }
            Pattern::Dots { spacing, radius } => {
                let q = [(p[0] - self.origin[0]) / spacing, (p[1] - self.origin[1]) / spacing];
                let (ci, cj) = (q[0].floor() as i64, q[1].floor() as i64);
                let mut nearest = f64::INFINITY;
                for j in cj - 1..=cj + 1 {
                    for i in ci - 1..=ci + 1 {
                        let d = self.dot_center(i, j, spacing, radius);
                        let r = (q[0] - d[0]).hypot(q[1] - d[1]) * spacing;
                        nearest = nearest.min(r);
                    }
                }
                ramp(radius - nearest)
            }
        };
        (self.low + (self.high - self.low) * level).max(INTENSITY_FLOOR)
    }

    /// Dot center of lattice cell `(i, j)` in lattice units.
    fn dot_center(&self, i: i64, j: i64, spacing: f64, radius: f64) -> [f64; 2] {
        let h = splitmix(self.seed ^ splitmix((i as u64).wrapping_mul(0x9E37_79B9) ^ (j as u64).rotate_left(32)));
        let unit = |bits: u64| (bits >> 11) as f64 / (1u64 << 53) as f64;
        let margin = (radius + self.edge_width) / spacing;
        let span = (1.0 - 2.0 * margin).max(0.0);
        [
            i as f64 + margin + span * unit(h),
            j as f64 + margin + span * unit(splitmix(h)),
        ]
    }

    /// Where the material now at `x` sat at t = 0 under the flow
    /// `dx/dt = v + phi (x - c)`.
    fn source(&self, x: [f64; 2], t: f64) -> [f64; 2] {
        let c = self.expansion_center();
        let k = (-self.divergence * t).exp_m1();
        let g = if self.divergence != 0.0 { k / self.divergence } else { -t };
        [
            x[0] + (x[0] - c[0]) * k + self.velocity[0] * g,
            x[1] + (x[1] - c[1]) * k + self.velocity[1] * g,
        ]
    }

    fn attenuation_factor(&self) -> f64 {
        (-self.attenuation * self.depth).exp()
    }

    fn intensity_at(&self, x: [f64; 2], t: f64) -> f64 {
        self.base_intensity(self.source(x, t)) * self.attenuation_factor()
    }
}

/// Intensity image at time `t_ms`.
pub fn render_intensity(scene: &SceneSpec, t_ms: f64) -> Result<Grid<f64>> {
    scene.validate()?;
    if !(0.0..=scene.duration_ms).contains(&t_ms) {
        return Err(Error::invalid(format!(
            "time {t_ms} ms outside scene duration [0, {}]",
            scene.duration_ms
        )));
    }
    let (w, h) = (scene.sensor.width as usize, scene.sensor.height as usize);
    let data = (0..w * h)
        .map(|i| scene.intensity_at([(i % w) as f64, (i / w) as f64], t_ms))
        .collect();
    Ok(Grid::from_vec(w, h, data))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn to_us(t_ms: f64) -> u64 {
    (t_ms * 1000.0).round().max(0.0) as u64
}

/// Threshold-crossing events of one pixel, in time order.
fn pixel_events(scene: &SceneSpec, x: u16, y: u16, steps: usize, out: &mut Vec<Event>) {
    let pos = [x as f64, y as f64];
    let c = scene.contrast_threshold;
    let dt = scene.duration_ms / steps as f64;
    let mut l_prev = scene.intensity_at(pos, 0.0).ln();
    let mut reference = l_prev;
    for k in 1..=steps {
        let t = k as f64 * dt;
        let l = scene.intensity_at(pos, t).ln();
        if l != l_prev {
            let t_prev = t - dt;
            // Interpolate the crossing time inside the step.
            let crossing = |level: f64| t_prev + (level - l_prev) / (l - l_prev) * dt;
            while l - reference >= c {
                reference += c;
                out.push(Event::new(x, y, to_us(crossing(reference)), Polarity::Positive));
            }
            while reference - l >= c {
                reference -= c;
                out.push(Event::new(x, y, to_us(crossing(reference)), Polarity::Negative));
            }
        }
        l_prev = l;
    }
}

fn sort_key(e: &Event) -> (u64, u16, u16, Polarity) {
    (e.t, e.y, e.x, e.p)
}

/// Simulates the event stream of a scene, noise included.
pub fn generate_events(scene: &SceneSpec) -> Result<EventStream> {
    scene.validate()?;
    let (w, h) = (scene.sensor.width, scene.sensor.height);
    let steps = scene.steps();
    let mut events: Vec<Event> = (0..h)
        .into_par_iter()
        .flat_map_iter(|y| {
            let mut row = Vec::new();
            for x in 0..w {
                pixel_events(scene, x, y, steps, &mut row);
            }
            row
        })
        .collect();

    if scene.noise_rate > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(scene.seed);
        let expected = scene.noise_rate * scene.sensor.pixels() as f64 * scene.duration_ms * 1e-3;
        let n = Poisson::new(expected)
            .map_err(|e| Error::invalid(format!("noise rate: {e}")))?
            .sample(&mut rng) as usize;
        let max_t = to_us(scene.duration_ms);
        events.extend((0..n).map(|_| {
            let p = if rng.gen_bool(0.5) {
                Polarity::Positive
            } else {
                Polarity::Negative
            };
            Event::new(rng.gen_range(0..w), rng.gen_range(0..h), rng.gen_range(0..=max_t), p)
        }));
    }

    events.sort_unstable_by_key(sort_key);
    EventStream::new(events, scene.sensor)
}

pub type GroundTruthFlow = PixelFlow;

/// Analytic flow over `[t_a, t_b]` (ms), in px per window: the velocity
/// field `v + phi (x - c)` times the window length.
pub fn ground_truth_flow(scene: &SceneSpec, window: (f64, f64)) -> Result<GroundTruthFlow> {
    let (t_a, t_b) = window;
    if !(t_a < t_b) {
        return Err(Error::invalid(format!("empty window [{t_a}, {t_b}]")));
    }
    let (w, h) = (scene.sensor.width as usize, scene.sensor.height as usize);
    let c = scene.expansion_center();
    let span = t_b - t_a;
    let data = (0..w * h)
        .map(|i| {
            let (x, y) = ((i % w) as f64, (i / w) as f64);
            [
                (scene.velocity[0] + scene.divergence * (x - c[0])) * span,
                (scene.velocity[1] + scene.divergence * (y - c[1])) * span,
            ]
        })
        .collect();
    Ok(PixelFlow {
        flow: Grid::from_vec(w, h, data),
        valid: Grid::filled(w, h, true),
    })
}
