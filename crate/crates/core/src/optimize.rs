//! Model-free contrast-maximization solver.
//!
//! Descent runs in displacement units: a parameter vector is rescaled so
//! that one unit moves the outermost events by roughly one pixel over the
//! partition. Steps follow the normalized negative gradient and are halved
//! whenever the loss would increase.
//!
//! The loss is only piecewise smooth: it jumps whenever a warped event
//! crosses a pixel boundary, and between jumps its slope need not point at
//! the optimum. Descent is therefore seeded by a coarse search over a grid
//! of candidate displacements.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{Event, EventPartition, EventStream, SensorSize};
use crate::flow::PixelFlow;
use crate::loss::{cm_loss_and_dropped, total_loss_and_gradient, LossBreakdown, LossConfig};
use crate::warp::{compute_centroid, Centroid, MotionField, Theta};

/// Default partition length for the solver, in events.
pub const SOLVER_PARTITION_LEN: usize = 2000;
/// Patches with fewer events are left at zero motion and masked invalid.
pub const MIN_PATCH_EVENTS: usize = 20;

/// Candidates carried from one search stage into the next.
const SEARCH_KEEP: usize = 4;
/// Fourfold refinements after the coarse search grid.
const SEARCH_LEVELS: usize = 2;

/// Descent stops once the step falls below this many displacement units.
const MIN_STEP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub max_iters: usize,
    /// Initial step, in px of displacement over the partition.
    pub step: f64,
    /// Step factor applied on every rejected step.
    pub decay: f64,
    pub tol: f64,
    /// Starting point `[vx, vy, phi]`.
    pub init: [f64; 3],
    /// Patch edge length, px.
    pub patch: usize,
    pub min_events: usize,
    /// Partition length in events.
    pub events_per_partition: usize,
    /// When false, phi is pinned to zero.
    pub fit_phi: bool,
    /// Joint pass over the assembled patch grid with smoothness.
    pub refine: bool,
    /// Half-width of the seed search box in px of displacement; 0 disables it.
    pub search_radius: f64,
    pub search_step: f64,
    /// Search half-width for patches around the partition-wide estimate.
    pub patch_search_radius: f64,
    /// Initial descent step for patches, px.
    pub patch_step: f64,
    /// Largest extra fraction of event mass, beyond that of the starting
    /// point, a candidate may warp off the sensor.
    pub max_dropped: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iters: 250,
            step: 0.5,
            decay: 0.5,
            tol: 1e-8,
            init: [0.0; 3],
            patch: 32,
            min_events: MIN_PATCH_EVENTS,
            events_per_partition: SOLVER_PARTITION_LEN,
            fit_phi: true,
            refine: true,
            search_radius: 16.0,
            search_step: 1.0,
            patch_search_radius: 0.0,
            patch_step: 0.1,
            max_dropped: 0.005,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters < 1 {
            return Err(Error::invalid("max_iters must be >= 1"));
        }
        if !(self.step > 0.0) || !(self.patch_step > 0.0) {
            return Err(Error::invalid("step and patch_step must be > 0"));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::invalid("decay must lie in (0, 1]"));
        }
        if !(self.tol >= 0.0) {
            return Err(Error::invalid("tol must be >= 0"));
        }
        if self.patch == 0 || self.events_per_partition == 0 {
            return Err(Error::invalid("patch and events_per_partition must be >= 1"));
        }
        if !(self.max_dropped >= 0.0) {
            return Err(Error::invalid("max_dropped must be >= 0"));
        }
        if !(self.search_radius >= 0.0) || !(self.patch_search_radius >= 0.0) || !(self.search_step > 0.0) {
            return Err(Error::invalid("search_radius must be >= 0 and search_step > 0"));
        }
        if !self.init.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("init must be finite"));
        }
        Ok(())
    }

    fn init_theta(&self) -> Theta {
        let mut th = Theta::from_array(self.init);
        if !self.fit_phi {
            th.phi = 0.0;
        }
        th
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveResult {
    pub theta: Theta,
    pub loss: LossBreakdown,
    pub iterations: usize,
    /// Best total loss after each iteration, starting with the initial value.
    pub trace: Vec<f64>,
}

/// Conversion between motion parameters and displacement units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverScale {
    pub duration_ms: f64,
    pub radius: f64,
}

impl SolverScale {
    pub fn of(partition: &EventPartition) -> Result<Self> {
        let c = compute_centroid(partition.events())?;
        Ok(Self {
            duration_ms: partition.duration_ms().max(1e-3),
            radius: rms_radius(partition.events(), c).max(1.0),
        })
    }

    fn factors(&self) -> [f64; 3] {
        [self.duration_ms, self.duration_ms, self.duration_ms * self.radius]
    }

    pub fn to_units(&self, th: Theta) -> [f64; 3] {
        let f = self.factors();
        let a = th.to_array();
        [a[0] * f[0], a[1] * f[1], a[2] * f[2]]
    }

    pub fn from_units(&self, u: [f64; 3]) -> Theta {
        let f = self.factors();
        Theta::from_array([u[0] / f[0], u[1] / f[1], u[2] / f[2]])
    }
}

fn rms_radius(events: &[Event], c: Centroid) -> f64 {
    let n = events.len().max(1) as f64;
    let ss: f64 = events
        .iter()
        .map(|e| (e.x as f64 - c.x).powi(2) + (e.y as f64 - c.y).powi(2))
        .sum();
    (ss / n).sqrt()
}

#[derive(Debug)]
struct Descent {
    best: Vec<f64>,
    loss: LossBreakdown,
    iterations: usize,
    trace: Vec<f64>,
}

/// Normalized gradient descent with step halving. `eval` maps a point in
/// displacement units to the loss and its gradient in the same units;
/// coordinates with `frozen[i]` never move and points failing `admissible`
/// count as rejected steps.
fn descend(
    x0: Vec<f64>,
    frozen: &[bool],
    cfg: &SolverConfig,
    admissible: impl Fn(&[f64]) -> bool,
    mut eval: impl FnMut(&[f64]) -> Result<(LossBreakdown, Vec<f64>)>,
) -> Result<Descent> {
    let mut trace = Vec::with_capacity(cfg.max_iters + 1);
    let (mut loss, mut grad) = eval(&x0).map_err(|e| diverged(e, &trace))?;
    let mut x = x0;
    trace.push(loss.total);
    let mut step = cfg.step;
    let mut iterations = 0;
    while iterations < cfg.max_iters && step >= MIN_STEP {
        iterations += 1;
        for (g, &f) in grad.iter_mut().zip(frozen) {
            if f {
                *g = 0.0;
            }
        }
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm == 0.0 {
            trace.push(loss.total);
            break;
        }
        let cand: Vec<f64> = x.iter().zip(&grad).map(|(xi, gi)| xi - step * gi / norm).collect();
        let accepted = if admissible(&cand) {
            let (cand_loss, cand_grad) = eval(&cand).map_err(|e| diverged(e, &trace))?;
            (cand_loss.total < loss.total).then_some((cand_loss, cand_grad))
        } else {
            None
        };
        if let Some((cand_loss, cand_grad)) = accepted {
            let improvement = loss.total - cand_loss.total;
            x = cand;
            loss = cand_loss;
            grad = cand_grad;
            trace.push(loss.total);
            if improvement < cfg.tol {
                break;
            }
        } else {
            step *= cfg.decay;
            trace.push(loss.total);
            if cfg.decay == 1.0 {
                break;
            }
        }
    }
    Ok(Descent {
        best: x,
        loss,
        iterations,
        trace,
    })
}

fn diverged(err: Error, trace: &[f64]) -> Error {
    if err.is_numerical() {
        let tail: Vec<String> = trace.iter().rev().take(5).rev().map(|v| format!("{v:.6e}")).collect();
        Error::Diverged(format!("{err} after {} iterations; last losses [{}]", trace.len().saturating_sub(1), tail.join(", ")))
    } else {
        err
    }
}

fn grid_axis(center: f64, radius: f64, step: f64) -> Vec<f64> {
    let n = (radius / step).round() as i64;
    (-n..=n).map(|i| center + i as f64 * step).collect()
}

fn translation_grid(center: [f64; 3], radius: f64, step: f64) -> Vec<[f64; 3]> {
    let xs = grid_axis(center[0], radius, step);
    grid_axis(center[1], radius, step)
        .into_iter()
        .flat_map(|uy| xs.iter().map(move |&ux| [ux, uy, center[2]]))
        .collect()
}

fn phi_grid(center: [f64; 3], radius: f64, step: f64) -> Vec<[f64; 3]> {
    grid_axis(center[2], radius, step)
        .into_iter()
        .map(|up| [center[0], center[1], up])
        .collect()
}

/// The `SEARCH_KEEP` lowest-loss distinct candidates, ties in input order.
fn shortlist(mut cands: Vec<[f64; 3]>, loss: &(impl Fn([f64; 3]) -> f64 + Sync)) -> Vec<(f64, [f64; 3])> {
    let mut seen = std::collections::HashSet::new();
    cands.retain(|c| seen.insert(c.map(f64::to_bits)));
    let mut scored: Vec<(f64, [f64; 3])> = cands.into_par_iter().map(|c| (loss(c), c)).collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));
    scored.truncate(SEARCH_KEEP);
    scored
}

/// Grid search that narrows around the best few candidates, refining the
/// spacing fourfold at each of `levels` extra stages.
fn narrowing(
    seeds: Vec<[f64; 3]>,
    radius: f64,
    step: f64,
    levels: usize,
    grid: impl Fn([f64; 3], f64, f64) -> Vec<[f64; 3]>,
    loss: &(impl Fn([f64; 3]) -> f64 + Sync),
) -> Vec<(f64, [f64; 3])> {
    let mut pool = shortlist(seeds.iter().flat_map(|&c| grid(c, radius, step)).collect(), loss);
    let mut spacing = step;
    for _ in 0..levels {
        let finer = spacing / 4.0;
        pool = shortlist(pool.iter().flat_map(|&(_, c)| grid(c, spacing, finer)).collect(), loss);
        spacing = finer;
    }
    pool
}

/// Coarse-to-fine search in displacement units: translation first, then
/// the scaling rate, then the translation again at the finest spacing. The
/// start point wins all ties.
fn seed_search(start: [f64; 3], cfg: &SolverConfig, loss: impl Fn([f64; 3]) -> f64 + Sync) -> [f64; 3] {
    if cfg.search_radius == 0.0 {
        return start;
    }
    let (r, h) = (cfg.search_radius, cfg.search_step);
    let mut best = (loss(start), start);
    let take = |best: &mut (f64, [f64; 3]), pool: &[(f64, [f64; 3])]| {
        if let Some(&top) = pool.first() {
            if top.0 < best.0 {
                *best = top;
            }
        }
    };
    let pool = narrowing(vec![start], r, h, SEARCH_LEVELS, translation_grid, &loss);
    take(&mut best, &pool);
    if cfg.fit_phi {
        let pool = narrowing(vec![best.1], r, h, SEARCH_LEVELS, phi_grid, &loss);
        take(&mut best, &pool);
        let fine = h / 4f64.powi(SEARCH_LEVELS as i32);
        let pool = narrowing(vec![best.1], 4.0 * fine, fine, 0, translation_grid, &loss);
        take(&mut best, &pool);
    }
    best.1
}

/// Fits one `theta` to all events of `partition`.
pub fn solve_patch(partition: &EventPartition, sensor: SensorSize, cfg: &SolverConfig, loss_cfg: &LossConfig) -> Result<SolveResult> {
    cfg.validate()?;
    loss_cfg.validate()?;
    let scale = SolverScale::of(partition)?;
    let f = scale.factors();
    let frozen = [false, false, !cfg.fit_phi];
    let start = scale.to_units(cfg.init_theta());
    let probe = |u: [f64; 3]| cm_loss_and_dropped(partition, &MotionField::uniform(sensor, scale.from_units(u)), loss_cfg);
    let max_dropped = probe(start).1 + cfg.max_dropped;
    let guarded = |u: [f64; 3]| match probe(u) {
        (l, dropped) if dropped <= max_dropped && l.is_finite() => l,
        _ => f64::INFINITY,
    };
    let x0 = seed_search(start, cfg, guarded);
    let admissible = |u: &[f64]| probe([u[0], u[1], u[2]]).1 <= max_dropped;
    let d = descend(x0.to_vec(), &frozen, cfg, admissible, |u| {
        let th = scale.from_units([u[0], u[1], u[2]]);
        let field = MotionField::uniform(sensor, th);
        let (loss, g) = total_loss_and_gradient(partition, &field, loss_cfg)?;
        let g = g.cells()[0].to_array();
        Ok((loss, vec![g[0] / f[0], g[1] / f[1], g[2] / f[2]]))
    })?;
    Ok(SolveResult {
        theta: scale.from_units([d.best[0], d.best[1], d.best[2]]),
        loss: d.loss,
        iterations: d.iterations,
        trace: d.trace,
    })
}

/// Result for one patch, expressed about the patch's own event centroid.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchEstimate {
    pub index: usize,
    pub events: usize,
    pub valid: bool,
    pub centroid: Option<Centroid>,
    pub result: Option<SolveResult>,
}

impl PatchEstimate {
    /// Patch motion re-expressed about `c`.
    pub fn theta_about(&self, c: Centroid) -> Theta {
        match (&self.result, self.centroid) {
            (Some(r), Some(pc)) if self.valid => {
                let th = r.theta;
                Theta::new(th.vx + th.phi * (c.x - pc.x), th.vy + th.phi * (c.y - pc.y), th.phi)
            }
            _ => Theta::ZERO,
        }
    }
}

fn patch_partitions(partition: &EventPartition, grid: &MotionField) -> Vec<EventPartition> {
    let mut buckets: Vec<Vec<Event>> = vec![Vec::new(); grid.len()];
    for e in partition.events() {
        buckets[grid.cell_index(e.x, e.y)].push(*e);
    }
    buckets
        .into_iter()
        .map(|b| EventPartition::new(b).expect("subsequence of a sorted partition is sorted"))
        .collect()
}

/// Solves every patch independently, visiting them in `order`. Each patch
/// starts from `seed` (expressed about the partition centroid) and searches
/// within `patch_search_radius` of it. The output is indexed by patch
/// regardless of the visiting order.
pub fn patch_estimates(
    partition: &EventPartition,
    sensor: SensorSize,
    seed: Theta,
    cfg: &SolverConfig,
    loss_cfg: &LossConfig,
    order: &[usize],
) -> Result<Vec<PatchEstimate>> {
    let centroid = compute_centroid(partition.events())?;
    let grid = MotionField::patches(sensor, cfg.patch);
    let parts = patch_partitions(partition, &grid);
    if order.len() != parts.len() || {
        let mut seen = vec![false; parts.len()];
        order.iter().any(|&i| i >= seen.len() || std::mem::replace(&mut seen[i], true))
    } {
        return Err(Error::invalid("patch order must be a permutation of the patch indices"));
    }
    let solved: Vec<(usize, Result<PatchEstimate>)> = order
        .par_iter()
        .map(|&index| {
            let part = &parts[index];
            let est = if part.len() < cfg.min_events {
                Ok(PatchEstimate {
                    index,
                    events: part.len(),
                    valid: false,
                    centroid: None,
                    result: None,
                })
            } else {
                let pc = compute_centroid(part.events()).expect("patch has events");
                let init = Theta::new(
                    seed.vx + seed.phi * (pc.x - centroid.x),
                    seed.vy + seed.phi * (pc.y - centroid.y),
                    seed.phi,
                );
                let patch_cfg = SolverConfig {
                    init: init.to_array(),
                    search_radius: cfg.patch_search_radius,
                    step: cfg.patch_step,
                    ..cfg.clone()
                };
                solve_patch(part, sensor, &patch_cfg, loss_cfg)
                    .map(|r| PatchEstimate {
                        index,
                        events: part.len(),
                        valid: true,
                        centroid: Some(pc),
                        result: Some(r),
                    })
                    .map_err(|e| tag_patch(e, index))
            };
            (index, est)
        })
        .collect();
    let mut out: Vec<Option<PatchEstimate>> = vec![None; parts.len()];
    for (index, est) in solved {
        out[index] = Some(est?);
    }
    Ok(out.into_iter().map(|e| e.expect("every patch visited")).collect())
}

fn tag_patch(err: Error, index: usize) -> Error {
    match err {
        Error::Diverged(msg) => Error::Diverged(format!("patch {index}: {msg}")),
        Error::NonFinite { term } => Error::NonFinite {
            term: format!("{term} (patch {index})"),
        },
        other => other,
    }
}

/// Dense estimate for one partition.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseEstimate {
    /// Patch grid, each cell expressed about `centroid`.
    pub field: MotionField,
    pub valid: Vec<bool>,
    pub centroid: Centroid,
    pub loss: LossBreakdown,
    pub t0: u64,
    pub t_last: u64,
    /// Single motion fitted to the whole partition; seeds every patch.
    pub global: SolveResult,
    pub patches: Vec<PatchEstimate>,
}

impl DenseEstimate {
    pub fn duration_ms(&self) -> f64 {
        (self.t_last - self.t0) as f64 * 1e-3
    }

    /// Per-pixel displacement over the partition window.
    pub fn pixel_flow(&self) -> PixelFlow {
        PixelFlow::from_field(&self.field, self.centroid, self.duration_ms(), Some(&self.valid))
    }
}

/// Patch solve, assembly and optional joint refinement for one partition.
pub fn solve_partition(
    partition: &EventPartition,
    sensor: SensorSize,
    cfg: &SolverConfig,
    loss_cfg: &LossConfig,
) -> Result<DenseEstimate> {
    cfg.validate()?;
    loss_cfg.validate()?;
    let centroid = compute_centroid(partition.events())?;
    let global = solve_patch(partition, sensor, cfg, loss_cfg)?;
    let order: Vec<usize> = (0..MotionField::patches(sensor, cfg.patch).len()).collect();
    let patches = patch_estimates(partition, sensor, global.theta, cfg, loss_cfg, &order)?;
    let valid: Vec<bool> = patches.iter().map(|p| p.valid).collect();
    let grid = MotionField::patches(sensor, cfg.patch);
    let mut field = grid.with_cells(patches.iter().map(|p| p.theta_about(centroid)).collect());

    let loss = if cfg.refine && valid.iter().any(|&v| v) {
        let scale = SolverScale::of(partition)?;
        let f = scale.factors();
        let x0: Vec<f64> = field.cells().iter().flat_map(|&th| scale.to_units(th)).collect();
        let frozen: Vec<bool> = valid
            .iter()
            .flat_map(|&ok| [!ok, !ok, !ok || !cfg.fit_phi])
            .collect();
        let to_field = |u: &[f64]| {
            grid.with_cells(u.chunks(3).map(|c| scale.from_units([c[0], c[1], c[2]])).collect())
        };
        let max_dropped = cm_loss_and_dropped(partition, &field, loss_cfg).1 + cfg.max_dropped;
        let admissible = |u: &[f64]| cm_loss_and_dropped(partition, &to_field(u), loss_cfg).1 <= max_dropped;
        let d = descend(x0, &frozen, cfg, admissible, |u| {
            let (loss, g) = total_loss_and_gradient(partition, &to_field(u), loss_cfg)?;
            let g = g.cells().iter().flat_map(|t| {
                let a = t.to_array();
                [a[0] / f[0], a[1] / f[1], a[2] / f[2]]
            });
            Ok((loss, g.collect()))
        })?;
        field = to_field(&d.best);
        d.loss
    } else {
        crate::loss::total_loss(partition, &field, loss_cfg)?
    };

    Ok(DenseEstimate {
        field,
        valid,
        centroid,
        loss,
        t0: partition.t0(),
        t_last: partition.t_last(),
        global,
        patches,
    })
}

/// Splits `stream` into partitions and solves each. A stream shorter than
/// one partition yields no estimates.
pub fn solve_dense(stream: &EventStream, cfg: &SolverConfig, loss_cfg: &LossConfig) -> Result<Vec<DenseEstimate>> {
    cfg.validate()?;
    let parts = crate::events::partition_by_count(stream.events(), cfg.events_per_partition)?;
    parts
        .partitions
        .iter()
        .enumerate()
        .map(|(i, p)| {
            solve_partition(p, stream.sensor(), cfg, loss_cfg).map_err(|e| match e {
                Error::Diverged(msg) => Error::Diverged(format!("partition {i}: {msg}")),
                other => other,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::Polarity;

    #[test]
    fn config_validation() {
        assert!(SolverConfig::default().validate().is_ok());
        for bad in [
            SolverConfig { max_iters: 0, ..Default::default() },
            SolverConfig { step: 0.0, ..Default::default() },
            SolverConfig { decay: 0.0, ..Default::default() },
            SolverConfig { decay: 1.5, ..Default::default() },
            SolverConfig { tol: -1.0, ..Default::default() },
            SolverConfig { patch: 0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn scale_round_trip() {
        let scale = SolverScale { duration_ms: 2.0, radius: 5.0 };
        let th = Theta::new(1.5, -0.25, 0.03);
        let back = scale.from_units(scale.to_units(th));
        for (a, b) in th.to_array().iter().zip(back.to_array()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(scale.to_units(th), [3.0, -0.5, 0.3]);
    }

    #[test]
    fn theta_about_shifts_reference() {
        let est = PatchEstimate {
            index: 0,
            events: 30,
            valid: true,
            centroid: Some(Centroid { x: 10.0, y: 10.0 }),
            result: Some(SolveResult {
                theta: Theta::new(1.0, 0.0, 0.1),
                loss: LossBreakdown::default(),
                iterations: 0,
                trace: vec![],
            }),
        };
        let th = est.theta_about(Centroid { x: 20.0, y: 5.0 });
        assert_eq!(th, Theta::new(2.0, -0.5, 0.1));
        let invalid = PatchEstimate { valid: false, ..est };
        assert_eq!(invalid.theta_about(Centroid { x: 0.0, y: 0.0 }), Theta::ZERO);
    }

    #[test]
    fn bad_order_is_rejected() {
        let p = EventPartition::new(vec![Event::new(1, 1, 0, Polarity::Positive)]).unwrap();
        let sensor = SensorSize::new(64, 64);
        let cfg = SolverConfig::default();
        let lc = LossConfig::default();
        assert!(patch_estimates(&p, sensor, Theta::ZERO, &cfg, &lc, &[0, 1, 2]).is_err());
        assert!(patch_estimates(&p, sensor, Theta::ZERO, &cfg, &lc, &[0, 0, 1, 2]).is_err());
        assert!(patch_estimates(&p, sensor, Theta::ZERO, &cfg, &lc, &[3, 2, 1, 0]).is_ok());
    }

    #[test]
    fn sparse_patches_are_masked() {
        let events: Vec<Event> = (0..5).map(|i| Event::new(3, 3, i * 10, Polarity::Positive)).collect();
        let p = EventPartition::new(events).unwrap();
        let est = solve_partition(&p, SensorSize::new(64, 64), &SolverConfig::default(), &LossConfig::default()).unwrap();
        assert!(est.valid.iter().all(|&v| !v));
        assert!(est.field.cells().iter().all(|&t| t == Theta::ZERO));
        assert!(est.pixel_flow().valid.iter().all(|&v| !v));
    }

    #[test]
    fn short_stream_yields_nothing() {
        let events: Vec<Event> = (0..10).map(|i| Event::new(3, 3, i, Polarity::Negative)).collect();
        let stream = EventStream::new(events, SensorSize::new(8, 8)).unwrap();
        let cfg = SolverConfig { events_per_partition: 100, ..Default::default() };
        assert!(solve_dense(&stream, &cfg, &LossConfig::default()).unwrap().is_empty());
    }

    fn breakdown(total: f64) -> LossBreakdown {
        LossBreakdown {
            cm_forward: total,
            cm_backward: 0.0,
            smoothness: 0.0,
            total,
        }
    }

    #[test]
    fn descent_halves_until_converged() {
        let cfg = SolverConfig::default();
        let d = descend(vec![3.0], &[false], &cfg, |_| true, |x| Ok((breakdown(x[0] * x[0]), vec![2.0 * x[0]]))).unwrap();
        assert!(d.best[0].abs() < 1e-5, "{:?}", d.best);
        assert!(d.trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn frozen_and_inadmissible_moves_are_refused() {
        let cfg = SolverConfig::default();
        let eval = |x: &[f64]| Ok((breakdown(x[0] * x[0] + x[1] * x[1]), vec![2.0 * x[0], 2.0 * x[1]]));
        let d = descend(vec![2.0, 2.0], &[false, true], &cfg, |_| true, eval).unwrap();
        assert_eq!(d.best[1], 2.0);
        let d = descend(vec![2.0, 2.0], &[false, false], &cfg, |x| x[0] >= 1.0, eval).unwrap();
        assert!(d.best[0] >= 1.0);
    }

    #[test]
    fn non_finite_loss_reports_divergence_with_trace() {
        let cfg = SolverConfig::default();
        let err = descend(vec![1.0], &[false], &cfg, |_| true, |x| {
            if x[0] < 0.8 {
                Err(Error::NonFinite { term: "loss".into() })
            } else {
                Ok((breakdown(x[0]), vec![1.0]))
            }
        })
        .unwrap_err();
        match err {
            Error::Diverged(msg) => assert!(msg.contains("last losses [1.000000e0]"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
