use std::path::{Path, PathBuf};

use aqflow_core::flow::PixelFlow;
use aqflow_core::io::{decode_phi, encode_phi, read_events, write_events, EventFormat, FlowRaster};
use aqflow_core::loss::total_loss;
use aqflow_core::metrics::{aee_and_outliers, estimate_energy, event_mask, fwl, rsat, OpKind};
use aqflow_core::optimize::solve_partition;
use aqflow_core::synth::{generate_events, ground_truth_flow};
use aqflow_core::viz::{diverging_heatmap, flow_to_color, MaxMagnitude, RgbImage};
use aqflow_core::{compute_centroid, partition_by_count, EventPartition, EventStream, Grid, LossBreakdown, MotionField, Theta};
use aqflow_snn::checkpoint::{load_checkpoint, save_checkpoint};
use aqflow_snn::train::{train as train_network, training_partitions};
use aqflow_snn::Network;
use log::{info, warn};
use serde::Serialize;

use crate::{CliError, Format, Method, RunConfig};

fn raster_name(i: usize) -> String {
    format!("flow_{i:04}.aqfl")
}

fn phi_name(i: usize) -> String {
    format!("phi_{i:04}.aqph")
}

fn load_events(path: &Path, cfg: &RunConfig) -> Result<EventStream, CliError> {
    if !path.is_file() {
        return Err(CliError::Usage(format!("no such event file: {}", path.display())));
    }
    Ok(read_events(path, cfg.scene.sensor)?)
}

/// Full partitions of `stream`; the tail is discarded with a log line.
fn partitions(stream: &EventStream, k: usize) -> Result<Vec<EventPartition>, CliError> {
    let split = partition_by_count(stream.events(), k)?;
    if split.partitions.is_empty() {
        return Err(CliError::Data(format!(
            "no complete partition: {} events, partition size {k}",
            stream.len()
        )));
    }
    if !split.remainder.is_empty() {
        info!("discarding {} trailing events that do not fill a partition", split.remainder.len());
    }
    Ok(split.partitions)
}

fn window_ms(p: &EventPartition) -> (f64, f64) {
    (p.t0() as f64 * 1e-3, p.t_last() as f64 * 1e-3)
}

pub fn synth(cfg: &RunConfig, out: &Path, format: Format) -> Result<(), CliError> {
    let stream = generate_events(&cfg.scene)?;
    let (name, fmt) = match format {
        Format::Text => ("events.txt", EventFormat::Text),
        Format::Binary => ("events.aqev", EventFormat::Binary),
    };
    write_events(&stream, out.join(name), fmt)?;
    let split = partition_by_count(stream.events(), cfg.solver.events_per_partition)?;
    let gt_dir = out.join("gt");
    std::fs::create_dir_all(&gt_dir)?;
    for (i, p) in split.partitions.iter().enumerate() {
        ground_truth_flow(&cfg.scene, window_ms(p))?.to_raster().write(gt_dir.join(raster_name(i)))?;
    }
    info!(
        "{} events, {} partitions of {}, {} trailing events",
        stream.len(),
        split.partitions.len(),
        cfg.solver.events_per_partition,
        split.remainder.len()
    );
    Ok(())
}

#[derive(Serialize)]
struct EstimateRow {
    index: usize,
    t0_us: u64,
    t_last_us: u64,
    cm_fwd: f64,
    cm_bwd: f64,
    smooth: f64,
    total: f64,
}

fn phi_grid(field: &MotionField) -> Grid<f64> {
    let s = field.sensor();
    let (w, h) = (s.width as usize, s.height as usize);
    let data = (0..h).flat_map(|y| (0..w).map(move |x| (x, y))).map(|(x, y)| field.at(x as u16, y as u16).phi).collect();
    Grid::from_vec(w, h, data)
}

pub fn estimate(cfg: &RunConfig, out: &Path, events: &Path, method: Method, checkpoint: Option<&Path>) -> Result<(), CliError> {
    let stream = load_events(events, cfg)?;
    let parts = partitions(&stream, cfg.solver.events_per_partition)?;
    let sensor = stream.sensor();
    let mut results: Vec<(PixelFlow, MotionField, LossBreakdown)> = Vec::with_capacity(parts.len());
    match method {
        Method::Cm => {
            for (i, p) in parts.iter().enumerate() {
                let est = solve_partition(p, sensor, &cfg.solver, &cfg.loss)?;
                info!("partition {i}: loss {:.5}", est.loss.total);
                results.push((est.pixel_flow(), est.field.clone(), est.loss));
            }
        }
        Method::Snn => {
            let path = checkpoint.ok_or_else(|| CliError::Usage("--method snn needs --checkpoint".into()))?;
            let net = load_checkpoint(path)?;
            if net.sensor() != sensor {
                return Err(CliError::Data(format!(
                    "checkpoint expects a {}x{} sensor, events are {}x{}",
                    net.sensor().width,
                    net.sensor().height,
                    sensor.width,
                    sensor.height
                )));
            }
            let mut state = net.initial_state();
            let (fields, _) = net.run(&mut state, &parts)?;
            for (p, field) in parts.iter().zip(fields) {
                let flow = PixelFlow::from_field(&field, compute_centroid(p.events())?, p.duration_ms(), None);
                let loss = total_loss(p, &field, &cfg.loss)?;
                results.push((flow, field, loss));
            }
        }
    }
    let mut log = csv::Writer::from_path(out.join("estimate.csv"))?;
    for (i, ((flow, field, loss), p)) in results.iter().zip(&parts).enumerate() {
        flow.to_raster().write(out.join(raster_name(i)))?;
        std::fs::write(out.join(phi_name(i)), encode_phi(&phi_grid(field)))?;
        log.serialize(EstimateRow {
            index: i,
            t0_us: p.t0(),
            t_last_us: p.t_last(),
            cm_fwd: loss.cm_forward,
            cm_bwd: loss.cm_backward,
            smooth: loss.smoothness,
            total: loss.total,
        })?;
    }
    log.flush()?;
    info!("wrote {} flow rasters", results.len());
    Ok(())
}

pub fn train(cfg: &RunConfig, out: &Path, events: Option<&Path>) -> Result<(), CliError> {
    let stream = match events {
        Some(p) => load_events(p, cfg)?,
        None => generate_events(&cfg.scene)?,
    };
    let parts = training_partitions(&stream, &cfg.train)?;
    let sensor = parts.first().map_or(stream.sensor(), |_| match cfg.train.crop {
        Some(c) => aqflow_core::SensorSize::new(c.width, c.height),
        None => stream.sensor(),
    });
    let mut net = Network::new(cfg.network.clone(), sensor)?;
    info!("training {} parameters on {} partitions", net.num_params(), parts.len());
    let mut log = csv::Writer::from_path(out.join("train_log.csv"))?;
    let mut log_err = None;
    let result = train_network(&mut net, &parts, &cfg.train, &cfg.loss, |row| {
        if let Err(e) = log.serialize(row) {
            log_err.get_or_insert(e);
        }
        info!("update {}: loss {:.5}, firing {:.2}%", row.update, row.total, row.firing_rate_pct);
    });
    log.flush()?;
    save_checkpoint(&net, &out.join("checkpoint.aqck"))?;
    if let Some(e) = log_err {
        return Err(e.into());
    }
    if let Err(e) = &result {
        warn!("training stopped, last good parameters saved: {e}");
    }
    result?;
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct EvalReport {
    pub partitions: usize,
    pub aee: f64,
    pub pct3px: f64,
    pub fwl: Option<f64>,
    pub rsat: Option<f64>,
    pub firing_rate: Option<f64>,
    pub params: Option<usize>,
    pub ops: Option<u64>,
    pub energy_mj: Option<f64>,
}

#[derive(Serialize)]
struct EvalRow {
    index: usize,
    aee: f64,
    pct3px: f64,
    n_valid: usize,
    fwl: Option<f64>,
    rsat: Option<f64>,
}

fn rasters(dir: &Path, ext: &str) -> Result<Vec<PathBuf>, CliError> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == ext))
        .collect();
    files.sort();
    Ok(files)
}

/// Per-pixel translation field that moves every pixel by its raster flow
/// over the window.
fn field_from_flow(flow: &PixelFlow, partition: &EventPartition, sensor: aqflow_core::SensorSize) -> MotionField {
    let d = partition.duration_ms().max(1e-9);
    let mut field = MotionField::per_pixel(sensor);
    for (th, (f, &ok)) in field.cells_mut().iter_mut().zip(flow.flow.iter().zip(flow.valid.iter())) {
        if ok {
            *th = Theta::translation(f[0] / d, f[1] / d);
        }
    }
    field
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn eval(
    cfg: &RunConfig,
    out: &Path,
    flow_dir: &Path,
    reference: &Path,
    events: Option<&Path>,
    checkpoint: Option<&Path>,
) -> Result<(), CliError> {
    let files = rasters(flow_dir, "aqfl")?;
    if files.is_empty() {
        return Err(CliError::Data(format!("no flow rasters in {}", flow_dir.display())));
    }
    let stream = events.map(|p| load_events(p, cfg)).transpose()?;
    let parts = match &stream {
        Some(s) => partitions(s, cfg.solver.events_per_partition)?,
        None => Vec::new(),
    };
    if stream.is_some() && parts.len() < files.len() {
        return Err(CliError::Data(format!(
            "{} flow rasters but only {} partitions",
            files.len(),
            parts.len()
        )));
    }
    let mut rows = Vec::with_capacity(files.len());
    for (i, file) in files.iter().enumerate() {
        let name = file.file_name().unwrap();
        let pred = PixelFlow::from_raster(&FlowRaster::read(file)?);
        let refer = PixelFlow::from_raster(&FlowRaster::read(reference.join(name)).map_err(|e| {
            CliError::Data(format!("reference for {}: {e}", name.to_string_lossy()))
        })?);
        let part = parts.get(i);
        let sensor = stream.as_ref().map(|s| s.sensor());
        let mask = part.zip(sensor).map(|(p, s)| event_mask(p, s));
        let r = aee_and_outliers(&pred, &refer, mask.as_ref())?;
        let (mut f, mut s) = (None, None);
        if let (Some(p), Some(sensor)) = (part, sensor) {
            pred.check_same_shape(&PixelFlow::constant(sensor.width as usize, sensor.height as usize, [0.0; 2]))?;
            let field = field_from_flow(&pred, p, sensor);
            f = fwl(p, &field).map_err(|e| warn!("partition {i}: {e}")).ok();
            s = rsat(p, &field).map_err(|e| warn!("partition {i}: {e}")).ok();
        }
        rows.push(EvalRow {
            index: i,
            aee: r.aee,
            pct3px: r.outlier_pct_3px,
            n_valid: r.n_valid,
            fwl: f,
            rsat: s,
        });
    }

    let (mut firing, mut params, mut ops, mut energy) = (None, None, None, None);
    if let Some(path) = checkpoint {
        if parts.is_empty() {
            return Err(CliError::Usage("--checkpoint needs --events".into()));
        }
        let net = load_checkpoint(path)?;
        let (_, record) = net.forward(&parts[..files.len()])?;
        let count = net.count_params_and_ops(&record)?;
        let steps = count.steps.max(1) as u64;
        firing = Some(record.firing_rate().total_pct);
        params = Some(count.params);
        ops = Some(count.total() / steps);
        energy = Some(
            estimate_energy(count.dense_macs / steps, OpKind::Dense, &cfg.energy)
                + estimate_energy(count.synaptic_ops / steps, OpKind::Spiking, &cfg.energy),
        );
    }

    let report = EvalReport {
        partitions: rows.len(),
        aee: mean(&rows.iter().map(|r| r.aee).collect::<Vec<_>>()).unwrap_or(0.0),
        pct3px: mean(&rows.iter().map(|r| r.pct3px).collect::<Vec<_>>()).unwrap_or(0.0),
        fwl: mean(&rows.iter().filter_map(|r| r.fwl).collect::<Vec<_>>()),
        rsat: mean(&rows.iter().filter_map(|r| r.rsat).collect::<Vec<_>>()),
        firing_rate: firing,
        params,
        ops,
        energy_mj: energy,
    };
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    std::fs::write(out.join("report.json"), format!("{json}\n"))?;
    let mut csv = csv::Writer::from_path(out.join("report.csv"))?;
    for r in &rows {
        csv.serialize(r)?;
    }
    csv.flush()?;
    println!("{json}");
    Ok(())
}

fn save_image(img: &RgbImage, path: &Path, png: bool) -> Result<(), CliError> {
    if png {
        let flat: Vec<u8> = img.pixels.iter().flatten().copied().collect();
        image::RgbImage::from_raw(img.width as u32, img.height as u32, flat)
            .expect("pixel buffer matches image size")
            .save(path)
            .map_err(|e| CliError::Data(e.to_string()))
    } else {
        Ok(std::fs::write(path, img.to_ppm())?)
    }
}

pub fn viz(out: &Path, input: &Path, max_mag: Option<f64>, png: bool) -> Result<(), CliError> {
    let files = if input.is_dir() {
        let mut f = rasters(input, "aqfl")?;
        f.extend(rasters(input, "aqph")?);
        f
    } else if input.is_file() {
        vec![input.to_path_buf()]
    } else {
        return Err(CliError::Usage(format!("no such file or directory: {}", input.display())));
    };
    if let Some(m) = max_mag {
        if !(m > 0.0) {
            return Err(CliError::Usage("--max-mag must be positive".into()));
        }
    }
    let ext = if png { "png" } else { "ppm" };
    for file in &files {
        let img = match file.extension().and_then(|e| e.to_str()) {
            Some("aqfl") => {
                let flow = PixelFlow::from_raster(&FlowRaster::read(file)?);
                flow_to_color(&flow, max_mag.map_or(MaxMagnitude::Auto, MaxMagnitude::Fixed))
            }
            Some("aqph") => {
                let phi = decode_phi(&std::fs::read(file)?)?;
                let grid = Grid::from_vec(phi.width(), phi.height(), phi.iter().map(|&v| v as f64).collect());
                diverging_heatmap(&grid, None)
            }
            _ => return Err(CliError::Usage(format!("not a flow or scaling raster: {}", file.display()))),
        };
        let stem = file.file_stem().unwrap().to_string_lossy();
        save_image(&img, &out.join(format!("{stem}.{ext}")), png)?;
    }
    info!("rendered {} images", files.len());
    Ok(())
}
