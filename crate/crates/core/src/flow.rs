//! Dense per-pixel flow in px per window, with a validity mask.

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::io::{FlowRaster, FLOW_FLAG_PER_WINDOW};
use crate::warp::{Centroid, MotionField};

#[derive(Debug, Clone, PartialEq)]
pub struct PixelFlow {
    pub flow: Grid<[f64; 2]>,
    pub valid: Grid<bool>,
}

impl PixelFlow {
    pub fn constant(width: usize, height: usize, flow: [f64; 2]) -> Self {
        Self {
            flow: Grid::filled(width, height, flow),
            valid: Grid::filled(width, height, true),
        }
    }

    pub fn width(&self) -> usize {
        self.flow.width()
    }

    pub fn height(&self) -> usize {
        self.flow.height()
    }

    /// Displacement over `window_ms` implied by a motion field, evaluated at
    /// every pixel. Cells flagged invalid in `cell_valid` are masked out.
    pub fn from_field(field: &MotionField, centroid: Centroid, window_ms: f64, cell_valid: Option<&[bool]>) -> Self {
        let sensor = field.sensor();
        let (w, h) = (sensor.width as usize, sensor.height as usize);
        let mut flow = Grid::new(w, h);
        let mut valid = Grid::filled(w, h, true);
        for y in 0..h {
            for x in 0..w {
                let cell = field.cell_index(x as u16, y as u16);
                let th = field.cells()[cell];
                let u = th.vx + th.phi * (x as f64 - centroid.x);
                let v = th.vy + th.phi * (y as f64 - centroid.y);
                flow[(x, y)] = [u * window_ms, v * window_ms];
                if let Some(mask) = cell_valid {
                    valid[(x, y)] = mask[cell];
                }
            }
        }
        Self { flow, valid }
    }

    pub fn to_raster(&self) -> FlowRaster {
        let plane = |k: usize| {
            Grid::from_vec(
                self.width(),
                self.height(),
                self.flow
                    .iter()
                    .zip(self.valid.iter())
                    .map(|(f, &ok)| if ok { f[k] as f32 } else { f32::NAN })
                    .collect(),
            )
        };
        FlowRaster {
            flags: FLOW_FLAG_PER_WINDOW,
            u: plane(0),
            v: plane(1),
        }
    }

    pub fn from_raster(raster: &FlowRaster) -> Self {
        let (w, h) = (raster.width(), raster.height());
        let mut flow = Grid::new(w, h);
        let mut valid = Grid::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let ok = raster.is_valid(x, y);
                valid[(x, y)] = ok;
                if ok {
                    flow[(x, y)] = [raster.u[(x, y)] as f64, raster.v[(x, y)] as f64];
                }
            }
        }
        Self { flow, valid }
    }

    pub fn check_same_shape(&self, other: &PixelFlow) -> Result<()> {
        if self.width() != other.width() || self.height() != other.height() {
            return Err(Error::invalid(format!(
                "flow shapes differ: {}x{} vs {}x{}",
                self.width(),
                self.height(),
                other.width(),
                other.height()
            )));
        }
        Ok(())
    }
}
