use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Regular lon/lat raster. Row 0 is the southernmost row; pixel `(i, j)` has
/// its center at `(lon_min + (j + 0.5)·cell_size, lat_min + (i + 0.5)·cell_size)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lon_min: f64,
    pub lat_min: f64,
    pub cell_size: f64,
    pub width: usize,
    pub height: usize,
}

impl GridSpec {
    pub fn new(lon_min: f64, lat_min: f64, cell_size: f64, width: usize, height: usize) -> Result<Self> {
        let g = GridSpec {
            lon_min,
            lat_min,
            cell_size,
            width,
            height,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cell_size > 0.0 && self.cell_size.is_finite()) {
            return Err(Error::Input(format!(
                "grid cell_size must be positive, got {}",
                self.cell_size
            )));
        }
        if self.width < 2 || self.height < 2 {
            return Err(Error::Input(format!(
                "grid must be at least 2x2, got {}x{}",
                self.width, self.height
            )));
        }
        if !self.lon_min.is_finite() || !self.lat_min.is_finite() {
            return Err(Error::Input("grid origin must be finite".into()));
        }
        Ok(())
    }

    pub fn lon_max(&self) -> f64 {
        self.lon_min + self.width as f64 * self.cell_size
    }

    pub fn lat_max(&self) -> f64 {
        self.lat_min + self.height as f64 * self.cell_size
    }

    /// Center of pixel `(row, col)` as `(lon, lat)`.
    pub fn pixel_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.lon_min + (col as f64 + 0.5) * self.cell_size,
            self.lat_min + (row as f64 + 0.5) * self.cell_size,
        )
    }

    /// Continuous pixel coordinates `(row, col)`; pixel centers sit on integers.
    pub fn to_pixel(&self, lon: f64, lat: f64) -> (f64, f64) {
        (
            (lat - self.lat_min) / self.cell_size - 0.5,
            (lon - self.lon_min) / self.cell_size - 0.5,
        )
    }

    pub fn contains(&self, lon: f64, lat: f64) -> bool {
        lon >= self.lon_min && lon < self.lon_max() && lat >= self.lat_min && lat < self.lat_max()
    }

    /// Sub-grid covering `rows × cols` pixels starting at `(row0, col0)`.
    pub fn window(&self, row0: usize, col0: usize, rows: usize, cols: usize) -> GridSpec {
        GridSpec {
            lon_min: self.lon_min + col0 as f64 * self.cell_size,
            lat_min: self.lat_min + row0 as f64 * self.cell_size,
            cell_size: self.cell_size,
            width: cols,
            height: rows,
        }
    }

    /// Same bounds at a coarser (or finer) pixel count.
    pub fn resampled(&self, width: usize, height: usize) -> Result<GridSpec> {
        let ratio = self.width as f64 / width as f64;
        let ratio_h = self.height as f64 / height as f64;
        if (ratio - ratio_h).abs() > 1e-12 {
            return Err(Error::Input(format!(
                "resampling {}x{} to {width}x{height} changes the aspect ratio",
                self.width, self.height
            )));
        }
        GridSpec::new(self.lon_min, self.lat_min, self.cell_size * ratio, width, height)
    }
}
