use std::path::Path;

use crate::error::{Error, FormatError, Result};
use crate::interp::GridSpec;
use crate::numerics::Tensor;

/// Elevation raster in meters, row 0 southernmost. `nodata[i]` marks cells
/// that were NODATA in the source file; their value is 0 m.
#[derive(Clone, Debug, PartialEq)]
pub struct Topography {
    pub grid: GridSpec,
    pub elevation: Tensor<f32>,
    pub nodata: Vec<bool>,
}

impl Topography {
    /// Elevation at pixel `(row, col)` in meters.
    pub fn at(&self, row: usize, col: usize) -> f32 {
        self.elevation.data()[row * self.grid.width + col]
    }
}

pub fn load_topography_asc(path: &Path) -> Result<Topography> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_topography_asc(&text)
}

fn header_number(key: &'static str, raw: &str) -> Result<f64, FormatError> {
    raw.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| FormatError::InvalidHeader {
            key: key.into(),
            reason: format!("`{raw}` is not a finite number"),
        })
}

fn header_count(key: &'static str, raw: &str) -> Result<usize, FormatError> {
    match raw.parse::<usize>() {
        Ok(n) if n >= 2 => Ok(n),
        _ => Err(FormatError::InvalidHeader {
            key: key.into(),
            reason: format!("`{raw}` is not an integer ≥ 2"),
        }),
    }
}

pub fn parse_topography_asc(text: &str) -> Result<Topography> {
    let mut ncols = None;
    let mut nrows = None;
    let mut x = None;
    let mut y = None;
    let mut cell = None;
    let mut nodata = None;
    let mut lines = text.lines().peekable();
    while let Some(line) = lines.peek() {
        let mut parts = line.split_whitespace();
        let Some(key) = parts.next() else {
            lines.next();
            continue;
        };
        if !key.starts_with(|c: char| c.is_ascii_alphabetic()) {
            break;
        }
        let value = parts.next().unwrap_or("");
        match key.to_ascii_lowercase().as_str() {
            "ncols" => ncols = Some(header_count("ncols", value)?),
            "nrows" => nrows = Some(header_count("nrows", value)?),
            "xllcorner" => x = Some((header_number("xllcorner", value)?, false)),
            "xllcenter" => x = Some((header_number("xllcenter", value)?, true)),
            "yllcorner" => y = Some((header_number("yllcorner", value)?, false)),
            "yllcenter" => y = Some((header_number("yllcenter", value)?, true)),
            "cellsize" => cell = Some(header_number("cellsize", value)?),
            "nodata_value" => nodata = Some(header_number("NODATA_value", value)?),
            _ => {
                return Err(FormatError::InvalidHeader {
                    key: "header".into(),
                    reason: format!("unknown key `{key}`"),
                }
                .into())
            }
        }
        lines.next();
    }
    let ncols = ncols.ok_or(FormatError::MissingHeaderKey("ncols"))?;
    let nrows = nrows.ok_or(FormatError::MissingHeaderKey("nrows"))?;
    let (x, x_center) = x.ok_or(FormatError::MissingHeaderKey("xllcorner"))?;
    let (y, y_center) = y.ok_or(FormatError::MissingHeaderKey("yllcorner"))?;
    let cell = cell.ok_or(FormatError::MissingHeaderKey("cellsize"))?;
    if cell <= 0.0 {
        return Err(FormatError::InvalidHeader {
            key: "cellsize".into(),
            reason: "must be positive".into(),
        }
        .into());
    }
    let lon_min = if x_center { x - 0.5 * cell } else { x };
    let lat_min = if y_center { y - 0.5 * cell } else { y };
    let grid = GridSpec::new(lon_min, lat_min, cell, ncols, nrows)?;

    let body: Vec<&str> = lines.flat_map(str::split_whitespace).collect();
    let expected = ncols * nrows;
    if body.len() != expected {
        return Err(FormatError::BodyCount {
            expected,
            found: body.len(),
        }
        .into());
    }
    let mut values = vec![0f32; expected];
    let mut mask = vec![false; expected];
    for (index, raw) in body.iter().enumerate() {
        let v: f64 = raw
            .parse()
            .ok()
            .filter(|v: &f64| v.is_finite())
            .ok_or_else(|| FormatError::BodyValue {
                index,
                value: raw.to_string(),
            })?;
        // file rows run north to south
        let row = nrows - 1 - index / ncols;
        let dst = row * ncols + index % ncols;
        if nodata == Some(v) {
            mask[dst] = true;
        } else {
            values[dst] = v as f32;
        }
    }
    Ok(Topography {
        grid,
        elevation: Tensor::new([1, nrows, ncols], values)?,
        nodata: mask,
    })
}

const NODATA: f32 = -9999.0;

/// ESRI ASCII grid text for `topo`; masked cells are written as NODATA.
pub fn render_topography_asc(topo: &Topography) -> String {
    let g = &topo.grid;
    let mut out = format!(
        "ncols {}\nnrows {}\nxllcorner {}\nyllcorner {}\ncellsize {}\nNODATA_value {}\n",
        g.width, g.height, g.lon_min, g.lat_min, g.cell_size, NODATA
    );
    let data = topo.elevation.data();
    for row in (0..g.height).rev() {
        let line: Vec<String> = (0..g.width)
            .map(|col| {
                let i = row * g.width + col;
                if topo.nodata.get(i).copied().unwrap_or(false) {
                    NODATA.to_string()
                } else {
                    data[i].to_string()
                }
            })
            .collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}
