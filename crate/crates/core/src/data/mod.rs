//! Station and topography data: normalisation, ingestion, patch sampling and
//! the synthetic world used in place of real archives.

mod asc;
mod patch;
mod stations;
mod synth;

use std::str::FromStr;

use crate::error::{Error, Result};

pub use asc::{load_topography_asc, parse_topography_asc, render_topography_asc, Topography};
pub use patch::{sample_patch, split_holdout, Dataset, Patch, PatchProtocol, TimeSlice};
pub use stations::{load_stations_csv, parse_stations_csv, render_stations_csv, StationObservation, CSV_COLUMNS};
pub use synth::{Site, SliceDrivers, SynthWorld, SynthWorldConfig};

/// Normalised channel order of station values and model outputs.
pub const CHANNELS: [&str; 3] = ["temperature", "u", "v"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variable {
    Temperature,
    WindComponent,
    Topography,
}

impl FromStr for Variable {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "temperature" => Ok(Variable::Temperature),
            "wind_component" => Ok(Variable::WindComponent),
            "topography" => Ok(Variable::Topography),
            other => Err(Error::Contract(format!("unknown variable tag `{other}`"))),
        }
    }
}

/// `[-30, 40] °C → [-1, 1]`; wind components share the `[0, 30] m/s → [0, 1]`
/// speed scale; altitude is divided by 3000 m. Out-of-range values pass
/// through the affine map unclamped.
pub fn normalize(var: Variable, value: f64) -> f64 {
    match var {
        Variable::Temperature => (value - 5.0) / 35.0,
        Variable::WindComponent => value / 30.0,
        Variable::Topography => value / 3000.0,
    }
}

pub fn denormalize(var: Variable, value: f64) -> f64 {
    match var {
        Variable::Temperature => value * 35.0 + 5.0,
        Variable::WindComponent => value * 30.0,
        Variable::Topography => value * 3000.0,
    }
}

/// Meteorological convention: `dir` is the bearing the wind blows from,
/// clockwise from north.
pub fn wind_to_uv(speed: f64, dir_deg: f64) -> Result<(f64, f64)> {
    if !(speed >= 0.0) {
        return Err(Error::Input(format!("wind speed must be non-negative, got {speed}")));
    }
    let rad = dir_deg.to_radians();
    Ok((-speed * rad.sin(), -speed * rad.cos()))
}

/// Inverse of [`wind_to_uv`]; direction is in `[0, 360)` and 0 for calm.
pub fn uv_to_wind(u: f64, v: f64) -> (f64, f64) {
    let speed = u.hypot(v);
    if speed == 0.0 {
        return (0.0, 0.0);
    }
    (speed, normalize_direction((-u).atan2(-v).to_degrees()))
}

/// Reduces a bearing into `[0, 360)`.
pub fn normalize_direction(deg: f64) -> f64 {
    let d = deg.rem_euclid(360.0);
    if d >= 360.0 {
        0.0
    } else {
        d
    }
}
