use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interp::GridSpec;
use crate::numerics::Tensor;

use super::{uv_to_wind, Dataset, StationObservation, Topography};

const METERS_PER_DEGREE: f64 = 111_320.0;
/// Slope scale (m/m) at which terrain effects on wind saturate.
const SLOPE_REF: f64 = 0.1;

/// Parameters of the synthetic lapse-rate world.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthWorldConfig {
    pub seed: u64,
    pub lon_min: f64,
    pub lat_min: f64,
    pub cell_size: f64,
    pub width: usize,
    pub height: usize,
    pub terrain_octaves: usize,
    /// Lattice frequency of the first octave, cycles per degree.
    pub terrain_frequency: f64,
    pub terrain_persistence: f64,
    pub terrain_amplitude_m: f64,
    /// Exponent applied to the unit-range noise; > 1 gives broad lowlands.
    pub terrain_shape: f64,
    /// °C per meter.
    pub lapse_rate: f64,
    pub base_temp_mean: f64,
    /// Per-slice sea-level mean drawn uniformly in `mean ± spread`.
    pub base_temp_spread: f64,
    pub base_temp_amplitude: f64,
    pub base_temp_wavelength_deg: f64,
    /// Mean `(u, v)` in m/s.
    pub wind_base: [f64; 2],
    /// Per-slice uniform jitter on each base component.
    pub wind_jitter: f64,
    pub wind_deflection_gain: f64,
    pub wind_upslope_attenuation: f64,
    pub wind_ridge_gain: f64,
    pub station_count: usize,
    pub time_slices: usize,
    pub noise_temp_c: f64,
    pub noise_wind_ms: f64,
}

impl Default for SynthWorldConfig {
    fn default() -> Self {
        SynthWorldConfig {
            seed: 2018,
            lon_min: 138.0,
            lat_min: 35.5,
            cell_size: 0.0055,
            width: 256,
            height: 256,
            terrain_octaves: 5,
            terrain_frequency: 1.5,
            terrain_persistence: 0.5,
            terrain_amplitude_m: 3000.0,
            terrain_shape: 2.0,
            lapse_rate: -0.0065,
            base_temp_mean: 10.0,
            base_temp_spread: 8.0,
            base_temp_amplitude: 3.0,
            base_temp_wavelength_deg: 2.0,
            wind_base: [3.0, 1.0],
            wind_jitter: 4.0,
            wind_deflection_gain: 0.8,
            wind_upslope_attenuation: 0.5,
            wind_ridge_gain: 0.6,
            station_count: 600,
            time_slices: 24,
            noise_temp_c: 0.2,
            noise_wind_ms: 0.3,
        }
    }
}

impl SynthWorldConfig {
    pub fn validate(&self) -> Result<()> {
        GridSpec::new(self.lon_min, self.lat_min, self.cell_size, self.width, self.height)
            .map_err(|e| Error::Config(e.to_string()))?;
        let fail = |m: &str| Err(Error::Config(m.into()));
        if self.station_count == 0 {
            return fail("station_count must be positive");
        }
        if self.time_slices == 0 {
            return fail("time_slices must be positive");
        }
        if self.terrain_octaves == 0 || !(self.terrain_frequency > 0.0) {
            return fail("terrain needs at least one octave and a positive frequency");
        }
        if !(0.0..=3000.0).contains(&self.terrain_amplitude_m) {
            return fail("terrain_amplitude_m must lie in [0, 3000]");
        }
        if !(self.terrain_shape > 0.0) || !(self.base_temp_wavelength_deg > 0.0) {
            return fail("terrain_shape and base_temp_wavelength_deg must be positive");
        }
        if self.noise_temp_c < 0.0 || self.noise_wind_ms < 0.0 || self.wind_jitter < 0.0 {
            return fail("noise and jitter must be non-negative");
        }
        let all = [
            self.terrain_persistence,
            self.lapse_rate,
            self.base_temp_mean,
            self.base_temp_spread,
            self.base_temp_amplitude,
            self.wind_base[0],
            self.wind_base[1],
            self.wind_deflection_gain,
            self.wind_upslope_attenuation,
            self.wind_ridge_gain,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return fail("synthetic world parameters must be finite");
        }
        Ok(())
    }
}

/// Weather drivers of one time slice.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SliceDrivers {
    pub mean_temp: f64,
    pub phase_lon: f64,
    pub phase_lat: f64,
    pub wind: [f64; 2],
}

/// Station site.
#[derive(Clone, Debug, PartialEq)]
pub struct Site {
    pub id: String,
    pub lon: f64,
    pub lat: f64,
    pub altitude: f64,
}

/// A generated world: terrain, per-slice drivers, station sites and the
/// analytic truth.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthWorld {
    pub config: SynthWorldConfig,
    pub grid: GridSpec,
    /// Elevation at pixel centers, meters, row-major from the south.
    pub terrain: Vec<f64>,
    pub drivers: Vec<SliceDrivers>,
    pub sites: Vec<Site>,
    raw_min: f64,
    raw_max: f64,
}

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn lattice(seed: u64, octave: usize, ix: i64, iy: i64) -> f64 {
    let h = mix(seed ^ mix((octave as u64) << 40 ^ mix(ix as u64 ^ mix(iy as u64))));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn fade(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

fn value_noise(seed: u64, octave: usize, x: f64, y: f64) -> f64 {
    let (fx, fy) = (x.floor(), y.floor());
    let (ix, iy) = (fx as i64, fy as i64);
    let (tx, ty) = (fade(x - fx), fade(y - fy));
    let a = lattice(seed, octave, ix, iy);
    let b = lattice(seed, octave, ix + 1, iy);
    let c = lattice(seed, octave, ix, iy + 1);
    let d = lattice(seed, octave, ix + 1, iy + 1);
    let lo = a + (b - a) * tx;
    let hi = c + (d - c) * tx;
    lo + (hi - lo) * ty
}

/// `2018-01-01T00:00:00Z` plus `hours`.
fn time_id(hours: usize) -> String {
    const DAYS: [usize; 12] = [31, 28, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31];
    let mut day = hours / 24;
    let mut year = 2018;
    loop {
        let leap = year % 4 == 0 && (year % 100 != 0 || year % 400 == 0);
        let len = if leap { 366 } else { 365 };
        if day < len {
            break;
        }
        day -= len;
        year += 1;
    }
    let leap = year % 4 == 0 && (year % 100 != 0 || year % 400 == 0);
    let mut month = 0;
    while day >= DAYS[month] + usize::from(month == 1 && leap) {
        day -= DAYS[month] + usize::from(month == 1 && leap);
        month += 1;
    }
    format!("{year}-{:02}-{:02}T{:02}:00:00Z", month + 1, day + 1, hours % 24)
}

impl SynthWorld {
    pub fn generate(config: &SynthWorldConfig) -> Result<Self> {
        config.validate()?;
        let grid = GridSpec::new(config.lon_min, config.lat_min, config.cell_size, config.width, config.height)?;
        let mut world = SynthWorld {
            config: config.clone(),
            grid,
            terrain: Vec::new(),
            drivers: Vec::new(),
            sites: Vec::new(),
            raw_min: 0.0,
            raw_max: 1.0,
        };
        let raw: Vec<f64> = (0..grid.height * grid.width)
            .map(|i| {
                let (lon, lat) = grid.pixel_center(i / grid.width, i % grid.width);
                world.raw_terrain(lon, lat)
            })
            .collect();
        world.raw_min = raw.iter().copied().fold(f64::INFINITY, f64::min);
        world.raw_max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        world.terrain = raw.iter().map(|&r| world.shape_terrain(r)).collect();

        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        world.drivers = (0..config.time_slices)
            .map(|_| SliceDrivers {
                mean_temp: config.base_temp_mean + config.base_temp_spread * (2.0 * rng.random::<f64>() - 1.0),
                phase_lon: std::f64::consts::TAU * rng.random::<f64>(),
                phase_lat: std::f64::consts::TAU * rng.random::<f64>(),
                wind: [
                    config.wind_base[0] + config.wind_jitter * (2.0 * rng.random::<f64>() - 1.0),
                    config.wind_base[1] + config.wind_jitter * (2.0 * rng.random::<f64>() - 1.0),
                ],
            })
            .collect();
        let extent_lon = grid.width as f64 * grid.cell_size;
        let extent_lat = grid.height as f64 * grid.cell_size;
        world.sites = (0..config.station_count)
            .map(|i| {
                let lon = grid.lon_min + rng.random::<f64>() * extent_lon;
                let lat = grid.lat_min + rng.random::<f64>() * extent_lat;
                Site {
                    id: format!("S{i:04}"),
                    lon,
                    lat,
                    altitude: world.altitude(lon, lat),
                }
            })
            .collect();
        Ok(world)
    }

    fn raw_terrain(&self, lon: f64, lat: f64) -> f64 {
        let c = &self.config;
        let (x, y) = (lon - c.lon_min, lat - c.lat_min);
        let mut sum = 0.0;
        let mut amp = 1.0;
        let mut freq = c.terrain_frequency;
        for o in 0..c.terrain_octaves {
            sum += amp * value_noise(c.seed, o, x * freq, y * freq);
            amp *= c.terrain_persistence;
            freq *= 2.0;
        }
        sum
    }

    fn shape_terrain(&self, raw: f64) -> f64 {
        let span = self.raw_max - self.raw_min;
        let u = if span > 0.0 {
            ((raw - self.raw_min) / span).clamp(0.0, 1.0)
        } else {
            0.0
        };
        (self.config.terrain_amplitude_m * u.powf(self.config.terrain_shape)).clamp(0.0, 3000.0)
    }

    /// Terrain height in meters at any coordinate.
    pub fn altitude(&self, lon: f64, lat: f64) -> f64 {
        self.shape_terrain(self.raw_terrain(lon, lat))
    }

    /// `∇h` in meters per meter, `(east, north)`.
    pub fn slope(&self, lon: f64, lat: f64) -> (f64, f64) {
        let d = 1e-5;
        let dx = (self.altitude(lon + d, lat) - self.altitude(lon - d, lat)) / (2.0 * d * METERS_PER_DEGREE);
        let dy = (self.altitude(lon, lat + d) - self.altitude(lon, lat - d)) / (2.0 * d * METERS_PER_DEGREE);
        (dx, dy)
    }

    fn base_temperature(&self, t: usize, lon: f64, lat: f64) -> f64 {
        let c = &self.config;
        let d = &self.drivers[t];
        let k = std::f64::consts::TAU / c.base_temp_wavelength_deg;
        d.mean_temp
            + c.base_temp_amplitude
                * ((lon - c.lon_min) * k + d.phase_lon).sin()
                * ((lat - c.lat_min) * k + d.phase_lat).cos()
    }

    /// True temperature (°C) at slice `t` for a point at altitude `h`.
    fn temperature_at(&self, t: usize, lon: f64, lat: f64, h: f64) -> f64 {
        self.base_temperature(t, lon, lat) + self.config.lapse_rate * h
    }

    pub fn temperature(&self, t: usize, lon: f64, lat: f64) -> f64 {
        self.temperature_at(t, lon, lat, self.altitude(lon, lat))
    }

    /// True `(u, v)` wind at slice `t`: the slice's base vector with part of
    /// its along-slope component removed, slowed when blowing upslope and
    /// strengthened with altitude.
    pub fn wind(&self, t: usize, lon: f64, lat: f64) -> (f64, f64) {
        let c = &self.config;
        let [u0, v0] = self.drivers[t].wind;
        let (sx, sy) = self.slope(lon, lat);
        let along = u0 * sx + v0 * sy;
        let k = c.wind_deflection_gain * along / (sx * sx + sy * sy + SLOPE_REF * SLOPE_REF);
        let (u1, v1) = (u0 - k * sx, v0 - k * sy);
        let speed0 = u0.hypot(v0).max(1e-9);
        let upslope = (along / speed0).max(0.0) / SLOPE_REF;
        let h = self.altitude(lon, lat);
        let factor = (-c.wind_upslope_attenuation * upslope).exp() * (1.0 + c.wind_ridge_gain * h / 3000.0);
        (u1 * factor, v1 * factor)
    }

    /// True temperature over the whole grid at slice `t`, using the stored
    /// terrain raster.
    pub fn temperature_grid(&self, t: usize) -> Vec<f64> {
        (0..self.terrain.len())
            .map(|i| {
                let (lon, lat) = self.grid.pixel_center(i / self.grid.width, i % self.grid.width);
                self.temperature_at(t, lon, lat, self.terrain[i])
            })
            .collect()
    }

    pub fn time_id(&self, t: usize) -> String {
        time_id(t)
    }

    pub fn topography(&self) -> Topography {
        Topography {
            grid: self.grid,
            elevation: Tensor::from_fn([1, self.grid.height, self.grid.width], |i| self.terrain[i] as f32),
            nodata: vec![false; self.terrain.len()],
        }
    }

    /// Noisy observations of every site at every slice, slice-major.
    pub fn observations(&self) -> Vec<StationObservation> {
        let c = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
        rng.set_stream(1);
        let temp_noise = Normal::new(0.0, c.noise_temp_c).expect("validated std");
        let wind_noise = Normal::new(0.0, c.noise_wind_ms).expect("validated std");
        let mut out = Vec::with_capacity(self.drivers.len() * self.sites.len());
        for t in 0..self.drivers.len() {
            let time = time_id(t);
            for s in &self.sites {
                let temp = self.temperature_at(t, s.lon, s.lat, s.altitude) + temp_noise.sample(&mut rng);
                let (u, v) = self.wind(t, s.lon, s.lat);
                let (speed, dir) = uv_to_wind(u + wind_noise.sample(&mut rng), v + wind_noise.sample(&mut rng));
                out.push(StationObservation {
                    station_id: s.id.clone(),
                    lon: s.lon,
                    lat: s.lat,
                    altitude: s.altitude,
                    time: time.clone(),
                    temperature: Some(temp),
                    wind_speed: Some(speed),
                    wind_dir: Some(dir),
                });
            }
        }
        out
    }

    pub fn dataset(&self) -> Result<Dataset> {
        Dataset::new(self.topography(), self.observations())
    }
}
