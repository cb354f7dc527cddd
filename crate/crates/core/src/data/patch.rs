use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interp::{GridSpec, SparseInputs};
use crate::numerics::Tensor;

use super::{normalize, StationObservation, Topography, Variable};

/// Observations at one time over the whole topography extent.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSlice {
    pub time: String,
    pub observations: Vec<StationObservation>,
}

/// Topography plus observations grouped by time (ascending time id).
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub topography: Topography,
    pub slices: Vec<TimeSlice>,
}

impl Dataset {
    pub fn new(topography: Topography, observations: Vec<StationObservation>) -> Result<Self> {
        if observations.is_empty() {
            return Err(Error::Input("dataset has no observations".into()));
        }
        let mut by_time: BTreeMap<String, Vec<StationObservation>> = BTreeMap::new();
        for o in observations {
            by_time.entry(o.time.clone()).or_default().push(o);
        }
        Ok(Dataset {
            topography,
            slices: by_time
                .into_iter()
                .map(|(time, observations)| TimeSlice { time, observations })
                .collect(),
        })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.topography.grid
    }

    /// Distinct station ids in sorted order.
    pub fn station_ids(&self) -> Vec<String> {
        let ids: BTreeSet<&str> = self
            .slices
            .iter()
            .flat_map(|s| s.observations.iter().map(|o| o.station_id.as_str()))
            .collect();
        ids.into_iter().map(String::from).collect()
    }
}

/// Deterministically picks `round(fraction · n)` of `ids` as held-out
/// evaluation stations.
pub fn split_holdout(ids: &[String], fraction: f64, rng: &mut impl Rng) -> BTreeSet<String> {
    let k = ((ids.len() as f64) * fraction).round() as usize;
    sample(rng, ids.len(), k.min(ids.len()))
        .into_iter()
        .map(|i| ids[i].clone())
        .collect()
}

/// Patch geometry and station selection rules.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PatchProtocol {
    /// Fine patch side in pixels.
    pub patch_size: usize,
    /// Coarse latent side in pixels.
    pub coarse_size: usize,
    pub max_stations: usize,
    pub input_fraction: f64,
    pub min_stations: usize,
    pub max_retries: usize,
}

impl Default for PatchProtocol {
    fn default() -> Self {
        PatchProtocol {
            patch_size: 256,
            coarse_size: 64,
            max_stations: 30,
            input_fraction: 0.8,
            min_stations: 5,
            max_retries: 1000,
        }
    }
}

impl PatchProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size < 2 || self.coarse_size < 2 {
            return Err(Error::Config("patch_size and coarse_size must be at least 2".into()));
        }
        if !(self.input_fraction > 0.0 && self.input_fraction < 1.0) {
            return Err(Error::Config("input_fraction must lie in (0, 1)".into()));
        }
        if self.min_stations < 2 || self.max_stations < self.min_stations {
            return Err(Error::Config(
                "need 2 <= min_stations <= max_stations".into(),
            ));
        }
        if self.max_retries == 0 {
            return Err(Error::Config("max_retries must be positive".into()));
        }
        Ok(())
    }

    /// Number of input stations out of `n` selected; the rest are targets.
    pub fn input_count(&self, n: usize) -> usize {
        let k = (n as f64 * self.input_fraction - 1e-9).ceil() as usize;
        k.clamp(1, n.saturating_sub(1).max(1))
    }
}

/// One training/evaluation unit.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub grid_fine: GridSpec,
    pub grid_coarse: GridSpec,
    /// `[1, P, P]`, normalised.
    pub topo: Tensor<f32>,
    pub input_stations: Vec<StationObservation>,
    pub target_stations: Vec<StationObservation>,
    pub time_id: String,
}

fn usable(o: &StationObservation) -> bool {
    let (_, valid) = o.channels();
    valid.iter().any(|&v| v)
}

impl Patch {
    /// Builds the patch at pixel origin `(row0, col0)` of slice `time_index`
    /// from explicit input and target stations.
    pub fn at(
        dataset: &Dataset,
        time_index: usize,
        row0: usize,
        col0: usize,
        protocol: &PatchProtocol,
        input_stations: Vec<StationObservation>,
        target_stations: Vec<StationObservation>,
    ) -> Result<Patch> {
        let world = dataset.grid();
        let p = protocol.patch_size;
        if row0 + p > world.height || col0 + p > world.width {
            return Err(Error::Input(format!(
                "patch at ({row0}, {col0}) of size {p} exceeds the {}x{} world",
                world.height, world.width
            )));
        }
        let slice = dataset
            .slices
            .get(time_index)
            .ok_or_else(|| Error::Input(format!("no time slice {time_index}")))?;
        let grid_fine = world.window(row0, col0, p, p);
        let grid_coarse = grid_fine.resampled(protocol.coarse_size, protocol.coarse_size)?;
        let mut topo = dataset.topography.elevation.crop_chw(row0, col0, p, p)?;
        for v in topo.data_mut() {
            *v = normalize(Variable::Topography, *v as f64) as f32;
        }
        Ok(Patch {
            grid_fine,
            grid_coarse,
            topo,
            input_stations,
            target_stations,
            time_id: slice.time.clone(),
        })
    }

    /// Normalised input stations for the model.
    pub fn inputs(&self) -> Result<SparseInputs<f32>> {
        let (values, mask) = station_values(&self.input_stations);
        SparseInputs::new(
            self.input_stations.iter().map(|o| o.position()).collect(),
            values,
            mask,
        )
    }

    pub fn target_queries(&self) -> Vec<(f64, f64)> {
        self.target_stations.iter().map(|o| o.position()).collect()
    }

    /// Normalised target values `[M, 3]` and the matching 0/1 mask.
    pub fn targets(&self) -> (Tensor<f32>, Tensor<f32>) {
        let (values, mask) = station_values(&self.target_stations);
        let shape = values.shape().to_vec();
        let mask = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        (values, Tensor::new(shape, mask).expect("mask matches values"))
    }
}

fn station_values(stations: &[StationObservation]) -> (Tensor<f32>, Vec<bool>) {
    let mut values = Vec::with_capacity(stations.len() * 3);
    let mut mask = Vec::with_capacity(stations.len() * 3);
    for o in stations {
        let (v, m) = o.channels();
        values.extend(v.iter().map(|&x| x as f32));
        mask.extend(m);
    }
    (
        Tensor::new([stations.len(), 3], values).expect("three channels per station"),
        mask,
    )
}

/// Draws a random patch: uniform origin and time slice, then up to
/// `max_stations` eligible stations inside it, split into inputs and targets
/// by their random draw order.
pub fn sample_patch(
    dataset: &Dataset,
    eligible: &dyn Fn(&StationObservation) -> bool,
    rng: &mut impl Rng,
    protocol: &PatchProtocol,
) -> Result<Patch> {
    protocol.validate()?;
    let world = dataset.grid();
    let p = protocol.patch_size;
    if p > world.height || p > world.width {
        return Err(Error::Input(format!(
            "patch size {p} exceeds the {}x{} world",
            world.height, world.width
        )));
    }
    for _ in 0..protocol.max_retries {
        let t = rng.random_range(0..dataset.slices.len());
        let row0 = rng.random_range(0..=world.height - p);
        let col0 = rng.random_range(0..=world.width - p);
        let bounds = world.window(row0, col0, p, p);
        let candidates: Vec<&StationObservation> = dataset.slices[t]
            .observations
            .iter()
            .filter(|o| bounds.contains(o.lon, o.lat) && usable(o) && eligible(o))
            .collect();
        if candidates.len() < protocol.min_stations {
            continue;
        }
        let n = candidates.len().min(protocol.max_stations);
        let chosen: Vec<StationObservation> = sample(rng, candidates.len(), n)
            .into_iter()
            .map(|i| candidates[i].clone())
            .collect();
        let k = protocol.input_count(n);
        let targets = chosen[k..].to_vec();
        let mut inputs = chosen;
        inputs.truncate(k);
        return Patch::at(dataset, t, row0, col0, protocol, inputs, targets);
    }
    Err(Error::Sampling(format!(
        "no patch with at least {} stations after {} attempts",
        protocol.min_stations, protocol.max_retries
    )))
}
