use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{
    load_stations_csv, load_topography_asc, denormalize, render_stations_csv, render_topography_asc, split_holdout,
    uv_to_wind, Dataset, Patch, StationObservation, SynthWorld, Topography, Variable,
};
use crate::error::Error;
use crate::eval::{evaluate, overlay_wind, render_field_map, IdwBaseline, ModelPredictor, Predictor};
use crate::fsutil::write_atomic;
use crate::model::{decode, field, load_checkpoint, ModelInputs, SpliifParams};
use crate::numerics::{Graph, Tensor};
use crate::training::{Trainer, TrainOutcome, CHECKPOINT_FILE};

use super::config::{DataSource, RunConfig};

/// A failed command. Validation failures (bad configuration, missing or
/// malformed inputs, refused output directory) exit with 1, everything else
/// with 2.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(Error),
    #[error("{0}")]
    Runtime(Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Validation(Error::Input(msg.into()))
}

/// Input problems are validation failures; the rest are runtime failures.
fn classify(e: Error) -> CliError {
    match e {
        Error::Config(_) | Error::Format(_) | Error::Input(_) | Error::Io { .. } => CliError::Validation(e),
        other => CliError::Runtime(other),
    }
}

fn runtime(e: Error) -> CliError {
    CliError::Runtime(e)
}

fn require_file(path: &Path, what: &str) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(invalid(format!("{what} {} does not exist", path.display())))
    }
}

/// Creates `out`, refusing a non-empty existing directory unless `force`.
fn prepare_out_dir(out: &Path, force: bool) -> CliResult<()> {
    if out.exists() {
        if !out.is_dir() {
            return Err(invalid(format!("{} exists and is not a directory", out.display())));
        }
        let non_empty = std::fs::read_dir(out)
            .map_err(|e| runtime(Error::io(out, e)))?
            .next()
            .is_some();
        if non_empty && !force {
            return Err(invalid(format!(
                "output directory {} is not empty; pass --force to overwrite",
                out.display()
            )));
        }
    }
    std::fs::create_dir_all(out).map_err(|e| runtime(Error::io(out, e)))
}

fn write(path: PathBuf, bytes: &[u8]) -> CliResult<PathBuf> {
    write_atomic(&path, bytes).map_err(runtime)?;
    Ok(path)
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Worker count for evaluation: `SPLIIF_THREADS` when set, else the number of
/// logical cores.
pub fn threads_from_env() -> usize {
    std::env::var("SPLIIF_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// The configured dataset: generated in memory or read from files.
pub fn load_dataset(config: &RunConfig) -> CliResult<Dataset> {
    match config.data.source {
        DataSource::Synth => SynthWorld::generate(&config.data.synth)
            .and_then(|w| w.dataset())
            .map_err(classify),
        DataSource::Files => {
            let (csv, asc) = file_paths(config)?;
            let topo = load_topography_asc(asc).map_err(classify)?;
            let obs = load_stations_csv(csv).map_err(classify)?;
            Dataset::new(topo, obs).map_err(classify)
        }
    }
}

fn file_paths(config: &RunConfig) -> CliResult<(&Path, &Path)> {
    let csv = config.data.stations_csv.as_deref().ok_or_else(|| invalid("data.stations_csv is not set"))?;
    let asc = config.data.topography_asc.as_deref().ok_or_else(|| invalid("data.topography_asc is not set"))?;
    require_file(csv, "station CSV")?;
    require_file(asc, "topography ASC")?;
    Ok((csv, asc))
}

fn load_topography(config: &RunConfig) -> CliResult<Topography> {
    match config.data.source {
        DataSource::Synth => SynthWorld::generate(&config.data.synth)
            .map(|w| w.topography())
            .map_err(classify),
        DataSource::Files => load_topography_asc(file_paths(config)?.1).map_err(classify),
    }
}

fn held_out(dataset: &Dataset, config: &RunConfig) -> BTreeSet<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.data.split_seed);
    split_holdout(&dataset.station_ids(), config.data.holdout_fraction, &mut rng)
}

/// Writes `stations.csv`, `topography.asc` and `manifest.json` for the
/// synthetic world.
pub fn cmd_synth(config: &RunConfig, out: &Path, force: bool) -> CliResult<Vec<PathBuf>> {
    if config.data.source != DataSource::Synth {
        return Err(CliError::Validation(Error::Config(
            "data.source: synth needs the \"synth\" source".into(),
        )));
    }
    let world = SynthWorld::generate(&config.data.synth).map_err(classify)?;
    prepare_out_dir(out, force)?;
    let csv = render_stations_csv(&world.observations());
    let asc = render_topography_asc(&world.topography());
    let synth_json = serde_json::to_string(&config.data.synth).expect("config serialises");
    let manifest = serde_json::json!({
        "seed": config.data.synth.seed,
        "config_sha256": sha256_hex(synth_json.as_bytes()),
        "synth": config.data.synth,
        "station_count": world.sites.len(),
        "time_slices": world.drivers.len(),
        "files": {
            "stations.csv": sha256_hex(csv.as_bytes()),
            "topography.asc": sha256_hex(asc.as_bytes()),
        },
    });
    let manifest = serde_json::to_string_pretty(&manifest).expect("manifest serialises") + "\n";
    Ok(vec![
        write(out.join("stations.csv"), csv.as_bytes())?,
        write(out.join("topography.asc"), asc.as_bytes())?,
        write(out.join("manifest.json"), manifest.as_bytes())?,
    ])
}

/// Trains on the non-held-out stations; writes `checkpoint.splf`,
/// `loss.csv` and the resolved `config.json` into `out`.
pub fn cmd_train(config: &RunConfig, out: &Path, force: bool, resume: bool) -> CliResult<TrainOutcome> {
    let checkpoint = out.join(CHECKPOINT_FILE);
    if resume {
        require_file(&checkpoint, "checkpoint")?;
    }
    let dataset = load_dataset(config)?;
    let held = held_out(&dataset, config);
    let eligible = |o: &StationObservation| !held.contains(&o.station_id);
    let mut trainer = if resume {
        Trainer::resume(&checkpoint, &config.model, &config.train, &config.data.patch).map_err(classify)?
    } else {
        prepare_out_dir(out, force)?;
        Trainer::new(&config.model, &config.train, &config.data.patch).map_err(classify)?
    };
    let resolved = serde_json::to_string_pretty(config).expect("config serialises") + "\n";
    write(out.join("config.json"), resolved.as_bytes())?;
    trainer.run(&dataset, &eligible, out).map_err(runtime)
}

/// Writes `metrics_baseline.csv` and `histogram.csv`, plus
/// `metrics_model.csv` and `improvement.csv` unless `baseline_only`.
pub fn cmd_eval(
    config: &RunConfig,
    out: &Path,
    force: bool,
    checkpoint: Option<&Path>,
    baseline_only: bool,
    threads: usize,
) -> CliResult<Vec<PathBuf>> {
    let params = if baseline_only {
        None
    } else {
        let path = checkpoint.ok_or_else(|| invalid("--checkpoint is required unless --baseline-only"))?;
        require_file(path, "checkpoint")?;
        Some(load_checkpoint(path, &config.model).map_err(classify)?)
    };
    let dataset = load_dataset(config)?;
    prepare_out_dir(out, force)?;
    let held = held_out(&dataset, config);
    let predictor = params.as_ref().map(|p| ModelPredictor {
        params: p,
        config: &config.model,
    });
    let report = evaluate(
        predictor.as_ref().map(|p| p as &dyn Predictor),
        &IdwBaseline,
        &dataset,
        &held,
        &config.data.patch,
        &config.eval,
        threads,
    )
    .map_err(runtime)?;
    let mut written = vec![write(out.join("metrics_baseline.csv"), report.baseline.to_csv().as_bytes())?];
    if let (Some(model), Some(cmp)) = (&report.model, report.improvement_csv()) {
        written.push(write(out.join("metrics_model.csv"), model.to_csv().as_bytes())?);
        written.push(write(out.join("improvement.csv"), cmp.as_bytes())?);
    }
    written.push(write(out.join("histogram.csv"), report.histogram_csv().map_err(runtime)?.as_bytes())?);
    Ok(written)
}

fn parse_origin(origin: &str) -> CliResult<(usize, usize)> {
    let parsed = origin
        .split_once(',')
        .and_then(|(r, c)| Some((r.trim().parse().ok()?, c.trim().parse().ok()?)));
    parsed.ok_or_else(|| invalid(format!("--origin expects ROW,COL, got `{origin}`")))
}

fn load_queries(path: &Path) -> CliResult<Vec<(f64, f64)>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| invalid(format!("{}: {e}", path.display())))?
        .clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| invalid(format!("{}: missing column `{name}`", path.display())))
    };
    let (ilon, ilat) = (col("lon")?, col("lat")?);
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        let num = |j: usize| -> CliResult<f64> {
            rec.get(j)
                .and_then(|v| v.parse::<f64>().ok())
                .filter(|v| v.is_finite())
                .ok_or_else(|| invalid(format!("{}: line {}: malformed coordinate", path.display(), i + 2)))
        };
        out.push((num(ilon)?, num(ilat)?));
    }
    if out.is_empty() {
        return Err(invalid(format!("{} has no queries", path.display())));
    }
    Ok(out)
}

/// Predicts at `queries` (writing `predictions.csv`) or over the whole patch
/// (writing `temperature.pgm`, `wind_speed.pgm` and `wind_arrows.csv`).
#[allow(clippy::too_many_arguments)]
pub fn cmd_infer(
    config: &RunConfig,
    out: &Path,
    force: bool,
    checkpoint: &Path,
    stations: &Path,
    queries: Option<&Path>,
    grid: bool,
    origin: &str,
) -> CliResult<Vec<PathBuf>> {
    require_file(checkpoint, "checkpoint")?;
    require_file(stations, "station CSV")?;
    if let Some(q) = queries {
        require_file(q, "query CSV")?;
    }
    if queries.is_none() && !grid {
        return Err(invalid("either --queries or --grid is required"));
    }
    let (row0, col0) = parse_origin(origin)?;
    let params = load_checkpoint(checkpoint, &config.model).map_err(classify)?;
    let observations = load_stations_csv(stations).map_err(classify)?;
    let times: BTreeSet<&str> = observations.iter().map(|o| o.time.as_str()).collect();
    if times.len() != 1 {
        return Err(invalid(format!(
            "station CSV must hold exactly one time slice, found {}",
            times.len()
        )));
    }
    let query_points = queries.map(load_queries).transpose()?;
    let topography = load_topography(config)?;
    let dataset = Dataset::new(topography, observations).map_err(classify)?;
    let protocol = &config.data.patch;
    let mut patch = Patch::at(&dataset, 0, row0, col0, protocol, Vec::new(), Vec::new()).map_err(classify)?;
    patch.input_stations = dataset.slices[0]
        .observations
        .iter()
        .filter(|o| patch.grid_fine.contains(o.lon, o.lat))
        .cloned()
        .collect();
    if patch.input_stations.is_empty() {
        return Err(invalid("no input station lies inside the inference patch"));
    }
    prepare_out_dir(out, force)?;
    let mut written = Vec::new();
    if let Some(points) = query_points {
        if let Some(p) = points.iter().find(|p| !patch.grid_fine.contains(p.0, p.1)) {
            return Err(invalid(format!("query ({}, {}) lies outside the inference patch", p.0, p.1)));
        }
        patch.target_stations = points
            .iter()
            .enumerate()
            .map(|(i, &(lon, lat))| StationObservation {
                station_id: format!("q{i}"),
                lon,
                lat,
                altitude: 0.0,
                time: patch.time_id.clone(),
                temperature: None,
                wind_speed: None,
                wind_dir: None,
            })
            .collect();
        let preds = ModelPredictor {
            params: &params,
            config: &config.model,
        }
        .predict(&patch)
        .map_err(runtime)?;
        let mut csv = String::from("lon,lat,temp_c,u_ms,v_ms,wind_ms,wind_dir_deg\n");
        for (&(lon, lat), p) in points.iter().zip(&preds) {
            let (speed, dir) = uv_to_wind(p[1], p[2]);
            csv.push_str(&format!("{lon},{lat},{},{},{},{speed},{dir}\n", p[0], p[1], p[2]));
        }
        written.push(write(out.join("predictions.csv"), csv.as_bytes())?);
    }
    if grid {
        written.extend(render_grid(config, &params, &patch, out)?);
    }
    Ok(written)
}

fn render_grid(config: &RunConfig, params: &SpliifParams, patch: &Patch, out: &Path) -> CliResult<Vec<PathBuf>> {
    let stations = patch.inputs().map_err(runtime)?;
    let inputs = ModelInputs {
        stations: &stations,
        dense: None,
        topo: &patch.topo,
        grid_coarse: &patch.grid_coarse,
        grid_fine: &patch.grid_fine,
    };
    let g_fine = &patch.grid_fine;
    let (h, w) = (g_fine.height, g_fine.width);
    let centers: Vec<(f64, f64)> = (0..h * w).map(|i| g_fine.pixel_center(i / w, i % w)).collect();
    let mut g = Graph::new();
    let vars = params.register_frozen(&mut g);
    let features = field(&mut g, &vars, &config.model, &inputs).map_err(runtime)?;
    let y = decode(&mut g, features, g_fine, &centers, &vars).map_err(runtime)?;
    let rows = g.value(y).data();
    let denorm = |v: f32, var| denormalize(var, v as f64);
    let temp = Tensor::from_fn([1, h, w], |i| denorm(rows[i * 3], Variable::Temperature));
    let u = Tensor::from_fn([h, w], |i| denorm(rows[i * 3 + 1], Variable::WindComponent));
    let v = Tensor::from_fn([h, w], |i| denorm(rows[i * 3 + 2], Variable::WindComponent));
    let speed = Tensor::from_fn([1, h, w], |i| u.data()[i].hypot(v.data()[i]));
    let paths = [out.join("temperature.pgm"), out.join("wind_speed.pgm"), out.join("wind_arrows.csv")];
    // normalized range [-1, 1] for temperature, [0, 1] for speed
    let (t_lo, t_hi) = (denormalize(Variable::Temperature, -1.0), denormalize(Variable::Temperature, 1.0));
    let s_hi = denormalize(Variable::WindComponent, 1.0);
    render_field_map(&temp, t_lo, t_hi, &paths[0]).map_err(runtime)?;
    render_field_map(&speed, 0.0, s_hi, &paths[1]).map_err(runtime)?;
    overlay_wind(&u, &v, 16, &paths[2]).map_err(runtime)?;
    Ok(paths.to_vec())
}
