use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{denormalize, uv_to_wind, Dataset, Patch, PatchProtocol, StationObservation, Variable};
use crate::error::{Error, Result};
use crate::interp::{idw_predict_points, BASELINE_EXPONENT};
use crate::model::{forward, ModelInputs, SpliifConfig, SpliifParams};
use crate::numerics::Graph;

use super::metrics::{angular_error, error_histogram, percent_improvement, ErrorStats, Metric};

/// What to evaluate and how targets are grouped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalProtocol {
    pub seed: u64,
    /// Input station counts to compare.
    pub n_inputs: Vec<usize>,
    /// Target altitude bin edges in meters.
    pub altitude_edges: Vec<f64>,
    /// Wind speeds below this (m/s) are excluded from angle metrics.
    pub calm_threshold: f64,
    /// Input count whose absolute errors feed the histograms.
    pub histogram_n_input: usize,
    /// Evaluate only the first this-many time slices (all when absent).
    pub max_time_slices: Option<usize>,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        EvalProtocol {
            seed: 11,
            n_inputs: vec![5, 10, 20, 30],
            altitude_edges: vec![0.0, 100.0, 250.0, 500.0, 1000.0, 3000.0],
            calm_threshold: 0.5,
            histogram_n_input: 10,
            max_time_slices: None,
        }
    }
}

impl EvalProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.n_inputs.is_empty() || self.n_inputs.contains(&0) {
            return Err(Error::Config("eval.n_inputs must be non-empty and positive".into()));
        }
        let e = &self.altitude_edges;
        if e.len() < 2 || e.windows(2).any(|w| !(w[1] > w[0])) || e.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("eval.altitude_edges must be strictly increasing".into()));
        }
        if !(self.calm_threshold >= 0.0) {
            return Err(Error::Config("eval.calm_threshold must be non-negative".into()));
        }
        if self.max_time_slices == Some(0) {
            return Err(Error::Config("eval.max_time_slices must be positive".into()));
        }
        Ok(())
    }

    /// Bin of an altitude; values outside the edges fall in the end bins.
    pub fn altitude_bin(&self, altitude: f64) -> usize {
        let bins = self.altitude_edges.len() - 1;
        self.altitude_edges[1..]
            .partition_point(|&e| e <= altitude)
            .min(bins - 1)
    }
}

/// Predicts physical `[temperature °C, u m/s, v m/s]` at every target station
/// of a patch from its input stations.
pub trait Predictor: Sync {
    fn predict(&self, patch: &Patch) -> Result<Vec<[f64; 3]>>;
}

/// The trained network.
pub struct ModelPredictor<'a> {
    pub params: &'a SpliifParams,
    pub config: &'a SpliifConfig,
}

const QUERY_CHUNK: usize = 64;

impl Predictor for ModelPredictor<'_> {
    fn predict(&self, patch: &Patch) -> Result<Vec<[f64; 3]>> {
        let stations = patch.inputs()?;
        let inputs = ModelInputs {
            stations: &stations,
            dense: None,
            topo: &patch.topo,
            grid_coarse: &patch.grid_coarse,
            grid_fine: &patch.grid_fine,
        };
        let queries = patch.target_queries();
        let mut out = Vec::with_capacity(queries.len());
        for chunk in queries.chunks(QUERY_CHUNK) {
            let mut g = Graph::new();
            let vars = self.params.register_frozen(&mut g);
            let y = forward(&mut g, &vars, self.config, &inputs, chunk)?;
            out.extend(g.value(y).data().chunks_exact(3).map(|r| {
                [
                    denormalize(Variable::Temperature, r[0] as f64),
                    denormalize(Variable::WindComponent, r[1] as f64),
                    denormalize(Variable::WindComponent, r[2] as f64),
                ]
            }));
        }
        Ok(out)
    }
}

/// Fixed inverse-square IDW over all input stations.
pub struct IdwBaseline;

impl Predictor for IdwBaseline {
    fn predict(&self, patch: &Patch) -> Result<Vec<[f64; 3]>> {
        let stations = &patch.input_stations;
        let mut values = Vec::with_capacity(stations.len() * 3);
        let mut mask = Vec::with_capacity(stations.len() * 3);
        for o in stations {
            let uv = o.wind_uv();
            values.extend([o.temperature.unwrap_or(0.0), uv.map_or(0.0, |w| w.0), uv.map_or(0.0, |w| w.1)]);
            mask.extend([o.temperature.is_some(), uv.is_some(), uv.is_some()]);
        }
        let positions: Vec<(f64, f64)> = stations.iter().map(|o| o.position()).collect();
        let flat = idw_predict_points(
            &positions,
            &values,
            &mask,
            3,
            &patch.target_queries(),
            BASELINE_EXPONENT,
            1e-6,
        )?;
        Ok(flat.chunks_exact(3).map(|r| [r[0], r[1], r[2]]).collect())
    }
}

/// `(metric, altitude bin, n_input)`.
pub type BinKey = (Metric, usize, usize);

#[derive(Clone, Debug, Default, PartialEq)]
struct SliceResult {
    model: BTreeMap<BinKey, ErrorStats>,
    baseline: BTreeMap<BinKey, ErrorStats>,
    model_errors: BTreeMap<Metric, Vec<f64>>,
    baseline_errors: BTreeMap<Metric, Vec<f64>>,
}

/// Absolute errors of one prediction against one observation.
fn score(
    obs: &StationObservation,
    pred: &[f64; 3],
    calm: f64,
) -> impl Iterator<Item = (Metric, f64)> {
    let mut out = Vec::with_capacity(3);
    if let Some(t) = obs.temperature {
        out.push((Metric::Temperature, (pred[0] - t).abs()));
    }
    if let (Some(speed), Some(dir)) = (obs.wind_speed, obs.wind_dir) {
        let (ps, pd) = uv_to_wind(pred[1], pred[2]);
        out.push((Metric::WindSpeed, (ps - speed).abs()));
        if speed >= calm && ps >= calm {
            out.push((Metric::WindAngle, angular_error(pd, dir)));
        }
    }
    out.into_iter().filter(|(_, e)| e.is_finite())
}

/// One row of a metrics table.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub metric: Metric,
    pub alt_lo: f64,
    pub alt_hi: f64,
    pub n_input: usize,
    pub rmse: f64,
    pub mae: f64,
    pub count: u64,
    /// Baseline RMSE and percent improvement, in comparison tables.
    pub baseline: Option<(f64, Option<f64>)>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsTable {
    pub rows: Vec<MetricsRow>,
}

impl MetricsTable {
    pub fn get(&self, metric: Metric, alt_lo: f64, n_input: usize) -> Option<&MetricsRow> {
        self.rows
            .iter()
            .find(|r| r.metric == metric && r.alt_lo == alt_lo && r.n_input == n_input)
    }

    pub fn to_csv(&self) -> String {
        let comparison = self.rows.iter().any(|r| r.baseline.is_some());
        let mut out = String::from("variable,alt_lo,alt_hi,n_input,rmse,mae,count");
        if comparison {
            out.push_str(",rmse_baseline,improvement_pct");
        }
        out.push('\n');
        for r in &self.rows {
            write!(out, "{},{},{},{},{},{},{}", r.metric, r.alt_lo, r.alt_hi, r.n_input, r.rmse, r.mae, r.count)
                .expect("string write");
            if comparison {
                let (base, imp) = r.baseline.unwrap_or((f64::NAN, None));
                write!(out, ",{base},{}", imp.map(|v| v.to_string()).unwrap_or_default()).expect("string write");
            }
            out.push('\n');
        }
        out
    }
}

/// Everything `evaluate` produces.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub protocol: EvalProtocol,
    pub model: Option<MetricsTable>,
    pub baseline: MetricsTable,
    /// Model rows annotated with the baseline RMSE and percent improvement.
    pub comparison: Option<MetricsTable>,
    /// Standard error over slices of the per-slice percent improvement.
    pub improvement_se: BTreeMap<BinKey, f64>,
    /// Per-slice percent improvement pooled over altitude bins, keyed by
    /// `(metric, n_input)` and indexed by slice (`None` where undefined).
    pub slice_improvement: BTreeMap<(Metric, usize), Vec<Option<f64>>>,
    /// Improvement pooled over altitude bins and slices.
    pub pooled_improvement: BTreeMap<(Metric, usize), f64>,
    /// Absolute errors at `histogram_n_input` (model, else baseline).
    pub histogram_errors: BTreeMap<Metric, Vec<f64>>,
    pub slices: usize,
}

impl EvalReport {
    /// The comparison table with the standard error of the per-slice
    /// improvement appended; `None` without a model.
    pub fn improvement_csv(&self) -> Option<String> {
        let table = self.comparison.as_ref()?;
        let mut lines = table.to_csv().lines().map(str::to_string).collect::<Vec<_>>().into_iter();
        let mut out = format!("{},improvement_se\n", lines.next()?);
        for (row, line) in table.rows.iter().zip(lines) {
            let bin = self.protocol.altitude_bin(row.alt_lo);
            let se = self.improvement_se.get(&(row.metric, bin, row.n_input));
            writeln!(out, "{line},{}", se.map(|v| v.to_string()).unwrap_or_default()).expect("string write");
        }
        Some(out)
    }

    /// `variable,bin_lo,bin_hi,density` for every metric with errors.
    pub fn histogram_csv(&self) -> Result<String> {
        let mut out = String::from("variable,bin_lo,bin_hi,density\n");
        for (metric, errors) in &self.histogram_errors {
            if errors.is_empty() {
                continue;
            }
            for (lo, hi, d) in error_histogram(errors, &metric.histogram_edges())? {
                writeln!(out, "{metric},{lo},{hi},{d}").expect("string write");
            }
        }
        Ok(out)
    }
}

/// One evaluation unit: a time slice and a patch-sized tile of the world.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalSlice {
    pub time_index: usize,
    pub row0: usize,
    pub col0: usize,
}

/// Time slices crossed with non-overlapping patch tiles, time-major.
pub fn eval_slices(dataset: &Dataset, patch: &PatchProtocol, protocol: &EvalProtocol) -> Vec<EvalSlice> {
    let g = dataset.grid();
    let p = patch.patch_size;
    let starts = |n: usize| -> Vec<usize> { (0..n.saturating_sub(p) + 1).step_by(p.max(1)).collect() };
    let times = protocol.max_time_slices.unwrap_or(usize::MAX).min(dataset.slices.len());
    let mut out = Vec::new();
    for time_index in 0..times {
        for &row0 in &starts(g.height) {
            for &col0 in &starts(g.width) {
                out.push(EvalSlice { time_index, row0, col0 });
            }
        }
    }
    out
}

fn usable(o: &StationObservation) -> bool {
    o.temperature.is_some() || o.wind_uv().is_some()
}

#[allow(clippy::too_many_arguments)]
fn evaluate_slice(
    index: usize,
    slice: EvalSlice,
    model: Option<&dyn Predictor>,
    baseline: &dyn Predictor,
    dataset: &Dataset,
    held_out: &BTreeSet<String>,
    patch_protocol: &PatchProtocol,
    protocol: &EvalProtocol,
) -> Result<SliceResult> {
    let mut result = SliceResult::default();
    let p = patch_protocol.patch_size;
    let bounds = dataset.grid().window(slice.row0, slice.col0, p, p);
    let observations = &dataset.slices[slice.time_index].observations;
    let inside = |o: &&StationObservation| bounds.contains(o.lon, o.lat) && usable(o);
    let targets: Vec<StationObservation> = observations
        .iter()
        .filter(inside)
        .filter(|o| held_out.contains(&o.station_id))
        .cloned()
        .collect();
    let mut pool: Vec<StationObservation> = observations
        .iter()
        .filter(inside)
        .filter(|o| !held_out.contains(&o.station_id))
        .cloned()
        .collect();
    if targets.is_empty() {
        return Ok(result);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(protocol.seed);
    rng.set_stream(index as u64);
    pool.shuffle(&mut rng);
    let base = Patch::at(dataset, slice.time_index, slice.row0, slice.col0, patch_protocol, Vec::new(), targets)?;
    for &n in &protocol.n_inputs {
        if pool.len() < n {
            continue;
        }
        let patch = Patch {
            input_stations: pool[..n].to_vec(),
            ..base.clone()
        };
        let run = |predictor: &dyn Predictor,
                       stats: &mut BTreeMap<BinKey, ErrorStats>,
                       errors: &mut BTreeMap<Metric, Vec<f64>>|
         -> Result<()> {
            let preds = predictor.predict(&patch)?;
            if preds.len() != patch.target_stations.len() {
                return Err(Error::Contract(format!(
                    "predictor returned {} rows for {} targets",
                    preds.len(),
                    patch.target_stations.len()
                )));
            }
            for (obs, pred) in patch.target_stations.iter().zip(&preds) {
                let bin = protocol.altitude_bin(obs.altitude);
                for (metric, err) in score(obs, pred, protocol.calm_threshold) {
                    stats.entry((metric, bin, n)).or_default().push(err);
                    if n == protocol.histogram_n_input {
                        errors.entry(metric).or_default().push(err);
                    }
                }
            }
            Ok(())
        };
        run(baseline, &mut result.baseline, &mut result.baseline_errors)?;
        if let Some(m) = model {
            run(m, &mut result.model, &mut result.model_errors)?;
        }
    }
    Ok(result)
}

fn table(
    stats: &BTreeMap<BinKey, ErrorStats>,
    baseline: Option<&BTreeMap<BinKey, ErrorStats>>,
    edges: &[f64],
) -> MetricsTable {
    let rows = stats
        .iter()
        .filter(|(_, s)| s.count > 0)
        .map(|(&(metric, bin, n_input), s)| {
            let rmse = s.rmse().expect("non-empty");
            MetricsRow {
                metric,
                alt_lo: edges[bin],
                alt_hi: edges[bin + 1],
                n_input,
                rmse,
                mae: s.mae().expect("non-empty"),
                count: s.count,
                baseline: baseline
                    .and_then(|b| b.get(&(metric, bin, n_input)))
                    .and_then(|b| b.rmse())
                    .map(|b| (b, percent_improvement(rmse, b))),
            }
        })
        .collect();
    MetricsTable { rows }
}

fn mean_se(values: &[f64]) -> Option<(f64, f64)> {
    if values.len() < 2 {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Some((mean, (var / n).sqrt()))
}

/// Standard error of the mean of `values`, skipping undefined entries.
pub fn standard_error(values: &[Option<f64>]) -> Option<f64> {
    let v: Vec<f64> = values.iter().flatten().copied().collect();
    mean_se(&v).map(|(_, se)| se)
}

/// Scores `model` (when given) and `baseline` on the held-out stations of
/// every slice, with identical inputs. Slices are spread over `threads`
/// workers; per-slice statistics are merged in slice order, so the report
/// does not depend on the worker count.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    model: Option<&dyn Predictor>,
    baseline: &dyn Predictor,
    dataset: &Dataset,
    held_out: &BTreeSet<String>,
    patch_protocol: &PatchProtocol,
    protocol: &EvalProtocol,
    threads: usize,
) -> Result<EvalReport> {
    protocol.validate()?;
    patch_protocol.validate()?;
    let slices = eval_slices(dataset, patch_protocol, protocol);
    if slices.is_empty() {
        return Err(Error::Input(format!(
            "patch size {} does not fit the {}x{} world",
            patch_protocol.patch_size,
            dataset.grid().height,
            dataset.grid().width
        )));
    }
    let threads = threads.clamp(1, slices.len());
    let mut results: Vec<Option<Result<SliceResult>>> = (0..slices.len()).map(|_| None).collect();
    let run = |i: usize| {
        evaluate_slice(i, slices[i], model, baseline, dataset, held_out, patch_protocol, protocol)
    };
    if threads == 1 {
        for (i, slot) in results.iter_mut().enumerate() {
            *slot = Some(run(i));
        }
    } else {
        let collected: Vec<Vec<(usize, Result<SliceResult>)>> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..threads)
                .map(|w| {
                    let run = &run;
                    let n = slices.len();
                    s.spawn(move || (w..n).step_by(threads).map(|i| (i, run(i))).collect::<Vec<_>>())
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("evaluation worker panicked"))
                .collect()
        });
        for (i, r) in collected.into_iter().flatten() {
            results[i] = Some(r);
        }
    }
    let results: Vec<SliceResult> = results
        .into_iter()
        .map(|r| r.expect("every slice evaluated"))
        .collect::<Result<_>>()?;

    let mut model_stats: BTreeMap<BinKey, ErrorStats> = BTreeMap::new();
    let mut base_stats: BTreeMap<BinKey, ErrorStats> = BTreeMap::new();
    let mut model_errors: BTreeMap<Metric, Vec<f64>> = BTreeMap::new();
    let mut base_errors: BTreeMap<Metric, Vec<f64>> = BTreeMap::new();
    let mut per_slice_bins: BTreeMap<BinKey, Vec<f64>> = BTreeMap::new();
    let mut slice_improvement: BTreeMap<(Metric, usize), Vec<Option<f64>>> = BTreeMap::new();
    for r in &results {
        for (k, s) in &r.model {
            model_stats.entry(*k).or_default().merge(s);
        }
        for (k, s) in &r.baseline {
            base_stats.entry(*k).or_default().merge(s);
        }
        for (m, e) in &r.model_errors {
            model_errors.entry(*m).or_default().extend(e);
        }
        for (m, e) in &r.baseline_errors {
            base_errors.entry(*m).or_default().extend(e);
        }
        if model.is_none() {
            continue;
        }
        for (k, s) in &r.model {
            let imp = r
                .baseline
                .get(k)
                .and_then(|b| b.rmse())
                .and_then(|b| percent_improvement(s.rmse()?, b));
            if let Some(v) = imp {
                per_slice_bins.entry(*k).or_default().push(v);
            }
        }
        for metric in Metric::ALL {
            for &n in &protocol.n_inputs {
                let pool = |m: &BTreeMap<BinKey, ErrorStats>| {
                    let mut acc = ErrorStats::default();
                    for ((mm, _, nn), s) in m {
                        if *mm == metric && *nn == n {
                            acc.merge(s);
                        }
                    }
                    acc
                };
                let (pm, pb) = (pool(&r.model), pool(&r.baseline));
                let imp = match (pm.rmse(), pb.rmse()) {
                    (Some(m), Some(b)) => percent_improvement(m, b),
                    _ => None,
                };
                slice_improvement.entry((metric, n)).or_default().push(imp);
            }
        }
    }
    let edges = &protocol.altitude_edges;
    let baseline_table = table(&base_stats, None, edges);
    let (model_table, comparison, pooled_improvement) = if model.is_some() {
        let mut pooled = BTreeMap::new();
        for metric in Metric::ALL {
            for &n in &protocol.n_inputs {
                let mut pm = ErrorStats::default();
                let mut pb = ErrorStats::default();
                for (k, s) in &model_stats {
                    if k.0 == metric && k.2 == n {
                        pm.merge(s);
                    }
                }
                for (k, s) in &base_stats {
                    if k.0 == metric && k.2 == n {
                        pb.merge(s);
                    }
                }
                if let (Some(m), Some(b)) = (pm.rmse(), pb.rmse()) {
                    if let Some(v) = percent_improvement(m, b) {
                        pooled.insert((metric, n), v);
                    }
                }
            }
        }
        (
            Some(table(&model_stats, None, edges)),
            Some(table(&model_stats, Some(&base_stats), edges)),
            pooled,
        )
    } else {
        (None, None, BTreeMap::new())
    };
    let improvement_se = per_slice_bins
        .iter()
        .filter_map(|(k, v)| mean_se(v).map(|(_, se)| (*k, se)))
        .collect();
    Ok(EvalReport {
        protocol: protocol.clone(),
        model: model_table,
        baseline: baseline_table,
        comparison,
        improvement_se,
        slice_improvement,
        pooled_improvement,
        histogram_errors: if model.is_some() { model_errors } else { base_errors },
        slices: slices.len(),
    })
}
