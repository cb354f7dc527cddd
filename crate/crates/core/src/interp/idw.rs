//! Inverse-distance weighting.
//!
//! Weights are `w_k = (d_k / length_scale + epsilon)^(−exponent)` with `d_k`
//! the flat lon/lat distance in degrees. Normalised weights are evaluated as a
//! softmax over `−exponent · ln(d_k / length_scale + epsilon)` so that large
//! exponents near a station cannot overflow.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{BackwardOp, GradSink, Graph, Real, Tensor, Var};

use super::GridSpec;

/// Fixed hyper-parameters of the learnable IDW front end. The learnable part
/// (per-channel exponent and length scale, stored unconstrained and mapped
/// through softplus) lives in the model's parameter set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdwParams {
    pub k_neighbors: usize,
    pub epsilon: f64,
}

impl Default for IdwParams {
    fn default() -> Self {
        IdwParams {
            k_neighbors: 16,
            epsilon: 1e-6,
        }
    }
}

impl IdwParams {
    pub fn validate(&self) -> Result<()> {
        if self.k_neighbors < 1 {
            return Err(Error::Config("idw k_neighbors must be >= 1".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("idw epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// Station positions and their (normalised) values, `[N, C]`, with a
/// per-value validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseInputs<T: Real = f32> {
    pub positions: Vec<(f64, f64)>,
    pub values: Tensor<T>,
    pub mask: Vec<bool>,
}

impl<T: Real> SparseInputs<T> {
    pub fn new(positions: Vec<(f64, f64)>, values: Tensor<T>, mask: Vec<bool>) -> Result<Self> {
        let n = positions.len();
        match values.shape() {
            &[rows, c] if rows == n && mask.len() == n * c => {}
            s => {
                return Err(Error::Dimension(format!(
                    "{n} stations with values {s:?} and {} mask entries",
                    mask.len()
                )))
            }
        }
        if positions.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
            return Err(Error::Input("station coordinates must be finite".into()));
        }
        Ok(SparseInputs {
            positions,
            values,
            mask,
        })
    }

    /// All values valid.
    pub fn unmasked(positions: Vec<(f64, f64)>, values: Tensor<T>) -> Result<Self> {
        let mask = vec![true; values.len()];
        Self::new(positions, values, mask)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[1]
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn softplus_inverse(y: f64) -> f64 {
    assert!(y > 0.0, "softplus only reaches positive values");
    // ln(e^y − 1), rearranged for large y.
    y + (-(-y).exp_m1()).ln()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Station indices sorted by (distance, index).
fn by_distance(positions: &[(f64, f64)], lon: f64, lat: f64, order: &mut Vec<(f64, usize)>) {
    order.clear();
    order.extend(
        positions
            .iter()
            .enumerate()
            .map(|(i, &(x, y))| ((x - lon).hypot(y - lat), i)),
    );
    order.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
}

impl<T: Real> Graph<T> {
    /// Densifies station values onto every pixel center of `grid`, giving a
    /// `[C, H, W]` field. Each channel uses the `k_neighbors` nearest stations
    /// holding a valid value for it; a channel with no valid station is 0.
    ///
    /// `values` is `[N, C]`; `exponent_raw` and `length_scale_raw` are `[C]`
    /// and pass through softplus.
    #[allow(clippy::too_many_arguments)]
    pub fn idw_densify(
        &mut self,
        positions: &[(f64, f64)],
        values: Var,
        mask: &[bool],
        grid: &GridSpec,
        exponent_raw: Var,
        length_scale_raw: Var,
        params: &IdwParams,
    ) -> Result<Var> {
        if positions.is_empty() {
            return Err(Error::Input("idw_densify needs at least one station".into()));
        }
        grid.validate()?;
        params.validate()?;
        let n = positions.len();
        let c = match *self.shape(values) {
            [rows, c] if rows == n && mask.len() == n * c => c,
            ref s => {
                return Err(Error::Dimension(format!(
                    "idw_densify: {n} stations, values {s:?}, {} mask entries",
                    mask.len()
                )))
            }
        };
        if self.shape(exponent_raw) != [c] || self.shape(length_scale_raw) != [c] {
            return Err(Error::Dimension(format!(
                "idw_densify: exponent {:?} and length scale {:?} must both be [{c}]",
                self.shape(exponent_raw),
                self.shape(length_scale_raw)
            )));
        }
        if positions.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
            return Err(Error::Input("station coordinates must be finite".into()));
        }
        let exponent: Vec<f64> = self.value(exponent_raw).data().iter().map(|v| softplus(v.as_f64())).collect();
        let length: Vec<f64> = self.value(length_scale_raw).data().iter().map(|v| softplus(v.as_f64())).collect();
        let vals = self.value(values).data();
        let (h, w) = (grid.height, grid.width);
        let pixels = h * w;
        let k = params.k_neighbors;
        let eps = T::of(params.epsilon);
        let p_t: Vec<T> = exponent.iter().map(|&p| T::of(p)).collect();
        let l_t: Vec<T> = length.iter().map(|&l| T::of(l)).collect();

        let mut out = vec![T::zero(); c * pixels];
        let mut saved = IdwSaved::with_capacity(c * pixels, k.min(n));
        let mut order = Vec::with_capacity(n);
        let mut logits: Vec<T> = Vec::with_capacity(k);
        for row in 0..h {
            for col in 0..w {
                let (lon, lat) = grid.pixel_center(row, col);
                by_distance(positions, lon, lat, &mut order);
                let pixel = row * w + col;
                for ch in 0..c {
                    let start = saved.entries.len();
                    logits.clear();
                    for &(d, idx) in order.iter().filter(|(_, i)| mask[i * c + ch]).take(k) {
                        let scaled = T::of(d) / l_t[ch];
                        let base = scaled + eps;
                        let log_term = base.ln();
                        logits.push(-p_t[ch] * log_term);
                        saved.entries.push(IdwEntry {
                            station: idx as u32,
                            weight: T::zero(),
                            log_term,
                            ratio: scaled / base,
                        });
                    }
                    saved.offsets.push(start);
                    if logits.is_empty() {
                        continue;
                    }
                    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
                    let mut total = T::zero();
                    for (e, &a) in saved.entries[start..].iter_mut().zip(&logits) {
                        e.weight = (a - max).exp();
                        total += e.weight;
                    }
                    let mut v = T::zero();
                    for e in &mut saved.entries[start..] {
                        e.weight = e.weight / total;
                        v += e.weight * vals[e.station as usize * c + ch];
                    }
                    out[ch * pixels + pixel] = v;
                }
            }
        }
        saved.offsets.push(saved.entries.len());
        let exponent_slope = softplus_slope(self.value(exponent_raw).data());
        let length_slope = softplus_slope(self.value(length_scale_raw).data());
        let value = Tensor::new([c, h, w], out)?;
        self.push(
            "idw_densify",
            value,
            &[values, exponent_raw, length_scale_raw],
            IdwBackward {
                values,
                exponent_raw,
                length_scale_raw,
                channels: c,
                pixels,
                exponent: p_t,
                length: l_t,
                exponent_slope,
                length_slope,
                saved,
            },
        )
    }
}

fn softplus_slope<T: Real>(raw: &[T]) -> Vec<T> {
    raw.iter().map(|v| T::of(sigmoid(v.as_f64()))).collect()
}

struct IdwEntry<T> {
    station: u32,
    weight: T,
    log_term: T,
    /// `(d/ℓ) / (d/ℓ + ε)`
    ratio: T,
}

struct IdwSaved<T> {
    /// `offsets[pixel * C + ch]..offsets[pixel * C + ch + 1]` indexes `entries`.
    offsets: Vec<usize>,
    entries: Vec<IdwEntry<T>>,
}

impl<T> IdwSaved<T> {
    fn with_capacity(slots: usize, per_slot: usize) -> Self {
        IdwSaved {
            offsets: Vec::with_capacity(slots + 1),
            entries: Vec::with_capacity(slots * per_slot),
        }
    }
}

struct IdwBackward<T> {
    values: Var,
    exponent_raw: Var,
    length_scale_raw: Var,
    channels: usize,
    pixels: usize,
    exponent: Vec<T>,
    length: Vec<T>,
    exponent_slope: Vec<T>,
    length_slope: Vec<T>,
    saved: IdwSaved<T>,
}

impl<T: Real> BackwardOp<T> for IdwBackward<T> {
    fn backward(&self, g: &Tensor<T>, sink: &mut GradSink<'_, T>) {
        let c = self.channels;
        let vals = sink.value(self.values).data();
        let mut d_exp = vec![T::zero(); c];
        let mut d_len = vec![T::zero(); c];
        let want_values = sink.wants(self.values);
        let mut d_vals = want_values.then(|| vec![T::zero(); vals.len()]);
        for pixel in 0..self.pixels {
            for ch in 0..c {
                let slot = pixel * c + ch;
                let entries = &self.saved.entries[self.saved.offsets[slot]..self.saved.offsets[slot + 1]];
                if entries.is_empty() {
                    continue;
                }
                let go = g.data()[ch * self.pixels + pixel];
                if go == T::zero() {
                    continue;
                }
                let v: T = entries
                    .iter()
                    .map(|e| e.weight * vals[e.station as usize * c + ch])
                    .sum();
                for e in entries {
                    let x = vals[e.station as usize * c + ch];
                    // dv/dlogit_k = s_k (x_k − v)
                    let dlogit = go * e.weight * (x - v);
                    d_exp[ch] -= dlogit * e.log_term;
                    d_len[ch] += dlogit * self.exponent[ch] * e.ratio / self.length[ch];
                    if let Some(d) = d_vals.as_mut() {
                        d[e.station as usize * c + ch] += go * e.weight;
                    }
                }
            }
        }
        if sink.wants(self.exponent_raw) {
            for ((d, &s), &gv) in sink.grad_mut(self.exponent_raw).iter_mut().zip(&self.exponent_slope).zip(&d_exp) {
                *d += gv * s;
            }
        }
        if sink.wants(self.length_scale_raw) {
            for ((d, &s), &gv) in sink.grad_mut(self.length_scale_raw).iter_mut().zip(&self.length_slope).zip(&d_len) {
                *d += gv * s;
            }
        }
        if let Some(dv) = d_vals {
            for (d, v) in sink.grad_mut(self.values).iter_mut().zip(dv) {
                *d += v;
            }
        }
    }
}

/// Fixed-exponent IDW over all stations (the evaluation baseline), with unit
/// length scale. A query closer than `epsilon` to a station with a valid value
/// returns that station's value exactly (lowest index wins).
///
/// `values` is row-major `[N, C]`; the result is `[queries, C]`.
pub fn idw_predict_points(
    positions: &[(f64, f64)],
    values: &[f64],
    mask: &[bool],
    channels: usize,
    queries: &[(f64, f64)],
    exponent: f64,
    epsilon: f64,
) -> Result<Vec<f64>> {
    let n = positions.len();
    if n == 0 {
        return Err(Error::Input("idw_predict_points needs at least one station".into()));
    }
    if values.len() != n * channels || mask.len() != n * channels {
        return Err(Error::Dimension(format!(
            "{n} stations x {channels} channels, got {} values and {} mask entries",
            values.len(),
            mask.len()
        )));
    }
    for ch in 0..channels {
        if !(0..n).any(|i| mask[i * channels + ch]) {
            return Err(Error::Input(format!("channel {ch} has no valid station value")));
        }
    }
    let mut out = Vec::with_capacity(queries.len() * channels);
    let mut dist = vec![0.0; n];
    for &(qx, qy) in queries {
        if !qx.is_finite() || !qy.is_finite() {
            return Err(Error::Input(format!("non-finite query ({qx}, {qy})")));
        }
        for (d, &(x, y)) in dist.iter_mut().zip(positions) {
            *d = (x - qx).hypot(y - qy);
        }
        for ch in 0..channels {
            let valid = || (0..n).filter(|&i| mask[i * channels + ch]);
            if let Some(hit) = valid().find(|&i| dist[i] < epsilon) {
                out.push(values[hit * channels + ch]);
                continue;
            }
            let logits: Vec<(usize, f64)> = valid().map(|i| (i, -exponent * (dist[i] + epsilon).ln())).collect();
            let max = logits.iter().map(|l| l.1).fold(f64::NEG_INFINITY, f64::max);
            let (mut num, mut den) = (0.0, 0.0);
            for &(i, a) in &logits {
                let wgt = (a - max).exp();
                num += wgt * values[i * channels + ch];
                den += wgt;
            }
            out.push(num / den);
        }
    }
    Ok(out)
}
