//! Bilinear resampling of `[C, H, W]` fields, on a regular output lattice or
//! at scattered lon/lat queries.

use crate::error::{Error, Result};
use crate::numerics::{BackwardOp, GradSink, Graph, Real, Tensor, Var};

use super::GridSpec;

/// Source taps `(lo, hi, frac)` for each output index along one axis, using
/// pixel centers at `(i + 0.5) / extent` and clamping at the edges.
fn axis_taps(src: usize, dst: usize, range: std::ops::Range<usize>) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    range
        .map(|o| {
            let pos = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

/// Output rows/cols of a resize that should actually be computed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub row0: usize,
    pub col0: usize,
    pub rows: usize,
    pub cols: usize,
}

impl<T: Real> Graph<T> {
    /// Bilinear resize of `[C, H, W]` to `[C, out_h, out_w]` (half-pixel
    /// centers, edge clamp).
    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        self.bilinear_resize_window(
            x,
            out_h,
            out_w,
            Window {
                row0: 0,
                col0: 0,
                rows: out_h,
                cols: out_w,
            },
        )
    }

    /// The `window` sub-block of `bilinear_resize(x, out_h, out_w)`, computed
    /// without materialising the rest of the output.
    pub fn bilinear_resize_window(&mut self, x: Var, out_h: usize, out_w: usize, window: Window) -> Result<Var> {
        let [c, h, w] = self.value(x).chw()?;
        if out_h < 1 || out_w < 1 {
            return Err(Error::Input(format!("resize target {out_h}x{out_w} is empty")));
        }
        if h < 2 || w < 2 {
            return Err(Error::Input(format!("resize source {h}x{w} must be at least 2x2")));
        }
        if window.row0 + window.rows > out_h || window.col0 + window.cols > out_w {
            return Err(Error::Dimension(format!(
                "window {window:?} exceeds resize target {out_h}x{out_w}"
            )));
        }
        let rows = axis_taps(h, out_h, window.row0..window.row0 + window.rows);
        let cols = axis_taps(w, out_w, window.col0..window.col0 + window.cols);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(c * rows.len() * cols.len());
        for ch in 0..c {
            let plane = &src[ch * h * w..(ch + 1) * h * w];
            for &(r0, r1, fy) in &rows {
                let fy = T::of(fy);
                let (top, bottom) = (&plane[r0 * w..][..w], &plane[r1 * w..][..w]);
                for &(c0, c1, fx) in &cols {
                    let fx = T::of(fx);
                    let t = top[c0] * (T::one() - fx) + top[c1] * fx;
                    let b = bottom[c0] * (T::one() - fx) + bottom[c1] * fx;
                    out.push(t * (T::one() - fy) + b * fy);
                }
            }
        }
        let value = Tensor::new([c, window.rows, window.cols], out)?;
        self.push("bilinear_resize", value, &[x], Resize { x, c, h, w, rows, cols })
    }

    /// Bilinearly samples `latent` (laid out on `grid`) at each `(lon, lat)`
    /// query and appends the offset to the nearest latent pixel center,
    /// measured in half cells as `(row, col)`. Output is `[N, C + 2]`.
    ///
    /// Equidistant nearest-pixel candidates resolve to the lowest row, then
    /// the lowest column.
    pub fn sample_at_coords(&mut self, latent: Var, grid: &GridSpec, queries: &[(f64, f64)]) -> Result<Var> {
        let [_, h, w] = self.value(latent).chw()?;
        if h != grid.height || w != grid.width {
            return Err(Error::Dimension(format!(
                "latent extents {h}x{w} do not match grid {}x{}",
                grid.height, grid.width
            )));
        }
        let full = Window {
            row0: 0,
            col0: 0,
            rows: h,
            cols: w,
        };
        self.sample_in_window(latent, grid, full, queries)
    }

    /// [`Graph::sample_at_coords`] where `latent` only holds the `window`
    /// sub-block of a field laid out on `grid`. Taps and offsets are computed
    /// on the full grid, so the result is identical to sampling the full field
    /// whenever the taps fall inside the window.
    pub(crate) fn sample_in_window(
        &mut self,
        latent: Var,
        grid: &GridSpec,
        window: Window,
        queries: &[(f64, f64)],
    ) -> Result<Var> {
        let [c, lh, lw] = self.value(latent).chw()?;
        let (h, w) = (grid.height, grid.width);
        if (lh, lw) != (window.rows, window.cols) || window.row0 + lh > h || window.col0 + lw > w {
            return Err(Error::Dimension(format!(
                "latent {lh}x{lw} does not fit window {window:?} of a {h}x{w} grid"
            )));
        }
        if h < 2 || w < 2 {
            return Err(Error::Input("sampling needs a grid of at least 2x2".into()));
        }
        let mut taps = Vec::with_capacity(queries.len());
        let mut offsets = Vec::with_capacity(queries.len());
        for &(lon, lat) in queries {
            if !lon.is_finite() || !lat.is_finite() {
                return Err(Error::Input(format!("non-finite query ({lon}, {lat})")));
            }
            let (r, q) = grid.to_pixel(lon, lat);
            const SLACK: f64 = 1e-6;
            if r < -0.5 - SLACK || r > h as f64 - 0.5 + SLACK || q < -0.5 - SLACK || q > w as f64 - 0.5 + SLACK {
                return Err(Error::Input(format!(
                    "query ({lon}, {lat}) lies outside the grid [{}, {}) x [{}, {})",
                    grid.lon_min,
                    grid.lon_max(),
                    grid.lat_min,
                    grid.lat_max()
                )));
            }
            let rc = r.clamp(0.0, (h - 1) as f64);
            let qc = q.clamp(0.0, (w - 1) as f64);
            let r0 = (rc.floor() as usize).min(h - 2);
            let c0 = (qc.floor() as usize).min(w - 2);
            if r0 < window.row0 || c0 < window.col0 || r0 + 2 > window.row0 + lh || c0 + 2 > window.col0 + lw {
                return Err(Error::Dimension(format!(
                    "query ({lon}, {lat}) samples outside window {window:?}"
                )));
            }
            taps.push((r0 - window.row0, c0 - window.col0, rc - r0 as f64, qc - c0 as f64));
            let near_r = ((r - 0.5).ceil().max(0.0) as usize).min(h - 1);
            let near_c = ((q - 0.5).ceil().max(0.0) as usize).min(w - 1);
            offsets.push((2.0 * (r - near_r as f64), 2.0 * (q - near_c as f64)));
        }
        let (h, w) = (lh, lw);
        let src = self.value(latent).data();
        let stride = c + 2;
        let mut out = Vec::with_capacity(queries.len() * stride);
        for (&(r0, c0, fy, fx), &(dr, dc)) in taps.iter().zip(&offsets) {
            let (fy, fx) = (T::of(fy), T::of(fx));
            for ch in 0..c {
                let plane = &src[ch * h * w..];
                let t = plane[r0 * w + c0] * (T::one() - fx) + plane[r0 * w + c0 + 1] * fx;
                let b = plane[(r0 + 1) * w + c0] * (T::one() - fx) + plane[(r0 + 1) * w + c0 + 1] * fx;
                out.push(t * (T::one() - fy) + b * fy);
            }
            out.push(T::of(dr));
            out.push(T::of(dc));
        }
        let value = Tensor::new([queries.len(), stride], out)?;
        self.push("sample_at_coords", value, &[latent], Sample { latent, c, h, w, taps })
    }
}

struct Resize {
    x: Var,
    c: usize,
    h: usize,
    w: usize,
    rows: Vec<(usize, usize, f64)>,
    cols: Vec<(usize, usize, f64)>,
}

impl<T: Real> BackwardOp<T> for Resize {
    fn backward(&self, g: &Tensor<T>, sink: &mut GradSink<'_, T>) {
        let dx = sink.grad_mut(self.x);
        let mut gi = g.data().iter();
        for ch in 0..self.c {
            let plane = &mut dx[ch * self.h * self.w..(ch + 1) * self.h * self.w];
            for &(r0, r1, fy) in &self.rows {
                let fy = T::of(fy);
                for &(c0, c1, fx) in &self.cols {
                    let fx = T::of(fx);
                    let go = *gi.next().expect("gradient matches output size");
                    let (top, bottom) = (go * (T::one() - fy), go * fy);
                    plane[r0 * self.w + c0] += top * (T::one() - fx);
                    plane[r0 * self.w + c1] += top * fx;
                    plane[r1 * self.w + c0] += bottom * (T::one() - fx);
                    plane[r1 * self.w + c1] += bottom * fx;
                }
            }
        }
    }
}

struct Sample {
    latent: Var,
    c: usize,
    h: usize,
    w: usize,
    taps: Vec<(usize, usize, f64, f64)>,
}

impl<T: Real> BackwardOp<T> for Sample {
    fn backward(&self, g: &Tensor<T>, sink: &mut GradSink<'_, T>) {
        let dl = sink.grad_mut(self.latent);
        let stride = self.c + 2;
        for (q, &(r0, c0, fy, fx)) in self.taps.iter().enumerate() {
            let (fy, fx) = (T::of(fy), T::of(fx));
            for ch in 0..self.c {
                let go = g.data()[q * stride + ch];
                let plane = &mut dl[ch * self.h * self.w..];
                let (top, bottom) = (go * (T::one() - fy), go * fy);
                plane[r0 * self.w + c0] += top * (T::one() - fx);
                plane[r0 * self.w + c0 + 1] += top * fx;
                plane[(r0 + 1) * self.w + c0] += bottom * (T::one() - fx);
                plane[(r0 + 1) * self.w + c0 + 1] += bottom * fx;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Closed-form bilinear evaluation of a `[H, W]` plane at continuous
    /// pixel coordinates with edge clamping.
    fn bilinear_at(plane: &[f64], h: usize, w: usize, r: f64, c: f64) -> f64 {
        let r = r.clamp(0.0, (h - 1) as f64);
        let c = c.clamp(0.0, (w - 1) as f64);
        let (r0, c0) = (r.floor() as usize, c.floor() as usize);
        let (r1, c1) = ((r0 + 1).min(h - 1), (c0 + 1).min(w - 1));
        let (fy, fx) = (r - r0 as f64, c - c0 as f64);
        let at = |i: usize, j: usize| plane[i * w + j];
        at(r0, c0) * (1.0 - fy) * (1.0 - fx)
            + at(r0, c1) * (1.0 - fy) * fx
            + at(r1, c0) * fy * (1.0 - fx)
            + at(r1, c1) * fy * fx
    }

    fn resize(x: Tensor<f64>, oh: usize, ow: usize) -> Tensor<f64> {
        let mut g = Graph::new();
        let v = g.constant(x);
        let y = g.bilinear_resize(v, oh, ow).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn same_size_resize_is_identity() {
        let x = Tensor::from_fn([2, 3, 5], |i| (i as f64 * 1.7).cos());
        assert_eq!(resize(x.clone(), 3, 5), x);
        let x32 = Tensor::<f32>::from_fn([1, 4, 4], |i| i as f32 * 0.3 - 2.0);
        let mut g = Graph::new();
        let v = g.constant(x32.clone());
        let y = g.bilinear_resize(v, 4, 4).unwrap();
        assert_eq!(g.value(y), &x32);
    }

    #[test]
    fn constant_field_stays_constant() {
        let y = resize(Tensor::full([2, 3, 4], 2.5), 7, 11);
        assert!(y.data().iter().all(|&v| (v - 2.5).abs() < 1e-15));
    }

    #[test]
    fn upsample_2x2_to_4x4_matches_closed_form() {
        let plane = [0.0, 2.0, 4.0, 6.0];
        let y = resize(Tensor::from_f64([1, 2, 2], &plane).unwrap(), 4, 4);
        for i in 0..4 {
            for j in 0..4 {
                let r = (i as f64 + 0.5) * 0.5 - 0.5;
                let c = (j as f64 + 0.5) * 0.5 - 0.5;
                let want = bilinear_at(&plane, 2, 2, r, c);
                assert!((y.at(&[0, i, j]) - want).abs() < 1e-12, "({i},{j})");
            }
        }
        // Corners clamp onto the source corners.
        assert_eq!(y.at(&[0, 0, 0]), 0.0);
        assert_eq!(y.at(&[0, 3, 3]), 6.0);
    }

    #[test]
    fn linear_field_preserved_in_interior() {
        let (h, w, oh, ow) = (8, 8, 32, 32);
        let x = Tensor::<f32>::from_fn([1, h, w], |i| {
            let (r, c) = ((i / w) as f32, (i % w) as f32);
            0.3 * r - 0.7 * c + 1.0
        });
        let mut g = Graph::new();
        let v = g.constant(x);
        let y = g.bilinear_resize(v, oh, ow).unwrap();
        let y = g.value(y);
        // Interior = outputs whose source coordinate needs no clamping.
        for i in 2..oh - 2 {
            for j in 2..ow - 2 {
                let r = (i as f32 + 0.5) * 0.25 - 0.5;
                let c = (j as f32 + 0.5) * 0.25 - 0.5;
                let want = 0.3 * r - 0.7 * c + 1.0;
                assert!((y.at(&[0, i, j]) - want).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn window_equals_slice_of_full_resize() {
        let x = Tensor::from_fn([3, 5, 6], |i| ((i * 31) % 17) as f64 - 4.0);
        let full = resize(x.clone(), 20, 24);
        let mut g = Graph::new();
        let v = g.constant(x);
        let win = Window {
            row0: 3,
            col0: 7,
            rows: 9,
            cols: 5,
        };
        let y = g.bilinear_resize_window(v, 20, 24, win).unwrap();
        assert_eq!(g.value(y), &full.crop_chw(3, 7, 9, 5).unwrap());
    }

    #[test]
    fn resize_rejects_empty_target() {
        let mut g = Graph::<f32>::new();
        let v = g.constant(Tensor::zeros([1, 2, 2]));
        assert!(matches!(g.bilinear_resize(v, 0, 3), Err(Error::Input(_))));
    }

    fn grid() -> GridSpec {
        GridSpec::new(10.0, 20.0, 0.5, 4, 3).unwrap()
    }

    fn latent() -> Tensor<f64> {
        Tensor::from_fn([2, 3, 4], |i| (i as f64 * 0.9).sin() * 3.0)
    }

    fn sample(queries: &[(f64, f64)]) -> Tensor<f64> {
        let mut g = Graph::new();
        let v = g.constant(latent());
        let y = g.sample_at_coords(v, &grid(), queries).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn pixel_centers_reproduce_latent_exactly() {
        let gs = grid();
        let lat = latent();
        let queries: Vec<_> = (0..3).flat_map(|r| (0..4).map(move |c| (r, c))).collect();
        let coords: Vec<_> = queries.iter().map(|&(r, c)| gs.pixel_center(r, c)).collect();
        let out = sample(&coords);
        for (q, &(r, c)) in queries.iter().enumerate() {
            for ch in 0..2 {
                assert_eq!(out.at(&[q, ch]), lat.at(&[ch, r, c]));
            }
            assert_eq!(out.at(&[q, 2]), 0.0);
            assert_eq!(out.at(&[q, 3]), 0.0);
        }
    }

    #[test]
    fn midpoint_of_four_centers_is_their_mean_with_tie_break() {
        let gs = grid();
        let lat = latent();
        let (lon, la) = gs.pixel_center(0, 1);
        let q = (lon + 0.25, la + 0.25);
        let out = sample(&[q]);
        for ch in 0..2 {
            let mean = (lat.at(&[ch, 0, 1]) + lat.at(&[ch, 0, 2]) + lat.at(&[ch, 1, 1]) + lat.at(&[ch, 1, 2])) / 4.0;
            assert!((out.at(&[0, ch]) - mean).abs() < 1e-12);
        }
        // Nearest pixel resolves to (0, 1), so both offsets are +1.
        assert_eq!(out.at(&[0, 2]), 1.0);
        assert_eq!(out.at(&[0, 3]), 1.0);
    }

    #[test]
    fn interior_query_matches_closed_form() {
        let gs = grid();
        let lat = latent();
        let q = (10.0 + 0.5 * 2.3, 20.0 + 0.5 * 1.1);
        let (r, c) = gs.to_pixel(q.0, q.1);
        let out = sample(&[q]);
        for ch in 0..2 {
            let want = bilinear_at(&lat.data()[ch * 12..(ch + 1) * 12], 3, 4, r, c);
            assert!((out.at(&[0, ch]) - want).abs() < 1e-12);
        }
        let (nr, nc) = (r.round(), c.round());
        assert!((out.at(&[0, 2]) - 2.0 * (r - nr)).abs() < 1e-12);
        assert!((out.at(&[0, 3]) - 2.0 * (c - nc)).abs() < 1e-12);
    }

    #[test]
    fn rejects_non_finite_and_outside_queries() {
        let mut g = Graph::<f64>::new();
        let v = g.constant(latent());
        assert!(matches!(g.sample_at_coords(v, &grid(), &[(f64::NAN, 20.1)]), Err(Error::Input(_))));
        assert!(matches!(g.sample_at_coords(v, &grid(), &[(9.0, 20.1)]), Err(Error::Input(_))));
        // Inside the half-cell border beyond the outermost centers is fine.
        assert!(g.sample_at_coords(v, &grid(), &[(10.01, 21.49)]).is_ok());
    }
}
