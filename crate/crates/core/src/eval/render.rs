use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::numerics::Tensor;

/// Binary greyscale PGM of a `[1, H, W]` field. `lo` maps to 0 and `hi` to
/// 255, clamped; the northernmost row is written first.
pub fn encode_pgm(values: &Tensor<f64>, lo: f64, hi: f64) -> Result<Vec<u8>> {
    let &[1, h, w] = values.shape() else {
        return Err(Error::Dimension(format!("map needs shape [1, H, W], got {:?}", values.shape())));
    };
    if !values.is_finite() {
        return Err(Error::NonFinite { op: "render_field_map" });
    }
    if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Contract(format!("invalid value range [{lo}, {hi}]")));
    }
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    let data = values.data();
    for row in (0..h).rev() {
        for &v in &data[row * w..(row + 1) * w] {
            out.push(((v - lo) / (hi - lo) * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    Ok(out)
}

pub fn render_field_map(values: &Tensor<f64>, lo: f64, hi: f64, path: &Path) -> Result<()> {
    write_atomic(path, &encode_pgm(values, lo, hi)?)
}

/// One arrow per `stride × stride` block of the `[H, W]` wind components.
/// `x, y` is the block center in image pixels (origin top-left, matching the
/// PGM), `dx, dy` the block-mean wind with `dy` pointing down the image.
pub fn wind_arrows(u: &Tensor<f64>, v: &Tensor<f64>, stride: usize) -> Result<String> {
    let &[h, w] = u.shape() else {
        return Err(Error::Dimension(format!("wind field needs shape [H, W], got {:?}", u.shape())));
    };
    if v.shape() != u.shape() || stride == 0 {
        return Err(Error::Dimension("u and v must share a shape; stride must be positive".into()));
    }
    let mut out = String::from("x,y,dx,dy\n");
    for by in (0..h).step_by(stride) {
        for bx in (0..w).step_by(stride) {
            let (rows, cols) = ((h - by).min(stride), (w - bx).min(stride));
            let (mut su, mut sv) = (0.0, 0.0);
            for r in by..by + rows {
                for c in bx..bx + cols {
                    su += u.data()[r * w + c];
                    sv += v.data()[r * w + c];
                }
            }
            let n = (rows * cols) as f64;
            // image rows run north to south
            let y = (h - by) as f64 - rows as f64 / 2.0;
            let x = bx as f64 + cols as f64 / 2.0;
            writeln!(out, "{x},{y},{},{}", su / n, -sv / n).expect("string write");
        }
    }
    Ok(out)
}

pub fn overlay_wind(u: &Tensor<f64>, v: &Tensor<f64>, stride: usize, path: &Path) -> Result<()> {
    write_atomic(path, wind_arrows(u, v, stride)?.as_bytes())
}
