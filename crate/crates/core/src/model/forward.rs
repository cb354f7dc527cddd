//! The four SpLIIF stages and their compositions.
//!
//! `encode` densifies stations onto the coarse grid and projects them to the
//! latent `L0`; `lift` upsamples `L0` and stacks the topography channel in
//! front of it (`L1`); `fuse_topography` maps `L1` to the trunk width (`F0`);
//! `edsr_trunk` refines it (`F`); `decode` samples `F` at arbitrary
//! coordinates and runs the decoder MLP.

use crate::error::{Error, Result};
use crate::interp::{GridSpec, SparseInputs, Window};
use crate::numerics::{Graph, Padding, Real, Tensor, Var};

use super::{ParamVars, SpliifConfig};

/// Everything one forward pass reads besides the parameters.
#[derive(Clone, Debug)]
pub struct ModelInputs<'a, T: Real = f32> {
    pub stations: &'a SparseInputs<T>,
    /// `[C_d, H, W]`, required exactly when `c_d > 0`.
    pub dense: Option<&'a Tensor<T>>,
    /// `[C_topo, H'', W'']`, already normalised.
    pub topo: &'a Tensor<T>,
    pub grid_coarse: &'a GridSpec,
    pub grid_fine: &'a GridSpec,
}

fn mlp_channels<T: Real>(g: &mut Graph<T>, mut x: Var, layers: &[super::Dense<Var>]) -> Result<Var> {
    for (i, layer) in layers.iter().enumerate() {
        x = g.linear_channels(x, layer.weight, layer.bias)?;
        if i + 1 < layers.len() {
            x = g.relu(x)?;
        }
    }
    Ok(x)
}

fn mlp_rows<T: Real>(g: &mut Graph<T>, mut x: Var, layers: &[super::Dense<Var>]) -> Result<Var> {
    for (i, layer) in layers.iter().enumerate() {
        x = g.linear(x, layer.weight, layer.bias)?;
        if i + 1 < layers.len() {
            x = g.relu(x)?;
        }
    }
    Ok(x)
}

/// Stations (and optional dense input) → `L0`, `[C_L, H', W']`.
pub fn encode<T: Real>(
    g: &mut Graph<T>,
    params: &ParamVars,
    config: &SpliifConfig,
    stations: &SparseInputs<T>,
    dense: Option<&Tensor<T>>,
    grid_coarse: &GridSpec,
) -> Result<Var> {
    if stations.is_empty() {
        return Err(Error::Input("encode needs at least one input station".into()));
    }
    if stations.channels() != config.c_sp {
        return Err(Error::Config(format!(
            "stations carry {} channels, model expects c_sp = {}",
            stations.channels(),
            config.c_sp
        )));
    }
    if grid_coarse.height != config.coarse_h || grid_coarse.width != config.coarse_w {
        return Err(Error::Dimension(format!(
            "coarse grid is {}x{}, model expects {}x{}",
            grid_coarse.height, grid_coarse.width, config.coarse_h, config.coarse_w
        )));
    }
    let values = g.constant(stations.values.clone());
    let sparse = g.idw_densify(
        &stations.positions,
        values,
        &stations.mask,
        grid_coarse,
        params.idw_exponent,
        params.idw_length_scale,
        &config.idw(),
    )?;
    let features = match (dense, config.c_d) {
        (None, 0) => sparse,
        (Some(d), c_d) if c_d > 0 => {
            if d.rank() != 3 || d.shape()[0] != c_d {
                return Err(Error::Config(format!(
                    "dense input has shape {:?}, model expects {c_d} channels",
                    d.shape()
                )));
            }
            let d = g.constant(d.clone());
            let resized = g.bilinear_resize(d, config.coarse_h, config.coarse_w)?;
            g.concat(&[sparse, resized])?
        }
        (Some(_), _) => {
            return Err(Error::Config("dense input supplied but model has c_d = 0".into()));
        }
        (None, c_d) => {
            return Err(Error::Config(format!("model expects a dense input with {c_d} channels")));
        }
    };
    mlp_channels(g, features, &params.proj_mlp)
}

fn check_topo<T: Real>(g: &Graph<T>, topo: Var, config: &SpliifConfig) -> Result<()> {
    let want = [config.c_topo, config.fine_h, config.fine_w];
    if g.shape(topo) != want {
        return Err(Error::Dimension(format!(
            "topography has shape {:?}, model expects {want:?}",
            g.shape(topo)
        )));
    }
    Ok(())
}

/// `L0` upsampled to the fine grid with the topography stacked in front:
/// `L1`, `[C_topo + C_L, H'', W'']`.
pub fn lift<T: Real>(g: &mut Graph<T>, l0: Var, topo: Var, config: &SpliifConfig) -> Result<Var> {
    check_topo(g, topo, config)?;
    let up = g.bilinear_resize(l0, config.fine_h, config.fine_w)?;
    g.concat(&[topo, up])
}

/// `L0` + topography → `F0`, `[edsr_width, H'', W'']`.
pub fn fuse_topography<T: Real>(
    g: &mut Graph<T>,
    l0: Var,
    topo: Var,
    params: &ParamVars,
    config: &SpliifConfig,
) -> Result<Var> {
    let l1 = lift(g, l0, topo, config)?;
    g.linear_channels(l1, params.fuse.weight, params.fuse.bias)
}

/// Residual blocks (`conv → relu → conv`, skip-added) followed by a final
/// convolution and a global skip from the input.
pub fn edsr_trunk<T: Real>(g: &mut Graph<T>, f0: Var, params: &ParamVars) -> Result<Var> {
    let mut x = f0;
    for block in &params.trunk {
        let y = g.conv2d_3x3(x, block.conv1.weight, block.conv1.bias)?;
        let y = g.relu(y)?;
        let y = g.conv2d_3x3(y, block.conv2.weight, block.conv2.bias)?;
        x = g.add(x, y)?;
    }
    let y = g.conv2d_3x3(x, params.trunk_final.weight, params.trunk_final.bias)?;
    g.add(f0, y)
}

/// Samples `F` at the queries and decodes to `[N, C_out]` normalised values.
pub fn decode<T: Real>(
    g: &mut Graph<T>,
    features: Var,
    grid_fine: &GridSpec,
    queries: &[(f64, f64)],
    params: &ParamVars,
) -> Result<Var> {
    let sampled = g.sample_at_coords(features, grid_fine, queries)?;
    mlp_rows(g, sampled, &params.decoder_mlp)
}

/// Literal composition `decode(edsr_trunk(fuse_topography(encode(..))))`
/// over the whole fine grid.
pub fn forward_full<T: Real>(
    g: &mut Graph<T>,
    params: &ParamVars,
    config: &SpliifConfig,
    inputs: &ModelInputs<'_, T>,
    queries: &[(f64, f64)],
) -> Result<Var> {
    let features = field(g, params, config, inputs)?;
    decode(g, features, inputs.grid_fine, queries, params)
}

/// The refined feature field `F` over the whole fine grid.
pub fn field<T: Real>(
    g: &mut Graph<T>,
    params: &ParamVars,
    config: &SpliifConfig,
    inputs: &ModelInputs<'_, T>,
) -> Result<Var> {
    check_fine_grid(inputs.grid_fine, config)?;
    let l0 = encode(g, params, config, inputs.stations, inputs.dense, inputs.grid_coarse)?;
    let topo = g.constant(inputs.topo.clone());
    let f0 = fuse_topography(g, l0, topo, params, config)?;
    edsr_trunk(g, f0, params)
}

fn check_fine_grid(grid: &GridSpec, config: &SpliifConfig) -> Result<()> {
    if grid.height != config.fine_h || grid.width != config.fine_w {
        return Err(Error::Dimension(format!(
            "fine grid is {}x{}, model expects {}x{}",
            grid.height, grid.width, config.fine_h, config.fine_w
        )));
    }
    Ok(())
}

/// Fine-grid window that determines the decoded value at one query: the
/// query's 2×2 sampling taps dilated by the trunk's receptive field.
fn query_window(grid: &GridSpec, radius: usize, lon: f64, lat: f64) -> Result<Window> {
    let (h, w) = (grid.height, grid.width);
    let (r, c) = grid.to_pixel(lon, lat);
    if !r.is_finite() || !c.is_finite() {
        return Err(Error::Input(format!("non-finite query ({lon}, {lat})")));
    }
    let tap = |x: f64, n: usize| (x.clamp(0.0, (n - 1) as f64).floor() as usize).min(n - 2);
    let (r0, c0) = (tap(r, h), tap(c, w));
    let row0 = r0.saturating_sub(radius);
    let col0 = c0.saturating_sub(radius);
    let row1 = (r0 + 2 + radius).min(h);
    let col1 = (c0 + 2 + radius).min(w);
    Ok(Window {
        row0,
        col0,
        rows: row1 - row0,
        cols: col1 - col0,
    })
}

/// Zero padding on the sides of `win` that touch the grid edge; the other
/// sides shrink by one pixel. Returns the convolution's output window.
fn shrink(win: Window, h: usize, w: usize) -> (Window, Padding) {
    let pad = Padding {
        top: win.row0 == 0,
        bottom: win.row0 + win.rows == h,
        left: win.col0 == 0,
        right: win.col0 + win.cols == w,
    };
    let out = Window {
        row0: win.row0 + usize::from(!pad.top),
        col0: win.col0 + usize::from(!pad.left),
        rows: win.rows - usize::from(!pad.top) - usize::from(!pad.bottom),
        cols: win.cols - usize::from(!pad.left) - usize::from(!pad.right),
    };
    (out, pad)
}

fn crop_to<T: Real>(g: &mut Graph<T>, x: Var, from: Window, to: Window) -> Result<Var> {
    if from == to {
        return Ok(x);
    }
    g.crop(x, to.row0 - from.row0, to.col0 - from.col0, to.rows, to.cols)
}

/// [`edsr_trunk`] evaluated on the part of the field held in `win`. Every
/// convolution only produces the pixels whose inputs are all known, so each
/// output pixel equals the full-field value; the result covers a smaller
/// window, which is returned alongside.
fn edsr_trunk_window<T: Real>(
    g: &mut Graph<T>,
    f0: Var,
    win: Window,
    grid: &GridSpec,
    params: &ParamVars,
) -> Result<(Var, Window)> {
    let (h, w) = (grid.height, grid.width);
    let conv = |g: &mut Graph<T>, x: Var, at: Window, c: &super::Conv<Var>| -> Result<(Var, Window)> {
        let (next, pad) = shrink(at, h, w);
        Ok((g.conv2d_3x3_padded(x, c.weight, c.bias, pad)?, next))
    };
    let (mut x, mut at) = (f0, win);
    for block in &params.trunk {
        let (y, yw) = conv(g, x, at, &block.conv1)?;
        let y = g.relu(y)?;
        let (y, yw) = conv(g, y, yw, &block.conv2)?;
        let skip = crop_to(g, x, at, yw)?;
        x = g.add(skip, y)?;
        at = yw;
    }
    let (y, yw) = conv(g, x, at, &params.trunk_final)?;
    let skip = crop_to(g, f0, win, yw)?;
    Ok((g.add(skip, y)?, yw))
}

/// Same result as [`forward_full`], computing the fine-resolution stages only
/// inside each query's receptive field. This is the path used for training
/// and point evaluation.
pub fn forward<T: Real>(
    g: &mut Graph<T>,
    params: &ParamVars,
    config: &SpliifConfig,
    inputs: &ModelInputs<'_, T>,
    queries: &[(f64, f64)],
) -> Result<Var> {
    check_fine_grid(inputs.grid_fine, config)?;
    if queries.is_empty() {
        return Err(Error::Input("forward needs at least one query".into()));
    }
    if inputs.topo.shape() != [config.c_topo, config.fine_h, config.fine_w] {
        return Err(Error::Dimension(format!(
            "topography has shape {:?}, model expects {:?}",
            inputs.topo.shape(),
            [config.c_topo, config.fine_h, config.fine_w]
        )));
    }
    let l0 = encode(g, params, config, inputs.stations, inputs.dense, inputs.grid_coarse)?;
    let radius = config.trunk_radius();
    let mut rows = Vec::with_capacity(queries.len());
    for &(lon, lat) in queries {
        let win = query_window(inputs.grid_fine, radius, lon, lat)?;
        let up = g.bilinear_resize_window(l0, config.fine_h, config.fine_w, win)?;
        let topo = g.constant(inputs.topo.crop_chw(win.row0, win.col0, win.rows, win.cols)?);
        let l1 = g.concat(&[topo, up])?;
        let f0 = g.linear_channels(l1, params.fuse.weight, params.fuse.bias)?;
        let (f, fw) = edsr_trunk_window(g, f0, win, inputs.grid_fine, params)?;
        rows.push(g.sample_in_window(f, inputs.grid_fine, fw, &[(lon, lat)])?);
    }
    let sampled = if rows.len() == 1 { rows[0] } else { g.concat(&rows)? };
    mlp_rows(g, sampled, &params.decoder_mlp)
}
