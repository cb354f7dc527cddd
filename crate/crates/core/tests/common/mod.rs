//! Helpers shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spliif::interp::{GridSpec, SparseInputs};
use spliif::model::{ModelInputs, SpliifConfig, SpliifParams};
use spliif::numerics::{Graph, Tensor, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// Values in `±[0.1, 1]`, away from relu and abs kinks.
pub fn kink_free_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Largest per-coordinate relative error between the backward-pass gradient
/// of a random projection of `f` and central finite differences (h = 1e-3),
/// over every coordinate of every input.
pub type ScalarFn<'a> = &'a dyn Fn(&mut Graph<f64>, &[Var]) -> spliif::Result<Var>;

pub fn gradient_error(
    inputs: &[Tensor<f64>],
    seed: u64,
    f: ScalarFn<'_>,
) -> f64 {
    gradient_error_with_step(inputs, seed, 1e-3, f)
}

pub fn gradient_error_with_step(
    inputs: &[Tensor<f64>],
    seed: u64,
    h: f64,
    f: ScalarFn<'_>,
) -> f64 {
    // Projection weights and the shift that keeps the L1 target below the
    // output, so the loss is a smooth linear functional of f.
    let base = {
        let mut g = Graph::<f64>::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let y = f(&mut g, &vars).expect("forward");
        g.value(y).clone()
    };
    let shape = base.shape().to_vec();
    let weights = random_tensor(&shape, -1.0, 1.0, &mut rng(seed));
    let floor = Tensor::from_fn(shape.clone(), |i| base.data()[i] * weights.data()[i] - 1.0);
    let loss = |g: &mut Graph<f64>, vars: &[Var]| -> Var {
        let y = f(g, vars).expect("forward");
        let w = g.constant(weights.clone());
        let wy = g.mul(y, w).unwrap();
        let floor = g.constant(floor.clone());
        let ones = g.constant(Tensor::full(shape.clone(), 1.0));
        g.l1_loss(wy, floor, ones).unwrap()
    };
    let value_at = |vals: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::<f64>::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let l = loss(&mut g, &vars);
        g.value(l).data()[0]
    };

    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let l = loss(&mut g, &vars);
    let grads = g.backward(l).expect("backward");

    let mut worst = 0.0f64;
    for (k, input) in inputs.iter().enumerate() {
        let zero = Tensor::zeros(input.shape().to_vec());
        let analytic = grads.get(vars[k]).unwrap_or(&zero);
        for i in 0..input.len() {
            let mut vals = inputs.to_vec();
            vals[k].data_mut()[i] += h;
            let up = value_at(&vals);
            vals[k].data_mut()[i] -= 2.0 * h;
            let down = value_at(&vals);
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[i];
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    worst
}

/// A model small enough for exhaustive finite-difference checks.
pub fn tiny_config() -> SpliifConfig {
    SpliifConfig {
        c_l: 4,
        coarse_h: 4,
        coarse_w: 4,
        fine_h: 16,
        fine_w: 16,
        edsr_blocks: 1,
        edsr_width: 4,
        mlp_hidden: 6,
        mlp_depth: 2,
        idw_k: 4,
        ..SpliifConfig::default()
    }
}

pub fn fine_grid(config: &SpliifConfig) -> GridSpec {
    GridSpec::new(138.0, 35.5, 0.0055, config.fine_w, config.fine_h).unwrap()
}

/// Random stations inside `grid` with values in `[-0.8, 0.8]`.
pub fn random_stations(n: usize, channels: usize, grid: &GridSpec, rng: &mut impl Rng) -> SparseInputs<f64> {
    let positions = (0..n)
        .map(|_| {
            (
                rng.random_range(grid.lon_min..grid.lon_max()),
                rng.random_range(grid.lat_min..grid.lat_max()),
            )
        })
        .collect();
    let values = random_tensor(&[n, channels], -0.8, 0.8, rng);
    SparseInputs::unmasked(positions, values).unwrap()
}

pub fn random_queries(n: usize, grid: &GridSpec, rng: &mut impl Rng) -> Vec<(f64, f64)> {
    (0..n)
        .map(|_| {
            (
                rng.random_range(grid.lon_min..grid.lon_max()),
                rng.random_range(grid.lat_min..grid.lat_max()),
            )
        })
        .collect()
}

/// Owned inputs for one forward pass on a random scene.
pub struct Scene {
    pub stations: SparseInputs<f64>,
    pub topo: Tensor<f64>,
    pub coarse: GridSpec,
    pub fine: GridSpec,
}

impl Scene {
    pub fn random(config: &SpliifConfig, n: usize, rng: &mut impl Rng) -> Scene {
        let fine = fine_grid(config);
        let coarse = fine.resampled(config.coarse_w, config.coarse_h).unwrap();
        Scene {
            stations: random_stations(n, config.c_sp, &fine, rng),
            topo: random_tensor(&[config.c_topo, config.fine_h, config.fine_w], 0.0, 1.0, rng),
            coarse,
            fine,
        }
    }

    pub fn inputs(&self) -> ModelInputs<'_, f64> {
        ModelInputs {
            stations: &self.stations,
            dense: None,
            topo: &self.topo,
            grid_coarse: &self.coarse,
            grid_fine: &self.fine,
        }
    }
}

pub fn init_params(config: &SpliifConfig, seed: u64) -> SpliifParams<f64> {
    SpliifParams::<f64>::init(config, &mut rng(seed)).unwrap()
}

// Finite-difference cases, one per differentiable operation. Each returns the
// worst relative error over every input coordinate.

pub fn grad_linear() -> f64 {
    let mut r = rng(1);
    let inputs = [
        random_tensor(&[5, 4], -1.0, 1.0, &mut r),
        random_tensor(&[4, 3], -1.0, 1.0, &mut r),
        random_tensor(&[3], -1.0, 1.0, &mut r),
    ];
    gradient_error(&inputs, 101, &|g, v| g.linear(v[0], v[1], v[2]))
}

pub fn grad_linear_channels() -> f64 {
    let mut r = rng(2);
    let inputs = [
        random_tensor(&[3, 4, 5], -1.0, 1.0, &mut r),
        random_tensor(&[3, 2], -1.0, 1.0, &mut r),
        random_tensor(&[2], -1.0, 1.0, &mut r),
    ];
    gradient_error(&inputs, 102, &|g, v| g.linear_channels(v[0], v[1], v[2]))
}

pub fn grad_conv2d_3x3() -> f64 {
    let mut r = rng(3);
    let inputs = [
        random_tensor(&[2, 5, 4], -1.0, 1.0, &mut r),
        random_tensor(&[3, 2, 3, 3], -1.0, 1.0, &mut r),
        random_tensor(&[3], -1.0, 1.0, &mut r),
    ];
    gradient_error(&inputs, 103, &|g, v| g.conv2d_3x3(v[0], v[1], v[2]))
}

pub fn grad_relu() -> f64 {
    let inputs = [kink_free_tensor(&[4, 6], &mut rng(4))];
    gradient_error(&inputs, 104, &|g, v| g.relu(v[0]))
}

pub fn grad_elementwise() -> f64 {
    let mut r = rng(5);
    let inputs = [
        random_tensor(&[3, 4], -1.0, 1.0, &mut r),
        random_tensor(&[3, 4], -1.0, 1.0, &mut r),
        random_tensor(&[1, 4], -1.0, 1.0, &mut r),
    ];
    gradient_error(&inputs, 105, &|g, v| {
        let s = g.add(v[0], v[1])?;
        let p = g.mul(s, v[0])?;
        let p = g.scale(p, -1.7)?;
        g.concat(&[p, v[2]])
    })
}

pub fn grad_l1_loss() -> f64 {
    let mut r = rng(6);
    let pred = random_tensor(&[4, 3], -1.0, 1.0, &mut r);
    // Residuals of ±0.5 keep every coordinate away from the kink.
    let offsets = kink_free_tensor(&[4, 3], &mut r);
    let target = Tensor::from_fn([4, 3], |i| pred.data()[i] - 0.5 * offsets.data()[i].signum());
    let mask = Tensor::from_fn([4, 3], |i| if i % 5 == 2 { 0.0 } else { 1.0 });
    let inputs = [pred, target];
    gradient_error(&inputs, 106, &|g, v| {
        let m = g.constant(mask.clone());
        g.l1_loss(v[0], v[1], m)
    })
}

pub fn grad_bilinear_resize() -> f64 {
    let inputs = [random_tensor(&[2, 3, 4], -1.0, 1.0, &mut rng(7))];
    gradient_error(&inputs, 107, &|g, v| g.bilinear_resize(v[0], 7, 5))
}

pub fn grad_sample_at_coords() -> f64 {
    let grid = GridSpec::new(10.0, 20.0, 0.1, 5, 4).unwrap();
    let mut r = rng(8);
    let queries = random_queries(9, &grid, &mut r);
    let inputs = [random_tensor(&[3, 4, 5], -1.0, 1.0, &mut r)];
    gradient_error(&inputs, 108, &|g, v| g.sample_at_coords(v[0], &grid, &queries))
}

pub fn grad_idw_densify() -> f64 {
    let grid = GridSpec::new(0.0, 0.0, 0.2, 5, 4).unwrap();
    let mut r = rng(9);
    let stations = random_stations(6, 2, &grid, &mut r);
    let mut mask = stations.mask.clone();
    mask[3] = false;
    let params = spliif::interp::IdwParams {
        k_neighbors: 4,
        epsilon: 1e-6,
    };
    let inputs = [
        stations.values.clone(),
        Tensor::from_f64([2], &[0.3, 1.1]).unwrap(),
        Tensor::from_f64([2], &[-0.2, 0.4]).unwrap(),
    ];
    gradient_error(&inputs, 109, &|g, v| {
        g.idw_densify(&stations.positions, v[0], &mask, &grid, v[1], v[2], &params)
    })
}

pub fn grad_conv_relu_linear() -> f64 {
    let mut r = rng(10);
    let inputs = [
        random_tensor(&[1, 4, 4], -1.0, 1.0, &mut r),
        random_tensor(&[2, 1, 3, 3], -1.0, 1.0, &mut r),
        random_tensor(&[2], -1.0, 1.0, &mut r),
        random_tensor(&[2, 3], -1.0, 1.0, &mut r),
        random_tensor(&[3], -1.0, 1.0, &mut r),
    ];
    gradient_error(&inputs, 110, &|g, v| {
        let y = g.conv2d_3x3(v[0], v[1], v[2])?;
        let y = g.relu(y)?;
        g.linear_channels(y, v[3], v[4])
    })
}

pub type GradientCase = (&'static str, fn() -> f64);

pub const GRADIENT_CASES: &[GradientCase] = &[
    ("linear", grad_linear),
    ("linear_channels", grad_linear_channels),
    ("conv2d_3x3", grad_conv2d_3x3),
    ("relu", grad_relu),
    ("add/mul/scale/concat", grad_elementwise),
    ("l1_loss", grad_l1_loss),
    ("bilinear_resize", grad_bilinear_resize),
    ("sample_at_coords", grad_sample_at_coords),
    ("idw_densify", grad_idw_densify),
    ("conv-relu-linear", grad_conv_relu_linear),
];

/// A random valid configuration with small extents.
pub fn random_config(rng: &mut impl Rng) -> SpliifConfig {
    let coarse_h = rng.random_range(2..=6);
    let coarse_w = rng.random_range(2..=6);
    let factor = rng.random_range(1..=4);
    let c_sp = rng.random_range(1..=3);
    SpliifConfig {
        c_sp,
        c_d: if rng.random_bool(0.3) { rng.random_range(1..=3) } else { 0 },
        c_topo: rng.random_range(1..=2),
        c_l: rng.random_range(1..=8),
        c_out: c_sp,
        coarse_h,
        coarse_w,
        fine_h: coarse_h * factor,
        fine_w: coarse_w * factor,
        edsr_blocks: rng.random_range(0..=3),
        edsr_width: rng.random_range(1..=6),
        mlp_hidden: rng.random_range(1..=8),
        mlp_depth: rng.random_range(1..=3),
        idw_k: rng.random_range(1..=8),
        idw_epsilon: 1e-6,
    }
}

/// Checks every intermediate shape of one random forward pass against the
/// architecture's tensor signatures.
pub fn check_shape_law(config: &SpliifConfig, rng: &mut impl Rng) -> Result<(), String> {
    use spliif::model::{decode, edsr_trunk, encode, forward, forward_full, fuse_topography, lift};
    let c = config;
    let params = SpliifParams::<f64>::init(c, rng).map_err(|e| e.to_string())?;
    let scene = Scene::random(c, rng.random_range(1..=30), rng);
    let dense = (c.c_d > 0).then(|| {
        let (h, w) = (rng.random_range(2..=9), rng.random_range(2..=9));
        random_tensor(&[c.c_d, h, w], -1.0, 1.0, rng)
    });
    let queries = random_queries(rng.random_range(1..=7), &scene.fine, rng);
    let mut inputs = scene.inputs();
    inputs.dense = dense.as_ref();

    let err = |e: spliif::Error| e.to_string();
    let expect = |what: &str, got: &[usize], want: &[usize]| {
        if got == want {
            Ok(())
        } else {
            Err(format!("{what}: shape {got:?}, expected {want:?} for {c:?}"))
        }
    };
    let mut g = Graph::<f64>::new();
    let vars = params.register(&mut g);
    let l0 = encode(&mut g, &vars, c, &scene.stations, inputs.dense, &scene.coarse).map_err(err)?;
    expect("L0", g.shape(l0), &[c.c_l, c.coarse_h, c.coarse_w])?;
    let topo = g.constant(scene.topo.clone());
    let l1 = lift(&mut g, l0, topo, c).map_err(err)?;
    expect("L1", g.shape(l1), &[c.c_topo + c.c_l, c.fine_h, c.fine_w])?;
    let f0 = fuse_topography(&mut g, l0, topo, &vars, c).map_err(err)?;
    expect("F0", g.shape(f0), &[c.edsr_width, c.fine_h, c.fine_w])?;
    let f = edsr_trunk(&mut g, f0, &vars).map_err(err)?;
    expect("F", g.shape(f), &[c.edsr_width, c.fine_h, c.fine_w])?;
    let y = decode(&mut g, f, &scene.fine, &queries, &vars).map_err(err)?;
    expect("decode", g.shape(y), &[queries.len(), c.c_out])?;
    let full = forward_full(&mut g, &vars, c, &inputs, &queries).map_err(err)?;
    expect("forward_full", g.shape(full), &[queries.len(), c.c_out])?;
    let y = forward(&mut g, &vars, c, &inputs, &queries).map_err(err)?;
    expect("forward", g.shape(y), &[queries.len(), c.c_out])?;
    let (a, b) = (g.value(y).data(), g.value(full).data());
    if let Some(i) = (0..a.len()).find(|&i| (a[i] - b[i]).abs() > 1e-9) {
        return Err(format!("forward and forward_full differ at {i}: {} vs {}", a[i], b[i]));
    }
    Ok(())
}

pub fn fixture(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

/// Malformed station CSV and topography ASC files, each with the error it
/// must produce.
pub type MalformedCase = (&'static str, fn(&spliif::FormatError) -> bool);

pub const MALFORMED: &[MalformedCase] = {
    use spliif::FormatError as F;
    &[
        ("malformed/empty.csv", |e| matches!(e, F::MissingHeader)),
        ("malformed/missing_column.csv", |e| matches!(e, F::MissingColumn(c) if c == "temp_c")),
        ("malformed/short_row.csv", |e| {
            matches!(e, F::FieldCount { line: 3, expected: 8, found: 7 })
        }),
        ("malformed/malformed_number.csv", |e| {
            matches!(e, F::MalformedNumber { line: 3, column, value } if column == "lon" && value == "13x.2")
        }),
        ("malformed/negative_wind.csv", |e| {
            matches!(e, F::InvalidField { line: 2, column, .. } if column == "wind_ms")
        }),
        ("malformed/empty_latitude.csv", |e| {
            matches!(e, F::InvalidField { line: 2, column, .. } if column == "lat")
        }),
        ("malformed/missing_cellsize.asc", |e| matches!(e, F::MissingHeaderKey("cellsize"))),
        ("malformed/body_count.asc", |e| matches!(e, F::BodyCount { expected: 6, found: 5 })),
        ("malformed/body_value.asc", |e| {
            matches!(e, F::BodyValue { index: 4, value } if value == "five")
        }),
        ("malformed/negative_cellsize.asc", |e| {
            matches!(e, F::InvalidHeader { key, .. } if key == "cellsize")
        }),
    ]
};

/// Loads one malformed fixture; `Err` describes why it was not rejected as
/// expected.
pub fn check_malformed(name: &str, expected: fn(&spliif::FormatError) -> bool) -> Result<(), String> {
    let path = fixture(name);
    let result = if name.ends_with(".csv") {
        spliif::data::load_stations_csv(&path).map(|_| ())
    } else {
        spliif::data::load_topography_asc(&path).map(|_| ())
    };
    match result {
        Err(spliif::Error::Format(e)) if expected(&e) => Ok(()),
        Err(e) => Err(format!("{name}: unexpected error {e}")),
        Ok(()) => Err(format!("{name}: accepted")),
    }
}

/// A 64×64 synthetic world with 32-pixel patches and a model sized for it.
pub fn small_setup() -> (
    spliif::data::Dataset,
    spliif::data::PatchProtocol,
    SpliifConfig,
) {
    let world = spliif::data::SynthWorld::generate(&spliif::data::SynthWorldConfig {
        width: 64,
        height: 64,
        station_count: 200,
        time_slices: 4,
        ..Default::default()
    })
    .unwrap();
    let protocol = spliif::data::PatchProtocol {
        patch_size: 32,
        coarse_size: 8,
        ..Default::default()
    };
    let model = SpliifConfig {
        coarse_h: 8,
        coarse_w: 8,
        fine_h: 32,
        fine_w: 32,
        ..tiny_config()
    };
    (world.dataset().unwrap(), protocol, model)
}

/// Holds out 30% of the stations of `dataset`.
pub fn held_out(dataset: &spliif::data::Dataset, seed: u64) -> std::collections::BTreeSet<String> {
    spliif::data::split_holdout(&dataset.station_ids(), 0.3, &mut rng(seed))
}

/// Predicts the observed target values themselves.
pub struct Oracle;

impl spliif::eval::Predictor for Oracle {
    fn predict(&self, patch: &spliif::data::Patch) -> spliif::Result<Vec<[f64; 3]>> {
        Ok(patch
            .target_stations
            .iter()
            .map(|o| {
                let (u, v) = o.wind_uv().unwrap_or((0.0, 0.0));
                [o.temperature.unwrap_or(0.0), u, v]
            })
            .collect())
    }
}
