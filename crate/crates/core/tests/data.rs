mod common;

use std::collections::BTreeSet;

use proptest::prelude::*;
use spliif::data::{
    denormalize, load_stations_csv, load_topography_asc, normalize, sample_patch, uv_to_wind, wind_to_uv, Dataset,
    PatchProtocol, SynthWorld, SynthWorldConfig, Variable,
};
use spliif::eval::angular_error;

#[test]
fn paper_normalization_ranges() {
    assert_eq!(normalize(Variable::Temperature, 40.0), 1.0);
    assert_eq!(normalize(Variable::Temperature, -30.0), -1.0);
    assert_eq!(normalize(Variable::Temperature, 5.0), 0.0);
    assert_eq!(normalize(Variable::WindComponent, 0.0), 0.0);
    assert_eq!(normalize(Variable::WindComponent, 30.0), 1.0);
    assert_eq!(normalize(Variable::WindComponent, 15.0), 0.5);
    // out-of-range values are mapped, not clamped
    assert_eq!(normalize(Variable::Temperature, 75.0), 2.0);
}

proptest! {
    #[test]
    fn temperature_round_trips(t in -30.0f64..=40.0) {
        let back = denormalize(Variable::Temperature, normalize(Variable::Temperature, t));
        prop_assert!((back - t).abs() < 1e-6);
        let n = (t - 5.0) / 35.0;
        prop_assert!((normalize(Variable::Temperature, denormalize(Variable::Temperature, n)) - n).abs() < 1e-6);
    }

    #[test]
    fn wind_component_round_trips(w in -30.0f64..=30.0) {
        let back = denormalize(Variable::WindComponent, normalize(Variable::WindComponent, w));
        prop_assert!((back - w).abs() < 1e-6);
    }

    #[test]
    fn topography_round_trips(h in 0.0f64..=3000.0) {
        let back = denormalize(Variable::Topography, normalize(Variable::Topography, h));
        prop_assert!((back - h).abs() < 1e-6);
    }

    #[test]
    fn wind_decomposition_round_trips(speed in 0.01f64..60.0, dir in 0.0f64..360.0) {
        let (u, v) = wind_to_uv(speed, dir).unwrap();
        let (s, d) = uv_to_wind(u, v);
        prop_assert!((s - speed).abs() / speed < 1e-4);
        prop_assert!(angular_error(d, dir) < 0.01);
        prop_assert!((0.0..360.0).contains(&d));
    }
}

#[test]
fn wind_decomposition_examples() {
    let (u, v) = wind_to_uv(10.0, 0.0).unwrap();
    assert!(u.abs() < 1e-12 && (v + 10.0).abs() < 1e-12);
    assert_eq!(wind_to_uv(0.0, 123.0).unwrap(), (0.0, 0.0));
    assert_eq!(uv_to_wind(0.0, 0.0), (0.0, 0.0));
    let (u, v) = wind_to_uv(7.0, 135.0).unwrap();
    let r = 7.0 * std::f64::consts::FRAC_1_SQRT_2;
    assert!((u + r).abs() < 1e-9 && (v - r).abs() < 1e-9);
    assert!(matches!(wind_to_uv(-1.0, 0.0), Err(spliif::Error::Input(_))));
}

#[test]
fn station_file_masks_and_wraps() {
    let obs = load_stations_csv(&common::fixture("stations_3.csv")).unwrap();
    assert_eq!(obs.len(), 3);
    assert_eq!(obs[1].wind_dir, Some(0.0));
    assert_eq!(obs[1].temperature, Some(-1.25));
    let (_, valid) = obs[2].channels();
    assert_eq!(valid, [false, false, false]);
    assert_eq!(obs[2].wind_speed, Some(3.0));
    assert_eq!(obs[2].wind_uv(), None);
    let (values, valid) = obs[0].channels();
    assert_eq!(valid, [true, true, true]);
    assert!((values[0] - (4.5 - 5.0) / 35.0).abs() < 1e-12);
}

#[test]
fn known_grid_lands_after_row_flip() {
    let topo = load_topography_asc(&common::fixture("known_3x3.asc")).unwrap();
    assert_eq!((topo.grid.width, topo.grid.height), (3, 3));
    assert_eq!(topo.grid.cell_size, 0.005);
    // row 0 is the southern (last) file row
    let expect = [[1.0, 2.0, 3.0], [4.0, 0.0, 6.0], [7.0, 8.0, 9.0]];
    for (i, row) in expect.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            assert_eq!(topo.at(i, j), v, "({i}, {j})");
        }
    }
    assert_eq!(topo.nodata.iter().filter(|&&m| m).count(), 1);
    assert!(topo.nodata[4]);
}

#[test]
fn malformed_files_are_rejected_with_named_errors() {
    assert_eq!(common::MALFORMED.len(), 10);
    for &(name, expected) in common::MALFORMED {
        common::check_malformed(name, expected).unwrap();
    }
}

fn dense_world() -> (Dataset, PatchProtocol) {
    let config = SynthWorldConfig {
        width: 131,
        height: 131,
        station_count: 3000,
        time_slices: 3,
        ..SynthWorldConfig::default()
    };
    let protocol = PatchProtocol {
        patch_size: 32,
        coarse_size: 8,
        ..PatchProtocol::default()
    };
    (SynthWorld::generate(&config).unwrap().dataset().unwrap(), protocol)
}

#[test]
fn sampled_patches_are_disjoint_and_inside() {
    let (dataset, protocol) = dense_world();
    let mut rng = common::rng(40);
    for _ in 0..200 {
        let patch = sample_patch(&dataset, &|_| true, &mut rng, &protocol).unwrap();
        assert_eq!(patch.input_stations.len(), 24);
        assert_eq!(patch.target_stations.len(), 6);
        let inputs: BTreeSet<&str> = patch.input_stations.iter().map(|o| o.station_id.as_str()).collect();
        assert!(patch.target_stations.iter().all(|o| !inputs.contains(o.station_id.as_str())));
        for o in patch.input_stations.iter().chain(&patch.target_stations) {
            assert!(patch.grid_fine.contains(o.lon, o.lat));
            assert_eq!(o.time, patch.time_id);
        }
    }
}

#[test]
fn patch_origins_are_uniform() {
    let (dataset, protocol) = dense_world();
    let world = *dataset.grid();
    let mut counts = [[0u32; 10]; 10];
    let mut rng = common::rng(41);
    let samples = 10_000;
    for _ in 0..samples {
        let patch = sample_patch(&dataset, &|_| true, &mut rng, &protocol).unwrap();
        let col0 = ((patch.grid_fine.lon_min - world.lon_min) / world.cell_size).round() as usize;
        let row0 = ((patch.grid_fine.lat_min - world.lat_min) / world.cell_size).round() as usize;
        // 100 possible origins per axis, 10 per bin
        counts[row0 / 10][col0 / 10] += 1;
    }
    let expected = samples as f64 / 100.0;
    let chi2: f64 = counts
        .iter()
        .flatten()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum();
    // upper 1% point of chi-square with 99 degrees of freedom
    assert!(chi2 < 134.642, "chi-square {chi2}");
}

#[test]
fn dense_truth_matches_direct_oracle() {
    let world = SynthWorld::generate(&SynthWorldConfig::default()).unwrap();
    let grid = world.grid;
    let mut rng = common::rng(42);
    for t in [0, 7, 23] {
        let dense = world.temperature_grid(t);
        for _ in 0..500 {
            let (i, j) = (
                rand::Rng::random_range(&mut rng, 0..grid.height),
                rand::Rng::random_range(&mut rng, 0..grid.width),
            );
            let (lon, lat) = grid.pixel_center(i, j);
            assert!((dense[i * grid.width + j] - world.temperature(t, lon, lat)).abs() < 1e-6);
        }
    }
}

#[test]
fn default_world_has_600_stations_on_one_patch() {
    let world = SynthWorld::generate(&SynthWorldConfig::default()).unwrap();
    assert_eq!(world.sites.len(), 600);
    assert_eq!((world.grid.width, world.grid.height), (256, 256));
    assert!(world.sites.iter().all(|s| (0.0..=3000.0).contains(&s.altitude)));
    for o in world.observations() {
        assert!(o.wind_speed.unwrap() >= 0.0);
        assert!((0.0..360.0).contains(&o.wind_dir.unwrap()));
    }
}
