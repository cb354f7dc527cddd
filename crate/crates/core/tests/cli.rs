use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use clap::CommandFactory;
use spliif::cli::Cli;

const SMALL: &str = r#"{
  "data": {
    "synth": {"width": 64, "height": 64, "station_count": 200, "time_slices": 4},
    "patch": {"patch_size": 32, "coarse_size": 8}
  },
  "model": {
    "c_l": 4, "coarse_h": 8, "coarse_w": 8, "fine_h": 32, "fine_w": 32,
    "edsr_blocks": 1, "edsr_width": 4, "mlp_hidden": 6, "mlp_depth": 2, "idw_k": 4
  },
  "train": {"steps": 6, "batch_patches": 2, "checkpoint_every": 3, "log_every": 2}
}"#;

fn spliif(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spliif"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("small.json"), SMALL).unwrap();
        Workspace { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn config(&self) -> PathBuf {
        self.path("small.json")
    }

    /// Runs `sub` with the small config, writing into `out`.
    fn run(&self, sub: &str, out: &str, extra: &[&str]) -> Output {
        let config = self.config();
        let out = self.path(out);
        let mut args = vec![sub, "--config", s(&config), "--out", s(&out)];
        args.extend_from_slice(extra);
        spliif(&args)
    }

    fn trained(&self) -> PathBuf {
        let out = self.run("train", "model", &[]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        self.path("model/checkpoint.splf")
    }
}

fn files(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    names
}

#[test]
fn every_flag_is_documented() {
    let mut root = Cli::command();
    root.build();
    for sub in root.get_subcommands().filter(|s| s.get_name() != "help") {
        assert!(sub.get_about().is_some(), "{} has no description", sub.get_name());
        let help = spliif(&[sub.get_name(), "--help"]);
        assert_eq!(code(&help), 0);
        let text = String::from_utf8(help.stdout).unwrap();
        for arg in sub.get_arguments() {
            let Some(long) = arg.get_long() else { continue };
            if long == "help" {
                continue;
            }
            assert!(arg.get_help().is_some(), "--{long} of {} has no help text", sub.get_name());
            assert!(text.contains(&format!("--{long}")), "--{long} missing from {} --help", sub.get_name());
        }
    }
    let top = String::from_utf8(spliif(&["--help"]).stdout).unwrap();
    for sub in ["synth", "train", "eval", "infer"] {
        assert!(top.contains(sub));
    }
}

#[test]
fn unknown_flag_is_a_validation_error() {
    let out = spliif(&["synth", "--bogus"]);
    assert_eq!(code(&out), 1);
    assert!(out.stdout.is_empty());
}

#[test]
fn synth_is_idempotent_and_refuses_non_empty_output() {
    let ws = Workspace::new();
    assert_eq!(code(&ws.run("synth", "world", &[])), 0);
    assert_eq!(files(&ws.path("world")), ["manifest.json", "stations.csv", "topography.asc"]);
    let read = |name: &str| std::fs::read(ws.path("world").join(name)).unwrap();
    let first = [read("stations.csv"), read("topography.asc"), read("manifest.json")];

    let refused = ws.run("synth", "world", &[]);
    assert_eq!(code(&refused), 1);
    assert!(String::from_utf8_lossy(&refused.stderr).contains("--force"));

    assert_eq!(code(&ws.run("synth", "world", &["--force"])), 0);
    assert_eq!([read("stations.csv"), read("topography.asc"), read("manifest.json")], first);

    let manifest: serde_json::Value = serde_json::from_slice(&first[2]).unwrap();
    assert_eq!(manifest["seed"], 2018);
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn synth_defaults_write_600_stations_on_256_grid() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("w");
    assert_eq!(code(&spliif(&["synth", "--out", s(&out)])), 0);
    let stations = spliif::data::load_stations_csv(&out.join("stations.csv")).unwrap();
    let ids: std::collections::BTreeSet<_> = stations.iter().map(|o| o.station_id.clone()).collect();
    assert_eq!(ids.len(), 600);
    let topo = spliif::data::load_topography_asc(&out.join("topography.asc")).unwrap();
    assert_eq!((topo.grid.width, topo.grid.height), (256, 256));
}

#[test]
fn zero_stations_fail_before_writing() {
    let ws = Workspace::new();
    let out = ws.run("synth", "empty", &["--set", "data.synth.station_count=0"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("station_count"));
    assert!(!ws.path("empty").exists());
}

#[test]
fn config_errors_name_the_key_path() {
    let ws = Workspace::new();
    let out = ws.run("train", "t", &["--set", "train.stepz=3"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("train"));
    let out = ws.run("train", "t", &["--set", "model.c_l=wide"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("model.c_l"));
    assert!(!ws.path("t").exists());
}

#[test]
fn missing_checkpoint_exits_1_without_output() {
    let ws = Workspace::new();
    let missing = ws.path("nope.splf");
    let out = ws.run("eval", "scores", &["--checkpoint", s(&missing)]);
    assert_eq!(code(&out), 1);
    assert!(!ws.path("scores").exists());
    assert!(out.stdout.is_empty());
}

#[test]
fn divergence_is_a_runtime_error() {
    let ws = Workspace::new();
    let out = ws.run("train", "boom", &["--set", "train.adam.lr=1e38", "--set", "train.steps=20"]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("diverged"));
}

#[test]
fn train_writes_checkpoint_and_trace_and_resumes() {
    let ws = Workspace::new();
    ws.trained();
    assert_eq!(files(&ws.path("model")), ["checkpoint.splf", "config.json", "loss.csv"]);
    let trace = std::fs::read_to_string(ws.path("model/loss.csv")).unwrap();
    let steps: Vec<&str> = trace.lines().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(steps, ["step", "2", "4", "6"]);

    let out = ws.run("train", "model", &["--resume", "--set", "train.steps=8"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let trace = std::fs::read_to_string(ws.path("model/loss.csv")).unwrap();
    assert_eq!(trace.lines().last().unwrap().split(',').next(), Some("8"));
}

#[test]
fn eval_writes_tables_and_baseline_only_omits_improvement() {
    let ws = Workspace::new();
    let ckpt = ws.trained();
    let out = ws.run("eval", "scores", &["--checkpoint", s(&ckpt)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(
        files(&ws.path("scores")),
        ["histogram.csv", "improvement.csv", "metrics_baseline.csv", "metrics_model.csv"]
    );
    let improvement = std::fs::read_to_string(ws.path("scores/improvement.csv")).unwrap();
    assert!(improvement.lines().next().unwrap().ends_with(",rmse_baseline,improvement_pct,improvement_se"));

    let out = ws.run("eval", "base", &["--baseline-only"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(files(&ws.path("base")), ["histogram.csv", "metrics_baseline.csv"]);
    let table = std::fs::read_to_string(ws.path("base/metrics_baseline.csv")).unwrap();
    assert_eq!(table.lines().next().unwrap(), "variable,alt_lo,alt_hi,n_input,rmse,mae,count");
    assert!(!table.contains("improvement"));
}

/// Station CSV of the first time slice and a query CSV at the input stations
/// inside the patch at the world origin.
fn infer_inputs(ws: &Workspace) -> (PathBuf, PathBuf) {
    assert_eq!(code(&ws.run("synth", "world", &[])), 0);
    let all = spliif::data::load_stations_csv(&ws.path("world/stations.csv")).unwrap();
    let first: Vec<_> = all.iter().filter(|o| o.time == all[0].time).cloned().collect();
    let stations = ws.path("slice.csv");
    std::fs::write(&stations, spliif::data::render_stations_csv(&first)).unwrap();
    let extent = 138.0 + 32.0 * 0.0055;
    let mut queries = String::from("lon,lat\n");
    for o in first.iter().filter(|o| o.lon < extent && o.lat < 35.5 + 32.0 * 0.0055) {
        queries.push_str(&format!("{},{}\n", o.lon, o.lat));
    }
    let path = ws.path("queries.csv");
    std::fs::write(&path, queries).unwrap();
    (stations, path)
}

#[test]
fn infer_predictions_stay_within_normalized_envelope() {
    let ws = Workspace::new();
    let (stations, queries) = infer_inputs(&ws);
    for seed in 0..5 {
        let ckpt_dir = format!("model{seed}");
        let seed_arg = format!("train.seed={seed}");
        let out = ws.run("train", &ckpt_dir, &["--set", &seed_arg]);
        assert_eq!(code(&out), 0);
        let ckpt = ws.path(&ckpt_dir).join("checkpoint.splf");
        let pred_dir = format!("pred{seed}");
        let out = ws.run(
            "infer",
            &pred_dir,
            &["--checkpoint", s(&ckpt), "--stations", s(&stations), "--queries", s(&queries)],
        );
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        let text = std::fs::read_to_string(ws.path(&pred_dir).join("predictions.csv")).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("lon,lat,temp_c,u_ms,v_ms,wind_ms,wind_dir_deg"));
        let mut rows = 0;
        for line in lines {
            let v: Vec<f64> = line.split(',').map(|x| x.parse().unwrap()).collect();
            assert!(((v[2] - 5.0) / 35.0).abs() <= 2.0, "{line}");
            assert!((v[3] / 30.0).abs() <= 2.0 && (v[4] / 30.0).abs() <= 2.0, "{line}");
            rows += 1;
        }
        assert!(rows > 0);
    }
}

#[test]
fn infer_grid_writes_maps() {
    let ws = Workspace::new();
    let (stations, _) = infer_inputs(&ws);
    let ckpt = ws.trained();
    let out = ws.run(
        "infer",
        "maps",
        &["--checkpoint", s(&ckpt), "--stations", s(&stations), "--grid", "--origin", "16,32"],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(files(&ws.path("maps")), ["temperature.pgm", "wind_arrows.csv", "wind_speed.pgm"]);
    let pgm = std::fs::read(ws.path("maps/temperature.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n32 32\n255\n"));
    assert_eq!(pgm.len(), b"P5\n32 32\n255\n".len() + 32 * 32);
    let arrows = std::fs::read_to_string(ws.path("maps/wind_arrows.csv")).unwrap();
    assert_eq!(arrows.lines().next(), Some("x,y,dx,dy"));
    assert_eq!(arrows.lines().count(), 1 + 4);

    // Stations from two time slices are ambiguous.
    let both = ws.path("world/stations.csv");
    let out = ws.run("infer", "maps2", &["--checkpoint", s(&ckpt), "--stations", s(&both), "--grid"]);
    assert_eq!(code(&out), 1);
    assert!(!ws.path("maps2").exists());
}

#[test]
fn commands_do_not_touch_their_inputs() {
    let ws = Workspace::new();
    let (stations, queries) = infer_inputs(&ws);
    let ckpt = ws.trained();
    let before: Vec<Vec<u8>> = [&stations, &queries, &ckpt, &ws.config()]
        .iter()
        .map(|p| std::fs::read(p).unwrap())
        .collect();
    let run = |out: &str| {
        ws.run(
            "infer",
            out,
            &["--checkpoint", s(&ckpt), "--stations", s(&stations), "--queries", s(&queries), "--force"],
        )
    };
    assert_eq!(code(&run("p")), 0);
    let first = std::fs::read(ws.path("p/predictions.csv")).unwrap();
    assert_eq!(code(&run("p")), 0);
    assert_eq!(std::fs::read(ws.path("p/predictions.csv")).unwrap(), first);
    let after: Vec<Vec<u8>> = [&stations, &queries, &ckpt, &ws.config()]
        .iter()
        .map(|p| std::fs::read(p).unwrap())
        .collect();
    assert_eq!(before, after);
}
