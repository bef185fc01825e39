use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use agecal_core::gp::GpModel;

const BIN: &str = env!("CARGO_BIN_EXE_agecal");

fn run(args: &[&str], seed: Option<&str>) -> Output {
    let mut cmd = Command::new(BIN);
    cmd.args(args).env_remove("AGECAL_SEED");
    if let Some(s) = seed {
        cmd.env("AGECAL_SEED", s);
    }
    cmd.output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args, None);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Small dataset: 2 cells per condition over 400 days.
fn small_data(dir: &Path) -> (String, String) {
    let cfg = dir.join("synth.cfg");
    fs::write(
        &cfg,
        "cells_per_condition = 1\nduration_days = 400\ndynamic = false\n",
    )
    .unwrap();
    let data = dir.join("data");
    ok(&["synth", "--config", p(&cfg), "--out", p(&data)]);
    (
        data.join("cells.csv").to_str().unwrap().to_owned(),
        data.join("profiles.csv").to_str().unwrap().to_owned(),
    )
}

fn rows_and_model(dir: &Path) -> (String, String) {
    let (cells, profiles) = small_data(dir);
    let pre = dir.join("pre");
    ok(&[
        "preprocess",
        "--cells",
        &cells,
        "--profiles",
        &profiles,
        "--out",
        p(&pre),
    ]);
    let rows = pre.join("rows.csv").to_str().unwrap().to_owned();
    let model = dir.join("model.json").to_str().unwrap().to_owned();
    ok(&["train", "--rows", &rows, "--out", &model, "--restarts", "2"]);
    (rows, model)
}

#[test]
fn preprocess_writes_rows_and_phases() {
    let dir = tempfile::tempdir().unwrap();
    let (cells, profiles) = small_data(dir.path());
    let out = dir.path().join("pre");
    ok(&[
        "preprocess",
        "--cells",
        &cells,
        "--profiles",
        &profiles,
        "--out",
        p(&out),
        "--ids",
        "CELL01,CELL02",
    ]);
    let rows = fs::read_to_string(out.join("rows.csv")).unwrap();
    assert!(rows
        .lines()
        .skip(1)
        .all(|l| l.starts_with("CELL01,") || l.starts_with("CELL02,")));
    assert!(rows.lines().count() > 10);
    let phases = fs::read_to_string(out.join("phases.csv")).unwrap();
    assert_eq!(
        phases.lines().next().unwrap(),
        "cell_id,day,rebased_day,capacity,phase"
    );
}

#[test]
fn train_predict_evaluate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (_, model) = rows_and_model(dir.path());
    let m = GpModel::load(&model).unwrap();
    assert_eq!(m.fit_seed(), Some(0));

    let profile = dir.path().join("profile.csv");
    fs::write(
        &profile,
        "cell_id,day_start,day_end,temp_c,soc_pct\nX,0,400,45,50\n",
    )
    .unwrap();
    let fc = dir.path().join("fc.csv");
    ok(&[
        "predict",
        "--model",
        &model,
        "--profile",
        p(&profile),
        "--horizon",
        "360",
        "--out",
        p(&fc),
    ]);
    let text = fs::read_to_string(&fc).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "day,mean_q_pct,lower_q_pct,upper_q_pct");
    assert_eq!(lines.len(), 1 + 13);
    let last: Vec<f64> = lines[13].split(',').map(|v| v.parse().unwrap()).collect();
    assert_eq!(last[0], 360.0);
    assert!(last[2] < last[1] && last[1] < last[3] && last[1] < 100.0);

    let anchor = dir.path().join("anchor.csv");
    fs::write(&anchor, "day,q_pct\n180,90\n").unwrap();
    let fa = dir.path().join("fa.csv");
    ok(&[
        "predict",
        "--model",
        &model,
        "--profile",
        p(&profile),
        "--horizon",
        "360",
        "--anchor",
        p(&anchor),
        "--out",
        p(&fa),
    ]);
    let anchored = fs::read_to_string(&fa).unwrap();
    let at_anchor: Vec<f64> = anchored
        .lines()
        .find(|l| l.starts_with("180"))
        .unwrap()
        .split(',')
        .map(|v| v.parse().unwrap())
        .collect();
    assert_eq!(at_anchor, vec![180.0, 90.0, 90.0, 90.0]);

    let (cells, profiles) = (
        dir.path().join("data/cells.csv"),
        dir.path().join("data/profiles.csv"),
    );
    let ev = dir.path().join("eval.csv");
    ok(&[
        "evaluate",
        "--model",
        &model,
        "--cells",
        p(&cells),
        "--profiles",
        p(&profiles),
        "--out",
        p(&ev),
    ]);
    let ev = fs::read_to_string(&ev).unwrap();
    assert_eq!(ev.lines().next().unwrap(), "cell_id,metric,quantity,value");
    assert!(ev.lines().any(|l| l.starts_with("CELL01,mae,q,")));
}

#[test]
fn pins_are_respected_and_env_seed_wins() {
    let dir = tempfile::tempdir().unwrap();
    let (rows, _) = rows_and_model(dir.path());
    let pinned = dir.path().join("pinned.json");
    let out = run(
        &[
            "train",
            "--rows",
            &rows,
            "--out",
            p(&pinned),
            "--restarts",
            "1",
            "--pin",
            "theta_soc",
            "--pin",
            "sigma_n2=0.01",
        ],
        Some("42"),
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let m = GpModel::load(&pinned).unwrap();
    assert_eq!(m.hyperparameters().theta_soc, 1e6);
    assert_eq!(m.hyperparameters().sigma_n2, 0.01);
    assert_eq!(m.fit_seed(), Some(42));

    let rel = ok(&["relevance", "--model", p(&pinned)]);
    assert!(rel.starts_with("input,share\ntemperature,"));
}

#[test]
fn sweep_and_update() {
    let dir = tempfile::tempdir().unwrap();
    let (rows, model) = rows_and_model(dir.path());
    let sweep = dir.path().join("sweep.csv");
    ok(&[
        "sweep",
        "--model",
        &model,
        "--axis",
        "soc",
        "--fixed",
        "temperature=25",
        "--grid",
        "0:100:11",
        "--dt",
        "30",
        "--out",
        p(&sweep),
    ]);
    let text = fs::read_to_string(&sweep).unwrap();
    assert_eq!(text.lines().count(), 12);
    assert!(text.starts_with("axis_value,posterior_std_pct\n0,"));

    let updated = dir.path().join("updated.json");
    ok(&[
        "update",
        "--model",
        &model,
        "--rows",
        &rows,
        "--out",
        p(&updated),
    ]);
    let before = GpModel::load(&model).unwrap();
    let after = GpModel::load(&updated).unwrap();
    assert_eq!(after.rows().len(), 2 * before.rows().len());
    assert_eq!(after.hyperparameters(), before.hyperparameters());
}

#[test]
fn errors_exit_nonzero_with_message() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.csv");
    let out = run(
        &[
            "train",
            "--rows",
            p(&missing),
            "--out",
            p(&dir.path().join("m.json")),
        ],
        None,
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: "));
    assert!(!dir.path().join("m.json").exists());

    let (rows, model) = rows_and_model(dir.path());
    let bad_pin = run(
        &[
            "train",
            "--rows",
            &rows,
            "--out",
            p(&dir.path().join("x.json")),
            "--pin",
            "nope",
        ],
        None,
    );
    assert_eq!(bad_pin.status.code(), Some(1));
    let bad_grid = run(
        &[
            "sweep",
            "--model",
            &model,
            "--axis",
            "soc",
            "--fixed",
            "temperature=25",
            "--grid",
            "0:100",
            "--out",
            "s.csv",
        ],
        None,
    );
    assert_eq!(bad_grid.status.code(), Some(1));
    let bad_seed = run(
        &[
            "train",
            "--rows",
            &rows,
            "--out",
            p(&dir.path().join("y.json")),
        ],
        Some("-3"),
    );
    assert_eq!(bad_seed.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad_seed.stderr).contains("AGECAL_SEED"));
}

#[test]
fn cases_single_case_output_layout() {
    let dir = tempfile::tempdir().unwrap();
    let (cells, profiles) = small_data(dir.path());
    let out = dir.path().join("study");
    ok(&[
        "cases",
        "--cells",
        &cells,
        "--profiles",
        &profiles,
        "--out",
        p(&out),
        "--case",
        "3",
        "--restarts",
        "2",
    ]);
    assert!(out.join("case_3/model.json").exists());
    assert!(out.join("case_3/cells.csv").exists());
    assert!(!out.join("dynamic").exists());
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 4);
    let hyp = fs::read_to_string(out.join("hyperparameters.csv")).unwrap();
    assert_eq!(hyp.lines().count(), 2);
}
