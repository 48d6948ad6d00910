use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_msth");

const TINY: &[&str] = &[
    "--set=n_samples=8",
    "--set=proposal_bins=8",
    "--set=levels=3",
    "--set=log2_table_3d=10",
    "--set=log2_table_4d=10",
    "--set=n_max=32",
    "--set=time_max=4",
    "--set=mask_resolution=8",
    "--set=uncertainty_resolution=8",
    "--set=density_hidden=16",
    "--set=color_hidden=16",
    "--set=mine_pairs=64",
];

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().unwrap()
}

fn ok_json(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap()
}

fn err_json(out: &Output, code: i32) -> Value {
    assert_eq!(out.status.code(), Some(code), "{}", String::from_utf8_lossy(&out.stderr));
    let v: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert!(v["error"]["message"].is_string());
    v["error"].clone()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, preset: &str) {
    ok_json(&run(&[
        "synth",
        "--out",
        s(dir),
        "--preset",
        preset,
        "--width",
        "16",
        "--height",
        "12",
        "--frames",
        "3",
        "--train-cameras",
        "2",
        "--oracle-samples",
        "64",
    ]));
}

#[test]
fn full_workflow_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, "orbit");
    assert!(data.join("scene.json").exists());

    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "# tiny run\nsteps = 40\nbatch_rays = 16\nlambda_u = 0.001\n").unwrap();
    let run_dir = dir.path().join("run");
    let mut args = vec![
        "train",
        "--data",
        s(&data),
        "--out",
        s(&run_dir),
        "--config",
        s(&cfg),
        "--steps",
        "4",
        "--set",
        "gamma=0.5",
    ];
    args.extend_from_slice(TINY);
    let v = ok_json(&run(&args));
    assert_eq!(v["summary"]["steps"], 4);
    let dump = &v["config"];
    assert_eq!(dump["steps"]["value"], 4);
    assert_eq!(dump["steps"]["source"], "flag");
    assert_eq!(dump["batch_rays"]["value"], 16);
    assert_eq!(dump["batch_rays"]["source"], "config_file");
    assert_eq!(dump["lambda_u"]["source"], "config_file");
    assert_eq!(dump["lambda_u"]["provenance"], "published");
    assert_eq!(dump["gamma"]["value"], 0.5);
    assert_eq!(dump["lr_tables"]["provenance"], "invented");
    assert_eq!(dump["lr_tables"]["source"], "default");
    assert_eq!(dump["workers"]["source"], "preset");
    let written: Value =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("config.resolved.json")).unwrap()).unwrap();
    assert_eq!(&written, dump);
    assert!(v["eval"]["psnr"].is_number());
    let ck = run_dir.join("checkpoint.msth");

    let v = ok_json(&run(&["eval", "--checkpoint", s(&ck), "--data", s(&data), "--split", "train"]));
    assert_eq!(v["step"], 4);
    assert_eq!(v["config"]["steps"]["source"], "checkpoint");

    let png = dir.path().join("frame.png");
    let v = ok_json(&run(&[
        "render",
        "--checkpoint",
        s(&ck),
        "--data",
        s(&data),
        "--frame",
        "2",
        "--out",
        s(&png),
    ]));
    assert!(v["psnr_vs_ground_truth"].is_number());
    assert!(png.exists());

    let video = dir.path().join("video");
    let v = ok_json(&run(&[
        "render",
        "--checkpoint",
        s(&ck),
        "--data",
        s(&data),
        "--incremental",
        "--epsilon",
        "0.2",
        "--compare-full",
        "--out",
        s(&video),
    ]));
    assert_eq!(v["frames"], 3);
    assert!(v["speedup"].as_f64().unwrap() >= 1.0);

    let v = ok_json(&run(&[
        "collision-stats",
        "--checkpoint",
        s(&ck),
        "--data",
        s(&data),
        "--rays",
        "8",
    ]));
    assert!(v.to_string().contains("writes_gated"));

    // resuming extends the same run
    let v = ok_json(&run(&[
        "train",
        "--data",
        s(&data),
        "--out",
        s(&run_dir),
        "--resume",
        s(&ck),
        "--steps",
        "6",
        "--no-eval",
    ]));
    assert_eq!(v["summary"]["steps"], 6);
}

#[test]
fn errors_are_json_with_stable_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere");

    let e = err_json(&run(&["eval", "--checkpoint", s(&missing.join("c.msth")), "--data", s(&missing)]), 5);
    assert_eq!(e["kind"], "missing_file");
    assert!(e["path"].as_str().unwrap().contains("nowhere"));

    let e = err_json(&run(&["frobnicate"]), 2);
    assert_eq!(e["kind"], "usage");

    let data = dir.path().join("data");
    synth(&data, "static");
    let out = dir.path().join("o");
    let e = err_json(
        &run(&["train", "--data", s(&data), "--out", s(&out), "--set", "no_such_key=1"]),
        2,
    );
    assert_eq!(e["kind"], "config");
    assert!(e["message"].as_str().unwrap().contains("no_such_key"));

    let e = err_json(&run(&["train", "--data", s(&data), "--out", s(&out), "--set", "steps=-3"]), 2);
    assert_eq!(e["kind"], "config");

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "steps = = 3").unwrap();
    let e = err_json(&run(&["train", "--data", s(&data), "--out", s(&out), "--config", s(&bad)]), 2);
    assert_eq!(e["kind"], "config");

    std::fs::remove_file(data.join("cam0/0001.png")).unwrap();
    let e = err_json(&run(&["train", "--data", s(&data), "--out", s(&out)]), 5);
    assert_eq!(e["kind"], "missing_file");
    assert!(e["path"].as_str().unwrap().ends_with("0001.png"));
}

#[test]
fn checks_report_json() {
    let v = ok_json(&run(&["grad-check"]));
    assert!(v["report"]["max_rel_err"].as_f64().unwrap() < v["tolerance"].as_f64().unwrap());
    assert!(v["report"]["groups"].as_array().unwrap().len() >= 7);
    let v = ok_json(&run(&["mine-sanity", "--rho", "0.5", "--samples", "2000", "--steps", "20"]));
    assert!(v["report"]["estimate"].is_number());
    assert!((v["report"]["analytic"].as_f64().unwrap() - 0.143841).abs() < 1e-5);
}
