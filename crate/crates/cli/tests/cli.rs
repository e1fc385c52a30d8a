use std::path::Path;
use std::process::Command;

fn run(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_omnisweep"))
        .args(args)
        .output()
        .unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_owned()
}

#[test]
fn synth_sweep_estimate_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let size = ["--size", "160x80"];
    run(&[&["synth", "--fisheye-size", "256", "--out", &p(d, "scene")], &size[..]].concat());
    for f in ["cam1.png", "cam4.png", "gt_depth.pfm", "calib.toml"] {
        assert!(d.join("scene").join(f).exists(), "{f}");
    }
    let calib = p(d, "scene/calib.toml");
    let common = [&size[..], &["--calib", &calib]].concat();
    let sweep = run(&[&["sweep", "--images", &p(d, "scene"), "--out", &p(d, "vol.bin")], &common[..]].concat());
    assert!(sweep.contains("elements"));
    run(&[&["estimate", "--volume", &p(d, "vol.bin"), "--out", &p(d, "est")], &common[..]].concat());
    let eval = |pred: &str| run(&[&["eval", "--pred", pred, "--gt", &p(d, "scene/gt_depth.pfm")], &common[..]].concat());
    let line = eval(&p(d, "est/depth.pfm"));
    assert!(line.starts_with("mae=") && line.contains("pixels="), "{line}");
    assert!(eval(&p(d, "scene/gt_depth.pfm")).starts_with("mae=0.000000"));
}

#[test]
fn rejects_bad_size_and_scene() {
    let tmp = tempfile::tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_omnisweep");
    let bad = |args: &[&str]| assert!(!Command::new(bin).args(args).output().unwrap().status.success());
    bad(&["synth", "--size", "161x80", "--out", tmp.path().to_str().unwrap()]);
    bad(&["synth", "--scene", "cube:3", "--out", tmp.path().to_str().unwrap()]);
}
