use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_sparseview"));
    c.env_remove("SPARSEVIEW_THREADS");
    c
}

fn run(args: &[&str], dir: &Path) -> Output {
    bin().args(args).current_dir(dir).output().expect("binary runs")
}

fn ok(args: &[&str], dir: &Path) -> String {
    let o = run(args, dir);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn fails(args: &[&str], dir: &Path) -> String {
    let o = run(args, dir);
    assert!(!o.status.success(), "{args:?} should fail");
    let err = String::from_utf8(o.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "diagnostic spans lines: {err}");
    err
}

fn occluder_dataset(dir: &Path) {
    fs::write(dir.join("occ.toml"), "sparse_depth = 10\n[preset]\nkind = \"occluder\"\nseed = 3\nwidth = 48\nheight = 36\n").unwrap();
    ok(&["gen-scene", "occ.toml", "--out", "occ"], dir);
}

fn sprite_dataset(dir: &Path) {
    fs::write(dir.join("sprite.json"), r#"{"preset": {"kind": "sprite", "width": 64, "height": 48, "frames": 5}}"#).unwrap();
    ok(&["gen-scene", "sprite.json", "--out", "sprite"], dir);
}

fn kv(text: &str, key: &str) -> f64 {
    text.split_whitespace()
        .find_map(|t| t.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("no {key} in {text}"))
        .parse()
        .unwrap()
}

#[test]
fn gen_scene_writes_dataset_layout() {
    let d = tempfile::tempdir().unwrap();
    occluder_dataset(d.path());
    for f in ["manifest.json", "cameras.json", "scene.json", "rgb/v0_t0.png", "depth/v1_t0.pfm", "sparse_depth.txt"] {
        assert!(d.path().join("occ").join(f).exists(), "{f}");
    }
    let text = fs::read_to_string(d.path().join("occ/sparse_depth.txt")).unwrap();
    assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 20);
}

#[test]
fn vis_prior_reports_high_f1() {
    let d = tempfile::tempdir().unwrap();
    occluder_dataset(d.path());
    let out = ok(&["vis-prior", "occ", "--out", "vp"], d.path());
    assert!(kv(&out, "f1") >= 0.95, "{out}");
    for f in ["prior.png", "min_error.pfm", "gt_visibility.png", "report.txt"] {
        assert!(d.path().join("vp").join(f).exists(), "{f}");
    }
}

#[test]
fn fit_is_reproducible_and_renders() {
    let d = tempfile::tempdir().unwrap();
    occluder_dataset(d.path());
    fs::write(d.path().join("fit.toml"), "[fit.static]\niters = 8\nbatch = 32\nsamples = 12\nlog_every = 2\n").unwrap();
    ok(&["fit", "occ", "--config", "fit.toml", "--seed", "4", "--out", "a", "--threads", "1"], d.path());
    let o = bin()
        .args(["fit", "occ", "--config", "fit.toml", "--seed", "4", "--out", "b"])
        .env("SPARSEVIEW_THREADS", "3")
        .current_dir(d.path())
        .output()
        .unwrap();
    assert!(o.status.success());
    for f in ["log.txt", "model.ckpt", "model.json", "resolved.json"] {
        let (x, y) = (fs::read(d.path().join("a").join(f)).unwrap(), fs::read(d.path().join("b").join(f)).unwrap());
        assert_eq!(x, y, "{f} differs");
    }
    ok(&["fit", "occ", "--config", "fit.toml", "--seed", "5", "--out", "c"], d.path());
    assert_ne!(fs::read(d.path().join("a/log.txt")).unwrap(), fs::read(d.path().join("c/log.txt")).unwrap());

    ok(&["render", "a/model.ckpt", "occ/cameras.json", "--out", "r"], d.path());
    assert!(d.path().join("r/rgb/v1_t0.png").exists());
    assert!(d.path().join("r/depth/v0_t0.pfm").exists());
    let rep = ok(&["eval", "r", "r", "--out", "e"], d.path());
    assert!(rep.contains("psnr          inf"), "{rep}");
    let rep = ok(&["eval", "r", "occ", "--mask", "valid-depth"], d.path());
    assert!(rep.contains("depth_mae"), "{rep}");
}

#[test]
fn config_values_override_flags() {
    let d = tempfile::tempdir().unwrap();
    occluder_dataset(d.path());
    fs::write(d.path().join("c.toml"), "seed = 4\n[fit.static]\niters = 4\nbatch = 16\nsamples = 8\n").unwrap();
    ok(&["fit", "occ", "--config", "c.toml", "--seed", "9", "--out", "x"], d.path());
    ok(&["fit", "occ", "--config", "c.toml", "--seed", "4", "--out", "y"], d.path());
    assert_eq!(fs::read(d.path().join("x/log.txt")).unwrap(), fs::read(d.path().join("y/log.txt")).unwrap());
    let resolved = fs::read_to_string(d.path().join("x/resolved.json")).unwrap();
    assert!(resolved.contains("\"seed\": 4"), "{resolved}");
}

#[test]
fn tvs_bound_modes_are_ordered_and_reproducible() {
    let d = tempfile::tempdir().unwrap();
    sprite_dataset(d.path());
    ok(&["tvs", "sprite", "--k", "2", "--frame", "2", "--bound", "all", "--out", "t1"], d.path());
    ok(&["tvs", "sprite", "--k", "2", "--frame", "2", "--bound", "all", "--out", "t2", "--threads", "2"], d.path());
    let report = fs::read_to_string(d.path().join("t1/report.txt")).unwrap();
    assert_eq!(report, fs::read_to_string(d.path().join("t2/report.txt")).unwrap());
    let psnr = |mode: &str| -> f64 {
        report.lines().find(|l| l.split(' ').next() == Some(mode)).unwrap().split(' ').nth(2).unwrap().parse().unwrap()
    };
    let (p, f, fi) = (psnr("predicted"), psnr("gt-flow"), psnr("gt-flow,gt-infill"));
    assert!(fi >= f && fi >= p, "{report}");
    for m in ["predicted", "gt-flow", "gt-flow+gt-infill"] {
        let (a, b) = (d.path().join("t1").join(m), d.path().join("t2").join(m));
        for f in ["frame_0003.png", "depth_0003.pfm", "holes_0003.png"] {
            assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{m}/{f}");
        }
    }
}

#[test]
fn errors_are_one_line_and_nonzero() {
    let d = tempfile::tempdir().unwrap();
    let e = fails(&["fit", "missing", "--out", "o"], d.path());
    assert!(e.starts_with("error:") && e.contains("manifest.json"), "{e}");
    fs::write(d.path().join("bad.toml"), "[fit]\nmodes = \"static\"\n").unwrap();
    let e = fails(&["fit", "missing", "--config", "bad.toml", "--out", "o"], d.path());
    assert!(e.contains("modes"), "{e}");
    sprite_dataset(d.path());
    let e = fails(&["tvs", "sprite", "--bound", "gt-magic", "--out", "o"], d.path());
    assert!(e.contains("gt-magic"), "{e}");
    let e = fails(&["tvs", "sprite", "--k", "3", "--frame", "3", "--out", "o"], d.path());
    assert!(e.contains("frame"), "{e}");
    let e = fails(&["vis-prior", "sprite", "--out", "o"], d.path());
    assert!(e.contains("view 1"), "{e}");
    fails(&["eval", "sprite", "sprite", "--mask", "sometimes"], d.path());
    fails(&["gen-scene", "nothing.json", "--out", "o"], d.path());
    fs::write(d.path().join("both.json"), r#"{"preset": {"kind": "toy", "width": 8, "height": 6, "offsets": [0.0]}, "scene": null, "extra": 1}"#).unwrap();
    fails(&["gen-scene", "both.json", "--out", "o"], d.path());
    let e = fails(&["tvs", "sprite"], d.path());
    assert!(e.contains("--out"), "{e}");
}
