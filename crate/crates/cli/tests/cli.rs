//! End-to-end runs of the `frameguide` binary on tiny budgets.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_frameguide"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn write_cfg(dir: &Path, name: &str, v: Value) -> String {
    fs::write(dir.join(name), v.to_string()).unwrap();
    name.to_string()
}

fn read_json(p: impl AsRef<Path>) -> Value {
    serde_json::from_str(&fs::read_to_string(p.as_ref()).unwrap()).unwrap()
}

/// Dataset plus one-epoch VAE and denoiser, all inside `dir`.
fn tiny_models(dir: &Path, backend: &str) {
    let c = write_cfg(dir, "ds.json", json!({"dataset": {"count": 8, "held_out": 2}}));
    ok(dir, &["dataset", "--config", &c, "--out", "data"]);
    let c = write_cfg(dir, "vae.json", json!({"train": {"dataset": "data", "epochs": 1}}));
    ok(dir, &["train", "vae", "--config", &c, "--out", "vae"]);
    let c = write_cfg(
        dir,
        "den.json",
        json!({"models": {"vae": "vae/checkpoint"}, "train": {"dataset": "data", "epochs": 1, "backend": backend}}),
    );
    ok(dir, &["train", "denoiser", "--config", &c, "--out", "den"]);
}

fn keyframe_cfg(extra: Value) -> Value {
    let mut v = json!({
        "models": {"vae": "vae/checkpoint", "denoiser": "den/checkpoint"},
        "conditions": [{
            "kind": "keyframe",
            "frames": [0, 16],
            "images": [
                {"video": "data/held_out/clip_0000", "frame": 0},
                {"video": "data/held_out/clip_0000", "frame": 16}
            ]
        }]
    });
    for (k, x) in extra.as_object().unwrap() {
        v[k] = x.clone();
    }
    v
}

fn dir_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn frames_only(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    dir_bytes(dir)
        .into_iter()
        .filter(|(p, _)| p.extension().is_some_and(|e| e == "ppm"))
        .collect()
}

#[test]
fn dataset_is_deterministic_per_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let c = write_cfg(d, "ds.json", json!({"dataset": {"count": 3, "held_out": 1}}));
    ok(d, &["dataset", "--config", &c, "--out", "a"]);
    ok(d, &["dataset", "--config", &c, "--out", "b"]);
    ok(d, &["dataset", "--config", &c, "--out", "c", "--seed", "9"]);
    assert_eq!(frames_only(&d.join("a")), frames_only(&d.join("b")));
    assert_ne!(frames_only(&d.join("a")), frames_only(&d.join("c")));

    let m = read_json(d.join("a/clips/clip_0000/manifest.json"));
    let mut keys: Vec<_> = m.as_object().unwrap().keys().cloned().collect();
    keys.sort();
    assert_eq!(keys, ["channels", "fps", "frames", "height", "provenance", "seed", "width"]);
    assert_eq!(&fs::read(d.join("a/clips/clip_0000/frame_0000.ppm")).unwrap()[..2], b"P6");
    assert!(d.join("a").join("config.resolved.json").exists());
}

#[test]
fn generate_is_reproducible_and_guidance_off_matches_baseline() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    tiny_models(d, "diffusion");
    let c = write_cfg(d, "gen.json", keyframe_cfg(json!({"seed": 4})));
    ok(d, &["generate", "keyframe", "--config", &c, "--out", "g1", "--baseline"]);
    ok(d, &["generate", "keyframe", "--config", &c, "--out", "g2"]);
    assert_eq!(frames_only(&d.join("g1/video")), frames_only(&d.join("g2/video")));
    assert_ne!(frames_only(&d.join("g1/video")), frames_only(&d.join("g1/baseline")));

    let trace = read_json(d.join("g1/trace.json"));
    assert_eq!(trace["seed"], 4);
    assert!(!trace["trace"]["entries"].as_array().unwrap().is_empty());

    ok(d, &["generate", "keyframe", "--config", &c, "--out", "off", "--guidance-off", "--baseline"]);
    assert_eq!(frames_only(&d.join("off/video")), frames_only(&d.join("off/baseline")));
    assert_eq!(frames_only(&d.join("off/baseline")), frames_only(&d.join("g1/baseline")));
    assert!(read_json(d.join("off/trace.json"))["trace"]["entries"].as_array().unwrap().is_empty());
}

#[test]
fn resolved_config_records_defaults_and_precedence() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    tiny_models(d, "diffusion");
    let c = write_cfg(d, "gen.json", keyframe_cfg(json!({"seed": 4, "out": "from_file"})));
    ok(d, &["generate", "keyframe", "--config", &c]);
    let r = read_json(d.join("from_file/config.resolved.json"));
    let g = &r["resolved"]["run"]["guidance"];
    assert_eq!(g["eta"], 3.0);
    assert_eq!(g["repeats"], 10);
    assert_eq!(g["t_layout"], 45);
    assert_eq!(g["t_detail"], 30);
    assert_eq!(r["resolved"]["run"]["seed"], 4);

    ok(d, &["generate", "keyframe", "--config", &c, "--seed", "7", "--out", "flag"]);
    let r = read_json(d.join("flag/config.resolved.json"));
    assert_eq!(r["resolved"]["run"]["seed"], 7);
    assert!(!d.join("from_file/flag").exists());

    let c = write_cfg(d, "eta.json", keyframe_cfg(json!({"guidance": {"eta": 1.5}})));
    ok(d, &["generate", "keyframe", "--config", &c, "--out", "eta", "--guidance-off"]);
    let g = &read_json(d.join("eta/config.resolved.json"))["resolved"]["run"]["guidance"];
    assert_eq!(g["eta"], 1.5);
    assert_eq!((g["t_layout"].as_u64(), g["t_detail"].as_u64()), (Some(50), Some(50)));
}

#[test]
fn flow_backend_uses_short_layout_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    tiny_models(d, "flow");
    let c = write_cfg(d, "gen.json", keyframe_cfg(json!({})));
    ok(d, &["generate", "keyframe", "--config", &c, "--out", "g"]);
    let g = &read_json(d.join("g/config.resolved.json"))["resolved"]["run"]["guidance"];
    assert_eq!(g["backend"], "flow");
    assert_eq!(g["t_layout"], 48);
    assert_eq!(g["t_detail"], 38);
}

#[test]
fn exit_codes_follow_the_error_class() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();

    let out = run(d, &["analyze", "nonsense"]);
    assert_ne!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(code(&run(d, &["frobnicate"])), 1);
    assert_eq!(code(&run(d, &["--help"])), 0);

    let c = write_cfg(d, "typo.json", json!({"dataset": {"count": 2}, "sede": 3}));
    assert_eq!(code(&run(d, &["dataset", "--config", &c])), 1);
    assert_eq!(code(&run(d, &["dataset", "--config", "missing.json"])), 3);

    tiny_models(d, "diffusion");
    // Wrong task for the configured condition: rejected before any output.
    let c = write_cfg(d, "gen.json", keyframe_cfg(json!({})));
    assert_eq!(code(&run(d, &["generate", "style", "--config", &c, "--out", "never"])), 1);
    assert!(!d.join("never").exists());
    // Condition frame beyond the clip.
    let mut bad = keyframe_cfg(json!({}));
    bad["conditions"][0]["frames"] = json!([0, 40]);
    let c = write_cfg(d, "bad.json", bad);
    assert_eq!(code(&run(d, &["generate", "keyframe", "--config", &c, "--out", "never"])), 1);
    assert!(!d.join("never").exists());
    // Checkpoint path that does not exist.
    let mut bad = keyframe_cfg(json!({}));
    bad["models"]["vae"] = json!("nowhere");
    let c = write_cfg(d, "bad.json", bad);
    assert_eq!(code(&run(d, &["generate", "keyframe", "--config", &c])), 3);

    let c = write_cfg(d, "div.json", json!({"train": {"dataset": "data", "epochs": 2, "lr": 1e300}}));
    let out = run(d, &["train", "vae", "--config", &c, "--out", "div"]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(read_json(d.join("div/metrics.json"))["status"], "diverged");
}

#[test]
fn resume_continues_epoch_numbering() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    tiny_models(d, "diffusion");
    let c = write_cfg(d, "r.json", json!({"train": {"dataset": "data", "epochs": 2, "resume": "vae/checkpoint"}}));
    ok(d, &["train", "vae", "--config", &c, "--out", "vae2"]);
    let m = read_json(d.join("vae2/metrics.json"));
    assert_eq!(m["start_epoch"], 1);
    assert_eq!(m["epochs_completed"], 3);
    assert_eq!(m["epoch_losses"].as_array().unwrap().len(), 2);
    let ck = read_json(d.join("vae2/checkpoint/manifest.json"));
    assert_eq!(ck["training"]["epochs_completed"], 3);

    let c = write_cfg(d, "bad.json", json!({"train": {"dataset": "data", "resume": "no/such/checkpoint"}}));
    assert_eq!(code(&run(d, &["train", "vae", "--config", &c, "--out", "never"])), 3);
    assert!(!d.join("never").exists());
}

#[test]
fn analyses_emit_report_bundles() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    tiny_models(d, "diffusion");
    let c = write_cfg(
        d,
        "an.json",
        keyframe_cfg(json!({"analyze": {
            "clip": "data/held_out/clip_0001",
            "seeds": 1,
            "cost": {"frames": 49, "targets": [6], "window": 3, "factor": 2}
        }})),
    );
    for (which, file) in [("cost", "cost"), ("locality", "locality"), ("gradprop", "gradprop")] {
        let out = format!("an_{which}");
        ok(d, &["analyze", which, "--config", &c, "--out", &out]);
        let dir = d.join(&out);
        assert!(dir.join(format!("{file}.json")).exists());
        assert_eq!(&fs::read(dir.join(format!("{file}.png"))).unwrap()[1..4], b"PNG");
        let m = read_json(dir.join("manifest.json"));
        assert_eq!(m["entries"][0]["name"], file);
    }
    let cost = read_json(d.join("an_cost/cost.json"));
    let ratios: Vec<f64> = cost.as_array().unwrap().iter().map(|r| r["ratio_vs_full"].as_f64().unwrap()).collect();
    assert!(ratios[1] >= 4.0 && ratios[2] >= 17.0, "{ratios:?}");

    // Each frame responds most to its own latent and to nothing far from it.
    let loc = read_json(d.join("an_locality/locality.json"));
    let rows = loc["matrix"].as_array().unwrap();
    assert_eq!(rows.len(), 17);
    for (i, row) in rows.iter().enumerate() {
        let row: Vec<f64> = row.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
        let own = if i == 0 { 0 } else { (i - 1) / 4 + 1 };
        let argmax = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
        assert_eq!(argmax, own, "frame {i}: {row:?}");
        for (l, &v) in row.iter().enumerate() {
            assert!(v <= 1e-6 || l.abs_diff(own) <= 1, "frame {i} latent {l}: {v}");
        }
    }

    // gradprop without a condition names what is missing.
    let mut v = keyframe_cfg(json!({}));
    v["conditions"] = json!([]);
    let c = write_cfg(d, "nocond.json", v);
    let out = run(d, &["analyze", "gradprop", "--config", &c]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("conditions"));
}
