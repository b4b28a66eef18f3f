use std::path::Path;
use std::process::{Command, Output};

use aqflow_core::io::decode_phi;

fn aqflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aqflow")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = aqflow(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn report(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

const TOY: &str = r#"
[scene]
origin = [0.0, 0.0]
velocity = [2.0, 1.2]
contrast_threshold = 1.0
edge_width = 1.5
duration_ms = 40.0
sensor = { width = 16, height = 16 }

[scene.pattern]
kind = "dots"
spacing = 6.0
radius = 1.5

[solver]
events_per_partition = 100

[network]
pathway_a = [2, 2]
pathway_b = [2, 2]

[train]
events_per_partition = 100
buffer_len = 5
max_updates = 4
epochs = 2
"#;

#[test]
fn synth_estimate_eval_recovers_the_default_scene() {
    let tmp = tempfile::tempdir().unwrap();
    let (syn, est, ev) = (tmp.path().join("syn"), tmp.path().join("est"), tmp.path().join("eval"));
    ok(&["synth", "--out", s(&syn)]);
    let events = syn.join("events.aqev");
    ok(&["estimate", "--method", "cm", "--events", s(&events), "--out", s(&est)]);
    ok(&["eval", "--flow", s(&est), "--reference", s(&syn.join("gt")), "--events", s(&events), "--out", s(&ev)]);
    let r = report(&ev);
    assert!(r["partitions"].as_u64().unwrap() >= 3);
    assert!(r["aee"].as_f64().unwrap() < 0.2, "{r}");
    assert!(r["fwl"].as_f64().unwrap() > 1.0);
    assert!(r["rsat"].as_f64().unwrap() < 1.0);
    assert!(r["firing_rate"].is_null());
    assert!(ev.join("report.csv").is_file());
}

#[test]
fn empty_event_file_has_no_complete_partition() {
    let tmp = tempfile::tempdir().unwrap();
    let events = tmp.path().join("empty.txt");
    std::fs::write(&events, "").unwrap();
    let out = aqflow(&["estimate", "--events", s(&events), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no complete partition"));
}

#[test]
fn flow_compared_with_itself_has_zero_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("toy.toml");
    std::fs::write(&cfg, TOY).unwrap();
    let syn = tmp.path().join("syn");
    ok(&["synth", "--config", s(&cfg), "--out", s(&syn)]);
    let gt = syn.join("gt");
    ok(&["eval", "--config", s(&cfg), "--flow", s(&gt), "--reference", s(&gt), "--out", s(&tmp.path().join("e"))]);
    let r = report(&tmp.path().join("e"));
    assert_eq!(r["aee"].as_f64().unwrap(), 0.0);
    assert_eq!(r["pct3px"].as_f64().unwrap(), 0.0);
}

#[test]
fn usage_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "[solver]\nmax_iter = 3\n").unwrap();
    assert_eq!(aqflow(&["synth", "--config", s(&bad), "--out", s(tmp.path())]).status.code(), Some(2));
    assert_eq!(aqflow(&["synth", "--bogus"]).status.code(), Some(2));
    assert_eq!(aqflow(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(aqflow(&["synth"]).status.code(), Some(2));
    assert_eq!(aqflow(&["synth", "--lambda0", "-1", "--out", s(tmp.path())]).status.code(), Some(2));
    let missing = tmp.path().join("nope.aqev");
    assert_eq!(aqflow(&["estimate", "--events", s(&missing), "--out", s(tmp.path())]).status.code(), Some(2));
    assert_eq!(aqflow(&["estimate", "--method", "snn", "--events", s(&missing), "--out", s(tmp.path())]).status.code(), Some(2));
}

#[test]
fn corrupt_inputs_exit_with_three() {
    let tmp = tempfile::tempdir().unwrap();
    let events = tmp.path().join("bad.txt");
    std::fs::write(&events, "10,1,1,1\n5,1,1,1\n").unwrap();
    assert_eq!(aqflow(&["estimate", "--events", s(&events), "--out", s(tmp.path())]).status.code(), Some(3));
    let flows = tmp.path().join("flows");
    std::fs::create_dir_all(&flows).unwrap();
    std::fs::write(flows.join("flow_0000.aqfl"), b"AQFL\x02\x00").unwrap();
    assert_eq!(
        aqflow(&["eval", "--flow", s(&flows), "--reference", s(&flows), "--out", s(tmp.path())]).status.code(),
        Some(3)
    );
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = walk(dir);
    v.sort();
    v
}

fn walk(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p).into_iter().map(|(n, b)| (format!("{}/{n}", p.file_name().unwrap().to_string_lossy()), b)));
        } else {
            out.push((p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()));
        }
    }
    out
}

#[test]
fn runs_are_byte_identical_and_the_echo_reproduces_them() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("toy.toml");
    std::fs::write(&cfg, TOY).unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    ok(&["synth", "--config", s(&cfg), "--seed", "5", "--out", s(&a)]);
    ok(&["synth", "--config", s(&cfg), "--seed", "5", "--out", s(&b)]);
    assert_eq!(files(&a), files(&b));
    ok(&["synth", "--config", s(&a.join("config.toml")), "--out", s(&c)]);
    assert_eq!(files(&a), files(&c));

    let (ea, eb) = (tmp.path().join("ea"), tmp.path().join("eb"));
    ok(&["estimate", "--config", s(&cfg), "--events", s(&a.join("events.aqev")), "--out", s(&ea)]);
    ok(&["estimate", "--config", s(&ea.join("config.toml")), "--events", s(&a.join("events.aqev")), "--out", s(&eb)]);
    assert_eq!(files(&ea), files(&eb));
}

#[test]
fn text_events_feed_the_estimator() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("toy.toml");
    std::fs::write(&cfg, TOY).unwrap();
    let syn = tmp.path().join("syn");
    ok(&["synth", "--config", s(&cfg), "--format", "text", "--out", s(&syn)]);
    let text = std::fs::read_to_string(syn.join("events.txt")).unwrap();
    assert!(text.lines().count() > 100);
    ok(&["estimate", "--config", s(&cfg), "--no-phi", "--events", s(&syn.join("events.txt")), "--out", s(&tmp.path().join("e"))]);
    let phi = decode_phi(&std::fs::read(tmp.path().join("e/phi_0000.aqph")).unwrap()).unwrap();
    assert!(phi.iter().all(|&v| v == 0.0));
}

#[test]
fn train_then_estimate_and_eval_with_the_network() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("toy.toml");
    std::fs::write(&cfg, TOY).unwrap();
    let (syn, tr, est, ev) = (tmp.path().join("syn"), tmp.path().join("tr"), tmp.path().join("est"), tmp.path().join("ev"));
    ok(&["synth", "--config", s(&cfg), "--out", s(&syn)]);
    let events = syn.join("events.aqev");
    ok(&["train", "--config", s(&cfg), "--events", s(&events), "--out", s(&tr)]);
    let log = std::fs::read_to_string(tr.join("train_log.csv")).unwrap();
    let mut lines = log.lines();
    assert!(lines.next().unwrap().starts_with("update,cm_fwd,cm_bwd,smooth,total,firing_rate"));
    assert_eq!(lines.count(), 4);

    let ckpt = tr.join("checkpoint.aqck");
    ok(&["estimate", "--config", s(&cfg), "--method", "snn", "--checkpoint", s(&ckpt), "--events", s(&events), "--out", s(&est)]);
    assert!(est.join("flow_0000.aqfl").is_file());
    ok(&["eval", "--config", s(&cfg), "--flow", s(&est), "--reference", s(&syn.join("gt")), "--events", s(&events), "--checkpoint", s(&ckpt), "--out", s(&ev)]);
    let r = report(&ev);
    let rate = r["firing_rate"].as_f64().unwrap();
    assert!((0.0..=100.0).contains(&rate));
    assert!(r["params"].as_u64().unwrap() > 0);
    assert!(r["ops"].as_u64().unwrap() > 0);
    assert!(r["energy_mj"].as_f64().unwrap() > 0.0);

    let wrong = tmp.path().join("wrong.aqev");
    ok(&["synth", "--out", s(&tmp.path().join("big"))]);
    std::fs::copy(tmp.path().join("big/events.aqev"), &wrong).unwrap();
    let out = aqflow(&["estimate", "--method", "snn", "--checkpoint", s(&ckpt), "--events", s(&wrong), "--out", s(&tmp.path().join("x"))]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn viz_renders_flow_and_scaling_images() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("toy.toml");
    std::fs::write(&cfg, TOY).unwrap();
    let syn = tmp.path().join("syn");
    ok(&["synth", "--config", s(&cfg), "--out", s(&syn)]);
    let est = tmp.path().join("est");
    ok(&["estimate", "--config", s(&cfg), "--events", s(&syn.join("events.aqev")), "--out", s(&est)]);
    let img = tmp.path().join("img");
    ok(&["viz", "--flow", s(&est), "--out", s(&img)]);
    let ppm = std::fs::read(img.join("flow_0000.ppm")).unwrap();
    assert!(ppm.starts_with(b"P6\n16 16\n255\n"));
    assert_eq!(ppm.len(), 13 + 16 * 16 * 3);
    assert!(img.join("phi_0000.ppm").is_file());

    let png = tmp.path().join("png");
    ok(&["viz", "--flow", s(&syn.join("gt/flow_0000.aqfl")), "--max-mag", "2", "--png", "--out", s(&png)]);
    let bytes = std::fs::read(png.join("flow_0000.png")).unwrap();
    assert!(bytes.starts_with(b"\x89PNG"));
}
