use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use qlr_core::data::{generate, DatasetSpec};
use qlr_core::protocol::{desk_run, ProtocolConfig};
use qlr_core::quant::LatentPrecision;

const TINY: &str = r#"
seed = 5
output_dir = "out"
q_lr = 7
n_lr = 10

[dataset]
classes = 4
channels = 3
size = 8
instances_per_class = 2
train_per_instance = 6
test_per_instance = 3
instance_mix = 0.6
noise = 0.35
max_shift = 1
glare_prob = 0.2
glare_gain = 6.0

[protocol]
initial_classes = 2
total_classes = 4
initial_instances = 1
events = 3
samples_per_event = 12
batch_size = 16
n_new = 4
epochs = 1
initial_epochs = 2
lr = 0.05
momentum = 0.9
replacement = true

[memsim]
workload = "desk"
sweep_bandwidths = [8, 64]
sweep_cores = [1, 8]
sweep_l1 = [131072]

[report]
pareto_q_lr = [32, 6]
"#;

const CHAIN: &[&[&str]] = &[
    &["calibrate"],
    &["freeze"],
    &["build-replays"],
    &["run-protocol"],
    &["plan"],
    &["simulate", "--sweep"],
    &["report"],
];

fn setup(text: &str) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    fs::write(&cfg, text).unwrap();
    (dir, cfg)
}

fn qlrcl(cfg: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qlrcl"))
        .arg("--config")
        .arg(cfg)
        .args(args)
        .env("RUST_LOG", "off")
        .output()
        .unwrap()
}

fn ok(cfg: &Path, args: &[&str]) {
    let o = qlrcl(cfg, args);
    assert!(
        o.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&o.stderr)
    );
}

fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(
                    p.strip_prefix(root).unwrap().to_path_buf(),
                    fs::read(&p).unwrap(),
                );
            }
        }
    }
    out
}

#[test]
fn chain_is_byte_identical_across_reruns_and_workers() {
    let (dir, cfg) = setup(TINY);
    for args in CHAIN {
        ok(&cfg, args);
    }
    let first = snapshot(&dir.path().join("out"));
    assert!(first.len() > 20, "{:?}", first.keys().collect::<Vec<_>>());
    fs::remove_dir_all(dir.path().join("out")).unwrap();
    for args in CHAIN {
        let mut a = args.to_vec();
        a.extend(["--workers", "3"]);
        ok(&cfg, &a);
    }
    let second = snapshot(&dir.path().join("out"));
    assert_eq!(
        first.keys().collect::<Vec<_>>(),
        second.keys().collect::<Vec<_>>()
    );
    for (k, v) in &first {
        assert!(v == &second[k], "{} differs", k.display());
    }
}

#[test]
fn chain_matches_library_run() {
    let (dir, cfg) = setup(TINY);
    for args in &CHAIN[..4] {
        ok(&cfg, args);
    }
    let trace = fs::read_to_string(dir.path().join("out/trace.csv")).unwrap();
    let parsed: toml::Table = toml::from_str(TINY).unwrap();
    let mut spec: DatasetSpec = parsed["dataset"].clone().try_into().unwrap();
    let mut pc: ProtocolConfig = parsed["protocol"].clone().try_into().unwrap();
    spec.seed = 5;
    pc.seed = 5;
    let data = generate(&spec).unwrap();
    let o = desk_run(&data, &pc, 8, LatentPrecision::Bits(7), 10, 1).unwrap();
    assert_eq!(trace, o.to_csv(false));
}

#[test]
fn manifest_records_overrides_and_digests() {
    let (dir, cfg) = setup(TINY);
    ok(
        &cfg,
        &["calibrate", "--seed", "11", "--set", "protocol.lr=0.02"],
    );
    let text = fs::read_to_string(dir.path().join("out/manifests/calibrate.json")).unwrap();
    let m: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(m["seed"], 11);
    assert_eq!(m["command"], "calibrate");
    let ov: Vec<&str> = m["overrides"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap())
        .collect();
    assert_eq!(ov, ["protocol.lr=0.02", "seed=11"]);
    let resolved: toml::Table = toml::from_str(m["config"].as_str().unwrap()).unwrap();
    assert_eq!(
        resolved["protocol"]["lr"].as_float().map(|v| v as f32),
        Some(0.02)
    );
    assert_eq!(resolved["dataset"]["seed"].as_integer(), Some(11));
    for o in m["outputs"].as_array().unwrap() {
        let bytes = fs::read(dir.path().join("out").join(o["path"].as_str().unwrap())).unwrap();
        use sha2::Digest;
        assert_eq!(
            o["sha256"].as_str().unwrap(),
            hex::encode(sha2::Sha256::digest(&bytes))
        );
    }
    assert!(!text.contains("workers"));
}

#[test]
fn manifest_replays_the_run() {
    let (dir, cfg) = setup(TINY);
    ok(&cfg, &["calibrate", "--set", "seed=2"]);
    let before = snapshot(&dir.path().join("out"));
    let m: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(dir.path().join("out/manifests/calibrate.json")).unwrap(),
    )
    .unwrap();
    let (dir2, cfg2) = setup(m["config"].as_str().unwrap());
    ok(&cfg2, &["calibrate"]);
    let after = snapshot(&dir2.path().join("out"));
    for (k, v) in &before {
        if !k.starts_with("manifests") {
            assert!(v == &after[k], "{} differs", k.display());
        }
    }
}

#[test]
fn exit_codes() {
    let (dir, cfg) = setup(TINY);
    let code = |args: &[&str]| qlrcl(&cfg, args).status.code().unwrap();
    assert_eq!(code(&["no-such-command"]), 2);
    assert_eq!(code(&["freeze"]), 4);
    assert_eq!(code(&["report"]), 4);
    assert_eq!(code(&["plan", "--set", "bogus=1"]), 3);
    assert_eq!(code(&["plan", "--set", "q_lr=40"]), 3);
    assert_eq!(code(&["plan", "--set", "hierarchy.l1_bytes=8"]), 5);
    assert_eq!(code(&["simulate", "--set", "hierarchy.cores=3"]), 6);
    let missing = qlrcl(&dir.path().join("absent.toml"), &["plan"]);
    assert_eq!(missing.status.code(), Some(4));

    ok(&cfg, &["calibrate"]);
    ok(&cfg, &["freeze"]);
    fs::write(dir.path().join("out/replays.qlr"), b"not a buffer").unwrap();
    let o = qlrcl(&cfg, &["run-protocol"]);
    assert_eq!(
        o.status.code(),
        Some(7),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    assert!(String::from_utf8_lossy(&o.stderr).contains("corrupt"));
}

#[test]
fn inputs_are_not_mutated() {
    let (dir, cfg) = setup(TINY);
    ok(&cfg, &["calibrate"]);
    let fp = snapshot(&dir.path().join("out/model_fp32"));
    ok(&cfg, &["freeze"]);
    ok(&cfg, &["freeze", "--set", "q_lr=6"]);
    assert_eq!(fp, snapshot(&dir.path().join("out/model_fp32")));
}

#[test]
fn help_lists_every_flag() {
    let o = Command::new(env!("CARGO_BIN_EXE_qlrcl"))
        .arg("--help")
        .output()
        .unwrap();
    let h = String::from_utf8_lossy(&o.stdout);
    for flag in [
        "--config",
        "--set",
        "--seed",
        "--out",
        "--workers",
        "--wallclock",
    ] {
        assert!(h.contains(flag), "{flag} missing from help");
    }
    for cmd in [
        "calibrate",
        "freeze",
        "build-replays",
        "run-protocol",
        "plan",
        "simulate",
        "report",
    ] {
        assert!(h.contains(cmd), "{cmd} missing from help");
    }
}
