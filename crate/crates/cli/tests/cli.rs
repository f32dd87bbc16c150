use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sfedhifi_core::data::{serialize_idx_images, serialize_idx_labels};

const TINY: &str = r#"
rounds = 2
seed = 4
mode = "sfedhifi"

[dataset]
kind = "synthetic"
classes = 4
height = 8
width = 8
train_per_class = 12
test_per_class = 4

[partition]
clients = 4

[federation]
scales = [0.5, 1.0]
tucker_ranks = [2, 2, 2]

[model]
architecture = "4C3-8C3-MP2-FC"
a1 = 2
a2 = 4
time_steps = 2

[training]
local_epochs = 1
batch_size = 8
"#;

fn sfedhifi(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sfedhifi")).args(args).output().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn validate_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let good = write(dir.path(), "good.toml", TINY);
    let out = sfedhifi(&["validate", "--config", &good]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("ok"));

    let bad = write(dir.path(), "bad.toml", &TINY.replace("a2 = 4", "a2 = 40"));
    let out = sfedhifi(&["validate", "--config", &bad]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("model.a2"));

    let unknown = write(dir.path(), "unknown.toml", &format!("colour = 1\n{TINY}"));
    assert_eq!(sfedhifi(&["validate", "--config", &unknown]).status.code(), Some(2));
    assert_eq!(sfedhifi(&["validate", "--config", "/no/such/file.toml"]).status.code(), Some(2));
}

#[test]
fn run_then_resume() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "tiny.toml", TINY);
    let out_dir = dir.path().join("out");
    let out = sfedhifi(&["run", "--config", &cfg, "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let metrics = fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    // header + (2 scales + average) per round
    assert_eq!(metrics.lines().count(), 1 + 2 * 3);
    assert!(out_dir.join("manifest.toml").is_file());

    let ckpt = out_dir.join("checkpoint.sfhf");
    let other = dir.path().join("other");
    let out = sfedhifi(&[
        "run", "--config", &cfg, "--seed", "5", "--out", other.to_str().unwrap(),
        "--resume", ckpt.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3), "a different seed must not resume");
}

#[test]
fn energy_prints_every_scale() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "tiny.toml", TINY);
    let out = sfedhifi(&["energy", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(text.matches("[[scale]]").count(), 2);
}

#[test]
fn data_root_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    fs::create_dir(&data).unwrap();
    for (stem, n) in [("train", 16usize), ("t10k", 8)] {
        let pixels: Vec<u8> = (0..n * 64).map(|i| (i * 7 % 256) as u8).collect();
        let labels: Vec<u8> = (0..n).map(|i| (i % 4) as u8).collect();
        fs::write(data.join(format!("{stem}-images-idx3-ubyte")), serialize_idx_images(n, 8, 8, &pixels)).unwrap();
        fs::write(data.join(format!("{stem}-labels-idx1-ubyte")), serialize_idx_labels(&labels)).unwrap();
    }
    let text = TINY
        .replace("kind = \"synthetic\"", "kind = \"idx\"\nroot = \"/nonexistent\"")
        .replace("rounds = 2", "rounds = 1");
    let cfg = write(dir.path(), "idx.toml", &text);
    let out_dir = dir.path().join("out");

    let missing = sfedhifi(&["run", "--config", &cfg, "--out", out_dir.to_str().unwrap()]);
    assert_eq!(missing.status.code(), Some(3));

    let out = Command::new(env!("CARGO_BIN_EXE_sfedhifi"))
        .args(["run", "--config", &cfg, "--out", out_dir.to_str().unwrap()])
        .env("SFEDHIFI_DATA_ROOT", &data)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
}
