#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub const SMALL: &str = r#"
[model]
d_model = 16
n_enc_layers = 1
n_dec_layers = 1
n_heads = 2
d_ff = 32
vocab_size = 16
max_seq_len = 14
d_audio = 8
d_video = 6
adapter_rank = 2
prefix_rank = 2

[data]
n_samples = 96
n_test = 64
d_audio = 8
d_video = 6
vocab_size = 16
max_words = 8

[train]
epochs = 1

[pretrain]
epochs = 1
corpus_size = 64
"#;

/// Writes the small run config into `dir`.
pub fn small_config(dir: &Path) -> PathBuf {
    let path = dir.join("small.toml");
    std::fs::write(&path, SMALL).unwrap();
    path
}

pub fn flora(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flora")).args(args).env("FLORA_LOG", "warn").output().unwrap()
}

/// Runs the binary and panics with its stderr unless it succeeds.
pub fn ok(args: &[&str]) -> Output {
    let out = flora(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

pub fn code(args: &[&str]) -> i32 {
    flora(args).status.code().unwrap()
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

pub fn sha(path: &Path) -> String {
    flora_cli::manifest::sha256_hex(&std::fs::read(path).unwrap())
}

/// Data split, backbone and flora model in `dir`.
pub struct Pipeline {
    pub config: PathBuf,
    pub data: PathBuf,
    pub backbone: PathBuf,
    pub model: PathBuf,
}

pub fn pipeline(dir: &Path, extra_gen: &[&str]) -> Pipeline {
    let config = small_config(dir);
    let data = dir.join("data");
    let bb = dir.join("bb");
    let model = dir.join("flora");
    let mut gen = vec!["gen-data", "--config", s(&config), "--n-mc", "20000", "--out", s(&data)];
    gen.extend_from_slice(extra_gen);
    ok(&gen);
    ok(&["pretrain", "--config", s(&config), "--out", s(&bb)]);
    let backbone = bb.join("backbone.flbb");
    ok(&[
        "train",
        "--config",
        s(&config),
        "--mode",
        "flora",
        "--data",
        s(&data.join("train.jsonl")),
        "--backbone",
        s(&backbone),
        "--out",
        s(&model),
    ]);
    Pipeline { config, data, backbone, model }
}
