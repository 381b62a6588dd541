#![allow(dead_code)]

use std::ffi::OsStr;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

pub fn wrel<I, S>(args: I) -> Output
where
    I: IntoIterator<Item = S>,
    S: AsRef<OsStr>,
{
    Command::new(env!("CARGO_BIN_EXE_wrel"))
        .args(args)
        .env_remove("RUST_LOG")
        .output()
        .expect("spawn wrel")
}

/// Runs the binary and returns stdout, or stderr with the exit code.
pub fn wrel_ok<I, S>(args: I) -> Result<String, String>
where
    I: IntoIterator<Item = S>,
    S: AsRef<OsStr>,
{
    let out = wrel(args);
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        Err(format!(
            "exit {:?}: {}",
            out.status.code(),
            String::from_utf8_lossy(&out.stderr).trim()
        ))
    }
}

pub fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

pub fn read_json(path: &Path) -> Result<serde_json::Value, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| e.to_string())
}

pub fn file_digest(path: &Path) -> Result<String, String> {
    let bytes = fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

fn collect(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let p = entry?.path();
        if p.is_dir() {
            collect(root, &p, out)?;
        } else {
            out.push(p.strip_prefix(root).unwrap().to_path_buf());
        }
    }
    Ok(())
}

/// Digest over every relative path and file body under `dir`.
pub fn dir_digest(dir: &Path) -> Result<String, String> {
    let mut files = Vec::new();
    collect(dir, dir, &mut files).map_err(|e| format!("{}: {e}", dir.display()))?;
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        h.update(f.to_string_lossy().as_bytes());
        h.update([0]);
        h.update(fs::read(dir.join(&f)).map_err(|e| e.to_string())?);
    }
    Ok(hex::encode(h.finalize()))
}

/// Small and fast: 16x16 scenes, a few epochs per stage.
pub const TINY_CONFIG: &str = r#"
[split]
accurate_ratio = 0.3

[synthetic]
grid_size = 16
max_instances = 3

[model]
max_len = 12
text_dim = 8
embed_dim = 8
c1 = 4
c2 = 8
fused = 8

[train]
prompt_len = 3

[train.stage1]
epochs = 3
lr = 1e-2
batch_size = 4

[train.stage2]
epochs = 2
prompt_lr = 10.0
batch_size = 4

[train.stage3]
epochs = 2
lr = 1e-2
prompt_lr = 10.0
alpha_max = 0.99
batch_size = 4

[probe]
seeds = [0, 1]
n_train = 30
n_heldout = 10

[probe.train.stage1]
epochs = 2
lr = 1e-2
batch_size = 4

[probe.train.stage3]
epochs = 1
lr = 1e-2
batch_size = 4
"#;

pub fn write_tiny_config(dir: &Path) -> Result<PathBuf, String> {
    let p = dir.join("tiny.toml");
    fs::write(&p, TINY_CONFIG).map_err(|e| e.to_string())?;
    Ok(p)
}

/// Writes 40 training and 12 validation scenes under `dir`.
pub fn tiny_benchmark(dir: &Path) -> Result<(PathBuf, PathBuf), String> {
    let train = dir.join("train");
    let val = dir.join("val");
    wrel_ok(["synth", "--out", s(&train), "--n", "40", "--seed", "1", "--grid-size", "16"])?;
    wrel_ok(["synth", "--out", s(&val), "--n", "12", "--seed", "2", "--grid-size", "16"])?;
    Ok((train, val))
}
