#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

pub const TINY: &str = "\
# small enough that every subcommand finishes in well under a second
model.image_size=8
model.patch_size=4
model.embed_dim=16
model.depth=1
model.heads=2
model.mlp_ratio=2
model.classes=4
data.classes=4
data.per_class=16
data.image_size=8
pretrain.iters=20
pretrain.warmup=2
pretrain.batch_size=16
calib.samples=16
ptq.iters=10
ptq.warmup=2
ptq.batch_size=8
prompt.classes=2
prompt.iters=10
";

pub struct Run {
    pub ok: bool,
    pub stdout: String,
    pub stderr: String,
}

pub fn vitq<S: AsRef<std::ffi::OsStr>>(args: &[S]) -> Run {
    let out = Command::new(env!("CARGO_BIN_EXE_vitq"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("spawn vitq");
    Run {
        ok: out.status.success(),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

pub fn s(p: &Path) -> String {
    p.display().to_string()
}

/// Writes the tiny config into `dir` and returns its path.
pub fn tiny_config(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.conf");
    fs::write(&p, TINY).unwrap();
    p
}

/// Runs every subcommand once in `dir`; returns the stdout of each, with the
/// directory replaced by a placeholder.
pub fn pipeline(dir: &Path) -> Result<Vec<(String, String)>, String> {
    let cfg = s(&tiny_config(dir));
    let d = |name: &str| s(&dir.join(name));
    let steps: Vec<(&str, Vec<String>)> = vec![
        ("gen-toy-data", vec!["--out".into(), d("data")]),
        ("pretrain", vec!["--out".into(), d("teacher.ckpt"), "--report".into(), d("pretrain.txt")]),
        (
            "calibrate",
            vec![
                "--ckpt".into(), d("teacher.ckpt"), "--data".into(), d("data"),
                "--bits".into(), "W4A4".into(), "--out".into(), d("calib.ckpt"),
            ],
        ),
        (
            "quantize",
            vec![
                "--ckpt".into(), d("calib.ckpt"), "--data".into(), d("data"),
                "--out".into(), d("q.ckpt"), "--report".into(), d("quantize.txt"),
            ],
        ),
        ("eval", vec!["--ckpt".into(), d("q.ckpt"), "--data".into(), d("data")]),
        ("prompt-learn", vec!["--M".into(), "4".into(), "--out".into(), d("bank.ckpt"), "--report".into(), d("prompt.txt")]),
    ];
    let mut outs = Vec::new();
    for (cmd, rest) in steps {
        let mut args = vec![cmd.to_string(), "--config".into(), cfg.clone()];
        args.extend(rest);
        let r = vitq(&args);
        if !r.ok {
            return Err(format!("{cmd} failed: {}", r.stderr.trim()));
        }
        outs.push((cmd.to_string(), r.stdout.replace(&s(dir), "<dir>")));
    }
    Ok(outs)
}

fn files(dir: &Path, base: &Path, out: &mut Vec<PathBuf>) {
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            files(&p, base, out);
        } else {
            out.push(p.strip_prefix(base).unwrap().to_path_buf());
        }
    }
}

/// Two full pipeline runs in fresh directories; every output file and every
/// stdout must match byte for byte. Returns the number of files compared.
pub fn determinism_check() -> Result<usize, String> {
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (a, b) = (root.path().join("a"), root.path().join("b"));
    fs::create_dir_all(&a).unwrap();
    fs::create_dir_all(&b).unwrap();
    let oa = pipeline(&a)?;
    let ob = pipeline(&b)?;
    for ((cmd, x), (_, y)) in oa.iter().zip(&ob) {
        if x != y {
            return Err(format!("{cmd} printed different output"));
        }
    }
    let (mut fa, mut fb) = (Vec::new(), Vec::new());
    files(&a, &a, &mut fa);
    files(&b, &b, &mut fb);
    fa.sort();
    fb.sort();
    if fa != fb {
        return Err(format!("file sets differ: {fa:?} vs {fb:?}"));
    }
    for f in &fa {
        if fs::read(a.join(f)).unwrap() != fs::read(b.join(f)).unwrap() {
            return Err(format!("{} differs between runs", f.display()));
        }
    }
    Ok(fa.len())
}
