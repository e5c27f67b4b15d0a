#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn fixture(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(rel)
}

pub fn jcra(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_jcra")).args(args).output().expect("binary runs")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

pub fn code(o: &Output) -> i32 {
    o.status.code().expect("exited")
}

/// Fresh scratch directory under the target dir.
pub fn scratch(name: &str) -> PathBuf {
    let d = Path::new(env!("CARGO_TARGET_TMPDIR")).join(name);
    let _ = std::fs::remove_dir_all(&d);
    std::fs::create_dir_all(&d).unwrap();
    d
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Writes `actual` over the golden file when `JCRA_BLESS` is set, otherwise
/// compares bytes.
pub fn golden(rel: &str, actual: &[u8]) {
    let path = fixture(rel);
    if std::env::var_os("JCRA_BLESS").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, actual).unwrap();
    }
    let expected = std::fs::read(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert!(expected == actual, "{} differs from the stored golden file", path.display());
}

/// Small training config used by the CLI fixtures: 16×16 images, one person.
pub const SMALL_CONFIG: &str = r#"{
  "model": {"image_h": 16, "image_w": 16, "patch": 4, "d_model": 16, "heads": 2, "sample_points": 2,
            "encoder_layers": 1, "decoder_layers": 1, "num_queries": 4, "num_keypoints": 4, "ffn_dim": 16},
  "train": {"steps": 60, "log_every": 10, "seed": 3},
  "dataset": {"seed": 5, "scenes": 4, "min_persons": 1, "max_persons": 1}
}"#;
