#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn core_fixture(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../core/tests/fixtures")
        .join(rel)
}

pub fn golden(name: &str) -> PathBuf {
    core_fixture(&format!("golden/{name}"))
}

pub struct Run {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

impl Run {
    pub fn ok(self) -> Self {
        assert_eq!(self.code, 0, "stdout:\n{}\nstderr:\n{}", self.stdout, self.stderr);
        self
    }
}

pub fn vqarank<I, S>(args: I) -> Run
where
    I: IntoIterator<Item = S>,
    S: AsRef<std::ffi::OsStr>,
{
    let Output { status, stdout, stderr } = Command::new(env!("CARGO_BIN_EXE_vqarank"))
        .args(args)
        .env_remove("VQARANK_LOG")
        .output()
        .expect("binary runs");
    Run {
        code: status.code().expect("exited normally"),
        stdout: String::from_utf8(stdout).unwrap(),
        stderr: String::from_utf8(stderr).unwrap(),
    }
}

/// Config re-ranking the golden fixture with its recorded VQA answers.
pub fn golden_config(dir: &Path) -> PathBuf {
    let text = format!(
        r#"[rerank]
lambda_vqa = 0.068
k = 0.8375
n = 4

[mock]
vqa_fixtures = {:?}
strict = true

[paths]
triplets = {:?}
cir_scores = {:?}
questions = {:?}
"#,
        golden("vqa_fixtures.jsonl"),
        golden("triplets.jsonl"),
        golden("cir_scores.jsonl"),
        golden("questions.jsonl"),
    );
    let path = dir.join("golden.toml");
    std::fs::write(&path, text).unwrap();
    path
}

pub fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// The number in front of `label` in a summary line like `12 VQA requests`.
pub fn count_before(text: &str, label: &str) -> u64 {
    let idx = text.find(label).unwrap_or_else(|| panic!("'{label}' not in {text:?}"));
    text[..idx]
        .split_whitespace()
        .last()
        .and_then(|n| n.parse().ok())
        .unwrap_or_else(|| panic!("no count before '{label}' in {text:?}"))
}
