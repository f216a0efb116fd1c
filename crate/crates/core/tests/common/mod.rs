#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use xforge::gateway::solution_code;
use xforge::model::Language;
use xforge::sandbox::{Sandbox, SandboxOptions};

pub fn sandbox() -> Sandbox {
    Sandbox::new(SandboxOptions::default()).expect("sandbox setup")
}

/// Corpus languages with a working toolchain on this machine.
pub fn installed_corpus_languages() -> Vec<Language> {
    let sb = sandbox();
    Language::CORPUS.into_iter().filter(|l| sb.is_available(*l)).collect()
}

fn comment(language: Language) -> &'static str {
    match language {
        Language::Python | Language::Bash | Language::Php => "#",
        _ => "//",
    }
}

/// `per_language` distinct `solve(x) = x * k + b` snippets per language.
pub fn write_snippets(path: &Path, languages: &[Language], per_language: usize) {
    let mut out = String::new();
    for &lang in languages {
        for i in 0..per_language {
            let k = 2 + (i % 4) as i64;
            let b = ((i / 4) % 4) as i64;
            let text = format!("{} helper {i} for {}\n{}", comment(lang), lang.as_str(), solution_code(lang, k, b));
            out.push_str(&serde_json::json!({"language": lang.as_str(), "source_text": text}).to_string());
            out.push('\n');
        }
    }
    std::fs::write(path, out).unwrap();
}

/// Writes `xforge.conf` into `dir` with the given extra lines.
pub fn write_config(dir: &Path, languages: &[Language], extra: &str) -> PathBuf {
    let names: Vec<&str> = languages.iter().map(|l| l.as_str()).collect();
    let text = format!(
        "run_dir = run\nsnippets = snippets.jsonl\nlanguages = {}\nbackend = mock\n{extra}\n",
        names.join(",")
    );
    let path = dir.join("xforge.conf");
    std::fs::write(&path, text).unwrap();
    path
}

pub fn xforge(config: &Path, args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_xforge"));
    cmd.args(args).arg("--config").arg(config).env("RUST_LOG", "warn");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("run xforge")
}

pub fn xforge_ok(config: &Path, args: &[&str]) -> Output {
    let out = xforge(config, args, &[]);
    assert!(
        out.status.success(),
        "xforge {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn line_count(path: &Path) -> usize {
    std::fs::read_to_string(path).unwrap().lines().filter(|l| !l.trim().is_empty()).count()
}
