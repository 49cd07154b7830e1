use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const CONFIG: &str = r#"
seed = 11
[forecast]
leads = [0, 1, 2, 4]
ensemble_sizes = [15]
[baseline]
clusters = [1, 2]
switches = [2, 6]
[[variables]]
name = "field"
q = 4
[variables.source]
kind = "modulated-field"
d = 4
n = 300
periods = [12.0]
noise = 0.2
"#;

const STAGES: [&str; 5] = ["synth", "decompose", "forecast", "baseline", "evaluate"];

fn analogcast(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_analogcast")).args(args).output().unwrap()
}

fn stage(name: &str, config: &Path, out: &Path) -> Output {
    analogcast(&[name, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()])
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("experiment.toml");
    fs::write(&p, text).unwrap();
    p
}

fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn every_stage_runs_and_stamps_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), CONFIG);
    let out = dir.path().join("out");
    for s in STAGES {
        let o = stage(s, &config, &out);
        assert!(o.status.success(), "{s}: {}", String::from_utf8_lossy(&o.stderr));
        let listed = String::from_utf8(o.stdout).unwrap();
        assert!(!listed.trim().is_empty(), "{s} listed no files");
        for line in listed.lines() {
            assert!(out.join(line).is_file(), "{s} listed missing {line}");
        }
        assert!(out.join(format!("manifest-{s}.txt")).is_file());
    }
    let header = fs::read_to_string(out.join("horizons.csv")).unwrap();
    let first = header.lines().next().unwrap();
    assert!(first.starts_with("# analogcast stage=evaluate config_hash="), "{first}");
    assert!(header.lines().any(|l| l == "method,truth_mode,threshold,horizon"));
    let csv = fs::read_to_string(out.join("data/field.csv")).unwrap();
    assert!(csv.starts_with("# analogcast stage=synth config_hash="));
    assert!(out.join("baseline/aic.csv").is_file());
}

#[test]
fn runs_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), CONFIG);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        for s in STAGES {
            assert!(stage(s, &config, out).status.success());
        }
    }
    assert_eq!(tree(&a), tree(&b));
}

#[test]
fn cached_kernel_is_reused() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), CONFIG);
    let out = dir.path().join("out");
    assert!(stage("decompose", &config, &out).status.success());
    let kernels = |out: &Path| {
        let mut v: Vec<_> = fs::read_dir(out.join("cache"))
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| p.extension().is_some_and(|x| x == "kmat"))
            .map(|p| (p.clone(), fs::metadata(&p).unwrap().modified().unwrap()))
            .collect();
        v.sort();
        v
    };
    let before = kernels(&out);
    assert!(!before.is_empty());
    let basis = fs::read(out.join("decompose/basis.eigb")).unwrap();
    assert!(stage("decompose", &config, &out).status.success());
    assert_eq!(kernels(&out), before);
    assert_eq!(fs::read(out.join("decompose/basis.eigb")).unwrap(), basis);
}

#[test]
fn invalid_config_fails_naming_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let bad = write_config(dir.path(), &CONFIG.replace("q = 4", "q = 0"));
    let o = stage("synth", &bad, &out);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("config"), "{err}");

    let missing = CONFIG.replace(
        "kind = \"modulated-field\"\nd = 4\nn = 300\nperiods = [12.0]\nnoise = 0.2",
        "kind = \"file\"\npath = \"does-not-exist.csv\"",
    );
    let o = stage("decompose", &write_config(dir.path(), &missing), &out);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.starts_with("error: decompose"), "{err}");
}

#[test]
fn help_lists_subcommands() {
    let o = analogcast(&["--help"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    for s in STAGES {
        assert!(text.contains(s));
    }
}
