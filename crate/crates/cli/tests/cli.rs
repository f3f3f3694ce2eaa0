use std::path::Path;
use std::process::Command;

use crossdiff_cli::manifest::{RunManifest, SCHEMA};
use crossdiff_cli::output::sha256_hex;

const SMALL: &str = r#"
seed = 42

[model]
dim = 1
local_competition = [[1.0, 0.5], [0.5, 1.0]]
g = [["g", "g"], ["g", "g"]]
h = [["g", "g"], ["g", "g"]]
c = [["c", "c"], ["c", "c"]]

[model.kernels.g]
family = "gaussian"
bandwidth = 0.5

[model.kernels.c]
family = "compact-bump"
bandwidth = 0.5

[model.kernels.gamma]
family = "gaussian"

[[model.species]]
rate_bound = 1.0
sigma = { kind = "isotropic-saturating", floor = 0.1, amplitude = 0.2, half_saturation = 0.5, weights = [1.0, 1.0] }
drift = { kind = "zero" }
rate = { kind = "constant", value = 1.0 }

[[model.species]]
rate_bound = 1.0
sigma = { kind = "constant", scale = 0.3 }
drift = { kind = "attraction", strength = 0.5, center = [0.0], crowding = 0.2, weights = [1.0, 1.0] }
rate = { kind = "bump", base = 0.5, amplitude = 0.5, center = [0.0], width = 1.0 }

[[init.species]]
mass = 0.5
density = { kind = "gaussian", mean = [-0.3], std = 0.5 }

[[init.species]]
mass = 0.4
density = { kind = "gaussian", mean = [0.4], std = 0.4 }

[ibm]
k = [50, 200, 800]
dt = 0.01
t_end = 0.3
replicas = 4
snapshots = [0.1, 0.3]

[pde]
grid = { lower = [-4.0], upper = [4.0], cells = [160] }
dt = 1e-3
t_end = 0.3
snapshots = [0.1, 0.2, 0.3]
epsilons = [0.4, 0.2, 0.1]
mollifier = "gamma"

[flow]
species = 1
t = 0.2
dt = 0.01
paths = 200
probes = [[-0.5], [0.5]]
bundle_replicas = 2

[uniqueness]
deltas = [0.2, 0.1]
direction = [1.0]

[outputs]
formats = ["csv", "json", "binary"]
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_crossdiff"))
}

fn run(verb: &str, config: &Path, out: &Path, extra: &[&str]) -> i32 {
    let status = bin()
        .arg(verb)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(extra)
        .status()
        .unwrap();
    status.code().unwrap()
}

fn write_config(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn manifest(out: &Path, verb: &str) -> (serde_json::Value, RunManifest) {
    let bytes = std::fs::read(out.join(RunManifest::file_name(verb))).unwrap();
    (
        serde_json::from_slice(&bytes).unwrap(),
        serde_json::from_slice(&bytes).unwrap(),
    )
}

#[test]
fn every_verb_writes_a_schema_valid_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "small.toml", SMALL);
    let schema: serde_json::Value = serde_json::from_str(SCHEMA).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    for verb in [
        "validate",
        "simulate-ibm",
        "solve-pde",
        "flow",
        "study-large-k",
        "study-dirac",
        "study-flow",
        "study-uniqueness",
    ] {
        let out = dir.path().join(verb);
        let code = run(verb, &cfg, &out, &[]);
        assert!(code == 0 || (verb.starts_with("study-") && code == 3), "{verb} exited {code}");
        let (raw, m) = manifest(&out, verb);
        let errors: Vec<String> = validator.iter_errors(&raw).map(|e| e.to_string()).collect();
        assert!(errors.is_empty(), "{verb}: {errors:?}");
        assert_eq!(m.config_hash, sha256_hex(SMALL.as_bytes()));
        assert_eq!(m.seed, 42);
        for f in &m.files {
            assert!(out.join(f).is_file(), "{verb} lists missing file {f}");
        }
        assert_eq!(code == 3, !m.passed());
    }
}

#[test]
fn schema_rejects_tampered_manifests() {
    let schema: serde_json::Value = serde_json::from_str(SCHEMA).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    let m = RunManifest::new("solve-pde", b"x", 1);
    let mut v = serde_json::to_value(&m).unwrap();
    assert!(validator.is_valid(&v));
    v["config_hash"] = "abc".into();
    assert!(!validator.is_valid(&v));
    let mut v = serde_json::to_value(&m).unwrap();
    v["extra"] = 1.into();
    assert!(!validator.is_valid(&v));
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "small.toml", SMALL);
    for verb in ["simulate-ibm", "study-large-k", "study-uniqueness", "flow"] {
        let a = dir.path().join(format!("{verb}-a"));
        let b = dir.path().join(format!("{verb}-b"));
        run(verb, &cfg, &a, &[]);
        run(verb, &cfg, &b, &[]);
        let (_, ma) = manifest(&a, verb);
        let (_, mb) = manifest(&b, verb);
        assert_eq!(ma.summary, mb.summary, "{verb}");
        assert_eq!(ma.files, mb.files);
        for f in &ma.files {
            assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{verb}/{f}");
        }
    }
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "small.toml", SMALL);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    run("simulate-ibm", &cfg, &a, &[]);
    run("simulate-ibm", &cfg, &b, &["--seed", "43", "--workers", "1"]);
    assert_eq!(manifest(&b, "simulate-ibm").1.seed, 43);
    assert_ne!(
        std::fs::read(a.join("ibm_snapshots.csv")).unwrap(),
        std::fs::read(b.join("ibm_snapshots.csv")).unwrap()
    );
}

#[test]
fn resume_reuses_sub_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "small.toml", SMALL);
    let out = dir.path().join("o");
    run("study-large-k", &cfg, &out, &[]);
    let first = std::fs::read(out.join("large_k.csv")).unwrap();
    let cached = std::fs::read_dir(out.join("cache")).unwrap().count();
    assert_eq!(cached, 12);
    run("study-large-k", &cfg, &out, &["--resume"]);
    assert_eq!(std::fs::read(out.join("large_k.csv")).unwrap(), first);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    assert_eq!(bin().arg("no-such-verb").status().unwrap().code(), Some(1));
    assert_eq!(bin().arg("solve-pde").status().unwrap().code(), Some(1));

    let missing = dir.path().join("missing.toml");
    assert_eq!(run("solve-pde", &missing, &out, &[]), 1);

    let typo = write_config(dir.path(), "typo.toml", &SMALL.replace("t_end = 0.3\nsnapshots = [0.1, 0.2", "t_ned = 0.3\nsnapshots = [0.1, 0.2"));
    assert_eq!(run("solve-pde", &typo, &out, &[]), 1);

    let cfl = write_config(dir.path(), "cfl.toml", &SMALL.replace("dt = 1e-3", "dt = 0.5"));
    assert_eq!(run("solve-pde", &cfl, &out, &[]), 2);

    // a particle ceiling the population must exceed
    let boom = write_config(
        dir.path(),
        "boom.toml",
        &SMALL.replace("snapshots = [0.1, 0.3]", "snapshots = [0.1, 0.3]\npopulation_ceiling = 10"),
    );
    assert_eq!(run("simulate-ibm", &boom, &out, &[]), 2);

    // a zero shift direction is a usage error
    let zero = write_config(dir.path(), "zero.toml", &SMALL.replace("direction = [1.0]", "direction = [0.0]"));
    assert_eq!(run("study-uniqueness", &zero, &out, &[]), 1);
}

#[test]
fn report_lists_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "small.toml", SMALL);
    let out = dir.path().join("o");
    run("solve-pde", &cfg, &out, &[]);
    run("study-uniqueness", &cfg, &out, &[]);
    let o = bin().arg("report").arg("--out").arg(&out).output().unwrap();
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("solve-pde"));
    assert!(text.contains("study-uniqueness"));
    let empty = dir.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    assert_eq!(bin().arg("report").arg("--out").arg(&empty).status().unwrap().code(), Some(1));
}

#[test]
fn shipped_configs_load() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    let mut n = 0;
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.extension().is_some_and(|x| x == "toml") {
            crossdiff_cli::config::load(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
            n += 1;
        }
    }
    assert!(n >= 4);
}
