use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_shrinklsi");

const SPHERE: &str = r#"
schema_version = 1
[model]
kind = "sphere"
n = 2
[grid]
spacing = 0.1
truncation_radius = 3.0
"#;

fn bump_config(width: f64, scale: f64) -> String {
    format!(
        r#"
schema_version = 1
epsilons = [0.5, 0.1]
[model]
kind = "plane"
n = 1
[grid]
spacing = 0.05
truncation_radius = 24.0
[density]
kind = "bump"
center = [0.5]
width = {width}
scale = {scale}
"#
    )
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn run(cmd: &str, config: &Path, out: &Path, extra: &[&str]) -> Output {
    Command::new(BIN)
        .arg(cmd)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(extra)
        .output()
        .unwrap()
}

fn record(out: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(out.join("run_record.json")).unwrap()).unwrap()
}

/// Every stored pass flag follows from the stored value and threshold.
fn assert_verdicts_sound(rec: &Value) {
    let mut all = true;
    for v in rec["verdicts"].as_array().unwrap() {
        let (x, t) = (v["value"].as_f64().unwrap(), v["threshold"].as_f64().unwrap());
        let pass = match v["relation"].as_str().unwrap() {
            "<=" => x <= t,
            ">=" => x >= t,
            r => panic!("relation {r}"),
        };
        assert_eq!(v["pass"].as_bool().unwrap(), pass, "{v}");
        all &= pass;
    }
    assert_eq!(rec["passed"].as_bool().unwrap(), all);
}

#[test]
fn verify_shrinker_on_round_sphere_passes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "s2.toml", SPHERE);
    let out = dir.path().join("out");
    let o = run("verify-shrinker", &cfg, &out, &["--plot-data"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let rec = record(&out);
    assert!(rec["reports"]["shrinker"]["max_residual"].as_f64().unwrap() < 1e-12);
    assert_eq!(rec["subcommand"], "verify-shrinker");
    assert_eq!(rec["config_hash"].as_str().unwrap().len(), 64);
    assert_verdicts_sound(&rec);
    let csv = fs::read_to_string(out.join("shrinker_residual.csv")).unwrap();
    assert!(csv.starts_with("p0,p1,x0,x1,x2,residual\n"));
}

#[test]
fn off_radius_sphere_fails_the_residual_verdict() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "s.toml", &SPHERE.replace("n = 2", "n = 2\nradius = 1.5"));
    let out = dir.path().join("out");
    let o = run("verify-shrinker", &cfg, &out, &[]);
    assert_eq!(o.status.code(), Some(1));
    let rec = record(&out);
    // |H + x/2| = |-2/r + r/2| on S^2(r)
    let expect = (1.5f64 / 2.0 - 2.0 / 1.5).abs();
    assert!((rec["reports"]["shrinker"]["max_residual"].as_f64().unwrap() - expect).abs() < 1e-10);
    assert_verdicts_sound(&rec);
}

#[test]
fn full_pipeline_on_a_line_bump() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bump.toml", &bump_config(2.0, 1.0));
    let out = dir.path().join("out");
    let o = run("full-pipeline", &cfg, &out, &[]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    let rec = record(&out);
    assert_verdicts_sound(&rec);
    let a0 = 1.0 + 0.5 * (4.0 * std::f64::consts::PI).ln();
    let abp = rec["reports"]["abp"].as_array().unwrap();
    assert_eq!(abp.len(), 2);
    for case in abp {
        assert!(case["alpha"].as_f64().unwrap() >= a0 - 1e-3);
    }
    for name in ["abp_trace_eps0.5.csv", "abp_trace_eps0.1.csv", "transport_samples_eps0.5.csv", "transport_probes_eps0.1.csv", "entropy_landscape_0.csv"] {
        assert!(out.join(name).exists(), "{name}");
    }
    let trace = fs::read_to_string(out.join("abp_trace_eps0.5.csv")).unwrap();
    let mut lines = trace.lines();
    assert_eq!(lines.next(), Some("delta,scaled_anchor,sup_norm,bound,bound_ok"));
    // 17 significant digits
    assert_eq!(lines.next().unwrap().split(',').next(), Some("1.0000000000000000e0"));
}

#[test]
fn narrow_bump_fails_only_the_probe_count_at_small_epsilon() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bump.toml", &bump_config(1.5, 1.0));
    let out = dir.path().join("out");
    let o = run("certify-transport", &cfg, &out, &[]);
    assert_eq!(o.status.code(), Some(1));
    let rec = record(&out);
    assert_verdicts_sound(&rec);
    let failed: Vec<&str> =
        rec["verdicts"].as_array().unwrap().iter().filter(|v| v["pass"] == false).map(|v| v["check"].as_str().unwrap()).collect();
    assert_eq!(failed, ["transport.eps0.1.unrecovered_probes"]);
}

#[test]
fn unnormalized_density_needs_auto_normalize() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bump.toml", &bump_config(1.5, 2.0));
    let out = dir.path().join("out");
    let o = run("lsi-deficit", &cfg, &out, &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--auto-normalize"));
    assert!(!out.join("run_record.json").exists());

    let o = run("lsi-deficit", &cfg, &out, &["--auto-normalize", "--emit-terms"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let rec = record(&out);
    let info = &rec["reports"]["density"];
    assert!((info["raw_mass"].as_f64().unwrap() - 2.0).abs() < 1e-12);
    assert_eq!(info["auto_normalized"], true);
    assert!((rec["reports"]["deficit"]["mass"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    assert!(String::from_utf8_lossy(&o.stdout).contains("deficit terms"));

    // the per-node integrands add up to the reported integrals
    let text = fs::read_to_string(out.join("deficit_terms.csv")).unwrap();
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let (mut fisher, mut ent) = (0.0, 0.0);
    for r in rdr.records() {
        let r = r.unwrap();
        let w: f64 = r[1].parse().unwrap();
        fisher += w * r[3].parse::<f64>().unwrap();
        ent += w * r[4].parse::<f64>().unwrap();
    }
    let d = &rec["reports"]["deficit"];
    assert!((fisher - d["dirichlet"].as_f64().unwrap()).abs() < 1e-10);
    assert!((ent - d["entropy"].as_f64().unwrap()).abs() < 1e-10);
}

#[test]
fn runs_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bump.toml", &bump_config(2.0, 1.0).replace("[0.5, 0.1]", "[0.5]"));
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        assert_eq!(run("certify-transport", &cfg, out, &["--seed", "7", "--plot-data"]).status.code(), Some(0));
    }
    let strip = |mut v: Value| {
        v.as_object_mut().unwrap().remove("timestamps");
        v
    };
    let (ra, rb) = (record(&a), record(&b));
    assert_eq!(ra["flags"]["seed"], 7);
    assert_eq!(strip(ra.clone()), strip(rb));
    for name in ra["sidecars"].as_array().unwrap() {
        let name = name.as_str().unwrap();
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn config_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    for (name, text) in [
        ("typo.toml", SPHERE.replace("spacing", "spacnig")),
        ("version.toml", SPHERE.replace("schema_version = 1", "schema_version = 9")),
        ("tau.toml", format!("tau = 2.0\n{}", bump_config(2.0, 1.0))),
    ] {
        let cfg = write_config(dir.path(), name, &text);
        let cmd = if name == "tau.toml" { "certify-transport" } else { "verify-shrinker" };
        let o = run(cmd, &cfg, &out, &[]);
        assert_eq!(o.status.code(), Some(2), "{name}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(String::from_utf8_lossy(&o.stderr).starts_with("config error"));
    }
}

#[test]
fn compute_errors_name_the_module() {
    let dir = tempfile::tempdir().unwrap();
    // support reaching the truncation cut
    let cfg = write_config(dir.path(), "wide.toml", &bump_config(2.0, 1.0).replace("truncation_radius = 24.0", "truncation_radius = 2.0"));
    let o = run("solve-abp", &cfg, &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("compute error in abp_solver"));
}

#[test]
fn entropy_of_the_plane() {
    let dir = tempfile::tempdir().unwrap();
    let text = "schema_version = 1\n[model]\nkind = \"plane\"\nn = 1\n[grid]\nspacing = 0.05\ntruncation_radius = 20.0\n";
    let cfg = write_config(dir.path(), "line.toml", text);
    let out = dir.path().join("out");
    assert_eq!(run("entropy", &cfg, &out, &[]).status.code(), Some(0));
    let rec = record(&out);
    assert!((rec["reports"]["entropy"]["lambda"].as_f64().unwrap() - 1.0).abs() < 1e-6);
    assert_verdicts_sound(&rec);
}

#[test]
fn shipped_configs_are_valid() {
    let dir = tempfile::tempdir().unwrap();
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for entry in fs::read_dir(root).unwrap() {
        let path = entry.unwrap().path();
        let o = run("verify-shrinker", &path, &dir.path().join("out"), &[]);
        assert_eq!(o.status.code(), Some(0), "{}: {}", path.display(), String::from_utf8_lossy(&o.stderr));
    }
}
