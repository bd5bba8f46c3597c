use std::path::{Path, PathBuf};
use std::process::Command;

use glmcert::{auto_batch_size, LossKind};
use serde_json::Value;

const GEN: &str = "n=200,p=100,k=10,rho=0.9,loss=squared,seed=1";

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
}

fn run_in(dir: &Path, args: &[&str]) -> Run {
    let out = Command::new(env!("CARGO_BIN_EXE_glmcert")).args(args).current_dir(dir).output().expect("spawn glmcert");
    Run {
        code: out.status.code().expect("exited normally"),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

fn read_json(path: impl AsRef<Path>) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn schema_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs/schemas")
}

/// Serves `urn:glmcert:schema:<name>:v1` from the shipped schema files.
struct LocalSchemas;

impl jsonschema::Retrieve for LocalSchemas {
    fn retrieve(&self, uri: &jsonschema::Uri<String>) -> Result<Value, Box<dyn std::error::Error + Send + Sync>> {
        let name = uri
            .as_str()
            .strip_prefix("urn:glmcert:schema:")
            .and_then(|rest| rest.strip_suffix(":v1"))
            .ok_or_else(|| format!("unexpected schema reference {}", uri.as_str()))?;
        Ok(read_json(schema_dir().join(format!("{name}.v1.json"))))
    }
}

fn assert_valid(schema: &str, doc: &Value) {
    let schema = read_json(schema_dir().join(schema));
    let validator = jsonschema::options().with_retriever(LocalSchemas).build(&schema).expect("schema compiles");
    let errors: Vec<String> = validator.iter_errors(doc).map(|e| format!("{} at {}", e, e.instance_path())).collect();
    assert!(errors.is_empty(), "schema violations: {errors:#?}");
}

fn problem_args<'a>(extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec!["--gen", GEN, "--k", "10", "--M", "2", "--lambda2", "1"];
    v.extend_from_slice(extra);
    v
}

#[test]
fn solve_writes_valid_certificate_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["solve"];
    args.extend(problem_args(&["--out", "c.json", "--report", "r.json", "--profile", "p.csv"]));
    let r = run_in(dir.path(), &args);
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert!(r.stdout.starts_with("value ") && r.stdout.contains("gap 0.0000%"), "{}", r.stdout);

    let cert = read_json(dir.path().join("c.json"));
    assert_valid("certificate.v1.json", &cert);
    assert_eq!(cert["gap_percent"], 0.0);
    assert_eq!(cert["status"], "optimal");
    let support: Vec<u64> = cert["support"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).collect();
    assert!(!support.is_empty() && support.len() <= 10);
    assert!(support.iter().all(|&j| (1..=100).contains(&j)));
    let coefs = cert["coefficients"].as_array().unwrap();
    for &j in &support {
        assert_ne!(coefs[j as usize - 1].as_f64().unwrap(), 0.0);
    }
    assert!(cert.get("profile").is_some());

    let report = read_json(dir.path().join("r.json"));
    assert_valid("run-report.v1.json", &report);
    assert_eq!(report["certificate"], cert);
    let profile = std::fs::read_to_string(dir.path().join("p.csv")).unwrap();
    assert!(profile.starts_with("component,seconds,percent\n") && profile.contains("\ntotal,"));
}

#[test]
fn report_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["solve"];
    args.extend(problem_args(&["--out", "a.json", "--report", "r.json", "--batch-size", "auto"]));
    assert_eq!(run_in(dir.path(), &args).code, 0);
    let report = read_json(dir.path().join("r.json"));
    let mut argv: Vec<String> =
        report["reproduce"].as_array().unwrap().iter().map(|v| v.as_str().unwrap().to_string()).collect();
    assert_eq!(argv[0], "glmcert");
    argv.extend(["--out".into(), "b.json".into()]);
    let refs: Vec<&str> = argv[1..].iter().map(String::as_str).collect();
    assert_eq!(run_in(dir.path(), &refs).code, 0);
    let a = std::fs::read(dir.path().join("a.json")).unwrap();
    let b = std::fs::read(dir.path().join("b.json")).unwrap();
    assert_eq!(a, b, "rerun from the report must give the same certificate bytes");
}

#[test]
fn auto_batch_size_is_echoed() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["solve"];
    args.extend(problem_args(&["--out", "c.json", "--batch-size", "auto", "--memory-budget", "4GiB", "--report", "r.json"]));
    assert_eq!(run_in(dir.path(), &args).code, 0);
    let expected = auto_batch_size(4 << 30, 200, 100, 10, LossKind::Squared);
    assert_eq!(read_json(dir.path().join("c.json"))["batch_size"], expected);
    let report = read_json(dir.path().join("r.json"));
    assert_eq!(report["config"]["batch_size_requested"], "auto");
    assert!(report["reproduce"].as_array().unwrap().contains(&Value::from(expected.to_string())));
}

#[test]
fn usage_errors_exit_64() {
    let dir = tempfile::tempdir().unwrap();
    let cases: Vec<Vec<&str>> = vec![
        vec!["solve", "--gen", GEN, "--M", "2", "--lambda2", "1", "--out", "c.json"],
        vec!["solve", "--gen", "n=10,p=5,k=2,colour=red", "--k", "2", "--M", "2", "--lambda2", "1", "--out", "c.json"],
        vec!["solve", "--gen", GEN, "--k", "10", "--M", "2", "--lambda2", "1", "--out", "c.json", "--batch-size", "0"],
        vec!["solve", "--gen", GEN, "--k", "10", "--M", "-1", "--lambda2", "1", "--out", "c.json"],
        vec!["solve", "--gen", GEN, "--loss", "logistic", "--k", "10", "--M", "2", "--lambda2", "1", "--out", "c.json"],
        vec!["solve", "--data", "d.csv", "--k", "2", "--M", "2", "--lambda2", "1", "--out", "c.json"],
        vec!["solve", "--gen", GEN, "--data", "d.csv", "--k", "2", "--M", "2", "--lambda2", "1", "--out", "c.json"],
        vec!["rashomon", "--gen", GEN, "--k", "10", "--M", "2", "--lambda2", "1", "--out", "c.json"],
        vec!["sweep", "--gen", GEN, "--k", "10", "--M", "2", "--lambda2", "1", "--out", "s.csv", "--sizes", "1,x"],
        vec!["frobnicate"],
    ];
    for args in cases {
        let r = run_in(dir.path(), &args);
        assert_eq!(r.code, 64, "{args:?}: {}", r.stderr);
        assert!(!r.stderr.is_empty());
    }
    assert!(!dir.path().join("c.json").exists());
}

#[test]
fn runtime_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let r = run_in(dir.path(), &["solve", "--data", "missing.csv", "--loss", "squared", "--k", "2", "--M", "2", "--lambda2", "1", "--out", "c.json"]);
    assert_eq!(r.code, 1);
    assert!(r.stderr.contains("missing.csv"));
    std::fs::write(dir.path().join("bad.csv"), "a,b,y\n1,2,3\n4,oops,6\n").unwrap();
    let r = run_in(dir.path(), &["solve", "--data", "bad.csv", "--loss", "squared", "--k", "1", "--M", "2", "--lambda2", "1", "--out", "c.json"]);
    assert_eq!(r.code, 1);
    assert!(r.stderr.contains("row 2"), "{}", r.stderr);
}

#[test]
fn time_limit_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let r = run_in(
        dir.path(),
        &[
            "solve", "--gen", "n=300,p=300,k=8,rho=0.9,loss=squared,seed=8", "--k", "8", "--M", "10", "--lambda2", "0.01",
            "--batch-size", "1", "--time-limit", "0.05", "--out", "c.json",
        ],
    );
    assert_eq!(r.code, 2, "{}", r.stderr);
    let cert = read_json(dir.path().join("c.json"));
    assert_valid("certificate.v1.json", &cert);
    assert_eq!(cert["status"], "time_limit");
    assert!(cert["gap_percent"].as_f64().unwrap() > 0.0);
}

#[test]
fn gen_is_byte_reproducible_and_solvable_from_disk() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["a.csv", "b.csv"] {
        let r = run_in(dir.path(), &["gen", "--gen", "n=60,p=12,k=3,rho=0.5,seed=4", "--out", out]);
        assert_eq!(r.code, 0, "{}", r.stderr);
    }
    assert_eq!(std::fs::read(dir.path().join("a.csv")).unwrap(), std::fs::read(dir.path().join("b.csv")).unwrap());
    let sidecar = read_json(dir.path().join("a.json"));
    assert_valid("dataset.v1.json", &sidecar);
    assert_eq!(sidecar["generator"]["snr"], 5.0);
    assert_eq!(sidecar["true_support"], serde_json::json!([4, 8, 12]));

    let common = ["--k", "3", "--M", "2", "--lambda2", "1"];
    let mut from_gen = vec!["solve", "--gen", "n=60,p=12,k=3,rho=0.5,seed=4", "--out", "g.json"];
    from_gen.extend(common);
    let mut from_file = vec!["solve", "--data", "a.csv", "--loss", "squared", "--out", "f.json", "--report", "r.json"];
    from_file.extend(common);
    assert_eq!(run_in(dir.path(), &from_gen).code, 0);
    assert_eq!(run_in(dir.path(), &from_file).code, 0);
    assert_eq!(read_json(dir.path().join("g.json")), read_json(dir.path().join("f.json")));
    let report = read_json(dir.path().join("r.json"));
    assert_valid("run-report.v1.json", &report);
    let digest = {
        use sha2::Digest;
        hex::encode(sha2::Sha256::digest(std::fs::read(dir.path().join("a.csv")).unwrap()))
    };
    assert_eq!(report["fingerprint"], digest);
}

fn csv_rows(path: impl AsRef<Path>) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(path).unwrap().records().map(Result::unwrap).collect()
}

#[test]
fn rashomon_outputs_are_consistent() {
    let dir = tempfile::tempdir().unwrap();
    let gen = "n=80,p=10,k=3,rho=0.3,loss=logistic,seed=2";
    let r = run_in(
        dir.path(),
        &["rashomon", "--gen", gen, "--k", "3", "--M", "2", "--lambda2", "1", "--epsilon", "0.05", "--out", "c.json", "--report", "r.json"],
    );
    assert_eq!(r.code, 0, "{}", r.stderr);
    let pool = read_json(dir.path().join("c.pool.json"));
    assert_valid("pool.v1.json", &pool);
    assert_valid("run-report.v1.json", &read_json(dir.path().join("r.json")));
    let size = pool["size"].as_u64().unwrap() as usize;
    assert!(size > 1);
    let models = pool["models"].as_array().unwrap();
    assert_eq!(models.len(), size);
    let cert = read_json(dir.path().join("c.json"));
    assert_eq!(models[0]["objective"], cert["optimal_value"]);
    let threshold = pool["threshold"].as_f64().unwrap();
    for w in models.windows(2) {
        assert!(w[0]["objective"].as_f64().unwrap() <= w[1]["objective"].as_f64().unwrap());
    }
    assert!(models.iter().all(|m| m["objective"].as_f64().unwrap() <= threshold));

    let rows = csv_rows(dir.path().join("c.models.csv"));
    assert_eq!(rows.len(), size);
    assert!(rows.iter().all(|r| r[4].parse::<f64>().is_ok() && r[5].parse::<f64>().is_ok()));
    let freq = csv_rows(dir.path().join("c.frequency.csv"));
    assert_eq!(freq.len(), 10);
    // frequencies sum to the mean support size
    let mean_size: f64 = models.iter().map(|m| m["support"].as_array().unwrap().len() as f64).sum::<f64>() / size as f64;
    let total: f64 = freq.iter().map(|r| r[2].parse::<f64>().unwrap()).sum();
    assert!((total - mean_size).abs() < 1e-12);
    assert_eq!(csv_rows(dir.path().join("c.reliance.csv")).len(), 10);

    let r = run_in(
        dir.path(),
        &["rashomon", "--gen", gen, "--k", "3", "--M", "2", "--lambda2", "1", "--epsilon", "0.05", "--top-n", "2", "--out", "t.json"],
    );
    assert_eq!(r.code, 0, "{}", r.stderr);
    let capped = read_json(dir.path().join("t.pool.json"));
    assert_eq!(capped["size"], 2);
    assert_eq!(capped["models"][0]["support"], models[0]["support"]);
    assert_eq!(capped["models"][1]["support"], models[1]["support"]);
}

#[test]
fn rashomon_with_zero_epsilon_keeps_the_optimum_only() {
    let dir = tempfile::tempdir().unwrap();
    let r = run_in(dir.path(), &["rashomon", "--gen", GEN, "--k", "10", "--M", "2", "--lambda2", "1", "--epsilon", "0", "--out", "c.json"]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let pool = read_json(dir.path().join("c.pool.json"));
    assert_eq!(pool["size"], 1);
    assert_eq!(pool["models"][0]["support"], read_json(dir.path().join("c.json"))["support"]);
    assert_eq!(csv_rows(dir.path().join("c.models.csv")).len(), 1);
}

#[test]
fn sweep_rows_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["sweep"];
    args.extend(problem_args(&["--sizes", "1,4,16", "--out", "a.csv", "--plot-data", "a.dat"]));
    assert_eq!(run_in(dir.path(), &args).code, 0);
    let mut again = vec!["sweep"];
    again.extend(problem_args(&["--sizes", "1,4,16", "--out", "b.csv"]));
    assert_eq!(run_in(dir.path(), &again).code, 0);
    let (a, b) = (csv_rows(dir.path().join("a.csv")), csv_rows(dir.path().join("b.csv")));
    assert_eq!(a.len(), 3);
    for (ra, rb) in a.iter().zip(&b) {
        assert_eq!((&ra[0], &ra[2], &ra[4]), (&rb[0], &rb[2], &rb[4]));
        assert_eq!(&ra[3], "0.0");
    }
    let plot = std::fs::read_to_string(dir.path().join("a.dat")).unwrap();
    assert_eq!(plot.lines().filter(|l| !l.starts_with('#')).count(), 3);

    let mut single = vec!["sweep"];
    single.extend(problem_args(&["--sizes", "8", "--out", "one.csv", "--report", "r.json"]));
    assert_eq!(run_in(dir.path(), &single).code, 0);
    assert_eq!(csv_rows(dir.path().join("one.csv")).len(), 1);
    assert_valid("run-report.v1.json", &read_json(dir.path().join("r.json")));
}

#[test]
fn schemas_reject_zero_based_supports() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["solve"];
    args.extend(problem_args(&["--out", "c.json"]));
    assert_eq!(run_in(dir.path(), &args).code, 0);
    let mut cert = read_json(dir.path().join("c.json"));
    cert["support"][0] = Value::from(0);
    let schema = read_json(schema_dir().join("certificate.v1.json"));
    let validator = jsonschema::options().with_retriever(LocalSchemas).build(&schema).unwrap();
    assert!(!validator.is_valid(&cert));
}
