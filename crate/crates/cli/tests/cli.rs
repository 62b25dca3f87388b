use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

const BIN: &str = env!("CARGO_BIN_EXE_cvrsim");

fn small_config(output: &Path) -> String {
    format!(
        r#"
output = "{}"
seeds = [4, 9]
schedule = [3600, 21600]

[sim]
warmup = 0.3

[data]
kind = "synthetic"

[data.generator]
n_records = 3000
horizon = 259200
d_max = 21600
n_buckets = 64
bias = -1.5
fields = [{{ cardinality = 30 }}, {{ cardinality = 4 }}]
delay_mixture = [{{ weight = 0.6, rate = 0.001 }}, {{ weight = 0.4, rate = 0.0001 }}]

[hyper]
lr = 0.002
batch_size = 32
embed_dim = 4
hidden = 16
head_hidden = 8

[[learners]]
kind = "prophet_star"

[[learners]]
kind = "ftp"

[[learners]]
kind = "waiting"
delay = 3600
"#,
        output.display()
    )
}

fn cvrsim(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env("CVRSIM_WORKERS", "1").output().unwrap()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("run.toml");
    fs::write(&path, text).unwrap();
    path
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read(path: impl AsRef<Path>) -> Vec<u8> {
    fs::read(path.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", path.as_ref().display()))
}

#[test]
fn bundled_example_runs_three_seeds_quickly() {
    let tmp = tempfile::tempdir().unwrap();
    let example = Path::new(env!("CARGO_MANIFEST_DIR")).join("examples/synthetic-small.toml");
    let out = tmp.path().join("run");
    let start = Instant::now();
    let o = cvrsim(&["run", example.to_str().unwrap(), "--output", out.to_str().unwrap()]);
    let elapsed = start.elapsed();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(elapsed.as_secs() < 60, "took {elapsed:?}");
    for seed in [1, 2, 3] {
        let dir = out.join(format!("seed-{seed}"));
        for f in ["report.csv", "report.json", "config.toml", "ftp.extlog", "checkpoints/ftp.ckpt"] {
            assert!(dir.join(f).is_file(), "missing {f} for seed {seed}");
        }
    }
}

#[test]
fn rerun_is_byte_identical_and_snapshots_reproduce() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("a");
    let cfg = write_config(tmp.path(), &small_config(&out));
    let cfg = cfg.to_str().unwrap();
    assert!(cvrsim(&["run", cfg]).status.success());
    let again = tmp.path().join("b");
    assert!(cvrsim(&["run", cfg, "--output", again.to_str().unwrap()]).status.success());
    for seed in [4, 9] {
        for f in ["report.csv", "report.json", "ftp.extlog", "checkpoints/ftp.ckpt"] {
            let rel = format!("seed-{seed}/{f}");
            assert_eq!(read(out.join(&rel)), read(again.join(&rel)), "{rel} differs");
        }
    }

    let snap = out.join("seed-9/config.toml");
    let replay = tmp.path().join("c");
    let o = cvrsim(&["run", snap.to_str().unwrap(), "--output", replay.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(read(out.join("seed-9/report.csv")), read(replay.join("seed-9/report.csv")));
    assert!(!replay.join("seed-4").exists());
}

#[test]
fn parallel_workers_match_serial() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("serial");
    let cfg = write_config(tmp.path(), &small_config(&out));
    assert!(cvrsim(&["run", cfg.to_str().unwrap(), "--no-checkpoints"]).status.success());
    let par = tmp.path().join("par");
    let o = Command::new(BIN)
        .args(["run", cfg.to_str().unwrap(), "--no-checkpoints", "--output", par.to_str().unwrap()])
        .env("CVRSIM_WORKERS", "2")
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(stderr(&o).contains("on 2 worker(s)"));
    for seed in [4, 9] {
        let rel = format!("seed-{seed}/report.csv");
        assert_eq!(read(out.join(&rel)), read(par.join(&rel)));
    }
    assert!(!out.join("seed-4/checkpoints").exists());
}

#[test]
fn generated_log_reproduces_inline_run() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("inline");
    let cfg = write_config(tmp.path(), &small_config(&out));
    let cfg = cfg.to_str().unwrap();
    assert!(cvrsim(&["run", cfg, "--seeds", "9", "--no-checkpoints"]).status.success());

    let log = tmp.path().join("log.tsv.gz");
    assert!(cvrsim(&["gen", cfg, "--seed", "9", "-o", log.to_str().unwrap()]).status.success());
    let from_file = tmp.path().join("file");
    let o = cvrsim(&[
        "run",
        cfg,
        "--seeds",
        "9",
        "--no-checkpoints",
        "--data",
        log.to_str().unwrap(),
        "--output",
        from_file.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(read(out.join("seed-9/report.csv")), read(from_file.join("seed-9/report.csv")));
}

#[test]
fn missing_data_file_exits_2_naming_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("no-such-log.tsv");
    let text = format!(
        "output = \"{}\"\nschedule = [3600]\n[data]\nkind = \"canonical\"\npath = \"{}\"\n[[learners]]\nkind = \"prophet\"\n",
        tmp.path().join("out").display(),
        missing.display()
    );
    let cfg = write_config(tmp.path(), &text);
    let o = cvrsim(&["run", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains(missing.to_str().unwrap()), "{}", stderr(&o));
}

#[test]
fn invalid_config_exits_2_naming_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let cases = [
        ("d_max = 21600", "d_max = 7200", "data.generator.d_max"),
        ("delay = 3600", "delay = 90000", "learners[2]"),
        ("batch_size = 32", "batchsize = 32", "hyper.batchsize"),
        ("seeds = [4, 9]", "seeds = []", "seeds"),
        ("warmup = 0.3", "warmup = 1.5", "sim.warmup"),
        ("n_records = 3000", "n_records = \"many\"", "n_records"),
    ];
    for (from, to, field) in cases {
        let cfg = write_config(tmp.path(), &small_config(&out).replace(from, to));
        let o = cvrsim(&["run", cfg.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(2), "{to}: {}", stderr(&o));
        assert!(stderr(&o).contains(field), "{to}: {}", stderr(&o));
    }
}

#[test]
fn diverging_training_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let cfg = write_config(tmp.path(), &small_config(&out).replace("lr = 0.002", "lr = 1e30"));
    let o = cvrsim(&["run", cfg.to_str().unwrap(), "--seeds", "4"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite"));
}

#[test]
fn besttask_prints_table_columns() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let cfg = write_config(tmp.path(), &small_config(&out));
    assert!(cvrsim(&["run", cfg.to_str().unwrap(), "--no-checkpoints"]).status.success());
    let o = cvrsim(&["besttask", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    let header: Vec<&str> = text.lines().nth(1).unwrap().split_whitespace().collect();
    assert_eq!(header, ["d_k", "Feedback%", "Best%"]);
    assert!(text.contains("mean over 2 runs (ftp)"));
    let last: Vec<&str> = text.lines().last().unwrap().split_whitespace().collect();
    assert_eq!(last[0], "6h");
    assert_eq!(last[1], "100.0");

    let o = cvrsim(&["besttask", tmp.path().join("nothing").to_str().unwrap()]);
    assert_ne!(o.status.code(), Some(0));
}

#[test]
fn stats_quantiles_match_the_exponential_delay() {
    // One exponential component with a 2h mean, truncated at d_max = 1 day.
    let tmp = tempfile::tempdir().unwrap();
    let rate = 1.0 / 7200.0;
    let d_max = 86400.0;
    let text = format!(
        r#"
output = "{}"
schedule = [3600, 86400]
[data]
kind = "synthetic"
[data.generator]
n_records = 40000
horizon = 864000
d_max = 86400
n_buckets = 4
weight_scale = 0.0
fields = [{{ cardinality = 2 }}]
delay_mixture = [{{ weight = 1.0, rate = {rate:e} }}]
[[learners]]
kind = "prophet"
"#,
        tmp.path().display()
    );
    let cfg = write_config(tmp.path(), &text);
    let log = tmp.path().join("log.tsv");
    assert!(cvrsim(&["gen", cfg.to_str().unwrap(), "-o", log.to_str().unwrap()]).status.success());
    let o = cvrsim(&["stats", log.to_str().unwrap(), "--schedule", "3600,86400", "--json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();

    let f_max = 1.0 - f64::exp(-rate * d_max);
    let conversions = v["conversions"].as_f64().unwrap();
    let rate_hat = v["conversion_rate"].as_f64().unwrap();
    let expect_rate = 0.5 * f_max;
    let se = (expect_rate * (1.0 - expect_rate) / 40000.0).sqrt();
    assert!((rate_hat - expect_rate).abs() < 4.0 * se, "rate {rate_hat} vs {expect_rate}");

    for q in v["delay_quantiles"].as_array().unwrap() {
        let (p, got) = (q[0].as_f64().unwrap(), q[1].as_f64().unwrap());
        let want = -(1.0 - p * f_max).ln() / rate;
        // Asymptotic standard error of a sample quantile: sqrt(p(1-p)/n) / density.
        let density = rate * (-rate * want).exp() / f_max;
        let se = (p * (1.0 - p) / conversions).sqrt() / density;
        assert!((got - want).abs() < 4.0 * se + 1.0, "p{p}: {got} vs {want} (se {se})");
    }
    let fb = v["feedback"].as_array().unwrap();
    let within_hour = (1.0 - f64::exp(-rate * 3600.0)) / f_max * 100.0;
    assert!((fb[0][1].as_f64().unwrap() - within_hour).abs() < 2.0);
    assert_eq!(fb[1][1].as_f64().unwrap(), 100.0);
}

#[test]
fn stats_on_missing_log_exits_2() {
    let o = cvrsim(&["stats", "/definitely/not/here.tsv"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/definitely/not/here.tsv"));
}
