use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn nvqr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nvqr")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p
}

const SMALL_TRAIN: &str = r#"
[train]
method = "ac-nqr"
epochs = 2
width = 6
depth = 2
batch_size = 128
"#;

fn banana_config(dir: &Path, out: &Path) -> PathBuf {
    let body = format!(
        "out = \"{}\"\nseeds = [0]\n[dataset]\nname = \"banana\"\nn = 1500\n{SMALL_TRAIN}",
        out.display()
    );
    write_config(dir, "banana.toml", &body)
}

fn strip_wall_time(csv: &str) -> Vec<String> {
    csv.lines()
        .map(|l| l.rsplit_once(',').map_or(l, |(a, _)| a).to_string())
        .collect()
}

#[test]
fn train_writes_artifacts_and_repeats() {
    let tmp = tempfile::tempdir().unwrap();
    let run1 = tmp.path().join("run1");
    let cfg = banana_config(tmp.path(), &run1);
    let o = nvqr(&["train", "--config", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["model.json", "train_log.csv", "config.toml", "manifest.json"] {
        assert!(run1.join(f).is_file(), "{f}");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run1.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);

    let run2 = tmp.path().join("run2");
    let o = nvqr(&["train", "--config", cfg.to_str().unwrap(), "--out", run2.to_str().unwrap()]);
    assert!(o.status.success());
    let a = std::fs::read_to_string(run1.join("train_log.csv")).unwrap();
    let b = std::fs::read_to_string(run2.join("train_log.csv")).unwrap();
    assert_eq!(a.lines().count(), 3);
    assert!(a.lines().next().unwrap().ends_with("wall_ms"));
    assert_eq!(strip_wall_time(&a), strip_wall_time(&b));

    // a finished run directory is not overwritten
    let o = nvqr(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let o = nvqr(&["train", "--config", cfg.to_str().unwrap(), "--resume"]);
    assert!(o.status.success());
}

#[test]
fn validation_failures_exit_one_without_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("never");
    let cfg = write_config(
        tmp.path(),
        "missing.toml",
        &format!(
            "out = \"{}\"\n[dataset]\nname = \"csv\"\npath = \"{}\"\ny_columns = [\"y\"]\n[metrics]\nnames = []\n",
            out.display(),
            tmp.path().join("absent.csv").display()
        ),
    );
    let o = nvqr(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("absent.csv") && err.contains("does not exist"), "{err}");
    assert!(!out.exists());

    let cfg = write_config(tmp.path(), "unknown.toml", "[train]\nlearning_rate = 0.1\n");
    let o = nvqr(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));

    let cfg = write_config(
        tmp.path(),
        "many.toml",
        "seeds = []\n[train]\nmethod = \"x\"\nbatch_size = 0\n[conformal]\nalphas = [1.5]\n",
    );
    let o = nvqr(&["train", "--config", cfg.to_str().unwrap()]);
    let err = String::from_utf8_lossy(&o.stderr);
    assert_eq!(err.lines().filter(|l| l.trim_start().starts_with("- ")).count(), 4, "{err}");
}

#[test]
fn diverging_run_keeps_its_partial_log() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("nan");
    let cfg = write_config(
        tmp.path(),
        "nan.toml",
        &format!(
            "out = \"{}\"\n[dataset]\nname = \"banana\"\nn = 40\n[train]\nmethod = \"c-nqr\"\nepochs = 4\nwidth = 4\ndepth = 1\nlr = 1e300\n",
            out.display()
        ),
    );
    let o = nvqr(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    let log = std::fs::read_to_string(out.join("train_log.csv")).unwrap();
    assert!(log.lines().count() >= 2, "{log}");
    assert!(!out.join("manifest.json").exists());
}

#[derive(Debug, PartialEq, serde::Deserialize, serde::Serialize)]
struct Row {
    seed: u64,
    method: String,
    alpha: f64,
    n_cal: usize,
    n_test: usize,
    threshold: Option<f64>,
    coverage: f64,
    worst_slab_coverage: f64,
    log_volume_per_dim: Option<f64>,
    unknown: usize,
    calibration_failures: usize,
}

#[test]
fn conformal_table_covers_every_method_and_level() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let cfg = banana_config(tmp.path(), &run);
    assert!(nvqr(&["train", "--config", cfg.to_str().unwrap()]).status.success());
    let ccfg = write_config(
        tmp.path(),
        "conf.toml",
        &format!(
            "seeds = [3]\n[dataset]\nname = \"banana\"\nn = 1500\n[conformal]\nalphas = [0.05, 0.1, 0.2]\n\
             [conformal.evaluation]\nvolume_points = 500\nvolume_conditions = 1\nslab_directions = 20\n{SMALL_TRAIN}"
        ),
    );
    let model = run.join("model.json");
    let o = nvqr(&["conformal", "--config", ccfg.to_str().unwrap(), "--model", model.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let path = run.join("conformal").join("evaluation.csv");
    let text = std::fs::read_to_string(&path).unwrap();
    let rows: Vec<Row> = csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .collect::<Result<_, _>>()
        .unwrap();
    assert_eq!(rows.len(), 12);
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        w.serialize(r).unwrap();
    }
    assert_eq!(String::from_utf8(w.into_inner().unwrap()).unwrap(), text);
    assert_eq!(std::fs::read_dir(run.join("conformal").join("calibration")).unwrap().count(), 12);

    let o = nvqr(&["conformal", "--config", ccfg.to_str().unwrap(), "--model", "/no/model.json"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn funnel_dimension_sweep_and_resume() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("sweep");
    let cfg = write_config(
        tmp.path(),
        "sweep.toml",
        &format!(
            "out = \"{}\"\nseeds = [0, 1, 2]\n[dataset]\nname = \"funnel\"\nn = 300\n\
             [train]\nmethod = \"ac-nqr\"\nepochs = 1\nwidth = 4\ndepth = 1\nbatch_size = 128\n\
             [sweep]\ndimensions = [2, 4, 8, 16]\n[metrics]\nconditions = 1\nsamples = 100\nprojections = 16\n",
            out.display()
        ),
    );
    let o = nvqr(&["sweep", "--config", cfg.to_str().unwrap(), "--workers", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let cells: Vec<_> = std::fs::read_dir(out.join("cells")).unwrap().collect();
    assert_eq!(cells.len(), 12);
    let agg = std::fs::read_to_string(out.join("aggregate.csv")).unwrap();
    assert!(agg.starts_with("dataset,method,dimension,metric,median,q25,q75,runs,failed"));
    assert!(agg.lines().any(|l| l.starts_with("funnel,ac-nqr,16,sliced-w2,")));

    let marker = out.join("cells").join("funnel-ac-nqr-d2-s0").join("result.json");
    let before = std::fs::metadata(&marker).unwrap().modified().unwrap();
    let o = nvqr(&["sweep", "--config", cfg.to_str().unwrap(), "--resume"]);
    assert!(o.status.success());
    assert_eq!(std::fs::metadata(&marker).unwrap().modified().unwrap(), before);

    // no axes: one cell, same schema
    let single = tmp.path().join("single");
    let cfg = write_config(
        tmp.path(),
        "single.toml",
        &format!(
            "out = \"{}\"\n[dataset]\nname = \"banana\"\nn = 300\n[train]\nepochs = 1\nwidth = 4\ndepth = 1\n\
             [metrics]\nconditions = 1\nsamples = 100\nprojections = 16\n",
            single.display()
        ),
    );
    assert!(nvqr(&["sweep", "--config", cfg.to_str().unwrap()]).status.success());
    let a = std::fs::read_to_string(single.join("aggregate.csv")).unwrap();
    assert_eq!(a.lines().next(), agg.lines().next());
    assert_eq!(std::fs::read_dir(single.join("cells")).unwrap().count(), 1);
}

#[test]
fn convex_variant_needs_and_uses_a_reference_potential() {
    let tmp = tempfile::tempdir().unwrap();
    let o = nvqr(&["gen-data", "--dataset", "convex-banana", "--out", tmp.path().join("x.csv").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--fit-reference"));

    let cfg = write_config(tmp.path(), "fit.toml", SMALL_TRAIN);
    let reference = tmp.path().join("ref.json");
    let data = tmp.path().join("cb.csv");
    let o = nvqr(&[
        "gen-data",
        "--config",
        cfg.to_str().unwrap(),
        "--dataset",
        "convex-banana",
        "--n",
        "500",
        "--fit-reference",
        reference.to_str().unwrap(),
        "--out",
        data.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&data).unwrap();
    assert_eq!(text.lines().next(), Some("x0,y0,y1"));
    assert_eq!(text.lines().count(), 501);
}
