use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use attnet_core::data::{read_dataset, NUM_GRADES};
use attnet_core::metrics::{cohens_kappa, read_predictions, ConfusionMatrix};

const TINY: &str = r#"
[dataset]
seed = 5
counts = [15, 15, 15, 15, 15]
image_size = [64, 48]

[model]
backbone = "vgg16"
input = [64, 48]
width_multiplier = 0.125

[train]
batch_size = 8
lr = 0.001
max_epochs = 2

[grid]
max_epochs = 1

[export]
probes = 2
"#;

fn attnet(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_attnet"))
        .args(args)
        .current_dir(cwd)
        .env_remove("ATTNET_OUT_ROOT")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(&path, format!("{TINY}{extra}")).unwrap();
    path
}

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.insert(path.clone(), std::fs::read(&path).unwrap());
            }
        }
    }
    files
}

fn gendata(dir: &Path, cfg: &Path, out: &str) -> PathBuf {
    ok(&attnet(&["gendata", "--config", cfg.to_str().unwrap(), "--out", out], dir));
    dir.join(out)
}

#[test]
fn gendata_writes_manifest_counts_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let a = gendata(tmp.path(), &cfg, "a");
    let b = gendata(tmp.path(), &cfg, "b");
    let (manifest, samples) = read_dataset(&a).unwrap();
    let mut per_grade = vec![0; NUM_GRADES];
    for s in &samples {
        per_grade[s.label] += 1;
    }
    assert_eq!(per_grade, manifest.counts);
    assert!(a.join("config.toml").is_file());
    let (_, again) = read_dataset(&b).unwrap();
    assert_eq!(samples.len(), again.len());
    for (x, y) in samples.iter().zip(&again) {
        assert_eq!(x.image.data(), y.image.data());
        assert_eq!((x.label, x.split, x.roi), (y.label, y.split, y.roi));
    }
}

#[test]
fn gendata_default_profile_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let out = attnet(&["gendata", "--out", "d"], tmp.path());
    ok(&out);
    let (manifest, samples) = read_dataset(&tmp.path().join("d")).unwrap();
    assert_eq!(samples.len(), manifest.counts.iter().sum::<usize>());
    assert!(String::from_utf8_lossy(&out.stdout).contains("train"));
}

#[test]
fn train_then_eval_multi_loss_leaves_data_untouched() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let data_dir = gendata(tmp.path(), &cfg, "data");
    let before = snapshot(&data_dir);
    let data = data_dir.to_str().unwrap();
    ok(&attnet(&["train", "--config", cfg.to_str().unwrap(), "--data", data, "--out", "run"], tmp.path()));
    let run = tmp.path().join("run");
    for f in ["checkpoint.bin", "metrics.csv", "summary.toml", "config.toml"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let masks: Vec<_> = std::fs::read_dir(run.join("masks")).unwrap().collect();
    assert!(!masks.is_empty());

    // eval picks the config up from beside the checkpoint
    let ckpt = run.join("checkpoint.bin");
    ok(&attnet(&["eval", "--data", data, "--checkpoint", ckpt.to_str().unwrap(), "--out", "ev"], tmp.path()));
    let ev = tmp.path().join("ev");
    let report: toml::Value = toml::from_str(&std::fs::read_to_string(ev.join("report.toml")).unwrap()).unwrap();
    assert!(report["parameters"].as_integer().unwrap() > 0);
    let rows = read_predictions(&ev.join("predictions.csv")).unwrap();
    assert_eq!(rows.len() as i64, report["test_samples"].as_integer().unwrap());
    let cm = ConfusionMatrix::from_labels(
        &rows.iter().map(|r| r.truth).collect::<Vec<_>>(),
        &rows.iter().map(|r| r.predicted).collect::<Vec<_>>(),
        NUM_GRADES,
    )
    .unwrap();
    let kappa = cohens_kappa(&cm).unwrap().value;
    assert!((kappa - report["kappa"].as_float().unwrap()).abs() < 1e-12);
    assert!(before == snapshot(&data_dir), "dataset directory was modified");
}

#[test]
fn train_early_fusion() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let text = std::fs::read_to_string(&cfg).unwrap().replace(
        "width_multiplier = 0.125",
        "width_multiplier = 0.125\nfusion = \"early-fusion\"",
    );
    std::fs::write(&cfg, text).unwrap();
    let data = gendata(tmp.path(), &cfg, "data");
    let out = attnet(
        &["train", "--config", cfg.to_str().unwrap(), "--data", data.to_str().unwrap(), "--out", "run"],
        tmp.path(),
    );
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stdout).contains("fusion"));
}

#[test]
fn zero_head_eval_matches_prior() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let text = std::fs::read_to_string(&cfg).unwrap().replace(
        "width_multiplier = 0.125",
        "width_multiplier = 0.125\nhead_init = \"zero\"",
    );
    std::fs::write(&cfg, text.replace("max_epochs = 2", "max_epochs = 1").replace("lr = 0.001", "lr = 1e-12")).unwrap();
    let data = gendata(tmp.path(), &cfg, "data");
    let c = cfg.to_str().unwrap();
    let d = data.to_str().unwrap();
    // a vanishing learning rate keeps the zero head in place
    ok(&attnet(&["train", "--config", c, "--data", d, "--out", "run"], tmp.path()));
    let ckpt = tmp.path().join("run/checkpoint.bin");
    ok(&attnet(&["eval", "--config", c, "--data", d, "--checkpoint", ckpt.to_str().unwrap(), "--out", "ev"], tmp.path()));
    let rows = read_predictions(&tmp.path().join("ev/predictions.csv")).unwrap();
    for r in &rows {
        for p in &r.probs {
            assert!((p - 0.2).abs() < 1e-6, "probabilities should stay uniform, got {p}");
        }
    }
}

#[test]
fn gridsearch_default_axes_give_36_deterministic_cells() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let data = gendata(tmp.path(), &cfg, "data");
    let c = cfg.to_str().unwrap();
    let d = data.to_str().unwrap();
    ok(&attnet(&["gridsearch", "--config", c, "--data", d, "--out", "g1"], tmp.path()));
    ok(&attnet(&["gridsearch", "--config", c, "--data", d, "--out", "g2"], tmp.path()));
    let g1 = std::fs::read_to_string(tmp.path().join("g1/grid.csv")).unwrap();
    let g2 = std::fs::read_to_string(tmp.path().join("g2/grid.csv")).unwrap();
    assert_eq!(g1, g2);
    assert_eq!(g1.lines().count(), 1 + 36);
    assert!(g1.lines().any(|l| l.starts_with("1,0.8,") || l.starts_with("1.0,0.8,")));
    let best: toml::Value = toml::from_str(&std::fs::read_to_string(tmp.path().join("g1/best.toml")).unwrap()).unwrap();
    let (w0, w1) = (best["w0"].as_float().unwrap(), best["w1"].as_float().unwrap());
    assert!(g1.lines().skip(1).any(|l| {
        let f: Vec<f64> = l.split(',').take(2).map(|x| x.parse().unwrap()).collect();
        f[0] == w0 && f[1] == w1
    }));
}

#[test]
fn usage_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "[train]\nlearning_rate = 0.1\n").unwrap();
    let out = attnet(&["gendata", "--config", bad.to_str().unwrap(), "--out", "x"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));

    let out = attnet(&["train", "--data", "nowhere", "--out", "x"], tmp.path());
    assert_eq!(out.status.code(), Some(2));

    let out = attnet(&["frobnicate"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn checkpoint_mismatch_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let data = gendata(tmp.path(), &cfg, "data");
    let c = cfg.to_str().unwrap();
    let d = data.to_str().unwrap();
    ok(&attnet(&["train", "--config", c, "--data", d, "--out", "run"], tmp.path()));
    let wider = tmp.path().join("wider.toml");
    std::fs::write(&wider, TINY.replace("width_multiplier = 0.125", "width_multiplier = 0.25")).unwrap();
    let ckpt = tmp.path().join("run/checkpoint.bin");
    let out = attnet(
        &["eval", "--config", wider.to_str().unwrap(), "--data", d, "--checkpoint", ckpt.to_str().unwrap(), "--out", "ev"],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint"));
}

#[test]
fn out_root_env_relocates_relative_output() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let root = tmp.path().join("root");
    let out = Command::new(env!("CARGO_BIN_EXE_attnet"))
        .args(["gendata", "--config", cfg.to_str().unwrap(), "--out", "rel"])
        .current_dir(tmp.path())
        .env("ATTNET_OUT_ROOT", &root)
        .output()
        .unwrap();
    ok(&out);
    assert!(root.join("rel/manifest.toml").is_file());
    assert!(!tmp.path().join("rel").exists());
}
