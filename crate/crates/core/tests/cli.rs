use std::path::Path;
use std::process::{Command, Output};

use sfrnet::config::ExperimentConfig;
use sfrnet::network::{Network, NetworkConfig, PRESETS};

fn cnv2(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cnv2"))
        .args(args)
        .current_dir(dir)
        .env("CNV2_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn text(o: &Output) -> (String, String) {
    (String::from_utf8_lossy(&o.stdout).into(), String::from_utf8_lossy(&o.stderr).into())
}

fn presets_dir() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../presets")
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = cnv2(dir.path(), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).1.contains("Usage"));
    let o = cnv2(dir.path(), &["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).1.contains("Usage"));
    assert_eq!(cnv2(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn config_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.json"), "{\"train\": ").unwrap();
    std::fs::write(dir.path().join("bad.toml"), "[train\nepochs = ").unwrap();
    for args in [
        &["flops", "--config", "bad.json"][..],
        &["flops", "--config", "bad.toml"],
        &["flops", "--config", "missing.json"],
        &["flops", "--preset", "nope"],
        &["train", "--set", "train.epochs=\"many\""],
        &["flops", "--set", "network.groups=3"],
    ] {
        let o = cnv2(dir.path(), args);
        assert_eq!(o.status.code(), Some(3), "{args:?}: {:?}", text(&o));
    }
}

#[test]
fn flops_prints_reference_beside_measured() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = presets_dir().join("cnv2-a.json");
    let o = cnv2(dir.path(), &["flops", "--config", cfg.to_str().unwrap(), "--out", "o"]);
    let (out, err) = text(&o);
    assert_eq!(o.status.code(), Some(0), "{err}");
    let line = |key: &str| out.lines().find(|l| l.starts_with(key)).unwrap().split_whitespace().skip(1).collect::<Vec<_>>();
    assert_eq!(line("reference"), vec!["46.0M", "2.0M"]);
    assert_eq!(line("measured").len(), 2);
    let csv = std::fs::read_to_string(dir.path().join("o/flops.csv")).unwrap();
    assert!(csv.starts_with("variant,part,macs,params\n"));
    let o = cnv2(dir.path(), &["flops", "--preset", "cnv2-c", "--out", "o"]);
    assert!(text(&o).0.contains("309.0M"));
}

#[test]
fn unsparsified_checkpoint_fails_verification() {
    let dir = tempfile::tempdir().unwrap();
    Network::new(&NetworkConfig::toy(), 0).unwrap().save(dir.path().join("fresh.cnv2")).unwrap();
    let o = cnv2(dir.path(), &["verify-equivalence", "--checkpoint", "fresh.cnv2", "--out", "v"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o).1.contains("not fully sparsified"));
    let o = cnv2(dir.path(), &["compile", "--checkpoint", "fresh.cnv2", "--out", "v"]);
    assert_eq!(o.status.code(), Some(1));
    let o = cnv2(dir.path(), &["eval", "--checkpoint", "nowhere.cnv2", "--out", "v"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn train_compile_verify_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let toml = "preset = \"toy\"\n[train]\nepochs = 6\n[train.dataset]\nkind = \"synthetic_blobs\"\nsamples = 48\n";
    std::fs::write(dir.path().join("quick.toml"), toml).unwrap();
    let o = cnv2(dir.path(), &["train", "--config", "quick.toml", "--out", "run"]);
    assert_eq!(o.status.code(), Some(0), "{:?}", text(&o));
    let metrics = std::fs::read_to_string(dir.path().join("run/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next(), Some("epoch,loss,acc,live_sfr,live_lgc,lr"));
    assert_eq!(metrics.lines().count(), 7);

    let o = cnv2(dir.path(), &["verify-equivalence", "--checkpoint", "run/checkpoint.cnv2", "--out", "run"]);
    assert_eq!(o.status.code(), Some(0), "{:?}", text(&o));
    assert!(text(&o).0.contains("equivalent"));
    let o = cnv2(dir.path(), &["compile", "--checkpoint", "run/checkpoint.cnv2", "--fold-bn", "--out", "run"]);
    assert_eq!(o.status.code(), Some(0), "{:?}", text(&o));

    let eval = |ckpt: &str| {
        let o = cnv2(dir.path(), &["eval", "--config", "quick.toml", "--checkpoint", ckpt, "--out", "run"]);
        assert_eq!(o.status.code(), Some(0), "{:?}", text(&o));
        let (out, _) = text(&o);
        let acc: f64 = out.split_whitespace().last().unwrap().parse().unwrap();
        acc
    };
    assert!((eval("run/checkpoint.cnv2") - eval("run/plan.cnv2")).abs() < 1e-9);

    let o = cnv2(
        dir.path(),
        &["connectivity", "--checkpoint", "run/checkpoint.cnv2", "--granularity", "per_layer", "--aggregation", "sum", "--out", "run"],
    );
    assert_eq!(o.status.code(), Some(0), "{:?}", text(&o));
    let csv = std::fs::read_to_string(dir.path().join("run/connectivity.csv")).unwrap();
    assert!(csv.starts_with("# granularity=per_layer;aggregation=sum\nsource,"));
    assert!(std::fs::read(dir.path().join("run/connectivity.pgm")).unwrap().starts_with(b"P5\n6 6\n255\n"));

    // nothing outside the named output directories
    let mut entries: Vec<String> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    entries.sort();
    assert_eq!(entries, vec!["quick.toml", "run"]);
}

#[test]
fn sweep_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let o = cnv2(dir.path(), &["sweep", "--preset", "cifar-110", "--axis", "S", "--values", "1,2,4,8", "--out", "s"]);
    assert_eq!(o.status.code(), Some(0), "{:?}", text(&o));
    let csv = std::fs::read_to_string(dir.path().join("s/sweep.csv")).unwrap();
    let sfr: Vec<u64> = csv.lines().skip(1).map(|l| l.split(',').nth(4).unwrap().parse().unwrap()).collect();
    assert_eq!(sfr.len(), 4);
    assert!(sfr.windows(2).all(|w| w[0] > w[1]));
    let o = cnv2(dir.path(), &["sweep", "--preset", "toy", "--axis", "G", "--values", "3", "--out", "s"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn shipped_presets_match_builtins() {
    for name in PRESETS {
        let path = presets_dir().join(format!("{name}.json"));
        let cfg = ExperimentConfig::load(Some(&path), None, &[]).unwrap();
        assert_eq!(cfg, ExperimentConfig::preset(name).unwrap(), "{name}");
    }
}

#[test]
fn in_process_entry_point() {
    let mut out = Vec::new();
    let mut err = Vec::new();
    assert_eq!(sfrnet::cli::run(["cnv2"], &mut out, &mut err), 2);
    let dir = tempfile::tempdir().unwrap();
    let o = dir.path().join("f");
    let code = sfrnet::cli::run(["cnv2", "flops", "--preset", "toy", "--out", o.to_str().unwrap()], &mut out, &mut err);
    assert_eq!(code, 0);
    assert!(String::from_utf8(out).unwrap().contains("none published"));
}
