use std::path::Path;
use std::process::{Command, Output};

fn wsss(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wsss"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn wsss")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, count: usize, width: usize, seed: u64) {
    let out = wsss(&[
        "synth",
        "--count",
        &count.to_string(),
        "--width",
        &width.to_string(),
        "--size",
        "32",
        "--seed",
        &seed.to_string(),
        "--out",
        p(dir),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn first_file(dir: &Path) -> std::path::PathBuf {
    let mut names: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    names.sort();
    names.remove(0)
}

#[test]
fn synth_writes_manifest_and_triples() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("d");
    synth(&d, 5, 5, 1);
    let manifest = std::fs::read_to_string(d.join("manifest.txt")).unwrap();
    assert!(manifest.starts_with("# classes 4"));
    let entries = manifest.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty()).count();
    assert_eq!(entries, 5);
    for sub in ["images", "scribbles", "full"] {
        assert_eq!(std::fs::read_dir(d.join(sub)).unwrap().count(), 5);
    }
}

#[test]
fn superpixels_then_pseudomask() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("d");
    synth(&d, 1, 5, 2);
    let sp = tmp.path().join("sp.png");
    let pm = tmp.path().join("pm.png");
    let image = first_file(&d.join("images"));
    let scribbles = first_file(&d.join("scribbles"));
    let out = wsss(&["superpixels", "--image", p(&image), "--count", "30", "--out", p(&sp)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = wsss(&[
        "pseudomask",
        "--scribbles",
        p(&scribbles),
        "--superpixels",
        p(&sp),
        "--classes",
        "4",
        "--out",
        p(&pm),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let mask = wsss_core::io::load_mask(&pm, 4).unwrap();
    assert_eq!(mask.height(), 32);
    assert_eq!(mask.width(), 32);
}

#[test]
fn train_eval_report_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("d");
    synth(&d, 6, 5, 3);
    let cfg = tmp.path().join("cfg.toml");
    std::fs::write(
        &cfg,
        "experiment_label = \"E-SCR5-SUP30-N-G2\"\nepochs = 2\nbatch_size = 3\nseed = 9\n\n[network]\nbase_channels = 4\nscales = 2\ncentroid_hidden = 8\n",
    )
    .unwrap();
    let run = tmp.path().join("run");
    let out = wsss(&["train", "--config", p(&cfg), "--data", p(&d), "--out", p(&run)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for name in ["final", "train_log.csv", "train_summary.json", "config.toml"] {
        assert!(run.join(name).exists(), "missing {name}");
    }
    let log = std::fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().next().unwrap(), "epoch,L,L_pce,L_cen,L_mse,miou_val");
    assert_eq!(log.lines().count(), 3);

    let out = wsss(&["eval", "--ckpt", p(&run.join("final")), "--data", p(&d)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let printed: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let written: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(printed, written);
    assert_eq!(written["label"], "E-SCR5-SUP30-N-G2");
    assert!(written["clu"]["miou"].is_number());

    let table = tmp.path().join("table.csv");
    let out = wsss(&["report", p(&run), "--out", p(&table)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(&table).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "label,wmiou,miou_seg,mrec,mprec,f1,miou_clu");
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row[0], "E-SCR5-SUP30-N-G2");
    assert_eq!(row[2], written["seg"]["miou"].to_string());
    assert_eq!(row[6], written["clu"]["miou"].to_string());
}

#[test]
fn loss_decreases_over_first_epochs() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("d");
    synth(&d, 20, 5, 4);
    let cfg = tmp.path().join("cfg.toml");
    std::fs::write(
        &cfg,
        "experiment_label = \"E-SCR5-SUP50-N-G3\"\nepochs = 5\nlearning_rate = 0.001\naugment = false\nseed = 1\n\n[network]\nbase_channels = 8\nscales = 2\ncentroid_hidden = 16\n",
    )
    .unwrap();
    let run = tmp.path().join("run");
    let out = wsss(&["train", "--config", p(&cfg), "--data", p(&d), "--out", p(&run)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let log = std::fs::read_to_string(run.join("train_log.csv")).unwrap();
    let losses: Vec<f64> = log.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(losses.len(), 5);
    for w in losses.windows(2) {
        assert!(w[1] < w[0], "loss not decreasing: {losses:?}");
    }
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("d");
    synth(&d, 2, 5, 5);

    let out = wsss(&["train", "--data", p(&d), "--out", p(&tmp.path().join("r")), "--label", "BOGUS"]);
    assert_eq!(out.status.code(), Some(2));
    let out = wsss(&["train", "--data", p(&d), "--out", p(&tmp.path().join("r")), "--label", "E-SCR20"]);
    assert_eq!(out.status.code(), Some(2), "width mismatch is an argument error");
    let out = wsss(&["synth", "--width", "7", "--out", p(&tmp.path().join("x"))]);
    assert_eq!(out.status.code(), Some(2));
    let out = wsss(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));

    let out = wsss(&["eval", "--ckpt", p(&tmp.path().join("missing")), "--data", p(&d)]);
    assert_eq!(out.status.code(), Some(3));
    let garbage = tmp.path().join("garbage.png");
    std::fs::write(&garbage, b"not a png").unwrap();
    let out = wsss(&["superpixels", "--image", p(&garbage), "--out", p(&tmp.path().join("s.png"))]);
    assert_eq!(out.status.code(), Some(3));
    let out = wsss(&["report", p(&tmp.path().join("nothing"))]);
    assert_eq!(out.status.code(), Some(3));

    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "experiment_label = \"E-SCR5\"\nlearning_rate = 1e300\nepochs = 3\n\n[network]\nbase_channels = 4\nscales = 2\ncentroid_hidden = 8\n").unwrap();
    let out = wsss(&["train", "--config", p(&cfg), "--data", p(&d), "--out", p(&tmp.path().join("nan"))]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}
