use wsss_core::annotation::SceneSpec;
use wsss_core::dataset::{pseudo_mask, synth_dataset, write_dataset, Dataset, SynthSpec};
use wsss_core::metrics::wmiou;
use wsss_core::network::Network;
use wsss_core::trainer::{evaluate, evaluate_checkpoint, train_to_dir, NetworkSection, TrainConfig, CHECKPOINT_NAME};

fn small_config(label: &str) -> TrainConfig {
    TrainConfig {
        experiment_label: label.to_string(),
        epochs: 2,
        batch_size: 2,
        seed: 5,
        network: NetworkSection {
            scales: 2,
            base_channels: 4,
            f_int: 1,
            centroid_hidden: 8,
        },
        ..TrainConfig::default()
    }
}

#[test]
fn dataset_survives_a_disk_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth_dataset(&SynthSpec {
        scene: SceneSpec::new(32, 32, 3),
        count: 4,
        scribble_width: 5,
        seed: 11,
    })
    .unwrap();
    write_dataset(&data, tmp.path()).unwrap();
    let back = Dataset::load(tmp.path()).unwrap();
    assert_eq!(back.class_count, 3);
    assert_eq!(back.scribble_width, Some(5));
    assert_eq!(back.samples.len(), 4);
    for (a, b) in data.samples.iter().zip(&back.samples) {
        assert_eq!(a.scribbles, b.scribbles);
        assert_eq!(a.full, b.full);
        assert_eq!(a.seed, b.seed);
        assert!(a.image.planar().iter().zip(b.image.planar()).all(|(x, y)| (x - y).abs() <= 0.5 / 255.0));
    }
}

#[test]
fn pseudo_masks_beat_scribbles_and_keep_them() {
    let data = synth_dataset(&SynthSpec {
        scene: SceneSpec::new(48, 48, 4),
        count: 6,
        scribble_width: 5,
        seed: 3,
    })
    .unwrap();
    for s in &data.samples {
        let pm = pseudo_mask(s, 50).unwrap();
        assert!(wmiou(&pm, &s.full).unwrap() > wmiou(&s.scribbles, &s.full).unwrap());
        for (a, b) in s.scribbles.labels().iter().zip(pm.labels()) {
            assert!(a.is_none() || a == b);
        }
    }
}

#[test]
fn train_save_load_evaluate() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth_dataset(&SynthSpec {
        scene: SceneSpec::new(32, 32, 3),
        count: 4,
        scribble_width: 5,
        seed: 21,
    })
    .unwrap();
    let run = tmp.path().join("run");
    let model = train_to_dir(&data, &small_config("E-SCR5-SUP30-NRGB-G3"), None, &run, |_| {}).unwrap();
    assert_eq!(model.log.len(), 2);
    assert!(model.log.iter().all(|r| r.loss.is_finite() && r.cen.is_some() && r.mse.is_some()));

    let ckpt = run.join(CHECKPOINT_NAME);
    let (loaded, meta) = Network::load(&ckpt).unwrap();
    assert_eq!(meta.get("label").map(String::as_str), Some("E-SCR5-SUP30-NRGB-G3"));
    let direct = evaluate(&model.network, &data, true).unwrap();
    let reloaded = evaluate(&loaded, &data, true).unwrap();
    assert_eq!(direct.seg, reloaded.seg);
    assert_eq!(direct.clu, reloaded.clu);

    let eval = evaluate_checkpoint(&ckpt, &data).unwrap();
    assert_eq!(eval.seg.miou, direct.seg.miou);
    assert_eq!(eval.seg.wmiou, Some(model.summary.wmiou));
    assert!(eval.clu.is_some());
}

#[test]
fn same_seed_same_model() {
    let data = synth_dataset(&SynthSpec {
        scene: SceneSpec::new(32, 32, 2),
        count: 2,
        scribble_width: 5,
        seed: 8,
    })
    .unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config("E-SCR5-SUP30-N-G2");
    let a = train_to_dir(&data, &cfg, None, &tmp.path().join("a"), |_| {}).unwrap();
    let b = train_to_dir(&data, &cfg, None, &tmp.path().join("b"), |_| {}).unwrap();
    assert_eq!(a.log, b.log);
    let a_bytes = std::fs::read(tmp.path().join("a").join(CHECKPOINT_NAME)).unwrap();
    let b_bytes = std::fs::read(tmp.path().join("b").join(CHECKPOINT_NAME)).unwrap();
    assert_eq!(a_bytes, b_bytes);
}
