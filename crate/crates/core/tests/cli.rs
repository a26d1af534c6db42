use std::process::Command;

fn mcc() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mcc"))
}

#[test]
fn mask_stats_prints_csv() {
    let out = mcc()
        .args(["mask-stats", "--ratio", "0.5", "--scale", "1", "--trials", "2000"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "ratio,scale,mean_drop,min_kept,forced_keep_rate");
    let fields: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(fields.len(), 5);
    let drop: f64 = fields[2].parse().unwrap();
    assert!((drop - 0.5).abs() < 0.05, "{drop}");
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "iters = 3\nnot_a_key = 1\n").unwrap();
    let out = mcc()
        .args(["train", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("run"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("not_a_key"));
}

#[test]
fn invalid_mask_ratio_fails_cleanly() {
    let out = mcc().args(["mask-stats", "--ratio", "1.5", "--scale", "1"]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn sample_writes_image_and_ground_truth() {
    let dir = tempfile::tempdir().unwrap();
    let png = dir.path().join("s.png");
    let out = mcc()
        .args(["sample", "--split", "train", "--index", "2", "--out"])
        .arg(&png)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(png.exists() && dir.path().join("s.gt.png").exists());
    let labels = String::from_utf8(out.stdout).unwrap();
    assert_eq!(labels.trim().split(',').count(), 3);
}

#[test]
fn train_then_eval_and_cam_from_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    std::fs::write(
        &cfg,
        "crop_size = 16\npatch_size = 4\ndepth = 2\ndim = 8\nmlp_hidden = 16\naux_layer = 1\n\
         num_classes = 2\ndecoder_hidden = 8\nproj_dim = 8\nnum_views = 2\nmask_scale = 2\n\
         mask_ratio = 0.5\nn_train = 8\nn_val = 4\nbatch_size = 4\niters = 3\nwarmup_iters = 1\n",
    )
    .unwrap();
    let run = dir.path().join("run");
    let out = mcc().args(["train", "--config"]).arg(&cfg).arg("--out").arg(&run).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["config.txt", "train_log.jsonl", "model.mcck", "metrics.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let log = std::fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);

    let ck = run.join("model.mcck");
    let out = mcc().args(["eval", "--checkpoint"]).arg(&ck).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().any(|l| l.starts_with("pseudo_miou,")));
    assert!(text.lines().any(|l| l.starts_with("seg_miou,")));

    let png = dir.path().join("img.png");
    assert!(mcc()
        .args(["sample", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&png)
        .status()
        .unwrap()
        .success());
    let cams = dir.path().join("cams");
    let out = mcc()
        .args(["cam", "--checkpoint"])
        .arg(&ck)
        .arg("--image")
        .arg(&png)
        .args(["--labels", "1,1", "--out"])
        .arg(&cams)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["cam_class1.png", "cam_class2.png", "label.png"] {
        assert!(cams.join(f).exists(), "{f}");
    }
}
