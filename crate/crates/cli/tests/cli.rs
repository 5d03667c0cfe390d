use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use urveda::data::nifti::{write_nifti1, Datatype, Volume, WriteOptions};

const MINIATURE: &str = "\
[network]
depth = 2
base_channels = 4
vit_depth = 1
embed_dim = 16
heads = 2
attention_kernel = 3

[training]
epochs = 1
batch_size = 4
folds = 2
";

fn urveda(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_urveda")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn phantoms(dir: &Path, count: usize) -> PathBuf {
    let out = dir.join("phantoms");
    let r = urveda(&["generate-phantoms", "--count", &count.to_string(), "--size", "16,16", "--seed", "3", "--out", s(&out)]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    out
}

/// Phantoms, a miniature config and one trained fold.
fn trained(dir: &Path) -> (PathBuf, PathBuf) {
    let data = phantoms(dir, 8);
    let cfg = dir.join("mini.toml");
    std::fs::write(&cfg, MINIATURE).unwrap();
    let out = dir.join("run");
    let r = urveda(&["train", "--data", s(&data.join("dataset.json")), "--config", s(&cfg), "--out", s(&out), "--fold", "0"]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    (data, out.join("fold0/best.ckpt"))
}

#[test]
fn usage_errors_exit_1_and_help_exits_0() {
    assert_eq!(code(&urveda(&["frobnicate"])), 1);
    assert_eq!(code(&urveda(&["train", "--out", "x"])), 1);
    assert_eq!(code(&urveda(&["--help"])), 0);
    assert_eq!(code(&urveda(&["--version"])), 0);
}

#[test]
fn phantoms_evaluated_against_themselves_score_one() {
    let dir = tempfile::tempdir().unwrap();
    let data = phantoms(dir.path(), 6);
    let run = json(&data.join("run.json"));
    assert_eq!(run["command"], "generate-phantoms");
    assert_eq!(run["seed"], 3);
    assert_eq!(json(&data.join("dataset.json"))["samples"].as_array().unwrap().len(), 6);

    let report = dir.path().join("self.tsv");
    let r = urveda(&[
        "evaluate", "--pred", s(&data.join("samples")), "--truth", s(&data.join("dataset.json")), "--report", s(&report),
    ]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    let table = std::fs::read_to_string(&report).unwrap();
    let header: Vec<&str> = table.lines().next().unwrap().split('\t').collect();
    assert_eq!(
        header,
        ["id", "LV_DSC", "RV_DSC", "LMyo_DSC", "LV_HD", "RV_HD", "LMyo_HD", "mean_DSC", "mean_HD"]
    );
    assert_eq!(table.lines().count(), 1 + 6 + 1);
    let structured = json(&report.with_extension("json"));
    assert_eq!(structured["mean"]["mean_dsc"], 1.0);
    assert_eq!(structured["mean"]["mean_hd_px"], 0.0);
}

fn write_volume(path: &Path, dims: &[usize], data: Vec<f64>) {
    let vol = Volume {
        spacing: vec![1.25; dims.len()],
        dims: dims.to_vec(),
        data,
        datatype: Datatype::F32,
    };
    std::fs::write(path, write_nifti1(&vol, &WriteOptions::default()).unwrap()).unwrap();
}

#[test]
fn preprocess_pairs_slices_and_reports_problems() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("nii");
    std::fs::create_dir(&input).unwrap();
    let n = 6 * 5 * 2;
    write_volume(&input.join("p01_ED.nii"), &[6, 5, 2], (0..n).map(|i| i as f64).collect());
    write_volume(&input.join("p01_ED_gt.nii"), &[6, 5, 2], (0..n).map(|i| (i % 4) as f64).collect());
    write_volume(&input.join("lonely.nii"), &[6, 5, 1], vec![0.0; 30]);

    let out = dir.path().join("prep");
    let r = urveda(&["preprocess", "--input", s(&input), "--output", s(&out), "--size", "8,8"]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    let m = json(&out.join("dataset.json"));
    let ids: Vec<&str> = m["samples"].as_array().unwrap().iter().map(|e| e["id"].as_str().unwrap()).collect();
    assert_eq!(ids, ["p01_ED_s000", "p01_ED_s001"]);
    assert_eq!(m["samples"][0]["provenance"]["phase"], "ED");
    assert_eq!(m["skipped"].as_array().unwrap().len(), 1);
    assert!(stderr(&r).contains("lonely.nii"));
    assert!(out.join("run.json").exists());

    // label 7 in a 4-class mask
    write_volume(&input.join("p02_gt.nii"), &[6, 5, 1], vec![7.0; 30]);
    write_volume(&input.join("p02.nii"), &[6, 5, 1], vec![1.0; 30]);
    let r = urveda(&["preprocess", "--input", s(&input), "--output", s(&dir.path().join("bad")), "--size", "8,8"]);
    assert_eq!(code(&r), 2);
    assert!(stderr(&r).contains("p02_gt.nii"), "{}", stderr(&r));

    std::fs::remove_file(input.join("p02_gt.nii")).unwrap();
    std::fs::write(input.join("p03.nii.gz"), [0x1f, 0x8b, 8, 0]).unwrap();
    let r = urveda(&["preprocess", "--input", s(&input), "--output", s(&dir.path().join("gz")), "--size", "8,8"]);
    assert_eq!(code(&r), 2);
    assert!(stderr(&r).contains("decompress"), "{}", stderr(&r));
}

#[test]
fn preprocess_of_empty_directory_succeeds_with_warning() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("empty");
    std::fs::create_dir(&input).unwrap();
    let out = dir.path().join("prep");
    let r = urveda(&["preprocess", "--input", s(&input), "--output", s(&out)]);
    assert_eq!(code(&r), 0);
    assert!(stderr(&r).contains("warning"));
    assert!(json(&out.join("dataset.json"))["samples"].as_array().unwrap().is_empty());
}

#[test]
fn train_rejects_bad_configuration() {
    let dir = tempfile::tempdir().unwrap();
    let data = phantoms(dir.path(), 4);
    let manifest = data.join("dataset.json");
    let out = dir.path().join("run");

    let r = urveda(&["train", "--data", s(&dir.path().join("none.json")), "--out", s(&out)]);
    assert_eq!(code(&r), 1);
    assert!(stderr(&r).contains("none.json"));

    let cfg = dir.path().join("typo.toml");
    std::fs::write(&cfg, "[training]\nepocs = 3\n").unwrap();
    let r = urveda(&["train", "--data", s(&manifest), "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&r), 1);
    assert!(stderr(&r).contains("epocs"), "{}", stderr(&r));

    std::fs::write(&cfg, "[network]\nheight = 32\n").unwrap();
    let r = urveda(&["train", "--data", s(&manifest), "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&r), 1);
}

#[test]
fn divergent_training_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let data = phantoms(dir.path(), 4);
    let cfg = dir.path().join("mini.toml");
    std::fs::write(&cfg, MINIATURE).unwrap();
    let r = urveda(&[
        "train", "--data", s(&data.join("dataset.json")), "--config", s(&cfg), "--out", s(&dir.path().join("run")),
        "--fold", "0", "--lr", "1e300", "--epochs", "2",
    ]);
    assert_eq!(code(&r), 3, "{}", stderr(&r));
}

#[test]
fn seeded_training_is_reproducible_and_flags_are_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let data = phantoms(dir.path(), 8);
    let cfg = dir.path().join("mini.toml");
    std::fs::write(&cfg, MINIATURE).unwrap();
    let mut summaries = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let r = urveda(&[
            "train", "--data", s(&data.join("dataset.json")), "--config", s(&cfg), "--out", s(&out), "--seed", "9",
            "--epochs", "2",
        ]);
        assert_eq!(code(&r), 0, "{}", stderr(&r));
        for f in 0..2 {
            assert!(out.join(format!("fold{f}/best.ckpt")).exists());
            assert_eq!(std::fs::read_to_string(out.join(format!("fold{f}/log.jsonl"))).unwrap().lines().count(), 3);
        }
        let run = json(&out.join("run.json"));
        assert_eq!(run["config"]["training"]["epochs"], 2);
        assert_eq!(run["config"]["training"]["seed"], 9);
        assert_eq!(run["config"]["network"]["height"], 16);
        summaries.push(json(&out.join("summary.json")));
        let ckpt = std::fs::read(out.join("fold1/best.ckpt")).unwrap();
        summaries.push(serde_json::json!(ckpt.len()));
    }
    assert_eq!(summaries[0], summaries[2]);
    assert_eq!(summaries[1], summaries[3]);
    assert_eq!(
        std::fs::read(dir.path().join("a/fold0/best.ckpt")).unwrap(),
        std::fs::read(dir.path().join("b/fold0/best.ckpt")).unwrap()
    );
}

#[test]
fn predict_overlay_evaluate_and_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt) = trained(dir.path());
    let sample = data.join("samples/phantom-3_s000.smp");
    assert!(sample.exists());

    let a = dir.path().join("a.png");
    let b = dir.path().join("b.png");
    for out in [&a, &b] {
        let r = urveda(&["predict", "--checkpoint", s(&ckpt), "--image", s(&sample), "--out", s(out)]);
        assert_eq!(code(&r), 0, "{}", stderr(&r));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert!(dir.path().join("a.png.run.json").exists());

    std::fs::remove_file(&a).unwrap();
    let r = urveda(&["rerun", s(&dir.path().join("a.png.run.json"))]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    for extra in [&[][..], &["--edges"][..]] {
        let out = dir.path().join("overlay.png");
        let args = [&["overlay", "--checkpoint", s(&ckpt), "--image", s(&sample), "--out", s(&out)][..], extra].concat();
        let r = urveda(&args);
        assert_eq!(code(&r), 0, "{}", stderr(&r));
        assert!(std::fs::metadata(&out).unwrap().len() > 0);
    }

    // NIfTI input is resampled to the checkpoint's extents
    let nii = dir.path().join("scan.nii");
    write_volume(&nii, &[20, 24, 2], (0..960).map(|i| (i % 17) as f64).collect());
    let r = urveda(&["predict", "--checkpoint", s(&ckpt), "--image", s(&nii), "--slice", "1", "--out", s(&a)]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    let r = urveda(&["predict", "--checkpoint", s(&ckpt), "--image", s(&nii), "--slice", "2", "--out", s(&a)]);
    assert_eq!(code(&r), 2);

    // a sample at other extents than the checkpoint is named as a mismatch
    let big = dir.path().join("big");
    let r = urveda(&["generate-phantoms", "--count", "1", "--size", "32,32", "--out", s(&big)]);
    assert_eq!(code(&r), 0);
    let r = urveda(&["predict", "--checkpoint", s(&ckpt), "--image", s(&big.join("samples/phantom-0_s000.smp")), "--out", s(&a)]);
    assert_eq!(code(&r), 2);
    assert!(stderr(&r).contains("checkpoint expects 16×16"), "{}", stderr(&r));

    let report = dir.path().join("model.tsv");
    let r = urveda(&["evaluate", "--checkpoint", s(&ckpt), "--truth", s(&data.join("dataset.json")), "--report", s(&report)]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    assert_eq!(std::fs::read_to_string(&report).unwrap().lines().count(), 1 + 8 + 1);
}

#[test]
fn evaluate_continues_past_a_corrupt_sample() {
    let dir = tempfile::tempdir().unwrap();
    let data = phantoms(dir.path(), 4);
    std::fs::write(data.join("samples/phantom-4_s000.smp"), b"garbage").unwrap();
    let report = dir.path().join("r.tsv");
    let r = urveda(&[
        "evaluate", "--pred", s(&data.join("samples")), "--truth", s(&data.join("dataset.json")), "--report", s(&report),
    ]);
    assert_eq!(code(&r), 2);
    assert!(stderr(&r).contains("phantom-4_s000"), "{}", stderr(&r));
    assert_eq!(std::fs::read_to_string(&report).unwrap().lines().count(), 1 + 3 + 1);
    let structured = json(&report.with_extension("json"));
    assert_eq!(structured["failures"][0]["id"], "phantom-4_s000");
}
