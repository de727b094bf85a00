use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use afan_cli::manifest::{self, digest_path};
use afan_core::checkpoint;
use afan_core::model::{AfanModel, ModelConfig};

fn afan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_afan")).args(args).env("AFAN_LOG_LEVEL", "error").output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(out: &Path, seed: &str) -> Output {
    afan(&["gen-data", "--out", s(out), "--n-train", "4", "--n-val", "3", "--height", "32", "--width", "32", "--seed", seed])
}

fn tiny_config(dir: &Path) -> PathBuf {
    let p = dir.join("cfg.json");
    fs::write(&p, r#"{"epochs": 1, "batch_size_per_domain": 2, "checkpoint_interval": 1}"#).unwrap();
    p
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(code(&gen(&a, "7")), 0);
    assert_eq!(code(&gen(&b, "7")), 0);
    let (da, db) = (digest_path(&a).unwrap(), digest_path(&b).unwrap());
    assert_eq!(da.files, db.files);
    // four splits of images plus manifests
    assert_eq!(da.files.len(), 2 * (4 + 3) + 4);
    assert!(a.join(manifest::DIR_MANIFEST).is_file());
    let c = dir.path().join("c");
    assert_eq!(code(&gen(&c, "8")), 0);
    assert_ne!(digest_path(&c).unwrap().files, da.files);
}

#[test]
fn usage_and_validation_errors_exit_2() {
    let o = afan(&["gen-data", "--n-train", "4"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let dir = tempfile::tempdir().unwrap();
    let o = afan(&["gen-data", "--out", s(dir.path()), "--severity", "1.5"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("severity"));
    let o = afan(&["no-such-command"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn config_problems_are_listed_together() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"lambda_max": 0.9, "alpha": -1, "epochs": "many", "colour": "red"}"#).unwrap();
    let o = afan(&["train", "--mode", "baseline", "--config", s(&cfg), "--source", "x", "--out", s(&dir.path().join("r"))]);
    assert_eq!(code(&o), 2);
    let e = stderr(&o);
    for needle in ["lambda_max", "alpha", "epochs", "colour"] {
        assert!(e.contains(needle), "{needle} missing from: {e}");
    }
}

#[test]
fn train_logs_one_line_per_step_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(code(&gen(&data, "1")), 0);
    let cfg = tiny_config(dir.path());
    let src = data.join("source/train");
    let tgt = data.join("target/train");
    let full = dir.path().join("full");
    let o = afan(&["train", "--config", s(&cfg), "--source", s(&src), "--target", s(&tgt), "--out", s(&full)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let lines = fs::read_to_string(full.join("metrics.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 2);

    let cut = dir.path().join("cut");
    let args = |extra: &[&str]| {
        let mut v = vec!["train", "--config", s(&cfg), "--source", s(&src), "--target", s(&tgt), "--out", s(&cut)];
        v.extend_from_slice(extra);
        v.iter().map(|x| x.to_string()).collect::<Vec<_>>()
    };
    let first: Vec<String> = args(&["--stop-after", "1"]);
    assert_eq!(code(&afan(&first.iter().map(String::as_str).collect::<Vec<_>>())), 0);
    assert_eq!(fs::read_to_string(cut.join("metrics.jsonl")).unwrap().lines().count(), 1);
    let rest = args(&[]);
    assert_eq!(code(&afan(&rest.iter().map(String::as_str).collect::<Vec<_>>())), 0);
    assert_eq!(fs::read(cut.join("metrics.jsonl")).unwrap(), fs::read(full.join("metrics.jsonl")).unwrap());
    assert_eq!(fs::read(cut.join("checkpoint.afan")).unwrap(), fs::read(full.join("checkpoint.afan")).unwrap());
}

#[test]
fn baseline_needs_source_and_keeps_discriminators() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(code(&gen(&data, "2")), 0);
    let cfg = tiny_config(dir.path());
    let run = dir.path().join("base");
    let o = afan(&["train", "--mode", "baseline", "--config", s(&cfg), "--out", s(&run)]);
    assert_eq!(code(&o), 2);
    let o = afan(&["train", "--mode", "baseline", "--config", s(&cfg), "--source", s(&data.join("source/train")), "--out", s(&run)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ck = checkpoint::load(&run.join("checkpoint.afan")).unwrap();
    let fresh = AfanModel::new(ck.model.clone()).unwrap().init_store(0);
    assert_eq!(ck.store.digest_matching("align."), fresh.digest_matching("align."));
    assert_ne!(ck.store.digest_matching("detector."), fresh.digest_matching("detector."));
}

fn write_perfect_predictions(dataset: &Path, out: &Path) {
    let ds = afan_core::synthdata::load_dataset(dataset).unwrap();
    let dets: Vec<Vec<serde_json::Value>> = ds
        .samples
        .iter()
        .map(|smp| {
            let a = smp.annotation.as_ref().unwrap();
            a.boxes
                .iter()
                .zip(&a.class_ids)
                .map(|(b, c)| serde_json::json!({"bbox": b.map(f64::from), "class_id": c, "score": 0.9}))
                .collect()
        })
        .collect();
    fs::write(out, serde_json::to_string(&dets).unwrap()).unwrap();
}

fn schema_errors(instance: &serde_json::Value) -> Vec<String> {
    let schema: serde_json::Value = serde_json::from_str(include_str!("../schemas/eval_report.schema.json")).unwrap();
    let v = jsonschema::validator_for(&schema).unwrap();
    v.iter_errors(instance).map(|e| e.to_string()).collect()
}

#[test]
fn eval_of_perfect_predictions_and_schema() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(code(&gen(&data, "3")), 0);
    let val = data.join("target/val");
    let preds = dir.path().join("preds.json");
    write_perfect_predictions(&val, &preds);
    let report = dir.path().join("report.json");
    let o = afan(&["eval", "--predictions", s(&preds), "--dataset", s(&val), "--out", s(&report)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("mAP"));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(v["map"].as_f64(), Some(1.0));
    assert_eq!(schema_errors(&v), Vec::<String>::new());
    assert!(dir.path().join("report.manifest.json").is_file());

    // a checkpoint run fills the proposal statistics and still validates
    let ck = dir.path().join("fresh.afan");
    let model = AfanModel::new(ModelConfig::default()).unwrap();
    let c = checkpoint::Checkpoint {
        config_hash: String::new(),
        step: 0,
        model: ModelConfig::default(),
        train_config: serde_json::Value::Null,
        store: model.init_store(0),
        momentum: Default::default(),
    };
    checkpoint::save(&ck, &c).unwrap();
    let report2 = dir.path().join("report2.json");
    let o = afan(&["eval", "--checkpoint", s(&ck), "--dataset", s(&val), "--out", s(&report2)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report2).unwrap()).unwrap();
    assert_eq!(schema_errors(&v), Vec::<String>::new());
    assert!(v["proposal_filter"].is_object());
    let mut broken = v.clone();
    broken["map"] = serde_json::json!("high");
    assert!(!schema_errors(&broken).is_empty());
}

#[test]
fn eval_rejects_incompatible_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(code(&gen(&data, "4")), 0);
    let mut cfg = ModelConfig::default();
    cfg.detector.num_classes = 2;
    let model = AfanModel::new(cfg.clone()).unwrap();
    let c = checkpoint::Checkpoint {
        config_hash: String::new(),
        step: 0,
        model: cfg,
        train_config: serde_json::Value::Null,
        store: model.init_store(0),
        momentum: Default::default(),
    };
    let ck = dir.path().join("two.afan");
    checkpoint::save(&ck, &c).unwrap();
    let o = afan(&["eval", "--checkpoint", s(&ck), "--dataset", s(&data.join("target/val")), "--out", s(&dir.path().join("r.json"))]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("version error"), "{}", stderr(&o));
    fs::write(&ck, b"garbage").unwrap();
    let o = afan(&["eval", "--checkpoint", s(&ck), "--dataset", s(&data.join("target/val")), "--out", s(&dir.path().join("r.json"))]);
    assert_eq!(code(&o), 1);
}

#[test]
fn verify_energy_reports() {
    let dir = tempfile::tempdir().unwrap();
    for (lm, predicted) in [("0.5", 0.25), ("0.1", 0.81)] {
        let out = dir.path().join(format!("e{lm}.json"));
        let o = afan(&["verify-energy", "--lambda-max", lm, "--source", "gaussian:0", "--target", "gaussian:3", "--out", s(&out)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
        assert!((v["ratio_predicted"].as_f64().unwrap() - predicted).abs() < 1e-12);
        let measured = v["ratio_measured"].as_f64().unwrap();
        assert!((measured / predicted - 1.0).abs() < 0.05, "measured {measured}");
    }
    // one image set on both sides: the means coincide
    let data = dir.path().join("data");
    assert_eq!(code(&gen(&data, "9")), 0);
    let v = data.join("source/val");
    let o = afan(&["verify-energy", "--source", s(&v), "--target", s(&v), "--n", "1000", "--out", s(&dir.path().join("d.json"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("degenerate"), "{}", stderr(&o));
}

#[test]
fn evidence_and_features_have_declared_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(code(&gen(&data, "5")), 0);
    let cfg = tiny_config(dir.path());
    let run = dir.path().join("run");
    let o = afan(&["train", "--config", s(&cfg), "--source", s(&data.join("source/train")), "--target", s(&data.join("target/train")), "--out", s(&run)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ck = run.join("checkpoint.afan");
    let maps = dir.path().join("maps");
    let o = afan(&["evidence", "--checkpoint", s(&ck), "--dataset", s(&data.join("target/val")), "--out", s(&maps), "--limit", "2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let pngs: Vec<_> = fs::read_dir(&maps).unwrap().filter_map(|e| e.ok()).filter(|e| e.path().extension().is_some_and(|x| x == "png")).collect();
    assert_eq!(pngs.len(), 2);
    for p in pngs {
        let img = image::open(p.path()).unwrap();
        assert_eq!((img.width(), img.height()), (32, 32));
    }
    let tsv = dir.path().join("f.tsv");
    let pca = dir.path().join("pca.tsv");
    let o = afan(&[
        "export-features",
        "--checkpoint",
        s(&ck),
        "--dataset",
        s(&data.join("source/val")),
        "--dataset",
        s(&data.join("target/val")),
        "--out",
        s(&tsv),
        "--pca",
        s(&pca),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(&tsv).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split('\t').collect();
    assert_eq!(&header[..4], &["image_id", "domain", "kind", "v0"]);
    let mut pyramid = 0;
    for l in lines {
        let cells: Vec<&str> = l.split('\t').collect();
        assert_eq!(cells.len(), header.len());
        let filled = cells[3..].iter().filter(|c| !c.is_empty()).count();
        match cells[2] {
            "pyramid" => {
                pyramid += 1;
                assert_eq!(filled, 64);
            }
            "region" => assert_eq!(filled, 1024),
            other => panic!("unexpected kind {other}"),
        }
    }
    assert_eq!(pyramid, 6);
    assert!(fs::read_to_string(&pca).unwrap().lines().skip(1).all(|l| l.split('\t').count() == 5));
}

#[test]
fn replay_reproduces_a_training_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(code(&gen(&data, "6")), 0);
    let cfg = tiny_config(dir.path());
    let run = dir.path().join("run");
    let o = afan(&["train", "--config", s(&cfg), "--source", s(&data.join("source/train")), "--target", s(&data.join("target/train")), "--out", s(&run), "--seed", "3"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    // the recorded config wins over later edits of the file
    fs::write(&cfg, "{}").unwrap();
    let again = dir.path().join("again");
    let o = afan(&["replay", s(&run.join(manifest::DIR_MANIFEST)), "--out", s(&again)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(digest_path(&run).unwrap().files, digest_path(&again).unwrap().files);
    let a = manifest::read(&run.join(manifest::DIR_MANIFEST)).unwrap();
    let b = manifest::read(&again.join(manifest::DIR_MANIFEST)).unwrap();
    assert_eq!(a.config_hash, b.config_hash);
    assert_eq!(a.seed, Some(3));
}
