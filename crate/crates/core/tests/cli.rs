use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ptunifier::cli::load_config;
use ptunifier::error::Error;
use ptunifier::training::TrainConfig;

fn ptunifier(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ptunifier")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn empty_file_gives_desk_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    fs::write(&path, "{}").unwrap();
    assert_eq!(load_config(Some(&path), &[]).unwrap(), TrainConfig::default());
}

#[test]
fn overrides_beat_file_values() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    fs::write(&path, r#"{"total_steps": 7, "model": {"k": 2}}"#).unwrap();
    let c = load_config(Some(&path), &["total_steps=10".into(), "data.dir=some/where".into()]).unwrap();
    assert_eq!(c.total_steps, 10);
    assert_eq!(c.model.k, 2);
    assert_eq!(c.model.d_model, 64);
    assert_eq!(c.data.dir, "some/where");
    let c = load_config(None, &["precision=f64".into(), "eval.ks=[1,2]".into()]).unwrap();
    assert_eq!(c.eval.ks, vec![1, 2]);
}

#[test]
fn unknown_keys_are_named() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    fs::write(&path, r#"{"totel_steps": 5}"#).unwrap();
    match load_config(Some(&path), &[]) {
        Err(Error::UnknownKey(k)) => assert_eq!(k, "totel_steps"),
        other => panic!("{other:?}"),
    }
    match load_config(None, &["model.poolsize=3".into()]) {
        Err(Error::UnknownKey(k)) => assert_eq!(k, "model.poolsize"),
        other => panic!("{other:?}"),
    }
    assert!(load_config(None, &["batch_size=many".into()]).is_err());
    assert!(load_config(Some(Path::new("/nonexistent/c.json")), &[]).is_err());
}

#[test]
fn exit_codes() {
    assert_eq!(ptunifier(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(ptunifier(&["pretrain", "--set", "nope=1"]).status.code(), Some(2));
    assert_eq!(ptunifier(&["--help"]).status.code(), Some(0));
    let missing = ptunifier(&["eval-retrieval", "--checkpoint", "/nonexistent.ptck"]);
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn grad_check_passes() {
    let o = ptunifier(&["grad-check"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains(" 0 failed"));
}

#[test]
fn pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let data = root.join("data");
    let cfg = root.join("tiny.json");
    fs::write(
        &cfg,
        serde_json::json!({
            "total_steps": 4,
            "batch_size": 8,
            "log_every": 2,
            "data": {"dir": data, "train": 64, "val": 16, "test": 16},
            "model": {"d_model": 16, "heads": 2, "layers_vision": 1, "layers_language": 1,
                      "layers_fusion": 1, "itc_dim": 8, "pool_size": 8, "k": 2},
            "eval": {"retrieval_n": 16, "finetune_steps": 5, "finetune_batch": 8,
                     "vqa_train": 32, "vqa_test": 16}
        })
        .to_string(),
    )
    .unwrap();
    let c = cfg.to_str().unwrap();
    let run = |args: &[&str]| {
        let mut all = vec!["--config", c, "--seed", "3"];
        all.extend_from_slice(args);
        let o = ptunifier(&all);
        assert_eq!(o.status.code(), Some(0), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        o
    };

    run(&["gen-data"]);
    assert!(data.join("vocab.txt").exists());

    let pre = root.join("pre");
    run(&["pretrain", "--out", pre.to_str().unwrap()]);
    let metrics = fs::read_to_string(pre.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 2);
    let echoed: serde_json::Value = serde_json::from_str(&fs::read_to_string(pre.join("config.json")).unwrap()).unwrap();
    assert_eq!(echoed["seed"], 3);
    assert_eq!(echoed["command"], "pretrain");
    let ckpt = pre.join("checkpoint.ptck");
    let ckpt_bytes = fs::read(&ckpt).unwrap();
    let k = ckpt.to_str().unwrap();

    let ev = root.join("eval");
    let o = run(&["eval-retrieval", "--checkpoint", k, "--out", ev.to_str().unwrap()]);
    assert_eq!(stdout(&o).lines().count(), 3);
    let lines: Vec<serde_json::Value> = fs::read_to_string(ev.join("retrieval.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0]["N"], 16);
    assert_eq!(lines[0]["mode"], "zero_shot");

    let o = run(&["eval-retrieval", "--checkpoint", k, "--finetune-steps", "2", "--out", ev.to_str().unwrap()]);
    assert!(stdout(&o).contains("fine_tuned"));

    for task in ["image-only", "text-only", "multimodal"] {
        let out = root.join(format!("ft-{task}"));
        run(&["finetune", "--checkpoint", k, "--task", task, "--fraction", "0.5", "--out", out.to_str().unwrap()]);
        let report: serde_json::Value =
            serde_json::from_str(fs::read_to_string(out.join("finetune.jsonl")).unwrap().trim()).unwrap();
        let acc = report["accuracy"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&acc));
        assert_eq!(report["train_n"], if task == "multimodal" { 16 } else { 32 });
    }
    // Fine-tuning and evaluation leave the checkpoint alone.
    assert_eq!(fs::read(&ckpt).unwrap(), ckpt_bytes);

    let image = data.join("test/images/000080.ptimg");
    let o = run(&[
        "inspect-prompts",
        "--checkpoint",
        k,
        "--input",
        image.to_str().unwrap(),
        "--input",
        "a red circle in the upper left corner .",
    ]);
    let lines: Vec<serde_json::Value> = stdout(&o).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0]["side"], "language");
    assert_eq!(lines[1]["side"], "vision");
    assert_eq!(lines[1]["indices"].as_array().unwrap().len(), 2);
}
