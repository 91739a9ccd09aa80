use std::path::Path;
use std::process::{Command, Output};

fn labelsync(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_labelsync"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn tiny_config(dir: &Path) -> String {
    let path = dir.join("tiny.conf");
    std::fs::write(
        &path,
        "# small and quick\nsource_train = 24\nsource_dev = 4\nsource_test = 4\nepochs = 1\nlm_epochs = 1\n\
         adapt_epochs = 1\nbeam_size = 2\nenc_dim = 16\nenc_ffn = 16\ncontent_dim = 16\npred_dim = 16\npred_ffn = 16\n",
    )
    .unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(labelsync(&["no-such-command"], dir.path()).status.code(), Some(1));
    assert_eq!(labelsync(&["gradcheck", "--coords", "x"], dir.path()).status.code(), Some(1));
    let bad = dir.path().join("bad.conf");
    std::fs::write(&bad, "unknown_key = 1\n").unwrap();
    assert_eq!(labelsync(&["gen-data", "--config", bad.to_str().unwrap()], dir.path()).status.code(), Some(1));
    let missing = labelsync(&["decode", "--model", "nope.ckpt", "--data", "nope"], dir.path());
    assert_eq!(missing.status.code(), Some(1));
    assert_eq!(labelsync(&["--help"], dir.path()).status.code(), Some(0));
}

#[test]
fn stage_failure_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let garbage = dir.path().join("garbage.ckpt");
    std::fs::write(&garbage, "not a checkpoint").unwrap();
    let out = labelsync(&["adapt", "--model", garbage.to_str().unwrap(), "--text", garbage.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn self_checks_pass() {
    let dir = tempfile::tempdir().unwrap();
    let out = labelsync(&["gradcheck", "--coords", "60"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let out = labelsync(&["oracle-check", "--instances", "20"], dir.path());
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("PASS"));

    let dump = dir.path().join("post.txt");
    std::fs::write(&dump, "2 1\n-0.5 -0.9327521295671886\n-1.2 -0.35838241786043407\n").unwrap();
    let out = labelsync(&["oracle-check", "--posterior", dump.to_str().unwrap()], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn stages_chain_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let conf = tiny_config(dir.path());
    let d = dir.path();
    let run = |args: &[&str], out: &Path| {
        let mut all = args.to_vec();
        all.extend(["--config", conf.as_str()]);
        let o = labelsync(&all, out);
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        o
    };
    let data = d.join("data");
    run(&["gen-data"], &data);
    assert!(data.join("train.tsv").exists() && data.join("train.txt").exists());
    let lm = d.join("lm");
    run(&["pretrain-lm", "--text", data.join("train.txt").to_str().unwrap()], &lm);
    let model = d.join("model");
    run(&["train", "--data", data.to_str().unwrap(), "--lm", lm.join("lm.ckpt").to_str().unwrap()], &model);
    let ckpt = model.join("model.ckpt");
    let offline = d.join("offline");
    run(&["decode", "--model", ckpt.to_str().unwrap(), "--data", data.to_str().unwrap()], &offline);
    let streamed = d.join("streamed");
    run(&["decode", "--model", ckpt.to_str().unwrap(), "--data", data.to_str().unwrap(), "--stream", "3"], &streamed);
    let a = std::fs::read(offline.join("decode.jsonl")).unwrap();
    assert_eq!(a, std::fs::read(streamed.join("decode.jsonl")).unwrap());
    assert_eq!(String::from_utf8(a).unwrap().lines().count(), 4);

    let wer = run(
        &["eval-wer", "--ref", data.join("test.tsv").to_str().unwrap(), "--hyp", offline.join("hyp.tsv").to_str().unwrap()],
        d,
    );
    let metrics: serde_json::Value = serde_json::from_slice(&wer.stdout).unwrap();
    assert!(metrics["wer"].as_f64().is_some() && metrics["reference_tokens"].as_u64().unwrap() > 0);

    let adapted = d.join("adapted");
    run(&["adapt", "--model", ckpt.to_str().unwrap(), "--text", data.join("dev.txt").to_str().unwrap()], &adapted);
    assert!(adapted.join("adapted.ckpt").exists() && adapted.join("adapt_log.json").exists());
}

#[test]
fn smoke_experiment_writes_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = labelsync(&["run-experiment", "--smoke", "--seed", "4"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["seeds"]["base"], 4);
    assert_eq!(report["stages"].as_array().unwrap().len(), 6);
    assert!(report["training"][0]["l_qua"].is_number());
}
