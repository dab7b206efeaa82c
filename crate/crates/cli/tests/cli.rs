use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "model.embed_dim=8",
    "model.heads=2",
    "model.layers=1",
    "model.mlp_ratio=2",
    "task.train=40",
    "task.val=10",
    "task.test=6",
    "warm_start.steps=3",
    "warm_start.batch=4",
    "train.total_steps=4",
    "train.validation_every=2",
    "train.checkpoint_every=2",
    "train.prompts_per_step=2",
    "train.samples_per_prompt=2",
    "eval.samples=2",
    "eval.test_size=3",
];

fn softcot(args: &[&str], root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_softcot"))
        .args(args)
        .env("SOFTCOT_OUTPUT_ROOT", root)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn with_tiny<'a>(mut args: Vec<&'a str>, extra: &[&'a str]) -> Vec<&'a str> {
    for s in TINY.iter().chain(extra) {
        args.push("--set");
        args.push(s);
    }
    args
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn gen_data_writes_splits() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = tmp.path().join("spec.toml");
    std::fs::write(
        &spec,
        "train = 30\nval = 5\ntest = 5\nseed = 2\n[kind]\nkind = \"modular_chain\"\nlength = 4\n",
    )
    .unwrap();
    let out = tmp.path().join("data");
    let o = softcot(
        &["gen-data", "--spec", spec.to_str().unwrap(), "--out", out.to_str().unwrap()],
        tmp.path(),
    );
    assert!(o.status.success(), "{o:?}");
    for f in ["train.jsonl", "val.jsonl", "test.jsonl", "manifest.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    assert_eq!(std::fs::read_to_string(out.join("train.jsonl")).unwrap().lines().count(), 30);

    std::fs::write(&spec, "bogus = 1\n").unwrap();
    let o = softcot(
        &["gen-data", "--spec", spec.to_str().unwrap(), "--out", out.to_str().unwrap()],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn bad_config_is_a_user_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = softcot(&["train", "--set", "train.no_such_key=1"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    let o = softcot(&["train", "--set", "train.samples_per_prompt=1"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    let o = softcot(&["sweep", "--axis", "depth"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    let o = softcot(&["no-such-command"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    let o = softcot(&["eval", "--checkpoint", "missing.ckpt"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    let o = softcot(&["--help"], tmp.path());
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn failed_grad_check_exits_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let args = with_tiny(
        vec!["grad-check", "--modes", "soft", "--tolerance", "0"],
        &["rollout.max_cot=2", "rollout.max_answer=1"],
    );
    let o = softcot(&args, tmp.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("check failed"));
}

#[test]
fn grad_check_passes_on_small_model() {
    let tmp = tempfile::tempdir().unwrap();
    let args = with_tiny(
        vec!["grad-check", "--modes", "hard,soft,fuzzy"],
        &["rollout.max_cot=3", "rollout.max_answer=2"],
    );
    let o = softcot(&args, tmp.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("fuzzy") && text.contains("ok: max relative error"), "{text}");
}

#[test]
fn train_resume_and_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let args = with_tiny(vec!["train"], &["output_dir=\"run\"", "rollout.mode=\"fuzzy\""]);
    let o = softcot(&args, tmp.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let run = tmp.path().join("run");
    for f in ["config.toml", "run.json", "base.ckpt", "best.ckpt", "train_log.jsonl", "validation.jsonl"] {
        assert!(run.join(f).exists(), "{f}");
    }
    assert!(run.join("checkpoints/step_000004.ckpt").exists());
    let log = std::fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 4);

    // the stored config reproduces the run settings
    let stored = std::fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(stored.contains("mode = \"fuzzy\""), "{stored}");

    // extend the run by resuming with a larger budget
    let args = with_tiny(
        vec!["train", "--resume"],
        &["output_dir=\"run\"", "rollout.mode=\"fuzzy\"", "train.total_steps=6"],
    );
    let o = softcot(&args, tmp.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let log = std::fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 6);

    let ckpt = run.join("best.ckpt");
    let data = run.join("data");
    let eval_out = tmp.path().join("eval");
    let args = with_tiny(
        vec![
            "eval",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--out",
            eval_out.to_str().unwrap(),
        ],
        &[],
    );
    let o = softcot(&args, tmp.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let metrics = std::fs::read_to_string(eval_out.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("setting,k,value\n"));
    assert!(metrics.contains("hard_greedy,32,"), "{metrics}");
    assert!(metrics.contains("fuzzy_sample,2,") && !metrics.contains("fuzzy_sample,32,"));
    assert!(eval_out.join("entropy_soft_sample.csv").exists());
}

#[test]
fn sweep_writes_one_row_per_value() {
    let tmp = tempfile::tempdir().unwrap();
    let args = with_tiny(
        vec!["sweep", "--axis", "noise_scale", "--values", "0.1,3.0"],
        &["output_dir=\"sweep\"", "rollout.mode=\"soft\""],
    );
    let o = softcot(&args, tmp.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(tmp.path().join("sweep/sweep.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 3, "{csv}");
    assert!(rows[1].starts_with("train.noise_scale,0.1,"));
    assert!(rows[2].starts_with("train.noise_scale,3.0,"));
}
