use std::path::Path;
use std::process::{Command, Output};

use quadformer::config::RunConfig;
use quadformer::model::ModelConfig;
use quadformer::objectives::DiscriminatorConfig;
use tempfile::TempDir;

fn qf(args: &[&str]) -> Output {
    qf_env(args, &[])
}

fn qf_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_quadformer"));
    cmd.args(args).env_remove("QF_THREADS");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Small dataset plus a micro-model config file.
fn setup(tmp: &TempDir) -> (String, String) {
    let data = tmp.path().join("data");
    let o = qf(&[
        "generate",
        p(&data),
        "--set",
        "size=32",
        "--set",
        "source_train=4",
        "--set",
        "source_val=2",
        "--set",
        "target_train=3",
        "--set",
        "target_val=2",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let mut c = RunConfig {
        model: ModelConfig::micro(),
        discriminator: DiscriminatorConfig {
            channels: vec![4, 1],
            ..DiscriminatorConfig::default()
        },
        warmup_iterations: 4,
        iterations: 3,
        lr_warmup: 1,
        eval_every: 0,
        tau: 0.5,
        ..RunConfig::default()
    };
    c.augment.crop = 16;
    let cfg = tmp.path().join("run.txt");
    std::fs::write(&cfg, c.to_text()).unwrap();
    (p(&data).to_string(), p(&cfg).to_string())
}

#[test]
fn verify_passes() {
    let o = qf(&["verify"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let out = stdout(&o);
    for name in ["gradients", "shape chain", "cross degeneracy", "ssim oracle", "ema closed form", "label denoising", "pairing"] {
        assert!(out.contains(name), "{name} missing from\n{out}");
    }
    assert!(!out.contains("FAIL"));
}

#[test]
fn verify_fails_on_a_mutated_backward_rule() {
    let o = qf(&["verify", "--inject-fault"]);
    assert_eq!(code(&o), 2, "{}", stdout(&o));
    assert!(stdout(&o).contains("FAIL gradients"));
}

#[test]
fn usage_and_input_errors_exit_with_one() {
    assert_eq!(code(&qf(&["bogus"])), 1);
    assert_eq!(code(&qf(&["warmup", "--data"])), 1);
    assert_eq!(code(&qf(&["--help"])), 0);
    let tmp = TempDir::new().unwrap();
    let missing = tmp.path().join("nowhere");
    assert_eq!(code(&qf(&["eval", "--data", p(&missing), "--checkpoint", p(&missing), "--out", p(&missing)])), 1);
    assert_eq!(code(&qf(&["generate", p(&missing), "--set", "colour=red"])), 1);
    assert_eq!(code(&qf_env(&["verify"], &[("QF_THREADS", "zero")])), 1);
}

#[test]
fn full_workflow_through_the_binary() {
    let tmp = TempDir::new().unwrap();
    let (data, cfg) = setup(&tmp);
    let warm = tmp.path().join("warm");
    let o = qf(&["warmup", "--data", &data, "--out", p(&warm), "--config", &cfg]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("target-val IoU"));
    assert!(warm.join("pseudo/labels.txt").exists());

    let pairs = tmp.path().join("pairs.tsv");
    assert_eq!(code(&qf(&["pair", "--data", &data, "--out", p(&pairs)])), 0);
    let text = std::fs::read_to_string(&pairs).unwrap();
    assert!(text.lines().filter(|l| !l.starts_with('#')).count() >= 3);

    let adapted = tmp.path().join("adapt");
    let o = qf(&[
        "adapt",
        "--data",
        &data,
        "--warmup",
        p(&warm),
        "--out",
        p(&adapted),
        "--config",
        &cfg,
        "--pairs",
        p(&pairs),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read_to_string(adapted.join("pairs.tsv")).unwrap(), text);

    let (e1, e2) = (tmp.path().join("e1"), tmp.path().join("e2"));
    for e in [&e1, &e2] {
        let o = qf(&["eval", "--data", &data, "--checkpoint", p(&adapted), "--out", p(e)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let r1 = std::fs::read(e1.join("report.csv")).unwrap();
    assert_eq!(r1, std::fs::read(e2.join("report.csv")).unwrap());
    assert_eq!(
        std::fs::read(e1.join("masks/0003.pgm")).unwrap(),
        std::fs::read(e2.join("masks/0003.pgm")).unwrap()
    );
}

#[test]
fn flags_override_the_config_file() {
    let tmp = TempDir::new().unwrap();
    let (data, cfg) = setup(&tmp);
    let out = tmp.path().join("w");
    let o = qf(&["warmup", "--data", &data, "--out", p(&out), "--config", &cfg, "--set", "lr=0.0042"]);
    assert_eq!(code(&o), 0);
    let saved = RunConfig::load(out.join("config.txt")).unwrap();
    assert_eq!(saved.lr, 0.0042);
    assert_eq!(saved.model, ModelConfig::micro());
}

#[test]
fn resume_and_thread_cap_give_identical_checkpoints() {
    let tmp = TempDir::new().unwrap();
    let (data, cfg) = setup(&tmp);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let o = qf_env(&["warmup", "--data", &data, "--out", p(&a), "--config", &cfg], &[("QF_THREADS", "1")]);
    assert_eq!(code(&o), 0);
    let o = qf_env(
        &["warmup", "--data", &data, "--out", p(&b), "--config", &cfg, "--stop-after", "2"],
        &[("QF_THREADS", "2")],
    );
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("step 2/4"));
    let o = qf(&["warmup", "--data", &data, "--out", p(&b), "--config", &cfg, "--resume"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["model.bin", "state.bin", "log.csv", "config.txt", "pseudo/0000.conf"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}
