use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "schema_version = 1
seed = 4
architecture = \"mlp3\"
mlp_hidden = 16
synth_train = 60
synth_test = 40
epochs = 2
diag_samples = 60
diag_bins = 16
";

fn shade(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_shade"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("exp.toml");
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn train_eval_diagnose_round() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let run = dir.path().join("run");
    let run_s = run.to_str().unwrap();

    let o = shade(&["train", "--config", &cfg, "--out", run_s]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("test_acc"));
    assert!(run.join("final.ckpt").is_file());

    let ckpt = run.join("final.ckpt");
    let ckpt_s = ckpt.to_str().unwrap();
    let e1 = shade(&["eval", "--config", &cfg, "--checkpoint", ckpt_s]);
    let e2 = shade(&["eval", "--config", &cfg, "--checkpoint", ckpt_s]);
    assert!(e1.status.success());
    let acc: f64 = stdout(&e1).trim().parse().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert_eq!(stdout(&e1), stdout(&e2));

    let d = shade(&[
        "diagnose",
        "--config",
        &cfg,
        "--checkpoint",
        ckpt_s,
        "--split",
        "train",
        "--bins",
        "8",
    ]);
    assert!(d.status.success(), "{}", String::from_utf8_lossy(&d.stderr));
    let text = stdout(&d);
    assert!(text.starts_with("layer,name,stage,"));
    assert_eq!(text.lines().count(), 1 + 5);

    // same output directory again is refused with a config error
    let again = shade(&["train", "--config", &cfg, "--out", run_s]);
    assert_eq!(again.status.code(), Some(2));
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let mut metrics = Vec::new();
    for (name, seed) in [("a", "4"), ("b", "9"), ("c", "4")] {
        let out = dir.path().join(name);
        let o = shade(&[
            "train",
            "--config",
            &cfg,
            "--seed",
            seed,
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success());
        metrics.push(std::fs::read(out.join("metrics.csv")).unwrap());
    }
    assert_eq!(metrics[0], metrics[2]);
    assert_ne!(metrics[0], metrics[1]);
}

#[test]
fn sweep_prints_best_arms() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("{TINY}synth_val = 20\ndiag_every = 0\n"));
    let out = dir.path().join("sweep");
    let o = shade(&[
        "sweep",
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
        "--counts",
        "20,40",
        "--seeds",
        "0",
        "--regularizers",
        "none,shade:0.001,weight_decay:0.0005",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.starts_with("n_train,family,arm,selected_by"));
    assert_eq!(text.lines().count(), 1 + 2 * 2);
    assert!(out.join("summary.csv").is_file());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();

    // unknown key
    let bad = write_config(dir.path(), &format!("{TINY}learning_rate = 0.1\n"));
    let o = shade(&[
        "train",
        "--config",
        &bad,
        "--out",
        dir.path().join("x").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));

    // referenced file missing
    let missing = write_config(
        dir.path(),
        "schema_version = 1\nseed = 1\ndataset = \"idx\"\ntrain_images = \"nope\"\ntrain_labels = \"nope\"\n\
         test_images = \"nope\"\ntest_labels = \"nope\"\n",
    );
    let o = shade(&[
        "train",
        "--config",
        &missing,
        "--out",
        dir.path().join("y").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));

    // malformed IDX file is a data error
    for f in ["img", "lab"] {
        std::fs::write(dir.path().join(f), b"\0\0\x08\x09garbage").unwrap();
    }
    let corrupt = write_config(
        dir.path(),
        "schema_version = 1\nseed = 1\ndataset = \"idx\"\ntrain_images = \"img\"\ntrain_labels = \"lab\"\n\
         test_images = \"img\"\ntest_labels = \"lab\"\n",
    );
    let o = shade(&[
        "train",
        "--config",
        &corrupt,
        "--out",
        dir.path().join("z").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));

    // checkpoint that is not a checkpoint
    let tiny = write_config(dir.path(), TINY);
    std::fs::write(dir.path().join("fake.ckpt"), b"hello").unwrap();
    let o = shade(&[
        "eval",
        "--config",
        &tiny,
        "--checkpoint",
        dir.path().join("fake.ckpt").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3));

    // usage errors
    assert_eq!(shade(&["train"]).status.code(), Some(2));
}
