use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[grid]
voxel_size = 0.08

[capture]
width = 24
height = 24

[chunk]
shape = [8, 8, 8]

[vae]
widths = [3, 4]
latent_channels = 2

[flow]
hidden = 8
blocks = 1
heads = 2
attention_blocks = [0]
layout_dim = 4
control_rank = 2

[train.vae]
steps = 3
batch = 1
warmup = 1

[train.flow]
steps = 3
batch = 2
warmup = 1

[train.control]
steps = 2
batch = 2
warmup = 1

[sampler]
steps = 2

[data]
scenes = 2
frames_per_scene = 4
keep_fractions = [1.0, 0.5]
"#;

fn run(config: &Path, out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_seenflow"))
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(["--threads", "1"])
        .args(args)
        .env("SEENFLOW_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(o: Output) -> String {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

#[test]
fn misspelled_config_key_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[sampler]\nstepz = 3\n").unwrap();
    let o = run(&cfg, dir.path(), &["synth"]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("stepz"), "{err}");
}

#[test]
fn missing_checkpoint_names_the_command_to_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let o = run(&cfg, dir.path(), &["complete", "--scene", "0"]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("train-vae"), "{err}");
}

#[test]
fn single_thread_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        for args in [
            &["synth"][..],
            &["fuse"],
            &["train-vae"],
            &["train-flow"],
            &["train-control"],
            &["complete", "--scene", "0", "--seed", "4"],
        ] {
            ok(run(&cfg, &out, args));
        }
        let metrics = ok(run(&cfg, &out, &["eval", "--scene", "0", "--sample-seed", "4"]));
        assert!(metrics.contains("surface_iou_observed"), "{metrics}");
        let stem = out.join("complete/scene_000_k050_s4");
        outputs.push(
            ["stsd", "obj", "ply"].map(|e| std::fs::read(stem.with_extension(e)).unwrap()),
        );
        outputs.push([std::fs::read(out.join("ckpt/control.ckpt")).unwrap(), vec![], vec![]]);
    }
    assert!(outputs[0] == outputs[2], "completions differ between runs");
    assert!(outputs[1] == outputs[3], "control checkpoints differ between runs");
}
