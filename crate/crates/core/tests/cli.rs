use std::path::Path;
use std::process::{Command, Output};

use evo_depth::config::RunConfig;
use evo_depth::export::{attention_file_name, decode_pgm};
use evo_depth::train::{StageConfig, METRICS_HEADER};

fn evo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_evo-depth"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// A configuration that trains in well under a second.
fn tiny_config(dir: &Path) -> String {
    let mut cfg = RunConfig::default();
    cfg.model.vlb.vision_layers = 1;
    cfg.model.vlb.language_layers_kept = 1;
    cfg.model.idem.num_layers = 2;
    cfg.model.idem.boundary = 1;
    cfg.model.expert.hidden_dim = 16;
    cfg.model.expert.num_layers = 1;
    cfg.model.expert.num_heads = 2;
    cfg.model.expert.denoise_steps = 2;
    cfg.optim.warmup_steps = 1;
    cfg.optim.batch_size = 2;
    cfg.stages = StageConfig::progressive([3, 3, 3]);
    cfg.data.train_size = 6;
    cfg.data.val_size = 3;
    cfg.data.eval_scenes = 4;
    let path = dir.join("tiny.txt");
    cfg.write(&path).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(code(&evo(&[])), 2);
    assert_eq!(code(&evo(&["fly"])), 2);
    assert_eq!(code(&evo(&["train", "--seed", "x"])), 2);
    assert_eq!(code(&evo(&["gen-data", "--split", "holdout"])), 2);
    assert_eq!(code(&evo(&["eval", "--policy", "expert", "--perturb", "wind"])), 2);
    assert_eq!(code(&evo(&["ablate", "--axis", "depth"])), 2);
    assert_eq!(code(&evo(&["--help"])), 0);
}

#[test]
fn bad_config_is_a_usage_error_and_missing_checkpoint_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.txt");
    std::fs::write(&bad, "[training]\npeak_lr=fast\n").unwrap();
    assert_eq!(code(&evo(&["train", "--config", bad.to_str().unwrap()])), 2);
    let unknown = dir.path().join("unknown.txt");
    std::fs::write(&unknown, "[model]\nwidth=3\n").unwrap();
    assert_eq!(code(&evo(&["train", "--config", unknown.to_str().unwrap()])), 2);
    let missing = dir.path().join("nope.ckpt");
    assert_eq!(code(&evo(&["eval", "--checkpoint", missing.to_str().unwrap()])), 1);
    assert_eq!(code(&evo(&["eval", "--policy", "model"])), 2);
}

#[test]
fn gen_data_is_byte_identical_for_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.evds");
    let b = dir.path().join("sub/b.evds");
    for p in [&a, &b] {
        let out = evo(&[
            "gen-data",
            "--split",
            "val",
            "--size",
            "5",
            "--seed",
            "9",
            "--out",
            p.to_str().unwrap(),
        ]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        assert!(stdout(&out).trim_end().ends_with(" 5"));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn expert_policy_is_perfect_under_every_perturbation() {
    let dir = tempfile::tempdir().unwrap();
    let out = evo(&[
        "eval",
        "--policy",
        "expert",
        "--scenes",
        "20",
        "--perturb",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0);
    let report = std::fs::read_to_string(dir.path().join("report.txt")).unwrap();
    assert_eq!(report, stdout(&out));
    for kind in ["background", "distractor", "horizontal", "height"] {
        assert!(report.contains(&format!("success_rate.{kind}=1.0000")), "{report}");
    }
}

#[test]
fn train_eval_export_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let run = |name: &str| {
        let out_dir = dir.path().join(name);
        let out = evo(&[
            "train",
            "--config",
            &cfg,
            "--seed",
            "3",
            "--out",
            out_dir.to_str().unwrap(),
        ]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        out_dir
    };
    let (a, b) = (run("a"), run("b"));
    for f in ["metrics.csv", "stage3.ckpt"] {
        assert!(
            std::fs::read(a.join(f)).unwrap() == std::fs::read(b.join(f)).unwrap(),
            "{f} differs"
        );
    }
    let settings = |d: &Path| {
        let text = std::fs::read_to_string(d.join("config.txt")).unwrap();
        text.lines()
            .filter(|l| !l.starts_with("out_dir="))
            .collect::<Vec<_>>()
            .join("\n")
    };
    assert_eq!(settings(&a), settings(&b));
    let metrics = std::fs::read_to_string(a.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with(METRICS_HEADER));
    assert_eq!(metrics.lines().count(), 1 + 9);
    let written = RunConfig::load(&a.join("config.txt")).unwrap();
    written.validate().unwrap();
    assert_eq!(written.seed, 3);

    // the config beside the checkpoint is picked up without --config
    let ckpt = a.join("stage3.ckpt");
    let eval_dir = dir.path().join("eval");
    let out = evo(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--perturb",
        "height,distractor",
        "--out",
        eval_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report = stdout(&out);
    assert!(report.contains("scenes=4") && report.contains("val_mse="));
    assert!(report.contains("success_rate.height=") && report.contains("success_rate.distractor="));
    assert!(!report.contains("success_rate.background="));

    let att = dir.path().join("att");
    let out = evo(&[
        "export-attention",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        att.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for (layer, head, view) in [(0, 0, 0), (1, 1, 1)] {
        let (w, h, px) = decode_pgm(&std::fs::read(att.join(attention_file_name(layer, head, view))).unwrap()).unwrap();
        assert_eq!((w, h, px.len()), (4, 4, 16));
    }
}

#[test]
fn resume_reproduces_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let full = dir.path().join("full");
    let out = evo(&["train", "--config", &cfg, "--out", full.to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    let part = dir.path().join("part");
    std::fs::create_dir_all(&part).unwrap();
    std::fs::copy(full.join("stage1.ckpt"), part.join("stage1.ckpt")).unwrap();
    let out = evo(&[
        "train",
        "--config",
        &cfg,
        "--out",
        part.to_str().unwrap(),
        "--resume-after",
        "1",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(std::fs::read(full.join("stage3.ckpt")).unwrap() == std::fs::read(part.join("stage3.ckpt")).unwrap());
}

#[test]
fn ablate_writes_one_row_per_variant() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out_dir = dir.path().join("abl");
    let out = evo(&[
        "ablate",
        "--config",
        &cfg,
        "--axis",
        "fusion",
        "--seeds",
        "2",
        "--scenes",
        "2",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(out_dir.join("ablation_fusion.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 4);
    for (row, name) in rows[1..].iter().zip(["sem", "concat", "crossattention"]) {
        assert!(row.starts_with(&format!("{name},")), "{row}");
        assert!(row.ends_with(",0;1"), "{row}");
    }
    assert!(out_dir.join("concat/seed1/stage3.ckpt").exists());
    RunConfig::load(&out_dir.join("config.txt"))
        .unwrap()
        .validate()
        .unwrap();
}
