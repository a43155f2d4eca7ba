use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ssmi_core::checkpoint::{load_checkpoint, Archive};
use ssmi_core::eval::EvalReport;
use ssmi_core::experiment::ExperimentConfig;
use ssmi_core::training::Stage;

const TINY: &str = r#"{
  "model": { "layers": 1, "d_model": 8, "n_heads": 2, "state_size": 3,
             "vocab": 3, "d_visual": 4, "d_raw": 4, "max_len": 4 },
  "train": {
    "pretrain": { "stage": "pretrain", "steps": 3, "lr": 0.01, "batch_size": 4 },
    "finetune": { "stage": "finetune", "steps": 3, "lr": 0.01, "batch_size": 4 }
  },
  "data": { "size": 40, "d_raw": 4, "caption_len": 5, "vocab": 3, "seed": 1 },
  "eval": { "sigmas": [0, 1, 10], "seeds": [0, 1] }
}"#;

struct Env {
    dir: tempfile::TempDir,
}

impl Env {
    fn new() -> Self {
        let env = Self { dir: tempfile::tempdir().unwrap() };
        env.write("cfg.json", TINY);
        env
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn write(&self, name: &str, text: &str) -> PathBuf {
        let p = self.path(name);
        fs::write(&p, text).unwrap();
        p
    }

    fn ssmi(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_ssmi")).current_dir(self.dir.path()).args(args).output().unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.ssmi(args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    }

    fn pretrain(&self, out: &str) {
        self.ok(&["pretrain", "--config", "cfg.json", "--out", out, "--log", "pre.log"]);
    }
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn read(p: &Path) -> Vec<u8> {
    fs::read(p).unwrap()
}

#[test]
fn smoke_pretrain_writes_loadable_checkpoint() {
    let env = Env::new();
    env.ok(&["pretrain", "--config", "cfg.json", "--steps", "1", "--out", "a.ssmi", "--log", "a.log"]);
    let (meta, model) = load_checkpoint(&env.path("a.ssmi")).unwrap();
    assert_eq!(meta.stage, Stage::Pretrain);
    assert_eq!(meta.step, 1);
    assert_eq!(meta.overrides, vec!["train.pretrain.steps=1".to_string()]);
    assert_eq!(&meta.config, model.config());
    let log = fs::read_to_string(env.path("a.log")).unwrap();
    assert!(log.starts_with("# step\tpretrain_term\ttask_term\ttotal\twall_ms\n"));
    assert_eq!(log.lines().count(), 2);
}

#[test]
fn default_paths_come_from_config() {
    let env = Env::new();
    env.ok(&["pretrain", "--config", "cfg.json"]);
    assert!(env.path("model.ssmi").exists());
    assert!(env.path("train.log").exists());
}

#[test]
fn repeated_runs_are_byte_identical() {
    let env = Env::new();
    env.pretrain("a.ssmi");
    env.pretrain("b.ssmi");
    assert_eq!(read(&env.path("a.ssmi")), read(&env.path("b.ssmi")));
    for out in ["fa.ssmi", "fb.ssmi"] {
        env.ok(&["finetune", "--config", "cfg.json", "--init", "a.ssmi", "--out", out, "--log", "f.log"]);
    }
    assert_eq!(read(&env.path("fa.ssmi")), read(&env.path("fb.ssmi")));
}

#[test]
fn missing_field_is_a_config_error_naming_it() {
    let env = Env::new();
    env.write("bad.json", &TINY.replace(r#""size": 40, "#, ""));
    let out = env.ssmi(&["pretrain", "--config", "bad.json"]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("missing field `size`"), "{}", stderr(&out));
    assert!(stderr(&out).contains("line"), "{}", stderr(&out));
}

#[test]
fn malformed_json_is_a_config_error() {
    let env = Env::new();
    env.write("bad.json", "{ \"model\": ");
    assert_eq!(code(&env.ssmi(&["pretrain", "--config", "bad.json"])), 3);
    assert_eq!(code(&env.ssmi(&["pretrain", "--config", "missing.json"])), 1);
}

#[test]
fn bad_usage_exits_two() {
    let env = Env::new();
    assert_eq!(code(&env.ssmi(&["pretrain"])), 2);
    assert_eq!(code(&env.ssmi(&["eval", "--config", "cfg.json", "--mode", "bogus"])), 2);
    assert_eq!(code(&env.ssmi(&["--help"])), 0);
}

#[test]
fn finetune_rejects_incompatible_model() {
    let env = Env::new();
    env.pretrain("a.ssmi");
    env.write("wide.json", &TINY.replace(r#""d_model": 8"#, r#""d_model": 12"#));
    let out = env.ssmi(&["finetune", "--config", "wide.json", "--init", "a.ssmi", "--out", "f.ssmi"]);
    assert_eq!(code(&out), 4);
    assert!(stderr(&out).contains("d_model"), "{}", stderr(&out));
    assert!(!env.path("f.ssmi").exists());
}

#[test]
fn finetune_requires_pretrain_checkpoint() {
    let env = Env::new();
    env.pretrain("a.ssmi");
    env.ok(&["finetune", "--config", "cfg.json", "--init", "a.ssmi", "--out", "f.ssmi"]);
    let out = env.ssmi(&["finetune", "--config", "cfg.json", "--init", "f.ssmi", "--out", "g.ssmi"]);
    assert_eq!(code(&out), 7);
}

#[test]
fn lambda_override_is_recorded() {
    let env = Env::new();
    env.ok(&["pretrain", "--config", "cfg.json", "--seed", "4", "--out", "a.ssmi"]);
    env.ok(&["finetune", "--config", "cfg.json", "--init", "a.ssmi", "--lambda", "0.3", "--out", "f.ssmi"]);
    let (meta, _) = load_checkpoint(&env.path("f.ssmi")).unwrap();
    assert_eq!(meta.stage, Stage::Finetune);
    assert_eq!(meta.lambda, Some(0.3));
    assert_eq!(meta.overrides, vec!["train.pretrain.seed=4".to_string(), "train.finetune.lambda=0.3".to_string()]);
}

#[test]
fn frozen_tensor_bytes_survive_finetune() {
    let env = Env::new();
    env.pretrain("a.ssmi");
    env.ok(&["finetune", "--config", "cfg.json", "--init", "a.ssmi", "--steps", "20", "--out", "f.ssmi"]);
    let before = Archive::load(&env.path("a.ssmi")).unwrap();
    let after = Archive::load(&env.path("f.ssmi")).unwrap();
    let mut changed = 0;
    for ((name, t0), (name1, t1)) in before.tensors.iter().zip(&after.tensors) {
        assert_eq!(name, name1);
        let same = t0.data().iter().zip(t1.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        if name.contains(".ssm.") {
            changed += usize::from(!same);
        } else {
            assert!(same, "frozen tensor {name} changed");
        }
    }
    assert!(changed > 0, "no memory tensor was updated");
}

#[test]
fn standard_eval_report_schema_and_ratio() {
    let env = Env::new();
    env.pretrain("a.ssmi");
    env.ok(&["finetune", "--config", "cfg.json", "--init", "a.ssmi", "--out", "f.ssmi"]);
    let stdout = env.ok(&["eval", "--config", "cfg.json", "--checkpoint", "f.ssmi", "--report", "r.txt"]);
    assert!(stdout.contains("target 0.5%"), "{stdout}");
    let text = fs::read_to_string(env.path("r.txt")).unwrap();
    for key in ["token_accuracy=", "bleu4=", "trainable_ratio=", "trainable_ratio_target=0.005"] {
        assert!(text.contains(key), "{key} missing in\n{text}");
    }
    let report = EvalReport::parse(&text).unwrap();
    let (_, model) = load_checkpoint(&env.path("f.ssmi")).unwrap();
    assert_eq!(report.trainable_ratio.to_bits(), model.trainable_ratio().to_bits());
    assert_eq!(report.stage, "finetune");

    // determinism of reports
    env.ok(&["eval", "--config", "cfg.json", "--checkpoint", "f.ssmi", "--report", "r2.txt"]);
    assert_eq!(read(&env.path("r.txt")), read(&env.path("r2.txt")));

    let pretty = env.ok(&["report", "r.txt"]);
    assert!(pretty.starts_with("standard report (finetune checkpoint)"), "{pretty}");
}

#[test]
fn zero_shot_accepts_pretrain_and_rejects_finetune() {
    let env = Env::new();
    env.pretrain("a.ssmi");
    env.ok(&["eval", "--config", "cfg.json", "--checkpoint", "a.ssmi", "--mode", "zero-shot", "--report", "z.txt"]);
    let report = EvalReport::parse(&fs::read_to_string(env.path("z.txt")).unwrap()).unwrap();
    assert_eq!(report.stage, "pretrain_only");
    assert_eq!(report.trainable_ratio, 0.0);

    env.ok(&["finetune", "--config", "cfg.json", "--init", "a.ssmi", "--out", "f.ssmi"]);
    let out = env.ssmi(&["eval", "--config", "cfg.json", "--checkpoint", "f.ssmi", "--mode", "zero-shot"]);
    assert_eq!(code(&out), 7, "{}", stderr(&out));
}

#[test]
fn robustness_report_has_every_sigma() {
    let env = Env::new();
    env.pretrain("a.ssmi");
    env.ok(&["eval", "--config", "cfg.json", "--checkpoint", "a.ssmi", "--mode", "robustness", "--sigmas", "0,2", "--report", "r.txt"]);
    let report = EvalReport::parse(&fs::read_to_string(env.path("r.txt")).unwrap()).unwrap();
    let sigmas: Vec<f64> = report.rows.iter().map(|r| r.noise_sigma).collect();
    assert_eq!(sigmas, vec![0.0, 2.0]);
    assert_eq!(report.rows[0].delta_accuracy, 0.0);
    assert_eq!(report.extra("override.eval.sigmas"), Some("0,2"));
    assert!(report.extra("delta_monotone").is_some());

    let out = env.ssmi(&["eval", "--config", "cfg.json", "--checkpoint", "a.ssmi", "--mode", "robustness", "--sigmas", "1,2"]);
    assert_eq!(code(&out), 3);
}

#[test]
fn ablate_alias_matches_eval_mode() {
    let env = Env::new();
    env.ok(&["ablate", "--config", "cfg.json", "--seeds", "3", "--report", "a.txt"]);
    env.ok(&["eval", "--config", "cfg.json", "--mode", "ablate", "--seeds", "3", "--report", "b.txt"]);
    assert_eq!(read(&env.path("a.txt")), read(&env.path("b.txt")));
    let report = EvalReport::parse(&fs::read_to_string(env.path("a.txt")).unwrap()).unwrap();
    assert_eq!(report.rows.len(), 3);
    assert_eq!(report.seeds, vec![3]);
}

#[test]
fn corrupt_checkpoint_is_a_format_error_with_offset() {
    let env = Env::new();
    env.pretrain("a.ssmi");
    let mut bytes = read(&env.path("a.ssmi"));
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x10;
    fs::write(env.path("bad.ssmi"), &bytes).unwrap();
    let out = env.ssmi(&["eval", "--config", "cfg.json", "--checkpoint", "bad.ssmi"]);
    assert_eq!(code(&out), 6);
    assert!(stderr(&out).contains("crc32") && stderr(&out).contains("offset"), "{}", stderr(&out));

    fs::write(env.path("short.ssmi"), &bytes[..7]).unwrap();
    let out = env.ssmi(&["eval", "--config", "cfg.json", "--checkpoint", "short.ssmi"]);
    assert_eq!(code(&out), 6);

    env.write("r.txt", "kind=standard\n");
    assert_eq!(code(&env.ssmi(&["report", "r.txt"])), 6);
}

#[test]
fn divergence_exits_five() {
    let env = Env::new();
    env.write("hot.json", &TINY.replace(r#""lr": 0.01, "batch_size": 4 },
    "finetune""#, r#""lr": 1e300, "batch_size": 4, "grad_clip": 1e300 },
    "finetune""#));
    let out = env.ssmi(&["pretrain", "--config", "hot.json", "--out", "h.ssmi"]);
    assert_eq!(code(&out), 5, "{}", stderr(&out));
    assert!(!env.path("h.ssmi").exists());
}

#[test]
fn shipped_reference_config_matches_library() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/reference.json");
    let cfg = ExperimentConfig::load(&path).unwrap();
    let mut want = ExperimentConfig::reference();
    want.paths = cfg.paths.clone();
    assert_eq!(cfg, want);
}
