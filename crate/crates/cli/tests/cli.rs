use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use trlf_cli::config::{PipelineConfig, Preset};
use trlf_cli::meta::{file_sha256, meta_path};

const TINY: &str = r#"
rng_seed = 3
[phantom]
dims = 16
fibers_per_bundle = 40
[env]
seeds_per_voxel = 1
min_len_mm = 4.0
[td3]
actor_hidden = [16, 16]
critic_hidden = [16, 16]
episodes_per_batch = 50
buffer_capacity = 5000
minibatch = 32
[train_rl]
episodes = 100
[traj]
rollout_seeds_per_voxel = 3
n_per_tract = 20
n_mixed = 20
[trlf]
n_layers_pretrain = 1
n_layers_total = 2
k = 5
d = 8
steps_per_iter = 2
batch_size = 4
[mrm]
hidden = [8, 4]
epochs = 2
"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_trlf"));
    c.env_remove("TRLF_THREADS");
    c
}

fn run(dir: &Path, args: &[&str]) -> Output {
    let cfg = dir.join("tiny.toml");
    if !cfg.exists() {
        fs::write(&cfg, TINY).unwrap();
    }
    let out = bin().arg("--config").arg(&cfg).args(args).current_dir(dir).output().unwrap();
    out
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let o = run(dir, args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn phantom_writes_four_files_and_reruns_identically() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    ok(p, &["phantom", "--kind", "straight", "--dims", "32", "--seed", "7", "--out", "a"]);
    ok(p, &["phantom", "--kind", "straight", "--dims", "32", "--seed", "7", "--out", "b"]);
    for f in ["field.shf", "gt_mask.msk", "aug_mask.msk", "gt.trk"] {
        let (a, b) = (p.join("a").join(f), p.join("b").join(f));
        assert_eq!(file_sha256(&a).unwrap(), file_sha256(&b).unwrap(), "{f}");
        let meta = fs::read_to_string(meta_path(&a)).unwrap();
        assert!(meta.contains("config_sha256=") && meta.contains("rng_seed=3") && meta.contains("version="));
    }
    assert!(p.join("a/phantom.config.toml").exists());
}

#[test]
fn crossing_overlap_voxel_has_two_peaks() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    ok(p, &["phantom", "--kind", "crossing", "--seed", "1", "--out", "x"]);
    // bundle centerlines meet at the grid center
    let s = ok(p, &["inspect", "--field", "x/field.shf", "--voxel", "8,8,8", "--peaks-out", "x/peaks.trk"]);
    assert!(s.contains("n_peaks=2"), "{s}");
    assert!(p.join("x/peaks.trk").exists());
    let s = ok(p, &["inspect", "--field", "x/field.shf", "--voxel", "2,8,8"]);
    assert!(s.contains("n_peaks=1"), "{s}");
}

#[test]
fn usage_and_config_errors_exit_2() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    assert_eq!(code(&run(p, &["phantom", "--kind", "straight"])), 2);
    assert_eq!(code(&run(p, &["phantom", "--kind", "spiral", "--out", "s"])), 2);
    fs::write(p.join("bad.toml"), "[env]\nbogus = 1\n").unwrap();
    let o = bin().args(["--config", "bad.toml", "config"]).current_dir(p).output().unwrap();
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("bogus"));
}

#[test]
fn missing_upstream_artifact_exits_3() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    let o = run(p, &["pretrain", "--data", "nowhere", "--out", "m"]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("trlf rollout"));
    ok(p, &["phantom", "--kind", "straight", "--out", "s"]);
    let o = run(p, &["track", "--policy", "td3", "--model", "none.ckp", "--subject", "s", "--out", "t.trk"]);
    assert_eq!(code(&o), 3);
}

#[test]
fn flags_override_config_and_presets_differ() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    let s = ok(p, &["--rng-seed", "11", "config"]);
    assert!(s.starts_with("rng_seed = 11"));
    let full = PipelineConfig::preset(Preset::Full);
    assert_eq!(full.td3.actor_hidden, vec![1024, 1024]);
    let back = PipelineConfig::overlay(&full, &full.to_toml()).unwrap();
    assert_eq!(back, full);
}

#[test]
fn refinement_end_to_end_and_empty_refined_mask() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    ok(p, &["phantom", "--kind", "straight", "--out", "s"]);
    ok(p, &["mask-task", "--field", "s/field.shf", "--out", "task"]);
    let r = ok(p, &["mrm-train", "--field", "s/field.shf", "--aug", "task/task_aug.msk", "--gt", "task/task_gt.msk", "--out", "m/mrm.ckp"]);
    assert!(r.contains("val_accuracy="));
    let s = ok(p, &["mrm-refine", "--field", "s/field.shf", "--aug", "task/task_aug.msk", "--model", "m/mrm.ckp", "--out", "m/refined.msk"]);
    assert!(s.starts_with("refined_voxels="));
    fs::write(p.join("strict.toml"), format!("{TINY}threshold = 1.0\n")).unwrap();
    let o = bin()
        .args(["--config", "strict.toml", "mrm-refine", "--field", "s/field.shf", "--aug", "task/task_aug.msk", "--model", "m/mrm.ckp", "--out", "m/none.msk"])
        .current_dir(p)
        .output()
        .unwrap();
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("refined"), "{}", String::from_utf8_lossy(&o.stderr));
}

fn hashes(files: &[PathBuf]) -> Vec<String> {
    files.iter().map(|f| file_sha256(f).unwrap()).collect()
}

#[test]
fn tiny_pipeline_runs_and_reruns_identically() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    ok(p, &["phantom", "--kind", "straight", "--seed", "1", "--out", "s0"]);
    ok(p, &["phantom", "--kind", "arc", "--seed", "1", "--out", "s1"]);
    ok(p, &["train-rl", "--subject", "s0", "--subject", "s1", "--out", "rl"]);
    ok(p, &["rollout", "--subject", "s0", "--subject", "s1", "--agent", "rl/td3.ckp", "--out", "data"]);
    ok(p, &["pretrain", "--data", "data", "--out", "models"]);
    ok(p, &["finetune", "--data", "data", "--tract", "0", "--pretrained", "models/trlf_pretrained.ckp", "--out", "models"]);
    ok(p, &["track", "--policy", "td3", "--model", "rl/td3.ckp", "--subject", "s0", "--out", "t/td3.trk"]);
    ok(p, &["track", "--policy", "trlf", "--model", "models/trlf_tract_0.ckp", "--subject", "s0", "--out", "t/trlf.trk"]);
    for pol in ["td3", "trlf"] {
        let c = ok(p, &["clean", "--tracks", &format!("t/{pol}.trk"), "--reference", "s0/gt.trk", "--out", &format!("t/{pol}.clean.trk")]);
        assert!(c.starts_with("kept="));
        let e = ok(p, &["eval", "--tracks", &format!("t/{pol}.clean.trk"), "--gt-mask", "s0/gt_mask.msk", "--out", &format!("t/{pol}.scores")]);
        for k in ["dice=", "ovl=", "ovr="] {
            assert!(e.contains(k), "{e}");
        }
    }
    let rep = ok(p, &["report", "--dir", ".", "--out", "report"]);
    assert!(rep.contains("t/td3.scores") && rep.contains("t/trlf.scores"), "{rep}");
    for f in ["reward_trace.csv", "loss_curves.csv", "scores.csv", "tracking.csv"] {
        assert!(fs::read_to_string(p.join("report").join(f)).unwrap().lines().count() > 1, "{f}");
    }
    assert!(fs::read_to_string(p.join("data/mixed.manifest")).unwrap().starts_with("kind=mixed"));
    assert!(fs::read_to_string(p.join("models/trlf_pretrained.ckp.card")).unwrap().contains("stage=pretrain"));

    // wrong dataset kind for the stage
    fs::copy(p.join("data/tract_0.trj"), p.join("data/mixed.trj")).unwrap();
    fs::copy(p.join("data/tract_0.manifest"), p.join("data/mixed.manifest")).unwrap();
    assert_ne!(code(&run(p, &["pretrain", "--data", "data", "--out", "bad"])), 0);

    // reruns: identical hashes, independent of the worker count
    let a = [p.join("rl/td3.ckp"), p.join("t/trlf.trk"), p.join("t/td3.trk")];
    let before = hashes(&a);
    ok(p, &["train-rl", "--subject", "s0", "--subject", "s1", "--out", "rl"]);
    ok(p, &["--threads", "3", "track", "--policy", "trlf", "--model", "models/trlf_tract_0.ckp", "--subject", "s0", "--out", "t/trlf.trk"]);
    ok(p, &["--threads", "2", "track", "--policy", "td3", "--model", "rl/td3.ckp", "--subject", "s0", "--out", "t/td3.trk"]);
    assert_eq!(hashes(&a), before);
}
