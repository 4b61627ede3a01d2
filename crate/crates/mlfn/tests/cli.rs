use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
[data]
train_ids = 4
test_ids = 3
imgs_per_view = 2

[train]
iterations = 6
batch_size = 8
eval_every = 3
target_train_acc = none
checkpoint_every = 3

[eval]
inspect_top = 2
";

fn mlfn(args: &[&str], threads: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mlfn")).args(args).env("MLFN_THREADS", threads).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let o = mlfn(args, "1");
    assert_eq!(o.status.code(), Some(0), "{:?}\n{}", args, String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn tiny_config(dir: &Path) -> String {
    let p = dir.join("tiny.ini");
    fs::write(&p, TINY).unwrap();
    p.to_str().unwrap().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(mlfn(&["train", "--bogus"], "1").status.code(), Some(1));
    assert_eq!(mlfn(&["train", "--mode", "vgg"], "1").status.code(), Some(1));
    assert_eq!(mlfn(&["frobnicate"], "1").status.code(), Some(1));
    assert_eq!(mlfn(&["eval", "--ranks", "0"], "1").status.code(), Some(1));
    assert_eq!(mlfn(&["gen-data"], "zero").status.code(), Some(1));
    assert_eq!(mlfn(&["--help"], "1").status.code(), Some(0));
}

#[test]
fn gen_data_writes_images_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("data");
    ok(&["gen-data", "--config", &cfg, "--seed", "5", "--out", s(&out)]);
    let manifest = fs::read_to_string(out.join("manifest.csv")).unwrap();
    let lines: Vec<&str> = manifest.lines().collect();
    assert_eq!(lines[0], "file,id,view,attr_color,attr_texture,attr_layout,attr_carry");
    assert_eq!(lines.len(), 1 + 7 * 2 * 2);
    for l in &lines[1..] {
        let file = l.split(',').next().unwrap();
        assert!(out.join(file).exists(), "{}", file);
    }
    assert!(out.join("6_1_1.ppm").exists());
    let resolved = fs::read_to_string(out.join("config_resolved")).unwrap();
    assert!(resolved.contains("seed = 5"));
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["train", "--config", &cfg, "--out", s(&a)]);
    ok(&["train", "--config", &cfg, "--out", s(&b), "--iterations", "3"]);
    let out = ok(&["train", "--config", &cfg, "--out", s(&b), "--resume"]);
    assert!(out.contains("trained 6 iterations"));
    for f in ["checkpoint.mlfn", "loss_log.csv", "metrics.csv", "config_resolved"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{}", f);
    }
    let log = fs::read_to_string(a.join("loss_log.csv")).unwrap();
    assert!(log.starts_with("iteration,loss,lr,train_acc\n1,"));
}

#[test]
fn digest_in_config_matches_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let run = dir.path().join("run");
    ok(&["train", "--config", &cfg, "--out", s(&run)]);
    let text = fs::read_to_string(run.join("config_resolved")).unwrap();
    let digest = mlfn::config::recorded_digest(&text).unwrap();
    let bytes = fs::read(run.join("checkpoint.mlfn")).unwrap();
    assert_eq!(&bytes[..4], b"MLFN");
    assert_eq!(hex::encode(&bytes[8..40]), digest);
    // a checkpoint of another architecture is refused
    let o = mlfn(&["eval", "--out", s(&run), "--mode", "resnet"], "1");
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("digest"));
}

#[test]
fn eval_inspect_and_probe_on_a_trained_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let run = dir.path().join("run");
    ok(&["train", "--config", &cfg, "--out", s(&run)]);

    let e1 = dir.path().join("e1");
    let table = ok(&["eval", "--run", s(&run), "--out", s(&e1), "--features", "R,FS,YN", "--ranks", "1,3"]);
    assert!(table.contains("FS-pair"));
    let csv = fs::read_to_string(e1.join("eval.csv")).unwrap();
    assert!(csv.starts_with("features,R1,R3,mAP\nR,"));
    assert_eq!(csv.lines().count(), 1 + 5);
    let e4 = dir.path().join("e4");
    let o = mlfn(&["eval", "--run", s(&run), "--out", s(&e4), "--features", "R,FS,YN", "--ranks", "1,3"], "4");
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(fs::read(e1.join("eval.csv")).unwrap(), fs::read(e4.join("eval.csv")).unwrap());

    let ins = dir.path().join("ins");
    ok(&["inspect", "--run", s(&run), "--out", s(&ins)]);
    for (b, u) in [(1, 1), (2, 3), (4, 4)] {
        let d = ins.join("inspect").join(format!("{}_{}", b, u));
        for f in ["top.ppm", "bottom.ppm", "scores.csv"] {
            assert!(d.join(f).exists(), "{}/{}", d.display(), f);
        }
        assert_eq!(fs::read_to_string(d.join("scores.csv")).unwrap().lines().count(), 1 + 3 * 2 * 2);
    }
    let cor = fs::read_to_string(ins.join("inspect/correlations.csv")).unwrap();
    assert!(cor.starts_with("block,unit,color,texture,layout,carry\n"));
    assert_eq!(cor.lines().count(), 1 + 16);

    let pr = dir.path().join("pr");
    ok(&["probe-attrs", "--run", s(&run), "--out", s(&pr), "--features", "FS"]);
    let probe = fs::read_to_string(pr.join("probe.csv")).unwrap();
    assert!(probe.starts_with("attribute,accuracy,majority\n"));
    assert!(probe.lines().last().unwrap().starts_with("mean,"));
}

#[test]
fn inspect_refuses_modes_without_selection() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let run = dir.path().join("run");
    ok(&["train", "--config", &cfg, "--out", s(&run), "--mode", "resnext"]);
    assert_eq!(mlfn(&["inspect", "--run", s(&run), "--out", s(&run)], "1").status.code(), Some(1));
}

#[test]
fn ablate_emits_one_row_per_mode_and_a_fusion_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("ab");
    ok(&["ablate", "--config", &cfg, "--out", s(&out), "--seeds", "0,1", "--fusion-dims", "8,16"]);
    let csv = fs::read_to_string(out.join("ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "mode,R1,mAP");
    let modes: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(modes, ["mlfn", "nofusion", "resnext", "resnet"]);
    let sweep = fs::read_to_string(out.join("fusion_sweep.csv")).unwrap();
    assert_eq!(sweep.lines().collect::<Vec<_>>()[0], "fusion_dim,R1,mAP");
    assert!(sweep.lines().nth(2).unwrap().starts_with("16,"));
    assert_eq!(fs::read_to_string(out.join("ablation_runs.csv")).unwrap().lines().count(), 1 + 6 * 2);
}

#[test]
fn sampled_grad_check_passes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = ok(&["grad-check", "--config", &cfg, "--sample", "1"]);
    assert!(out.contains("kernel conv2d"));
    assert!(!out.contains("FAIL"));
}

#[test]
fn divergence_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("div.ini");
    fs::write(&p, TINY.replace("iterations = 6", "iterations = 200\noptimizer = sgd_nesterov\nlr = 1e12")).unwrap();
    let o = mlfn(&["train", "--config", s(&p), "--out", s(&dir.path().join("run"))], "1");
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}
