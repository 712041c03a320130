use std::path::Path;
use std::process::{Command, Output};

use panocorr::netpbm::Raster;
use panocorr::pipeline::{Model, ModelConfig};

fn panocorr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_panocorr")).args(args).output().expect("spawn panocorr")
}

fn ok(args: &[&str]) -> Output {
    let out = panocorr(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn code(args: &[&str]) -> i32 {
    panocorr(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read(p: impl AsRef<Path>) -> String {
    std::fs::read_to_string(p).unwrap()
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_single_scene_and_force() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("d");
    ok(&["gen", "--count", "1", "--seed", "7", "--out", s(&d)]);
    let entries: Vec<_> = std::fs::read_dir(d.join("scenes")).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(entries, vec!["7"]);
    for f in ["image.ppm", "semantic.pgm", "scene.meta"] {
        assert!(d.join("scenes/7").join(f).is_file(), "{f}");
    }
    let before = files(&d);
    assert_eq!(code(&["gen", "--count", "1", "--seed", "7", "--out", s(&d)]), 2);
    ok(&["gen", "--count", "1", "--seed", "7", "--out", s(&d), "--force"]);
    assert_eq!(files(&d), before);
}

#[test]
fn gen_zero_scenes_writes_manifest_only() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("d");
    ok(&["gen", "--count", "0", "--out", s(&d)]);
    assert!(d.join("dataset.meta").is_file());
    assert!(!d.join("scenes").exists());
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.cfg");
    std::fs::write(&cfg, "colour=blue\n").unwrap();
    assert_eq!(code(&["gen", "--config", s(&cfg), "--out", s(&tmp.path().join("d"))]), 2);
    assert_eq!(code(&["gen", "--set", "speed=3", "--out", s(&tmp.path().join("d"))]), 2);
    assert_eq!(code(&["gen", "--bogus-flag"]), 2);
}

#[test]
fn missing_dataset_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&["train", "--data", s(&tmp.path().join("nope")), "--out", s(&tmp.path().join("o"))]), 3);
}

#[test]
fn train_smoke_and_loss_decreases() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("d");
    ok(&["gen", "--count", "4", "--out", s(&d)]);
    let one = tmp.path().join("one");
    ok(&["train", "--data", s(&d), "--out", s(&one), "--epochs", "1"]);
    let csv = read(one.join("loss.csv"));
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "epoch,loss,mask,cate,sem");
    assert_eq!(lines.len(), 2);
    let loss: f64 = lines[1].split(',').nth(1).unwrap().parse().unwrap();
    assert!(loss.is_finite());
    assert!(read(one.join("resolved.cfg")).lines().any(|l| l == "lambda=0.5"));
    assert!(read(one.join("timing.txt")).starts_with("train_seconds="));

    let ten = tmp.path().join("ten");
    ok(&["train", "--data", s(&d), "--out", s(&ten), "--epochs", "10"]);
    let losses: Vec<f64> =
        read(ten.join("loss.csv")).lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(losses.len(), 10);
    assert!(losses[9] < losses[0], "{losses:?}");
}

#[test]
fn eval_oracle_schema_and_mismatch() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("d");
    ok(&["gen", "--count", "3", "--seed", "11", "--out", s(&d)]);
    let o = tmp.path().join("oracle");
    ok(&["eval", "--data", s(&d), "--out", s(&o), "--oracle"]);
    assert_eq!(
        read(o.join("report.csv")),
        "variant,pq,sq,rq,pq_th,pq_st,train_seconds\noracle,1.0000,1.0000,1.0000,1.0000,1.0000,0.0000\n"
    );

    // An untrained model keeps no instance: the category prior sits below
    // the score threshold.
    let t = tmp.path().join("t");
    ok(&["train", "--data", s(&d), "--out", s(&t), "--epochs", "0"]);
    let ck = t.join("checkpoint.cfld");
    let e = tmp.path().join("e");
    ok(&["eval", "--data", s(&d), "--out", s(&e), "--checkpoint", s(&ck)]);
    let report = read(e.join("report.csv"));
    let row: Vec<&str> = report.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[0], "scm+icm");
    assert_eq!(row[4], "0.0000");

    let m = tmp.path().join("m");
    assert_eq!(code(&["eval", "--data", s(&d), "--out", s(&m), "--checkpoint", s(&ck), "--n-fourier", "2"]), 2);
    assert_eq!(code(&["eval", "--data", s(&d), "--out", s(&m), "--checkpoint", s(&ck), "--s-ref", "2"]), 2);
}

#[test]
fn viz_constant_field_is_mid_gray() {
    let tmp = tempfile::tempdir().unwrap();
    let mut model = Model::new(ModelConfig::default()).unwrap();
    // Zero heads with a0 = 1 make every correlation function constant.
    for name in ["scm.hor.weight", "scm.ver.weight", "scm.hor.bias", "scm.ver.bias"] {
        let id = model.store.id_of(name).unwrap();
        let t = model.store.get_mut(id);
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        if name.ends_with("bias") {
            t.data_mut()[0] = 1.0;
        }
    }
    let ck = tmp.path().join("flat.cfld");
    model.to_checkpoint().save(&ck).unwrap();
    let o = tmp.path().join("v");
    ok(&["viz", "--checkpoint", s(&ck), "--point", "3,5", "--branch", "scm", "--out", s(&o)]);
    let r = Raster::load(o.join("corr_map.pgm")).unwrap();
    assert_eq!((r.width, r.height), (16, 16));
    assert!(r.data.iter().all(|&v| v == 128));
    let meta = read(o.join("corr_map.meta"));
    assert!(meta.contains("min=1.0\n") && meta.contains("max=1.0\n"), "{meta}");
    let profiles = read(o.join("profiles.csv"));
    assert_eq!(profiles.lines().count(), 1 + 16 + 16);
    assert!(profiles.lines().skip(1).all(|l| l.ends_with(",1.000000000")));

    assert_eq!(code(&["viz", "--checkpoint", s(&ck), "--point", "16,0", "--out", s(&tmp.path().join("w"))]), 2);
    assert_eq!(code(&["viz", "--checkpoint", s(&ck), "--point", "1,1", "--branch", "foo", "--out", s(&tmp.path().join("w"))]), 2);
}
