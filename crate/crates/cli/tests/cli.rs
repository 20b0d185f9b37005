use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn veinattn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_veinattn"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, classes: usize, per_class: usize) -> PathBuf {
    let out = dir.join(format!("synth_{classes}x{per_class}"));
    let res = veinattn(&[
        "synth",
        "--classes",
        &classes.to_string(),
        "--per-class",
        &per_class.to_string(),
        "--out",
        p(&out),
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    out
}

fn files_under(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut all = Vec::new();
    for class in fs::read_dir(dir).unwrap() {
        for f in fs::read_dir(class.unwrap().path()).unwrap() {
            let path = f.unwrap().path();
            let bytes = fs::read(&path).unwrap();
            all.push((path.strip_prefix(dir).unwrap().to_path_buf(), bytes));
        }
    }
    all.sort();
    all
}

fn train(data: &Path, dir: &Path, tag: &str, extra: &[&str]) -> (PathBuf, PathBuf) {
    let ckpt = dir.join(format!("{tag}.vatn"));
    let csv = dir.join(format!("{tag}.csv"));
    let mut args = vec![
        "train",
        "--data",
        p(data),
        "--checkpoint",
        p(&ckpt),
        "--metrics",
        p(&csv),
        "--batch-size",
        "6",
        "--no-timing",
    ];
    args.extend_from_slice(extra);
    let res = veinattn(&args);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    (ckpt, csv)
}

#[test]
fn synth_writes_the_default_layout_reproducibly() {
    let tmp = tempfile::tempdir().unwrap();
    let a = synth(tmp.path(), 20, 12);
    let files = files_under(&a);
    assert_eq!(files.len(), 240);
    assert_eq!(fs::read_dir(&a).unwrap().count(), 20);
    assert!(files.iter().all(|(path, _)| path.extension().unwrap() == "pgm"));

    let b = tmp.path().join("again");
    let res = veinattn(&["synth", "--out", p(&b)]);
    assert!(res.status.success());
    assert_eq!(files_under(&b), files);
}

#[test]
fn synth_rejects_single_image_classes() {
    let tmp = tempfile::tempdir().unwrap();
    let res = veinattn(&["synth", "--per-class", "1", "--out", p(&tmp.path().join("x"))]);
    assert_eq!(res.status.code(), Some(1));
}

#[test]
fn train_is_reproducible_and_eval_agrees() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path(), 3, 4);
    let seed = ["--seed", "7", "--epochs", "2", "--lr", "1e-3"];
    let (ckpt, csv_a) = train(&data, tmp.path(), "a", &seed);
    let (_, csv_b) = train(&data, tmp.path(), "b", &seed);
    let a = fs::read_to_string(&csv_a).unwrap();
    assert_eq!(a, fs::read_to_string(&csv_b).unwrap());

    let lines: Vec<&str> = a.lines().collect();
    assert_eq!(lines[0], "epoch,train_loss,train_acc,test_acc,seconds");
    assert_eq!(lines.len(), 3);
    let final_test_acc = lines[2].split(',').nth(3).unwrap();

    let res = veinattn(&["eval", "--data", p(&data), "--checkpoint", p(&ckpt)]);
    assert!(res.status.success());
    let text = stdout(&res);
    assert!(text.contains("test images: 3"), "{text}");
    assert!(text.contains(&format!("test accuracy: {final_test_acc}\n")), "{text}");
}

#[test]
fn eval_rejects_a_dataset_with_other_classes() {
    let tmp = tempfile::tempdir().unwrap();
    let (ckpt, _) = train(&synth(tmp.path(), 3, 4), tmp.path(), "m", &["--epochs", "1"]);
    let res = veinattn(&["eval", "--data", p(&synth(tmp.path(), 4, 4)), "--checkpoint", p(&ckpt)]);
    assert_ne!(res.status.code(), Some(0));
    assert!(!res.stderr.is_empty());
}

#[test]
fn infer_ranks_a_memorized_image_first() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path(), 6, 4);
    let (ckpt, _) = train(&data, tmp.path(), "m", &["--epochs", "15", "--lr", "1e-3"]);
    let image = data.join("c004").join("000.pgm");
    let res = veinattn(&["infer", "--checkpoint", p(&ckpt), "--image", p(&image)]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let rows: Vec<(usize, usize, f64)> = stdout(&res)
        .lines()
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            (f[0].parse().unwrap(), f[1].parse().unwrap(), f[2].parse().unwrap())
        })
        .collect();
    assert_eq!(rows.len(), 5);
    assert_eq!(rows.iter().map(|r| r.0).collect::<Vec<_>>(), [1, 2, 3, 4, 5]);
    assert!(rows.windows(2).all(|w| w[0].2 >= w[1].2));
    assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r.2)));
    assert_eq!(rows[0].1, 4);
}

#[test]
fn gradcheck_exit_codes() {
    assert_eq!(veinattn(&["gradcheck", "--seeds", "1"]).status.code(), Some(0));
    let broken = veinattn(&["gradcheck", "--seeds", "1", "--inject-fault", "batchnorm"]);
    assert_eq!(broken.status.code(), Some(3));
    assert_eq!(veinattn(&["gradcheck", "--precision", "f16"]).status.code(), Some(1));
    assert_eq!(veinattn(&["frobnicate"]).status.code(), Some(1));
}

#[test]
fn missing_inputs_fail_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope");
    let res = veinattn(&["infer", "--checkpoint", p(&missing.join("m.vatn")), "--image", p(&missing)]);
    assert_eq!(res.status.code(), Some(2));
    let res = veinattn(&["train", "--data", p(&missing), "--checkpoint", p(&tmp.path().join("m.vatn"))]);
    assert_ne!(res.status.code(), Some(0));
}
