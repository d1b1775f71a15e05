use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "--set", "hidden=8", "--set", "layers=1", "--set", "heads=2", "--set", "ffn_width=16", "--set", "batch_size=8",
    "--epochs", "2", "--seed", "5",
];

fn mtdnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mtdnn"))
        .args(args)
        .env_remove("MTDNN_SEED")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = mtdnn(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(dir: &Path) {
    ok(&["gen-data", "--seed", "3", "--out-dir", s(dir), "--sizes", "24,8,8"]);
}

fn train(data: &Path, out: &Path, extra: &[&str]) {
    let mut args = vec!["train-mtl", "--data-dir", s(data), "--out", s(out)];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    ok(&args);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(mtdnn(&["--help"]).status.code(), Some(0));
    assert_eq!(mtdnn(&["no-such-command"]).status.code(), Some(64));
    assert_eq!(mtdnn(&["gen-data"]).status.code(), Some(64));
    let data = tmp.path().join("data");
    assert_eq!(
        mtdnn(&["gen-data", "--out-dir", s(&data), "--sizes", "1,2"]).status.code(),
        Some(64)
    );
    assert_eq!(
        mtdnn(&["train-mtl", "--data-dir", s(&tmp.path().join("missing")), "--out", "x.ckpt"]).status.code(),
        Some(2)
    );
    gen(&data);
    let bad = tmp.path().join("bad.conf");
    fs::write(&bad, "hidden = 8\nbogus = 1\n").unwrap();
    let out = mtdnn(&["train-mtl", "--data-dir", s(&data), "--config", s(&bad), "--out", s(&tmp.path().join("m"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
    let blocker = tmp.path().join("file");
    fs::write(&blocker, "").unwrap();
    assert_eq!(
        mtdnn(&["gen-data", "--out-dir", s(&blocker.join("sub")), "--sizes", "4,2,2"]).status.code(),
        Some(2)
    );
}

#[test]
fn gen_data_is_deterministic_and_sized() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["gen-data", "--seed", "9", "--out-dir", s(&a), "--sizes", "10,5,5"]);
    ok(&["gen-data", "--seed", "9", "--out-dir", s(&b), "--sizes", "10,5,5"]);
    let mut tasks = 0;
    for entry in fs::read_dir(&a).unwrap() {
        let task = entry.unwrap().path();
        if !task.is_dir() {
            continue;
        }
        tasks += 1;
        for (split, n) in [("train", 10), ("dev", 5), ("test", 5)] {
            let p = task.join(format!("{split}.tsv"));
            let text = fs::read_to_string(&p).unwrap();
            assert_eq!(text.lines().count(), n + 2, "{}", p.display());
            let q = b.join(task.file_name().unwrap()).join(format!("{split}.tsv"));
            assert_eq!(text, fs::read_to_string(q).unwrap());
        }
    }
    assert_eq!(tasks, 4);
    assert!(a.join("manifest.json").exists());
}

#[test]
fn training_is_reproducible_and_reports_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data);
    let (m1, m2) = (tmp.path().join("m1.ckpt"), tmp.path().join("m2.ckpt"));
    let csv = tmp.path().join("m.csv");
    train(&data, &m1, &["--metrics", s(&csv)]);
    train(&data, &m2, &[]);
    assert_eq!(fs::read(&m1).unwrap(), fs::read(&m2).unwrap());
    let text = fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap();
    assert!(header.starts_with("epoch"));
    let rows: Vec<&str> = lines.collect();
    let dev_rows = rows.iter().filter(|r| r.contains(",dev,")).count();
    // Two epochs, four tasks, at least one dev metric each.
    assert!(dev_rows >= 8, "{dev_rows}");
    assert!(rows.iter().filter(|r| r.contains(",train,loss,")).count() >= 2);
    let manifest = fs::read_to_string(tmp.path().join("m1.ckpt.manifest.json")).unwrap();
    assert!(manifest.contains("\"command\": \"train-mtl\""));
    assert!(manifest.contains("inputs_hash"));
}

#[test]
fn resume_matches_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data);
    let full = tmp.path().join("full.ckpt");
    let half = tmp.path().join("half.ckpt");
    let resumed = tmp.path().join("resumed.ckpt");
    train(&data, &full, &[]);
    train(&data, &half, &["--stop-after", "1"]);
    assert_ne!(fs::read(&full).unwrap(), fs::read(&half).unwrap());
    train(&data, &resumed, &["--resume", s(&half)]);
    assert_eq!(fs::read(&full).unwrap(), fs::read(&resumed).unwrap());
}

#[test]
fn full_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let p = |n: &str| -> &'static str { Box::leak(s(&tmp.path().join(n)).to_owned().into_boxed_str()) };
    let data = tmp.path().join("data");
    gen(&data);
    train(&data, Path::new(p("base.ckpt")), &[]);

    let mut args = vec![
        "train-teachers", "--task", "relation", "--base", p("base.ckpt"), "--data-dir", s(&data),
        "--candidates", "3", "--keep", "2", "--out", p("ens"),
    ];
    args.extend_from_slice(TINY);
    ok(&args);
    assert!(Path::new(p("ens/member0.ckpt")).exists() && Path::new(p("ens/member1.ckpt")).exists());
    assert!(!Path::new(p("ens/member2.ckpt")).exists());
    let sel = fs::read_to_string(p("ens/selection.csv")).unwrap();
    assert_eq!(sel.lines().count(), 4);
    assert_eq!(sel.matches(",true").count(), 2);

    let mut bad = args.clone();
    let at = bad.iter().position(|a| *a == "--keep").unwrap() + 1;
    bad[at] = "4";
    assert_eq!(mtdnn(&bad).status.code(), Some(2));

    ok(&["export-soft", "--ensemble-dir", p("ens"), "--data-dir", s(&data), "--out", p("soft.tsv")]);
    assert_eq!(
        mtdnn(&["export-soft", "--ensemble-dir", p("nothing"), "--data-dir", s(&data), "--out", p("x.tsv")])
            .status
            .code(),
        Some(2)
    );

    let kd_csv = p("kd.csv");
    let mut args = vec![
        "distill", "--data-dir", s(&data), "--soft", p("soft.tsv"), "--init", p("base.ckpt"),
        "--teacher-tasks", "relation", "--out", p("kd.ckpt"), "--metrics", kd_csv,
    ];
    args.extend_from_slice(TINY);
    ok(&args);
    assert_eq!(fs::read_to_string(kd_csv).unwrap().matches("kl_to_teacher").count(), 2);

    // Without teacher tasks, distillation is multi-task training from the same init.
    let mut args = vec!["distill", "--data-dir", s(&data), "--init", p("base.ckpt"), "--out", p("plain.ckpt")];
    args.extend_from_slice(TINY);
    ok(&args);
    train(&data, Path::new(p("cont.ckpt")), &["--init", p("base.ckpt")]);
    assert_eq!(fs::read(p("plain.ckpt")).unwrap(), fs::read(p("cont.ckpt")).unwrap());

    let mut args = vec![
        "finetune", "--model", p("kd.ckpt"), "--data-dir", s(&data), "--task", "keyword", "--out", p("ft.ckpt"),
    ];
    args.extend_from_slice(TINY);
    ok(&args);

    ok(&["eval", "--model", p("kd.ckpt"), "--data-dir", s(&data), "--split", "test", "--out", p("eval.csv")]);
    let eval = fs::read_to_string(p("eval.csv")).unwrap();
    assert!(eval.starts_with("task,split,metric_name,value"));
    assert!(eval.lines().filter(|l| l.contains(",test,")).count() >= 4);

    ok(&[
        "compare", "--model-a", p("base.ckpt"), "--model-b", p("kd.ckpt"), "--data-dir", s(&data), "--out",
        p("cmp.csv"),
    ]);
    assert_eq!(fs::read_to_string(p("cmp.csv")).unwrap().lines().count(), 5);
}
