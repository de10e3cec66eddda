use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mactr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mactr"))
        .args(args)
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn synth(dir: &Path, impressions: &str) {
    let o = mactr(&[
        "synth",
        "--out",
        s(dir),
        "--impressions",
        impressions,
        "--users",
        "50",
        "--buckets",
        "4096",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.starts_with("split,impressions\n"));
}

#[test]
fn synth_train_eval_predict() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "3000");
    let (train, test, schema, ck) = (
        d.join("train.tsv"),
        d.join("test.tsv"),
        d.join("schema.txt"),
        d.join("m.bin"),
    );

    let o = mactr(&[
        "train",
        "--model",
        "ma-wd",
        "--train",
        s(&train),
        "--schema",
        s(&schema),
        "--out",
        s(&ck),
        "--layers",
        "8,4",
        "--embedding-dim",
        "4",
        "--batch-size",
        "64",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("warning: memory dimension set to 4"));
    let metrics = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], "batch_index,mean_loss1,mean_loss2,examples_seen");
    assert_eq!(lines.len(), 1 + 2700usize.div_ceil(64));
    assert!(lines.last().unwrap().ends_with(",2700"));

    let o = mactr(&[
        "eval",
        "--checkpoint",
        s(&ck),
        "--test",
        s(&test),
        "--schema",
        s(&schema),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[0], "ma-wd");
    assert_eq!(row[3], "300");
    let auc: f64 = row[1].parse().unwrap();
    assert!((0.0..=1.0).contains(&auc));

    let o = mactr(&[
        "predict",
        "--checkpoint",
        s(&ck),
        "--test",
        s(&test),
        "--schema",
        s(&schema),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let probs: Vec<f64> = String::from_utf8(o.stdout)
        .unwrap()
        .lines()
        .map(|l| l.parse().unwrap())
        .collect();
    assert_eq!(probs.len(), 300);
    assert!(probs.iter().all(|p| *p > 0.0 && *p < 1.0));
}

#[test]
fn untrained_checkpoints_match_across_processes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "200");
    let train = |out: &str| {
        let o = mactr(&[
            "train",
            "--train",
            s(&d.join("train.tsv")),
            "--schema",
            s(&d.join("schema.txt")),
            "--out",
            s(&d.join(out)),
            "--epochs",
            "0",
            "--seed",
            "0",
            "--layers",
            "16,8",
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        fs::read(d.join(out)).unwrap()
    };
    assert_eq!(train("a.bin"), train("b.bin"));
}

#[test]
fn usage_errors_exit_one() {
    let o = mactr(&[
        "train", "--model", "gru", "--train", "a", "--schema", "s", "--out", "o",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("ma-dnn"), "{}", stderr(&o));

    for args in [
        vec!["train", "--train", "a", "--schema", "s"],
        vec![
            "train",
            "--train",
            "a",
            "--schema",
            "s",
            "--out",
            "o",
            "--frobnicate",
        ],
        vec![
            "train",
            "--train",
            "a",
            "--schema",
            "s",
            "--out",
            "o",
            "--batch-size",
            "-3",
        ],
        vec!["eval", "--checkpoint", "c", "--schema", "s"],
        vec![],
    ] {
        assert_eq!(mactr(&args).status.code(), Some(1), "{args:?}");
    }
    assert_eq!(mactr(&["--help"]).status.code(), Some(0));
}

#[test]
fn data_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "500");
    let schema = d.join("schema.txt");
    let bad = d.join("bad.tsv");
    let mut text = fs::read_to_string(d.join("train.tsv")).unwrap();
    text.insert_str(
        text.find('\n').unwrap() + 1,
        "7\tnot\tenough\tcolumns\textra\n",
    );
    fs::write(&bad, text).unwrap();
    let ck = d.join("m.bin");
    let args = [
        "train",
        "--model",
        "lr",
        "--train",
        s(&bad),
        "--schema",
        s(&schema),
        "--out",
        s(&ck),
    ];
    let o = mactr(&args);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
    assert!(!ck.exists());

    let mut lenient = args.to_vec();
    lenient.push("--lenient");
    assert!(mactr(&lenient).status.success());

    let mut bytes = fs::read(&ck).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 1;
    fs::write(&ck, &bytes).unwrap();
    let o = mactr(&[
        "eval",
        "--checkpoint",
        s(&ck),
        "--test",
        s(&d.join("test.tsv")),
        "--schema",
        s(&schema),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("checksum mismatch"), "{}", stderr(&o));

    let o = mactr(&[
        "eval",
        "--checkpoint",
        s(&d.join("none.bin")),
        "--test",
        s(&bad),
        "--schema",
        s(&schema),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn ab_ordering_exit_codes() {
    let common = [
        "--impressions",
        "3000",
        "--users",
        "40",
        "--layers",
        "8,4",
        "--embedding-dim",
        "4",
        "--buckets",
        "4096",
    ];
    let mut args = vec!["ab", "--model", "dnn", "--baseline", "dnn"];
    args.extend(common);
    let o = mactr(&args);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "model,auc,logloss,n");
    assert_eq!(lines[1], lines[2]);
    assert_eq!(lines[3], "auc_delta,+0.000000");

    args.extend(["--expect", "none"]);
    assert_eq!(mactr(&args).status.code(), Some(0));
}

#[test]
fn gradcheck_subcommand() {
    let o = mactr(&["gradcheck", "--model", "ma-dnn", "--trials", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.starts_with("model,trials,max_rel_error\nma-dnn,3,"));
}
