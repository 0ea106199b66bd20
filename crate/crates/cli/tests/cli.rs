use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_simprop");

const SMALL_DATA: &[&str] = &["--image-size", "32", "--samples-per-class", "12"];
const TINY_MODEL: &[&str] = &[
    "--encoder-channels",
    "4,6,6",
    "--feature-channels",
    "4",
    "--fusion-channels",
    "8",
    "--decoder-channels",
    "4",
];
const QUICK_TRAIN: &[&str] = &[
    "--epochs",
    "2",
    "--episodes-per-epoch",
    "4",
    "--batch",
    "2",
    "--val-episodes",
    "4",
];

fn simprop(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("SIMPROP_THREADS")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = simprop(args);
    assert!(
        out.status.success(),
        "simprop {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(args: &[&str]) -> i32 {
    simprop(args).status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(dir: &Path, seed: &str, threads: &str) {
    let mut args = vec!["gen-data", "--out", s(dir), "--seed", seed, "--threads", threads];
    args.extend_from_slice(SMALL_DATA);
    ok(&args);
}

fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn train(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--data", s(data), "--out", s(out)];
    args.extend_from_slice(TINY_MODEL);
    args.extend_from_slice(QUICK_TRAIN);
    args.extend_from_slice(extra);
    simprop(&args)
}

#[test]
fn gen_data_is_reproducible() {
    let t = tempfile::tempdir().unwrap();
    let (a, b, c) = (t.path().join("a"), t.path().join("b"), t.path().join("c"));
    gen(&a, "7", "1");
    gen(&b, "7", "3");
    gen(&c, "8", "1");
    assert_eq!(tree(&a), tree(&b));
    assert_ne!(tree(&a), tree(&c));
}

#[test]
fn oracle_evaluation_scores_one() {
    let t = tempfile::tempdir().unwrap();
    gen(t.path(), "1", "0");
    let out = ok(&["eval", "--data", s(t.path()), "--oracle", "--episodes", "20"]);
    let csv = String::from_utf8(out.stdout).unwrap();
    let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[3], "1.000000");
    assert_eq!(row[4], "1.000000");
}

#[test]
fn train_predict_and_eval_round_trip() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    let run = t.path().join("run");
    gen(&data, "2", "0");
    let out = train(&data, &run, &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let log = String::from_utf8_lossy(&out.stderr);
    assert!(
        log.contains("train.lr=0.0025") && log.contains("model.fbaf=true"),
        "{log}"
    );
    for f in ["metrics.csv", "best.ckpt", "last.ckpt"] {
        assert!(run.join(f).exists(), "{f}");
    }

    let ckpt = run.join("best.ckpt");
    let mask = t.path().join("pred.pgm");
    let out = ok(&[
        "predict",
        "--checkpoint",
        s(&ckpt),
        "--query",
        s(&data.join("images/00000.ppm")),
        "--supports",
        s(&data.join("images/00001.ppm")),
        s(&data.join("images/00002.ppm")),
        "--support-masks",
        s(&data.join("masks/00001.pgm")),
        s(&data.join("masks/00002.pgm")),
        "--out",
        s(&mask),
    ]);
    assert_eq!(String::from_utf8(out.stdout).unwrap().trim(), s(&mask));
    let m = simprop::data::pnm::load_mask(&mask).unwrap();
    assert_eq!((m.height(), m.width()), (32, 32));

    let report = t.path().join("report.csv");
    let preds = t.path().join("preds");
    ok(&[
        "eval",
        "--data",
        s(&data),
        "--checkpoint",
        s(&ckpt),
        "--k",
        "5",
        "--episodes",
        "6",
        "--out",
        s(&report),
        "--dump-predictions",
        s(&preds),
    ]);
    let csv = std::fs::read_to_string(&report).unwrap();
    assert!(csv.starts_with("k,n_episodes,seed,mean_iou,fgbg_iou,class_0_iou,class_1_iou\n5,6,0,"));
    assert!(preds.join("predictions.manifest").exists() && preds.join("00005.pgm").exists());
}

#[test]
fn exit_codes_follow_the_contract() {
    let t = tempfile::tempdir().unwrap();
    assert_eq!(code(&["--help"]), 0);
    assert_eq!(code(&["no-such-command"]), 1);
    assert_eq!(code(&["gen-data", "--out", s(t.path()), "--image-size", "many"]), 1);
    assert_eq!(code(&["gen-data", "--out", s(t.path()), "--bogus-flag"]), 1);
    assert_eq!(code(&["eval", "--data", s(&t.path().join("missing")), "--oracle"]), 1);
    assert_eq!(
        code(&["gen-data", "--out", s(t.path()), "--test-classes", "0,1,2,3,4"]),
        1
    );

    let data = t.path().join("data");
    gen(&data, "3", "0");
    let run = t.path().join("run");
    assert_eq!(train(&data, &run, &["--lr", "1e30"]).status.code(), Some(2));

    assert!(train(&data, &run, &[]).status.success());
    let ckpt = run.join("best.ckpt");
    let mut bytes = std::fs::read(&ckpt).unwrap();
    let n = bytes.len();
    bytes[n - 6] ^= 0x40;
    let bad = t.path().join("bad.ckpt");
    std::fs::write(&bad, &bytes).unwrap();
    assert_eq!(
        code(&["eval", "--data", s(&data), "--checkpoint", s(&bad), "--episodes", "2"]),
        1
    );
    std::fs::write(&bad, &bytes[..n / 2]).unwrap();
    assert_eq!(
        code(&["eval", "--data", s(&data), "--checkpoint", s(&bad), "--episodes", "2"]),
        1
    );

    std::fs::write(data.join("manifest.txt"), "format=other\n\n").unwrap();
    assert_eq!(code(&["eval", "--data", s(&data), "--oracle"]), 1);

    let out = Command::new(BIN)
        .args(["gen-data", "--out", s(&t.path().join("x"))])
        .env("SIMPROP_THREADS", "lots")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn thread_variable_overrides_the_flag() {
    let t = tempfile::tempdir().unwrap();
    let out = Command::new(BIN)
        .args(["gen-data", "--threads", "3", "--out", s(t.path())])
        .args(SMALL_DATA)
        .env("SIMPROP_THREADS", "2")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("threads=2"));
}

#[test]
fn ablate_and_premise_write_their_reports() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    gen(&data, "4", "0");
    let abl = t.path().join("abl");
    let mut args = vec![
        "ablate",
        "--data",
        s(&data),
        "--out",
        s(&abl),
        "--eval-episodes",
        "8",
        "--identical-n",
        "4",
    ];
    args.extend_from_slice(TINY_MODEL);
    args.extend_from_slice(QUICK_TRAIN);
    let out = ok(&args);
    let csv = std::fs::read_to_string(abl.join("ablation.csv")).unwrap();
    assert_eq!(String::from_utf8(out.stdout).unwrap(), csv);
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(
        rows[0],
        "variant,use_dpr,use_fbaf,use_ica,mean_iou,fgbg_iou,identical_input_iou"
    );
    assert_eq!(rows.len(), 6);
    assert!(rows[5].starts_with("dpr+fbaf+ica,true,true,true,"));
    assert!(abl.join("dpr_fbaf_ica").join("best.ckpt").exists());

    let prem = t.path().join("premise");
    let ckpt = abl.join("dpr_fbaf").join("best.ckpt");
    let mut args = vec![
        "premise",
        "--data",
        s(&data),
        "--checkpoint",
        s(&ckpt),
        "--out",
        s(&prem),
        "--pairs",
        "6",
        "--eval-episodes",
        "8",
        "--identical-n",
        "4",
    ];
    args.extend_from_slice(TINY_MODEL);
    args.extend_from_slice(QUICK_TRAIN);
    ok(&args);
    for f in [
        "identical_input.csv",
        "error_overlap.csv",
        "similarity_ratio.csv",
        "fgbg_similarity.csv",
    ] {
        let text = std::fs::read_to_string(prem.join(f)).unwrap();
        assert!(text.lines().count() >= 2, "{f}: {text}");
    }
    assert!(prem.join("reference").join("best.ckpt").exists());
}
