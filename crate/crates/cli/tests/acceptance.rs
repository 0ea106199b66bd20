//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. `ACCEPTANCE_ONLY=1,4` restricts the run.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use simprop::data::{generate_dataset, ica_augment, switch_prob_schedule, Dataset, SyntheticConfig};
use simprop::eval::{
    evaluate, identical_input_test, repeat_supports, run_episodes, sample_episodes, AllBackground, Oracle,
};
use simprop::model::{attention_maps, kshot_probes, probes_of, ModelConfig, ProbePair, SimPropNet, Support, PROBE_EPS};
use simprop::tensor::Tensor;
use simprop::train::{initial_model, train, TrainConfig};
use simprop::Mask;

const BIN: &str = env!("CARGO_BIN_EXE_simprop");

const GRAD_CHECK_BUDGET: Duration = Duration::from_secs(120);
const ATTENTION_INSTANCES: usize = 1000;
const ATTENTION_TOL: f32 = 1e-5;
const PROBE_INSTANCES: usize = 100;
const PROBE_TOL: f32 = 1e-5;
const KSHOT_TOL: f32 = 1e-6;

const DESK_EPOCHS: usize = 60;
const DESK_BUDGET: Duration = Duration::from_secs(30 * 60);
const DESK_MARGIN: f64 = 0.25;
/// First full run at seed 0 scored 0.4238; the floor allows 0.03 below it.
const DESK_FLOOR: f64 = 0.4238 - 0.03;
const EVAL_EPISODES: usize = 1000;

const ABLATION_SEEDS: [u64; 3] = [0, 1, 2];
const ABLATION_EPOCHS: usize = 60;
const ABLATION_EPISODES: usize = 500;
const IDENTICAL_N: usize = 300;
const COMBINED_SLACK: f64 = 0.02;

type Outcome = Result<String, String>;
type Files = Vec<(PathBuf, Vec<u8>)>;
type Stage<'a> = (&'static str, Box<dyn Fn(&Path) -> Vec<String> + 'a>);
type Criterion = (usize, &'static str, fn() -> Outcome);

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn simprop(args: &[&str]) -> Result<std::process::Output, String> {
    let out = Command::new(BIN)
        .args(args)
        .env_remove("SIMPROP_THREADS")
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("simprop {args:?}: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok(out)
}

fn tree(root: &Path) -> Files {
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

fn tiny_model() -> ModelConfig {
    ModelConfig {
        input_size: 32,
        encoder_channels: vec![4, 6, 6],
        feature_channels: 4,
        fusion_channels: 8,
        decoder_channels: 4,
        ..Default::default()
    }
}

fn small_data(dir: &Path) -> Dataset {
    let cfg = SyntheticConfig {
        image_size: 32,
        samples_per_class: 12,
        ..Default::default()
    };
    generate_dataset(&cfg, 0, dir).unwrap();
    Dataset::load(dir).unwrap()
}

fn grad_oracle() -> Outcome {
    let start = Instant::now();
    let out = simprop(&["grad-check", "--size", "32"])?;
    let elapsed = start.elapsed();
    let text = String::from_utf8_lossy(&out.stdout);
    let lines: Vec<&str> = text.lines().collect();
    let all_pass = !lines.is_empty() && lines.iter().all(|l| l.starts_with("PASS"));
    let e2e = lines.iter().any(|l| l.contains("end-to-end") && l.contains("32x32"));
    ensure(
        all_pass && e2e && elapsed < GRAD_CHECK_BUDGET,
        format!(
            "{} checks all PASS={all_pass} end-to-end 32x32={e2e} in {elapsed:.1?}",
            lines.len()
        ),
    )
}

fn attention_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f32;
    for i in 0..ATTENTION_INSTANCES {
        let c = rng.gen_range(1..9);
        let (h, w) = (rng.gen_range(1..9), rng.gen_range(1..9));
        let f = random(&mut rng, &[c, h, w]);
        let mut fg = random(&mut rng, &[c]);
        let bg = random(&mut rng, &[c]);
        if i % 50 == 0 {
            fg = Tensor::zeros(&[c]);
        }
        let a = attention_maps(
            &f,
            &ProbePair {
                fg: fg.clone(),
                bg: bg.clone(),
            },
        )
        .map_err(|e| e.to_string())?;
        let b = attention_maps(&f, &ProbePair { fg: bg, bg: fg }).map_err(|e| e.to_string())?;
        for (&x, &y) in a.fg.data().iter().zip(a.bg.data()) {
            if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
                return Err(format!("instance {i}: maps leave [0,1]: {x} {y}"));
            }
            worst = worst.max((x + y - 1.0).abs());
        }
        if a.fg != b.bg || a.bg != b.fg {
            return Err(format!("instance {i}: swapping probes does not swap the maps exactly"));
        }
    }
    ensure(
        worst <= ATTENTION_TOL,
        format!("{ATTENTION_INSTANCES} instances, max |Af+Ab-1| {worst:.2e} (tol {ATTENTION_TOL:.0e}), exact swap"),
    )
}

/// Weighted means written as plain loops in f64.
fn probe_oracle(f: &Tensor, m: &Tensor) -> (Vec<f32>, Vec<f32>) {
    let (c, n) = (f.shape()[0], m.len());
    let area_f: f64 = m.data().iter().map(|&v| v as f64).sum();
    let area_b = n as f64 - area_f;
    let mut fg = Vec::with_capacity(c);
    let mut bg = Vec::with_capacity(c);
    for ch in 0..c {
        let (mut sf, mut sb) = (0.0f64, 0.0f64);
        for i in 0..n {
            let v = f.data()[ch * n + i] as f64;
            let wm = m.data()[i] as f64;
            sf += v * wm;
            sb += v * (1.0 - wm);
        }
        fg.push((sf / (area_f + PROBE_EPS as f64)) as f32);
        bg.push((sb / (area_b + PROBE_EPS as f64)) as f32);
    }
    (fg, bg)
}

fn probe_oracle_match() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f32;
    let mut degenerate = 0;
    for i in 0..PROBE_INSTANCES {
        let c = rng.gen_range(1..9);
        let (h, w) = (rng.gen_range(1..10), rng.gen_range(1..10));
        let f = random(&mut rng, &[c, h, w]);
        let m = match i % 10 {
            0 => Tensor::full(&[h, w], 1.0),
            1 => Tensor::zeros(&[h, w]),
            2 => Tensor::from_fn(&[h, w], |_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }),
            _ => Tensor::from_fn(&[h, w], |_| rng.gen_range(0.0..1.0)),
        };
        let p = probes_of(&f, &m, false).map_err(|e| e.to_string())?;
        let (fg, bg) = probe_oracle(&f, &m);
        for (got, want) in p.fg.data().iter().chain(p.bg.data()).zip(fg.iter().chain(&bg)) {
            worst = worst.max((got - want).abs());
        }
        if i % 10 < 2 {
            degenerate += 1;
            let empty = if i % 10 == 0 { &p.bg } else { &p.fg };
            if empty.data().iter().any(|&v| v != 0.0) {
                return Err(format!("instance {i}: probe of an empty region is not zero"));
            }
        }
    }
    ensure(
        worst <= PROBE_TOL,
        format!("{PROBE_INSTANCES} instances ({degenerate} full/empty masks), max abs error {worst:.2e} (tol {PROBE_TOL:.0e})"),
    )
}

fn kshot_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f32;
    for _ in 0..100 {
        let (k, c) = (rng.gen_range(2..7), rng.gen_range(1..9));
        let mut probes: Vec<ProbePair> = (0..k)
            .map(|_| ProbePair {
                fg: random(&mut rng, &[c]),
                bg: random(&mut rng, &[c]),
            })
            .collect();
        let a = kshot_probes(&probes).map_err(|e| e.to_string())?;
        probes.shuffle(&mut rng);
        let b = kshot_probes(&probes).map_err(|e| e.to_string())?;
        worst = worst.max(a.fg.max_abs_diff(&b.fg)).max(a.bg.max_abs_diff(&b.bg));
        if kshot_probes(&probes[..1]).map_err(|e| e.to_string())? != probes[0] {
            return Err("k=1 is not the identity".into());
        }
    }
    if worst > KSHOT_TOL {
        return Err(format!("permutation changes the mean by {worst:.2e}"));
    }

    let dir = tempfile::tempdir().unwrap();
    let ds = small_data(dir.path());
    let net = SimPropNet::init(tiny_model(), &mut ChaCha8Rng::seed_from_u64(5)).map_err(|e| e.to_string())?;
    let classes = ds.config().test_classes.clone();
    let one = sample_episodes(&ds.pool(&classes, simprop::data::Split::All).unwrap(), 1, 50, 6).unwrap();
    let five = repeat_supports(&one, 5);
    let r1 = run_episodes(&net, &ds, &one).map_err(|e| e.to_string())?;
    let r5 = run_episodes(&net, &ds, &five).map_err(|e| e.to_string())?;
    let same = r1
        .iter()
        .zip(&r5)
        .all(|(a, b)| a.prediction == b.prediction && a.fg == b.fg && a.bg == b.bg);
    ensure(
        same,
        format!(
            "permutation error {worst:.2e} (tol {KSHOT_TOL:.0e}), k=1 identity, {} episodes k=5 identical == k=1",
            one.len()
        ),
    )
}

fn dpr_consistency() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let net = SimPropNet::init(ModelConfig::default(), &mut rng).map_err(|e| e.to_string())?;
    for i in 0..5 {
        let img = random(&mut rng, &[3, 64, 64]);
        let (cy, cx, r) = (
            rng.gen_range(16.0..48.0),
            rng.gen_range(16.0..48.0),
            rng.gen_range(5.0..14.0),
        );
        let mask = Mask::from_fn(64, 64, |y, x| {
            (y as f32 - cy).powi(2) + (x as f32 - cx).powi(2) <= r * r
        });
        let out = net
            .forward_dual(
                &img,
                &[Support {
                    image: &img,
                    mask: &mask,
                }],
            )
            .map_err(|e| e.to_string())?;
        if out.query_logits != out.support_logits {
            return Err(format!("instance {i}: branch logits differ"));
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let ds = small_data(dir.path());
    let classes = ds.config().test_classes.clone();
    let score = identical_input_test(&Oracle, &ds, &classes, 100, 8).map_err(|e| e.to_string())?;
    ensure(
        score == 1.0,
        format!("5 bitwise-equal branch pairs, oracle identical-input mIoU {score}"),
    )
}

fn desk_training() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let data = SyntheticConfig::default();
    generate_dataset(&data, 0, dir.path()).map_err(|e| e.to_string())?;
    let ds = Dataset::load(dir.path()).map_err(|e| e.to_string())?;
    let model = ModelConfig::default();
    let cfg = TrainConfig {
        epochs: DESK_EPOCHS,
        ..Default::default()
    };
    let start = Instant::now();
    let state = train(&cfg, &model, &ds, &data.train_classes(), None).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let tc = &data.test_classes;
    let eval = |seg: &dyn simprop::eval::Segmenter| evaluate(seg, &ds, tc, 1, EVAL_EPISODES, 0).map(|r| r.mean_iou);
    let trained = eval(&state.best_model()).map_err(|e| e.to_string())?;
    let untrained = eval(&initial_model(&cfg, &model).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let background = eval(&AllBackground).map_err(|e| e.to_string())?;
    let floor_ok = trained >= DESK_FLOOR;
    ensure(
        trained >= background + DESK_MARGIN && trained >= untrained + DESK_MARGIN && floor_ok && elapsed < DESK_BUDGET,
        format!(
            "test mIoU {trained:.4} vs untrained {untrained:.4}, all-background {background:.4} \
             (margin {DESK_MARGIN}), floor {DESK_FLOOR:.4}, best epoch {}, trained in {elapsed:.0?}",
            state.best_epoch
        ),
    )
}

struct AblationScores {
    miou: [f64; 4],
    identical: [f64; 4],
}

/// Baseline, DPr, FBAF and DPr+FBAF, averaged over the seeds.
fn ablation_scores() -> Result<AblationScores, String> {
    let variants = [(false, false), (true, false), (false, true), (true, true)];
    let mut sums = AblationScores {
        miou: [0.0; 4],
        identical: [0.0; 4],
    };
    let data = SyntheticConfig::default();
    for &seed in &ABLATION_SEEDS {
        let dir = tempfile::tempdir().unwrap();
        generate_dataset(&data, seed, dir.path()).map_err(|e| e.to_string())?;
        let ds = Dataset::load(dir.path()).map_err(|e| e.to_string())?;
        for (v, &(dpr, fbaf)) in variants.iter().enumerate() {
            let cfg = TrainConfig {
                epochs: ABLATION_EPOCHS,
                seed,
                use_dpr: dpr,
                use_fbaf: fbaf,
                use_ica: false,
                ..Default::default()
            };
            let state =
                train(&cfg, &ModelConfig::default(), &ds, &data.train_classes(), None).map_err(|e| e.to_string())?;
            let net = state.best_model();
            let miou =
                evaluate(&net, &ds, &data.test_classes, 1, ABLATION_EPISODES, seed).map_err(|e| e.to_string())?;
            let ident =
                identical_input_test(&net, &ds, &data.test_classes, IDENTICAL_N, seed).map_err(|e| e.to_string())?;
            println!(
                "  seed {seed} dpr={dpr} fbaf={fbaf}: mIoU {:.4} identical-input {ident:.4}",
                miou.mean_iou
            );
            sums.miou[v] += miou.mean_iou / ABLATION_SEEDS.len() as f64;
            sums.identical[v] += ident / ABLATION_SEEDS.len() as f64;
        }
    }
    Ok(sums)
}

fn ablation_direction(a: &AblationScores) -> Outcome {
    let [base, dpr, fbaf, both] = a.miou;
    ensure(
        dpr >= base && fbaf >= base && both >= dpr.max(fbaf) - COMBINED_SLACK,
        format!(
            "mean over {} seeds: baseline {base:.4} dpr {dpr:.4} fbaf {fbaf:.4} dpr+fbaf {both:.4}",
            ABLATION_SEEDS.len()
        ),
    )
}

fn identical_gain(a: &AblationScores) -> Outcome {
    let (base, dpr) = (a.identical[0], a.identical[1]);
    ensure(
        dpr > base,
        format!(
            "identical-input mIoU dpr {dpr:.4} vs baseline {base:.4}, gain {:+.4}",
            dpr - base
        ),
    )
}

fn ica_contract() -> Outcome {
    let p0 = switch_prob_schedule(0, 0.25, 45.0);
    if p0 != 0.25 || TrainConfig::default().switch_prob(0) != 0.25 {
        return Err(format!("initial switch probability {p0}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let img = Tensor::from_fn(&[3, 16, 16], |_| rng.gen_range(0.0..1.0));
        let (aug, fired) = ica_augment(&img, 1.0, &mut rng).map_err(|e| e.to_string())?;
        let n = 256;
        let d = aug.data();
        if !fired || (0..n).any(|i| d[i] != d[n + i] || d[i] != d[2 * n + i]) {
            return Err("augmented channels differ after the switch fired".into());
        }
        let (same, fired) = ica_augment(&img, 0.0, &mut rng).map_err(|e| e.to_string())?;
        if fired || same != img {
            return Err("zero switch probability altered the image".into());
        }
    }

    let t = tempfile::tempdir().unwrap();
    let (data, run) = (t.path().join("data"), t.path().join("run"));
    simprop(&[
        "gen-data",
        "--out",
        s(&data),
        "--image-size",
        "32",
        "--samples-per-class",
        "12",
    ])?;
    let mut args = vec!["train", "--data", s(&data), "--out", s(&run), "--ica", "true"];
    args.extend_from_slice(TINY_FLAGS);
    simprop(&args)?;
    let ckpt = run.join("best.ckpt");
    let eval = |extra: &[&str]| -> Result<Vec<u8>, String> {
        let mut a = vec!["eval", "--data", s(&data), "--checkpoint", s(&ckpt), "--episodes", "40"];
        a.extend_from_slice(extra);
        Ok(simprop(&a)?.stdout)
    };
    let plain = eval(&[])?;
    let on = eval(&["--ica", "true"])?;
    let off = eval(&["--ica", "false"])?;
    ensure(
        plain == on && on == off,
        "switch_prob(0)=0.25, fired switch equalizes channels, eval output identical with --ica on/off".into(),
    )
}

const TINY_FLAGS: &[&str] = &[
    "--encoder-channels",
    "4,6,6",
    "--feature-channels",
    "4",
    "--fusion-channels",
    "8",
    "--decoder-channels",
    "4",
    "--epochs",
    "2",
    "--episodes-per-epoch",
    "6",
    "--batch",
    "3",
    "--val-episodes",
    "4",
];

fn protocol_determinism() -> Outcome {
    let t = tempfile::tempdir().unwrap();
    let mut checked = Vec::new();
    let run = |threads: &str, name: &str, cmd: &dyn Fn(&Path) -> Vec<String>| -> Result<Files, String> {
        let out = t.path().join(format!("{name}-{threads}"));
        let mut args: Vec<String> = vec!["--threads".into(), threads.into(), "--seed".into(), "11".into()];
        args.extend(cmd(&out));
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        let stdout = simprop(&refs)?.stdout;
        if !out.exists() {
            std::fs::create_dir_all(&out).unwrap();
        }
        let mut files = tree(&out);
        files.push(("<stdout>".into(), stdout));
        Ok(files)
    };
    let data = t.path().join("gen-data-1");
    let stages: Vec<Stage> = vec![
        (
            "gen-data",
            Box::new(|out: &Path| {
                [
                    "gen-data",
                    "--out",
                    s(out),
                    "--image-size",
                    "32",
                    "--samples-per-class",
                    "12",
                ]
                .map(String::from)
                .to_vec()
            }),
        ),
        (
            "train",
            Box::new(|out: &Path| {
                let mut a: Vec<String> = ["train", "--data", s(&data), "--out", s(out)]
                    .map(String::from)
                    .to_vec();
                a.extend(TINY_FLAGS.iter().map(|f| f.to_string()));
                a
            }),
        ),
        (
            "eval",
            Box::new(|out: &Path| {
                let ckpt = t.path().join("train-1").join("best.ckpt");
                [
                    "eval",
                    "--data",
                    s(&data),
                    "--checkpoint",
                    s(&ckpt),
                    "--k",
                    "5",
                    "--episodes",
                    "30",
                    "--dump-predictions",
                    s(out),
                ]
                .map(String::from)
                .to_vec()
            }),
        ),
        (
            "ablate",
            Box::new(|out: &Path| {
                let mut a: Vec<String> = [
                    "ablate",
                    "--data",
                    s(&data),
                    "--out",
                    s(out),
                    "--eval-episodes",
                    "10",
                    "--identical-n",
                    "6",
                ]
                .map(String::from)
                .to_vec();
                a.extend(TINY_FLAGS.iter().map(|f| f.to_string()));
                a
            }),
        ),
    ];
    for (name, cmd) in &stages {
        let one = run("1", name, cmd.as_ref())?;
        let three = run("3", name, cmd.as_ref())?;
        let again = run("4", name, cmd.as_ref())?;
        if one != three || one != again {
            return Err(format!("{name} output differs across thread counts"));
        }
        checked.push(format!("{name} ({} files)", one.len() - 1));
    }
    Ok(format!("byte-identical at --threads 1/3/4: {}", checked.join(", ")))
}

fn main() {
    // Behave like a harnessed target under `--list` and name filters.
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        return;
    }
    let filters: Vec<&String> = args.iter().filter(|a| !a.starts_with('-')).collect();
    if !filters.is_empty() && !filters.iter().any(|f| "acceptance".contains(f.as_str())) {
        return;
    }

    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |n: usize| only.as_ref().is_none_or(|o| o.contains(&n));

    let mut failed = 0;
    let mut report = |n: usize, name: &str, outcome: Outcome| {
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("{tag} criterion {n:>2} {name}: {detail}");
    };

    let quick: [Criterion; 6] = [
        (1, "gradient oracle", grad_oracle),
        (2, "attention invariants", attention_invariants),
        (3, "probe oracle", probe_oracle_match),
        (4, "k-shot probes", kshot_properties),
        (5, "dual-branch consistency", dpr_consistency),
        (9, "channel-averaging contract", ica_contract),
    ];
    for (n, name, f) in quick {
        if wanted(n) {
            report(n, name, f());
        }
    }
    if wanted(10) {
        report(10, "protocol determinism", protocol_determinism());
    }
    if wanted(6) {
        report(6, "desk-scale training", desk_training());
    }
    if wanted(7) || wanted(8) {
        match ablation_scores() {
            Ok(a) => {
                if wanted(7) {
                    report(7, "ablation direction", ablation_direction(&a));
                }
                if wanted(8) {
                    report(8, "identical-input gain", identical_gain(&a));
                }
            }
            Err(e) => {
                for (n, name) in [(7, "ablation direction"), (8, "identical-input gain")] {
                    if wanted(n) {
                        report(n, name, Err(e.clone()));
                    }
                }
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
