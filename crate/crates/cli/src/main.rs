mod args;

use std::fmt::Write as _;
use std::path::Path;
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use args::{AblateArgs, Cli, Command, EvalArgs, GenDataArgs, GradCheckArgs, PredictArgs, PremiseArgs, TrainArgs};
use clap::error::ErrorKind;
use clap::Parser;
use simprop::data::pnm::{load_image, load_mask, save_mask};
use simprop::data::{generate_dataset, Dataset, Split};
use simprop::eval::{
    ablate, ablation_csv, dump_predictions, error_overlap_dataset, fgbg_similarity_stats, identical_input_episodes,
    map_similarity_ratio, run_episodes, sample_episodes, AblationProtocol, EvalReport, Oracle, Segmenter,
};
use simprop::model::checkpoint::Checkpoint;
use simprop::model::{ModelConfig, SimPropNet};
use simprop::selfcheck;
use simprop::train::{train, TrainConfig, BEST_CHECKPOINT};

const THREADS_ENV: &str = "SIMPROP_THREADS";

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            let ok = matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion);
            return ExitCode::from(if ok { 0 } else { 1 });
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 2 for numeric aborts, 1 for everything else.
fn exit_code(e: &anyhow::Error) -> u8 {
    let numeric = e.chain().any(|c| {
        c.downcast_ref::<simprop::Error>()
            .is_some_and(simprop::Error::is_numeric)
            || c.is::<NumericFailure>()
    });
    if numeric {
        2
    } else {
        1
    }
}

#[derive(Debug)]
struct NumericFailure(String);

impl std::fmt::Display for NumericFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericFailure {}

fn threads(cli_value: usize) -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .with_context(|| format!("{THREADS_ENV}={v} is not a thread count")),
        Err(_) => Ok(cli_value),
    }
}

fn run(cli: Cli) -> Result<()> {
    let n = threads(cli.threads)?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(n).build()?;
    log::info!("seed={} threads={}", cli.seed, pool.current_num_threads());
    pool.install(|| match &cli.command {
        Command::GenData(a) => gen_data(a, cli.seed),
        Command::Train(a) => train_cmd(a, cli.seed),
        Command::Predict(a) => predict(a),
        Command::Eval(a) => eval(a, cli.seed),
        Command::Ablate(a) => ablate_cmd(a, cli.seed),
        Command::Premise(a) => premise(a, cli.seed),
        Command::GradCheck(a) => grad_check(a, cli.seed),
    })
}

fn log_pairs<K: std::fmt::Display, V: std::fmt::Display>(section: &str, pairs: impl IntoIterator<Item = (K, V)>) {
    for (k, v) in pairs {
        log::info!("{section}.{k}={v}");
    }
}

fn log_model(cfg: &ModelConfig) {
    log_pairs("model", cfg.to_pairs());
}

fn log_train(cfg: &TrainConfig) {
    log_pairs("train", cfg.to_pairs());
}

fn load_dataset(dir: &Path) -> Result<Dataset> {
    let ds = Dataset::load(dir).with_context(|| format!("loading dataset {}", dir.display()))?;
    log_pairs(
        "data",
        [
            ("root", dir.display().to_string()),
            ("samples", ds.samples.len().to_string()),
        ],
    );
    Ok(ds)
}

fn load_model(path: &Path) -> Result<SimPropNet> {
    let ckpt = Checkpoint::load(path, None).with_context(|| format!("loading checkpoint {}", path.display()))?;
    log::info!("checkpoint={}", path.display());
    log_model(&ckpt.config);
    Ok(SimPropNet::new(ckpt.config, ckpt.params)?)
}

fn write_report(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn gen_data(a: &GenDataArgs, seed: u64) -> Result<()> {
    let cfg = a.data.config();
    log::info!("out={}", a.out.display());
    let manifest = generate_dataset(&cfg, seed, &a.out)?;
    log_pairs("data", manifest.config.to_pairs());
    log::info!("wrote {} samples", manifest.records.len());
    Ok(())
}

fn train_cmd(a: &TrainArgs, seed: u64) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let train_cfg = a.train.config(seed);
    let model_cfg = train_cfg.resolve_model(&a.model.config(ds.config().image_size));
    log_model(&model_cfg);
    log_train(&train_cfg);
    let classes = if a.all_classes {
        (0..ds.config().n_classes).collect()
    } else {
        ds.config().train_classes()
    };
    log::info!("train.classes={classes:?} out={}", a.out.display());
    let state = train(&train_cfg, &model_cfg, &ds, &classes, Some(&a.out))?;
    log::info!("best epoch {} val_miou {:.6}", state.best_epoch, state.best_val_miou);
    Ok(())
}

fn predict(a: &PredictArgs) -> Result<()> {
    ensure!(
        a.supports.len() == a.support_masks.len(),
        "{} support images but {} support masks",
        a.supports.len(),
        a.support_masks.len()
    );
    let net = load_model(&a.checkpoint)?;
    let query = load_image(&a.query)?;
    let images = a
        .supports
        .iter()
        .map(|p| load_image(p))
        .collect::<simprop::Result<Vec<_>>>()?;
    let masks = a
        .support_masks
        .iter()
        .map(|p| load_mask(p))
        .collect::<simprop::Result<Vec<_>>>()?;
    let pairs: Vec<_> = images.iter().zip(&masks).collect();
    let mask = net.predict(&query, &pairs)?;
    save_mask(&a.out, &mask)?;
    println!("{}", a.out.display());
    Ok(())
}

fn eval(a: &EvalArgs, seed: u64) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    if let Some(ica) = a.ica {
        log::info!("eval.ica={ica} has no effect: augmentation is training-only");
    }
    let classes = a.classes.clone().unwrap_or_else(|| ds.config().test_classes.clone());
    log_pairs(
        "eval",
        [
            ("k", a.k.to_string()),
            ("episodes", a.episodes.to_string()),
            ("classes", format!("{classes:?}")),
            ("oracle", a.oracle.to_string()),
        ],
    );
    let model;
    let seg: &dyn Segmenter = if a.oracle {
        &Oracle
    } else {
        let Some(path) = &a.checkpoint else {
            bail!("--checkpoint is required")
        };
        model = load_model(path)?;
        &model
    };
    let pool = ds.pool(&classes, Split::All)?;
    let episodes = sample_episodes(&pool, a.k, a.episodes, seed)?;
    let results = run_episodes(seg, &ds, &episodes)?;
    let report = EvalReport::from_results(&results, a.k, seed)?;
    if let Some(dir) = &a.dump_predictions {
        dump_predictions(&ds, &episodes, &results, dir)?;
    }
    let csv = report.to_csv();
    match &a.out {
        Some(path) => write_report(path, &csv)?,
        None => print!("{csv}"),
    }
    log::info!("mean_iou {:.6} fgbg_iou {:.6}", report.mean_iou, report.fgbg_iou);
    Ok(())
}

fn ablate_cmd(a: &AblateArgs, seed: u64) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let train_cfg = a.train.config(seed);
    let model_cfg = a.model.config(ds.config().image_size);
    log_model(&model_cfg);
    log_train(&train_cfg);
    let protocol = AblationProtocol {
        k: a.protocol.k,
        episodes: a.protocol.eval_episodes,
        identical_n: a.protocol.identical_n,
        seed,
    };
    log::info!("ablate.protocol={protocol:?}");
    let rows = ablate(&ds, &model_cfg, &train_cfg, &protocol, Some(&a.out))?;
    let csv = ablation_csv(&rows);
    write_report(&a.out.join("ablation.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn premise(a: &PremiseArgs, seed: u64) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let net = load_model(&a.checkpoint)?;
    let reference = match &a.reference {
        Some(path) => load_model(path)?,
        None => {
            let train_cfg = a.train.config(seed);
            let model_cfg = train_cfg.resolve_model(&a.model.config(ds.config().image_size));
            log::info!("training the supervised reference on every class");
            log_model(&model_cfg);
            log_train(&train_cfg);
            let all: Vec<usize> = (0..ds.config().n_classes).collect();
            let dir = a.out.join("reference");
            train(&train_cfg, &model_cfg, &ds, &all, Some(&dir))?;
            load_model(&dir.join(BEST_CHECKPOINT))?
        }
    };
    let test = ds.config().test_classes.clone();
    let p = &a.protocol;
    log_pairs(
        "premise",
        [
            ("k", p.k.to_string()),
            ("eval_episodes", p.eval_episodes.to_string()),
            ("identical_n", p.identical_n.to_string()),
            ("pairs", a.pairs.to_string()),
        ],
    );

    let identical = identical_input_episodes(&ds, &test, p.identical_n, seed)?;
    let mut csv = String::from("model,mean_iou\n");
    for (name, m) in [("fss", &net), ("reference", &reference)] {
        let r = EvalReport::from_results(&run_episodes(m, &ds, &identical)?, 1, seed)?;
        let _ = writeln!(csv, "{name},{:.6}", r.mean_iou);
    }
    write_report(&a.out.join("identical_input.csv"), &csv)?;

    let pool = ds.pool(&test, Split::All)?;
    let episodes = sample_episodes(&pool, p.k, p.eval_episodes, seed)?;
    let o = error_overlap_dataset(&net, &reference, &ds, &episodes)?;
    let csv = format!(
        "# reconstructed metric: error-set overlap, tp gap aggregated over the dataset\n\
         fn_overlap_pct,fp_overlap_pct,tp_gap_pct\n{:.6},{:.6},{:.6}\n",
        o.fn_overlap_pct, o.fp_overlap_pct, o.tp_gap_pct
    );
    write_report(&a.out.join("error_overlap.csv"), &csv)?;

    let r = map_similarity_ratio(&net, &net, &ds, &test, a.pairs, seed)?;
    let csv = format!(
        "mean,std,used,skipped\n{:.6},{:.6},{},{}\n",
        r.mean, r.std, r.used, r.skipped
    );
    write_report(&a.out.join("similarity_ratio.csv"), &csv)?;

    let mut csv = String::from("class_id,fg_cos,bg_cos,pairs\n");
    for s in fgbg_similarity_stats(&net, &ds, &test, a.pairs, seed)? {
        let _ = writeln!(csv, "{},{:.6},{:.6},{}", s.class_id, s.fg_cos, s.bg_cos, s.pairs);
    }
    write_report(&a.out.join("fgbg_similarity.csv"), &csv)?;
    log::info!("premise reports written to {}", a.out.display());
    Ok(())
}

fn grad_check(a: &GradCheckArgs, seed: u64) -> Result<()> {
    ensure!(
        a.size.is_multiple_of(8) && a.size > 0,
        "--size must be a positive multiple of 8"
    );
    let results = selfcheck::run_all(a.size, seed)?;
    for r in &results {
        println!("{}", r.summary());
    }
    let failed: Vec<&str> = results
        .iter()
        .filter(|r| !r.passed())
        .map(|r| r.name.as_str())
        .collect();
    if !failed.is_empty() {
        return Err(NumericFailure(format!("gradient check failed for {}", failed.join(", "))).into());
    }
    Ok(())
}
