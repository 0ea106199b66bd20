//! Episodic SGD training with the dual cross-entropy loss and
//! validation-based checkpoint retention.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{ica_augment, sample_episode, switch_prob_schedule, Dataset, Episode, SamplePool, Split};
use crate::error::{invalid, Error, Result};
use crate::eval::{run_episodes, EvalReport};
use crate::model::checkpoint::Checkpoint;
use crate::model::{
    forward_dual_graph, normalize_image, DualPrediction, ModelConfig, ModelParams, SimPropNet, Support,
};
use crate::tensor::{Tape, Tensor, Var};

pub const METRICS_FILE: &str = "metrics.csv";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const METRICS_HEADER: &str = "epoch,train_loss,val_miou,switch_prob,lr";

// Independent random streams of one run.
const STREAM_INIT: u64 = 0;
const STREAM_EPISODES: u64 = 1;
const STREAM_VAL: u64 = 2;
const STREAM_ICA: u64 = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f32,
    /// Episodes per optimization step; their gradients are averaged.
    pub batch_size: usize,
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    pub seed: u64,
    /// Also supervise the support branch.
    pub use_dpr: bool,
    /// Overrides the model's attention-fusion switch.
    pub use_fbaf: bool,
    pub use_ica: bool,
    pub ica_p0: f64,
    /// Epochs over which the ICA switch probability halves.
    pub ica_half_life: f64,
    pub val_episodes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2.5e-3,
            batch_size: 8,
            epochs: 180,
            episodes_per_epoch: 200,
            seed: 0,
            use_dpr: true,
            use_fbaf: true,
            use_ica: true,
            ica_p0: 0.25,
            ica_half_life: 45.0,
            val_episodes: 60,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(invalid!(
                "learning rate must be finite and non-negative, got {}",
                self.lr
            ));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.episodes_per_epoch == 0 || self.val_episodes == 0 {
            return Err(invalid!(
                "batch size, epochs, episodes per epoch and validation episodes must be positive"
            ));
        }
        if !(0.0..=1.0).contains(&self.ica_p0) || self.ica_half_life.is_nan() || self.ica_half_life <= 0.0 {
            return Err(invalid!("ICA needs p0 in [0,1] and a positive half-life"));
        }
        Ok(())
    }

    /// The model configuration actually trained: `model` with the fusion
    /// switch taken from this config.
    pub fn resolve_model(&self, model: &ModelConfig) -> ModelConfig {
        ModelConfig {
            fbaf: self.use_fbaf,
            ..model.clone()
        }
    }

    pub fn switch_prob(&self, epoch: usize) -> f64 {
        if self.use_ica {
            switch_prob_schedule(epoch, self.ica_p0, self.ica_half_life)
        } else {
            0.0
        }
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("lr", self.lr.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("episodes_per_epoch", self.episodes_per_epoch.to_string()),
            ("seed", self.seed.to_string()),
            ("use_dpr", self.use_dpr.to_string()),
            ("use_fbaf", self.use_fbaf.to_string()),
            ("use_ica", self.use_ica.to_string()),
            ("ica_p0", self.ica_p0.to_string()),
            ("ica_half_life", self.ica_half_life.to_string()),
            ("val_episodes", self.val_episodes.to_string()),
        ]
    }
}

/// `0.5·CE(query) + 0.5·CE(support)`, or `CE(query)` alone without DPr.
pub fn loss_dual(
    tape: &mut Tape,
    pred: &DualPrediction<Var>,
    gt_query: &[u8],
    gt_support: &[u8],
    use_dpr: bool,
) -> Result<Var> {
    let q = tape.softmax_cross_entropy(pred.query_logits, gt_query)?;
    if !use_dpr {
        return Ok(q);
    }
    let s = tape.softmax_cross_entropy(pred.support_logits, gt_support)?;
    let sum = tape.add(q, s)?;
    Ok(tape.scale(sum, 0.5))
}

/// A prepared training episode: normalized (and possibly augmented) query
/// plus normalized support.
#[derive(Clone, Debug)]
pub struct EpisodeInput<'a> {
    pub query: Tensor,
    pub query_mask: &'a [u8],
    pub support: Tensor,
    pub support_mask: &'a crate::Mask,
}

impl<'a> EpisodeInput<'a> {
    /// Normalized inputs of `episode`'s query and first support.
    pub fn new(ds: &'a Dataset, cfg: &ModelConfig, episode: &Episode) -> Self {
        let q = &ds.samples[episode.query];
        let s = &ds.samples[episode.supports[0]];
        Self {
            query: normalize_image(&q.image, cfg),
            query_mask: q.mask.data(),
            support: normalize_image(&s.image, cfg),
            support_mask: &s.mask,
        }
    }
}

/// Loss and parameter gradients of one episode.
pub fn episode_gradient(
    params: &ModelParams,
    cfg: &ModelConfig,
    input: &EpisodeInput<'_>,
    use_dpr: bool,
) -> Result<(f64, ModelParams)> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let support = Support {
        image: &input.support,
        mask: input.support_mask,
    };
    let pred = forward_dual_graph(&mut tape, &p, cfg, &input.query, &[support])?;
    let loss = loss_dual(&mut tape, &pred, input.query_mask, input.support_mask.data(), use_dpr)?;
    let grads = tape.backward(loss)?;
    Ok((tape.scalar_value(loss), p.gradients(&tape, &grads)))
}

/// Mean loss and mean gradient over a batch. Episodes run in parallel and
/// are reduced in batch order, so the result is independent of the thread
/// count.
pub fn batch_gradient(
    params: &ModelParams,
    cfg: &ModelConfig,
    batch: &[EpisodeInput<'_>],
    use_dpr: bool,
) -> Result<(f64, ModelParams)> {
    if batch.is_empty() {
        return Err(invalid!("empty batch"));
    }
    let parts: Vec<(f64, ModelParams)> = batch
        .par_iter()
        .map(|e| episode_gradient(params, cfg, e, use_dpr))
        .collect::<Result<_>>()?;
    let mut sum = params.zeros_like();
    let mut loss = 0.0;
    for (l, g) in &parts {
        loss += l;
        sum.add_scaled(g, 1.0)?;
    }
    let n = batch.len() as f32;
    let mean = sum.map(|_, t| Tensor::from_fn(t.shape(), |i| t.data()[i] / n));
    Ok((loss / batch.len() as f64, mean))
}

/// Mean dual loss of `params` over fixed episodes, without ICA.
pub fn mean_loss(
    params: &ModelParams,
    cfg: &ModelConfig,
    ds: &Dataset,
    episodes: &[Episode],
    use_dpr: bool,
) -> Result<f64> {
    let inputs: Vec<EpisodeInput<'_>> = episodes.iter().map(|e| EpisodeInput::new(ds, cfg, e)).collect();
    Ok(batch_gradient(params, cfg, &inputs, use_dpr)?.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_miou: f64,
    pub switch_prob: f64,
    pub lr: f32,
}

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6}",
            r.epoch, r.train_loss, r.val_miou, r.switch_prob, r.lr
        );
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: ModelConfig,
    pub params: ModelParams,
    /// Epochs completed.
    pub epoch: usize,
    pub best_val_miou: f64,
    pub best_epoch: usize,
    pub best_params: ModelParams,
    pub metrics: Vec<EpochMetrics>,
}

impl TrainState {
    pub fn best_model(&self) -> SimPropNet {
        SimPropNet {
            config: self.config.clone(),
            params: self.best_params.clone(),
        }
    }

    pub fn last_model(&self) -> SimPropNet {
        SimPropNet {
            config: self.config.clone(),
            params: self.params.clone(),
        }
    }
}

/// Initial weights for a run; shared by training and the untrained baseline.
pub fn initial_model(train: &TrainConfig, model: &ModelConfig) -> Result<SimPropNet> {
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    rng.set_stream(STREAM_INIT);
    SimPropNet::init(train.resolve_model(model), &mut rng)
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Trains on `classes`, validating on their held-out samples after every
/// epoch. With `out_dir`, writes the metrics CSV and the best and last
/// checkpoints there.
pub fn train(
    train_cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    ds: &Dataset,
    classes: &[usize],
    out_dir: Option<&Path>,
) -> Result<TrainState> {
    train_cfg.validate()?;
    let init = initial_model(train_cfg, model_cfg)?;
    let cfg = init.config.clone();
    if cfg.input_size != ds.config().image_size {
        return Err(invalid!(
            "model input size {} does not match the {}-pixel dataset",
            cfg.input_size,
            ds.config().image_size
        ));
    }
    let train_pool = ds.pool(classes, Split::Train)?;
    let val_pool = ds.pool(classes, Split::Val)?;
    let mut val_rng = stream(train_cfg.seed, STREAM_VAL);
    let val_episodes: Vec<Episode> = (0..train_cfg.val_episodes)
        .map(|_| sample_episode(&val_pool, 1, &mut val_rng))
        .collect::<Result<_>>()?;

    let mut episode_rng = stream(train_cfg.seed, STREAM_EPISODES);
    let mut ica_rng = stream(train_cfg.seed, STREAM_ICA);
    let mut state = TrainState {
        config: cfg.clone(),
        params: init.params.clone(),
        epoch: 0,
        best_val_miou: f64::NEG_INFINITY,
        best_epoch: 0,
        best_params: init.params,
        metrics: Vec::with_capacity(train_cfg.epochs),
    };

    for epoch in 0..train_cfg.epochs {
        let switch_prob = train_cfg.switch_prob(epoch);
        let mut loss_sum = 0.0;
        let mut done = 0;
        for (step, start) in (0..train_cfg.episodes_per_epoch)
            .step_by(train_cfg.batch_size)
            .enumerate()
        {
            let n = train_cfg.batch_size.min(train_cfg.episodes_per_epoch - start);
            let batch = next_batch(
                ds,
                &cfg,
                &train_pool,
                n,
                train_cfg.use_ica.then_some(switch_prob),
                &mut episode_rng,
                &mut ica_rng,
            )?;
            let (loss, grads) = batch_gradient(&state.params, &cfg, &batch, train_cfg.use_dpr)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    step,
                    loss: loss as f32,
                });
            }
            crate::model::sgd_step(&mut state.params, &grads, train_cfg.lr)?;
            if !state.params.is_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    step,
                    loss: loss as f32,
                });
            }
            loss_sum += loss * n as f64;
            done += n;
        }

        let model = state.last_model();
        let val = EvalReport::from_results(&run_episodes(&model, ds, &val_episodes)?, 1, train_cfg.seed)?;
        let row = EpochMetrics {
            epoch,
            train_loss: loss_sum / done as f64,
            val_miou: val.mean_iou,
            switch_prob,
            lr: train_cfg.lr,
        };
        log::info!(
            "epoch {epoch}: train_loss {:.4} val_miou {:.4} switch_prob {:.4}",
            row.train_loss,
            row.val_miou,
            row.switch_prob
        );
        if row.val_miou > state.best_val_miou {
            state.best_val_miou = row.val_miou;
            state.best_epoch = epoch;
            state.best_params = state.params.clone();
        }
        state.metrics.push(row);
        state.epoch = epoch + 1;
        if let Some(dir) = out_dir {
            write_outputs(&state, train_cfg, dir)?;
        }
    }
    Ok(state)
}

/// Samples `n` training episodes and prepares their inputs. ICA draws come
/// from their own stream so switching it off leaves the episodes unchanged.
fn next_batch<'a>(
    ds: &'a Dataset,
    cfg: &ModelConfig,
    pool: &SamplePool,
    n: usize,
    switch_prob: Option<f64>,
    episode_rng: &mut ChaCha8Rng,
    ica_rng: &mut ChaCha8Rng,
) -> Result<Vec<EpisodeInput<'a>>> {
    (0..n)
        .map(|_| {
            let e = sample_episode(pool, 1, episode_rng)?;
            let mut input = EpisodeInput::new(ds, cfg, &e);
            if let Some(p) = switch_prob {
                input.query = ica_augment(&input.query, p, ica_rng)?.0;
            }
            Ok(input)
        })
        .collect()
}

fn write_outputs(state: &TrainState, train_cfg: &TrainConfig, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let metrics = dir.join(METRICS_FILE);
    std::fs::write(&metrics, metrics_csv(&state.metrics)).map_err(|e| Error::io(&metrics, e))?;
    let seed = train_cfg.seed.to_string();
    let last = state.metrics.last().map_or(0.0, |m| m.val_miou);
    Checkpoint::new(state.config.clone(), state.best_params.clone())
        .with_meta("epoch", state.best_epoch.to_string())
        .with_meta("val_miou", format!("{:.6}", state.best_val_miou))
        .with_meta("seed", seed.clone())
        .save(&dir.join(BEST_CHECKPOINT))?;
    Checkpoint::new(state.config.clone(), state.params.clone())
        .with_meta("epoch", (state.epoch - 1).to_string())
        .with_meta("val_miou", format!("{last:.6}"))
        .with_meta("seed", seed)
        .save(&dir.join(LAST_CHECKPOINT))
}
