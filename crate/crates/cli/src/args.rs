use std::path::PathBuf;

use clap::{ArgAction, Args, Parser, Subcommand};
use simprop::data::SyntheticConfig;
use simprop::model::ModelConfig;
use simprop::train::TrainConfig;

/// Few-shot segmentation by similarity propagation on a synthetic
/// episodic benchmark.
#[derive(Debug, Parser)]
#[command(name = "simprop", version)]
pub struct Cli {
    /// Master seed for data generation, initialization, episode sampling
    /// and evaluation.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// Worker threads; 0 uses every core. SIMPROP_THREADS takes precedence.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset and its manifest.
    GenData(GenDataArgs),
    /// Train a model episodically and write checkpoints and metrics.
    Train(TrainArgs),
    /// Segment one query image given annotated supports.
    Predict(PredictArgs),
    /// Evaluate a checkpoint on test-class episodes.
    Eval(EvalArgs),
    /// Train and evaluate the five component ablations.
    Ablate(AblateArgs),
    /// Run the premise-validation measurements.
    Premise(PremiseArgs),
    /// Verify every gradient against finite differences.
    GradCheck(GradCheckArgs),
}

#[derive(Debug, Args)]
pub struct DataFlags {
    /// Image side length in pixels.
    #[arg(long, default_value_t = 64)]
    pub image_size: usize,
    #[arg(long, default_value_t = 5)]
    pub n_classes: usize,
    #[arg(long, default_value_t = 200)]
    pub samples_per_class: usize,
    /// Held-out classes, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = [0usize, 1])]
    pub test_classes: Vec<usize>,
    /// Smallest object radius, as a fraction of the image side.
    #[arg(long, default_value_t = 0.15)]
    pub radius_min: f32,
    /// Largest object radius, as a fraction of the image side.
    #[arg(long, default_value_t = 0.3)]
    pub radius_max: f32,
    /// Amplitude of the smooth background noise.
    #[arg(long, default_value_t = 0.15)]
    pub bg_noise: f32,
    /// Per-pixel noise on objects.
    #[arg(long, default_value_t = 0.05)]
    pub fg_noise: f32,
    /// Object hue jitter around the class hue, in turns.
    #[arg(long, default_value_t = 0.08)]
    pub hue_jitter: f32,
    /// Tint backgrounds per class instead of per image.
    #[arg(long)]
    pub correlated_bg: bool,
    /// Unlabelled objects of other classes per image.
    #[arg(long, default_value_t = 0)]
    pub distractors: usize,
}

impl DataFlags {
    pub fn config(&self) -> SyntheticConfig {
        let mut test_classes = self.test_classes.clone();
        test_classes.sort_unstable();
        SyntheticConfig {
            image_size: self.image_size,
            n_classes: self.n_classes,
            samples_per_class: self.samples_per_class,
            test_classes,
            radius_min: self.radius_min,
            radius_max: self.radius_max,
            bg_noise: self.bg_noise,
            fg_noise: self.fg_noise,
            hue_jitter: self.hue_jitter,
            correlated_bg: self.correlated_bg,
            distractors: self.distractors,
        }
    }
}

#[derive(Debug, Args)]
pub struct ModelFlags {
    /// Network input size; defaults to the dataset's image size.
    #[arg(long)]
    pub input_size: Option<usize>,
    /// Widths of the three pooled encoder blocks.
    #[arg(long, value_delimiter = ',', default_values_t = [16usize, 32, 32])]
    pub encoder_channels: Vec<usize>,
    /// Width of the feature map and of the probe vectors.
    #[arg(long, default_value_t = 32)]
    pub feature_channels: usize,
    /// Width of the fusion convs; must be twice the feature width.
    #[arg(long, default_value_t = 64)]
    pub fusion_channels: usize,
    #[arg(long, default_value_t = 32)]
    pub decoder_channels: usize,
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 2, 4, 8])]
    pub aspp_rates: Vec<usize>,
    /// Use the unnormalized masked average instead of the weighted mean.
    #[arg(long)]
    pub map_raw: bool,
    #[arg(long, default_value_t = 0.5)]
    pub pixel_mean: f32,
    #[arg(long, default_value_t = 0.25)]
    pub pixel_std: f32,
}

impl ModelFlags {
    /// The model configuration; attention fusion is set by the training
    /// flags.
    pub fn config(&self, image_size: usize) -> ModelConfig {
        ModelConfig {
            input_size: self.input_size.unwrap_or(image_size),
            encoder_channels: self.encoder_channels.clone(),
            feature_channels: self.feature_channels,
            fusion_channels: self.fusion_channels,
            decoder_channels: self.decoder_channels,
            aspp_rates: self.aspp_rates.clone(),
            map_raw: self.map_raw,
            pixel_mean: self.pixel_mean,
            pixel_std: self.pixel_std,
            ..ModelConfig::default()
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainFlags {
    #[arg(long, default_value_t = 2.5e-3)]
    pub lr: f32,
    /// Episodes per SGD step.
    #[arg(long = "batch", default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 180)]
    pub epochs: usize,
    #[arg(long, default_value_t = 200)]
    pub episodes_per_epoch: usize,
    /// Validation episodes drawn from held-out training-class samples.
    #[arg(long, default_value_t = 60)]
    pub val_episodes: usize,
    #[command(flatten)]
    pub components: ComponentFlags,
}

#[derive(Debug, Args)]
pub struct ComponentFlags {
    /// Supervise the support-mask prediction as well.
    #[arg(long, default_value_t = true, action = ArgAction::Set)]
    pub dpr: bool,
    /// Fuse foreground/background attention maps.
    #[arg(long, default_value_t = true, action = ArgAction::Set)]
    pub fbaf: bool,
    /// Randomly average query channels during training.
    #[arg(long, default_value_t = true, action = ArgAction::Set)]
    pub ica: bool,
    /// Initial channel-averaging probability.
    #[arg(long, default_value_t = 0.25)]
    pub ica_p0: f64,
    /// Epochs over which the channel-averaging probability halves.
    #[arg(long, default_value_t = 45.0)]
    pub ica_half_life: f64,
}

impl TrainFlags {
    pub fn config(&self, seed: u64) -> TrainConfig {
        let c = &self.components;
        TrainConfig {
            lr: self.lr,
            batch_size: self.batch_size,
            epochs: self.epochs,
            episodes_per_epoch: self.episodes_per_epoch,
            seed,
            use_dpr: c.dpr,
            use_fbaf: c.fbaf,
            use_ica: c.ica,
            ica_p0: c.ica_p0,
            ica_half_life: c.ica_half_life,
            val_episodes: self.val_episodes,
        }
    }
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub data: DataFlags,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for checkpoints and metrics.
    #[arg(long)]
    pub out: PathBuf,
    /// Train on every class instead of the training classes only.
    #[arg(long)]
    pub all_classes: bool,
    #[command(flatten)]
    pub model: ModelFlags,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Query image (PPM).
    #[arg(long)]
    pub query: PathBuf,
    /// Support images (PPM).
    #[arg(long, num_args = 1.., required = true)]
    pub supports: Vec<PathBuf>,
    /// Support masks (PGM), one per support image.
    #[arg(long, num_args = 1.., required = true)]
    pub support_masks: Vec<PathBuf>,
    /// Where to write the predicted mask (PGM).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint to evaluate.
    #[arg(long, required_unless_present = "oracle")]
    pub checkpoint: Option<PathBuf>,
    /// Evaluate a predictor that returns the ground truth.
    #[arg(long)]
    pub oracle: bool,
    /// Shots per episode.
    #[arg(long, default_value_t = 1)]
    pub k: usize,
    #[arg(long, default_value_t = 1000)]
    pub episodes: usize,
    /// Classes to evaluate; defaults to the dataset's test classes.
    #[arg(long, value_delimiter = ',')]
    pub classes: Option<Vec<usize>>,
    /// Report path; printed to standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Directory for predicted masks and their index.
    #[arg(long)]
    pub dump_predictions: Option<PathBuf>,
    /// Accepted for symmetry with training; evaluation never augments.
    #[arg(long, action = ArgAction::Set)]
    pub ica: Option<bool>,
}

#[derive(Debug, Args)]
pub struct ProtocolFlags {
    /// Shots per test episode.
    #[arg(long, default_value_t = 1)]
    pub k: usize,
    /// Test episodes per evaluation.
    #[arg(long, default_value_t = 1000)]
    pub eval_episodes: usize,
    /// Samples in the identical-input test.
    #[arg(long, default_value_t = 300)]
    pub identical_n: usize,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory; one subdirectory per variant plus ablation.csv.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub protocol: ProtocolFlags,
    #[command(flatten)]
    pub model: ModelFlags,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct PremiseArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// The few-shot model under test.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Fully supervised reference; trained on every class when absent.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// Same-class pairs for the similarity measurements.
    #[arg(long, default_value_t = 100)]
    pub pairs: usize,
    #[command(flatten)]
    pub protocol: ProtocolFlags,
    #[command(flatten)]
    pub model: ModelFlags,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    /// Input size of the end-to-end instance.
    #[arg(long, default_value_t = 32)]
    pub size: usize,
}
