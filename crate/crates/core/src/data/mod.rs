//! Synthetic few-shot segmentation data: generation, file formats, episode
//! sampling and input channel averaging.

mod episode;
pub mod pnm;
pub mod shapes;

pub use episode::{ica_augment, sample_episode, switch_prob_schedule, Episode, SamplePool};

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::mask::Mask;
use crate::tensor::Tensor;
use shapes::{render, RenderParams};

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const MANIFEST_FORMAT: &str = "simprop-manifest-1";

/// Test classes of `fold`: `{(fold·n_test + i) mod n_classes}`.
pub fn fold_test_classes(n_classes: usize, n_test: usize, fold: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (0..n_test).map(|i| (fold * n_test + i) % n_classes).collect();
    out.sort_unstable();
    out.dedup();
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub image_size: usize,
    pub n_classes: usize,
    pub samples_per_class: usize,
    /// Held-out classes; every other class is a training class.
    pub test_classes: Vec<usize>,
    /// Object radius range, as fractions of the image side.
    pub radius_min: f32,
    pub radius_max: f32,
    pub bg_noise: f32,
    pub fg_noise: f32,
    pub hue_jitter: f32,
    pub correlated_bg: bool,
    /// Objects of other classes from the same side of the train/test split
    /// drawn into each image as unlabelled background.
    pub distractors: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            n_classes: 5,
            samples_per_class: 200,
            test_classes: fold_test_classes(5, 2, 0),
            radius_min: 0.15,
            radius_max: 0.3,
            bg_noise: 0.15,
            fg_noise: 0.05,
            hue_jitter: 0.08,
            correlated_bg: false,
            distractors: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn train_classes(&self) -> Vec<usize> {
        (0..self.n_classes).filter(|c| !self.test_classes.contains(c)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 {
            return Err(invalid!("image_size {} is too small", self.image_size));
        }
        if !(2..=shapes::SHAPES.len()).contains(&self.n_classes) {
            return Err(invalid!("n_classes must be in 2..={}", shapes::SHAPES.len()));
        }
        if self.samples_per_class < 2 {
            return Err(invalid!("samples_per_class must be at least 2"));
        }
        let mut sorted = self.test_classes.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted != self.test_classes {
            return Err(invalid!(
                "test_classes must be sorted and unique: {:?}",
                self.test_classes
            ));
        }
        if sorted.is_empty() || sorted.len() >= self.n_classes || sorted.iter().any(|&c| c >= self.n_classes) {
            return Err(invalid!(
                "test_classes {:?} must be a nonempty proper subset of 0..{}",
                self.test_classes,
                self.n_classes
            ));
        }
        if !(0.0 < self.radius_min && self.radius_min <= self.radius_max && self.radius_max <= 0.5) {
            return Err(invalid!(
                "radius range [{}, {}] is invalid",
                self.radius_min,
                self.radius_max
            ));
        }
        for (name, v) in [
            ("bg_noise", self.bg_noise),
            ("fg_noise", self.fg_noise),
            ("hue_jitter", self.hue_jitter),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(invalid!("{name} {v} is outside [0,1]"));
            }
        }
        Ok(())
    }

    fn render_params(&self) -> RenderParams {
        RenderParams {
            size: self.image_size,
            radius: (self.radius_min, self.radius_max),
            bg_noise: self.bg_noise,
            fg_noise: self.fg_noise,
            hue_jitter: self.hue_jitter,
            correlated_bg: self.correlated_bg,
            distractors: self.distractors,
        }
    }

    /// Classes a sample of `class` may show as distractors: the other
    /// classes on its side of the split, so test classes never appear in
    /// training images.
    pub fn distractor_classes(&self, class: usize) -> Vec<usize> {
        let test = self.test_classes.contains(&class);
        (0..self.n_classes)
            .filter(|&c| c != class && self.test_classes.contains(&c) == test)
            .collect()
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let classes = self
            .test_classes
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join(",");
        vec![
            ("image_size", self.image_size.to_string()),
            ("n_classes", self.n_classes.to_string()),
            ("samples_per_class", self.samples_per_class.to_string()),
            ("test_classes", classes),
            ("radius_min", self.radius_min.to_string()),
            ("radius_max", self.radius_max.to_string()),
            ("bg_noise", self.bg_noise.to_string()),
            ("fg_noise", self.fg_noise.to_string()),
            ("hue_jitter", self.hue_jitter.to_string()),
            ("correlated_bg", self.correlated_bg.to_string()),
            ("distractors", self.distractors.to_string()),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Record {
    pub sample_id: usize,
    pub class_id: usize,
    /// Paths relative to the dataset root.
    pub image: String,
    pub mask: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub config: SyntheticConfig,
    pub seed: u64,
    pub records: Vec<Record>,
}

fn manifest_err(detail: impl Into<String>) -> Error {
    Error::Format {
        what: "manifest",
        detail: detail.into(),
    }
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "format={MANIFEST_FORMAT}");
        let _ = writeln!(out, "seed={}", self.seed);
        for (k, v) in self.config.to_pairs() {
            let _ = writeln!(out, "{k}={v}");
        }
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(out, "{}\t{}\t{}\t{}", r.sample_id, r.class_id, r.image, r.mask);
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let (header, body) = text
            .split_once("\n\n")
            .ok_or_else(|| manifest_err("missing blank line after header"))?;
        let mut kv = BTreeMap::new();
        for line in header.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| manifest_err(format!("header line `{line}` lacks `=`")))?;
            if kv.insert(k, v).is_some() {
                return Err(manifest_err(format!("duplicate header key `{k}`")));
            }
        }
        let mut take = |k: &str| {
            kv.remove(k)
                .ok_or_else(|| manifest_err(format!("header key `{k}` missing")))
        };
        if take("format")? != MANIFEST_FORMAT {
            return Err(manifest_err("unsupported manifest format"));
        }
        fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| manifest_err(format!("bad value `{v}` for `{k}`")))
        }
        let seed = num("seed", take("seed")?)?;
        let test_classes = take("test_classes")?
            .split(',')
            .map(|c| num("test_classes", c))
            .collect::<Result<Vec<usize>>>()?;
        let config = SyntheticConfig {
            image_size: num("image_size", take("image_size")?)?,
            n_classes: num("n_classes", take("n_classes")?)?,
            samples_per_class: num("samples_per_class", take("samples_per_class")?)?,
            test_classes,
            radius_min: num("radius_min", take("radius_min")?)?,
            radius_max: num("radius_max", take("radius_max")?)?,
            bg_noise: num("bg_noise", take("bg_noise")?)?,
            fg_noise: num("fg_noise", take("fg_noise")?)?,
            hue_jitter: num("hue_jitter", take("hue_jitter")?)?,
            correlated_bg: num("correlated_bg", take("correlated_bg")?)?,
            distractors: num("distractors", take("distractors")?)?,
        };
        if let Some(k) = kv.keys().next() {
            return Err(manifest_err(format!("unknown header key `{k}`")));
        }
        config.validate()?;

        let mut records = Vec::new();
        for line in body.lines() {
            let f: Vec<&str> = line.split('\t').collect();
            let [id, class, image, mask] = f[..] else {
                return Err(manifest_err(format!("record `{line}` needs four tab-separated fields")));
            };
            let r = Record {
                sample_id: num("sample_id", id)?,
                class_id: num("class_id", class)?,
                image: image.to_string(),
                mask: mask.to_string(),
            };
            if r.class_id >= config.n_classes {
                return Err(manifest_err(format!("sample {} has class {}", r.sample_id, r.class_id)));
            }
            records.push(r);
        }
        let mut ids: Vec<usize> = records.iter().map(|r| r.sample_id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(manifest_err("duplicate sample ids"));
        }
        Ok(Self { config, seed, records })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Format { what, detail } => Error::Format {
                what,
                detail: format!("{}: {detail}", path.display()),
            },
            other => other,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        pnm::write(path, self.to_text().as_bytes())
    }
}

/// Per-sample generator stream, independent of generation order and
/// thread count.
pub fn sample_rng(seed: u64, sample_id: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(sample_id as u64);
    rng
}

/// Renders every sample and writes images, masks and the manifest under
/// `out_dir`.
pub fn generate_dataset(config: &SyntheticConfig, seed: u64, out_dir: &Path) -> Result<Manifest> {
    config.validate()?;
    let params = config.render_params();
    let n = config.n_classes * config.samples_per_class;
    let records: Vec<Record> = (0..n)
        .into_par_iter()
        .map(|sample_id| -> Result<Record> {
            let class_id = sample_id / config.samples_per_class;
            let mut rng = sample_rng(seed, sample_id);
            let (image, mask) = render(&mut rng, class_id, &config.distractor_classes(class_id), &params)?;
            let r = Record {
                sample_id,
                class_id,
                image: format!("images/{sample_id:05}.ppm"),
                mask: format!("masks/{sample_id:05}.pgm"),
            };
            pnm::save_image(&out_dir.join(&r.image), &image)?;
            pnm::save_mask(&out_dir.join(&r.mask), &mask)?;
            Ok(r)
        })
        .collect::<Result<_>>()?;
    let manifest = Manifest {
        config: config.clone(),
        seed,
        records,
    };
    manifest.write(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    /// `3×H×W`, values in `[0,1]`.
    pub image: Tensor,
    pub mask: Mask,
    pub class_id: usize,
    pub sample_id: usize,
}

pub fn load_sample(image: &Path, mask: &Path) -> Result<(Tensor, Mask)> {
    let img = pnm::load_image(image)?;
    let m = pnm::load_mask(mask)?;
    let (_, h, w) = img.chw()?;
    if (h, w) != (m.height(), m.width()) {
        return Err(invalid!(
            "{} is {h}×{w} but {} is {}×{}",
            image.display(),
            mask.display(),
            m.height(),
            m.width()
        ));
    }
    Ok((img, m))
}

pub fn save_sample(sample: &ImageSample, image: &Path, mask: &Path) -> Result<()> {
    pnm::save_image(image, &sample.image)?;
    pnm::save_mask(mask, &sample.mask)
}

/// Which samples of a class an episode stream may draw from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    All,
    /// Every sample except the per-class validation hold-out.
    Train,
    /// The last tenth (at least two) of each class, by sample id.
    Val,
}

/// A loaded dataset with every sample in memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub samples: Vec<ImageSample>,
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Self> {
        let manifest = Manifest::read(&root.join(MANIFEST_FILE))?;
        let size = manifest.config.image_size;
        let samples = manifest
            .records
            .par_iter()
            .map(|r| {
                let (image, mask) = load_sample(&root.join(&r.image), &root.join(&r.mask))?;
                if mask.height() != size || mask.width() != size {
                    return Err(invalid!("sample {} is not {size}×{size}", r.sample_id));
                }
                if mask.count() == 0 || mask.count() == mask.len() {
                    return Err(invalid!("sample {} mask is empty or full", r.sample_id));
                }
                Ok(ImageSample {
                    image,
                    mask,
                    class_id: r.class_id,
                    sample_id: r.sample_id,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
            samples,
        })
    }

    pub fn config(&self) -> &SyntheticConfig {
        &self.manifest.config
    }

    /// Sample indices per class, restricted to `classes` and `split`.
    pub fn pool(&self, classes: &[usize], split: Split) -> Result<SamplePool> {
        let mut by_class: BTreeMap<usize, Vec<usize>> = classes.iter().map(|&c| (c, Vec::new())).collect();
        for (i, s) in self.samples.iter().enumerate() {
            if let Some(v) = by_class.get_mut(&s.class_id) {
                v.push(i);
            }
        }
        for (class, idx) in by_class.iter_mut() {
            idx.sort_by_key(|&i| self.samples[i].sample_id);
            let hold = (idx.len() / 10).max(2).min(idx.len());
            match split {
                Split::All => {}
                Split::Train => idx.truncate(idx.len() - hold),
                Split::Val => {
                    idx.drain(..idx.len() - hold);
                }
            }
            if idx.is_empty() {
                return Err(invalid!("class {class} has no samples in the {split:?} split"));
            }
        }
        SamplePool::new(by_class)
    }
}
