//! Evaluation protocols and the premise-validation measurements.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::pnm::{save_mask, write};
use crate::data::{sample_episode, Dataset, Episode, ImageSample, SamplePool, Split};
use crate::error::{invalid, shape_err, Result};
use crate::mask::Mask;
use crate::model::{downsample_mask, normalize_image, probes_of, ModelConfig, SimPropNet};
use crate::tensor::Tensor;
use crate::train::{train, TrainConfig};

/// Anything that maps a query and its annotated supports to a mask.
pub trait Segmenter: Sync {
    fn segment(&self, query: &ImageSample, supports: &[&ImageSample]) -> Result<Mask>;
}

impl Segmenter for SimPropNet {
    fn segment(&self, query: &ImageSample, supports: &[&ImageSample]) -> Result<Mask> {
        let pairs: Vec<(&Tensor, &Mask)> = supports.iter().map(|s| (&s.image, &s.mask)).collect();
        self.predict(&query.image, &pairs)
    }
}

/// Returns the ground-truth query mask.
pub struct Oracle;

impl Segmenter for Oracle {
    fn segment(&self, query: &ImageSample, _: &[&ImageSample]) -> Result<Mask> {
        Ok(query.mask.clone())
    }
}

/// Predicts background everywhere.
pub struct AllBackground;

impl Segmenter for AllBackground {
    fn segment(&self, query: &ImageSample, _: &[&ImageSample]) -> Result<Mask> {
        Ok(Mask::zeros(query.mask.height(), query.mask.width()))
    }
}

/// Intersection and union pixel counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Overlap {
    pub intersection: u64,
    pub union: u64,
}

impl Overlap {
    pub fn of(pred: &Mask, gt: &Mask) -> Result<Self> {
        if !pred.same_dims(gt) {
            return Err(shape_err!(
                "prediction {}×{} vs ground truth {}×{}",
                pred.height(),
                pred.width(),
                gt.height(),
                gt.width()
            ));
        }
        let (mut i, mut u) = (0u64, 0u64);
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            i += (p & g) as u64;
            u += (p | g) as u64;
        }
        Ok(Self {
            intersection: i,
            union: u,
        })
    }

    /// Ratio, with an empty union counting as a perfect match.
    pub fn iou(&self) -> f64 {
        if self.union == 0 {
            1.0
        } else {
            self.intersection as f64 / self.union as f64
        }
    }

    fn add(&mut self, o: Overlap) {
        self.intersection += o.intersection;
        self.union += o.union;
    }
}

/// `|pred ∧ gt| / |pred ∨ gt|`, 1 when both are empty.
pub fn iou(pred: &Mask, gt: &Mask) -> Result<f64> {
    Ok(Overlap::of(pred, gt)?.iou())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeResult {
    pub class_id: usize,
    pub prediction: Mask,
    pub fg: Overlap,
    pub bg: Overlap,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// `(class, accumulated foreground IoU)` in ascending class order.
    pub per_class: Vec<(usize, f64)>,
    pub mean_iou: f64,
    /// Mean over episodes of the foreground and background IoU average.
    pub fgbg_iou: f64,
    pub n_episodes: usize,
    pub k: usize,
    pub seed: u64,
}

impl EvalReport {
    pub fn from_results(results: &[EpisodeResult], k: usize, seed: u64) -> Result<Self> {
        if results.is_empty() {
            return Err(invalid!("no episodes to evaluate"));
        }
        let mut acc: BTreeMap<usize, Overlap> = BTreeMap::new();
        let mut fgbg = 0.0;
        for r in results {
            acc.entry(r.class_id).or_default().add(r.fg);
            fgbg += (r.fg.iou() + r.bg.iou()) / 2.0;
        }
        let per_class: Vec<(usize, f64)> = acc.into_iter().map(|(c, o)| (c, o.iou())).collect();
        let mean_iou = per_class.iter().map(|(_, v)| v).sum::<f64>() / per_class.len() as f64;
        Ok(Self {
            per_class,
            mean_iou,
            fgbg_iou: fgbg / results.len() as f64,
            n_episodes: results.len(),
            k,
            seed,
        })
    }

    /// Header plus one row; per-class columns follow in class order.
    pub fn to_csv(&self) -> String {
        let mut header = String::from("k,n_episodes,seed,mean_iou,fgbg_iou");
        let mut row = format!(
            "{},{},{},{:.6},{:.6}",
            self.k, self.n_episodes, self.seed, self.mean_iou, self.fgbg_iou
        );
        for (c, v) in &self.per_class {
            let _ = write!(header, ",class_{c}_iou");
            let _ = write!(row, ",{v:.6}");
        }
        format!("{header}\n{row}\n")
    }
}

/// Segments every episode; work fans out over the current thread pool and
/// results come back in episode order.
pub fn run_episodes(seg: &dyn Segmenter, ds: &Dataset, episodes: &[Episode]) -> Result<Vec<EpisodeResult>> {
    episodes
        .par_iter()
        .map(|e| {
            let query = &ds.samples[e.query];
            let supports: Vec<&ImageSample> = e.supports.iter().map(|&i| &ds.samples[i]).collect();
            let prediction = seg.segment(query, &supports)?;
            let fg = Overlap::of(&prediction, &query.mask)?;
            let bg = Overlap::of(&prediction.complement(), &query.mask.complement())?;
            Ok(EpisodeResult {
                class_id: e.class_id,
                prediction,
                fg,
                bg,
            })
        })
        .collect()
}

/// `n` episodes of `k` shots drawn from `pool` with a seeded generator.
pub fn sample_episodes(pool: &SamplePool, k: usize, n: usize, seed: u64) -> Result<Vec<Episode>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| sample_episode(pool, k, &mut rng)).collect()
}

/// Accumulated mIoU and FG-BG IoU over `n_episodes` episodes of the given
/// classes.
pub fn evaluate(
    seg: &dyn Segmenter,
    ds: &Dataset,
    classes: &[usize],
    k: usize,
    n_episodes: usize,
    seed: u64,
) -> Result<EvalReport> {
    let pool = ds.pool(classes, Split::All)?;
    let episodes = sample_episodes(&pool, k, n_episodes, seed)?;
    EvalReport::from_results(&run_episodes(seg, ds, &episodes)?, k, seed)
}

/// Episodes whose single support is the query itself.
pub fn identical_input_episodes(ds: &Dataset, classes: &[usize], n: usize, seed: u64) -> Result<Vec<Episode>> {
    let pool = ds.pool(classes, Split::All)?;
    let class_list = pool.classes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let class_id = class_list[rng.gen_range(0..class_list.len())];
            let members = pool.samples(class_id);
            let i = members[rng.gen_range(0..members.len())];
            Episode {
                class_id,
                query: i,
                supports: vec![i],
            }
        })
        .collect())
}

/// Mean IoU when the support pair is the query image with its own mask.
pub fn identical_input_test(seg: &dyn Segmenter, ds: &Dataset, classes: &[usize], n: usize, seed: u64) -> Result<f64> {
    let episodes = identical_input_episodes(ds, classes, n, seed)?;
    Ok(EvalReport::from_results(&run_episodes(seg, ds, &episodes)?, 1, seed)?.mean_iou)
}

/// Error-set overlap between a few-shot prediction `a` and a reference
/// prediction `b`. Counts accumulate over a whole dataset.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OverlapCounts {
    pub fn_both: u64,
    pub fn_either: u64,
    pub fp_both: u64,
    pub fp_either: u64,
    pub a: Overlap,
    pub b: Overlap,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OverlapStats {
    pub fn_overlap_pct: f64,
    pub fp_overlap_pct: f64,
    /// `100·(IoU_b − IoU_a)`.
    pub tp_gap_pct: f64,
}

impl OverlapCounts {
    pub fn of(pred_a: &Mask, pred_b: &Mask, gt: &Mask) -> Result<Self> {
        if !pred_a.same_dims(gt) || !pred_b.same_dims(gt) {
            return Err(shape_err!("error_overlap masks differ in size"));
        }
        let mut c = OverlapCounts {
            a: Overlap::of(pred_a, gt)?,
            b: Overlap::of(pred_b, gt)?,
            ..Default::default()
        };
        for ((&a, &b), &g) in pred_a.data().iter().zip(pred_b.data()).zip(gt.data()) {
            let (fn_a, fn_b) = (g == 1 && a == 0, g == 1 && b == 0);
            let (fp_a, fp_b) = (g == 0 && a == 1, g == 0 && b == 1);
            c.fn_both += (fn_a && fn_b) as u64;
            c.fn_either += (fn_a || fn_b) as u64;
            c.fp_both += (fp_a && fp_b) as u64;
            c.fp_either += (fp_a || fp_b) as u64;
        }
        Ok(c)
    }

    pub fn add(&mut self, o: &OverlapCounts) {
        self.fn_both += o.fn_both;
        self.fn_either += o.fn_either;
        self.fp_both += o.fp_both;
        self.fp_either += o.fp_either;
        self.a.add(o.a);
        self.b.add(o.b);
    }

    pub fn stats(&self) -> OverlapStats {
        let pct = |both: u64, either: u64| {
            if either == 0 {
                0.0
            } else {
                100.0 * both as f64 / either as f64
            }
        };
        OverlapStats {
            fn_overlap_pct: pct(self.fn_both, self.fn_either),
            fp_overlap_pct: pct(self.fp_both, self.fp_either),
            tp_gap_pct: 100.0 * (self.b.iou() - self.a.iou()),
        }
    }
}

/// Per-image error overlap of `pred_a` against the reference `pred_b`.
pub fn error_overlap(pred_a: &Mask, pred_b: &Mask, gt: &Mask) -> Result<OverlapStats> {
    Ok(OverlapCounts::of(pred_a, pred_b, gt)?.stats())
}

/// Dataset-level error overlap of two segmenters on the same episodes.
pub fn error_overlap_dataset(
    a: &dyn Segmenter,
    b: &dyn Segmenter,
    ds: &Dataset,
    episodes: &[Episode],
) -> Result<OverlapStats> {
    let ra = run_episodes(a, ds, episodes)?;
    let rb = run_episodes(b, ds, episodes)?;
    let mut total = OverlapCounts::default();
    for ((e, x), y) in episodes.iter().zip(&ra).zip(&rb) {
        total.add(&OverlapCounts::of(
            &x.prediction,
            &y.prediction,
            &ds.samples[e.query].mask,
        )?);
    }
    Ok(total.stats())
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(&x, &y)| x as f64 * y as f64).sum()
}

fn cosine(a: &Tensor, b: &Tensor) -> f64 {
    let d = dot(a, b);
    let n = (dot(a, a) * dot(b, b)).sqrt();
    if n == 0.0 {
        0.0
    } else {
        (d / n).clamp(-1.0, 1.0)
    }
}

/// Mask-weighted mean of the model's features of `image` over `region`;
/// the zero vector when the region is empty.
fn region_probe(features: &Tensor, region: &Mask) -> Result<Tensor> {
    let (_, h, w) = features.chw()?;
    let soft = downsample_mask(region, h, w)?;
    Ok(probes_of(features, &soft, false)?.fg)
}

fn features(net: &SimPropNet, s: &ImageSample) -> Result<Tensor> {
    net.encode(&normalize_image(&s.image, &net.config))
}

/// Same-class pairs `(a, b)` with `a ≠ b`, classes visited round-robin.
fn sample_pairs(pool: &SamplePool, n_pairs: usize, seed: u64) -> Result<Vec<(usize, usize, usize)>> {
    let classes = pool.classes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_pairs)
        .map(|i| {
            let c = classes[i % classes.len()];
            let m = pool.samples(c);
            if m.len() < 2 {
                return Err(invalid!("class {c} needs two samples for a pair"));
            }
            let p = sample(&mut rng, m.len(), 2);
            Ok((c, m[p.index(0)], m[p.index(1)]))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct RatioStats {
    pub mean: f64,
    pub std: f64,
    pub used: usize,
    pub skipped: usize,
}

/// For same-class pairs, `(Z^e(A)·Z^e(B)) / (Z^g(A)·Z^g(B))` with raw dot
/// products of `net`'s features. `seg` segments each image with the other
/// as support; `Z^e` pools over its mispredicted pixels and `Z^g` over the
/// ground truth.
pub fn map_similarity_ratio(
    seg: &dyn Segmenter,
    net: &SimPropNet,
    ds: &Dataset,
    classes: &[usize],
    n_pairs: usize,
    seed: u64,
) -> Result<RatioStats> {
    let pool = ds.pool(classes, Split::All)?;
    let pairs = sample_pairs(&pool, n_pairs, seed)?;
    let ratios: Vec<Option<f64>> = pairs
        .par_iter()
        .map(|&(_, a, b)| -> Result<Option<f64>> {
            let (sa, sb) = (&ds.samples[a], &ds.samples[b]);
            let pa = seg.segment(sa, &[sb])?;
            let pb = seg.segment(sb, &[sa])?;
            let ea = pa.zip_with(&sa.mask, |p, g| p != g)?;
            let eb = pb.zip_with(&sb.mask, |p, g| p != g)?;
            if ea.count() == 0 || eb.count() == 0 {
                return Ok(None);
            }
            let (fa, fb) = (features(net, sa)?, features(net, sb)?);
            let num = dot(&region_probe(&fa, &ea)?, &region_probe(&fb, &eb)?);
            let den = dot(&region_probe(&fa, &sa.mask)?, &region_probe(&fb, &sb.mask)?);
            Ok((den.abs() >= 1e-8).then(|| num / den))
        })
        .collect::<Result<_>>()?;
    let used: Vec<f64> = ratios.iter().flatten().copied().collect();
    if used.is_empty() {
        return Err(invalid!("all {n_pairs} pairs were skipped"));
    }
    let mean = used.iter().sum::<f64>() / used.len() as f64;
    let var = used.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / used.len() as f64;
    Ok(RatioStats {
        mean,
        std: var.sqrt(),
        used: used.len(),
        skipped: ratios.len() - used.len(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassSimilarity {
    pub class_id: usize,
    pub fg_cos: f64,
    pub bg_cos: f64,
    pub pairs: usize,
}

/// Mean cosine similarity between same-class images' foreground probes and
/// between their background probes, per class.
pub fn fgbg_similarity_stats(
    net: &SimPropNet,
    ds: &Dataset,
    classes: &[usize],
    n_pairs: usize,
    seed: u64,
) -> Result<Vec<ClassSimilarity>> {
    let pool = ds.pool(classes, Split::All)?;
    let pairs = sample_pairs(&pool, n_pairs, seed)?;
    let sims: Vec<(usize, f64, f64)> = pairs
        .par_iter()
        .map(|&(c, a, b)| {
            let (sa, sb) = (&ds.samples[a], &ds.samples[b]);
            let (fg, bg) = pair_similarity(net, sa, sb)?;
            Ok((c, fg, bg))
        })
        .collect::<Result<_>>()?;
    let mut acc: BTreeMap<usize, (f64, f64, usize)> = BTreeMap::new();
    for (c, fg, bg) in sims {
        let e = acc.entry(c).or_default();
        e.0 += fg;
        e.1 += bg;
        e.2 += 1;
    }
    Ok(acc
        .into_iter()
        .map(|(class_id, (fg, bg, n))| ClassSimilarity {
            class_id,
            fg_cos: fg / n as f64,
            bg_cos: bg / n as f64,
            pairs: n,
        })
        .collect())
}

/// `(cos(Z^f_a, Z^f_b), cos(Z^b_a, Z^b_b))` for two annotated images.
pub fn pair_similarity(net: &SimPropNet, a: &ImageSample, b: &ImageSample) -> Result<(f64, f64)> {
    let (fa, fb) = (features(net, a)?, features(net, b)?);
    let fg = cosine(&region_probe(&fa, &a.mask)?, &region_probe(&fb, &b.mask)?);
    let bg = cosine(
        &region_probe(&fa, &a.mask.complement())?,
        &region_probe(&fb, &b.mask.complement())?,
    );
    Ok((fg, bg))
}

pub const PREDICTIONS_MANIFEST: &str = "predictions.manifest";

/// Writes each predicted mask as `NNNNN.pgm` under `dir` with an index of
/// `file, class, query sample, support samples` lines.
pub fn dump_predictions(ds: &Dataset, episodes: &[Episode], results: &[EpisodeResult], dir: &Path) -> Result<()> {
    if episodes.len() != results.len() {
        return Err(invalid!("{} episodes but {} results", episodes.len(), results.len()));
    }
    let mut index = String::from("file\tclass_id\tquery\tsupports\n");
    for (i, (e, r)) in episodes.iter().zip(results).enumerate() {
        let name = format!("{i:05}.pgm");
        save_mask(&dir.join(&name), &r.prediction)?;
        let supports: Vec<String> = e
            .supports
            .iter()
            .map(|&s| ds.samples[s].sample_id.to_string())
            .collect();
        let _ = writeln!(
            index,
            "{name}\t{}\t{}\t{}",
            e.class_id,
            ds.samples[e.query].sample_id,
            supports.join(",")
        );
    }
    write(&dir.join(PREDICTIONS_MANIFEST), index.as_bytes())
}

/// Copies of `episodes` whose first support is repeated `k` times.
pub fn repeat_supports(episodes: &[Episode], k: usize) -> Vec<Episode> {
    episodes
        .iter()
        .map(|e| Episode {
            class_id: e.class_id,
            query: e.query,
            supports: vec![e.supports[0]; k],
        })
        .collect()
}

/// One ablation variant: which components are switched on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Variant {
    pub name: &'static str,
    pub use_dpr: bool,
    pub use_fbaf: bool,
    pub use_ica: bool,
}

/// Baseline, each component alone, both, and the full model.
pub const ABLATION_VARIANTS: [Variant; 5] = [
    Variant {
        name: "baseline",
        use_dpr: false,
        use_fbaf: false,
        use_ica: false,
    },
    Variant {
        name: "dpr",
        use_dpr: true,
        use_fbaf: false,
        use_ica: false,
    },
    Variant {
        name: "fbaf",
        use_dpr: false,
        use_fbaf: true,
        use_ica: false,
    },
    Variant {
        name: "dpr+fbaf",
        use_dpr: true,
        use_fbaf: true,
        use_ica: false,
    },
    Variant {
        name: "dpr+fbaf+ica",
        use_dpr: true,
        use_fbaf: true,
        use_ica: true,
    },
];

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub report: EvalReport,
    pub identical_input_iou: f64,
}

/// Evaluation protocol shared by every ablation row.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationProtocol {
    pub k: usize,
    pub episodes: usize,
    pub identical_n: usize,
    pub seed: u64,
}

/// Trains one model per variant with the same seed and evaluates each best
/// checkpoint on the same test episodes. With `out_dir`, each run writes
/// its outputs to a subdirectory named after the variant.
pub fn ablate(
    ds: &Dataset,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    protocol: &AblationProtocol,
    out_dir: Option<&Path>,
) -> Result<Vec<AblationRow>> {
    let config = ds.config();
    let train_classes = config.train_classes();
    let test_pool = ds.pool(&config.test_classes, Split::All)?;
    let episodes = sample_episodes(&test_pool, protocol.k, protocol.episodes, protocol.seed)?;
    let identical = identical_input_episodes(ds, &config.test_classes, protocol.identical_n, protocol.seed)?;
    ABLATION_VARIANTS
        .iter()
        .map(|&variant| {
            log::info!("ablation: training {}", variant.name);
            let cfg = TrainConfig {
                use_dpr: variant.use_dpr,
                use_fbaf: variant.use_fbaf,
                use_ica: variant.use_ica,
                ..train_cfg.clone()
            };
            let dir = out_dir.map(|d| d.join(variant.name.replace('+', "_")));
            let model = train(&cfg, model_cfg, ds, &train_classes, dir.as_deref())?.best_model();
            let report = EvalReport::from_results(&run_episodes(&model, ds, &episodes)?, protocol.k, protocol.seed)?;
            let identical_input_iou =
                EvalReport::from_results(&run_episodes(&model, ds, &identical)?, 1, protocol.seed)?.mean_iou;
            Ok(AblationRow {
                variant,
                report,
                identical_input_iou,
            })
        })
        .collect()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("variant,use_dpr,use_fbaf,use_ica,mean_iou,fgbg_iou,identical_input_iou\n");
    for r in rows {
        let v = r.variant;
        let _ = writeln!(
            out,
            "{},{},{},{},{:.6},{:.6},{:.6}",
            v.name, v.use_dpr, v.use_fbaf, v.use_ica, r.report.mean_iou, r.report.fgbg_iou, r.identical_input_iou
        );
    }
    out
}
