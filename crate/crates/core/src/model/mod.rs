//! The segmentation network: shared encoder, foreground/background probe
//! extraction, attention maps, attentive fusion and a shared ASPP decoder
//! that scores both the query and the support image.

pub mod checkpoint;
mod config;
mod params;

pub use config::{ModelConfig, FEATURE_STRIDE, FG_CHANNEL, POOLED_BLOCKS};
pub use params::{expected_shapes, sgd_step, Conv, ModelParams, Norm};

use crate::error::{invalid, shape_err, Result};
use crate::mask::Mask;
use crate::tensor::{ConvGeometry, Tape, Tensor, Var, COSINE_EPS, INSTANCE_NORM_EPS};

/// Guards empty regions in the mask-weighted mean.
pub const PROBE_EPS: f32 = 1e-6;

/// Foreground and background probe vectors, each of length `C`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbePair<T = Tensor> {
    pub fg: T,
    pub bg: T,
}

/// Normalized attention maps, each `h×w`, summing to one per position.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionPair {
    pub fg: Tensor,
    pub bg: Tensor,
}

/// Logits for both branches, each `2×H×W`.
#[derive(Clone, Debug, PartialEq)]
pub struct DualPrediction<T = Tensor> {
    pub query_logits: T,
    pub support_logits: T,
}

/// An annotated support example. The image is already normalized.
#[derive(Clone, Copy, Debug)]
pub struct Support<'a> {
    pub image: &'a Tensor,
    pub mask: &'a Mask,
}

/// `(x − mean)/std` over every channel of a `[0,1]` image.
pub fn normalize_image(image: &Tensor, cfg: &ModelConfig) -> Tensor {
    Tensor::from_fn(image.shape(), |i| (image.data()[i] - cfg.pixel_mean) / cfg.pixel_std)
}

/// Block-average a binary mask down to `h×w`; each output is the foreground
/// fraction of its block.
pub fn downsample_mask(mask: &Mask, h: usize, w: usize) -> Result<Tensor> {
    let (mh, mw) = (mask.height(), mask.width());
    if h == 0 || w == 0 || mh % h != 0 || mw % w != 0 {
        return Err(shape_err!("cannot block-average a {mh}×{mw} mask to {h}×{w}"));
    }
    let (by, bx) = (mh / h, mw / w);
    let area = (by * bx) as f32;
    Ok(Tensor::from_fn(&[h, w], |i| {
        let (oy, ox) = (i / w, i % w);
        let mut count = 0usize;
        for y in oy * by..(oy + 1) * by {
            for x in ox * bx..(ox + 1) * bx {
                count += mask.get(y, x) as usize;
            }
        }
        count as f32 / area
    }))
}

// Graph builders. Everything below records onto a caller-owned tape so the
// same code serves training (with backward) and inference.

fn conv(tape: &mut Tape, x: Var, c: &Conv<Var>, geom: ConvGeometry) -> Result<Var> {
    tape.conv2d(x, c.weight, c.bias, geom)
}

/// Shared encoder: three conv+ReLU+pool blocks, then the dilated feature conv.
pub fn encode(tape: &mut Tape, p: &ModelParams<Var>, cfg: &ModelConfig, image: Var) -> Result<Var> {
    let (channels, h, w) = tape.value(image).chw()?;
    if channels != 3 {
        return Err(shape_err!("encoder expects a 3-channel image, got {channels}"));
    }
    if h % FEATURE_STRIDE != 0 || w % FEATURE_STRIDE != 0 {
        return Err(shape_err!(
            "image {h}×{w} is not divisible by the feature stride {FEATURE_STRIDE}"
        ));
    }
    if p.encoder.len() != POOLED_BLOCKS + 1 || cfg.encoder_channels.len() != POOLED_BLOCKS {
        return Err(shape_err!("encoder parameters do not match the block layout"));
    }
    let mut x = image;
    for block in &p.encoder[..POOLED_BLOCKS] {
        let y = conv(tape, x, block, ConvGeometry::same(1))?;
        let y = tape.relu(y);
        x = tape.avg_pool2(y)?;
    }
    let y = conv(tape, x, &p.encoder[POOLED_BLOCKS], ConvGeometry::same(2))?;
    Ok(tape.relu(y))
}

/// Foreground and background probes from support features and a soft mask.
pub fn extract_probes(tape: &mut Tape, features: Var, soft_mask: &Tensor, raw: bool) -> Result<ProbePair<Var>> {
    let (_, h, w) = tape.value(features).chw()?;
    if soft_mask.shape() != [h, w] {
        return Err(shape_err!(
            "soft mask {:?} does not match features {h}×{w}",
            soft_mask.shape()
        ));
    }
    let inverse = Tensor::from_fn(&[h, w], |i| 1.0 - soft_mask.data()[i]);
    let denom = |m: &Tensor| {
        if raw {
            (h * w) as f32
        } else {
            (m.data().iter().map(|&v| v as f64).sum::<f64>() + PROBE_EPS as f64) as f32
        }
    };
    let fg = tape.masked_mean(features, soft_mask, denom(soft_mask))?;
    let bg = tape.masked_mean(features, &inverse, denom(&inverse))?;
    Ok(ProbePair { fg, bg })
}

/// Elementwise mean of the probes of several supports.
pub fn kshot_probes_graph(tape: &mut Tape, probes: &[ProbePair<Var>]) -> Result<ProbePair<Var>> {
    if probes.is_empty() {
        return Err(invalid!("k-shot averaging needs at least one support"));
    }
    let fgs: Vec<Var> = probes.iter().map(|p| p.fg).collect();
    let bgs: Vec<Var> = probes.iter().map(|p| p.bg).collect();
    Ok(ProbePair {
        fg: tape.mean_of(&fgs)?,
        bg: tape.mean_of(&bgs)?,
    })
}

/// `2×h×w` stack of (A^f, A^b) for one feature map.
pub fn attention_graph(tape: &mut Tape, features: Var, probes: &ProbePair<Var>) -> Result<Var> {
    let cf = tape.cosine_sim_map(features, probes.fg, COSINE_EPS)?;
    let cb = tape.cosine_sim_map(features, probes.bg, COSINE_EPS)?;
    tape.fg_bg_attention(cf, cb)
}

/// Three residual conv+instance-norm steps over `F ⊕ Z^f`; the second step
/// also sees the attention maps when they are given.
pub fn fuse_graph(
    tape: &mut Tape,
    p: &ModelParams<Var>,
    features: Var,
    fg_probe: Var,
    attention: Option<Var>,
) -> Result<Var> {
    if p.fusion.len() != 3 || p.fusion_norms.len() != 3 {
        return Err(shape_err!("fusion needs three convs and three norms"));
    }
    let step = |tape: &mut Tape, input: Var, residual: Var, i: usize| -> Result<Var> {
        let y = conv(tape, input, &p.fusion[i], ConvGeometry::same(1))?;
        let y = tape.add(y, residual)?;
        let n = &p.fusion_norms[i];
        tape.instance_norm(y, n.gamma, n.beta, INSTANCE_NORM_EPS)
    };
    let g0 = tape.concat_channels(&[features, fg_probe])?;
    let g1 = step(tape, g0, g0, 0)?;
    let g1_in = match attention {
        Some(a) => tape.concat_channels(&[g1, a])?,
        None => g1,
    };
    let g2 = step(tape, g1_in, g1, 1)?;
    step(tape, g2, g2, 2)
}

/// ASPP (summed parallel dilated convs), conv+ReLU, linear 1×1 to two
/// channels, then bilinear upsampling to `out_h×out_w`.
pub fn decode_graph(
    tape: &mut Tape,
    p: &ModelParams<Var>,
    cfg: &ModelConfig,
    fused: Var,
    out_h: usize,
    out_w: usize,
) -> Result<Var> {
    if p.aspp.len() != cfg.aspp_rates.len() || p.head.len() != 2 {
        return Err(shape_err!("decoder parameters do not match the config"));
    }
    let mut acc: Option<Var> = None;
    for (branch, &rate) in p.aspp.iter().zip(&cfg.aspp_rates) {
        let y = conv(tape, fused, branch, ConvGeometry::same(rate))?;
        acc = Some(match acc {
            Some(a) => tape.add(a, y)?,
            None => y,
        });
    }
    let aspp = acc.expect("aspp_rates validated nonempty");
    let y = conv(tape, aspp, &p.head[0], ConvGeometry::same(1))?;
    let y = tape.relu(y);
    let logits = conv(tape, y, &p.head[1], ConvGeometry::pointwise())?;
    tape.bilinear_resize(logits, out_h, out_w)
}

fn check_image(image: &Tensor, cfg: &ModelConfig) -> Result<(usize, usize)> {
    let (c, h, w) = image.chw()?;
    if c != 3 {
        return Err(shape_err!("expected a 3-channel image, got {c}"));
    }
    if h % FEATURE_STRIDE != 0 || w % FEATURE_STRIDE != 0 {
        return Err(shape_err!("image {h}×{w} is not divisible by {FEATURE_STRIDE}"));
    }
    let _ = cfg;
    Ok((h, w))
}

struct EncodedSupports {
    features: Vec<Var>,
    probes: ProbePair<Var>,
}

fn encode_supports(
    tape: &mut Tape,
    p: &ModelParams<Var>,
    cfg: &ModelConfig,
    supports: &[Support<'_>],
    size: (usize, usize),
) -> Result<EncodedSupports> {
    if supports.is_empty() {
        return Err(invalid!("at least one support pair is required"));
    }
    let mut features = Vec::with_capacity(supports.len());
    let mut probes = Vec::with_capacity(supports.len());
    for s in supports {
        if check_image(s.image, cfg)? != size {
            return Err(shape_err!("support image size differs from the query"));
        }
        if (s.mask.height(), s.mask.width()) != size {
            return Err(shape_err!("support mask size differs from its image"));
        }
        let img = tape.constant(s.image.clone());
        let f = encode(tape, p, cfg, img)?;
        let (_, fh, fw) = tape.value(f).chw()?;
        let soft = downsample_mask(s.mask, fh, fw)?;
        probes.push(extract_probes(tape, f, &soft, cfg.map_raw)?);
        features.push(f);
    }
    let probes = kshot_probes_graph(tape, &probes)?;
    Ok(EncodedSupports { features, probes })
}

fn branch(
    tape: &mut Tape,
    p: &ModelParams<Var>,
    cfg: &ModelConfig,
    features: Var,
    probes: &ProbePair<Var>,
    size: (usize, usize),
) -> Result<Var> {
    let attention = if cfg.fbaf {
        Some(attention_graph(tape, features, probes)?)
    } else {
        None
    };
    let fused = fuse_graph(tape, p, features, probes.fg, attention)?;
    decode_graph(tape, p, cfg, fused, size.0, size.1)
}

/// Query and support logits. Probes are averaged over all supports; the
/// support branch decodes the first support.
pub fn forward_dual_graph(
    tape: &mut Tape,
    p: &ModelParams<Var>,
    cfg: &ModelConfig,
    query: &Tensor,
    supports: &[Support<'_>],
) -> Result<DualPrediction<Var>> {
    let size = check_image(query, cfg)?;
    let enc = encode_supports(tape, p, cfg, supports, size)?;
    let q_img = tape.constant(query.clone());
    let fq = encode(tape, p, cfg, q_img)?;
    let query_logits = branch(tape, p, cfg, fq, &enc.probes, size)?;
    let support_logits = branch(tape, p, cfg, enc.features[0], &enc.probes, size)?;
    Ok(DualPrediction {
        query_logits,
        support_logits,
    })
}

/// Query logits only, as used at inference.
pub fn forward_query_graph(
    tape: &mut Tape,
    p: &ModelParams<Var>,
    cfg: &ModelConfig,
    query: &Tensor,
    supports: &[Support<'_>],
) -> Result<Var> {
    let size = check_image(query, cfg)?;
    let enc = encode_supports(tape, p, cfg, supports, size)?;
    let q_img = tape.constant(query.clone());
    let fq = encode(tape, p, cfg, q_img)?;
    branch(tape, p, cfg, fq, &enc.probes, size)
}

/// Elementwise mean of several probe pairs.
pub fn kshot_probes(probes: &[ProbePair]) -> Result<ProbePair> {
    let mut tape = Tape::new();
    let vars: Vec<ProbePair<Var>> = probes
        .iter()
        .map(|p| ProbePair {
            fg: tape.constant(p.fg.clone()),
            bg: tape.constant(p.bg.clone()),
        })
        .collect();
    let out = kshot_probes_graph(&mut tape, &vars)?;
    Ok(ProbePair {
        fg: tape.value(out.fg).clone(),
        bg: tape.value(out.bg).clone(),
    })
}

/// Foreground mask from `2×H×W` logits: a pixel is foreground only when its
/// foreground logit is strictly larger.
pub fn logits_to_mask(logits: &Tensor) -> Result<Mask> {
    let &[2, h, w] = logits.shape() else {
        return Err(shape_err!("expected 2×H×W logits, got {:?}", logits.shape()));
    };
    let n = h * w;
    let d = logits.data();
    let bg_channel = 1 - FG_CHANNEL;
    Ok(Mask::from_fn(h, w, |y, x| {
        let i = y * w + x;
        d[FG_CHANNEL * n + i] > d[bg_channel * n + i]
    }))
}

/// A configured network with its weights.
#[derive(Clone, Debug)]
pub struct SimPropNet {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl SimPropNet {
    pub fn new(config: ModelConfig, params: ModelParams) -> Result<Self> {
        config.validate()?;
        params.check_shapes(&config)?;
        Ok(Self { config, params })
    }

    pub fn init(config: ModelConfig, rng: &mut impl rand::Rng) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::init(&config, rng);
        Ok(Self { config, params })
    }

    fn constants(&self, tape: &mut Tape) -> ModelParams<Var> {
        self.params.map(|_, t| tape.constant(t.clone()))
    }

    /// Features of a normalized image.
    pub fn encode(&self, image: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.constants(&mut tape);
        let img = tape.constant(image.clone());
        let f = encode(&mut tape, &p, &self.config, img)?;
        Ok(tape.value(f).clone())
    }

    pub fn extract_probes(&self, features: &Tensor, soft_mask: &Tensor) -> Result<ProbePair> {
        probes_of(features, soft_mask, self.config.map_raw)
    }

    pub fn fuse(&self, features: &Tensor, fg_probe: &Tensor, attention: Option<&AttentionPair>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.constants(&mut tape);
        let f = tape.constant(features.clone());
        let z = tape.constant(fg_probe.clone());
        let a = match attention {
            Some(a) => {
                let fg = tape.constant(a.fg.clone());
                let bg = tape.constant(a.bg.clone());
                Some(tape.concat_channels(&[fg, bg])?)
            }
            None => None,
        };
        let g = fuse_graph(&mut tape, &p, f, z, a)?;
        Ok(tape.value(g).clone())
    }

    pub fn decode(&self, fused: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.constants(&mut tape);
        let g = tape.constant(fused.clone());
        let y = decode_graph(&mut tape, &p, &self.config, g, out_h, out_w)?;
        Ok(tape.value(y).clone())
    }

    /// Both branches on normalized images.
    pub fn forward_dual(&self, query: &Tensor, supports: &[Support<'_>]) -> Result<DualPrediction> {
        let mut tape = Tape::new();
        let p = self.constants(&mut tape);
        let out = forward_dual_graph(&mut tape, &p, &self.config, query, supports)?;
        Ok(DualPrediction {
            query_logits: tape.value(out.query_logits).clone(),
            support_logits: tape.value(out.support_logits).clone(),
        })
    }

    /// Query logits on normalized images.
    pub fn query_logits(&self, query: &Tensor, supports: &[Support<'_>]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.constants(&mut tape);
        let out = forward_query_graph(&mut tape, &p, &self.config, query, supports)?;
        Ok(tape.value(out).clone())
    }

    /// Binary query mask from raw `[0,1]` images.
    pub fn predict(&self, query: &Tensor, supports: &[(&Tensor, &Mask)]) -> Result<Mask> {
        let q = normalize_image(query, &self.config);
        let imgs: Vec<Tensor> = supports
            .iter()
            .map(|(img, _)| normalize_image(img, &self.config))
            .collect();
        let sup: Vec<Support<'_>> = imgs
            .iter()
            .zip(supports)
            .map(|(image, (_, mask))| Support { image, mask })
            .collect();
        logits_to_mask(&self.query_logits(&q, &sup)?)
    }
}

/// Probe pair for fixed features (no gradients).
pub fn probes_of(features: &Tensor, soft_mask: &Tensor, raw: bool) -> Result<ProbePair> {
    let mut tape = Tape::new();
    let f = tape.constant(features.clone());
    let p = extract_probes(&mut tape, f, soft_mask, raw)?;
    Ok(ProbePair {
        fg: tape.value(p.fg).clone(),
        bg: tape.value(p.bg).clone(),
    })
}

/// Attention maps of `features` against a probe pair (no gradients).
pub fn attention_maps(features: &Tensor, probes: &ProbePair) -> Result<AttentionPair> {
    let mut tape = Tape::new();
    let f = tape.constant(features.clone());
    let p = ProbePair {
        fg: tape.constant(probes.fg.clone()),
        bg: tape.constant(probes.bg.clone()),
    };
    let a = attention_graph(&mut tape, f, &p)?;
    let stacked = tape.value(a);
    let (_, h, w) = stacked.chw()?;
    let n = h * w;
    Ok(AttentionPair {
        fg: Tensor::new(vec![h, w], stacked.data()[..n].to_vec())?,
        bg: Tensor::new(vec![h, w], stacked.data()[n..].to_vec())?,
    })
}
