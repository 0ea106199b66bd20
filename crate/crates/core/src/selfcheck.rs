//! Finite-difference verification of every differentiable op and of the
//! full dual-branch training loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::mask::Mask;
use crate::model::{forward_dual_graph, ModelConfig, ModelParams, SimPropNet, Support};
use crate::tensor::{
    grad_check, ConvGeometry, GradCheckOptions, GradCheckReport, Tape, Tensor, Var, COSINE_EPS, F32_REL_ERROR_FLOOR,
    INSTANCE_NORM_EPS,
};
use crate::train::loss_dual;

/// Relative tolerance for single ops.
pub const OP_TOL: f32 = 1e-2;
/// Finite-difference step for single ops. Large enough that `f32`
/// rounding in the projected output stays well under the tolerance.
pub const OP_STEP: f32 = 1e-2;
/// Relative tolerance for the end-to-end loss.
pub const END_TO_END_TOL: f32 = 3e-2;
/// At most this fraction of end-to-end elements may be skipped for
/// straddling a ReLU kink at every trial step.
pub const MAX_SKIPPED_FRACTION: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub report: GradCheckReport,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.report.passed() && self.report.skipped() as f64 <= MAX_SKIPPED_FRACTION * self.report.checked() as f64
    }

    pub fn summary(&self) -> String {
        format!(
            "{} {}: checked {} skipped {} failures {} max_rel_error {:.3e}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.report.checked(),
            self.report.skipped(),
            self.report.failures(),
            self.report.max_rel_error()
        )
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Scalar `Σ y·w` for a fixed random `w`, so every output element matters.
fn project(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.value(y).shape().to_vec();
    let w = tape.constant(random(&mut rng, &shape));
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn op_opts() -> GradCheckOptions {
    GradCheckOptions {
        step: OP_STEP,
        tol: OP_TOL,
        floor: F32_REL_ERROR_FLOOR,
        ..Default::default()
    }
}

fn check<F>(out: &mut Vec<CheckResult>, name: &str, params: &[Tensor], names: &[&str], f: F) -> Result<()>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let report = grad_check(f, params, names, &op_opts())?;
    out.push(CheckResult {
        name: name.to_string(),
        report,
    });
    Ok(())
}

/// One check per differentiable tape op.
pub fn op_checks(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let a = random(&mut rng, &[3, 4, 5]);
    let b = random(&mut rng, &[3, 4, 5]);
    let ab = [a.clone(), b];
    check(&mut out, "add", &ab, &["a", "b"], |t, v| {
        let y = t.add(v[0], v[1])?;
        project(t, y, 1)
    })?;
    check(&mut out, "mul", &ab, &["a", "b"], |t, v| {
        let y = t.mul(v[0], v[1])?;
        project(t, y, 2)
    })?;
    check(&mut out, "scale", &ab[..1], &["a"], |t, v| {
        let y = t.scale(v[0], -1.7);
        project(t, y, 3)
    })?;
    check(&mut out, "sum", &ab[..1], &["a"], |t, v| {
        let sq = t.mul(v[0], v[0])?;
        Ok(t.sum(sq))
    })?;
    // Inputs kept away from the kink at zero.
    let kinked = Tensor::from_fn(&[3, 3, 3], |_| {
        let v: f32 = rng.gen_range(0.05..1.0);
        if rng.gen_bool(0.5) {
            v
        } else {
            -v
        }
    });
    check(&mut out, "relu", &[kinked], &["input"], |t, v| {
        let y = t.relu(v[0]);
        project(t, y, 4)
    })?;
    let parts = [random(&mut rng, &[6]), random(&mut rng, &[6]), random(&mut rng, &[6])];
    check(&mut out, "mean_of", &parts, &["a", "b", "c"], |t, v| {
        let m = t.mean_of(v)?;
        project(t, m, 5)
    })?;

    let conv = [
        random(&mut rng, &[3, 6, 6]),
        random(&mut rng, &[4, 3, 3, 3]),
        random(&mut rng, &[4]),
    ];
    for (name, g) in [
        ("conv2d dilated", ConvGeometry::same(2)),
        (
            "conv2d strided",
            ConvGeometry {
                stride: 2,
                dilation: 1,
                padding: 1,
            },
        ),
    ] {
        check(&mut out, name, &conv, &["input", "kernel", "bias"], |t, v| {
            let y = t.conv2d(v[0], v[1], v[2], g)?;
            project(t, y, 6)
        })?;
    }

    let x = random(&mut rng, &[3, 4, 6]);
    check(&mut out, "avg_pool2", std::slice::from_ref(&x), &["input"], |t, v| {
        let y = t.avg_pool2(v[0])?;
        project(t, y, 7)
    })?;
    check(
        &mut out,
        "global_avg_pool",
        std::slice::from_ref(&x),
        &["input"],
        |t, v| {
            let y = t.global_avg_pool(v[0])?;
            project(t, y, 8)
        },
    )?;
    check(&mut out, "bilinear_resize", &[x], &["input"], |t, v| {
        let y = t.bilinear_resize(v[0], 7, 5)?;
        project(t, y, 9)
    })?;

    let cat = [
        random(&mut rng, &[3, 4, 4]),
        random(&mut rng, &[2]),
        random(&mut rng, &[4, 4]),
    ];
    check(
        &mut out,
        "concat_channels",
        &cat,
        &["map", "vector", "plane"],
        |t, v| {
            let y = t.concat_channels(&[v[0], v[1], v[2]])?;
            project(t, y, 10)
        },
    )?;
    let weights = Tensor::from_fn(&[4, 4], |_| rng.gen_range(0.0..1.0));
    check(&mut out, "masked_mean", &cat[..1], &["features"], |t, v| {
        let y = t.masked_mean(v[0], &weights, 3.7)?;
        project(t, y, 11)
    })?;

    let norm = [
        random(&mut rng, &[3, 5, 5]),
        Tensor::from_fn(&[3], |_| rng.gen_range(0.5..1.5)),
        random(&mut rng, &[3]),
    ];
    check(&mut out, "instance_norm", &norm, &["input", "gamma", "beta"], |t, v| {
        let y = t.instance_norm(v[0], v[1], v[2], INSTANCE_NORM_EPS)?;
        project(t, y, 12)
    })?;

    let cos = [
        random(&mut rng, &[5, 3, 4]),
        random(&mut rng, &[5]),
        random(&mut rng, &[5]),
    ];
    check(&mut out, "cosine_sim_map", &cos[..2], &["features", "probe"], |t, v| {
        let y = t.cosine_sim_map(v[0], v[1], COSINE_EPS)?;
        project(t, y, 13)
    })?;
    check(
        &mut out,
        "fg_bg_attention",
        &cos,
        &["features", "probe_fg", "probe_bg"],
        |t, v| {
            let cf = t.cosine_sim_map(v[0], v[1], COSINE_EPS)?;
            let cb = t.cosine_sim_map(v[0], v[2], COSINE_EPS)?;
            let a = t.fg_bg_attention(cf, cb)?;
            project(t, a, 14)
        },
    )?;

    let logits = random(&mut rng, &[2, 4, 3]);
    let target: Vec<u8> = (0..12).map(|_| rng.gen_range(0..2)).collect();
    check(&mut out, "softmax_cross_entropy", &[logits], &["logits"], |t, v| {
        t.softmax_cross_entropy(v[0], &target)
    })?;
    Ok(out)
}

/// Small network configuration for the end-to-end check.
pub fn small_config(input_size: usize) -> ModelConfig {
    ModelConfig {
        input_size,
        encoder_channels: vec![4, 6, 6],
        feature_channels: 4,
        fusion_channels: 8,
        decoder_channels: 4,
        ..Default::default()
    }
}

fn blob(size: usize, cy: f32, cx: f32, r: f32) -> Mask {
    Mask::from_fn(size, size, |y, x| {
        let (dy, dx) = (y as f32 - cy, x as f32 - cx);
        dy * dy + dx * dx <= r * r
    })
}

/// Gradient of the dual loss with respect to every weight of a freshly
/// initialized network on one random episode.
pub fn end_to_end_check(cfg: &ModelConfig, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = SimPropNet::init(cfg.clone(), &mut rng)?;
    let n = cfg.input_size;
    let q = random(&mut rng, &[3, n, n]);
    let s = random(&mut rng, &[3, n, n]);
    let nf = n as f32;
    let qm = blob(n, 0.35 * nf, 0.55 * nf, 0.25 * nf);
    let sm = blob(n, 0.6 * nf, 0.4 * nf, 0.28 * nf);
    let template = net.params.clone();
    let names = template.names();
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    let leaves: Vec<Tensor> = template.leaves().into_iter().cloned().collect();
    let opts = GradCheckOptions {
        tol: END_TO_END_TOL,
        floor: F32_REL_ERROR_FLOOR,
        seed,
        ..Default::default()
    };
    let report = grad_check(
        |tape, vars| {
            let p: ModelParams<Var> = template.with_leaves(vars.to_vec())?;
            let out = forward_dual_graph(tape, &p, cfg, &q, &[Support { image: &s, mask: &sm }])?;
            loss_dual(tape, &out, qm.data(), sm.data(), true)
        },
        &leaves,
        &names,
        &opts,
    )?;
    Ok(CheckResult {
        name: format!("end-to-end dual loss {n}x{n}"),
        report,
    })
}

/// Every op check followed by the end-to-end check at `input_size`.
pub fn run_all(input_size: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = op_checks(seed)?;
    out.push(end_to_end_check(&small_config(input_size), seed)?);
    Ok(out)
}
