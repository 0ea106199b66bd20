//! Central-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Floor on the relative-error denominator.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// Denominator floor for checks on single-precision graphs. Each `f32`
/// intermediate rounds by ~6e-8 relative, so with the default step the
/// difference quotient of an O(1) output carries ~1e-4 absolute noise.
/// Gradients below this magnitude are compared in absolute terms
/// (`tol · floor`).
pub const F32_REL_ERROR_FLOOR: f64 = 1e-2;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub step: f32,
    pub tol: f32,
    /// Above this many elements in total, a random subsample is checked.
    pub max_elements: usize,
    pub seed: u64,
    /// Floor on the relative-error denominator.
    pub floor: f64,
    /// Times the step is halved when a perturbation crosses a ReLU kink.
    /// Elements still crossing one at the smallest step are skipped.
    pub kink_retries: u32,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-3,
            tol: 1e-2,
            max_elements: 10_000,
            seed: 0,
            floor: REL_ERROR_FLOOR,
            kink_retries: 3,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GroupReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub failures: usize,
    /// Elements whose every trial step crossed a ReLU kink.
    pub skipped: usize,
    /// `(element index, analytic, numeric)` at the largest relative error.
    pub worst: Option<(usize, f64, f64)>,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub groups: Vec<GroupReport>,
    pub tol: f32,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> usize {
        self.groups.iter().map(|g| g.failures).sum()
    }

    pub fn checked(&self) -> usize {
        self.groups.iter().map(|g| g.checked).sum()
    }

    pub fn skipped(&self) -> usize {
        self.groups.iter().map(|g| g.skipped).sum()
    }

    pub fn passed(&self) -> bool {
        self.failures() == 0
    }
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<(f64, Vec<bool>)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok((tape.scalar_value(out), tape.activation_pattern()))
}

/// Compares reverse-mode gradients of the scalar `f` against central
/// differences, element by element. `names` labels the parameter groups.
pub fn grad_check<F>(f: F, params: &[Tensor], names: &[&str], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(&tape, v)).collect();
    let base_pattern = tape.activation_pattern();
    drop(tape);

    let total: usize = params.iter().map(Tensor::len).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = params.to_vec();
    let mut groups = Vec::with_capacity(params.len());

    for (gi, param) in params.iter().enumerate() {
        let len = param.len();
        let indices: Vec<usize> = if total <= opts.max_elements {
            (0..len).collect()
        } else {
            let quota = (opts.max_elements * len).div_ceil(total).max(len.min(16)).min(len);
            let mut picked = sample(&mut rng, len, quota).into_vec();
            picked.sort_unstable();
            picked
        };

        let mut report = GroupReport {
            name: names.get(gi).map_or_else(|| format!("param{gi}"), |s| s.to_string()),
            checked: 0,
            max_rel_error: 0.0,
            failures: 0,
            skipped: 0,
            worst: None,
        };
        for idx in indices {
            let original = param.data()[idx];
            let mut step = opts.step;
            let mut numeric = None;
            for _ in 0..=opts.kink_retries {
                let plus = original + step;
                let minus = original - step;
                work[gi].data_mut()[idx] = plus;
                let (f_plus, p_plus) = evaluate(&f, &work)?;
                work[gi].data_mut()[idx] = minus;
                let (f_minus, p_minus) = evaluate(&f, &work)?;
                work[gi].data_mut()[idx] = original;
                if p_plus == base_pattern && p_minus == base_pattern {
                    numeric = Some((f_plus - f_minus) / (plus as f64 - minus as f64));
                    break;
                }
                step *= 0.5;
            }
            let Some(numeric) = numeric else {
                report.skipped += 1;
                continue;
            };
            let a = analytic[gi].data()[idx] as f64;
            let err = relative_error(a, numeric, opts.floor);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((idx, a, numeric));
            }
            if err.is_nan() || err > opts.tol as f64 {
                report.failures += 1;
            }
        }
        groups.push(report);
    }
    Ok(GradCheckReport { groups, tol: opts.tol })
}
