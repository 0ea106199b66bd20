//! Procedural rendering of one class-shaped object over a smooth noise
//! background.

use rand::Rng;

use crate::error::{invalid, Result};
use crate::mask::Mask;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Disk,
    Square,
    Triangle,
    Ring,
    Cross,
}

pub const SHAPES: [ShapeKind; 5] = [
    ShapeKind::Disk,
    ShapeKind::Square,
    ShapeKind::Triangle,
    ShapeKind::Ring,
    ShapeKind::Cross,
];

/// Hue of each class, in turns.
const CLASS_HUES: [f32; 5] = [0.0, 0.4, 0.8, 0.2, 0.6];

const MAX_ATTEMPTS: usize = 32;

impl ShapeKind {
    pub fn for_class(class: usize) -> Self {
        SHAPES[class % SHAPES.len()]
    }

    /// Whether the point `(u, v)`, in the object's rotated frame and in
    /// units of its radius, is inside the shape.
    fn contains(self, u: f32, v: f32) -> bool {
        match self {
            ShapeKind::Disk => u * u + v * v <= 1.0,
            ShapeKind::Square => u.abs() <= 0.8 && v.abs() <= 0.8,
            ShapeKind::Triangle => {
                // Equilateral, circumradius 1, apex at v = −1.
                let s3 = 3f32.sqrt();
                v <= 0.5 && s3 * u - v <= 1.0 && -s3 * u - v <= 1.0
            }
            ShapeKind::Ring => {
                let r2 = u * u + v * v;
                (0.25..=1.0).contains(&r2)
            }
            ShapeKind::Cross => (u.abs() <= 1.0 && v.abs() <= 0.33) || (u.abs() <= 0.33 && v.abs() <= 1.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderParams {
    pub size: usize,
    /// Object radius range as a fraction of the image side.
    pub radius: (f32, f32),
    /// Amplitude of the coarse background noise.
    pub bg_noise: f32,
    /// Per-pixel noise on the object.
    pub fg_noise: f32,
    pub hue_jitter: f32,
    /// Background tint per class instead of per sample.
    pub correlated_bg: bool,
    pub distractors: usize,
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor() as i32 % 6;
    let f = h - h.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Coarse uniform noise on a `cells×cells` grid, bilinearly smoothed.
fn smooth_noise(rng: &mut impl Rng, size: usize, cells: usize) -> Vec<f32> {
    let g = cells + 1;
    let grid: Vec<f32> = (0..g * g).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut out = vec![0.0; size * size];
    let scale = cells as f32 / size as f32;
    for y in 0..size {
        let fy = y as f32 * scale;
        let (y0, ty) = (fy as usize, fy.fract());
        for x in 0..size {
            let fx = x as f32 * scale;
            let (x0, tx) = (fx as usize, fx.fract());
            let at = |yy: usize, xx: usize| grid[yy.min(cells) * g + xx.min(cells)];
            let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
            let bot = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
            out[y * size + x] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

fn background_tint(rng: &mut impl Rng, class: usize, correlated: bool) -> [f32; 3] {
    if correlated {
        // Dim, desaturated version of a hue offset from the class colour.
        let rgb = hsv_to_rgb(CLASS_HUES[class % CLASS_HUES.len()] + 0.5, 0.35, 0.55);
        rgb.map(|c| c + rng.gen_range(-0.02..0.02))
    } else {
        let base = rng.gen_range(0.3..0.7);
        [0; 3].map(|_| base + rng.gen_range(-0.1..0.1))
    }
}

/// One random placement of `kind`.
fn place(rng: &mut impl Rng, kind: ShapeKind, p: &RenderParams) -> Mask {
    let size = p.size as f32;
    let r = rng.gen_range(p.radius.0..=p.radius.1) * size;
    let margin = r.min(size / 2.0);
    let cy = rng.gen_range(margin..=size - margin);
    let cx = rng.gen_range(margin..=size - margin);
    let angle: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
    let (sin, cos) = angle.sin_cos();
    Mask::from_fn(p.size, p.size, |y, x| {
        let (dy, dx) = (y as f32 + 0.5 - cy, x as f32 + 0.5 - cx);
        let u = (cos * dx + sin * dy) / r;
        let v = (-sin * dx + cos * dy) / r;
        kind.contains(u, v)
    })
}

/// Draws the object mask; retries placements that leave the mask empty or
/// full.
fn draw_mask(rng: &mut impl Rng, kind: ShapeKind, p: &RenderParams) -> Result<Mask> {
    for _ in 0..MAX_ATTEMPTS {
        let mask = place(rng, kind, p);
        let n = mask.count();
        if n > 0 && n < mask.len() {
            return Ok(mask);
        }
    }
    Err(invalid!("could not place a {kind:?} within {MAX_ATTEMPTS} attempts"))
}

/// `mask` grown by `r` pixels in the max norm.
fn dilate(mask: &Mask, r: usize) -> Mask {
    let (h, w) = (mask.height(), mask.width());
    Mask::from_fn(h, w, |y, x| {
        (y.saturating_sub(r)..(y + r + 1).min(h))
            .any(|yy| (x.saturating_sub(r)..(x + r + 1).min(w)).any(|xx| mask.get(yy, xx)))
    })
}

/// A non-empty distractor of `kind` kept clear of `keep_out`, or `None`
/// when no placement fits.
fn draw_distractor(rng: &mut impl Rng, kind: ShapeKind, keep_out: &Mask, p: &RenderParams) -> Option<Mask> {
    (0..MAX_ATTEMPTS)
        .map(|_| place(rng, kind, p))
        .find(|m| m.count() > 0 && m.data().iter().zip(keep_out.data()).all(|(&a, &b)| a & b == 0))
}

fn object_colour(rng: &mut impl Rng, class: usize, hue_jitter: f32) -> [f32; 3] {
    let hue = CLASS_HUES[class % CLASS_HUES.len()] + rng.gen_range(-hue_jitter..=hue_jitter);
    let sat = rng.gen_range(0.55..0.9);
    let val = rng.gen_range(0.65..0.95);
    hsv_to_rgb(hue, sat, val)
}

/// Which object covers each pixel: 0 for background, `i + 1` for
/// `classes[i]`. The first object is the labelled one.
struct Layout {
    owner: Vec<u8>,
    classes: Vec<usize>,
}

fn layout(rng: &mut impl Rng, class: usize, distractor_classes: &[usize], p: &RenderParams) -> Result<Layout> {
    let target = draw_mask(rng, ShapeKind::for_class(class), p)?;
    let mut owner = target.data().to_vec();
    let mut classes = vec![class];
    let mut occupied = target;
    if !distractor_classes.is_empty() {
        for _ in 0..p.distractors {
            let dc = distractor_classes[rng.gen_range(0..distractor_classes.len())];
            let Some(d) = draw_distractor(rng, ShapeKind::for_class(dc), &dilate(&occupied, 2), p) else {
                continue;
            };
            classes.push(dc);
            let id = classes.len() as u8;
            for (o, &v) in owner.iter_mut().zip(d.data()) {
                if v == 1 {
                    *o = id;
                }
            }
            occupied = occupied.zip_with(&d, |a, b| a || b)?;
        }
    }
    Ok(Layout { owner, classes })
}

/// Renders one sample of `class` together with up to `p.distractors`
/// unlabelled objects whose classes are drawn from `distractor_classes`.
/// Pixel values are in `[0,1]`.
pub fn render(
    rng: &mut impl Rng,
    class: usize,
    distractor_classes: &[usize],
    p: &RenderParams,
) -> Result<(Tensor, Mask)> {
    let Layout { owner, classes } = layout(rng, class, distractor_classes, p)?;
    let mask = Mask::from_fn(p.size, p.size, |y, x| owner[y * p.size + x] == 1);
    let n = p.size * p.size;
    let colours: Vec<[f32; 3]> = classes.iter().map(|&c| object_colour(rng, c, p.hue_jitter)).collect();

    let tint = background_tint(rng, class, p.correlated_bg);
    let cells = rng.gen_range(3..=6);
    let noise: Vec<Vec<f32>> = (0..3).map(|_| smooth_noise(rng, p.size, cells)).collect();

    let mut data = vec![0.0f32; 3 * n];
    for ch in 0..3 {
        for i in 0..n {
            let v = match owner[i] {
                0 => tint[ch] + p.bg_noise * noise[ch][i],
                o => colours[o as usize - 1][ch] + rng.gen_range(-p.fg_noise..=p.fg_noise),
            };
            data[ch * n + i] = v.clamp(0.0, 1.0);
        }
    }
    Ok((Tensor::new(vec![3, p.size, p.size], data)?, mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params() -> RenderParams {
        RenderParams {
            size: 32,
            radius: (0.15, 0.3),
            bg_noise: 0.15,
            fg_noise: 0.05,
            hue_jitter: 0.04,
            correlated_bg: false,
            distractors: 1,
        }
    }

    #[test]
    fn shapes_are_distinct_and_nontrivial() {
        for kind in SHAPES {
            let inside = (0..400)
                .filter(|i| kind.contains((i % 20) as f32 / 10.0 - 1.0, (i / 20) as f32 / 10.0 - 1.0))
                .count();
            assert!(inside > 20 && inside < 400, "{kind:?}: {inside}");
        }
        assert!(ShapeKind::Ring.contains(0.8, 0.0) && !ShapeKind::Ring.contains(0.1, 0.0));
    }

    #[test]
    fn render_respects_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for class in 0..5 {
            let others: Vec<usize> = (0..5).filter(|&c| c != class).collect();
            let (img, mask) = render(&mut rng, class, &others, &params()).unwrap();
            assert_eq!(img.shape(), &[3, 32, 32]);
            assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(mask.count() > 0 && mask.count() < mask.len());
        }
    }

    #[test]
    fn distractors_are_unlabelled_and_apart() {
        let p = RenderParams { size: 64, ..params() };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut shown = 0;
        for _ in 0..20 {
            let l = layout(&mut rng, 0, &[2, 4], &p).unwrap();
            assert_eq!(l.classes[0], 0);
            assert!(l.classes[1..].iter().all(|c| [2, 4].contains(c)));
            shown += (l.classes.len() == 2) as usize;
            let target = Mask::from_fn(64, 64, |y, x| l.owner[y * 64 + x] == 1);
            let halo = dilate(&target, 2);
            for (i, &o) in l.owner.iter().enumerate() {
                assert!(o <= l.classes.len() as u8);
                assert!(o < 2 || halo.data()[i] == 0, "distractor touches the target");
            }
        }
        assert!(shown >= 15, "{shown} of 20 images show a distractor");
        let l = layout(&mut rng, 0, &[], &p).unwrap();
        assert_eq!(l.classes, vec![0]);
    }

    #[test]
    fn hsv_primaries() {
        assert_eq!(hsv_to_rgb(0.0, 1.0, 1.0), [1.0, 0.0, 0.0]);
        assert_eq!(hsv_to_rgb(0.0, 0.0, 0.5), [0.5, 0.5, 0.5]);
    }
}
