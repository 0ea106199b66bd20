use rand::Rng;

use super::config::{ModelConfig, POOLED_BLOCKS};
use crate::error::{shape_err, Result};
use crate::tensor::{sgd_update, Gradients, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct Conv<T> {
    pub weight: T,
    pub bias: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Norm<T> {
    pub gamma: T,
    pub beta: T,
}

/// All trainable weights, generic over the leaf type so the same layout
/// describes stored tensors (`ModelParams`) and their tape handles
/// (`ModelParams<Var>`).
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T = Tensor> {
    /// Three conv+pool blocks followed by the dilated feature conv.
    pub encoder: Vec<Conv<T>>,
    pub fusion: Vec<Conv<T>>,
    pub fusion_norms: Vec<Norm<T>>,
    pub aspp: Vec<Conv<T>>,
    pub head: Vec<Conv<T>>,
}

impl<T> ModelParams<T> {
    /// Visits every leaf in canonical declaration order with its name.
    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> ModelParams<U> {
        let conv = |f: &mut dyn FnMut(&str, &T) -> U, prefix: &str, i: usize, c: &Conv<T>| Conv {
            weight: f(&format!("{prefix}.{i}.weight"), &c.weight),
            bias: f(&format!("{prefix}.{i}.bias"), &c.bias),
        };
        ModelParams {
            encoder: self
                .encoder
                .iter()
                .enumerate()
                .map(|(i, c)| conv(&mut f, "encoder", i, c))
                .collect(),
            fusion: self
                .fusion
                .iter()
                .enumerate()
                .map(|(i, c)| conv(&mut f, "fusion", i, c))
                .collect(),
            fusion_norms: self
                .fusion_norms
                .iter()
                .enumerate()
                .map(|(i, n)| Norm {
                    gamma: f(&format!("fusion_norm.{i}.gamma"), &n.gamma),
                    beta: f(&format!("fusion_norm.{i}.beta"), &n.beta),
                })
                .collect(),
            aspp: self
                .aspp
                .iter()
                .enumerate()
                .map(|(i, c)| conv(&mut f, "aspp", i, c))
                .collect(),
            head: self
                .head
                .iter()
                .enumerate()
                .map(|(i, c)| conv(&mut f, "head", i, c))
                .collect(),
        }
    }

    pub fn leaves(&self) -> Vec<&T> {
        let mut out = Vec::new();
        for c in self.encoder.iter().chain(&self.fusion) {
            out.extend([&c.weight, &c.bias]);
        }
        for n in &self.fusion_norms {
            out.extend([&n.gamma, &n.beta]);
        }
        for c in self.aspp.iter().chain(&self.head) {
            out.extend([&c.weight, &c.bias]);
        }
        out
    }

    pub fn leaves_mut(&mut self) -> Vec<&mut T> {
        let mut out = Vec::new();
        for c in self.encoder.iter_mut().chain(self.fusion.iter_mut()) {
            out.extend([&mut c.weight, &mut c.bias]);
        }
        for n in &mut self.fusion_norms {
            out.extend([&mut n.gamma, &mut n.beta]);
        }
        for c in self.aspp.iter_mut().chain(self.head.iter_mut()) {
            out.extend([&mut c.weight, &mut c.bias]);
        }
        out
    }

    /// Same layout with the leaves replaced, in canonical order.
    pub fn with_leaves<U>(&self, leaves: Vec<U>) -> Result<ModelParams<U>> {
        let expected = self.leaves().len();
        if leaves.len() != expected {
            return Err(shape_err!("{} leaves given, layout has {expected}", leaves.len()));
        }
        let mut it = leaves.into_iter();
        Ok(self.map(|_, _| it.next().expect("length checked")))
    }

    pub fn names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.map(|name, _| names.push(name.to_string()));
        names
    }
}

/// `uniform(−b, b)` with `b = sqrt(1/(C_in·k²))`, zero bias.
fn init_conv(rng: &mut impl Rng, c_out: usize, c_in: usize, k: usize) -> Conv<Tensor> {
    let bound = (1.0 / (c_in * k * k) as f32).sqrt();
    Conv {
        weight: Tensor::from_fn(&[c_out, c_in, k, k], |_| rng.gen_range(-bound..bound)),
        bias: Tensor::zeros(&[c_out]),
    }
}

/// Parameter shapes implied by a config, in canonical order.
pub fn expected_shapes(cfg: &ModelConfig) -> Vec<Vec<usize>> {
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    ModelParams::init(cfg, &mut rng)
        .leaves()
        .into_iter()
        .map(|t| t.shape().to_vec())
        .collect()
}

impl ModelParams<Tensor> {
    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let c = cfg.feature_channels;
        let fusion = cfg.fusion_channels;
        let mut encoder = Vec::with_capacity(POOLED_BLOCKS + 1);
        let mut c_in = 3;
        for &width in &cfg.encoder_channels {
            encoder.push(init_conv(rng, width, c_in, 3));
            c_in = width;
        }
        encoder.push(init_conv(rng, c, c_in, 3));

        let attn_channels = if cfg.fbaf { 2 } else { 0 };
        let fusion_convs = vec![
            init_conv(rng, fusion, 2 * c, 3),
            init_conv(rng, fusion, fusion + attn_channels, 3),
            init_conv(rng, fusion, fusion, 3),
        ];
        let fusion_norms = (0..3)
            .map(|_| Norm {
                gamma: Tensor::full(&[fusion], 1.0),
                beta: Tensor::zeros(&[fusion]),
            })
            .collect();
        let d = cfg.decoder_channels;
        let aspp = cfg.aspp_rates.iter().map(|_| init_conv(rng, d, fusion, 3)).collect();
        let head = vec![init_conv(rng, d, d, 3), init_conv(rng, 2, d, 1)];
        Self {
            encoder,
            fusion: fusion_convs,
            fusion_norms,
            aspp,
            head,
        }
    }

    pub fn num_elements(&self) -> usize {
        self.leaves().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.leaves().iter().all(|t| t.is_finite())
    }

    /// Records every tensor as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> ModelParams<Var> {
        self.map(|_, t| tape.leaf(t.clone()))
    }

    /// Checks that every tensor has the shape `cfg` implies.
    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let expected = expected_shapes(cfg);
        let names = self.names();
        let leaves = self.leaves();
        if leaves.len() != expected.len() {
            return Err(shape_err!(
                "model has {} parameter tensors, config implies {}",
                leaves.len(),
                expected.len()
            ));
        }
        for ((t, shape), name) in leaves.iter().zip(&expected).zip(&names) {
            if t.shape() != shape.as_slice() {
                return Err(shape_err!("{name}: shape {:?}, config implies {:?}", t.shape(), shape));
            }
        }
        Ok(())
    }

    /// `self += scale · other`, elementwise over matching layouts.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f32) -> Result<()> {
        let grads: Vec<&Tensor> = other.leaves();
        let mut params = self.leaves_mut();
        sgd_update(&mut params, &grads, -scale)
    }

    pub fn zeros_like(&self) -> Self {
        self.map(|_, t| Tensor::zeros(t.shape()))
    }
}

impl ModelParams<Var> {
    /// Collects gradients for every bound leaf.
    pub fn gradients(&self, tape: &Tape, grads: &Gradients) -> ModelParams<Tensor> {
        self.map(|_, &v| grads.wrt(tape, v))
    }
}

/// Plain SGD step over every parameter tensor: `p ← p − lr·g`.
pub fn sgd_step(params: &mut ModelParams, grads: &ModelParams, lr: f32) -> Result<()> {
    let g: Vec<&Tensor> = grads.leaves();
    let mut p = params.leaves_mut();
    sgd_update(&mut p, &g, lr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_matches_config_shapes() {
        let cfg = ModelConfig::default();
        let p = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0));
        p.check_shapes(&cfg).unwrap();
        assert!(p.is_finite());
        assert_eq!(p.names().len(), p.leaves().len());
        assert_eq!(p.names()[0], "encoder.0.weight");
        // Fusion convs preserve width; conv 2 sees the two attention maps.
        assert_eq!(p.fusion[1].weight.shape(), &[64, 66, 3, 3]);
        assert_eq!(p.head[1].weight.shape(), &[2, 32, 1, 1]);

        let no_fbaf = ModelConfig {
            fbaf: false,
            ..cfg.clone()
        };
        assert!(p.check_shapes(&no_fbaf).is_err());
    }

    #[test]
    fn init_respects_bound() {
        let cfg = ModelConfig::default();
        let p = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1));
        let bound = (1.0f32 / 27.0).sqrt();
        assert!(p.encoder[0].weight.data().iter().all(|v| v.abs() <= bound));
        assert!(p.encoder[0].bias.data().iter().all(|&v| v == 0.0));
        assert!(p.fusion_norms.iter().all(|n| n.gamma.data().iter().all(|&g| g == 1.0)));
    }

    #[test]
    fn sgd_step_and_shape_errors() {
        let cfg = ModelConfig::default();
        let mut p = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(2));
        let before = p.clone();
        let g = p.map(|_, t| Tensor::full(t.shape(), 2.0));
        sgd_step(&mut p, &g, 0.0).unwrap();
        assert_eq!(p, before);
        sgd_step(&mut p, &g, 0.5).unwrap();
        for (a, b) in p.leaves().iter().zip(before.leaves()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(*x, y - 1.0);
            }
        }
        let other = ModelParams::init(&ModelConfig { fbaf: false, ..cfg }, &mut ChaCha8Rng::seed_from_u64(3));
        assert!(sgd_step(&mut p, &other, 0.1).is_err());
    }
}
