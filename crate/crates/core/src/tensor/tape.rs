use super::kernels::{self, ConvGeometry, ConvShape, NormCache, ResizePlan};
use super::Tensor;
use crate::error::{invalid, shape_err, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Relu(Var),
    Sum(Var),
    MeanOf(Vec<Var>),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        shape: ConvShape,
        cols: Vec<f32>,
    },
    AvgPool2(Var),
    GlobalAvgPool(Var),
    MaskedMean {
        features: Var,
        weights: Vec<f32>,
        denom: f32,
    },
    Resize {
        input: Var,
        plan: ResizePlan,
    },
    Concat(Vec<Var>),
    InstanceNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        cache: NormCache,
    },
    Cosine {
        features: Var,
        probe: Var,
        eps: f32,
    },
    Attention {
        cos_fg: Var,
        cos_bg: Var,
    },
    SoftmaxCe {
        logits: Var,
        target: Vec<u8>,
        probs: Vec<f32>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// Double-precision value of scalar reductions before rounding to `f32`.
    exact: Option<f64>,
}

/// Reverse-mode recording of whole-tensor operations.
///
/// Values are immutable once recorded. A tape is single-threaded; build one
/// per forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A trainable input; gradients flow into it.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A non-trainable input (images, fixed data).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            exact: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_scalar(&mut self, exact: f64, op: Op, requires_grad: bool) -> Var {
        let v = self.push(Tensor::scalar(exact as f32), op, requires_grad);
        self.nodes[v.0].exact = Some(exact);
        v
    }

    /// Value of a single-element node, in double precision when the node is
    /// a reduction that accumulated in double precision.
    pub fn scalar_value(&self, v: Var) -> f64 {
        let node = &self.nodes[v.0];
        node.exact.unwrap_or(node.value.data()[0] as f64)
    }

    /// Which ReLU inputs are strictly positive, over every ReLU on the tape
    /// in recording order. Two evaluations with equal patterns lie on the
    /// same smooth piece of the function.
    pub fn activation_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Relu(a) = node.op {
                out.extend(self.value(a).data().iter().map(|&v| v > 0.0));
            }
        }
        out
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_err!("{op}: operand shapes {:?} and {:?} differ", sa, sb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let rg = self.needs(&[a, b]);
        if self.value(a).len() == 1 {
            let exact = self.scalar_value(a) + self.scalar_value(b);
            let v = self.push_scalar(exact, Op::Add(a, b), rg);
            return Ok(self.reshape_like(v, a));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f32) -> Var {
        let rg = self.needs(&[a]);
        if self.value(a).len() == 1 {
            let exact = self.scalar_value(a) * factor as f64;
            let v = self.push_scalar(exact, Op::Scale(a, factor), rg);
            return self.reshape_like(v, a);
        }
        let mut out = self.value(a).clone();
        out.scale_assign(factor);
        self.push(out, Op::Scale(a, factor), rg)
    }

    /// Gives a freshly pushed single-element node the shape of `like`.
    fn reshape_like(&mut self, v: Var, like: Var) -> Var {
        let shape = self.value(like).shape().to_vec();
        let node = &mut self.nodes[v.0];
        node.value = Tensor::new(shape, node.value.data().to_vec()).expect("one element");
        v
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::from_fn(t.shape(), |i| t.data()[i].max(0.0));
        let rg = self.needs(&[a]);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().map(|&v| v as f64).sum();
        let rg = self.needs(&[a]);
        self.push_scalar(total, Op::Sum(a), rg)
    }

    /// Elementwise arithmetic mean of same-shaped operands, accumulated in
    /// argument order in double precision so that averaging identical
    /// operands reproduces them exactly.
    pub fn mean_of(&mut self, vars: &[Var]) -> Result<Var> {
        let Some(&first) = vars.first() else {
            return Err(invalid!("mean_of needs at least one operand"));
        };
        for &v in &vars[1..] {
            self.same_shape(first, v, "mean_of")?;
        }
        let n = self.value(first).len();
        let mut acc = vec![0.0f64; n];
        for &v in vars {
            for (a, &x) in acc.iter_mut().zip(self.value(v).data()) {
                *a += x as f64;
            }
        }
        let k = vars.len() as f64;
        let out = Tensor::new(
            self.value(first).shape().to_vec(),
            acc.into_iter().map(|s| (s / k) as f32).collect(),
        )?;
        let rg = self.needs(vars);
        Ok(self.push(out, Op::MeanOf(vars.to_vec()), rg))
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, geom: ConvGeometry) -> Result<Var> {
        let shape = kernels::conv2d_shape(
            self.value(input).shape(),
            self.value(kernel).shape(),
            self.value(bias).shape(),
            geom,
        )?;
        let (out, cols) = kernels::conv2d_forward(
            self.value(input).data(),
            self.value(kernel).data(),
            self.value(bias).data(),
            &shape,
        );
        let out = Tensor::new(vec![shape.c_out, shape.h_out, shape.w_out], out)?;
        let rg = self.needs(&[input, kernel, bias]);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                shape,
                cols,
            },
            rg,
        ))
    }

    /// 2×2 average pooling with stride 2.
    pub fn avg_pool2(&mut self, input: Var) -> Result<Var> {
        let (c, h, w) = self.value(input).chw()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(shape_err!("avg_pool2 needs even spatial dims, got {h}×{w}"));
        }
        let out = kernels::avg_pool2_forward(self.value(input).data(), c, h, w);
        let out = Tensor::new(vec![c, h / 2, w / 2], out)?;
        let rg = self.needs(&[input]);
        Ok(self.push(out, Op::AvgPool2(input), rg))
    }

    /// Per-channel mean over all spatial positions: `C×h×w → C`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let (c, h, w) = self.value(input).chw()?;
        let n = h * w;
        let data = self
            .value(input)
            .data()
            .chunks(n)
            .map(|ch| (ch.iter().map(|&v| v as f64).sum::<f64>() / n as f64) as f32)
            .collect();
        let out = Tensor::new(vec![c], data)?;
        let rg = self.needs(&[input]);
        Ok(self.push(out, Op::GlobalAvgPool(input), rg))
    }

    /// `Σ_p F[:,p]·w[p] / denom` for a constant spatial weight map.
    pub fn masked_mean(&mut self, features: Var, weights: &Tensor, denom: f32) -> Result<Var> {
        let (c, h, w) = self.value(features).chw()?;
        if weights.shape() != [h, w] {
            return Err(shape_err!(
                "mask {:?} does not match feature map {h}×{w}",
                weights.shape()
            ));
        }
        let n = h * w;
        let data = self
            .value(features)
            .data()
            .chunks(n)
            .map(|ch| {
                let s: f64 = ch.iter().zip(weights.data()).map(|(&f, &m)| f as f64 * m as f64).sum();
                (s / denom as f64) as f32
            })
            .collect();
        let out = Tensor::new(vec![c], data)?;
        let rg = self.needs(&[features]);
        Ok(self.push(
            out,
            Op::MaskedMean {
                features,
                weights: weights.data().to_vec(),
                denom,
            },
            rg,
        ))
    }

    pub fn bilinear_resize(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        if out_h == 0 || out_w == 0 {
            return Err(shape_err!("resize target must be positive, got {out_h}×{out_w}"));
        }
        let (c, h, w) = self.value(input).chw()?;
        let plan = ResizePlan::new(c, h, w, out_h, out_w);
        let out = Tensor::new(vec![c, out_h, out_w], plan.forward(self.value(input).data()))?;
        let rg = self.needs(&[input]);
        Ok(self.push(out, Op::Resize { input, plan }, rg))
    }

    /// Stacks channels in argument order. Rank-1 operands of length `C` are
    /// broadcast to `C×h×w`; rank-2 `h×w` maps count as one channel.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let spatial = parts
            .iter()
            .find_map(|&v| match *self.value(v).shape() {
                [_, h, w] => Some((h, w)),
                [h, w] => Some((h, w)),
                _ => None,
            })
            .ok_or_else(|| shape_err!("concat_channels needs at least one spatial operand"))?;
        let (h, w) = spatial;
        let n = h * w;
        let mut data = Vec::new();
        let mut channels = 0;
        for &v in parts {
            let t = self.value(v);
            match *t.shape() {
                [c, th, tw] if (th, tw) == spatial => {
                    data.extend_from_slice(t.data());
                    channels += c;
                }
                [th, tw] if (th, tw) == spatial => {
                    data.extend_from_slice(t.data());
                    channels += 1;
                }
                [c] => {
                    for &x in t.data() {
                        data.extend(std::iter::repeat_n(x, n));
                    }
                    channels += c;
                }
                _ => {
                    return Err(shape_err!(
                        "concat_channels: operand {:?} does not match spatial size {h}×{w}",
                        t.shape()
                    ))
                }
            }
        }
        let out = Tensor::new(vec![channels, h, w], data)?;
        let rg = self.needs(parts);
        Ok(self.push(out, Op::Concat(parts.to_vec()), rg))
    }

    pub fn instance_norm(&mut self, input: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        let (c, h, w) = self.value(input).chw()?;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).shape() != [c] {
                return Err(shape_err!(
                    "instance_norm {name} must be [{c}], got {:?}",
                    self.value(v).shape()
                ));
            }
        }
        let (out, cache) = kernels::instance_norm_forward(
            self.value(input).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            c,
            h * w,
            eps,
        );
        let out = Tensor::new(vec![c, h, w], out)?;
        let rg = self.needs(&[input, gamma, beta]);
        Ok(self.push(
            out,
            Op::InstanceNorm {
                input,
                gamma,
                beta,
                cache,
            },
            rg,
        ))
    }

    /// Cosine similarity of every spatial column with `probe`: `C×h×w, C → h×w`.
    pub fn cosine_sim_map(&mut self, features: Var, probe: Var, eps: f32) -> Result<Var> {
        let (c, h, w) = self.value(features).chw()?;
        if self.value(probe).shape() != [c] {
            return Err(shape_err!(
                "probe of shape {:?} does not match {c} feature channels",
                self.value(probe).shape()
            ));
        }
        let out = kernels::cosine_forward(self.value(features).data(), self.value(probe).data(), c, h * w, eps);
        let out = Tensor::new(vec![h, w], out)?;
        let rg = self.needs(&[features, probe]);
        Ok(self.push(out, Op::Cosine { features, probe, eps }, rg))
    }

    /// Maps two cosine maps to normalized foreground/background attention,
    /// stacked as `2×h×w` (channel 0 foreground).
    pub fn fg_bg_attention(&mut self, cos_fg: Var, cos_bg: Var) -> Result<Var> {
        self.same_shape(cos_fg, cos_bg, "fg_bg_attention")?;
        let &[h, w] = self.value(cos_fg).shape() else {
            return Err(shape_err!("attention inputs must be h×w maps"));
        };
        let out = kernels::attention_forward(self.value(cos_fg).data(), self.value(cos_bg).data());
        let out = Tensor::new(vec![2, h, w], out)?;
        let rg = self.needs(&[cos_fg, cos_bg]);
        Ok(self.push(out, Op::Attention { cos_fg, cos_bg }, rg))
    }

    /// Mean per-pixel cross-entropy of `2×H×W` logits against a binary target.
    pub fn softmax_cross_entropy(&mut self, logits: Var, target: &[u8]) -> Result<Var> {
        let &[2, h, w] = self.value(logits).shape() else {
            return Err(shape_err!(
                "cross-entropy expects 2×H×W logits, got {:?}",
                self.value(logits).shape()
            ));
        };
        if target.len() != h * w {
            return Err(shape_err!("target has {} pixels, logits cover {h}×{w}", target.len()));
        }
        if let Some(bad) = target.iter().find(|&&t| t > 1) {
            return Err(invalid!("cross-entropy target must be binary, found {bad}"));
        }
        let (loss, probs) = kernels::softmax_ce_forward(self.value(logits).data(), target);
        let rg = self.needs(&[logits]);
        Ok(self.push_scalar(
            loss,
            Op::SoftmaxCe {
                logits,
                target: target.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Back-propagates from a single-element `root` with seed 1.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(shape_err!(
                "backward needs a scalar root, got shape {:?}",
                self.value(root).shape()
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), 1.0));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(&node.op, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, data: Vec<f32>) -> Result<()> {
        if !self.nodes[v.0].requires_grad {
            return Ok(());
        }
        let contribution = Tensor::new(self.value(v).shape().to_vec(), data)?;
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&contribution),
            slot @ None => *slot = Some(contribution),
        }
        Ok(())
    }

    fn propagate(&self, op: &Op, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let gd = g.data();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gd.to_vec())?;
                self.accumulate(grads, *b, gd.to_vec())?;
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, gd.iter().zip(vb).map(|(g, y)| g * y).collect())?;
                self.accumulate(grads, *b, gd.iter().zip(va).map(|(g, x)| g * x).collect())?;
            }
            Op::Scale(a, f) => {
                self.accumulate(grads, *a, gd.iter().map(|g| g * f).collect())?;
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let d = gd.iter().zip(x).map(|(&g, &x)| if x > 0.0 { g } else { 0.0 }).collect();
                self.accumulate(grads, *a, d)?;
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                self.accumulate(grads, *a, vec![gd[0]; n])?;
            }
            Op::MeanOf(vars) => {
                let k = vars.len() as f32;
                for &v in vars {
                    self.accumulate(grads, v, gd.iter().map(|g| g / k).collect())?;
                }
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                shape,
                cols,
            } => {
                let need_input = self.nodes[input.0].requires_grad;
                let cg = kernels::conv2d_backward(gd, self.value(*kernel).data(), cols, shape, need_input);
                if let Some(d) = cg.input {
                    self.accumulate(grads, *input, d)?;
                }
                self.accumulate(grads, *kernel, cg.kernel)?;
                self.accumulate(grads, *bias, cg.bias)?;
            }
            Op::AvgPool2(a) => {
                let (c, h, w) = self.value(*a).chw()?;
                self.accumulate(grads, *a, kernels::avg_pool2_backward(gd, c, h, w))?;
            }
            Op::GlobalAvgPool(a) => {
                let (c, h, w) = self.value(*a).chw()?;
                let n = h * w;
                let mut d = Vec::with_capacity(c * n);
                for &gc in gd {
                    d.extend(std::iter::repeat_n(gc / n as f32, n));
                }
                self.accumulate(grads, *a, d)?;
            }
            Op::MaskedMean {
                features,
                weights,
                denom,
            } => {
                let mut d = Vec::with_capacity(gd.len() * weights.len());
                for &gc in gd {
                    d.extend(weights.iter().map(|&m| gc * m / denom));
                }
                self.accumulate(grads, *features, d)?;
            }
            Op::Resize { input, plan } => {
                self.accumulate(grads, *input, plan.backward(gd))?;
            }
            Op::Concat(parts) => {
                let (_, h, w) = g.chw()?;
                let n = h * w;
                let mut offset = 0;
                for &v in parts {
                    let t = self.value(v);
                    match t.rank() {
                        1 => {
                            let c = t.len();
                            let d = gd[offset..offset + c * n]
                                .chunks(n)
                                .map(|ch| ch.iter().map(|&x| x as f64).sum::<f64>() as f32)
                                .collect();
                            self.accumulate(grads, v, d)?;
                            offset += c * n;
                        }
                        _ => {
                            let len = t.len();
                            self.accumulate(grads, v, gd[offset..offset + len].to_vec())?;
                            offset += len;
                        }
                    }
                }
            }
            Op::InstanceNorm {
                input,
                gamma,
                beta,
                cache,
            } => {
                let (c, h, w) = self.value(*input).chw()?;
                let (di, dg, db) = kernels::instance_norm_backward(gd, self.value(*gamma).data(), cache, c, h * w);
                self.accumulate(grads, *input, di)?;
                self.accumulate(grads, *gamma, dg)?;
                self.accumulate(grads, *beta, db)?;
            }
            Op::Cosine { features, probe, eps } => {
                let (c, h, w) = self.value(*features).chw()?;
                let (df, dp) = kernels::cosine_backward(
                    gd,
                    self.value(*features).data(),
                    self.value(*probe).data(),
                    c,
                    h * w,
                    *eps,
                );
                self.accumulate(grads, *features, df)?;
                self.accumulate(grads, *probe, dp)?;
            }
            Op::Attention { cos_fg, cos_bg } => {
                let (df, db) = kernels::attention_backward(gd, self.value(*cos_fg).data(), self.value(*cos_bg).data());
                self.accumulate(grads, *cos_fg, df)?;
                self.accumulate(grads, *cos_bg, db)?;
            }
            Op::SoftmaxCe { logits, target, probs } => {
                let d = kernels::softmax_ce_backward(gd[0], probs, target);
                self.accumulate(grads, *logits, d)?;
            }
        }
        Ok(())
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of `v`, or `None` when no path reaches it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v` with unreached nodes reported as zeros of `v`'s shape.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
    }
}
