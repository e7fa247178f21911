use super::kernels;
use super::{Activation, ConvParams, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable primitive defined outside this module.
///
/// `backward` returns one gradient per input, in input order; `None` means
/// the input receives no gradient.
pub trait CustomOp {
    fn name(&self) -> &'static str;
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_out: &Tensor,
    ) -> Vec<Option<Tensor>>;
}

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        params: ConvParams,
    },
    ConvTranspose2d {
        input: Var,
        weight: Var,
        bias: Var,
        params: ConvParams,
    },
    InstanceNorm {
        input: Var,
        inv_std: Vec<f64>,
    },
    Activation {
        input: Var,
        kind: Activation,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Norm2(Var),
    Gram(Var),
    NegMeanLog {
        input: Var,
        complement: bool,
        eps: f64,
    },
    WeightedSum(Vec<(Var, f64)>),
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d {
                input,
                weight,
                bias,
                ..
            }
            | Op::ConvTranspose2d {
                input,
                weight,
                bias,
                ..
            } => vec![*input, *weight, *bias],
            Op::InstanceNorm { input, .. }
            | Op::Activation { input, .. }
            | Op::NegMeanLog { input, .. } => vec![*input],
            Op::Concat { a, b } | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(a, _) | Op::Sum(a) | Op::Norm2(a) | Op::Gram(a) => vec![*a],
            Op::WeightedSum(parts) => parts.iter().map(|(v, _)| *v).collect(),
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Tensor>,
    op: Op,
}

/// Append-only record of primitives; reverse-mode differentiation walks it
/// backwards from a scalar loss.
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Copies the value of `v` into a fresh constant leaf.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, name: &str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        params: ConvParams,
    ) -> Result<Var> {
        let out = kernels::conv2d(
            self.value(input),
            self.value(weight),
            self.value(bias),
            &params,
        )?;
        self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                params,
            },
            "conv2d",
        )
    }

    pub fn conv_transpose2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        params: ConvParams,
    ) -> Result<Var> {
        let out = kernels::conv_transpose2d(
            self.value(input),
            self.value(weight),
            self.value(bias),
            &params,
        )?;
        self.push(
            out,
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                params,
            },
            "conv_transpose2d",
        )
    }

    pub fn instance_norm(&mut self, input: Var, eps: f64) -> Result<Var> {
        let (out, inv_std) = kernels::instance_norm_with_stats(self.value(input), eps)?;
        self.push(out, Op::InstanceNorm { input, inv_std }, "instance_norm")
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Result<Var> {
        let out = kernels::activation(self.value(input), kind);
        self.push(out, Op::Activation { input, kind }, kind.name())
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = Tensor::concat_channels(self.value(a), self.value(b))?;
        self.push(out, Op::Concat { a, b }, "concat")
    }

    fn zip_values(&self, a: Var, b: Var, op: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        ta.expect_same_shape(tb, op)?;
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        Tensor::from_vec(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_values(a, b, "add", |x, y| x + y)?;
        self.push(out, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_values(a, b, "sub", |x, y| x - y)?;
        self.push(out, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_values(a, b, "mul", |x, y| x * y)?;
        self.push(out, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v * factor);
        self.push(out, Op::Scale(a, factor), "scale")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a), "sum")
    }

    /// Euclidean norm of the flattened tensor.
    pub fn norm2(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let out = Tensor::scalar(t.data().iter().map(|v| v * v).sum::<f64>().sqrt());
        self.push(out, Op::Norm2(a), "norm2")
    }

    /// Per-sample channel Gram matrix `F F^T / (C H W)`, shaped `(N, 1, C, C)`.
    pub fn gram(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let [n, c, h, w] = t.shape();
        let hw = h * w;
        let norm = (c * hw) as f64;
        let mut out = Tensor::zeros([n, 1, c, c]);
        for b in 0..n {
            for i in 0..c {
                let fi = t.plane(b, i);
                for j in i..c {
                    let fj = t.plane(b, j);
                    let v = fi.iter().zip(fj).map(|(x, y)| x * y).sum::<f64>() / norm;
                    out.set(b, 0, i, j, v);
                    out.set(b, 0, j, i, v);
                }
            }
        }
        self.push(out, Op::Gram(a), "gram")
    }

    /// `-mean(log(x))`, or `-mean(log(1 - x))` when `complement`, with `x`
    /// clamped to `[eps, 1 - eps]`. Inputs outside `[0, 1]` are rejected.
    pub fn neg_mean_log(&mut self, input: Var, complement: bool, eps: f64) -> Result<Var> {
        let t = self.value(input);
        if let Some(bad) = t.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!(
                "probability input {bad} outside [0, 1]"
            )));
        }
        let n = t.len() as f64;
        let total: f64 = t
            .data()
            .iter()
            .map(|&v| {
                let c = v.clamp(eps, 1.0 - eps);
                if complement {
                    (1.0 - c).ln()
                } else {
                    c.ln()
                }
            })
            .sum();
        let out = Tensor::scalar(-total / n);
        self.push(
            out,
            Op::NegMeanLog {
                input,
                complement,
                eps,
            },
            "neg_mean_log",
        )
    }

    /// `sum_i w_i * x_i` over scalar vars.
    pub fn weighted_sum(&mut self, parts: &[(Var, f64)]) -> Result<Var> {
        let mut terms = Vec::with_capacity(parts.len());
        for &(v, w) in parts {
            let t = self.value(v);
            if t.len() != 1 {
                return Err(Error::NonScalar(t.shape()));
            }
            terms.push(w * t.data()[0]);
        }
        self.push(
            Tensor::scalar(compensated_sum(&terms)),
            Op::WeightedSum(parts.to_vec()),
            "weighted_sum",
        )
    }

    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Result<Var> {
        let name = op.name();
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            name,
        )
    }

    /// Accumulates `d loss / d leaf` into every leaf that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.value(loss).shape();
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalar(shape));
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(shape, 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            let inputs = node.op.inputs();
            if inputs.iter().any(|v| v.0 >= i) {
                return Err(Error::Cycle(i));
            }
            let contributions = self.node_backward(i, &g);
            for (v, cg) in inputs.into_iter().zip(contributions) {
                if let Some(cg) = cg {
                    if self.nodes[v.0].requires_grad {
                        accumulate(&mut grads[v.0], cg);
                    }
                }
            }
        }

        for (i, g) in grads.into_iter().enumerate() {
            if let (Some(g), Op::Leaf) = (g, &self.nodes[i].op) {
                accumulate(&mut self.nodes[i].grad, g);
            }
        }
        Ok(())
    }

    fn node_backward(&self, i: usize, g: &Tensor) -> Vec<Option<Tensor>> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => vec![],
            Op::Conv2d {
                input,
                weight,
                params,
                ..
            } => {
                let (gx, gw, gb) =
                    kernels::conv2d_backward(self.value(*input), self.value(*weight), params, g);
                let gb = gb.reshape(self.value(node_bias(&node.op)).shape()).ok();
                vec![Some(gx), Some(gw), gb]
            }
            Op::ConvTranspose2d {
                input,
                weight,
                params,
                ..
            } => {
                let (gx, gw, gb) = kernels::conv_transpose2d_backward(
                    self.value(*input),
                    self.value(*weight),
                    params,
                    g,
                );
                let gb = gb.reshape(self.value(node_bias(&node.op)).shape()).ok();
                vec![Some(gx), Some(gw), gb]
            }
            Op::InstanceNorm { inv_std, .. } => {
                vec![Some(kernels::instance_norm_backward(
                    &node.value,
                    inv_std,
                    g,
                ))]
            }
            Op::Activation { input, kind } => {
                let x = self.value(*input);
                let data = x
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .zip(g.data())
                    .map(|((&xv, &yv), &gv)| gv * kind.derivative(xv, yv))
                    .collect();
                vec![Tensor::from_vec(x.shape(), data).ok()]
            }
            Op::Concat { a, b } => {
                let (sa, sb) = (self.value(*a).shape(), self.value(*b).shape());
                let (la, lb) = (sa[1] * sa[2] * sa[3], sb[1] * sb[2] * sb[3]);
                let mut ga = Vec::with_capacity(la * sa[0]);
                let mut gb = Vec::with_capacity(lb * sb[0]);
                for chunk in g.data().chunks(la + lb) {
                    ga.extend_from_slice(&chunk[..la]);
                    gb.extend_from_slice(&chunk[la..]);
                }
                vec![Tensor::from_vec(sa, ga).ok(), Tensor::from_vec(sb, gb).ok()]
            }
            Op::Add(_, _) => vec![Some(g.clone()), Some(g.clone())],
            Op::Sub(_, _) => vec![Some(g.clone()), Some(g.map(|v| -v))],
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let ga = g.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                let gb = g.data().iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                vec![
                    Tensor::from_vec(ta.shape(), ga).ok(),
                    Tensor::from_vec(tb.shape(), gb).ok(),
                ]
            }
            Op::Scale(_, f) => vec![Some(g.map(|v| v * f))],
            Op::Sum(a) => vec![Some(Tensor::full(self.value(*a).shape(), g.data()[0]))],
            Op::Norm2(a) => {
                let x = self.value(*a);
                let norm = node.value.data()[0];
                let scale = if norm > 0.0 { g.data()[0] / norm } else { 0.0 };
                vec![Some(x.map(|v| v * scale))]
            }
            Op::Gram(a) => {
                let x = self.value(*a);
                let [n, c, h, w] = x.shape();
                let norm = (c * h * w) as f64;
                let mut gx = Tensor::zeros(x.shape());
                for b in 0..n {
                    for i in 0..c {
                        let out = gx.plane_mut(b, i);
                        for j in 0..c {
                            let coeff = (g.get(b, 0, i, j) + g.get(b, 0, j, i)) / norm;
                            if coeff == 0.0 {
                                continue;
                            }
                            for (o, v) in out.iter_mut().zip(x.plane(b, j)) {
                                *o += coeff * v;
                            }
                        }
                    }
                }
                vec![Some(gx)]
            }
            Op::NegMeanLog {
                input,
                complement,
                eps,
            } => {
                let x = self.value(*input);
                let n = x.len() as f64;
                let g0 = g.data()[0];
                let gx = x.map(|v| {
                    if v < *eps || v > 1.0 - *eps {
                        0.0
                    } else if *complement {
                        g0 / (n * (1.0 - v))
                    } else {
                        -g0 / (n * v)
                    }
                });
                vec![Some(gx)]
            }
            Op::WeightedSum(parts) => parts
                .iter()
                .map(|(_, w)| Some(Tensor::scalar(w * g.data()[0])))
                .collect(),
            Op::Custom { inputs, op } => {
                let values: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                op.backward(&values, &node.value, g)
            }
        }
    }
}

/// Neumaier summation; exact for short sums of decimal-looking weights
/// where naive accumulation drifts by an ulp.
pub(crate) fn compensated_sum(terms: &[f64]) -> f64 {
    let mut sum = 0.0;
    let mut carry = 0.0;
    for &x in terms {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            carry += (sum - t) + x;
        } else {
            carry += (x - t) + sum;
        }
        sum = t;
    }
    sum + carry
}

fn node_bias(op: &Op) -> Var {
    match op {
        Op::Conv2d { bias, .. } | Op::ConvTranspose2d { bias, .. } => *bias,
        _ => unreachable!("only convolutions carry a bias"),
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => {
            for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += v;
            }
        }
        None => *slot = Some(g),
    }
}
