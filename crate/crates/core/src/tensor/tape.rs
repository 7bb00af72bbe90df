use super::{gemm, FftConvolver, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An operation with a hand-written vector-Jacobian product.
///
/// `backward` receives the forward inputs, the forward output and the
/// upstream gradient, and returns one entry per input; `needs[i]` is false
/// when input `i` does not require a gradient, in which case `None` may be
/// returned for it.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>>;
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Conv { signal: Var, kernel: Var },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
    param: Option<usize>,
}

/// Ordered record of executed operations.
///
/// Leaf gradients accumulate across [`backward`](Tape::backward) calls until
/// [`zero_grads`](Tape::zero_grads) clears them.
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad, grad: None, param: None });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// A leaf tagged with the index of the parameter it mirrors, so gradients
    /// can be routed back with [`param_grads`](Tape::param_grads).
    pub fn param(&mut self, id: usize, value: Tensor, trainable: bool) -> Var {
        let v = self.leaf(value, trainable);
        self.nodes[v.0].param = Some(id);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.needs(v)
    }

    /// Accumulated gradients of parameter leaves, keyed by parameter index.
    pub fn param_grads(&self) -> impl Iterator<Item = (usize, &Tensor)> {
        self.nodes
            .iter()
            .filter_map(|n| Some((n.param?, n.grad.as_ref()?)))
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ---- operations -------------------------------------------------------

    /// `a[..., m, k] · b[k, n] → [..., m, n]`; leading dimensions of `a` are
    /// treated as extra rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if sa.len() < 2 || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::dim("matmul", format!("cannot multiply {sa:?} by {sb:?}")));
        }
        let k = sb[0];
        let n = sb[1];
        let m = self.value(a).numel() / k.max(1);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, 0.0, &mut out);
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul(a, b), rg))
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, bool)> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = broadcast_shape(name, ta.shape(), tb.shape())?;
        let n: usize = shape.iter().product();
        let (da, db) = (ta.data(), tb.data());
        let (la, lb) = (da.len(), db.len());
        let data = (0..n).map(|i| f(da[i % la], db[i % lb])).collect();
        Ok((Tensor::new(shape, data)?, self.needs(a) || self.needs(b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(a).map(f);
        let rg = self.needs(a);
        self.push(t, op, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| c * x)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel().max(1) as f64;
        let rg = self.needs(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape)?;
        let rg = self.needs(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// Causal convolution of two length-`T` sequences (see
    /// [`conv_channels`](Tape::conv_channels) for the batched form).
    pub fn fft_convolve(&mut self, signal: Var, kernel: Var) -> Result<Var> {
        let (ls, lk) = (self.value(signal).shape().to_vec(), self.value(kernel).shape().to_vec());
        if ls.len() != 1 || ls != lk {
            return Err(Error::dim("fft_convolve", format!("signal {ls:?} vs kernel {lk:?}")));
        }
        let t = ls[0];
        let s3 = self.reshape(signal, vec![1, t, 1])?;
        let k2 = self.reshape(kernel, vec![t, 1])?;
        let y = self.conv_channels(s3, k2)?;
        self.reshape(y, vec![t])
    }

    /// Per-channel causal convolution along time:
    /// `signal[B, T, C] ⊛ kernel[T, C] → [B, T, C]`.
    pub fn conv_channels(&mut self, signal: Var, kernel: Var) -> Result<Var> {
        let (ss, sk) = (self.value(signal).shape().to_vec(), self.value(kernel).shape().to_vec());
        if ss.len() != 3 || sk.len() != 2 || ss[1] != sk[0] || ss[2] != sk[1] {
            return Err(Error::dim("conv_channels", format!("signal {ss:?} vs kernel {sk:?}")));
        }
        let out = conv_channels_forward(self.value(signal), self.value(kernel));
        let rg = self.needs(signal) || self.needs(kernel);
        Ok(self.push(out, Op::Conv { signal, kernel }, rg))
    }

    /// Record the result of a [`CustomOp`] whose forward value was computed
    /// by the caller.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Var {
        let rg = inputs.iter().any(|&v| self.needs(v));
        self.push(output, Op::Custom { inputs: inputs.to_vec(), op }, rg)
    }

    // ---- reverse pass -----------------------------------------------------

    /// Propagate `d loss / d node` back to every leaf that requires a
    /// gradient, accumulating into the leaves' stored gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                match &mut self.nodes[i].grad {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            for (input, contrib) in self.local_grads(i, &g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, i: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[i];
        let out = &node.value;
        let gd = g.data();
        let mut res = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let k = tb.shape()[0];
                let n = tb.shape()[1];
                let m = ta.numel() / k.max(1);
                if self.needs(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, gd, false, tb.data(), true, 0.0, &mut ga);
                    res.push((*a, Tensor::new(ta.shape().to_vec(), ga)?));
                }
                if self.needs(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, ta.data(), true, gd, false, 0.0, &mut gb);
                    res.push((*b, Tensor::new(tb.shape().to_vec(), gb)?));
                }
            }
            Op::Add(a, b) => {
                res.push((*a, reduce_to(g, self.value(*a))));
                res.push((*b, reduce_to(g, self.value(*b))));
            }
            Op::Sub(a, b) => {
                res.push((*a, reduce_to(g, self.value(*a))));
                res.push((*b, reduce_to(&g.map(|x| -x), self.value(*b))));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (la, lb) = (ta.numel(), tb.numel());
                if self.needs(*a) {
                    let full = Tensor::new(
                        out.shape().to_vec(),
                        gd.iter().enumerate().map(|(j, x)| x * tb.data()[j % lb]).collect(),
                    )?;
                    res.push((*a, reduce_to(&full, ta)));
                }
                if self.needs(*b) {
                    let full = Tensor::new(
                        out.shape().to_vec(),
                        gd.iter().enumerate().map(|(j, x)| x * ta.data()[j % la]).collect(),
                    )?;
                    res.push((*b, reduce_to(&full, tb)));
                }
            }
            Op::Sigmoid(a) => res.push((*a, zip_map(g, out, |gx, y| gx * y * (1.0 - y)))),
            Op::Exp(a) => res.push((*a, zip_map(g, out, |gx, y| gx * y))),
            Op::Log(a) => res.push((*a, zip_map(g, self.value(*a), |gx, x| gx / x))),
            Op::Square(a) => res.push((*a, zip_map(g, self.value(*a), |gx, x| 2.0 * gx * x))),
            Op::Scale(a, c) => res.push((*a, g.map(|x| c * x))),
            Op::Sum(a) => res.push((*a, Tensor::full(self.value(*a).shape(), g.item()))),
            Op::Mean(a) => {
                let t = self.value(*a);
                res.push((*a, Tensor::full(t.shape(), g.item() / t.numel().max(1) as f64)));
            }
            Op::Reshape(a) => {
                res.push((*a, g.clone().reshaped(self.value(*a).shape().to_vec())?));
            }
            Op::Conv { signal, kernel } => {
                let (gs, gk) = conv_channels_backward(
                    self.value(*signal),
                    self.value(*kernel),
                    g,
                    self.needs(*signal),
                    self.needs(*kernel),
                );
                if let Some(gs) = gs {
                    res.push((*signal, gs));
                }
                if let Some(gk) = gk {
                    res.push((*kernel, gk));
                }
            }
            Op::Custom { inputs, op } => {
                let vals: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let needs: Vec<bool> = inputs.iter().map(|&v| self.needs(v)).collect();
                let grads = op.backward(&vals, out, g, &needs)?;
                if grads.len() != inputs.len() {
                    return Err(Error::Contract(format!(
                        "custom op `{}` returned {} gradients for {} inputs",
                        op.name(),
                        grads.len(),
                        inputs.len()
                    )));
                }
                for ((&v, gv), need) in inputs.iter().zip(grads).zip(needs) {
                    if let (Some(gv), true) = (gv, need) {
                        if gv.shape() != self.value(v).shape() {
                            return Err(Error::dim(
                                "custom backward",
                                format!(
                                    "`{}` produced gradient {:?} for input {:?}",
                                    op.name(),
                                    gv.shape(),
                                    self.value(v).shape()
                                ),
                            ));
                        }
                        res.push((v, gv));
                    }
                }
            }
        }
        Ok(res)
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Shapes must be equal, or one must be a suffix of the other (the shorter
/// operand repeats over the longer one's leading dimensions).
fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a == b {
        Ok(a.to_vec())
    } else if a.len() > b.len() && a.ends_with(b) {
        Ok(a.to_vec())
    } else if b.len() > a.len() && b.ends_with(a) {
        Ok(b.to_vec())
    } else {
        Err(Error::dim(op, format!("cannot broadcast {a:?} with {b:?}")))
    }
}

/// Sum a broadcast gradient back down to `like`'s shape.
fn reduce_to(g: &Tensor, like: &Tensor) -> Tensor {
    let n = like.numel();
    if g.numel() == n {
        return Tensor::new(like.shape().to_vec(), g.data().to_vec()).expect("same numel");
    }
    let mut out = vec![0.0; n];
    for block in g.data().chunks(n) {
        for (o, x) in out.iter_mut().zip(block) {
            *o += x;
        }
    }
    Tensor::new(like.shape().to_vec(), out).expect("reduced shape")
}

fn zip_map(g: &Tensor, x: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = g.data().iter().zip(x.data()).map(|(&a, &b)| f(a, b)).collect();
    Tensor::new(g.shape().to_vec(), data).expect("same shape")
}

fn gather_channel(x: &[f64], b: usize, t_len: usize, c_len: usize, c: usize) -> Vec<f64> {
    (0..t_len).map(|t| x[(b * t_len + t) * c_len + c]).collect()
}

fn conv_channels_forward(signal: &Tensor, kernel: &Tensor) -> Tensor {
    let (nb, nt, nc) = (signal.shape()[0], signal.shape()[1], signal.shape()[2]);
    let mut out = vec![0.0; nb * nt * nc];
    if nt > 0 {
        let conv = FftConvolver::new(nt);
        for c in 0..nc {
            let k = gather_channel(kernel.data(), 0, nt, nc, c);
            let ks = conv.spectrum(&k);
            for b in 0..nb {
                let s = gather_channel(signal.data(), b, nt, nc, c);
                let y = conv.convolve_spectrum(&s, &ks);
                for (t, v) in y.into_iter().enumerate() {
                    out[(b * nt + t) * nc + c] = v;
                }
            }
        }
    }
    Tensor::new(signal.shape().to_vec(), out).expect("conv output")
}

fn conv_channels_backward(
    signal: &Tensor,
    kernel: &Tensor,
    grad: &Tensor,
    need_signal: bool,
    need_kernel: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let (nb, nt, nc) = (signal.shape()[0], signal.shape()[1], signal.shape()[2]);
    let mut gs = vec![0.0; signal.numel()];
    let mut gk = vec![0.0; kernel.numel()];
    if nt > 0 {
        let conv = FftConvolver::new(nt);
        for c in 0..nc {
            let k = gather_channel(kernel.data(), 0, nt, nc, c);
            let ks = conv.spectrum(&k);
            for b in 0..nb {
                let g = gather_channel(grad.data(), b, nt, nc, c);
                if need_signal {
                    for (t, v) in conv.correlate_spectrum(&g, &ks).into_iter().enumerate() {
                        gs[(b * nt + t) * nc + c] = v;
                    }
                }
                if need_kernel {
                    let s = gather_channel(signal.data(), b, nt, nc, c);
                    for (t, v) in conv.correlate(&g, &s).into_iter().enumerate() {
                        gk[t * nc + c] += v;
                    }
                }
            }
        }
    }
    (
        need_signal.then(|| Tensor::new(signal.shape().to_vec(), gs).expect("signal grad")),
        need_kernel.then(|| Tensor::new(kernel.shape().to_vec(), gk).expect("kernel grad")),
    )
}
