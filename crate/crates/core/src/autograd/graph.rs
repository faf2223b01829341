use super::ops::{self, DistanceKind, PoolIndices};
use super::{mismatch, AutogradError, Real, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param,
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    ConvTranspose2d { x: Var, w: Var, b: Option<Var>, stride: usize },
    Relu(Var),
    MaxPool(Var, PoolIndices),
    MaxUnpool(Var, PoolIndices),
    Add(Var, Var),
    AddConst(Var),
    ConcatChannels(Var, Var),
    Flatten(Vec<Var>),
    GradX(Var),
    GradY(Var),
    LaplacianMean(Var),
    Distance(Var, Vec<Real>),
    Scale(Var, Real),
    WeightedSum(Vec<(Var, Real)>),
    Sum(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Append-only tape. Nodes are stored in creation order, which is a
/// topological order by construction.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    branches: u64,
}

/// Adjoints indexed by [`Var`]; `None` for values no parameter depends on.
#[derive(Debug, Clone)]
pub struct Gradients(Vec<Option<Tensor>>);

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.0.get(v.0).and_then(|g| g.as_ref())
    }

    /// Adjoint of `v`, zeros when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: [usize; 4]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

fn finite(t: Tensor, op: &'static str) -> Result<Tensor, AutogradError> {
    if t.is_finite() {
        Ok(t)
    } else {
        Err(AutogradError::NonFinite(op))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), branches: 0xcbf2_9ce4_8422_2325 }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Hash of every discrete decision taken so far (relu signs, pool winners,
    /// loss branches). Two evaluations with equal signatures took the same
    /// piecewise-smooth branch.
    pub fn branch_signature(&self) -> u64 {
        self.branches
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool, name: &'static str) -> Result<Var, AutogradError> {
        let value = finite(value, name)?;
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn grad_flows(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Constant input; no gradient is propagated into it.
    pub fn input(&mut self, t: Tensor) -> Result<Var, AutogradError> {
        self.push(t, Op::Input, false, "input")
    }

    /// Leaf whose gradient is reported by [`Graph::backward`].
    pub fn param(&mut self, t: Tensor) -> Result<Var, AutogradError> {
        self.push(t, Op::Param, true, "param")
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var, AutogradError> {
        let y = ops::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad)?;
        let ng = self.grad_flows(&[x, w]) || b.is_some_and(|b| self.nodes[b.0].needs_grad);
        self.push(y, Op::Conv2d { x, w, b, stride, pad }, ng, "conv2d")
    }

    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var, AutogradError> {
        let y = ops::conv_transpose2d(self.value(x), self.value(w), b.map(|b| self.value(b)), stride)?;
        let ng = self.grad_flows(&[x, w]) || b.is_some_and(|b| self.nodes[b.0].needs_grad);
        self.push(y, Op::ConvTranspose2d { x, w, b, stride }, ng, "conv_transpose2d")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, AutogradError> {
        let xv = self.value(x);
        let y = ops::relu(xv);
        let mut h = self.branches;
        for chunk in xv.data().chunks(64) {
            let bits = chunk.iter().enumerate().fold(0u64, |acc, (i, v)| acc | ((*v > 0.0) as u64) << i);
            h = ops::mix(h, bits);
        }
        self.branches = h;
        let ng = self.grad_flows(&[x]);
        self.push(y, Op::Relu(x), ng, "relu")
    }

    /// 2x2 / stride 2 max pool; the indices feed a later [`Graph::max_unpool2d`].
    pub fn max_pool2d(&mut self, x: Var) -> Result<(Var, PoolIndices), AutogradError> {
        let (y, idx) = ops::max_pool2d(self.value(x))?;
        self.branches = idx.indices.iter().fold(self.branches, |h, &i| ops::mix(h, i as u64));
        let ng = self.grad_flows(&[x]);
        let v = self.push(y, Op::MaxPool(x, idx.clone()), ng, "max_pool2d")?;
        Ok((v, idx))
    }

    pub fn max_unpool2d(&mut self, x: Var, idx: &PoolIndices) -> Result<Var, AutogradError> {
        let [_, _, h, w] = idx.input_shape;
        let [n, c, ..] = self.value(x).shape();
        let y = ops::max_unpool2d(self.value(x), idx, [n, c, h, w])?;
        let ng = self.grad_flows(&[x]);
        self.push(y, Op::MaxUnpool(x, idx.clone()), ng, "max_unpool2d")
    }

    pub fn add(&mut self, x: Var, y: Var) -> Result<Var, AutogradError> {
        let z = ops::add(self.value(x), self.value(y))?;
        let ng = self.grad_flows(&[x, y]);
        self.push(z, Op::Add(x, y), ng, "add")
    }

    /// `x + c` for a constant tensor `c` of the same shape.
    pub fn add_const(&mut self, x: Var, c: &Tensor) -> Result<Var, AutogradError> {
        if !c.is_finite() {
            return Err(AutogradError::NonFinite("add_const"));
        }
        let z = ops::add(self.value(x), c)?;
        let ng = self.grad_flows(&[x]);
        self.push(z, Op::AddConst(x), ng, "add_const")
    }

    pub fn concat_channels(&mut self, x: Var, y: Var) -> Result<Var, AutogradError> {
        let z = ops::concat_channels(self.value(x), self.value(y))?;
        let ng = self.grad_flows(&[x, y]);
        self.push(z, Op::ConcatChannels(x, y), ng, "concat_channels")
    }

    /// Concatenates the flattened values of `vars` into one `[1, 1, 1, n]` row.
    pub fn flatten(&mut self, vars: &[Var]) -> Result<Var, AutogradError> {
        let data: Vec<Real> = vars.iter().flat_map(|v| self.value(*v).data().iter().copied()).collect();
        let n = data.len();
        let ng = self.grad_flows(vars);
        self.push(Tensor::new([1, 1, 1, n], data)?, Op::Flatten(vars.to_vec()), ng, "flatten")
    }

    pub fn grad_x(&mut self, x: Var) -> Result<Var, AutogradError> {
        let y = ops::grad_x(self.value(x));
        let ng = self.grad_flows(&[x]);
        self.push(y, Op::GradX(x), ng, "grad_x")
    }

    pub fn grad_y(&mut self, x: Var) -> Result<Var, AutogradError> {
        let y = ops::grad_y(self.value(x));
        let ng = self.grad_flows(&[x]);
        self.push(y, Op::GradY(x), ng, "grad_y")
    }

    /// Scalar mean Laplacian energy over every element of `x`.
    pub fn laplacian_energy_mean(&mut self, x: Var) -> Result<Var, AutogradError> {
        let v = ops::laplacian_energy_mean(self.value(x));
        let ng = self.grad_flows(&[x]);
        self.push(Tensor::scalar(v), Op::LaplacianMean(x), ng, "laplacian_energy_mean")
    }

    /// Scalar masked distance between `pred` and a constant `target`.
    pub fn distance(&mut self, kind: DistanceKind, pred: Var, target: &Tensor, mask: &[bool]) -> Result<Var, AutogradError> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(mismatch("distance", format!("prediction {:?} vs target {:?}", p.shape(), target.shape())));
        }
        if !target.is_finite() {
            return Err(AutogradError::NonFinite("distance"));
        }
        let eval = ops::distance(kind, p.data(), target.data(), mask)?;
        self.branches = ops::mix(self.branches, eval.branches);
        let ng = self.grad_flows(&[pred]);
        self.push(Tensor::scalar(eval.value), Op::Distance(pred, eval.grad), ng, "distance")
    }

    pub fn scale(&mut self, x: Var, f: Real) -> Result<Var, AutogradError> {
        let xv = self.value(x);
        let y = Tensor::new(xv.shape(), xv.data().iter().map(|v| v * f).collect())?;
        let ng = self.grad_flows(&[x]);
        self.push(y, Op::Scale(x, f), ng, "scale")
    }

    /// `sum_i w_i * s_i` over scalar values.
    pub fn weighted_sum(&mut self, terms: &[(Var, Real)]) -> Result<Var, AutogradError> {
        let mut total = 0.0;
        for (v, w) in terms {
            let t = self.value(*v);
            if t.len() != 1 {
                return Err(AutogradError::NotScalarLoss(t.shape()));
            }
            total += w * t.item();
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let ng = self.grad_flows(&vars);
        self.push(Tensor::scalar(total), Op::WeightedSum(terms.to_vec()), ng, "weighted_sum")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, AutogradError> {
        let s = self.value(x).data().iter().sum();
        let ng = self.grad_flows(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), ng, "sum")
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, AutogradError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(AutogradError::NotScalarLoss(lv.shape()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::new(lv.shape(), vec![1.0])?);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let mut acc = |v: Var, t: Tensor| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => existing.data_mut().iter_mut().zip(t.data()).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(t),
                }
            };
            match &node.op {
                Op::Input | Op::Param => {
                    acc(Var(id), g);
                    continue;
                }
                Op::Conv2d { x, w, b, stride, pad } => {
                    let need_dx = self.nodes[x.0].needs_grad;
                    let (dx, dw, db) = ops::conv2d_backward(self.value(*x), self.value(*w), *stride, *pad, &g, need_dx);
                    if let Some(dx) = dx {
                        acc(*x, dx);
                    }
                    acc(*w, dw);
                    if let Some(b) = b {
                        acc(*b, db);
                    }
                }
                Op::ConvTranspose2d { x, w, b, stride } => {
                    let need_dx = self.nodes[x.0].needs_grad;
                    let (dx, dw, db) = ops::conv_transpose2d_backward(self.value(*x), self.value(*w), *stride, &g, need_dx);
                    if let Some(dx) = dx {
                        acc(*x, dx);
                    }
                    acc(*w, dw);
                    if let Some(b) = b {
                        acc(*b, db);
                    }
                }
                Op::Relu(x) => acc(*x, ops::relu_backward(self.value(*x), &g)),
                Op::MaxPool(x, idx) => acc(*x, ops::max_pool2d_backward(idx, &g)),
                Op::MaxUnpool(x, idx) => acc(*x, ops::max_unpool2d_backward(self.value(*x).shape(), idx, &g)),
                Op::Add(x, y) => {
                    acc(*x, g.clone());
                    acc(*y, g);
                }
                Op::AddConst(x) => acc(*x, g),
                Op::ConcatChannels(x, y) => {
                    let (gx, gy) = ops::split_channels(&g, self.value(*x).shape()[1]);
                    acc(*x, gx);
                    acc(*y, gy);
                }
                Op::Flatten(vars) => {
                    let mut off = 0;
                    for v in vars {
                        let shape = self.value(*v).shape();
                        let n = self.value(*v).len();
                        acc(*v, Tensor::new(shape, g.data()[off..off + n].to_vec())?);
                        off += n;
                    }
                }
                Op::GradX(x) => acc(*x, ops::grad_x_backward(&g)),
                Op::GradY(x) => acc(*x, ops::grad_y_backward(&g)),
                Op::LaplacianMean(x) => acc(*x, ops::laplacian_energy_mean_backward(self.value(*x), g.item())),
                Op::Distance(x, local) => {
                    let s = g.item();
                    acc(*x, Tensor::new(self.value(*x).shape(), local.iter().map(|d| d * s).collect())?);
                }
                Op::Scale(x, f) => acc(*x, Tensor::new(g.shape(), g.data().iter().map(|v| v * f).collect())?),
                Op::WeightedSum(terms) => {
                    for (v, w) in terms {
                        acc(*v, Tensor::scalar(g.item() * w));
                    }
                }
                Op::Sum(x) => acc(*x, Tensor::filled(self.value(*x).shape(), g.item())),
            }
        }
        Ok(Gradients(grads))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_one() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new([1, 2, 2, 2], (0..8).map(f64::from).collect()).unwrap()).unwrap();
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn zero_scaled_loss_has_zero_gradients() {
        let mut g = Graph::new();
        let x = g.param(Tensor::filled([1, 1, 3, 3], 0.5)).unwrap();
        let w = g.param(Tensor::filled([1, 1, 3, 3], 0.2)).unwrap();
        let y = g.conv2d(x, w, None, 1, 1).unwrap();
        let s = g.sum(y).unwrap();
        let z = g.scale(s, 0.0).unwrap();
        let grads = g.backward(z).unwrap();
        for v in [x, w] {
            assert!(grads.get(v).unwrap().data().iter().all(|d| *d == 0.0));
        }
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros([1, 1, 2, 2])).unwrap();
        assert_eq!(g.backward(x).unwrap_err(), AutogradError::NotScalarLoss([1, 1, 2, 2]));
    }

    #[test]
    fn non_finite_rejected() {
        let mut g = Graph::new();
        assert_eq!(g.input(Tensor::scalar(f64::NAN)).unwrap_err(), AutogradError::NonFinite("input"));
        let x = g.param(Tensor::scalar(1e300)).unwrap();
        let y = g.scale(x, 1e300);
        assert_eq!(y.unwrap_err(), AutogradError::NonFinite("scale"));
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        let build = |g: &mut Graph| {
            let x = g.param(Tensor::new([1, 1, 2, 3], vec![0.1, -0.4, 0.3, 0.9, -0.2, 0.5]).unwrap()).unwrap();
            let r = g.relu(x).unwrap();
            let a = g.sum(r).unwrap();
            let gx = g.grad_x(x).unwrap();
            let b = g.laplacian_energy_mean(gx).unwrap();
            let c = g.distance(DistanceKind::L2, x, &Tensor::zeros([1, 1, 2, 3]), &[true; 6]).unwrap();
            (x, a, b, c)
        };
        let mut g = Graph::new();
        let (x, a, b, c) = build(&mut g);
        let total = g.weighted_sum(&[(a, 1.0), (b, 1.0), (c, 1.0)]).unwrap();
        let whole = g.backward(total).unwrap().get(x).unwrap().clone();
        let mut sum = vec![0.0; 6];
        for part in [a, b, c] {
            if let Some(t) = g.backward(part).unwrap().get(x) {
                sum.iter_mut().zip(t.data()).for_each(|(s, v)| *s += v);
            }
        }
        for (w, s) in whole.data().iter().zip(&sum) {
            assert!((w - s).abs() < 1e-15);
        }
    }

    #[test]
    fn inputs_get_no_gradient() {
        let mut g = Graph::new();
        let x = g.input(Tensor::filled([1, 1, 2, 2], 1.0)).unwrap();
        let w = g.param(Tensor::filled([1, 1, 1, 1], 2.0)).unwrap();
        let y = g.conv2d(x, w, None, 1, 0).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(x).is_none());
        assert_eq!(grads.get(w).unwrap().data(), &[4.0]);
    }
}
