use super::rng::SeededRng;
use super::tensor::{axis_extents, matmul_at_raw, matmul_bt_raw, matmul_raw};
use super::{Tensor, TensorError};

/// Backward rule: `(grad_output, parent_values, output_value) -> parent_grads`.
pub type BackwardFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Tensor>>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Node {
    value: Tensor,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Append-only record of a computation. Nodes are stored in creation order,
/// which is a topological order, so backward is a single reverse sweep.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch { op, left: a.shape().to_vec(), right: b.shape().to_vec() }
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

    fn push(&mut self, value: Tensor, parents: Vec<Var>, backward: Option<BackwardFn>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, parents, backward, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Vec::new(), None, true)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Vec::new(), None, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient accumulated by the last [`Tape::backward`]; zeros if the node
    /// received none.
    pub fn grad(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        node.grad.clone().unwrap_or_else(|| Tensor::zeros(node.value.shape()))
    }

    /// Records a node with a caller-supplied backward rule.
    pub fn custom(&mut self, parents: &[Var], value: Tensor, backward: BackwardFn) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(value, parents.to_vec(), Some(backward), requires_grad)
    }

    /// Reverse sweep from a scalar node; gradients accumulate additively
    /// across fan-out.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let numel = self.nodes[loss.0].value.numel();
        if numel != 1 {
            return Err(TensorError::NotScalar(self.nodes[loss.0].value.shape().to_vec()));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.nodes[loss.0].value.shape()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let (Some(rule), true) = (&node.backward, node.requires_grad) {
                let parent_vals: Vec<&Tensor> = node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
                let parent_grads = rule(&g, &parent_vals, &node.value);
                for (p, pg) in node.parents.iter().zip(parent_grads) {
                    if !self.nodes[p.0].requires_grad {
                        continue;
                    }
                    match &mut grads[p.0] {
                        Some(acc) => acc.add_assign(&pg),
                        slot => *slot = Some(pg),
                    }
                }
            }
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    // ---- primitives ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        let ((m, k), (k2, n)) = match (av.dims2(), bv.dims2()) {
            (Some(x), Some(y)) if x.1 == y.0 => (x, y),
            _ => return Err(mismatch("matmul", av, bv)),
        };
        debug_assert_eq!(k, k2);
        let out = Tensor::new(vec![m, n], matmul_raw(av.data(), bv.data(), m, k, n))?;
        Ok(self.custom(
            &[a, b],
            out,
            Box::new(move |g, p, _| {
                let da = matmul_bt_raw(g.data(), p[1].data(), m, n, k);
                let db = matmul_at_raw(p[0].data(), g.data(), m, k, n);
                vec![
                    Tensor::new(vec![m, k], da).expect("shape"),
                    Tensor::new(vec![k, n], db).expect("shape"),
                ]
            }),
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let av = self.value(a);
        let (r, c) = av.dims2().ok_or_else(|| TensorError::InvalidShape(av.shape().to_vec()))?;
        let out = transpose_raw(av.data(), r, c);
        let out = Tensor::new(vec![c, r], out)?;
        Ok(self.custom(
            &[a],
            out,
            Box::new(move |g, _, _| vec![Tensor::new(vec![r, c], transpose_raw(g.data(), c, r)).expect("shape")]),
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(mismatch("add", av, bv));
        }
        let out = av.zip_map(bv, |x, y| x + y);
        Ok(self.custom(&[a, b], out, Box::new(|g, _, _| vec![g.clone(), g.clone()])))
    }

    /// Adds a `[d]` bias along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let d = xv.last_dim();
        if bv.numel() != d || bv.ndim() != 1 {
            return Err(mismatch("add_bias", xv, bv));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(d) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        Ok(self.custom(
            &[x, bias],
            out,
            Box::new(move |g, _, _| {
                let mut db = vec![0.0; d];
                for row in g.data().chunks(d) {
                    for (acc, v) in db.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                vec![g.clone(), Tensor::new(vec![d], db).expect("shape")]
            }),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(mismatch("mul", av, bv));
        }
        let out = av.zip_map(bv, |x, y| x * y);
        Ok(self.custom(
            &[a, b],
            out,
            Box::new(|g, p, _| vec![g.zip_map(p[1], |x, y| x * y), g.zip_map(p[0], |x, y| x * y)]),
        ))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).map(|v| v * factor);
        self.custom(&[x], out, Box::new(move |g, _, _| vec![g.map(|v| v * factor)]))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.custom(&[x], out, Box::new(|g, _, y| vec![g.zip_map(y, |gv, yv| gv * yv * (1.0 - yv))]))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::tanh);
        self.custom(&[x], out, Box::new(|g, _, y| vec![g.zip_map(y, |gv, yv| gv * (1.0 - yv * yv))]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.custom(
            &[x],
            out,
            Box::new(|g, p, _| vec![g.zip_map(p[0], |gv, xv| if xv > 0.0 { gv } else { 0.0 })]),
        )
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).data().iter().sum());
        self.custom(&[x], out, Box::new(|g, p, _| vec![Tensor::full(p[0].shape(), g.item())]))
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let xv = self.value(x);
        if axis >= xv.ndim() {
            return Err(TensorError::AxisOutOfRange { axis, ndim: xv.ndim() });
        }
        let (outer, len, inner) = axis_extents(xv.shape(), axis);
        let mut out = xv.clone();
        {
            let d = out.data_mut();
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |a: usize| (o * len + a) * inner + i;
                    let max = (0..len).map(|a| d[idx(a)]).fold(f64::NEG_INFINITY, f64::max);
                    let mut total = 0.0;
                    for a in 0..len {
                        let e = (d[idx(a)] - max).exp();
                        d[idx(a)] = e;
                        total += e;
                    }
                    for a in 0..len {
                        d[idx(a)] /= total;
                    }
                }
            }
        }
        Ok(self.custom(
            &[x],
            out,
            Box::new(move |g, _, y| {
                let mut dx = vec![0.0; y.numel()];
                let (gd, yd) = (g.data(), y.data());
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |a: usize| (o * len + a) * inner + i;
                        let dot: f64 = (0..len).map(|a| gd[idx(a)] * yd[idx(a)]).sum();
                        for a in 0..len {
                            dx[idx(a)] = yd[idx(a)] * (gd[idx(a)] - dot);
                        }
                    }
                }
                vec![Tensor::new(y.shape().to_vec(), dx).expect("shape")]
            }),
        ))
    }

    /// Standardizes the last axis (population variance) then applies
    /// `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, TensorError> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let d = xv.last_dim();
        if gv.numel() != d || bv.numel() != d {
            return Err(mismatch("layer_norm", xv, gv));
        }
        let rows = xv.numel() / d;
        let mut xhat = vec![0.0; xv.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.numel()];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = gv.data()[j] * xh + bv.data()[j];
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.custom(
            &[x, gamma, beta],
            out,
            Box::new(move |g, p, _| {
                let gamma = p[1].data();
                let gd = g.data();
                let mut dx = vec![0.0; gd.len()];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for r in 0..rows {
                    let off = r * d;
                    let mut mean_dxh = 0.0;
                    let mut mean_dxh_xh = 0.0;
                    for j in 0..d {
                        let gij = gd[off + j];
                        dbeta[j] += gij;
                        dgamma[j] += gij * xhat[off + j];
                        let dxh = gij * gamma[j];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xhat[off + j];
                    }
                    mean_dxh /= d as f64;
                    mean_dxh_xh /= d as f64;
                    for j in 0..d {
                        let dxh = gd[off + j] * gamma[j];
                        dx[off + j] = rstd[r] * (dxh - mean_dxh - xhat[off + j] * mean_dxh_xh);
                    }
                }
                vec![
                    Tensor::new(p[0].shape().to_vec(), dx).expect("shape"),
                    Tensor::new(p[1].shape().to_vec(), dgamma).expect("shape"),
                    Tensor::new(p[2].shape().to_vec(), dbeta).expect("shape"),
                ]
            }),
        ))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = self.value(*parts.first().ok_or(TensorError::EmptyConcat)?).clone();
        if axis >= first.ndim() {
            return Err(TensorError::AxisOutOfRange { axis, ndim: first.ndim() });
        }
        let mut lens = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = self.value(p);
            let compatible = v.ndim() == first.ndim()
                && v.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(mismatch("concat", &first, v));
            }
            lens.push(v.shape()[axis]);
        }
        let total: usize = lens.iter().sum();
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let (outer, _, inner) = axis_extents(&shape, axis);
        let mut out = vec![0.0; outer * total * inner];
        let mut offset = 0;
        for (&p, &len) in parts.iter().zip(&lens) {
            let src = self.value(p).data();
            for o in 0..outer {
                let dst = (o * total + offset) * inner;
                out[dst..dst + len * inner].copy_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
            offset += len;
        }
        let out = Tensor::new(shape, out)?;
        Ok(self.custom(
            parts,
            out,
            Box::new(move |g, p, _| {
                let gd = g.data();
                let mut offset = 0;
                let mut grads = Vec::with_capacity(lens.len());
                for (pv, &len) in p.iter().zip(&lens) {
                    let mut d = Vec::with_capacity(pv.numel());
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        d.extend_from_slice(&gd[src..src + len * inner]);
                    }
                    grads.push(Tensor::new(pv.shape().to_vec(), d).expect("shape"));
                    offset += len;
                }
                grads
            }),
        ))
    }

    /// Takes `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var, TensorError> {
        let xv = self.value(x);
        if axis >= xv.ndim() {
            return Err(TensorError::AxisOutOfRange { axis, ndim: xv.ndim() });
        }
        let full = xv.shape()[axis];
        if len == 0 || start + len > full {
            return Err(TensorError::SliceOutOfRange { start, len, extent: full });
        }
        let in_shape = xv.shape().to_vec();
        let (outer, _, inner) = axis_extents(&in_shape, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let src = (o * full + start) * inner;
            out.extend_from_slice(&xv.data()[src..src + len * inner]);
        }
        let mut shape = in_shape.clone();
        shape[axis] = len;
        let out = Tensor::new(shape, out)?;
        Ok(self.custom(
            &[x],
            out,
            Box::new(move |g, _, _| {
                let mut dx = vec![0.0; outer * full * inner];
                for o in 0..outer {
                    let dst = (o * full + start) * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Tensor::new(in_shape.clone(), dx).expect("shape")]
            }),
        ))
    }

    /// Inverted dropout: in training mode each element is zeroed with
    /// probability `rate` and survivors are scaled by `1/(1-rate)`. Identity in
    /// evaluation mode or at rate 0 (no random draws are consumed then).
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut SeededRng, train: bool) -> Result<Var, TensorError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::RateOutOfRange(rate));
        }
        if !train || rate == 0.0 {
            return Ok(x);
        }
        let keep_scale = 1.0 / (1.0 - rate);
        let xv = self.value(x);
        let mask: Vec<f64> = (0..xv.numel())
            .map(|_| if rng.uniform() < rate { 0.0 } else { keep_scale })
            .collect();
        let mask = Tensor::new(xv.shape().to_vec(), mask)?;
        let out = xv.zip_map(&mask, |a, m| a * m);
        Ok(self.custom(&[x], out, Box::new(move |g, _, _| vec![g.zip_map(&mask, |a, m| a * m)])))
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn transpose_raw(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}
