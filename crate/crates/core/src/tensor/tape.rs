use super::{ParamId, Parameters, Tensor};
use crate::error::{Error, Result};

const NORM_EPS: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatVec(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    MeanOverBatch(Var),
    Gap(Var),
    NormalizeL2(Var, f64),
    Dot(Var, Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Stack(Vec<Var>),
    Row(Var, usize),
    Reshape(Var),
    LogSoftmax(Var),
    Select(Var, usize),
    OffDiagonalMean(Var),
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    param: Option<ParamId>,
}

/// Define-by-run gradient tape. Nodes are appended in execution order, which
/// is already a topological order, so backward is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients per parameter produced by one backward sweep.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    by_param: Vec<(ParamId, Vec<f64>)>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.by_param
            .iter()
            .find(|(p, _)| *p == id)
            .map(|(_, g)| g.as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.by_param.iter().map(|(p, g)| (*p, g.as_slice()))
    }

    /// Adds these gradients into the accumulators of `params`.
    pub fn accumulate_into(&self, params: &mut Parameters) -> Result<()> {
        for (id, g) in &self.by_param {
            params.get_mut(*id).accumulate_grad(g)?;
        }
        Ok(())
    }
}

/// Every parameter of a [`Parameters`] set bound onto one tape.
#[derive(Debug, Clone)]
pub struct Bindings {
    vars: Vec<Var>,
}

impl Bindings {
    pub fn get(&self, id: ParamId) -> Var {
        self.vars[id.index()]
    }
}

fn dim_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Dimension {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
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

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> Result<f64> {
        let n = self.node(v);
        if n.value.len() == 1 {
            Ok(n.value[0])
        } else {
            Err(Error::Contract(format!("expected scalar, got shape {:?}", n.shape)))
        }
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(&n.shape, n.value.clone()).expect("node shapes are consistent")
    }

    /// Records a constant leaf. No gradient is ever reported for it.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf)
    }

    pub fn constant_vec(&mut self, data: &[f64]) -> Var {
        self.push(vec![data.len()], data.to_vec(), Op::Leaf)
    }

    /// Records a trainable leaf tied to `id`.
    pub fn param(&mut self, params: &Parameters, id: ParamId) -> Var {
        let t = params.get(id);
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf);
        self.nodes[v.0].param = Some(id);
        v
    }

    pub fn bind(&mut self, params: &Parameters) -> Bindings {
        let vars = params.ids().map(|id| self.param(params, id)).collect();
        Bindings { vars }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(dim_err("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = av[i * k + p];
                for j in 0..n {
                    out[i * n + j] += aip * bv[p * n + j];
                }
            }
        }
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b)))
    }

    /// `W[m x k] . x[k] -> [m]`.
    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        let (sw, sx) = (self.shape(w).to_vec(), self.shape(x).to_vec());
        if sw.len() != 2 || sx.len() != 1 || sw[1] != sx[0] {
            return Err(dim_err("matvec", &sw, &sx));
        }
        let (m, k) = (sw[0], sw[1]);
        let (wv, xv) = (self.value(w), self.value(x));
        let out = (0..m)
            .map(|i| wv[i * k..(i + 1) * k].iter().zip(xv).map(|(a, b)| a * b).sum())
            .collect();
        Ok(self.push(vec![m], out, Op::MatVec(w, x)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(dim_err("transpose", &s, &[]));
        }
        let (m, n) = (s[0], s[1]);
        let av = self.value(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = av[i * n + j];
            }
        }
        Ok(self.push(vec![n, m], out, Op::Transpose(a)))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(name, self.shape(a), self.shape(b)));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        Ok(self.push(self.shape(a).to_vec(), out, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).iter().map(|x| f(*x)).collect();
        self.push(self.shape(a).to_vec(), out, op)
    }

    /// Multiplication by a scalar constant.
    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        self.push(vec![1], vec![s], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        self.push(vec![1], vec![s], Op::Mean(a))
    }

    /// Averages axis 0 of a `[B x d]` matrix.
    pub fn mean_over_batch(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(dim_err("mean_over_batch", &s, &[]));
        }
        let (b, d) = (s[0], s[1]);
        let v = self.value(a);
        let mut out = vec![0.0; d];
        for i in 0..b {
            for j in 0..d {
                out[j] += v[i * d + j];
            }
        }
        out.iter_mut().for_each(|x| *x /= b as f64);
        Ok(self.push(vec![d], out, Op::MeanOverBatch(a)))
    }

    /// Global average pooling of a `W x H x C` map into a length-`C` vector.
    pub fn gap(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 {
            return Err(dim_err("gap", &s, &[]));
        }
        let (positions, c) = (s[0] * s[1], s[2]);
        let v = self.value(a);
        let mut out = vec![0.0; c];
        for p in 0..positions {
            for ch in 0..c {
                out[ch] += v[p * c + ch];
            }
        }
        out.iter_mut().for_each(|x| *x /= positions as f64);
        Ok(self.push(vec![c], out, Op::Gap(a)))
    }

    pub fn normalize_l2(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        // Negated so a NaN norm is rejected too.
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(norm > NORM_EPS) {
            return Err(Error::Degenerate(format!(
                "cannot normalize vector with norm {norm:e}"
            )));
        }
        let out = v.iter().map(|x| x / norm).collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::NormalizeL2(a, norm)))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).len() != self.value(b).len() {
            return Err(dim_err("dot", self.shape(a), self.shape(b)));
        }
        let s = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .sum();
        Ok(self.push(vec![1], vec![s], Op::Dot(a, b)))
    }

    /// Concatenates vectors end to end.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat of zero vectors".into()));
        }
        let mut out = Vec::new();
        for &p in parts {
            if self.shape(p).len() != 1 {
                return Err(dim_err("concat", self.shape(p), &[]));
            }
            out.extend_from_slice(self.value(p));
        }
        Ok(self.push(vec![out.len()], out, Op::Concat(parts.to_vec())))
    }

    /// Contiguous sub-vector `[start, start + len)`.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 1 || len == 0 || start + len > s[0] {
            return Err(dim_err("slice", &s, &[start, len]));
        }
        let out = self.value(a)[start..start + len].to_vec();
        Ok(self.push(vec![len], out, Op::Slice(a, start)))
    }

    /// Stacks equal-length vectors into a `[n x d]` matrix.
    pub fn stack(&mut self, rows: &[Var]) -> Result<Var> {
        let first = *rows
            .first()
            .ok_or_else(|| Error::Contract("stack of zero vectors".into()))?;
        let s0 = self.shape(first).to_vec();
        if s0.len() != 1 {
            return Err(dim_err("stack", &s0, &[]));
        }
        let mut out = Vec::with_capacity(rows.len() * s0[0]);
        for &r in rows {
            if self.shape(r) != s0.as_slice() {
                return Err(dim_err("stack", &s0, self.shape(r)));
            }
            out.extend_from_slice(self.value(r));
        }
        Ok(self.push(vec![rows.len(), s0[0]], out, Op::Stack(rows.to_vec())))
    }

    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || i >= s[0] {
            return Err(dim_err("row", &s, &[i]));
        }
        let d = s[1];
        let out = self.value(a)[i * d..(i + 1) * d].to_vec();
        Ok(self.push(vec![d], out, Op::Row(a, i)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(dim_err("reshape", self.shape(a), shape));
        }
        let out = self.value(a).to_vec();
        Ok(self.push(shape.to_vec(), out, Op::Reshape(a)))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 1 {
            return Err(dim_err("log_softmax", &s, &[]));
        }
        let v = self.value(a);
        let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        let out = v.iter().map(|x| x - lse).collect();
        Ok(self.push(s, out, Op::LogSoftmax(a)))
    }

    /// Picks element `i` of a vector as a scalar.
    pub fn select(&mut self, a: Var, i: usize) -> Result<Var> {
        let v = self.value(a);
        if i >= v.len() {
            return Err(Error::Contract(format!(
                "index {i} out of range for length {}",
                v.len()
            )));
        }
        let x = v[i];
        Ok(self.push(vec![1], vec![x], Op::Select(a, i)))
    }

    /// Mean of the off-diagonal entries of a square matrix.
    pub fn off_diagonal_mean(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || s[0] != s[1] || s[0] < 2 {
            return Err(dim_err("off_diagonal_mean", &s, &[]));
        }
        let n = s[0];
        let v = self.value(a);
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    total += v[i * n + j];
                }
            }
        }
        let m = total / (n * (n - 1)) as f64;
        Ok(self.push(vec![1], vec![m], Op::OffDiagonalMean(a)))
    }

    /// Reverse sweep from a scalar `loss`. Returns per-parameter gradients;
    /// parameters bound more than once get the sum over their leaves.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.node(loss).value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.node(loss).shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }

        let mut by_param: Vec<(ParamId, Vec<f64>)> = Vec::new();
        for (idx, g) in grads.into_iter().enumerate() {
            let (Some(g), Some(pid)) = (g, self.nodes[idx].param) else {
                continue;
            };
            match by_param.iter_mut().find(|(p, _)| *p == pid) {
                Some((_, acc)) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => by_param.push((pid, g)),
            }
        }
        by_param.sort_by_key(|(p, _)| *p);
        Ok(Gradients { by_param })
    }

    /// Backward and accumulate straight into the parameter set.
    pub fn backward_into(&self, loss: Var, params: &mut Parameters) -> Result<()> {
        self.backward(loss)?.accumulate_into(params)
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        fn acc(grads: &mut [Option<Vec<f64>>], v: Var, delta: impl IntoIterator<Item = f64>) {
            let slot = &mut grads[v.0];
            match slot {
                Some(existing) => existing.iter_mut().zip(delta).for_each(|(a, b)| *a += b),
                None => *slot = Some(delta.into_iter().collect()),
            }
        }

        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut ga = vec![0.0; m * k];
                let mut gb = vec![0.0; k * n];
                for i in 0..m {
                    for p in 0..k {
                        let mut s = 0.0;
                        for j in 0..n {
                            let gij = g[i * n + j];
                            s += gij * bv[p * n + j];
                            gb[p * n + j] += av[i * k + p] * gij;
                        }
                        ga[i * k + p] = s;
                    }
                }
                acc(grads, *a, ga);
                acc(grads, *b, gb);
            }
            Op::MatVec(w, x) => {
                let sw = self.shape(*w);
                let (m, k) = (sw[0], sw[1]);
                let (wv, xv) = (self.value(*w), self.value(*x));
                let mut gw = vec![0.0; m * k];
                let mut gx = vec![0.0; k];
                for i in 0..m {
                    for p in 0..k {
                        gw[i * k + p] = g[i] * xv[p];
                        gx[p] += g[i] * wv[i * k + p];
                    }
                }
                acc(grads, *w, gw);
                acc(grads, *x, gx);
            }
            Op::Transpose(a) => {
                let s = self.shape(*a);
                let (m, n) = (s[0], s[1]);
                let mut ga = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        ga[i * n + j] = g[j * m + i];
                    }
                }
                acc(grads, *a, ga);
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.iter().copied());
                acc(grads, *b, g.iter().copied());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.iter().copied());
                acc(grads, *b, g.iter().map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let ga: Vec<f64> = g.iter().zip(bv).map(|(x, y)| x * y).collect();
                let gb: Vec<f64> = g.iter().zip(av).map(|(x, y)| x * y).collect();
                acc(grads, *a, ga);
                acc(grads, *b, gb);
            }
            Op::Scale(a, s) => acc(grads, *a, g.iter().map(|x| x * s)),
            Op::Relu(a) => {
                let av = self.value(*a);
                acc(grads, *a, g.iter().zip(av).map(|(x, v)| if *v > 0.0 { *x } else { 0.0 }));
            }
            Op::Sigmoid(a) => acc(grads, *a, g.iter().zip(out).map(|(x, y)| x * y * (1.0 - y))),
            Op::Tanh(a) => acc(grads, *a, g.iter().zip(out).map(|(x, y)| x * (1.0 - y * y))),
            Op::Abs(a) => {
                let av = self.value(*a);
                acc(grads, *a, g.iter().zip(av).map(|(x, v)| x * sign(*v)));
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                acc(grads, *a, std::iter::repeat_n(g[0], n));
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                acc(grads, *a, std::iter::repeat_n(g[0] / n as f64, n));
            }
            Op::MeanOverBatch(a) => {
                let s = self.shape(*a);
                let (b, d) = (s[0], s[1]);
                let inv = 1.0 / b as f64;
                acc(grads, *a, (0..b * d).map(|i| g[i % d] * inv));
            }
            Op::Gap(a) => {
                let s = self.shape(*a);
                let (positions, c) = (s[0] * s[1], s[2]);
                let inv = 1.0 / positions as f64;
                acc(grads, *a, (0..positions * c).map(|i| g[i % c] * inv));
            }
            Op::NormalizeL2(a, norm) => {
                // d(x/|x|) = (g - y (y.g)) / |x|
                let yg: f64 = out.iter().zip(g).map(|(y, x)| y * x).sum();
                acc(grads, *a, g.iter().zip(out).map(|(x, y)| (x - y * yg) / norm));
            }
            Op::Dot(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let ga: Vec<f64> = bv.iter().map(|y| g[0] * y).collect();
                let gb: Vec<f64> = av.iter().map(|x| g[0] * x).collect();
                acc(grads, *a, ga);
                acc(grads, *b, gb);
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    acc(grads, *p, g[offset..offset + n].iter().copied());
                    offset += n;
                }
            }
            Op::Slice(a, start) => {
                let n = self.value(*a).len();
                let len = g.len();
                acc(
                    grads,
                    *a,
                    (0..n).map(|i| {
                        if i >= *start && i < start + len {
                            g[i - start]
                        } else {
                            0.0
                        }
                    }),
                );
            }
            Op::Stack(rows) => {
                let d = node.shape[1];
                for (i, r) in rows.iter().enumerate() {
                    acc(grads, *r, g[i * d..(i + 1) * d].iter().copied());
                }
            }
            Op::Row(a, i) => {
                let s = self.shape(*a);
                let d = s[1];
                let n = s[0] * d;
                let i = *i;
                acc(
                    grads,
                    *a,
                    (0..n).map(|k| if k / d == i { g[k % d] } else { 0.0 }),
                );
            }
            Op::Reshape(a) => acc(grads, *a, g.iter().copied()),
            Op::LogSoftmax(a) => {
                let gsum: f64 = g.iter().sum();
                acc(grads, *a, g.iter().zip(out).map(|(x, y)| x - y.exp() * gsum));
            }
            Op::Select(a, i) => {
                let n = self.value(*a).len();
                let i = *i;
                acc(grads, *a, (0..n).map(|k| if k == i { g[0] } else { 0.0 }));
            }
            Op::OffDiagonalMean(a) => {
                let n = self.shape(*a)[0];
                let w = g[0] / (n * (n - 1)) as f64;
                acc(
                    grads,
                    *a,
                    (0..n * n).map(|k| if k / n != k % n { w } else { 0.0 }),
                );
            }
        }
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_selector() {
        let mut tape = Tape::new();
        let i2 = tape.constant(&Tensor::identity(2));
        let m = tape.constant(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let out = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(out), &[1.0, 2.0, 3.0, 4.0]);

        let sel = tape.constant(&t(&[1, 2], &[1.0, 0.0]));
        let col = tape.constant(&t(&[2, 1], &[2.0, 5.0]));
        let out = tape.matmul(sel, col).unwrap();
        assert_eq!(tape.shape(out), &[1, 1]);
        assert_eq!(tape.value(out), &[2.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(&Tensor::zeros(&[2, 3]));
        let b = tape.constant(&Tensor::zeros(&[2, 3]));
        match tape.matmul(a, b) {
            Err(Error::Dimension { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn elementwise_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::scalar(-1.0));
        let r = tape.relu(x);
        assert_eq!(tape.value(r), &[0.0]);
        let z = tape.constant(&Tensor::scalar(0.0));
        let s = tape.sigmoid(z);
        assert_eq!(tape.value(s), &[0.5]);

        let a = tape.constant(&Tensor::zeros(&[2]));
        let b = tape.constant(&Tensor::zeros(&[3]));
        assert!(matches!(tape.add(a, b), Err(Error::Dimension { .. })));
        assert!(matches!(tape.mul(a, b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn sigmoid_derivative_at_zero() {
        let mut params = Parameters::new();
        let id = params.add("x", Tensor::scalar(0.0));
        let mut tape = Tape::new();
        let b = tape.bind(&params);
        let s = tape.sigmoid(b.get(id));
        let grads = tape.backward(s).unwrap();
        let analytic = grads.get(id).unwrap()[0];
        let fd = gradcheck::central_difference(&params, 1e-5, |p| {
            let mut tape = Tape::new();
            let x = tape.param(p, id);
            let s = tape.sigmoid(x);
            tape.scalar(s)
        })
        .unwrap();
        assert!((analytic - 0.25).abs() < 1e-12);
        assert!((fd[0][0] - 0.25).abs() < 1e-9);
    }

    #[test]
    fn reductions() {
        let mut tape = Tape::new();
        let map = tape.constant(&Tensor::full(&[3, 2, 4], 1.75));
        let g = tape.gap(map).unwrap();
        assert_eq!(tape.value(g), &[1.75; 4]);

        let map = tape.constant(&t(&[2, 2, 1], &[1.0, 2.0, 3.0, 4.0]));
        let g = tape.gap(map).unwrap();
        assert_eq!(tape.value(g), &[2.5]);

        let row = tape.constant(&t(&[1, 3], &[1.0, -2.0, 3.5]));
        let m = tape.mean_over_batch(row).unwrap();
        assert_eq!(tape.value(m), &[1.0, -2.0, 3.5]);

        let not_map = tape.constant(&Tensor::zeros(&[4]));
        assert!(tape.gap(not_map).is_err());
    }

    #[test]
    fn normalize_examples() {
        let mut tape = Tape::new();
        let v = tape.constant(&t(&[2], &[3.0, 4.0]));
        let n = tape.normalize_l2(v).unwrap();
        let got = tape.value(n);
        assert!((got[0] - 0.6).abs() < 1e-15 && (got[1] - 0.8).abs() < 1e-15);

        let unit = tape.constant(&t(&[3], &[0.0, 1.0, 0.0]));
        let n = tape.normalize_l2(unit).unwrap();
        assert_eq!(tape.value(n), &[0.0, 1.0, 0.0]);

        let tiny = tape.constant(&t(&[2], &[1e-14, 0.0]));
        assert!(matches!(tape.normalize_l2(tiny), Err(Error::Degenerate(_))));
    }

    #[test]
    fn backward_examples() {
        let mut params = Parameters::new();
        let id = params.add("p", Tensor::full(&[2, 3], 0.3));
        let mut tape = Tape::new();
        let b = tape.bind(&params);
        let s = tape.sum(b.get(id));
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(id).unwrap(), &[1.0; 6]);

        let mut tape = Tape::new();
        let b = tape.bind(&params);
        let z = tape.scale(b.get(id), 0.0);
        let s = tape.sum(z);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(id).unwrap(), &[0.0; 6]);

        let nonscalar = tape.scale(b.get(id), 2.0);
        assert!(matches!(tape.backward(nonscalar), Err(Error::Contract(_))));
    }

    #[test]
    fn unreachable_params_get_zero_and_double_backward_doubles() {
        let mut params = Parameters::new();
        let used = params.add("used", Tensor::full(&[3], 2.0));
        let unused = params.add("unused", Tensor::full(&[3], 5.0));
        let mut tape = Tape::new();
        let b = tape.bind(&params);
        let sq = tape.mul(b.get(used), b.get(used)).unwrap();
        let loss = tape.sum(sq);
        tape.backward_into(loss, &mut params).unwrap();
        tape.backward_into(loss, &mut params).unwrap();
        assert_eq!(params.get(used).grad().unwrap(), &[8.0, 8.0, 8.0]);
        assert!(params
            .get(unused)
            .grad()
            .is_none_or(|g| g.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::randn(&[4, 5], 1.0, &mut rng);
        let b = Tensor::randn(&[5, 3], 1.0, &mut rng);
        let run = || {
            let mut tape = Tape::new();
            let (x, y) = (tape.constant(&a), tape.constant(&b));
            let m = tape.matmul(x, y).unwrap();
            let s = tape.sigmoid(m);
            let r = tape.row(s, 2).unwrap();
            let n = tape.normalize_l2(r).unwrap();
            tape.tensor(n).bits()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn log_softmax_and_off_diagonal_mean() {
        let mut tape = Tape::new();
        let v = tape.constant(&t(&[2], &[1.0, 0.0]));
        let l = tape.log_softmax(v).unwrap();
        let p: Vec<f64> = tape.value(l).iter().map(|x| x.exp()).collect();
        assert!((p[0] - std::f64::consts::E / (std::f64::consts::E + 1.0)).abs() < 1e-15);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);

        let m = tape.constant(&t(&[2, 2], &[9.0, 1.0, 3.0, 9.0]));
        let o = tape.off_diagonal_mean(m).unwrap();
        assert_eq!(tape.value(o), &[2.0]);
    }
}
