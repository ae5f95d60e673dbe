use crate::error::{shape_err, Error, Result};
use crate::real::{sigmoid, softplus, Real};

use super::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Eight-point weighted gather used for trilinear interpolation: output row is
/// `sum_j weight[j] * src[index[j]]`.
#[derive(Debug, Clone, Copy)]
pub struct Stencil<T> {
    pub index: [usize; 8],
    pub weight: [T; 8],
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Reshape(Var),
    MatMul(Var, Var),
    AddRow(Var, Var),
    Relu(Var),
    Softplus(Var),
    Sigmoid(Var),
    Square(Var),
    SoftmaxRows(Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    ConcatCols(Var, Var),
    GatherElems(Var, Vec<usize>),
    GatherScale { src: Var, idx: Vec<usize>, scale: Var },
    ScatterAddRows { src: Var, idx: Vec<usize> },
    Interp { grid: Var, stencils: Vec<Stencil<T>> },
    Composite { sigma: Var, rgb: Var, delta: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Define-by-run reverse-mode tape. Nodes are appended in evaluation order, so
/// every node's parents precede it.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a node that requires grad. Leaves unreachable from the root
    /// hold zeros; `None` means the node never required a gradient.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn same_shape<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn rank2<T: Real>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(shape_err(op, format!("expected a matrix, got {s:?}"))),
    }
}

fn accumulate<T: Real>(slot: &mut Option<Vec<T>>, len: usize, f: impl FnOnce(&mut [T])) {
    let buf = slot.get_or_insert_with(|| vec![T::zero(); len]);
    f(buf);
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let src = &self.nodes[x.0].value;
        let data = src.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, op, rg)
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        same_shape(name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        self.unary(a, Op::Scale(a, s), |x| x * s)
    }

    /// Same data under a new shape with the same element count.
    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let value = Tensor::new(shape, t.data().to_vec())
            .map_err(|_| shape_err("reshape", format!("cannot view {:?} as requested", t.shape())))?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| if x > T::zero() { x } else { T::zero() })
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    /// `(n, k) x (k, m) -> (n, m)`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (n, k) = rank2("matmul", ta)?;
        let (k2, m) = rank2("matmul", tb)?;
        if k != k2 {
            return Err(shape_err("matmul", format!("({n}, {k}) x ({k2}, {m})")));
        }
        let mut out = vec![T::zero(); n * m];
        matmul_into(ta.data(), tb.data(), &mut out, n, k, m);
        let value = Tensor::matrix(n, m, out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// Adds a length-`m` row vector to every row of an `(n, m)` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (&self.nodes[a.0].value, &self.nodes[row.0].value);
        let (_, m) = rank2("add_row", ta)?;
        if tr.numel() != m {
            return Err(shape_err("add_row", format!("row of {} for width {m}", tr.numel())));
        }
        let mut out = ta.data().to_vec();
        for chunk in out.chunks_mut(m) {
            for (o, &r) in chunk.iter_mut().zip(tr.data()) {
                *o += r;
            }
        }
        let value = Tensor::new(ta.shape().to_vec(), out)?;
        let rg = self.rg(&[a, row]);
        Ok(self.push(value, Op::AddRow(a, row), rg))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let (_, m) = ta.dims2().ok_or_else(|| shape_err("softmax_rows", format!("{:?}", ta.shape())))?;
        if m == 0 {
            return Err(shape_err("softmax_rows", "zero-width rows"));
        }
        let mut out = ta.data().to_vec();
        for row in out.chunks_mut(m) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let value = Tensor::new(ta.shape().to_vec(), out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::SoftmaxRows(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data().iter().copied().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        if t.numel() == 0 {
            return Err(shape_err("mean", "empty tensor"));
        }
        let s: T = t.data().iter().copied().sum();
        let m = s / T::of(t.numel() as f64);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::scalar(m), Op::Mean(a), rg))
    }

    /// Column sums of an `(n, m)` matrix, giving a length-`m` vector.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let (_, m) = rank2("sum_rows", t)?;
        let mut out = vec![T::zero(); m];
        for row in t.data().chunks(m.max(1)) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::vector(out), Op::SumRows(a), rg))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (n, p) = rank2("concat_cols", ta)?;
        let (n2, q) = rank2("concat_cols", tb)?;
        if n != n2 {
            return Err(shape_err("concat_cols", format!("{n} rows vs {n2} rows")));
        }
        let mut out = Vec::with_capacity(n * (p + q));
        for r in 0..n {
            out.extend_from_slice(&ta.data()[r * p..(r + 1) * p]);
            out.extend_from_slice(&tb.data()[r * q..(r + 1) * q]);
        }
        let value = Tensor::matrix(n, p + q, out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::ConcatCols(a, b), rg))
    }

    /// Selects flat elements, producing a 1-D tensor.
    pub fn gather_elems(&mut self, a: Var, idx: Vec<usize>) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        if let Some(&bad) = idx.iter().find(|&&i| i >= t.numel()) {
            return Err(shape_err("gather_elems", format!("index {bad} out of {}", t.numel())));
        }
        let out = idx.iter().map(|&i| t.data()[i]).collect();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::vector(out), Op::GatherElems(a, idx), rg))
    }

    /// Fused top-k dispatch: `out[r, :] = src[idx[r], :] * scale[r]`.
    pub fn gather_scale(&mut self, src: Var, idx: Vec<usize>, scale: Var) -> Result<Var> {
        let (ts, tsc) = (&self.nodes[src.0].value, &self.nodes[scale.0].value);
        let (rows, c) = rank2("gather_scale", ts)?;
        if tsc.numel() != idx.len() {
            return Err(shape_err("gather_scale", format!("{} indices but {} scales", idx.len(), tsc.numel())));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(shape_err("gather_scale", format!("row {bad} out of {rows}")));
        }
        let mut out = Vec::with_capacity(idx.len() * c);
        for (&i, &s) in idx.iter().zip(tsc.data()) {
            out.extend(ts.data()[i * c..(i + 1) * c].iter().map(|&v| v * s));
        }
        let value = Tensor::matrix(idx.len(), c, out)?;
        let rg = self.rg(&[src, scale]);
        Ok(self.push(value, Op::GatherScale { src, idx, scale }, rg))
    }

    /// `out[idx[r], :] += src[r, :]` into a zero `(rows, c)` matrix.
    pub fn scatter_add_rows(&mut self, src: Var, idx: Vec<usize>, rows: usize) -> Result<Var> {
        let ts = &self.nodes[src.0].value;
        let (n, c) = rank2("scatter_add_rows", ts)?;
        if n != idx.len() {
            return Err(shape_err("scatter_add_rows", format!("{n} rows but {} indices", idx.len())));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(shape_err("scatter_add_rows", format!("row {bad} out of {rows}")));
        }
        let mut out = vec![T::zero(); rows * c];
        for (r, &i) in idx.iter().enumerate() {
            for j in 0..c {
                out[i * c + j] += ts.data()[r * c + j];
            }
        }
        let value = Tensor::matrix(rows, c, out)?;
        let rg = self.rg(&[src]);
        Ok(self.push(value, Op::ScatterAddRows { src, idx }, rg))
    }

    /// Weighted 8-point gather over the rows of `grid`, whose last dimension
    /// is the channel count. Differentiable with respect to `grid` only.
    pub fn interp(&mut self, grid: Var, stencils: Vec<Stencil<T>>) -> Result<Var> {
        let tg = &self.nodes[grid.0].value;
        let c = *tg.shape().last().ok_or_else(|| shape_err("interp", "rank-0 grid"))?;
        if c == 0 {
            return Err(shape_err("interp", "zero channels"));
        }
        let rows = tg.numel() / c;
        for s in &stencils {
            if let Some(&bad) = s.index.iter().find(|&&i| i >= rows) {
                return Err(shape_err("interp", format!("voxel {bad} out of {rows}")));
            }
        }
        let g = tg.data();
        let mut out = vec![T::zero(); stencils.len() * c];
        for (o, s) in out.chunks_mut(c).zip(&stencils) {
            for (&i, &w) in s.index.iter().zip(&s.weight) {
                let src = &g[i * c..(i + 1) * c];
                for (ov, &gv) in o.iter_mut().zip(src) {
                    *ov += w * gv;
                }
            }
        }
        let value = Tensor::matrix(stencils.len(), c, out)?;
        let rg = self.rg(&[grid]);
        Ok(self.push(value, Op::Interp { grid, stencils }, rg))
    }

    /// Volume-rendering quadrature over `R` rays of `N` samples each.
    ///
    /// `sigma` is `(R, N)`, `rgb` holds `R * N * 3` values, `delta` holds the
    /// `R * N` segment lengths. Output is `(R, 3)`.
    pub fn composite(&mut self, sigma: Var, rgb: Var, delta: Vec<T>) -> Result<Var> {
        let (ts, tc) = (&self.nodes[sigma.0].value, &self.nodes[rgb.0].value);
        let (r, n) = rank2("composite", ts)?;
        if tc.numel() != r * n * 3 {
            return Err(shape_err("composite", format!("rgb has {} values for {r}x{n} samples", tc.numel())));
        }
        if delta.len() != r * n {
            return Err(shape_err("composite", format!("{} deltas for {r}x{n} samples", delta.len())));
        }
        let mut out = vec![T::zero(); r * 3];
        for ray in 0..r {
            let base = ray * n;
            let px =
                composite_ray(&ts.data()[base..base + n], &tc.data()[base * 3..(base + n) * 3], &delta[base..base + n]);
            out[ray * 3..ray * 3 + 3].copy_from_slice(&px);
        }
        let value = Tensor::matrix(r, 3, out)?;
        let rg = self.rg(&[sigma, rgb]);
        Ok(self.push(value, Op::Composite { sigma, rgb, delta }, rg))
    }

    /// Reverse pass from a scalar root. Every trainable leaf receives a
    /// gradient, zero when unreachable.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let rootv = &self.nodes[root.0].value;
        if rootv.numel() != 1 {
            return Err(Error::NonScalarRoot(rootv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(vec![T::one()]);
        }
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && grads[i].is_none() {
                grads[i] = Some(vec![T::zero(); node.value.numel()]);
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for (v, sign) in [(*a, T::one()), (*b, T::one())] {
                    if wants(v) {
                        accumulate(&mut grads[v.0], g.len(), |d| {
                            d.iter_mut().zip(g).for_each(|(d, &g)| *d += sign * g)
                        });
                    }
                }
            }
            Op::Sub(a, b) => {
                for (v, sign) in [(*a, T::one()), (*b, -T::one())] {
                    if wants(v) {
                        accumulate(&mut grads[v.0], g.len(), |d| {
                            d.iter_mut().zip(g).for_each(|(d, &g)| *d += sign * g)
                        });
                    }
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let other = val(*b).data();
                    accumulate(&mut grads[a.0], g.len(), |d| {
                        for ((d, &g), &o) in d.iter_mut().zip(g).zip(other) {
                            *d += g * o;
                        }
                    });
                }
                if wants(*b) {
                    let other = val(*a).data();
                    accumulate(&mut grads[b.0], g.len(), |d| {
                        for ((d, &g), &o) in d.iter_mut().zip(g).zip(other) {
                            *d += g * o;
                        }
                    });
                }
            }
            Op::Scale(a, s) => {
                accumulate(&mut grads[a.0], g.len(), |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g * *s));
            }
            Op::Reshape(a) => {
                accumulate(&mut grads[a.0], g.len(), |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g));
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (n, k) = (ta.shape()[0], ta.shape()[1]);
                let m = tb.shape()[1];
                if wants(*a) {
                    // dA = G B^T
                    accumulate(&mut grads[a.0], n * k, |d| {
                        for i in 0..n {
                            let grow = &g[i * m..(i + 1) * m];
                            for p in 0..k {
                                d[i * k + p] += dot_lanes(grow, &tb.data()[p * m..(p + 1) * m]);
                            }
                        }
                    });
                }
                if wants(*b) {
                    // dB = A^T G
                    accumulate(&mut grads[b.0], k * m, |d| {
                        for i in 0..n {
                            let grow = &g[i * m..(i + 1) * m];
                            for p in 0..k {
                                let av = ta.data()[i * k + p];
                                if av == T::zero() {
                                    continue;
                                }
                                let drow = &mut d[p * m..(p + 1) * m];
                                for (dv, &gv) in drow.iter_mut().zip(grow) {
                                    *dv += av * gv;
                                }
                            }
                        }
                    });
                }
            }
            Op::AddRow(a, row) => {
                if wants(*a) {
                    accumulate(&mut grads[a.0], g.len(), |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g));
                }
                if wants(*row) {
                    let m = val(*row).numel();
                    accumulate(&mut grads[row.0], m, |d| {
                        for chunk in g.chunks(m) {
                            d.iter_mut().zip(chunk).for_each(|(d, &g)| *d += g);
                        }
                    });
                }
            }
            Op::Relu(a) => {
                let x = val(*a).data();
                accumulate(&mut grads[a.0], g.len(), |d| {
                    for ((d, &g), &x) in d.iter_mut().zip(g).zip(x) {
                        if x > T::zero() {
                            *d += g;
                        }
                    }
                });
            }
            Op::Softplus(a) => {
                let x = val(*a).data();
                accumulate(&mut grads[a.0], g.len(), |d| {
                    for ((d, &g), &x) in d.iter_mut().zip(g).zip(x) {
                        *d += g * sigmoid(x);
                    }
                });
            }
            Op::Sigmoid(a) => {
                accumulate(&mut grads[a.0], g.len(), |d| {
                    for ((d, &g), &y) in d.iter_mut().zip(g).zip(out) {
                        *d += g * y * (T::one() - y);
                    }
                });
            }
            Op::Square(a) => {
                let x = val(*a).data();
                let two = T::of(2.0);
                accumulate(&mut grads[a.0], g.len(), |d| {
                    for ((d, &g), &x) in d.iter_mut().zip(g).zip(x) {
                        *d += two * x * g;
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let m = *node.value.shape().last().expect("rank >= 1");
                accumulate(&mut grads[a.0], g.len(), |d| {
                    for ((drow, grow), prow) in d.chunks_mut(m).zip(g.chunks(m)).zip(out.chunks(m)) {
                        let dot: T = grow.iter().zip(prow).map(|(&g, &p)| g * p).sum();
                        for ((d, &g), &p) in drow.iter_mut().zip(grow).zip(prow) {
                            *d += p * (g - dot);
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let n = val(*a).numel();
                accumulate(&mut grads[a.0], n, |d| d.iter_mut().for_each(|d| *d += g[0]));
            }
            Op::Mean(a) => {
                let n = val(*a).numel();
                let s = g[0] / T::of(n as f64);
                accumulate(&mut grads[a.0], n, |d| d.iter_mut().for_each(|d| *d += s));
            }
            Op::SumRows(a) => {
                let t = val(*a);
                let m = t.shape()[1];
                accumulate(&mut grads[a.0], t.numel(), |d| {
                    for drow in d.chunks_mut(m.max(1)) {
                        drow.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
                    }
                });
            }
            Op::ConcatCols(a, b) => {
                let (p, q) = (val(*a).shape()[1], val(*b).shape()[1]);
                let n = node.value.shape()[0];
                if wants(*a) {
                    accumulate(&mut grads[a.0], n * p, |d| {
                        for r in 0..n {
                            for j in 0..p {
                                d[r * p + j] += g[r * (p + q) + j];
                            }
                        }
                    });
                }
                if wants(*b) {
                    accumulate(&mut grads[b.0], n * q, |d| {
                        for r in 0..n {
                            for j in 0..q {
                                d[r * q + j] += g[r * (p + q) + p + j];
                            }
                        }
                    });
                }
            }
            Op::GatherElems(a, idx) => {
                let n = val(*a).numel();
                accumulate(&mut grads[a.0], n, |d| {
                    for (&i, &g) in idx.iter().zip(g) {
                        d[i] += g;
                    }
                });
            }
            Op::GatherScale { src, idx, scale } => {
                let ts = val(*src);
                let c = ts.shape()[1];
                let sc = val(*scale).data();
                if wants(*src) {
                    accumulate(&mut grads[src.0], ts.numel(), |d| {
                        for (r, (&i, &s)) in idx.iter().zip(sc).enumerate() {
                            for j in 0..c {
                                d[i * c + j] += g[r * c + j] * s;
                            }
                        }
                    });
                }
                if wants(*scale) {
                    accumulate(&mut grads[scale.0], sc.len(), |d| {
                        for (r, &i) in idx.iter().enumerate() {
                            let mut acc = T::zero();
                            for j in 0..c {
                                acc += g[r * c + j] * ts.data()[i * c + j];
                            }
                            d[r] += acc;
                        }
                    });
                }
            }
            Op::ScatterAddRows { src, idx } => {
                let ts = val(*src);
                let c = ts.shape()[1];
                accumulate(&mut grads[src.0], ts.numel(), |d| {
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..c {
                            d[r * c + j] += g[i * c + j];
                        }
                    }
                });
            }
            Op::Interp { grid, stencils } => {
                let tg = val(*grid);
                let c = *tg.shape().last().expect("channels");
                accumulate(&mut grads[grid.0], tg.numel(), |d| {
                    for (grow, s) in g.chunks(c).zip(stencils) {
                        for (&i, &w) in s.index.iter().zip(&s.weight) {
                            let drow = &mut d[i * c..(i + 1) * c];
                            for (dv, &gv) in drow.iter_mut().zip(grow) {
                                *dv += w * gv;
                            }
                        }
                    }
                });
            }
            Op::Composite { sigma, rgb, delta } => {
                let (ts, tc) = (val(*sigma), val(*rgb));
                let (r, n) = (ts.shape()[0], ts.shape()[1]);
                let mut dsig = vec![T::zero(); r * n];
                let mut drgb = vec![T::zero(); r * n * 3];
                for ray in 0..r {
                    let base = ray * n;
                    composite_ray_backward(
                        &ts.data()[base..base + n],
                        &tc.data()[base * 3..(base + n) * 3],
                        &delta[base..base + n],
                        &g[ray * 3..ray * 3 + 3],
                        &mut dsig[base..base + n],
                        &mut drgb[base * 3..(base + n) * 3],
                    );
                }
                if wants(*sigma) {
                    accumulate(&mut grads[sigma.0], r * n, |d| d.iter_mut().zip(&dsig).for_each(|(d, &g)| *d += g));
                }
                if wants(*rgb) {
                    accumulate(&mut grads[rgb.0], r * n * 3, |d| d.iter_mut().zip(&drgb).for_each(|(d, &g)| *d += g));
                }
            }
        }
    }
}

/// `out (n, m) = a (n, k) x b (k, m)`, accumulating into a zeroed `out`.
pub(crate) fn matmul_into<T: Real>(a: &[T], b: &[T], out: &mut [T], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Dot product with eight independent accumulators so the loop vectorizes.
fn dot_lanes<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: T = ca.remainder().iter().zip(cb.remainder()).map(|(&x, &y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    acc.iter().copied().sum::<T>() + tail
}

/// Front-to-back compositing of one ray:
/// `alpha_i = 1 - exp(-sigma_i delta_i)`, `T_i = prod_{j<i} (1 - alpha_j)`,
/// `C = sum_i T_i alpha_i c_i`.
pub fn composite_ray<T: Real>(sigma: &[T], rgb: &[T], delta: &[T]) -> [T; 3] {
    let mut px = [T::zero(); 3];
    let mut trans = T::one();
    for (i, (&s, &dt)) in sigma.iter().zip(delta).enumerate() {
        let keep = (-s * dt).exp();
        let w = trans * (T::one() - keep);
        for ch in 0..3 {
            px[ch] += w * rgb[i * 3 + ch];
        }
        trans *= keep;
    }
    px
}

fn composite_ray_backward<T: Real>(sigma: &[T], rgb: &[T], delta: &[T], g: &[T], dsig: &mut [T], drgb: &mut [T]) {
    let n = sigma.len();
    // Forward quantities: weights w_i and transmittance after sample i.
    let mut w = vec![T::zero(); n];
    let mut t_after = vec![T::zero(); n];
    let mut trans = T::one();
    for i in 0..n {
        let keep = (-sigma[i] * delta[i]).exp();
        w[i] = trans * (T::one() - keep);
        trans *= keep;
        t_after[i] = trans;
    }
    // d C / d sigma_i = delta_i * (T_{i+1} (g . c_i) - sum_{k>i} w_k (g . c_k))
    let mut suffix = T::zero();
    for i in (0..n).rev() {
        let gc = g[0] * rgb[i * 3] + g[1] * rgb[i * 3 + 1] + g[2] * rgb[i * 3 + 2];
        dsig[i] += delta[i] * (t_after[i] * gc - suffix);
        suffix += w[i] * gc;
        for ch in 0..3 {
            drgb[i * 3 + ch] += w[i] * g[ch];
        }
    }
}
