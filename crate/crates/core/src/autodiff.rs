//! Define-by-run reverse-mode differentiation on a flat tape.
//!
//! Operations evaluate eagerly and record themselves as [`Node`]s; a backward
//! pass walks the node list in strict reverse order, so gradients from
//! multiple paths accumulate by addition. A tape is cheap to build and is
//! simply dropped after its backward pass; two tapes never share nodes.
//!
//! Broadcasting is limited to what the losses need: 2-D matmul, row-vector
//! bias adds, and column-vector (per-row) combines.

use crate::error::{Error, Result};
use crate::scalar::{c, Scalar};
use crate::special;
use crate::tensor::{matmul_raw, Tensor};

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<S> {
    Leaf,
    /// Input that does not receive a gradient (data, noise, masks).
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, S),
    AddScalar(Var, S),
    Matmul(Var, Var),
    Transpose(Var),
    Relu(Var),
    Softplus(Var),
    Clamp(Var, S, S),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Recip(Var),
    Lgamma(Var),
    Digamma(Var),
    Sum(Var),
    RowSum(Var),
    Diag(Var),
    AddRowVec(Var, Var),
    SubColVec(Var, Var),
    MulColVec(Var, Var),
    DivColVec(Var, Var),
}

struct Node<S> {
    op: Op<S>,
    value: Tensor<S>,
    grad: Option<Vec<S>>,
}

/// Recording tape. Single-threaded by design.
pub struct Tape<S = f64> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<S>, value: Tensor<S>) -> Var {
        self.nodes.push(Node { op, value, grad: None });
        Var(self.nodes.len() - 1)
    }

    /// Registers a differentiable input.
    pub fn leaf(&mut self, t: &Tensor<S>) -> Var {
        self.push(Op::Leaf, t.clone())
    }

    /// Registers a non-differentiable input.
    pub fn constant(&mut self, t: &Tensor<S>) -> Var {
        self.push(Op::Constant, t.clone())
    }

    pub fn scalar_const(&mut self, v: S) -> Var {
        self.push(Op::Constant, Tensor::scalar(v))
    }

    /// Value currently stored at `v`.
    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    /// Gradient buffer of `v` after a backward pass.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Copies value plus gradient out of the tape, stamping `tape_id`.
    pub fn fetch(&self, v: Var) -> Tensor<S> {
        let mut t = self.nodes[v.0].value.clone();
        t.grad = self.nodes[v.0].grad.clone();
        t.tape_id = Some(v.0);
        t
    }

    fn shape_of(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape_of(a) != self.shape_of(b) {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape_of(a),
                self.shape_of(b)
            )));
        }
        Ok(())
    }

    fn zip_values(&mut self, a: Var, b: Var, op: Op<S>, f: impl Fn(S, S) -> S) -> Var {
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape_of(a).to_vec();
        self.push(op, Tensor::from_raw(shape, data))
    }

    fn map_values(&mut self, a: Var, op: Op<S>, f: impl Fn(S) -> S) -> Var {
        let data = self.nodes[a.0].value.data().iter().map(|&x| f(x)).collect();
        let shape = self.shape_of(a).to_vec();
        self.push(op, Tensor::from_raw(shape, data))
    }

    // ---- elementwise and scalar ops ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_values(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_values(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_values(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "div")?;
        Ok(self.zip_values(a, b, Op::Div(a, b), |x, y| x / y))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.map_values(a, Op::Neg(a), |x| -x)
    }

    pub fn scale(&mut self, a: Var, k: S) -> Var {
        self.map_values(a, Op::Scale(a, k), |x| x * k)
    }

    pub fn add_scalar(&mut self, a: Var, k: S) -> Var {
        self.map_values(a, Op::AddScalar(a, k), |x| x + k)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map_values(a, Op::Relu(a), |x| if x > S::zero() { x } else { S::zero() })
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.map_values(a, Op::Softplus(a), special::softplus)
    }

    /// Elementwise clamp; gradient passes through on `[lo, hi]` and is zero
    /// outside.
    pub fn clamp(&mut self, a: Var, lo: S, hi: S) -> Var {
        self.map_values(a, Op::Clamp(a, lo, hi), |x| x.max(lo).min(hi))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map_values(a, Op::Exp(a), |x| x.exp())
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.require_positive(a, "ln")?;
        Ok(self.map_values(a, Op::Ln(a), |x| x.ln()))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.nodes[a.0].value.data().iter().any(|&x| x < S::zero()) {
            return Err(Error::Domain("sqrt of negative value".into()));
        }
        Ok(self.map_values(a, Op::Sqrt(a), |x| x.sqrt()))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.map_values(a, Op::Recip(a), |x| x.recip())
    }

    pub fn lgamma(&mut self, a: Var) -> Result<Var> {
        self.require_positive(a, "lgamma")?;
        Ok(self.map_values(a, Op::Lgamma(a), special::lgamma))
    }

    pub fn digamma(&mut self, a: Var) -> Result<Var> {
        self.require_positive(a, "digamma")?;
        Ok(self.map_values(a, Op::Digamma(a), special::digamma))
    }

    fn require_positive(&self, a: Var, what: &str) -> Result<()> {
        if self.nodes[a.0].value.data().iter().any(|&x| x <= S::zero()) {
            return Err(Error::Domain(format!("{what} requires strictly positive input")));
        }
        Ok(())
    }

    // ---- reductions and structure ----

    /// Full reduction to a `[1]` scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.sum();
        self.push(Op::Sum(a), Tensor::scalar(s))
    }

    /// Mean over all elements.
    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.numel();
        let s = self.sum(a);
        self.scale(s, S::one() / c::<S>(n as f64))
    }

    /// Row sums of an `[m, n]` matrix as an `[m, 1]` column.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.nodes[a.0].value.matrix_dims()?;
        let src = self.nodes[a.0].value.data();
        let mut out = vec![S::zero(); m];
        for i in 0..m {
            out[i] = src[i * n..(i + 1) * n].iter().copied().sum();
        }
        Ok(self.push(Op::RowSum(a), Tensor::from_raw(vec![m, 1], out)))
    }

    /// Main diagonal of a square matrix as an `[m, 1]` column.
    pub fn diag(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.nodes[a.0].value.matrix_dims()?;
        if m != n {
            return Err(Error::Shape(format!("diag of non-square [{m}, {n}]")));
        }
        let src = self.nodes[a.0].value.data();
        let out: Vec<S> = (0..m).map(|i| src[i * n + i]).collect();
        Ok(self.push(Op::Diag(a), Tensor::from_raw(vec![m, 1], out)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.nodes[a.0].value.matrix_dims()?;
        let (k2, n) = self.nodes[b.0].value.matrix_dims()?;
        if k != k2 {
            return Err(Error::Shape(format!("matmul inner dims {k} vs {k2}")));
        }
        let data = matmul_raw(self.nodes[a.0].value.data(), self.nodes[b.0].value.data(), m, k, n);
        Ok(self.push(Op::Matmul(a, b), Tensor::from_raw(vec![m, n], data)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.nodes[a.0].value.transpose()?;
        Ok(self.push(Op::Transpose(a), t))
    }

    /// `[m, n] + [n]`, the bias add.
    pub fn add_rowvec(&mut self, a: Var, v: Var) -> Result<Var> {
        let (m, n) = self.nodes[a.0].value.matrix_dims()?;
        if self.shape_of(v) != [n] {
            return Err(Error::Shape(format!(
                "add_rowvec wants [{n}] vector, got {:?}",
                self.shape_of(v)
            )));
        }
        let mut out = self.nodes[a.0].value.data().to_vec();
        let vv = self.nodes[v.0].value.data();
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = out[i * n + j] + vv[j];
            }
        }
        Ok(self.push(Op::AddRowVec(a, v), Tensor::from_raw(vec![m, n], out)))
    }

    fn colvec_op(&mut self, a: Var, v: Var, op: Op<S>, f: impl Fn(S, S) -> S) -> Result<Var> {
        let (m, n) = self.nodes[a.0].value.matrix_dims()?;
        if self.shape_of(v) != [m, 1] {
            return Err(Error::Shape(format!(
                "column op wants [{m}, 1], got {:?}",
                self.shape_of(v)
            )));
        }
        let av = self.nodes[a.0].value.data();
        let vv = self.nodes[v.0].value.data();
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = f(av[i * n + j], vv[i]);
            }
        }
        Ok(self.push(op, Tensor::from_raw(vec![m, n], out)))
    }

    /// `a[i][j] - v[i]`.
    pub fn sub_colvec(&mut self, a: Var, v: Var) -> Result<Var> {
        self.colvec_op(a, v, Op::SubColVec(a, v), |x, y| x - y)
    }

    /// `a[i][j] * v[i]`.
    pub fn mul_colvec(&mut self, a: Var, v: Var) -> Result<Var> {
        self.colvec_op(a, v, Op::MulColVec(a, v), |x, y| x * y)
    }

    /// `a[i][j] / v[i]`.
    pub fn div_colvec(&mut self, a: Var, v: Var) -> Result<Var> {
        self.colvec_op(a, v, Op::DivColVec(a, v), |x, y| x / y)
    }

    /// Broadcasts an `[m, 1]` column across `n` columns.
    pub fn broadcast_col(&mut self, v: Var, n: usize) -> Result<Var> {
        let m = match self.shape_of(v) {
            [m, 1] => *m,
            other => return Err(Error::Shape(format!("broadcast_col wants [m, 1], got {other:?}"))),
        };
        let ones = self.constant(&Tensor::ones(vec![m, n]));
        self.mul_colvec(ones, v)
    }

    // ---- backward ----

    /// Populates gradients of everything reachable from a scalar loss.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape_of(loss)
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![S::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = self.nodes[idx].grad.take() else { continue };
            let op = self.nodes[idx].op.clone();
            self.propagate(idx, &op, &g);
            self.nodes[idx].grad = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, target: Var, contrib: impl Iterator<Item = S>) {
        let numel = self.nodes[target.0].value.numel();
        let buf = self.nodes[target.0].grad.get_or_insert_with(|| vec![S::zero(); numel]);
        for (slot, v) in buf.iter_mut().zip(contrib) {
            *slot = *slot + v;
        }
    }

    fn propagate(&mut self, idx: usize, op: &Op<S>, g: &[S]) {
        match *op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                self.accumulate(a, g.iter().copied());
                self.accumulate(b, g.iter().copied());
            }
            Op::Sub(a, b) => {
                self.accumulate(a, g.iter().copied());
                self.accumulate(b, g.iter().map(|&v| -v));
            }
            Op::Mul(a, b) => {
                let ga: Vec<S> =
                    g.iter().zip(self.nodes[b.0].value.data()).map(|(&v, &y)| v * y).collect();
                let gb: Vec<S> =
                    g.iter().zip(self.nodes[a.0].value.data()).map(|(&v, &x)| v * x).collect();
                self.accumulate(a, ga.into_iter());
                self.accumulate(b, gb.into_iter());
            }
            Op::Div(a, b) => {
                let ga: Vec<S> =
                    g.iter().zip(self.nodes[b.0].value.data()).map(|(&v, &y)| v / y).collect();
                let gb: Vec<S> = g
                    .iter()
                    .zip(self.nodes[a.0].value.data().iter().zip(self.nodes[b.0].value.data()))
                    .map(|(&v, (&x, &y))| -v * x / (y * y))
                    .collect();
                self.accumulate(a, ga.into_iter());
                self.accumulate(b, gb.into_iter());
            }
            Op::Neg(a) => self.accumulate(a, g.iter().map(|&v| -v)),
            Op::Scale(a, k) => self.accumulate(a, g.iter().map(move |&v| v * k)),
            Op::AddScalar(a, _) => self.accumulate(a, g.iter().copied()),
            Op::Relu(a) => {
                // Subgradient at 0 fixed to 0.
                let ga: Vec<S> = g
                    .iter()
                    .zip(self.nodes[a.0].value.data())
                    .map(|(&v, &x)| if x > S::zero() { v } else { S::zero() })
                    .collect();
                self.accumulate(a, ga.into_iter());
            }
            Op::Softplus(a) => {
                let ga: Vec<S> = g
                    .iter()
                    .zip(self.nodes[a.0].value.data())
                    .map(|(&v, &x)| v * special::sigmoid(x))
                    .collect();
                self.accumulate(a, ga.into_iter());
            }
            Op::Clamp(a, lo, hi) => {
                let ga: Vec<S> = g
                    .iter()
                    .zip(self.nodes[a.0].value.data())
                    .map(|(&v, &x)| if x >= lo && x <= hi { v } else { S::zero() })
                    .collect();
                self.accumulate(a, ga.into_iter());
            }
            Op::Exp(a) => {
                let ga: Vec<S> =
                    g.iter().zip(self.nodes[idx].value.data()).map(|(&v, &e)| v * e).collect();
                self.accumulate(a, ga.into_iter());
            }
            Op::Ln(a) => {
                let ga: Vec<S> =
                    g.iter().zip(self.nodes[a.0].value.data()).map(|(&v, &x)| v / x).collect();
                self.accumulate(a, ga.into_iter());
            }
            Op::Sqrt(a) => {
                let half = c::<S>(0.5);
                let ga: Vec<S> = g
                    .iter()
                    .zip(self.nodes[idx].value.data())
                    .map(|(&v, &r)| v * half / r)
                    .collect();
                self.accumulate(a, ga.into_iter());
            }
            Op::Recip(a) => {
                let ga: Vec<S> = g
                    .iter()
                    .zip(self.nodes[idx].value.data())
                    .map(|(&v, &r)| -v * r * r)
                    .collect();
                self.accumulate(a, ga.into_iter());
            }
            Op::Lgamma(a) => {
                let ga: Vec<S> = g
                    .iter()
                    .zip(self.nodes[a.0].value.data())
                    .map(|(&v, &x)| v * special::digamma(x))
                    .collect();
                self.accumulate(a, ga.into_iter());
            }
            Op::Digamma(a) => {
                let ga: Vec<S> = g
                    .iter()
                    .zip(self.nodes[a.0].value.data())
                    .map(|(&v, &x)| v * special::trigamma(x))
                    .collect();
                self.accumulate(a, ga.into_iter());
            }
            Op::Sum(a) => {
                let n = self.nodes[a.0].value.numel();
                let gv = g[0];
                self.accumulate(a, std::iter::repeat(gv).take(n));
            }
            Op::RowSum(a) => {
                let (m, n) = self.nodes[a.0].value.matrix_dims().expect("recorded as matrix");
                let mut ga = vec![S::zero(); m * n];
                for i in 0..m {
                    for j in 0..n {
                        ga[i * n + j] = g[i];
                    }
                }
                self.accumulate(a, ga.into_iter());
            }
            Op::Diag(a) => {
                let (m, n) = self.nodes[a.0].value.matrix_dims().expect("recorded as matrix");
                let mut ga = vec![S::zero(); m * n];
                for i in 0..m {
                    ga[i * n + i] = g[i];
                }
                self.accumulate(a, ga.into_iter());
            }
            Op::Matmul(a, b) => {
                let (m, k) = self.nodes[a.0].value.matrix_dims().expect("recorded as matrix");
                let n = self.nodes[idx].value.shape()[1];
                // dA = G·Bᵀ, dB = Aᵀ·G
                let bt = self.nodes[b.0].value.transpose().expect("matrix");
                let ga = matmul_raw(g, bt.data(), m, n, k);
                let at = self.nodes[a.0].value.transpose().expect("matrix");
                let gb = matmul_raw(at.data(), g, k, m, n);
                self.accumulate(a, ga.into_iter());
                self.accumulate(b, gb.into_iter());
            }
            Op::Transpose(a) => {
                let (m, n) = self.nodes[a.0].value.matrix_dims().expect("recorded as matrix");
                let mut ga = vec![S::zero(); m * n];
                for i in 0..n {
                    for j in 0..m {
                        ga[j * n + i] = g[i * m + j];
                    }
                }
                self.accumulate(a, ga.into_iter());
            }
            Op::AddRowVec(a, v) => {
                let (m, n) = self.nodes[a.0].value.matrix_dims().expect("recorded as matrix");
                self.accumulate(a, g.iter().copied());
                let mut gv = vec![S::zero(); n];
                for i in 0..m {
                    for j in 0..n {
                        gv[j] = gv[j] + g[i * n + j];
                    }
                }
                self.accumulate(v, gv.into_iter());
            }
            Op::SubColVec(a, v) => {
                let (m, n) = self.nodes[a.0].value.matrix_dims().expect("recorded as matrix");
                self.accumulate(a, g.iter().copied());
                let mut gv = vec![S::zero(); m];
                for i in 0..m {
                    for j in 0..n {
                        gv[i] = gv[i] - g[i * n + j];
                    }
                }
                self.accumulate(v, gv.into_iter());
            }
            Op::MulColVec(a, v) => {
                let (m, n) = self.nodes[a.0].value.matrix_dims().expect("recorded as matrix");
                let vv = self.nodes[v.0].value.data().to_vec();
                let av = self.nodes[a.0].value.data().to_vec();
                let mut ga = vec![S::zero(); m * n];
                let mut gv = vec![S::zero(); m];
                for i in 0..m {
                    for j in 0..n {
                        ga[i * n + j] = g[i * n + j] * vv[i];
                        gv[i] = gv[i] + g[i * n + j] * av[i * n + j];
                    }
                }
                self.accumulate(a, ga.into_iter());
                self.accumulate(v, gv.into_iter());
            }
            Op::DivColVec(a, v) => {
                let (m, n) = self.nodes[a.0].value.matrix_dims().expect("recorded as matrix");
                let vv = self.nodes[v.0].value.data().to_vec();
                let av = self.nodes[a.0].value.data().to_vec();
                let mut ga = vec![S::zero(); m * n];
                let mut gv = vec![S::zero(); m];
                for i in 0..m {
                    for j in 0..n {
                        ga[i * n + j] = g[i * n + j] / vv[i];
                        gv[i] = gv[i] - g[i * n + j] * av[i * n + j] / (vv[i] * vv[i]);
                    }
                }
                self.accumulate(a, ga.into_iter());
                self.accumulate(v, gv.into_iter());
            }
        }
    }
}

/// Central finite-difference check of a scalar tape function.
///
/// `f` must build a deterministic scalar expression from the input var.
/// Returns the maximum over coordinates of
/// `|analytic − central difference| / max(1, |analytic|)`.
///
/// Points where the expression is non-smooth (relu at 0, clamp boundaries)
/// are excluded by contract; the check is meaningless there.
pub fn finite_diff_check<S, F>(f: F, point: &Tensor<S>, step: S) -> Result<S>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, Var) -> Result<Var>,
{
    if step <= S::zero() {
        return Err(Error::Contract("finite_diff_check requires step > 0".into()));
    }
    let eval = |t: &Tensor<S>| -> Result<S> {
        let mut tape = Tape::new();
        let x = tape.leaf(t);
        let out = f(&mut tape, x)?;
        let v = tape.value(out);
        if !v.is_scalar() {
            return Err(Error::Contract("checked function must return a scalar".into()));
        }
        let y = v.data()[0];
        if !y.is_finite() {
            return Err(Error::Numeric("non-finite value in finite_diff_check".into()));
        }
        Ok(y)
    };

    let mut tape = Tape::new();
    let x = tape.leaf(point);
    let out = f(&mut tape, x)?;
    eval(point)?; // also validates scalarness/finiteness on the nominal point
    tape.backward(out)?;
    let analytic = tape.grad(x).expect("leaf reachable from loss").to_vec();

    let mut worst = S::zero();
    for i in 0..point.numel() {
        let mut plus = point.clone();
        plus.data_mut()[i] = plus.data()[i] + step;
        let mut minus = point.clone();
        minus.data_mut()[i] = minus.data()[i] - step;
        let fd = (eval(&plus)? - eval(&minus)?) / (step + step);
        let denom = S::one().max(analytic[i].abs());
        worst = worst.max((analytic[i] - fd).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Pcg32;
    use approx::assert_abs_diff_eq;

    fn randt(rng: &mut Pcg32, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.uniform_range(lo, hi)).collect();
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn square_loss_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_abs_diff_eq!(tape.grad(x).unwrap()[0], 6.0, epsilon = 1e-14);
    }

    #[test]
    fn softplus_gradient_at_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::scalar(0.0));
        let y = tape.softplus(x);
        tape.backward(y).unwrap();
        assert_abs_diff_eq!(tape.grad(x).unwrap()[0], 0.5, epsilon = 1e-14);
    }

    #[test]
    fn relu_subgradient_definition() {
        for (x0, want) in [(-1.0, 0.0), (1.0, 1.0), (0.0, 0.0)] {
            let mut tape = Tape::new();
            let x = tape.leaf(&Tensor::scalar(x0));
            let r = tape.relu(x);
            tape.backward(r).unwrap();
            assert_eq!(tape.grad(x).unwrap()[0], want, "relu grad at {x0}");
        }
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn matmul_sum_gradient_is_ones_bt() {
        let mut rng = Pcg32::new(7);
        let a = randt(&mut rng, vec![4, 3], -1.0, 1.0);
        let b = randt(&mut rng, vec![3, 5], -1.0, 1.0);
        let mut tape = Tape::new();
        let va = tape.leaf(&a);
        let vb = tape.constant(&b);
        let prod = tape.matmul(va, vb).unwrap();
        let loss = tape.sum(prod);
        tape.backward(loss).unwrap();
        // d sum(AB) / dA = ones(4,5) · Bᵀ
        let expect = Tensor::ones(vec![4, 5]).matmul(&b.transpose().unwrap()).unwrap();
        for (g, e) in tape.grad(va).unwrap().iter().zip(expect.data()) {
            assert_abs_diff_eq!(g, e, epsilon = 1e-12);
        }
    }

    #[test]
    fn gradient_accumulates_over_multiple_paths() {
        // loss = x*x + x  =>  d/dx = 2x + 1
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::scalar(1.5));
        let sq = tape.mul(x, x).unwrap();
        let total = tape.add(sq, x).unwrap();
        tape.backward(total).unwrap();
        assert_abs_diff_eq!(tape.grad(x).unwrap()[0], 4.0, epsilon = 1e-14);
    }

    #[test]
    fn finite_diff_on_sum_of_squares() {
        let point = Tensor::vector(vec![0.7, -1.3, 2.1]);
        let err = finite_diff_check(
            |tape, x| {
                let sq = tape.mul(x, x)?;
                Ok(tape.sum(sq))
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "err {err:e}");
    }

    #[test]
    fn finite_diff_composite_sweep() {
        // Composite expression hitting most unary ops on safe ranges.
        let mut rng = Pcg32::new(11);
        for _ in 0..100 {
            let point = randt(&mut rng, vec![4], 0.4, 3.0);
            let err = finite_diff_check(
                |tape, x| {
                    let lg = tape.lgamma(x)?;
                    let sp = tape.softplus(x);
                    let e = tape.exp(sp);
                    let l = tape.ln(e)?;
                    let r = tape.recip(x);
                    let sq = tape.sqrt(x)?;
                    let s1 = tape.add(lg, l)?;
                    let s2 = tape.add(r, sq)?;
                    let m = tape.mul(s1, s2)?;
                    Ok(tape.sum(m))
                },
                &point,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-5, "composite FD err {err:e} at {point:?}");
        }
    }

    #[test]
    fn finite_diff_broadcast_ops() {
        let mut rng = Pcg32::new(23);
        for _ in 0..50 {
            let point = randt(&mut rng, vec![3, 4], 0.5, 2.0);
            let err = finite_diff_check(
                |tape, x| {
                    let rs = tape.row_sum(x)?;
                    let centered = tape.sub_colvec(x, rs)?;
                    let scaled = tape.div_colvec(centered, rs)?;
                    let back = tape.mul_colvec(scaled, rs)?;
                    let sq = tape.mul(back, back)?;
                    Ok(tape.sum(sq))
                },
                &point,
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-5, "broadcast FD err {err:e}");
        }
    }

    #[test]
    fn finite_diff_matmul_transpose_diag() {
        let mut rng = Pcg32::new(31);
        for _ in 0..50 {
            let point = randt(&mut rng, vec![3, 3], -1.5, 1.5);
            let err = finite_diff_check(
                |tape, x| {
                    let xt = tape.transpose(x)?;
                    let prod = tape.matmul(x, xt)?;
                    let d = tape.diag(prod)?;
                    let off = tape.sum(prod);
                    let don = tape.sum(d);
                    let neg = tape.neg(don);
                    Ok(tape.add(off, neg).unwrap())
                },
                &point,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-6, "matmul FD err {err:e}");
        }
    }

    #[test]
    fn backward_is_bit_deterministic() {
        let mut rng = Pcg32::new(5);
        let a = randt(&mut rng, vec![6, 6], -2.0, 2.0);
        let run = || {
            let mut tape = Tape::new();
            let x = tape.leaf(&a);
            let xt = tape.transpose(x).unwrap();
            let p = tape.matmul(x, xt).unwrap();
            let sp = tape.softplus(p);
            let loss = tape.sum(sp);
            tape.backward(loss).unwrap();
            tape.grad(x).unwrap().to_vec()
        };
        let g1 = run();
        let g2 = run();
        assert!(g1.iter().zip(&g2).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn lgamma_domain_error_on_tape() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::vector(vec![1.0, -0.5]));
        assert!(matches!(tape.lgamma(x), Err(Error::Domain(_))));
    }

    #[test]
    fn fetch_carries_grad_and_tape_id() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::scalar(2.0));
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        let fetched = tape.fetch(x);
        assert_eq!(fetched.tape_id, Some(x.id()));
        assert_eq!(fetched.grad.as_deref(), Some(&[4.0][..]));
    }
}
