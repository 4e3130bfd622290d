use crate::error::{Error, Result};
use crate::linalg::{gemm, Lu, Mat};
use crate::pnn::{StableActivation, MAX_ACTIVATION_ORDER};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    /// `op(a) · op(b)`
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    Scale(Var, f64),
    /// `a · s` with `s` a `1x1` node.
    ScaleBy(Var, Var),
    /// `a + b` with `b` a column broadcast across columns.
    AddCol(Var, Var),
    /// Row `i` of `a` times `s[i]`.
    ScaleRows(Var, Var),
    /// Column `j` of `a` times `s[j]`.
    ScaleCols(Var, Var),
    AddDiag(Var, f64),
    AddScalar(Var, f64),
    Inverse(Var),
    Transpose(Var),
    Act(Var, StableActivation, u8),
    /// `(n x b) -> (pn x b)`: `p` stacked copies scaled by `1/√p`.
    Widen(Var, usize),
    /// Adjoint of `Widen`: sum of the `p` row chunks scaled by `1/√p`.
    Narrow(Var, usize),
    RowSlice(Var, usize, usize),
    VStack(Var, Var),
    Sum(Var),
    SumSq(Var),
    /// Per-column squared norm, `1 x b`.
    ColSumSq(Var),
    /// Per-column sum, `1 x b`.
    ColSum(Var),
    /// `ln|a|` elementwise.
    Log(Var),
    Recip(Var),
    /// `log|det J_b|` per column `b`, where column `j` of `J_b` is column
    /// `b` of the `j`-th input.
    BatchLogDet(Vec<Var>),
    /// Forward value supplied externally; backward passes through to `src`.
    StraightThrough(Var),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul { a, b, .. } => vec![*a, *b],
            Add(a, b) | Sub(a, b) | Hadamard(a, b) | ScaleBy(a, b) | AddCol(a, b)
            | ScaleRows(a, b) | ScaleCols(a, b) | VStack(a, b) => vec![*a, *b],
            Scale(a, _) | AddDiag(a, _) | AddScalar(a, _) | Inverse(a) | Transpose(a)
            | Act(a, _, _) | Widen(a, _) | Narrow(a, _) | RowSlice(a, _, _) | Sum(a)
            | SumSq(a) | ColSumSq(a) | ColSum(a) | Log(a) | Recip(a) | StraightThrough(a) => {
                vec![*a]
            }
            BatchLogDet(cols) => cols.clone(),
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Mat,
}

/// Reverse-mode tape over a closed set of matrix primitives.
///
/// Nodes are appended in evaluation order, so every node's inputs precede
/// it. Forward-mode tangents ([`Tape::jvp`]) are themselves recorded as
/// ordinary nodes, which makes Jacobian entries differentiable by a second
/// reverse sweep.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<Var>,
}

/// Gradients from one reverse sweep, indexed by node.
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Mat>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, zero-filled to `shape` if nothing reached it.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Mat {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Mat::zeros(shape.0, shape.1))
    }

    /// All registered parameter gradients, flattened in registration order.
    pub fn params_flat(&self, tape: &Tape) -> Vec<f64> {
        let mut out = Vec::with_capacity(tape.param_count());
        for &p in &tape.params {
            match self.get(p) {
                Some(g) => out.extend_from_slice(g.as_slice()),
                None => out.extend(std::iter::repeat_n(0.0, tape.value(p).as_slice().len())),
            }
        }
        out
    }
}

fn widen(a: &Mat, p: usize) -> Mat {
    let n = a.rows();
    let s = 1.0 / (p as f64).sqrt();
    Mat::from_fn(n * p, a.cols(), |i, j| s * a[(i % n, j)])
}

fn narrow(a: &Mat, p: usize) -> Mat {
    let n = a.rows() / p;
    let s = 1.0 / (p as f64).sqrt();
    let mut out = Mat::zeros(n, a.cols());
    for c in 0..p {
        out.add_assign(&a.row_slice(c * n, n));
    }
    out.scale(s)
}

fn jacobian_of_column(cols: &[&Mat], b: usize) -> Mat {
    let n = cols.len();
    Mat::from_fn(n, n, |i, j| cols[j][(i, b)])
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.as_slice()[0]
    }

    /// Registered parameters in registration order.
    pub fn params(&self) -> &[Var] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params
            .iter()
            .map(|&p| self.value(p).as_slice().len())
            .sum()
    }

    fn push(&mut self, op: Op, value: Mat) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    /// Input or constant.
    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(Op::Leaf, value)
    }

    /// Differentiable parameter; its gradient appears in [`Grads::params_flat`].
    pub fn param(&mut self, value: Mat) -> Var {
        let v = self.leaf(value);
        self.params.push(v);
        v
    }

    fn eval(&self, op: &Op) -> Result<Mat> {
        use Op::*;
        let v = |x: &Var| &self.nodes[x.0].value;
        Ok(match op {
            Leaf | StraightThrough(_) => unreachable!("leaf values are stored, not evaluated"),
            MatMul { a, b, ta, tb } => {
                let (ka, kb) = (
                    if *ta { v(a).rows() } else { v(a).cols() },
                    if *tb { v(b).cols() } else { v(b).rows() },
                );
                if ka != kb {
                    return Err(Error::shape(
                        "matmul",
                        format!("{:?} (t={ta}) x {:?} (t={tb})", v(a).shape(), v(b).shape()),
                    ));
                }
                gemm(v(a), *ta, v(b), *tb)
            }
            Add(a, b) | Sub(a, b) | Hadamard(a, b) => {
                if v(a).shape() != v(b).shape() {
                    return Err(Error::shape(
                        "elementwise",
                        format!("{:?} vs {:?}", v(a).shape(), v(b).shape()),
                    ));
                }
                match op {
                    Add(..) => v(a).add(v(b)),
                    Sub(..) => v(a).sub(v(b)),
                    _ => v(a).hadamard(v(b)),
                }
            }
            Scale(a, s) => v(a).scale(*s),
            ScaleBy(a, s) => {
                if v(s).shape() != (1, 1) {
                    return Err(Error::shape("scale_by", "scale must be 1x1"));
                }
                v(a).scale(v(s)[(0, 0)])
            }
            AddCol(a, b) => {
                if v(b).shape() != (v(a).rows(), 1) {
                    return Err(Error::shape(
                        "add_col",
                        format!("{:?} + {:?}", v(a).shape(), v(b).shape()),
                    ));
                }
                v(a).add_col(v(b))
            }
            ScaleRows(a, s) => {
                if v(s).shape() != (v(a).rows(), 1) {
                    return Err(Error::shape("scale_rows", "scale length mismatch"));
                }
                v(a).scale_rows(v(s))
            }
            ScaleCols(a, s) => {
                if v(s).shape() != (1, v(a).cols()) {
                    return Err(Error::shape("scale_cols", "scale length mismatch"));
                }
                v(a).scale_cols(v(s))
            }
            AddDiag(a, s) => v(a).add_diag(*s),
            AddScalar(a, s) => v(a).map(|x| x + s),
            Inverse(a) => Lu::new(v(a))?.inverse()?,
            Transpose(a) => v(a).transpose(),
            Act(a, act, k) => {
                let (act, k) = (*act, *k);
                v(a).map(|x| act.derivative(x, k))
            }
            Widen(a, p) => widen(v(a), *p),
            Narrow(a, p) => {
                if v(a).rows() % p != 0 {
                    return Err(Error::shape("narrow", "rows not divisible by p"));
                }
                narrow(v(a), *p)
            }
            RowSlice(a, s, l) => {
                if s + l > v(a).rows() {
                    return Err(Error::shape("row_slice", "slice out of range"));
                }
                v(a).row_slice(*s, *l)
            }
            VStack(a, b) => v(a).vstack(v(b))?,
            Sum(a) => Mat::filled(1, 1, v(a).sum()),
            SumSq(a) => Mat::filled(1, 1, v(a).sum_sq()),
            ColSumSq(a) => v(a).map(|x| x * x).col_sums(),
            ColSum(a) => v(a).col_sums(),
            Log(a) => v(a).map(|x| x.abs().ln()),
            Recip(a) => v(a).map(|x| 1.0 / x),
            BatchLogDet(cols) => {
                let n = cols.len();
                let ms: Vec<&Mat> = cols.iter().map(v).collect();
                let b = ms.first().map_or(0, |m| m.cols());
                if ms.iter().any(|m| m.shape() != (n, b)) {
                    return Err(Error::shape("batch_logdet", "columns must all be n x b"));
                }
                let mut out = Mat::zeros(1, b);
                for k in 0..b {
                    out[(0, k)] = Lu::new(&jacobian_of_column(&ms, k))?.logabsdet().value();
                }
                out
            }
        })
    }

    fn record(&mut self, op: Op) -> Result<Var> {
        let value = self.eval(&op)?;
        Ok(self.push(op, value))
    }

    // The builders below panic on shape errors: the architecture is static,
    // so a mismatch is a programming error. `try_*` variants exist where the
    // failure is data-dependent.

    fn rec(&mut self, op: Op) -> Var {
        match self.record(op) {
            Ok(v) => v,
            Err(e) => panic!("tape: {e}"),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.rec(Op::MatMul { a, b, ta: false, tb: false })
    }

    /// `aᵀ · b`
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Var {
        self.rec(Op::MatMul { a, b, ta: true, tb: false })
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        self.rec(Op::MatMul { a, b, ta: false, tb: true })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.rec(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.rec(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.rec(Op::Hadamard(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.rec(Op::Scale(a, s))
    }

    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        self.rec(Op::ScaleBy(a, s))
    }

    pub fn add_col(&mut self, a: Var, b: Var) -> Var {
        self.rec(Op::AddCol(a, b))
    }

    pub fn scale_rows(&mut self, a: Var, s: Var) -> Var {
        self.rec(Op::ScaleRows(a, s))
    }

    pub fn scale_cols(&mut self, a: Var, s: Var) -> Var {
        self.rec(Op::ScaleCols(a, s))
    }

    pub fn add_diag(&mut self, a: Var, s: f64) -> Var {
        self.rec(Op::AddDiag(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.rec(Op::AddScalar(a, s))
    }

    pub fn inverse(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Inverse(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        self.rec(Op::Transpose(a))
    }

    /// Elementwise activation derivative of `order` (0 = the activation).
    pub fn act(&mut self, a: Var, act: StableActivation, order: u8) -> Var {
        assert!(order <= MAX_ACTIVATION_ORDER, "activation order {order} unsupported");
        self.rec(Op::Act(a, act, order))
    }

    pub fn widen(&mut self, a: Var, p: usize) -> Var {
        self.rec(Op::Widen(a, p))
    }

    pub fn narrow(&mut self, a: Var, p: usize) -> Var {
        self.rec(Op::Narrow(a, p))
    }

    pub fn row_slice(&mut self, a: Var, start: usize, len: usize) -> Var {
        self.rec(Op::RowSlice(a, start, len))
    }

    pub fn vstack(&mut self, a: Var, b: Var) -> Var {
        self.rec(Op::VStack(a, b))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.rec(Op::Sum(a))
    }

    pub fn sum_sq(&mut self, a: Var) -> Var {
        self.rec(Op::SumSq(a))
    }

    pub fn col_sum_sq(&mut self, a: Var) -> Var {
        self.rec(Op::ColSumSq(a))
    }

    pub fn col_sum(&mut self, a: Var) -> Var {
        self.rec(Op::ColSum(a))
    }

    pub fn log_abs(&mut self, a: Var) -> Var {
        self.rec(Op::Log(a))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.rec(Op::Recip(a))
    }

    /// Per-column `log|det|` of the batch of Jacobians whose `j`-th columns
    /// are the columns of `cols[j]`. Fails if any Jacobian is singular.
    pub fn batch_logdet(&mut self, cols: &[Var]) -> Result<Var> {
        let v = self.record(Op::BatchLogDet(cols.to_vec()))?;
        if self.value(v).as_slice().iter().any(|x| *x == f64::NEG_INFINITY) {
            return Err(Error::Singular);
        }
        Ok(v)
    }

    /// Node whose forward value is `value` but whose backward pass treats
    /// it as the identity map of `src`.
    pub fn straight_through(&mut self, src: Var, value: Mat) -> Var {
        assert_eq!(self.value(src).shape(), value.shape());
        self.push(Op::StraightThrough(src), value)
    }

    /// Recompute every non-leaf node from its inputs. Returns `true` when
    /// all recomputed values are bitwise equal to the recorded ones.
    pub fn replay(&self) -> Result<bool> {
        let mut same = true;
        for node in &self.nodes {
            if matches!(node.op, Op::Leaf | Op::StraightThrough(_)) {
                continue;
            }
            let v = self.eval(&node.op)?;
            same &= v
                .as_slice()
                .iter()
                .zip(node.value.as_slice())
                .all(|(a, b)| a.to_bits() == b.to_bits());
        }
        Ok(same)
    }

    /// Record the directional derivative of `output` with respect to
    /// `input` along `tangent`. Returns `None` when `output` does not depend
    /// on `input`. The tangent nodes are ordinary tape nodes and can be
    /// differentiated again.
    pub fn jvp(&mut self, input: Var, tangent: Var, output: Var) -> Result<Option<Var>> {
        if self.value(input).shape() != self.value(tangent).shape() {
            return Err(Error::shape(
                "jvp",
                format!(
                    "tangent {:?} vs input {:?}",
                    self.value(tangent).shape(),
                    self.value(input).shape()
                ),
            ));
        }
        if output < input {
            return Ok(None);
        }
        let mut tan: Vec<Option<Var>> = vec![None; output.0 + 1 - input.0];
        tan[0] = Some(tangent);
        for i in input.0 + 1..=output.0 {
            let op = self.nodes[i].op.clone();
            let t = |v: &Var| -> Option<Var> {
                if v.0 >= input.0 && v.0 <= output.0 {
                    tan[v.0 - input.0]
                } else {
                    None
                }
            };
            if op.inputs().iter().all(|x| t(x).is_none()) {
                continue;
            }
            let me = Var(i);
            use Op::*;
            let out = match op {
                Leaf => None,
                MatMul { a, b, ta, tb } => {
                    let l = t(&a).map(|da| self.rec(MatMul { a: da, b, ta, tb }));
                    let r = t(&b).map(|db| self.rec(MatMul { a, b: db, ta, tb }));
                    self.sum_opt(l, r)
                }
                Add(a, b) => self.sum_opt(t(&a), t(&b)),
                Sub(a, b) => {
                    let r = t(&b).map(|db| self.scale(db, -1.0));
                    self.sum_opt(t(&a), r)
                }
                Hadamard(a, b) => {
                    let l = t(&a).map(|da| self.mul(da, b));
                    let r = t(&b).map(|db| self.mul(a, db));
                    self.sum_opt(l, r)
                }
                Scale(a, s) => t(&a).map(|da| self.scale(da, s)),
                ScaleBy(a, s) => {
                    let l = t(&a).map(|da| self.scale_by(da, s));
                    let r = t(&s).map(|ds| self.scale_by(a, ds));
                    self.sum_opt(l, r)
                }
                AddCol(a, b) => match (t(&a), t(&b)) {
                    (Some(da), Some(db)) => Some(self.add_col(da, db)),
                    (Some(da), None) => Some(da),
                    (None, Some(db)) => {
                        let z = self.leaf(Mat::zeros(self.value(a).rows(), self.value(a).cols()));
                        Some(self.add_col(z, db))
                    }
                    (None, None) => None,
                },
                ScaleRows(a, s) => {
                    let l = t(&a).map(|da| self.scale_rows(da, s));
                    let r = t(&s).map(|ds| self.scale_rows(a, ds));
                    self.sum_opt(l, r)
                }
                ScaleCols(a, s) => {
                    let l = t(&a).map(|da| self.scale_cols(da, s));
                    let r = t(&s).map(|ds| self.scale_cols(a, ds));
                    self.sum_opt(l, r)
                }
                AddDiag(a, _) | AddScalar(a, _) => t(&a),
                Inverse(a) => {
                    let da = t(&a).unwrap();
                    let left = self.matmul(me, da);
                    let both = self.matmul(left, me);
                    Some(self.scale(both, -1.0))
                }
                Transpose(a) => t(&a).map(|da| self.transpose(da)),
                Act(a, act, k) => {
                    if k >= MAX_ACTIVATION_ORDER {
                        return Err(Error::invalid(
                            "activation derivatives beyond third order are not supported",
                        ));
                    }
                    let da = t(&a).unwrap();
                    let d = self.act(a, act, k + 1);
                    Some(self.mul(d, da))
                }
                Widen(a, p) => t(&a).map(|da| self.widen(da, p)),
                Narrow(a, p) => t(&a).map(|da| self.narrow(da, p)),
                RowSlice(a, s, l) => t(&a).map(|da| self.row_slice(da, s, l)),
                VStack(a, b) => {
                    let da = t(&a).unwrap_or_else(|| {
                        let (r, c) = self.value(a).shape();
                        self.leaf(Mat::zeros(r, c))
                    });
                    let db = t(&b).unwrap_or_else(|| {
                        let (r, c) = self.value(b).shape();
                        self.leaf(Mat::zeros(r, c))
                    });
                    Some(self.vstack(da, db))
                }
                Sum(a) => t(&a).map(|da| self.sum(da)),
                SumSq(a) => t(&a).map(|da| {
                    let p = self.mul(a, da);
                    let s = self.sum(p);
                    self.scale(s, 2.0)
                }),
                ColSumSq(a) => t(&a).map(|da| {
                    let p = self.mul(a, da);
                    let s = self.col_sum(p);
                    self.scale(s, 2.0)
                }),
                ColSum(a) => t(&a).map(|da| self.col_sum(da)),
                Log(a) => t(&a).map(|da| {
                    let r = self.recip(a);
                    self.mul(da, r)
                }),
                Recip(a) => t(&a).map(|da| {
                    let sq = self.mul(me, me);
                    let p = self.mul(sq, da);
                    self.scale(p, -1.0)
                }),
                BatchLogDet(_) => {
                    return Err(Error::invalid("forward-mode through batch_logdet is not supported"))
                }
                StraightThrough(a) => t(&a),
            };
            tan[i - input.0] = out;
        }
        Ok(tan[output.0 - input.0])
    }

    fn sum_opt(&mut self, a: Option<Var>, b: Option<Var>) -> Option<Var> {
        match (a, b) {
            (Some(a), Some(b)) => Some(self.add(a, b)),
            (a, None) => a,
            (None, b) => b,
        }
    }

    /// Full reverse sweep from `output` seeded with `seed`.
    pub fn backward(&self, output: Var, seed: Mat) -> Result<Grads> {
        self.backward_wrt(output, seed, &[])
    }

    /// Reverse sweep restricted to nodes that depend on at least one of
    /// `wrt` (all nodes when `wrt` is empty).
    pub fn backward_wrt(&self, output: Var, seed: Mat, wrt: &[Var]) -> Result<Grads> {
        if self.value(output).shape() != seed.shape() {
            return Err(Error::shape(
                "backward",
                format!(
                    "seed {:?} vs output {:?}",
                    seed.shape(),
                    self.value(output).shape()
                ),
            ));
        }
        let n = output.0 + 1;
        let relevant: Vec<bool> = if wrt.is_empty() {
            vec![true; n]
        } else {
            let mut r = vec![false; n];
            for w in wrt {
                if w.0 < n {
                    r[w.0] = true;
                }
            }
            for i in 0..n {
                if !r[i] && self.nodes[i].op.inputs().iter().any(|x| r[x.0]) {
                    r[i] = true;
                }
            }
            r
        };
        let mut grads: Vec<Option<Mat>> = vec![None; n];
        grads[output.0] = Some(seed);
        for i in (0..n).rev() {
            if !relevant[i] {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &relevant, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn backprop_node(
        &self,
        i: usize,
        g: &Mat,
        relevant: &[bool],
        grads: &mut [Option<Mat>],
    ) -> Result<()> {
        use Op::*;
        let v = |x: &Var| &self.nodes[x.0].value;
        let mut acc = |x: Var, d: Mat| {
            if !relevant[x.0] {
                return;
            }
            match &mut grads[x.0] {
                Some(e) => e.add_assign(&d),
                slot @ None => *slot = Some(d),
            }
        };
        let want = |x: &Var| relevant[x.0];
        match &self.nodes[i].op {
            Leaf => {}
            MatMul { a, b, ta, tb } => {
                let (ta, tb) = (*ta, *tb);
                if want(a) {
                    let d = if ta { gemm(v(b), tb, g, true) } else { gemm(g, false, v(b), !tb) };
                    acc(*a, d);
                }
                if want(b) {
                    let d = if tb { gemm(g, true, v(a), ta) } else { gemm(v(a), !ta, g, false) };
                    acc(*b, d);
                }
            }
            Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.scale(-1.0));
            }
            Hadamard(a, b) => {
                if want(a) {
                    acc(*a, g.hadamard(v(b)));
                }
                if want(b) {
                    acc(*b, g.hadamard(v(a)));
                }
            }
            Scale(a, s) => acc(*a, g.scale(*s)),
            ScaleBy(a, s) => {
                if want(a) {
                    acc(*a, g.scale(v(s)[(0, 0)]));
                }
                if want(s) {
                    acc(*s, Mat::filled(1, 1, g.dot(v(a))));
                }
            }
            AddCol(a, b) => {
                acc(*a, g.clone());
                if want(b) {
                    acc(*b, g.row_sums());
                }
            }
            ScaleRows(a, s) => {
                if want(a) {
                    acc(*a, g.scale_rows(v(s)));
                }
                if want(s) {
                    acc(*s, g.hadamard(v(a)).row_sums());
                }
            }
            ScaleCols(a, s) => {
                if want(a) {
                    acc(*a, g.scale_cols(v(s)));
                }
                if want(s) {
                    acc(*s, g.hadamard(v(a)).col_sums());
                }
            }
            AddDiag(a, _) | AddScalar(a, _) | StraightThrough(a) => acc(*a, g.clone()),
            Inverse(a) => {
                let y = &self.nodes[i].value;
                acc(*a, gemm(&gemm(y, true, g, false), false, y, true).scale(-1.0));
            }
            Transpose(a) => acc(*a, g.transpose()),
            Act(a, act, k) => {
                if *k >= MAX_ACTIVATION_ORDER {
                    return Err(Error::invalid(
                        "activation derivatives beyond third order are not supported",
                    ));
                }
                let (act, k) = (*act, *k + 1);
                acc(*a, g.zip_map(v(a), |gi, x| gi * act.derivative(x, k)));
            }
            Widen(a, p) => acc(*a, narrow(g, *p)),
            Narrow(a, p) => acc(*a, widen(g, *p)),
            RowSlice(a, s, _) => {
                let (r, c) = v(a).shape();
                let mut d = Mat::zeros(r, c);
                for k in 0..g.rows() {
                    for j in 0..c {
                        d[(s + k, j)] = g[(k, j)];
                    }
                }
                acc(*a, d);
            }
            VStack(a, b) => {
                let ra = v(a).rows();
                acc(*a, g.row_slice(0, ra));
                acc(*b, g.row_slice(ra, g.rows() - ra));
            }
            Sum(a) => {
                let (r, c) = v(a).shape();
                acc(*a, Mat::filled(r, c, g[(0, 0)]));
            }
            SumSq(a) => acc(*a, v(a).scale(2.0 * g[(0, 0)])),
            ColSumSq(a) => acc(*a, v(a).scale_cols(g).scale(2.0)),
            ColSum(a) => {
                let (r, c) = v(a).shape();
                acc(*a, Mat::from_fn(r, c, |_, j| g[(0, j)]));
            }
            Log(a) => acc(*a, g.zip_map(v(a), |gi, x| gi / x)),
            Recip(a) => acc(*a, g.zip_map(v(a), |gi, x| -gi / (x * x))),
            BatchLogDet(cols) => {
                let ms: Vec<&Mat> = cols.iter().map(v).collect();
                let n = ms.len();
                let b = g.cols();
                let mut d: Vec<Mat> = (0..n).map(|_| Mat::zeros(n, b)).collect();
                for k in 0..b {
                    let lu = Lu::new(&jacobian_of_column(&ms, k))?;
                    // d log|det J| / dJ = J^{-T}; column j of it belongs to cols[j].
                    let inv = lu.inverse()?;
                    for (j, dj) in d.iter_mut().enumerate() {
                        for r in 0..n {
                            dj[(r, k)] = g[(0, k)] * inv[(j, r)];
                        }
                    }
                }
                for (c, dc) in cols.iter().zip(d) {
                    acc(*c, dc);
                }
            }
        }
        Ok(())
    }
}
