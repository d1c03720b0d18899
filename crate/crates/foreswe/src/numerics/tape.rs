//! Reverse-mode gradient tape over named parameter matrices.
//!
//! The tape records a scalar-valued computation as a Wengert list of matrix
//! operations. Values are computed eagerly as the graph is built; `forward`
//! replays the identical recomputation (bit-for-bit, fixed evaluation order),
//! which is what `grad_check` leans on when it perturbs parameter entries and
//! compares analytic adjoints against central differences.
//!
//! Operations cover exactly what the encoder loss and the GP marginal
//! likelihoods need: dense linear algebra, row softmax, elementwise
//! transcendentals, Cholesky factors with the shared jitter policy,
//! triangular solves, and a fused coregionalized-RBF Gram constructor whose
//! adjoint is derived in place (storing per-component Gram terms would
//! otherwise dominate memory).

use std::collections::BTreeMap;

use super::matrix::Matrix;
use super::{cholesky_with_jitter, solve_lower, solve_lower_transpose, NumericsError};
use crate::scalar::Scalar;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

/// Inputs of the fused coregionalized Gram operation.
///
/// Entry `(i, j)` of the result is
/// `sum_c zl[i,c] * zr[j,c] * sig_c^2 * exp(-||rl_i - rr_j||^2 / (2 len_c^2))`
/// with `len_c = exp(log_len[c])` and `sig_c = exp(log_sig[c])`.
#[derive(Debug, Clone, Copy)]
pub struct LmcGramSpec {
    /// Left temporal mixing weights, `nl x tau`.
    pub zl: TensorId,
    /// Right temporal mixing weights, `nr x tau`.
    pub zr: TensorId,
    /// Left spatial inputs, `nl x d`.
    pub rl: TensorId,
    /// Right spatial inputs, `nr x d`.
    pub rr: TensorId,
    /// Per-component log length-scales, `tau x 1`.
    pub log_len: TensorId,
    /// Per-component log amplitudes, `tau x 1`.
    pub log_sig: TensorId,
}

enum Op<T> {
    Constant,
    Param,
    Add(usize, usize),
    Sub(usize, usize),
    Neg(usize),
    Scale(usize, T),
    Hadamard(usize, usize),
    MatMul(usize, usize),
    Transpose(usize),
    Exp(usize),
    Ln(usize),
    SoftmaxRows(usize),
    SumAll(usize),
    MeanAll(usize),
    /// Elementwise product with a 1x1 node.
    MulScalar { mat: usize, scalar: usize },
    /// Broadcast add of a 1x1 node.
    AddScalar { mat: usize, scalar: usize },
    /// Add `scalar * I` to a square matrix (1x1 scalar node).
    AddDiag { mat: usize, scalar: usize },
    /// Add a `1 x m` row to every row of an `n x m` matrix.
    AddRowBroadcast { mat: usize, row: usize },
    VStack(Vec<usize>),
    HStack(Vec<usize>),
    SliceRows { x: usize, start: usize, len: usize },
    GatherRows { x: usize, indices: Vec<usize> },
    /// Lower Cholesky factor with the escalating jitter policy. The jitter
    /// magnitude is treated as locally constant (its dependence on the input
    /// diagonal is far below gradient-check tolerances).
    Cholesky(usize),
    /// `L^{-1} B` for lower-triangular `L`.
    SolveLower { l: usize, b: usize },
    /// `L^{-T} B` for lower-triangular `L`.
    SolveLowerT { l: usize, b: usize },
    /// Sum of the natural logs of the diagonal (1x1 output).
    SumLnDiag(usize),
    LmcGram { zl: usize, zr: usize, rl: usize, rr: usize, log_len: usize, log_sig: usize },
}

/// Reverse-mode tape; see the module docs.
pub struct GradientTape<T: Scalar> {
    ops: Vec<Op<T>>,
    values: Vec<Matrix<T>>,
    grads: Vec<Matrix<T>>,
    /// Cached squared-distance matrix per LmcGram node.
    aux: Vec<Option<Matrix<T>>>,
    params: BTreeMap<String, usize>,
    output: Option<usize>,
}

impl<T: Scalar> Default for GradientTape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> GradientTape<T> {
    pub fn new() -> Self {
        GradientTape {
            ops: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            aux: Vec::new(),
            params: BTreeMap::new(),
            output: None,
        }
    }

    fn push(&mut self, op: Op<T>, value: Matrix<T>, aux: Option<Matrix<T>>) -> TensorId {
        self.ops.push(op);
        self.values.push(value);
        self.aux.push(aux);
        TensorId(self.ops.len() - 1)
    }

    /// Register a constant leaf.
    pub fn constant(&mut self, value: Matrix<T>) -> TensorId {
        self.push(Op::Constant, value, None)
    }

    /// Convenience 1x1 constant.
    pub fn constant_scalar(&mut self, value: T) -> TensorId {
        self.constant(Matrix::scalar(value))
    }

    /// Register a named parameter leaf. Names must be unique per tape.
    pub fn param(&mut self, name: &str, value: Matrix<T>) -> TensorId {
        assert!(
            !self.params.contains_key(name),
            "parameter '{name}' registered twice on one tape"
        );
        let id = self.push(Op::Param, value, None);
        self.params.insert(name.to_string(), id.0);
        id
    }

    pub fn value(&self, id: TensorId) -> &Matrix<T> {
        &self.values[id.0]
    }

    /// Value of a 1x1 node.
    pub fn scalar_value(&self, id: TensorId) -> T {
        self.values[id.0].as_scalar()
    }

    /// Current value of a named parameter.
    pub fn param_value(&self, name: &str) -> Result<&Matrix<T>, NumericsError> {
        let id = self.param_id(name)?;
        Ok(&self.values[id])
    }

    /// Overwrite a named parameter's value (shape must match).
    pub fn set_param(&mut self, name: &str, value: Matrix<T>) -> Result<(), NumericsError> {
        let id = self.param_id(name)?;
        assert_eq!(self.values[id].shape(), value.shape(), "set_param shape mismatch for '{name}'");
        self.values[id] = value;
        Ok(())
    }

    /// Names of all registered parameters, sorted.
    pub fn param_names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    fn param_id(&self, name: &str) -> Result<usize, NumericsError> {
        self.params
            .get(name)
            .copied()
            .ok_or_else(|| NumericsError::UnknownParameter { name: name.to_string() })
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let value = self.values[a.0].add(&self.values[b.0]);
        self.push(Op::Add(a.0, b.0), value, None)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let value = self.values[a.0].sub(&self.values[b.0]);
        self.push(Op::Sub(a.0, b.0), value, None)
    }

    pub fn neg(&mut self, a: TensorId) -> TensorId {
        let value = self.values[a.0].scale(-T::one());
        self.push(Op::Neg(a.0), value, None)
    }

    pub fn scale(&mut self, a: TensorId, c: T) -> TensorId {
        let value = self.values[a.0].scale(c);
        self.push(Op::Scale(a.0, c), value, None)
    }

    pub fn hadamard(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let value = self.values[a.0].hadamard(&self.values[b.0]);
        self.push(Op::Hadamard(a.0, b.0), value, None)
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let value = self.values[a.0].matmul(&self.values[b.0]);
        self.push(Op::MatMul(a.0, b.0), value, None)
    }

    pub fn transpose(&mut self, a: TensorId) -> TensorId {
        let value = self.values[a.0].transpose();
        self.push(Op::Transpose(a.0), value, None)
    }

    pub fn exp(&mut self, a: TensorId) -> TensorId {
        let value = self.values[a.0].map(|v| v.exp());
        self.push(Op::Exp(a.0), value, None)
    }

    pub fn ln(&mut self, a: TensorId) -> TensorId {
        let value = self.values[a.0].map(|v| v.ln());
        self.push(Op::Ln(a.0), value, None)
    }

    pub fn softmax_rows(&mut self, a: TensorId) -> TensorId {
        let value = super::softmax_rows(&self.values[a.0]);
        self.push(Op::SoftmaxRows(a.0), value, None)
    }

    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let value = Matrix::scalar(self.values[a.0].sum());
        self.push(Op::SumAll(a.0), value, None)
    }

    pub fn mean_all(&mut self, a: TensorId) -> TensorId {
        let m = &self.values[a.0];
        let n = T::from_real((m.rows() * m.cols()) as f64);
        let value = Matrix::scalar(m.sum() / n);
        self.push(Op::MeanAll(a.0), value, None)
    }

    pub fn mul_scalar(&mut self, mat: TensorId, scalar: TensorId) -> TensorId {
        let s = self.values[scalar.0].as_scalar();
        let value = self.values[mat.0].scale(s);
        self.push(Op::MulScalar { mat: mat.0, scalar: scalar.0 }, value, None)
    }

    pub fn add_scalar(&mut self, mat: TensorId, scalar: TensorId) -> TensorId {
        let s = self.values[scalar.0].as_scalar();
        let value = self.values[mat.0].map(|v| v + s);
        self.push(Op::AddScalar { mat: mat.0, scalar: scalar.0 }, value, None)
    }

    /// `mat + s * I` for square `mat` and a 1x1 scalar node `s`.
    pub fn add_diag(&mut self, mat: TensorId, scalar: TensorId) -> TensorId {
        let value = Self::eval_add_diag(&self.values[mat.0], &self.values[scalar.0]);
        self.push(Op::AddDiag { mat: mat.0, scalar: scalar.0 }, value, None)
    }

    pub fn add_row_broadcast(&mut self, mat: TensorId, row: TensorId) -> TensorId {
        let value = Self::eval_add_row(&self.values[mat.0], &self.values[row.0]);
        self.push(Op::AddRowBroadcast { mat: mat.0, row: row.0 }, value, None)
    }

    pub fn vstack(&mut self, parts: &[TensorId]) -> TensorId {
        let refs: Vec<&Matrix<T>> = parts.iter().map(|id| &self.values[id.0]).collect();
        let value = Matrix::vstack(&refs);
        self.push(Op::VStack(parts.iter().map(|id| id.0).collect()), value, None)
    }

    pub fn hstack(&mut self, parts: &[TensorId]) -> TensorId {
        let refs: Vec<&Matrix<T>> = parts.iter().map(|id| &self.values[id.0]).collect();
        let value = Matrix::hstack(&refs);
        self.push(Op::HStack(parts.iter().map(|id| id.0).collect()), value, None)
    }

    pub fn slice_rows(&mut self, x: TensorId, start: usize, len: usize) -> TensorId {
        let value = self.values[x.0].slice_rows(start, len);
        self.push(Op::SliceRows { x: x.0, start, len }, value, None)
    }

    pub fn gather_rows(&mut self, x: TensorId, indices: Vec<usize>) -> TensorId {
        let value = self.values[x.0].gather_rows(&indices);
        self.push(Op::GatherRows { x: x.0, indices }, value, None)
    }

    pub fn cholesky(&mut self, a: TensorId) -> Result<TensorId, NumericsError> {
        let (l, _jitter) = cholesky_with_jitter(&self.values[a.0])?;
        Ok(self.push(Op::Cholesky(a.0), l, None))
    }

    pub fn solve_lower(&mut self, l: TensorId, b: TensorId) -> TensorId {
        let value = solve_lower(&self.values[l.0], &self.values[b.0]);
        self.push(Op::SolveLower { l: l.0, b: b.0 }, value, None)
    }

    pub fn solve_lower_t(&mut self, l: TensorId, b: TensorId) -> TensorId {
        let value = solve_lower_transpose(&self.values[l.0], &self.values[b.0]);
        self.push(Op::SolveLowerT { l: l.0, b: b.0 }, value, None)
    }

    pub fn sum_ln_diag(&mut self, l: TensorId) -> TensorId {
        let m = &self.values[l.0];
        let mut acc = T::zero();
        for i in 0..m.rows() {
            acc += m[(i, i)].ln();
        }
        self.push(Op::SumLnDiag(l.0), Matrix::scalar(acc), None)
    }

    pub fn lmc_gram(&mut self, spec: LmcGramSpec) -> TensorId {
        let (value, d2) = Self::eval_lmc_gram(
            &self.values[spec.zl.0],
            &self.values[spec.zr.0],
            &self.values[spec.rl.0],
            &self.values[spec.rr.0],
            &self.values[spec.log_len.0],
            &self.values[spec.log_sig.0],
        );
        self.push(
            Op::LmcGram {
                zl: spec.zl.0,
                zr: spec.zr.0,
                rl: spec.rl.0,
                rr: spec.rr.0,
                log_len: spec.log_len.0,
                log_sig: spec.log_sig.0,
            },
            value,
            Some(d2),
        )
    }

    /// Mark the scalar node whose adjoints `backward` computes.
    pub fn mark_output(&mut self, id: TensorId) -> Result<(), NumericsError> {
        let shape = self.values[id.0].shape();
        if shape != (1, 1) {
            return Err(NumericsError::NonScalarOutput { rows: shape.0, cols: shape.1 });
        }
        self.output = Some(id.0);
        Ok(())
    }

    /// Value of the marked output node.
    pub fn output_value(&self) -> T {
        let out = self.output.expect("no output marked on tape");
        self.values[out].as_scalar()
    }

    /// Replay the recorded computation from current leaf values.
    ///
    /// Evaluation order and arithmetic are identical to the original build,
    /// so an unmodified tape reproduces its values bit-for-bit.
    pub fn forward(&mut self) -> Result<(), NumericsError> {
        for i in 0..self.ops.len() {
            match &self.ops[i] {
                Op::Constant | Op::Param => continue,
                op => {
                    let (value, aux) = Self::eval(op, &self.values)?;
                    self.values[i] = value;
                    self.aux[i] = aux;
                }
            }
        }
        Ok(())
    }

    fn eval(op: &Op<T>, values: &[Matrix<T>]) -> Result<(Matrix<T>, Option<Matrix<T>>), NumericsError> {
        let value = match op {
            Op::Constant | Op::Param => unreachable!("leaves are never re-evaluated"),
            Op::Add(a, b) => values[*a].add(&values[*b]),
            Op::Sub(a, b) => values[*a].sub(&values[*b]),
            Op::Neg(a) => values[*a].scale(-T::one()),
            Op::Scale(a, c) => values[*a].scale(*c),
            Op::Hadamard(a, b) => values[*a].hadamard(&values[*b]),
            Op::MatMul(a, b) => values[*a].matmul(&values[*b]),
            Op::Transpose(a) => values[*a].transpose(),
            Op::Exp(a) => values[*a].map(|v| v.exp()),
            Op::Ln(a) => values[*a].map(|v| v.ln()),
            Op::SoftmaxRows(a) => super::softmax_rows(&values[*a]),
            Op::SumAll(a) => Matrix::scalar(values[*a].sum()),
            Op::MeanAll(a) => {
                let m = &values[*a];
                let n = T::from_real((m.rows() * m.cols()) as f64);
                Matrix::scalar(m.sum() / n)
            }
            Op::MulScalar { mat, scalar } => values[*mat].scale(values[*scalar].as_scalar()),
            Op::AddScalar { mat, scalar } => {
                let s = values[*scalar].as_scalar();
                values[*mat].map(|v| v + s)
            }
            Op::AddDiag { mat, scalar } => Self::eval_add_diag(&values[*mat], &values[*scalar]),
            Op::AddRowBroadcast { mat, row } => Self::eval_add_row(&values[*mat], &values[*row]),
            Op::VStack(parts) => {
                let refs: Vec<&Matrix<T>> = parts.iter().map(|&p| &values[p]).collect();
                Matrix::vstack(&refs)
            }
            Op::HStack(parts) => {
                let refs: Vec<&Matrix<T>> = parts.iter().map(|&p| &values[p]).collect();
                Matrix::hstack(&refs)
            }
            Op::SliceRows { x, start, len } => values[*x].slice_rows(*start, *len),
            Op::GatherRows { x, indices } => values[*x].gather_rows(indices),
            Op::Cholesky(a) => cholesky_with_jitter(&values[*a])?.0,
            Op::SolveLower { l, b } => solve_lower(&values[*l], &values[*b]),
            Op::SolveLowerT { l, b } => solve_lower_transpose(&values[*l], &values[*b]),
            Op::SumLnDiag(a) => {
                let m = &values[*a];
                let mut acc = T::zero();
                for i in 0..m.rows() {
                    acc += m[(i, i)].ln();
                }
                Matrix::scalar(acc)
            }
            Op::LmcGram { zl, zr, rl, rr, log_len, log_sig } => {
                let (value, d2) = Self::eval_lmc_gram(
                    &values[*zl], &values[*zr], &values[*rl], &values[*rr],
                    &values[*log_len], &values[*log_sig],
                );
                return Ok((value, Some(d2)));
            }
        };
        Ok((value, None))
    }

    fn eval_add_diag(mat: &Matrix<T>, scalar: &Matrix<T>) -> Matrix<T> {
        assert!(mat.is_square(), "add_diag requires a square matrix");
        let s = scalar.as_scalar();
        let mut out = mat.clone();
        for i in 0..out.rows() {
            out[(i, i)] += s;
        }
        out
    }

    fn eval_add_row(mat: &Matrix<T>, row: &Matrix<T>) -> Matrix<T> {
        assert_eq!(row.rows(), 1, "broadcast row must be 1 x m");
        assert_eq!(row.cols(), mat.cols(), "broadcast row width mismatch");
        let mut out = mat.clone();
        for i in 0..out.rows() {
            let r = out.row_mut(i);
            for (v, &b) in r.iter_mut().zip(row.row(0)) {
                *v += b;
            }
        }
        out
    }

    fn eval_lmc_gram(
        zl: &Matrix<T>,
        zr: &Matrix<T>,
        rl: &Matrix<T>,
        rr: &Matrix<T>,
        log_len: &Matrix<T>,
        log_sig: &Matrix<T>,
    ) -> (Matrix<T>, Matrix<T>) {
        let tau = log_len.rows();
        assert_eq!(log_len.shape(), (tau, 1), "log_len must be tau x 1");
        assert_eq!(log_sig.shape(), (tau, 1), "log_sig must be tau x 1");
        assert_eq!(zl.cols(), tau, "zl must be nl x tau");
        assert_eq!(zr.cols(), tau, "zr must be nr x tau");
        assert_eq!(rl.cols(), rr.cols(), "spatial dimensions must agree");
        assert_eq!(zl.rows(), rl.rows(), "left shapes must agree");
        assert_eq!(zr.rows(), rr.rows(), "right shapes must agree");
        let (nl, nr, d) = (rl.rows(), rr.rows(), rl.cols());

        let mut d2 = Matrix::zeros(nl, nr);
        for i in 0..nl {
            let a = rl.row(i);
            let out = d2.row_mut(i);
            for j in 0..nr {
                let b = rr.row(j);
                let mut acc = T::zero();
                for k in 0..d {
                    let diff = a[k] - b[k];
                    acc += diff * diff;
                }
                out[j] = acc;
            }
        }

        let mut k = Matrix::zeros(nl, nr);
        let two = T::from_real(2.0);
        for c in 0..tau {
            let len2 = (two * log_len[(c, 0)]).exp();
            let sig2 = (two * log_sig[(c, 0)]).exp();
            let inv = T::one() / (two * len2);
            for i in 0..nl {
                let zlc = zl[(i, c)];
                if zlc == T::zero() {
                    continue;
                }
                let d2row = d2.row(i);
                let krow = k.row_mut(i);
                for j in 0..nr {
                    let e = (-d2row[j] * inv).exp();
                    krow[j] += zlc * zr[(j, c)] * sig2 * e;
                }
            }
        }
        (k, d2)
    }

    /// Reverse pass from the marked scalar output. Parameter adjoints are
    /// afterwards available via [`GradientTape::grad`].
    pub fn backward(&mut self) -> Result<(), NumericsError> {
        let out = self.output.ok_or(NumericsError::NonScalarOutput { rows: 0, cols: 0 })?;
        let shape = self.values[out].shape();
        if shape != (1, 1) {
            return Err(NumericsError::NonScalarOutput { rows: shape.0, cols: shape.1 });
        }
        self.grads = self
            .values
            .iter()
            .map(|v| Matrix::zeros(v.rows(), v.cols()))
            .collect();
        self.grads[out] = Matrix::scalar(T::one());

        for i in (0..self.ops.len()).rev() {
            // A node's adjoint is final once every consumer (all at higher
            // indices) has been processed, so it can be taken by value here.
            let g = std::mem::replace(&mut self.grads[i], Matrix::zeros(0, 0));
            if g.rows() == 0 {
                continue;
            }
            match &self.ops[i] {
                Op::Constant | Op::Param => {
                    // Leaves keep their adjoints for reporting.
                    self.grads[i] = g;
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    self.grads[a].axpy(T::one(), &g);
                    self.grads[b].axpy(T::one(), &g);
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    self.grads[a].axpy(T::one(), &g);
                    self.grads[b].axpy(-T::one(), &g);
                }
                Op::Neg(a) => {
                    let a = *a;
                    self.grads[a].axpy(-T::one(), &g);
                }
                Op::Scale(a, c) => {
                    let (a, c) = (*a, *c);
                    self.grads[a].axpy(c, &g);
                }
                Op::Hadamard(a, b) => {
                    let (a, b) = (*a, *b);
                    let ga = g.hadamard(&self.values[b]);
                    let gb = g.hadamard(&self.values[a]);
                    self.grads[a].axpy(T::one(), &ga);
                    self.grads[b].axpy(T::one(), &gb);
                }
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    let ga = g.matmul_nt(&self.values[b]);
                    let gb = self.values[a].matmul_tn(&g);
                    self.grads[a].axpy(T::one(), &ga);
                    self.grads[b].axpy(T::one(), &gb);
                }
                Op::Transpose(a) => {
                    let a = *a;
                    let ga = g.transpose();
                    self.grads[a].axpy(T::one(), &ga);
                }
                Op::Exp(a) => {
                    let a = *a;
                    let ga = g.hadamard(&self.values[i]);
                    self.grads[a].axpy(T::one(), &ga);
                }
                Op::Ln(a) => {
                    let a = *a;
                    let inv = self.values[a].map(|v| T::one() / v);
                    let ga = g.hadamard(&inv);
                    self.grads[a].axpy(T::one(), &ga);
                }
                Op::SoftmaxRows(a) => {
                    let a = *a;
                    let s = &self.values[i];
                    let mut ga = Matrix::zeros(s.rows(), s.cols());
                    for r in 0..s.rows() {
                        let srow = s.row(r);
                        let grow = g.row(r);
                        let dot: T = srow.iter().zip(grow).map(|(&sv, &gv)| sv * gv).sum();
                        let out = ga.row_mut(r);
                        for j in 0..srow.len() {
                            out[j] = srow[j] * (grow[j] - dot);
                        }
                    }
                    self.grads[a].axpy(T::one(), &ga);
                }
                Op::SumAll(a) => {
                    let a = *a;
                    let gs = g.as_scalar();
                    let shape = self.values[a].shape();
                    let ga = Matrix::filled(shape.0, shape.1, gs);
                    self.grads[a].axpy(T::one(), &ga);
                }
                Op::MeanAll(a) => {
                    let a = *a;
                    let shape = self.values[a].shape();
                    let n = T::from_real((shape.0 * shape.1) as f64);
                    let ga = Matrix::filled(shape.0, shape.1, g.as_scalar() / n);
                    self.grads[a].axpy(T::one(), &ga);
                }
                Op::MulScalar { mat, scalar } => {
                    let (mat, scalar) = (*mat, *scalar);
                    let s = self.values[scalar].as_scalar();
                    self.grads[mat].axpy(s, &g);
                    let gs = g.hadamard(&self.values[mat]).sum();
                    self.grads[scalar].axpy(T::one(), &Matrix::scalar(gs));
                }
                Op::AddScalar { mat, scalar } => {
                    let (mat, scalar) = (*mat, *scalar);
                    self.grads[mat].axpy(T::one(), &g);
                    self.grads[scalar].axpy(T::one(), &Matrix::scalar(g.sum()));
                }
                Op::AddDiag { mat, scalar } => {
                    let (mat, scalar) = (*mat, *scalar);
                    self.grads[mat].axpy(T::one(), &g);
                    let mut diag_sum = T::zero();
                    for r in 0..g.rows() {
                        diag_sum += g[(r, r)];
                    }
                    self.grads[scalar].axpy(T::one(), &Matrix::scalar(diag_sum));
                }
                Op::AddRowBroadcast { mat, row } => {
                    let (mat, row) = (*mat, *row);
                    self.grads[mat].axpy(T::one(), &g);
                    let mut rg = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        let grow = g.row(r);
                        let out = rg.row_mut(0);
                        for j in 0..grow.len() {
                            out[j] += grow[j];
                        }
                    }
                    self.grads[row].axpy(T::one(), &rg);
                }
                Op::VStack(parts) => {
                    let parts = parts.clone();
                    let mut offset = 0;
                    for p in parts {
                        let rows = self.values[p].rows();
                        let gp = g.slice_rows(offset, rows);
                        self.grads[p].axpy(T::one(), &gp);
                        offset += rows;
                    }
                }
                Op::HStack(parts) => {
                    let parts = parts.clone();
                    let mut offset = 0;
                    for p in parts {
                        let cols = self.values[p].cols();
                        let mut gp = Matrix::zeros(g.rows(), cols);
                        for r in 0..g.rows() {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + cols]);
                        }
                        self.grads[p].axpy(T::one(), &gp);
                        offset += cols;
                    }
                }
                Op::SliceRows { x, start, len } => {
                    let (x, start, len) = (*x, *start, *len);
                    debug_assert_eq!(g.rows(), len);
                    let cols = g.cols();
                    for r in 0..len {
                        let grow = g.row(r);
                        let target = self.grads[x].row_mut(start + r);
                        for j in 0..cols {
                            target[j] += grow[j];
                        }
                    }
                }
                Op::GatherRows { x, indices } => {
                    let x = *x;
                    let indices = indices.clone();
                    let cols = g.cols();
                    for (r, &src) in indices.iter().enumerate() {
                        let grow = g.row(r);
                        let target = self.grads[x].row_mut(src);
                        for j in 0..cols {
                            target[j] += grow[j];
                        }
                    }
                }
                Op::Cholesky(a) => {
                    let a = *a;
                    let ga = Self::cholesky_backward(&self.values[i], &g);
                    self.grads[a].axpy(T::one(), &ga);
                }
                Op::SolveLower { l, b } => {
                    let (l, b) = (*l, *b);
                    // X = L^{-1} B: adjoint of B is L^{-T} Xbar, adjoint of L
                    // is tril(-Bbar X^T).
                    let gb = solve_lower_transpose(&self.values[l], &g);
                    let x = &self.values[i];
                    let mut gl = gb.matmul_nt(x).scale(-T::one());
                    Self::mask_tril(&mut gl);
                    self.grads[b].axpy(T::one(), &gb);
                    self.grads[l].axpy(T::one(), &gl);
                }
                Op::SolveLowerT { l, b } => {
                    let (l, b) = (*l, *b);
                    // X = L^{-T} B: adjoint of B is L^{-1} Xbar, adjoint of L
                    // is tril(-X Bbar^T).
                    let gb = solve_lower(&self.values[l], &g);
                    let x = &self.values[i];
                    let mut gl = x.matmul_nt(&gb).scale(-T::one());
                    Self::mask_tril(&mut gl);
                    self.grads[b].axpy(T::one(), &gb);
                    self.grads[l].axpy(T::one(), &gl);
                }
                Op::SumLnDiag(a) => {
                    let a = *a;
                    let gs = g.as_scalar();
                    let m = &self.values[a];
                    let mut ga = Matrix::zeros(m.rows(), m.cols());
                    for r in 0..m.rows() {
                        ga[(r, r)] = gs / m[(r, r)];
                    }
                    self.grads[a].axpy(T::one(), &ga);
                }
                Op::LmcGram { zl, zr, rl, rr, log_len, log_sig } => {
                    let (zl, zr, rl, rr, log_len, log_sig) = (*zl, *zr, *rl, *rr, *log_len, *log_sig);
                    let d2 = self.aux[i].as_ref().expect("LmcGram caches its distance matrix");
                    let grads = Self::lmc_gram_backward(
                        &g,
                        d2,
                        &self.values[zl],
                        &self.values[zr],
                        &self.values[rl],
                        &self.values[rr],
                        &self.values[log_len],
                        &self.values[log_sig],
                    );
                    self.grads[zl].axpy(T::one(), &grads.zl);
                    self.grads[zr].axpy(T::one(), &grads.zr);
                    self.grads[rl].axpy(T::one(), &grads.rl);
                    self.grads[rr].axpy(T::one(), &grads.rr);
                    self.grads[log_len].axpy(T::one(), &grads.log_len);
                    self.grads[log_sig].axpy(T::one(), &grads.log_sig);
                }
            }
        }
        Ok(())
    }

    fn mask_tril(m: &mut Matrix<T>) {
        for i in 0..m.rows() {
            for j in (i + 1)..m.cols() {
                m[(i, j)] = T::zero();
            }
        }
    }

    /// Reverse rule for the lower Cholesky factor.
    ///
    /// With `M = L^T Lbar` and `Phi` taking the lower triangle with a halved
    /// diagonal, the full-matrix sensitivity is `S = L^{-T} Phi(M) L^{-1}`.
    /// The forward pass reads only the lower triangle (mirroring it), so the
    /// reported adjoint folds the upper sensitivity onto the lower triangle.
    fn cholesky_backward(l: &Matrix<T>, lbar: &Matrix<T>) -> Matrix<T> {
        let n = l.rows();
        let mut p = l.matmul_tn(lbar);
        for i in 0..n {
            p[(i, i)] = p[(i, i)] * T::from_real(0.5);
            for j in (i + 1)..n {
                p[(i, j)] = T::zero();
            }
        }
        let x = solve_lower_transpose(l, &p);
        let y = solve_lower_transpose(l, &x.transpose());
        let s = y.transpose();
        let mut out = Matrix::zeros(n, n);
        for i in 0..n {
            out[(i, i)] = s[(i, i)];
            for j in 0..i {
                out[(i, j)] = s[(i, j)] + s[(j, i)];
            }
        }
        out
    }

    #[allow(clippy::too_many_arguments)]
    fn lmc_gram_backward(
        g: &Matrix<T>,
        d2: &Matrix<T>,
        zl: &Matrix<T>,
        zr: &Matrix<T>,
        rl: &Matrix<T>,
        rr: &Matrix<T>,
        log_len: &Matrix<T>,
        log_sig: &Matrix<T>,
    ) -> LmcGramGrads<T> {
        let tau = log_len.rows();
        let (nl, nr, d) = (rl.rows(), rr.rows(), rl.cols());
        let two = T::from_real(2.0);
        let mut out = LmcGramGrads {
            zl: Matrix::zeros(nl, tau),
            zr: Matrix::zeros(nr, tau),
            rl: Matrix::zeros(nl, d),
            rr: Matrix::zeros(nr, d),
            log_len: Matrix::zeros(tau, 1),
            log_sig: Matrix::zeros(tau, 1),
        };
        let mut gk = Matrix::zeros(nl, nr);
        for c in 0..tau {
            let len2 = (two * log_len[(c, 0)]).exp();
            let sig2 = (two * log_sig[(c, 0)]).exp();
            let inv_two_len2 = T::one() / (two * len2);
            let inv_len2 = T::one() / len2;

            // gk = g .* K_c, accumulated statistics per component.
            let mut sum_gk = T::zero();
            let mut sum_gk_d2 = T::zero();
            for i in 0..nl {
                let zlc = zl[(i, c)];
                let d2row = d2.row(i);
                let grow = g.row(i);
                let gkrow = gk.row_mut(i);
                let mut zl_grad = T::zero();
                for j in 0..nr {
                    let e = sig2 * (-d2row[j] * inv_two_len2).exp();
                    let ge = grow[j] * e;
                    zl_grad += ge * zr[(j, c)];
                    let kc = zlc * zr[(j, c)] * e;
                    let gkv = grow[j] * kc;
                    gkrow[j] = gkv;
                    sum_gk += gkv;
                    sum_gk_d2 += gkv * d2row[j];
                }
                out.zl[(i, c)] = zl_grad;
            }
            for j in 0..nr {
                let mut zr_grad = T::zero();
                for i in 0..nl {
                    let e = sig2 * (-d2[(i, j)] * inv_two_len2).exp();
                    zr_grad += g[(i, j)] * e * zl[(i, c)];
                }
                out.zr[(j, c)] = zr_grad;
            }
            out.log_sig[(c, 0)] = two * sum_gk;
            out.log_len[(c, 0)] = sum_gk_d2 * inv_len2;

            // Spatial adjoints: d K_c[i,j] / d rl_i = -K_c[i,j] (rl_i - rr_j) / len^2.
            for i in 0..nl {
                let gkrow = gk.row(i);
                let rowsum: T = gkrow.iter().copied().sum();
                let rli = rl.row(i);
                let mut acc = vec![T::zero(); d];
                for j in 0..nr {
                    let w = gkrow[j];
                    if w == T::zero() {
                        continue;
                    }
                    let rrj = rr.row(j);
                    for k in 0..d {
                        acc[k] += w * rrj[k];
                    }
                }
                let target = out.rl.row_mut(i);
                for k in 0..d {
                    target[k] += (acc[k] - rowsum * rli[k]) * inv_len2;
                }
            }
            for j in 0..nr {
                let mut colsum = T::zero();
                let mut acc = vec![T::zero(); d];
                for i in 0..nl {
                    let w = gk[(i, j)];
                    if w == T::zero() {
                        continue;
                    }
                    colsum += w;
                    let rli = rl.row(i);
                    for k in 0..d {
                        acc[k] += w * rli[k];
                    }
                }
                let rrj = rr.row(j);
                let target = out.rr.row_mut(j);
                for k in 0..d {
                    target[k] += (acc[k] - colsum * rrj[k]) * inv_len2;
                }
            }
        }
        out
    }

    /// Adjoint of a named parameter after `backward`.
    pub fn grad(&self, name: &str) -> Result<Matrix<T>, NumericsError> {
        let id = self.param_id(name)?;
        assert_eq!(
            self.grads.len(),
            self.values.len(),
            "backward must run before reading gradients"
        );
        Ok(self.grads[id].clone())
    }

    /// Maximum relative disagreement between the analytic gradient of the
    /// named parameter and central differences of the replayed forward pass:
    /// `max_i |analytic_i - cd_i| / (|cd_i| + 1e-10)`.
    ///
    /// `eps` must lie in `(0, 1e-2]`; the output node must be marked.
    pub fn grad_check(&mut self, name: &str, eps: T) -> Result<T, NumericsError> {
        assert!(
            eps > T::zero() && eps <= T::from_real(1e-2),
            "grad_check step must lie in (0, 1e-2]"
        );
        let id = self.param_id(name)?;
        self.forward()?;
        self.backward()?;
        let analytic = self.grads[id].clone();
        let floor = T::from_real(1e-10);
        let mut worst = T::zero();
        let entries = self.values[id].data().len();
        for e in 0..entries {
            let saved = self.values[id].data()[e];
            self.values[id].data_mut()[e] = saved + eps;
            self.forward()?;
            let plus = self.output_value();
            self.values[id].data_mut()[e] = saved - eps;
            self.forward()?;
            let minus = self.output_value();
            self.values[id].data_mut()[e] = saved;
            let cd = (plus - minus) / (eps + eps);
            let rel = (analytic.data()[e] - cd).abs() / (cd.abs() + floor);
            worst = worst.max(rel);
        }
        self.forward()?;
        Ok(worst)
    }
}

struct LmcGramGrads<T> {
    zl: Matrix<T>,
    zr: Matrix<T>,
    rl: Matrix<T>,
    rr: Matrix<T>,
    log_len: Matrix<T>,
    log_sig: Matrix<T>,
}
