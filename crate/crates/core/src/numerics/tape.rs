//! Reverse-mode differentiation over a linear tape.
//!
//! Operations append nodes in execution order, so the tape is topologically
//! sorted by construction and `backward` is a single reverse sweep.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU32, Ordering};

use super::matrix::{Axis, Matrix};
use super::params::{ParamGrads, ParamId, ParamStore};
use crate::error::{Error, Result};

static NEXT_TAPE: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    idx: u32,
}

impl Var {
    pub fn index(self) -> usize {
        self.idx as usize
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Ln(Var),
    SoftmaxRows(Var),
    Concat(Vec<Var>, Axis),
    GatherRows(Var, Vec<usize>),
    ScatterAddRows(Var, Vec<usize>),
    SumRows(Var),
    MeanRows(Var),
    SumAll(Var),
    ScaleRows(Var, Var),
    SliceCols(Var, usize),
    Transpose(Var),
    Clamp(Var, f64, f64),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

/// Single-owner recording of a forward computation.
#[derive(Debug)]
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Output of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    tape: u32,
    nodes: Vec<Option<Matrix>>,
    params: ParamGrads,
}

impl Gradients {
    /// Gradient of the loss with respect to a recorded value, if it reached it.
    pub fn wrt(&self, v: Var) -> Option<&Matrix> {
        if v.tape != self.tape {
            return None;
        }
        self.nodes.get(v.index()).and_then(Option::as_ref)
    }

    pub fn params(&self) -> &ParamGrads {
        &self.params
    }

    pub fn into_params(self) -> ParamGrads {
        self.params
    }
}

fn accumulate(slot: &mut Option<Matrix>, g: Matrix) {
    match slot {
        Some(existing) => {
            for (e, v) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += v;
            }
        }
        None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var {
            tape: self.id,
            idx: (self.nodes.len() - 1) as u32,
        }
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.index() >= self.nodes.len() {
            return Err(Error::NotOnTape(v.index()));
        }
        Ok(())
    }

    pub fn value(&self, v: Var) -> &Matrix {
        assert_eq!(v.tape, self.id, "variable from another tape");
        &self.nodes[v.index()].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Constant)
    }

    /// Leaf for a parameter; repeated requests return the same variable.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param(id));
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// Broadcasts the `1 x d` row `b` over every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let out = self.value(a).add_row(self.value(b))?;
        Ok(self.push(out, Op::AddRow(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let out = self.value(a).mul(self.value(b))?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.check(a)?;
        if !s.is_finite() {
            return Err(Error::NonFinite("scale"));
        }
        let out = self.value(a).scale(s)?;
        Ok(self.push(out, Op::Scale(a, s)))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).sigmoid()?;
        Ok(self.push(out, Op::Sigmoid(a)))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).tanh()?;
        Ok(self.push(out, Op::Tanh(a)))
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).ln()?;
        Ok(self.push(out, Op::Ln(a)))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).softmax_rows()?;
        Ok(self.push(out, Op::SoftmaxRows(a)))
    }

    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var> {
        for &p in parts {
            self.check(p)?;
        }
        let refs: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Matrix::concat(&refs, axis)?;
        Ok(self.push(out, Op::Concat(parts.to_vec(), axis)))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).gather_rows(idx)?;
        Ok(self.push(out, Op::GatherRows(a, idx.to_vec())))
    }

    pub fn scatter_add_rows(&mut self, a: Var, idx: &[usize], out_rows: usize) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).scatter_add_rows(idx, out_rows)?;
        Ok(self.push(out, Op::ScatterAddRows(a, idx.to_vec())))
    }

    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).sum_rows()?;
        Ok(self.push(out, Op::SumRows(a)))
    }

    /// Row mean, exactly invariant under permutation of the rows.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).mean_rows()?;
        Ok(self.push(out, Op::MeanRows(a)))
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let s = self.value(a).sum();
        let out = Matrix::new(1, 1, vec![s])?;
        Ok(self.push(out, Op::SumAll(a)))
    }

    pub fn scale_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        self.check(a)?;
        self.check(s)?;
        let out = self.value(a).scale_rows(self.value(s))?;
        Ok(self.push(out, Op::ScaleRows(a, s)))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).slice_cols(start, len)?;
        Ok(self.push(out, Op::SliceCols(a, start)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).transpose();
        Ok(self.push(out, Op::Transpose(a)))
    }

    /// Clamps into `[lo, hi]`; gradient passes only where the input was inside.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).clamp(lo, hi)?;
        Ok(self.push(out, Op::Clamp(a, lo, hi)))
    }

    /// `x W + b` for a row-major batch `x`; `b` is optional.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var, n_params: usize) -> Result<Gradients> {
        self.check(loss)?;
        let shape = self.value(loss).shape();
        if shape != (1, 1) {
            return Err(Error::NotScalar(shape));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; loss.index() + 1];
        let mut params: Vec<Option<Matrix>> = vec![None; n_params];
        grads[loss.index()] = Some(Matrix::new(1, 1, vec![1.0])?);

        for idx in (0..=loss.index()).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => {
                    let slot = params.get_mut(id.0).ok_or_else(|| {
                        Error::InvalidArgument(format!(
                            "parameter {} outside store of {n_params}",
                            id.0
                        ))
                    })?;
                    accumulate(slot, g.clone());
                }
                Op::MatMul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let ga = g.matmul(&bv.transpose())?;
                    let gb = av.transpose().matmul(&g)?;
                    accumulate(&mut grads[a.index()], ga);
                    accumulate(&mut grads[b.index()], gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.index()], g.clone());
                    accumulate(&mut grads[b.index()], g.clone());
                }
                Op::AddRow(a, b) => {
                    accumulate(&mut grads[b.index()], g.sum_rows()?);
                    accumulate(&mut grads[a.index()], g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads[a.index()], g.clone());
                    accumulate(&mut grads[b.index()], g.scale(-1.0)?);
                }
                Op::Mul(a, b) => {
                    let ga = g.mul(self.value(*b))?;
                    let gb = g.mul(self.value(*a))?;
                    accumulate(&mut grads[a.index()], ga);
                    accumulate(&mut grads[b.index()], gb);
                }
                Op::Scale(a, s) => {
                    accumulate(&mut grads[a.index()], g.scale(*s)?);
                }
                Op::Sigmoid(a) => {
                    let ga = g.zip_with(&node.value, "sigmoid'", |g, y| g * y * (1.0 - y))?;
                    accumulate(&mut grads[a.index()], ga);
                }
                Op::Tanh(a) => {
                    let ga = g.zip_with(&node.value, "tanh'", |g, y| g * (1.0 - y * y))?;
                    accumulate(&mut grads[a.index()], ga);
                }
                Op::Ln(a) => {
                    let ga = g.zip_with(self.value(*a), "ln'", |g, x| g / x)?;
                    accumulate(&mut grads[a.index()], ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let cols = y.cols();
                    let mut out = Vec::with_capacity(y.len());
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        out.extend(yr.iter().zip(gr).map(|(y, g)| y * (g - dot)));
                    }
                    accumulate(&mut grads[a.index()], Matrix::new(y.rows(), cols, out)?);
                }
                Op::Concat(parts, axis) => {
                    let mut offset = 0;
                    for p in parts {
                        let (pr, pc) = self.value(*p).shape();
                        let gp = match axis {
                            Axis::Rows => {
                                let idx: Vec<usize> = (offset..offset + pr).collect();
                                offset += pr;
                                g.gather_rows(&idx)?
                            }
                            Axis::Cols => {
                                let s = g.slice_cols(offset, pc)?;
                                offset += pc;
                                s
                            }
                        };
                        accumulate(&mut grads[p.index()], gp);
                    }
                }
                Op::GatherRows(a, idx) => {
                    let rows = self.value(*a).rows();
                    accumulate(&mut grads[a.index()], g.scatter_add_rows(idx, rows)?);
                }
                Op::ScatterAddRows(a, idx) => {
                    accumulate(&mut grads[a.index()], g.gather_rows(idx)?);
                }
                Op::SumRows(a) => {
                    let rows = self.value(*a).rows();
                    accumulate(&mut grads[a.index()], g.gather_rows(&vec![0; rows])?);
                }
                Op::MeanRows(a) => {
                    let rows = self.value(*a).rows();
                    let ga = g.scale(1.0 / rows as f64)?.gather_rows(&vec![0; rows])?;
                    accumulate(&mut grads[a.index()], ga);
                }
                Op::SumAll(a) => {
                    let (r, c) = self.value(*a).shape();
                    accumulate(&mut grads[a.index()], Matrix::filled(r, c, g.scalar()?)?);
                }
                Op::ScaleRows(a, s) => {
                    let av = self.value(*a);
                    let sv = self.value(*s);
                    let ga = g.scale_rows(sv)?;
                    let gs: Vec<f64> = (0..av.rows())
                        .map(|r| av.row(r).iter().zip(g.row(r)).map(|(x, g)| x * g).sum())
                        .collect();
                    accumulate(&mut grads[a.index()], ga);
                    accumulate(&mut grads[s.index()], Matrix::new(av.rows(), 1, gs)?);
                }
                Op::SliceCols(a, start) => {
                    let (r, c) = self.value(*a).shape();
                    let mut full = Matrix::zeros(r, c);
                    let width = g.cols();
                    for i in 0..r {
                        for j in 0..width {
                            full.set(i, start + j, g.get(i, j))?;
                        }
                    }
                    accumulate(&mut grads[a.index()], full);
                }
                Op::Transpose(a) => {
                    accumulate(&mut grads[a.index()], g.transpose());
                }
                Op::Clamp(a, lo, hi) => {
                    let ga = g.zip_with(self.value(*a), "clamp'", |g, x| {
                        if x >= *lo && x <= *hi {
                            g
                        } else {
                            0.0
                        }
                    })?;
                    accumulate(&mut grads[a.index()], ga);
                }
            }
            grads[idx] = Some(g);
        }

        if grads.iter().flatten().any(|g| g.data().iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite("backward"));
        }
        Ok(Gradients {
            tape: self.id,
            nodes: grads,
            params: ParamGrads { slots: params },
        })
    }

    /// Runs [`Tape::backward`] and adds the result into the store's slots.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.backward(loss, store.len())?;
        store.accumulate(grads.params(), 1.0)
    }
}
