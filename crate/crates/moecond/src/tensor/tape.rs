//! Reverse-mode differentiation over matrices.
//!
//! A `Tape` records primitive operations during the forward pass and replays
//! them in reverse to accumulate gradients. Gradient accumulation order is
//! fixed (reverse recording order), so repeated runs of the same computation
//! are bit-identical. A tape is single-threaded; independent tapes may live
//! on separate threads.
//!
//! Besides the built-in primitives, `custom` installs a node with a
//! caller-supplied backward rule. The router's top-k combine uses this hook
//! to implement its masked / straight-through gradient variants.

use super::matrix::{silu, silu_prime, Matrix};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Scale(NodeId, f64),
    Hadamard(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    MatMulTn(NodeId, NodeId),
    Silu(NodeId),
    Softmax(NodeId),
    Sum(NodeId),
    Custom(usize),
}

/// Backward rule for a [`Tape::custom`] node.
pub trait CustomBackward: Send + Sync {
    fn backward(&self, upstream: &Matrix, ctx: &mut BackwardCtx<'_>) -> Result<()>;
}

struct HookRecord {
    hook: Box<dyn CustomBackward>,
}

pub struct Tape {
    values: Vec<Matrix>,
    ops: Vec<Op>,
    hooks: Vec<HookRecord>,
}

/// Read access to forward values plus gradient accumulation, handed to
/// custom backward rules.
pub struct BackwardCtx<'a> {
    values: &'a [Matrix],
    grads: &'a mut Vec<Option<Matrix>>,
}

impl BackwardCtx<'_> {
    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn accumulate(&mut self, id: NodeId, g: Matrix) -> Result<()> {
        accumulate(self.grads, id, g)
    }
}

fn accumulate(grads: &mut Vec<Option<Matrix>>, id: NodeId, g: Matrix) -> Result<()> {
    match &mut grads[id.0] {
        Some(acc) => {
            acc.add_scaled_in_place(&g, 1.0)?;
        }
        slot @ None => *slot = Some(g),
    }
    Ok(())
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            ops: Vec::new(),
            hooks: Vec::new(),
        }
    }

    fn push(&mut self, value: Matrix, op: Op) -> NodeId {
        let id = NodeId(self.values.len());
        self.values.push(value);
        self.ops.push(op);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.values[id.0]
    }

    /// A scalar node's value.
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.values[id.0].data()[0]
    }

    pub fn leaf(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.values[a.0].add(&self.values[b.0])?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.values[a.0].sub(&self.values[b.0])?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.values[a.0].scale(c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.values[a.0].hadamard(&self.values[b.0])?;
        Ok(self.push(v, Op::Hadamard(a, b)))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.values[a.0].matmul(&self.values[b.0])?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// `aᵀ · b` as a single node.
    pub fn matmul_tn(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.values[a.0].matmul_tn(&self.values[b.0])?;
        Ok(self.push(v, Op::MatMulTn(a, b)))
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let v = self.values[a.0].map(silu);
        self.push(v, Op::Silu(a))
    }

    /// Softmax over a column vector.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let input = &self.values[a.0];
        if input.cols() != 1 {
            return Err(Error::dim("softmax", format!("expected column vector, got {:?}", input.shape())));
        }
        let v = Matrix::col(super::matrix::softmax(input.data()));
        Ok(self.push(v, Op::Softmax(a)))
    }

    /// Sum of all entries, as a 1×1 node.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Matrix::col(vec![self.values[a.0].sum()]);
        self.push(v, Op::Sum(a))
    }

    /// Installs a node whose backward pass is delegated to `hook`.
    pub fn custom(&mut self, value: Matrix, hook: Box<dyn CustomBackward>) -> NodeId {
        let idx = self.hooks.len();
        self.hooks.push(HookRecord { hook });
        self.push(value, Op::Custom(idx))
    }

    /// Runs the backward pass from the given seed gradients.
    ///
    /// Seeds are upstream gradients injected at arbitrary nodes (the loss
    /// node gets its scalar weight; auxiliary objectives may seed
    /// intermediate nodes directly).
    pub fn backward(&self, seeds: &[(NodeId, Matrix)]) -> Result<TapeGrads> {
        let n = self.values.len();
        let mut grads: Vec<Option<Matrix>> = vec![None; n];
        for (id, g) in seeds {
            if g.shape() != self.values[id.0].shape() {
                return Err(Error::dim(
                    "backward_seed",
                    format!("seed {:?} vs node {:?}", g.shape(), self.values[id.0].shape()),
                ));
            }
            accumulate(&mut grads, *id, g.clone())?;
        }
        for i in (0..n).rev() {
            let Some(g) = grads[i].clone() else { continue };
            match &self.ops[i] {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g)?;
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g.scale(-1.0))?;
                }
                Op::Scale(a, c) => {
                    accumulate(&mut grads, *a, g.scale(*c))?;
                }
                Op::Hadamard(a, b) => {
                    accumulate(&mut grads, *a, g.hadamard(&self.values[b.0])?)?;
                    accumulate(&mut grads, *b, g.hadamard(&self.values[a.0])?)?;
                }
                Op::MatMul(a, b) => {
                    accumulate(&mut grads, *a, g.matmul_nt(&self.values[b.0])?)?;
                    accumulate(&mut grads, *b, self.values[a.0].matmul_tn(&g)?)?;
                }
                Op::MatMulTn(a, b) => {
                    accumulate(&mut grads, *a, self.values[b.0].matmul_nt(&g)?)?;
                    accumulate(&mut grads, *b, self.values[a.0].matmul(&g)?)?;
                }
                Op::Silu(a) => {
                    let factor = self.values[a.0].map(silu_prime);
                    accumulate(&mut grads, *a, g.hadamard(&factor)?)?;
                }
                Op::Softmax(a) => {
                    let y = &self.values[i];
                    let ds = softmax_vjp(y.data(), g.data());
                    accumulate(&mut grads, *a, Matrix::col(ds))?;
                }
                Op::Sum(a) => {
                    let src = &self.values[a.0];
                    let scalar = g.data()[0];
                    let filled = Matrix::zeros(src.rows(), src.cols()).map(|_| scalar);
                    accumulate(&mut grads, *a, filled)?;
                }
                Op::Custom(idx) => {
                    let mut ctx = BackwardCtx {
                        values: &self.values,
                        grads: &mut grads,
                    };
                    self.hooks[*idx].hook.backward(&g, &mut ctx)?;
                }
            }
        }
        Ok(TapeGrads { grads })
    }
}

/// Vector-Jacobian product of softmax: ds_i = y_i·(g_i − Σ_j g_j·y_j).
pub fn softmax_vjp(y: &[f64], g: &[f64]) -> Vec<f64> {
    let inner: f64 = y.iter().zip(g).map(|(yi, gi)| yi * gi).sum();
    y.iter().zip(g).map(|(yi, gi)| yi * (gi - inner)).collect()
}

pub struct TapeGrads {
    grads: Vec<Option<Matrix>>,
}

impl TapeGrads {
    pub fn get(&self, id: NodeId) -> Option<&Matrix> {
        self.grads[id.0].as_ref()
    }

    /// Gradient of a node, or zeros of the given shape when it received none.
    pub fn get_or_zeros(&self, id: NodeId, rows: usize, cols: usize) -> Matrix {
        match &self.grads[id.0] {
            Some(m) => m.clone(),
            None => Matrix::zeros(rows, cols),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ones(rows: usize, cols: usize) -> Matrix {
        Matrix::zeros(rows, cols).map(|_| 1.0)
    }

    #[test]
    fn matmul_backward_hand_value() {
        // backward of sum(A·B) for A=[[1,2]], B=[[3],[4]] gives ∂/∂A=[[3,4]].
        let mut tape = Tape::new();
        let a = tape.leaf(Matrix::from_vec(1, 2, vec![1.0, 2.0]).unwrap());
        let b = tape.leaf(Matrix::from_vec(2, 1, vec![3.0, 4.0]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        let s = tape.sum(c);
        let grads = tape.backward(&[(s, ones(1, 1))]).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[3.0, 4.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Matrix::col(vec![1.0, 2.0, 3.0]));
        let sq = tape.hadamard(x, x).unwrap();
        let s = tape.sum(sq);
        let grads = tape.backward(&[(s, ones(1, 1))]).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn repeated_runs_are_bit_identical() {
        let run = || {
            let mut tape = Tape::new();
            let a = tape.leaf(Matrix::from_vec(2, 2, vec![0.3, -1.7, 2.2, 0.9]).unwrap());
            let b = tape.leaf(Matrix::col(vec![0.11, -0.45]));
            let z = tape.matmul(a, b).unwrap();
            let act = tape.silu(z);
            let w = tape.softmax(act).unwrap();
            let s = tape.sum(w);
            let grads = tape.backward(&[(s, ones(1, 1))]).unwrap();
            (
                tape.value(w).data().to_vec(),
                grads.get(a).unwrap().data().to_vec(),
            )
        };
        let (v1, g1) = run();
        let (v2, g2) = run();
        let bits = |xs: &[f64]| xs.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&v1), bits(&v2));
        assert_eq!(bits(&g1), bits(&g2));
    }

    #[test]
    fn seeding_an_intermediate_node_adds_its_gradient() {
        // d/dx [sum(x²) + cᵀx] with c seeded directly on x.
        let mut tape = Tape::new();
        let x = tape.leaf(Matrix::col(vec![1.0, -2.0]));
        let sq = tape.hadamard(x, x).unwrap();
        let s = tape.sum(sq);
        let seed_c = Matrix::col(vec![10.0, 20.0]);
        let grads = tape.backward(&[(s, ones(1, 1)), (x, seed_c)]).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0 + 10.0, -4.0 + 20.0]);
    }
}
