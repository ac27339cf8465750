//! Expert feed-forward blocks: two projections around a smooth nonlinearity.

use crate::error::Result;
use crate::tensor::{Matrix, NodeId, Tape};
use rand::Rng;

/// Per-expert parameters. `up` is d_model×d_hidden, `down` is
/// d_hidden×d_model; both are applied transposed to column vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertParams {
    pub up: Matrix,
    pub down: Matrix,
}

impl ExpertParams {
    pub fn randn(d_model: usize, d_hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            up: Matrix::randn(d_model, d_hidden, 1.0 / (d_model as f64).sqrt(), rng),
            down: Matrix::randn(d_hidden, d_model, 1.0 / (d_hidden as f64).sqrt(), rng),
        }
    }

    /// downᵀ·σ(upᵀ·x) for a column vector x.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let z = self.up.matmul_tn(x)?;
        let a = z.map(crate::tensor::silu);
        self.down.matmul_tn(&a)
    }
}

/// Same computation recorded on a tape, given the bound parameter nodes.
pub fn expert_forward_taped(tape: &mut Tape, up: NodeId, down: NodeId, x: NodeId) -> Result<NodeId> {
    let z = tape.matmul_tn(up, x)?;
    let a = tape.silu(z);
    tape.matmul_tn(down, a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::logistic;

    #[test]
    fn scalar_expert_matches_direct_evaluation() {
        let p = ExpertParams {
            up: Matrix::from_vec(1, 1, vec![1.0]).unwrap(),
            down: Matrix::from_vec(1, 1, vec![2.0]).unwrap(),
        };
        let out = p.forward(&Matrix::col(vec![1.0])).unwrap();
        let expected = 2.0 * (1.0 * logistic(1.0));
        assert!((out.data()[0] - expected).abs() < 1e-12);
        assert!((out.data()[0] - 1.4621171572600098).abs() < 1e-10);
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let mut rng = crate::seed::rng(3, "t", 0);
        let p = ExpertParams::randn(4, 3, &mut rng);
        let out = p.forward(&Matrix::col(vec![0.0; 4])).unwrap();
        assert!(out.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn identity_expert_is_asymptotically_linear() {
        let p = ExpertParams {
            up: Matrix::identity(3),
            down: Matrix::identity(3),
        };
        let x = Matrix::col(vec![50.0, 60.0, 70.0]);
        let out = p.forward(&x).unwrap();
        for (o, i) in out.data().iter().zip(x.data()) {
            assert!((o - i).abs() < 1e-12, "σ(z)→z for large z");
        }
    }

    #[test]
    fn taped_forward_matches_plain() {
        let mut rng = crate::seed::rng(7, "t", 0);
        let p = ExpertParams::randn(5, 3, &mut rng);
        let x = Matrix::randn(5, 1, 1.0, &mut rng);
        let plain = p.forward(&x).unwrap();
        let mut tape = Tape::new();
        let up = tape.leaf(p.up.clone());
        let down = tape.leaf(p.down.clone());
        let xn = tape.leaf(x.clone());
        let out = expert_forward_taped(&mut tape, up, down, xn).unwrap();
        assert_eq!(tape.value(out), &plain);
    }
}
