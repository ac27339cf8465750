//! Central-difference gradient checking.

use super::matrix::Matrix;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (parameter index, entry index) of the worst disagreement.
    pub worst: (usize, usize),
    pub entries_checked: usize,
}

/// Compares analytic gradients against central differences.
///
/// `eval` computes the scalar objective at a parameter setting; `analytic`
/// returns one gradient matrix per parameter. The relative error is
/// |analytic − numeric| / (|analytic| + |numeric| + 1e-8), maximized over
/// all entries.
pub fn grad_check<E, G>(
    eval: E,
    analytic: G,
    params: &[Matrix],
    eps: f64,
) -> Result<GradCheckReport>
where
    E: Fn(&[Matrix]) -> Result<f64>,
    G: Fn(&[Matrix]) -> Result<Vec<Matrix>>,
{
    if eps <= 0.0 {
        return Err(Error::Config(format!("grad_check eps must be > 0, got {eps}")));
    }
    let analytic_grads = analytic(params)?;
    if analytic_grads.len() != params.len() {
        return Err(Error::State(format!(
            "analytic returned {} gradients for {} parameters",
            analytic_grads.len(),
            params.len()
        )));
    }
    let mut work: Vec<Matrix> = params.to_vec();
    let mut max_rel_err = 0.0;
    let mut worst = (0, 0);
    let mut entries_checked = 0;
    for (p, grad) in analytic_grads.iter().enumerate() {
        if grad.shape() != params[p].shape() {
            return Err(Error::dim(
                "grad_check",
                format!("gradient {p} shape {:?} vs param {:?}", grad.shape(), params[p].shape()),
            ));
        }
        for e in 0..params[p].len() {
            let orig = work[p].data()[e];
            work[p].data_mut()[e] = orig + eps;
            let f_plus = eval(&work)?;
            work[p].data_mut()[e] = orig - eps;
            let f_minus = eval(&work)?;
            work[p].data_mut()[e] = orig;
            if !f_plus.is_finite() || !f_minus.is_finite() {
                return Err(Error::Eval(format!(
                    "non-finite objective near param {p} entry {e}: f+={f_plus}, f-={f_minus}"
                )));
            }
            let numeric = (f_plus - f_minus) / (2.0 * eps);
            let a = grad.data()[e];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-8);
            entries_checked += 1;
            if rel > max_rel_err {
                max_rel_err = rel;
                worst = (p, e);
            }
        }
    }
    Ok(GradCheckReport {
        max_rel_err,
        worst,
        entries_checked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn sum_of_squares_checks_out() {
        let params = vec![Matrix::col(vec![1.0, 2.0, 3.0])];
        let eval = |ps: &[Matrix]| Ok(ps[0].data().iter().map(|v| v * v).sum());
        let analytic = |ps: &[Matrix]| Ok(vec![ps[0].scale(2.0)]);
        let report = grad_check(eval, analytic, &params, 1e-5).unwrap();
        assert!(report.max_rel_err < 1e-6, "rel err {}", report.max_rel_err);
        assert_eq!(report.entries_checked, 3);
    }

    #[test]
    fn constant_objective_has_zero_gradient() {
        let params = vec![Matrix::col(vec![0.4, -0.7])];
        let eval = |_: &[Matrix]| Ok(3.5);
        let analytic = |ps: &[Matrix]| Ok(vec![Matrix::zeros(ps[0].rows(), ps[0].cols())]);
        let report = grad_check(eval, analytic, &params, 1e-4).unwrap();
        assert_eq!(report.max_rel_err, 0.0);
    }

    #[test]
    fn rejects_nonpositive_eps() {
        let params = vec![Matrix::col(vec![1.0])];
        let eval = |_: &[Matrix]| Ok(0.0);
        let analytic = |_: &[Matrix]| Ok(vec![Matrix::zeros(1, 1)]);
        assert!(grad_check(eval, analytic, &params, 0.0).is_err());
    }

    #[test]
    fn every_primitive_passes_at_1e4() {
        // One composite touching add/sub/scale/hadamard/matmul/matmul_tn/silu/softmax/sum.
        let params = vec![
            Matrix::from_vec(2, 3, vec![0.3, -0.8, 0.5, 1.1, -0.2, 0.7]).unwrap(),
            Matrix::col(vec![0.4, -0.6]),
            Matrix::col(vec![0.9, 0.1, -0.3]),
        ];
        let build = |ps: &[Matrix]| -> crate::error::Result<(Tape, crate::tensor::NodeId, Vec<crate::tensor::NodeId>)> {
            let mut tape = Tape::new();
            let a = tape.leaf(ps[0].clone());
            let x = tape.leaf(ps[1].clone());
            let c = tape.leaf(ps[2].clone());
            let z = tape.matmul_tn(a, x)?; // 3×1
            let zc = tape.add(z, c)?;
            let act = tape.silu(zc);
            let w = tape.softmax(act)?;
            let mixed = tape.hadamard(w, c)?;
            let shifted = tape.sub(mixed, c)?;
            let scaled = tape.scale(shifted, 1.7);
            let back = tape.matmul(a, scaled)?; // 2×1
            let s = tape.sum(back);
            Ok((tape, s, vec![a, x, c]))
        };
        let eval = |ps: &[Matrix]| {
            let (tape, s, _) = build(ps)?;
            Ok(tape.scalar(s))
        };
        let analytic = |ps: &[Matrix]| {
            let (tape, s, ids) = build(ps)?;
            let grads = tape.backward(&[(s, Matrix::col(vec![1.0]))])?;
            Ok(ids
                .iter()
                .zip(ps)
                .map(|(id, p)| grads.get_or_zeros(*id, p.rows(), p.cols()))
                .collect())
        };
        let report = grad_check(eval, analytic, &params, 1e-4).unwrap();
        assert!(report.max_rel_err < 1e-4, "rel err {}", report.max_rel_err);
    }
}
