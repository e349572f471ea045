//! Training objectives: symmetric contrastive loss over paired descriptors
//! and the Euclidean offset-regression loss.

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Row norms of descriptors must be within this of 1.
pub const NORM_TOL: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ContrastiveForm {
    /// One term normalized over text candidates, one over cloud candidates.
    #[default]
    Symmetric,
    /// Both terms normalized over text candidates.
    Literal,
}

impl std::str::FromStr for ContrastiveForm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "symmetric" => Ok(Self::Symmetric),
            "literal" => Ok(Self::Literal),
            other => Err(Error::Config(format!("unknown contrastive form {other}"))),
        }
    }
}

impl std::fmt::Display for ContrastiveForm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Symmetric => "symmetric",
            Self::Literal => "literal",
        })
    }
}

fn check_unit_rows<F: Real>(what: &str, t: &Tensor<F>) -> Result<()> {
    for i in 0..t.rows() {
        let n = t.row(i).iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
        if (n - 1.0).abs() > NORM_TOL {
            return Err(Error::Precondition(format!("{what} row {i} has norm {n}")));
        }
    }
    Ok(())
}

/// Loss from an `N × N` similarity matrix whose diagonal holds the positives.
pub fn contrastive_from_logits<'t, F: Real>(s: Var<'t, F>, form: ContrastiveForm) -> Result<Var<'t, F>> {
    let rows = s.log_softmax_rows().diag()?.mean().neg();
    let cols = match form {
        ContrastiveForm::Symmetric => s.transpose()?.log_softmax_rows().diag()?.mean().neg(),
        ContrastiveForm::Literal => rows,
    };
    rows.add(cols)
}

/// `S = P Tᵀ / τ`, then [`contrastive_from_logits`].
pub fn contrastive_loss<'t, F: Real>(
    p: Var<'t, F>,
    t: Var<'t, F>,
    tau: F,
    form: ContrastiveForm,
) -> Result<Var<'t, F>> {
    if tau <= F::zero() {
        return Err(Error::Param("temperature must be positive".into()));
    }
    let (pv, tv) = (p.value(), t.value());
    if pv.rank() != 2 || pv.shape() != tv.shape() {
        return Err(Error::Shape(format!(
            "contrastive inputs {:?} and {:?}",
            pv.shape(),
            tv.shape()
        )));
    }
    check_unit_rows("P", &pv)?;
    check_unit_rows("T", &tv)?;
    let s = p.matmul(t.transpose()?)?.scale(F::one() / tau);
    contrastive_from_logits(s, form)
}

/// Per-row Euclidean norm, shape `[m]`; the subgradient at zero is zero.
pub fn row_norms<'t, F: Real>(x: Var<'t, F>) -> Result<Var<'t, F>> {
    let xv = x.value();
    if xv.rank() != 2 {
        return Err(Error::Rank(format!("row_norms needs rank 2, got {:?}", xv.shape())));
    }
    let (m, n) = (xv.rows(), xv.cols());
    let norms: Vec<F> = (0..m)
        .map(|i| xv.row(i).iter().map(|&v| v * v).sum::<F>().sqrt())
        .collect();
    let out = Tensor::vector(norms.clone());
    Ok(x.tape().op("row_norms", out, &[x], move |g, _| {
        let mut dx = Tensor::zeros(&[m, n]);
        for i in 0..m {
            if norms[i] > F::zero() {
                let s = g.data()[i] / norms[i];
                for j in 0..n {
                    dx.data_mut()[i * n + j] = s * xv.at(i, j);
                }
            }
        }
        vec![Some(dx)]
    }))
}

/// Batch mean of `‖gt − pred‖₂`, or of its square when `squared`.
pub fn fine_loss<'t, F: Real>(pred: Var<'t, F>, gt: Var<'t, F>, squared: bool) -> Result<Var<'t, F>> {
    let d = pred.sub(gt)?;
    if squared {
        Ok(d.square().sum_cols()?.mean())
    } else {
        Ok(row_norms(d)?.mean())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;

    #[test]
    fn closed_forms() {
        let tape = Tape::<f64>::new();
        let one = tape.constant(Tensor::from_rows(&[vec![0.6, 0.8]]).unwrap());
        let l = contrastive_loss(one, one, 0.07, ContrastiveForm::Symmetric).unwrap();
        assert_eq!(l.value().item(), 0.0);
        let rows = tape.constant(Tensor::from_rows(&vec![vec![1.0, 0.0]; 4]).unwrap());
        let l = contrastive_loss(rows, rows, 1.0, ContrastiveForm::Symmetric).unwrap();
        assert!((l.value().item() - 2.0 * 4f64.ln()).abs() < 1e-12);
        let s: Vec<Vec<f64>> = (0..3)
            .map(|i| (0..3).map(|j| if i == j { 20.0 } else { -20.0 }).collect())
            .collect();
        let s = tape.constant(Tensor::from_rows(&s).unwrap());
        assert!(contrastive_from_logits(s, ContrastiveForm::Symmetric).unwrap().value().item() < 1e-8);
    }

    #[test]
    fn rejects_unnormalized_rows() {
        let tape = Tape::<f64>::new();
        let p = tape.constant(Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap());
        assert!(matches!(
            contrastive_loss(p, p, 1.0, ContrastiveForm::Symmetric),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn fine_loss_examples() {
        let tape = Tape::<f64>::new();
        let gt = tape.constant(Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0]]).unwrap());
        let pred = tape.constant(Tensor::from_rows(&[vec![3.0, 4.0], vec![1.0, 1.0]]).unwrap());
        assert_eq!(fine_loss(pred, gt, false).unwrap().value().item(), 2.5);
        assert_eq!(fine_loss(gt, gt, false).unwrap().value().item(), 0.0);
        assert_eq!(fine_loss(pred, gt, true).unwrap().value().item(), 12.5);
    }
}
