//! Distillation and cross-entropy objectives, computed from student logits
//! with log-sum-exp so a zero-probability student entry never hits `ln 0`.

use crate::tensor::{log_softmax, Tensor};

/// `Σ_rows KL(teacher_row ‖ softmax(student_row))`.
///
/// Teacher entries that are exactly zero contribute nothing. A student entry
/// of `-inf` under positive teacher mass yields `+inf`.
pub fn kl_loss(teacher: &Tensor, student_logits: &Tensor) -> f64 {
    assert_eq!(teacher.rows, student_logits.rows);
    assert_eq!(teacher.cols, student_logits.cols);
    (0..teacher.rows)
        .map(|r| kl_row(teacher.row(r), student_logits.row(r)))
        .sum()
}

fn kl_row(p: &[f32], logits: &[f32]) -> f64 {
    let logq = log_softmax(logits);
    p.iter()
        .zip(&logq)
        .filter(|(&pv, _)| pv > 0.0)
        .map(|(&pv, &lq)| pv as f64 * ((pv as f64).ln() - lq))
        .sum()
}

/// Mean `-ln softmax(student_row)[target]` over the rows.
pub fn ce_loss_variant(targets: &[u32], student_logits: &Tensor) -> f64 {
    assert_eq!(targets.len(), student_logits.rows);
    if targets.is_empty() {
        return 0.0;
    }
    let total: f64 = targets
        .iter()
        .enumerate()
        .map(|(r, &t)| -log_softmax(student_logits.row(r))[t as usize])
        .sum();
    total / targets.len() as f64
}

/// Target for one supervised row of the training loss.
#[derive(Debug, Clone)]
pub enum RowTarget<'a> {
    Soft(&'a [f32]),
    Hard(u32),
}

/// Mean loss over `rows` of `logits` and its gradient w.r.t. `logits`
/// (rows not listed get zero gradient). Gradient rows are `softmax − target`
/// divided by the number of rows.
pub fn loss_and_grad(logits: &Tensor, rows: &[(usize, RowTarget<'_>)]) -> (f64, Tensor) {
    let mut grad = Tensor::zeros(logits.rows, logits.cols);
    if rows.is_empty() {
        return (0.0, grad);
    }
    let scale = 1.0 / rows.len() as f64;
    let mut total = 0.0;
    for (r, target) in rows {
        let logq = log_softmax(logits.row(*r));
        let g = grad.row_mut(*r);
        match target {
            RowTarget::Soft(p) => {
                for ((gv, &lq), &pv) in g.iter_mut().zip(&logq).zip(p.iter()) {
                    if pv > 0.0 {
                        total += pv as f64 * ((pv as f64).ln() - lq);
                    }
                    *gv = ((lq.exp() - pv as f64) * scale) as f32;
                }
            }
            RowTarget::Hard(t) => {
                total -= logq[*t as usize];
                for (i, (gv, &lq)) in g.iter_mut().zip(&logq).enumerate() {
                    let onehot = if i == *t as usize { 1.0 } else { 0.0 };
                    *gv = ((lq.exp() - onehot) * scale) as f32;
                }
            }
        }
    }
    (total * scale, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::softmax;

    #[test]
    fn kl_of_identical_rows_is_zero() {
        let logits = Tensor::from_vec(2, 3, vec![0.3, -1.0, 2.0, 1.0, 1.0, 0.0]);
        let mut p = Tensor::zeros(2, 3);
        for r in 0..2 {
            p.row_mut(r).copy_from_slice(&softmax(logits.row(r)));
        }
        assert!(kl_loss(&p, &logits).abs() < 1e-7);
    }

    #[test]
    fn one_hot_against_uniform() {
        let p = Tensor::from_vec(1, 4, vec![0.0, 1.0, 0.0, 0.0]);
        let q = Tensor::zeros(1, 4);
        assert!((kl_loss(&p, &q) - 4f64.ln()).abs() < 1e-7);
        assert!((ce_loss_variant(&[1], &q) - 4f64.ln()).abs() < 1e-7);
    }

    #[test]
    fn ce_of_confident_correct_student_is_zero() {
        let q = Tensor::from_vec(1, 3, vec![-1e4, 0.0, -1e4]);
        assert!(ce_loss_variant(&[1], &q).abs() < 1e-9);
    }

    #[test]
    fn kl_with_zero_student_mass_is_infinite_not_nan() {
        let p = Tensor::from_vec(1, 2, vec![0.5, 0.5]);
        let q = Tensor::from_vec(1, 2, vec![0.0, f32::NEG_INFINITY]);
        assert_eq!(kl_loss(&p, &q), f64::INFINITY);
    }

    #[test]
    fn soft_gradient_is_q_minus_p() {
        let logits = Tensor::from_vec(1, 3, vec![0.0, 1.0, -1.0]);
        let p = [0.2f32, 0.5, 0.3];
        let (_, g) = loss_and_grad(&logits, &[(0, RowTarget::Soft(&p))]);
        let q = softmax(logits.row(0));
        for i in 0..3 {
            assert!((g.data[i] - (q[i] - p[i])).abs() < 1e-6);
        }
    }
}
