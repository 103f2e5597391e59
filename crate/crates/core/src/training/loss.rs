//! Supervised and distillation objectives.
//!
//! The plain-`f64` functions take row-major `[n, width]` rows and exist for
//! reporting and as references; the `*_on_tape` variants build the same
//! quantities as differentiable graphs for training.

use crate::numeric::{NumericError, Scalar, Tape, Tensor, Var};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum LossError {
    #[error("no target positions")]
    EmptyTargets,
    #[error("rows of width {width} do not match {len} values / {positions} positions")]
    Shape { width: usize, len: usize, positions: usize },
    #[error("infinite divergence: q is zero where p = {p} (row {row}, column {col})")]
    InfiniteDivergence { row: usize, col: usize, p: f64 },
    #[error("lambda must be non-negative, got {0}")]
    NegativeLambda(f64),
}

fn check_rows(rows: &[f64], width: usize, positions: usize) -> Result<(), LossError> {
    if positions == 0 {
        return Err(LossError::EmptyTargets);
    }
    if width == 0 || rows.len() != width * positions {
        return Err(LossError::Shape {
            width,
            len: rows.len(),
            positions,
        });
    }
    Ok(())
}

/// Mean over positions of `-log p(target)`, from log-probability rows.
pub fn ce_loss(logprob_rows: &[f64], width: usize, targets: &[usize]) -> Result<f64, LossError> {
    check_rows(logprob_rows, width, targets.len())?;
    let total: f64 = targets
        .iter()
        .enumerate()
        .map(|(i, &t)| -logprob_rows[i * width + t])
        .sum();
    Ok(total / targets.len() as f64)
}

/// Mean over rows of `KL(p || q) = sum_z p(z) (ln p(z) - ln q(z))`, from
/// probability rows, accumulated in 64-bit.
pub fn kl_div(p: &[f64], q: &[f64], width: usize) -> Result<f64, LossError> {
    let positions = p.len().checked_div(width).unwrap_or(0);
    check_rows(p, width, positions)?;
    check_rows(q, width, positions)?;
    let mut total = 0.0;
    for row in 0..positions {
        for col in 0..width {
            let (pz, qz) = (p[row * width + col], q[row * width + col]);
            if pz > 0.0 {
                if qz <= 0.0 {
                    return Err(LossError::InfiniteDivergence { row, col, p: pz });
                }
                total += pz * (pz.ln() - qz.ln());
            }
        }
    }
    Ok(total / positions as f64)
}

/// `CE(y, p_S) + lambda * KL(p_T || p_S)` from student and teacher
/// log-probability rows.
pub fn distill_loss(
    student_logprobs: &[f64],
    teacher_logprobs: &[f64],
    width: usize,
    targets: &[usize],
    lambda: f64,
) -> Result<f64, LossError> {
    if lambda < 0.0 {
        return Err(LossError::NegativeLambda(lambda));
    }
    check_rows(teacher_logprobs, width, targets.len())?;
    let ce = ce_loss(student_logprobs, width, targets)?;
    if lambda == 0.0 {
        return Ok(ce);
    }
    let p: Vec<f64> = teacher_logprobs.iter().map(|v| v.exp()).collect();
    let q: Vec<f64> = student_logprobs.iter().map(|v| v.exp()).collect();
    Ok(ce + lambda * kl_div(&p, &q, width)?)
}

/// Scalar terms of one sequence's objective, for logging.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub ce: f64,
    pub kl: f64,
    pub lambda: f64,
    pub positions: usize,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.ce + self.lambda * self.kl
    }
}

/// Teacher distribution rows held as tape constants.
pub struct TeacherRows<T> {
    pub probs: Tensor<T>,
    /// `sum_z p ln p` over all rows (negative total entropy).
    pub neg_entropy: f64,
}

impl<T: Scalar> TeacherRows<T> {
    pub fn from_logprobs(rows: &[f64], width: usize) -> Result<Self, NumericError> {
        let probs: Vec<f64> = rows.iter().map(|v| v.exp()).collect();
        let neg_entropy = probs.iter().zip(rows).map(|(p, l)| if *p > 0.0 { p * l } else { 0.0 }).sum();
        Ok(Self {
            probs: Tensor::from_f64(&[rows.len() / width.max(1), width], &probs)?,
            neg_entropy,
        })
    }
}

/// Differentiable distillation objective over `[n, V]` student log-softmax
/// rows. With `teacher = None` (or `lambda = 0`) it is the plain CE loss.
/// Teacher rows enter as constants, so no gradient reaches the teacher.
pub fn distill_loss_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    student_logprobs: Var,
    targets: &[usize],
    teacher: Option<&TeacherRows<T>>,
    lambda: f64,
) -> Result<(Var, LossParts), NumericError> {
    let n = targets.len();
    if n == 0 {
        return Err(NumericError::Invalid {
            op: "distill_loss",
            detail: "no target positions".into(),
        });
    }
    let picked = tape.gather_cols(student_logprobs, targets)?;
    let mean_lp = tape.mean(picked)?;
    let ce = tape.scale(mean_lp, -1.0)?;
    let mut parts = LossParts {
        ce: tape.value(ce).item().f64(),
        kl: 0.0,
        lambda: 0.0,
        positions: n,
    };
    let teacher = match teacher {
        Some(t) if lambda > 0.0 => t,
        _ => return Ok((ce, parts)),
    };
    if teacher.probs.shape() != tape.shape(student_logprobs) {
        return Err(NumericError::Shape {
            op: "distill_loss",
            detail: format!("teacher {:?} vs student {:?}", teacher.probs.shape(), tape.shape(student_logprobs)),
        });
    }
    let p = tape.constant(teacher.probs.clone());
    let weighted = tape.mul(p, student_logprobs)?;
    let cross = tape.sum(weighted)?;
    let kl_total = (teacher.neg_entropy - tape.value(cross).item().f64()) / n as f64;
    parts.kl = kl_total;
    parts.lambda = lambda;
    // lambda * KL = lambda/n * (neg_entropy - cross)
    let scaled = tape.scale(cross, -lambda / n as f64)?;
    let offset = tape.constant(Tensor::scalar(T::of(lambda * teacher.neg_entropy / n as f64)));
    let kl_term = tape.add(scaled, offset)?;
    let loss = tape.add(ce, kl_term)?;
    Ok((loss, parts))
}

#[cfg(test)]
mod tests {
    use super::*;

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn ce_examples() {
        // one-hot
        let rows = [0.0, f64::NEG_INFINITY];
        assert_eq!(ce_loss(&rows, 2, &[0]).unwrap(), 0.0);
        let uniform = [-(4f64).ln(); 4];
        assert!((ce_loss(&uniform, 4, &[2]).unwrap() - 1.386294).abs() < 1e-6);
        let rows = [(0.5f64).ln(), (0.5f64).ln(), (0.25f64).ln(), (0.75f64).ln()];
        assert!((ce_loss(&rows, 2, &[0, 0]).unwrap() - 1.039721).abs() < 1e-6);
        assert_eq!(ce_loss(&[], 2, &[]), Err(LossError::EmptyTargets));
    }

    #[test]
    fn kl_examples() {
        let p = [0.5, 0.5];
        assert_eq!(kl_div(&p, &p, 2).unwrap(), 0.0);
        let oracle = 0.5 * (0.5f64 / 0.75).ln() + 0.5 * (0.5f64 / 0.25).ln();
        let got = kl_div(&p, &[0.75, 0.25], 2).unwrap();
        assert!((got - oracle).abs() < 1e-12);
        assert!((got - 0.143841).abs() < 1e-6);
        assert!(matches!(
            kl_div(&p, &[1.0, 0.0], 2),
            Err(LossError::InfiniteDivergence { row: 0, col: 1, .. })
        ));
    }

    #[test]
    fn distill_examples() {
        let student = [-LN2, -LN2];
        let teacher = [(0.75f64).ln(), (0.25f64).ln()];
        let got = distill_loss(&student, &teacher, 2, &[0], 1.0).unwrap();
        let kl = 0.75 * (1.5f64).ln() + 0.25 * (0.5f64).ln();
        assert!((kl - 0.130812).abs() < 1e-6);
        assert!((got - (LN2 + kl)).abs() < 1e-12);
        assert!((got - 0.823959).abs() < 1e-6);
        assert_eq!(
            distill_loss(&student, &teacher, 2, &[0], 0.0).unwrap(),
            ce_loss(&student, 2, &[0]).unwrap()
        );
        assert_eq!(
            distill_loss(&teacher, &teacher, 2, &[1], 5.0).unwrap(),
            ce_loss(&teacher, 2, &[1]).unwrap()
        );
        assert!(distill_loss(&student, &teacher, 2, &[0], -1.0).is_err());
    }

    #[test]
    fn tape_objective_matches_reference() {
        let student = [(0.2f64).ln(), (0.3f64).ln(), (0.5f64).ln(), (0.6f64).ln(), (0.1f64).ln(), (0.3f64).ln()];
        let teacher = [(0.1f64).ln(), (0.1f64).ln(), (0.8f64).ln(), (0.3f64).ln(), (0.3f64).ln(), (0.4f64).ln()];
        let targets = [2, 0];
        let reference = distill_loss(&student, &teacher, 3, &targets, 0.7).unwrap();
        let mut tape = Tape::<f64>::new();
        let s = tape.param(Tensor::from_f64(&[2, 3], &student).unwrap());
        let rows = TeacherRows::from_logprobs(&teacher, 3).unwrap();
        let (loss, parts) = distill_loss_on_tape(&mut tape, s, &targets, Some(&rows), 0.7).unwrap();
        assert!((tape.value(loss).item() - reference).abs() < 1e-12);
        assert!((parts.total() - reference).abs() < 1e-12);
    }
}
