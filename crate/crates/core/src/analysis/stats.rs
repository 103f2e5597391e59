use serde::{Deserialize, Serialize};

use super::AnalysisError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignTestResult {
    pub n_nonties: u64,
    pub n_successes: u64,
    pub p_value: f64,
}

fn ln_choose(n: u64, k: u64) -> f64 {
    let k = k.min(n - k);
    (0..k).map(|i| ((n - i) as f64).ln() - ((i + 1) as f64).ln()).sum()
}

/// Binomial(n, 1/2) probability mass at `k`.
pub fn binomial_pmf(n: u64, k: u64) -> f64 {
    if k > n {
        return 0.0;
    }
    if n <= 60 {
        let mut c = 1.0f64;
        for i in 0..k.min(n - k) {
            c = c * (n - i) as f64 / (i + 1) as f64;
        }
        c * 0.5f64.powi(n as i32)
    } else {
        (ln_choose(n, k) - n as f64 * std::f64::consts::LN_2).exp()
    }
}

/// Exact one-sided sign test: `P(X >= k)` for `X ~ Binomial(n, 1/2)`.
pub fn sign_test(n_nonties: u64, n_successes: u64) -> Result<SignTestResult, AnalysisError> {
    if n_nonties == 0 {
        return Err(AnalysisError::Invalid("sign test needs at least one non-tie".into()));
    }
    if n_successes > n_nonties {
        return Err(AnalysisError::Invalid(format!(
            "{n_successes} successes out of {n_nonties} trials"
        )));
    }
    let p: f64 = (n_successes..=n_nonties).map(|i| binomial_pmf(n_nonties, i)).sum();
    Ok(SignTestResult {
        n_nonties,
        n_successes,
        p_value: p.min(1.0),
    })
}

/// Mean over attacks of `1 - variant_i / baseline_i`.
pub fn relative_reduction(baseline: &[f64], variant: &[f64]) -> Result<f64, AnalysisError> {
    if baseline.len() != variant.len() || baseline.is_empty() {
        return Err(AnalysisError::Invalid(format!(
            "baseline has {} entries, variant {}",
            baseline.len(),
            variant.len()
        )));
    }
    if let Some(i) = baseline.iter().position(|&b| b <= 0.0) {
        return Err(AnalysisError::Invalid(format!("baseline entry {i} is not positive")));
    }
    let sum: f64 = baseline.iter().zip(variant).map(|(b, v)| 1.0 - v / b).sum();
    Ok(sum / baseline.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Winner {
    /// Teacher has strictly lower attack accuracy.
    Teacher,
    Student,
    Tie,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairComparison {
    pub cells: Vec<(String, Winner)>,
    pub teacher_lower: u64,
    pub student_lower: u64,
    pub ties: u64,
}

impl PairComparison {
    pub fn nonties(&self) -> u64 {
        self.teacher_lower + self.student_lower
    }

    /// Sign test on "teacher accuracy higher than student", i.e. the count of
    /// cells where the student is lower.
    pub fn sign_test_teacher_higher(&self) -> Result<SignTestResult, AnalysisError> {
        sign_test(self.nonties(), self.student_lower)
    }

    /// The same test counting cells where the teacher is lower.
    pub fn sign_test_teacher_lower(&self) -> Result<SignTestResult, AnalysisError> {
        sign_test(self.nonties(), self.teacher_lower)
    }

    pub fn merge(parts: &[PairComparison]) -> PairComparison {
        let mut out = PairComparison {
            cells: Vec::new(),
            teacher_lower: 0,
            student_lower: 0,
            ties: 0,
        };
        for p in parts {
            out.cells.extend(p.cells.iter().cloned());
            out.teacher_lower += p.teacher_lower;
            out.student_lower += p.student_lower;
            out.ties += p.ties;
        }
        out
    }
}

/// Per-attack privacy winner between a teacher and a student. Both tables are
/// `(attack, accuracy)` lists over the same attack set.
pub fn compare_pair(teacher: &[(String, f64)], student: &[(String, f64)]) -> Result<PairComparison, AnalysisError> {
    let mut t: Vec<&(String, f64)> = teacher.iter().collect();
    let mut s: Vec<&(String, f64)> = student.iter().collect();
    t.sort_by(|a, b| a.0.cmp(&b.0));
    s.sort_by(|a, b| a.0.cmp(&b.0));
    let same = t.len() == s.len() && t.iter().zip(&s).all(|(a, b)| a.0 == b.0);
    if !same {
        return Err(AnalysisError::Invalid("teacher and student attack sets differ".into()));
    }
    let mut out = PairComparison {
        cells: Vec::with_capacity(teacher.len()),
        teacher_lower: 0,
        student_lower: 0,
        ties: 0,
    };
    for (name, ta) in teacher {
        let sa = student.iter().find(|(n, _)| n == name).map(|(_, v)| *v).expect("checked above");
        let w = if *ta < sa {
            out.teacher_lower += 1;
            Winner::Teacher
        } else if sa < *ta {
            out.student_lower += 1;
            Winner::Student
        } else {
            out.ties += 1;
            Winner::Tie
        };
        out.cells.push((name.clone(), w));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sign_test_examples() {
        assert_eq!(sign_test(1, 1).unwrap().p_value, 0.5);
        assert_eq!(sign_test(4, 4).unwrap().p_value, 0.0625);
        assert_eq!(sign_test(5, 0).unwrap().p_value, 1.0);
        assert!(sign_test(3, 4).is_err());
        assert!(sign_test(0, 0).is_err());
    }

    #[test]
    fn log_domain_agrees_near_switch() {
        // n = 61 uses logs; compare with the product form via symmetry pmf(n,k)=pmf(n,n-k)
        let a = binomial_pmf(61, 20);
        let b = binomial_pmf(61, 41);
        assert!((a - b).abs() < 1e-15);
        let total: f64 = (0..=61).map(|k| binomial_pmf(61, k)).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn reduction_examples() {
        assert_eq!(relative_reduction(&[0.5, 0.8], &[0.5, 0.8]).unwrap(), 0.0);
        assert!((relative_reduction(&[1.0, 0.5], &[0.5, 0.5]).unwrap() - 0.25).abs() < 1e-15);
        assert!(relative_reduction(&[0.0], &[0.1]).is_err());
        assert!(relative_reduction(&[0.2], &[]).is_err());
    }

    #[test]
    fn compare_pair_counts() {
        let t = vec![("a".to_string(), 0.6), ("b".to_string(), 0.5)];
        let s = vec![("a".to_string(), 0.5), ("b".to_string(), 0.5)];
        let c = compare_pair(&t, &s).unwrap();
        assert_eq!((c.teacher_lower, c.student_lower, c.ties), (0, 1, 1));
        let other = vec![("a".to_string(), 0.5), ("c".to_string(), 0.5)];
        assert!(compare_pair(&t, &other).is_err());
    }
}
