use std::cmp::Ordering;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AttackConfig, AttackError, Orientation};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiaMetrics {
    pub tpr: f64,
    pub tnr: f64,
    pub accuracy: f64,
}

impl MiaMetrics {
    fn from_counts(tp: usize, members: usize, tn: usize, nonmembers: usize) -> Self {
        let tpr = tp as f64 / members as f64;
        let tnr = tn as f64 / nonmembers as f64;
        Self {
            tpr,
            tnr,
            accuracy: (tpr + tnr) / 2.0,
        }
    }
}

/// TPR over member decisions, TNR over non-member decisions, and their mean.
pub fn mia_metrics(member_decisions: &[bool], nonmember_decisions: &[bool]) -> Result<MiaMetrics, AttackError> {
    if member_decisions.is_empty() || nonmember_decisions.is_empty() {
        return Err(AttackError::SingleClass {
            members: member_decisions.len(),
            nonmembers: nonmember_decisions.len(),
        });
    }
    let tp = member_decisions.iter().filter(|&&d| d).count();
    let tn = nonmember_decisions.iter().filter(|&&d| !d).count();
    Ok(MiaMetrics::from_counts(
        tp,
        member_decisions.len(),
        tn,
        nonmember_decisions.len(),
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibratedAttack {
    pub config: AttackConfig,
    #[serde(with = "super::records::tau_serde")]
    pub tau: f64,
    pub orientation: Orientation,
    pub calibration_note: String,
}

impl CalibratedAttack {
    pub fn decide(&self, raw: f64) -> bool {
        self.orientation.decide(raw, self.tau)
    }

    pub fn metrics(&self, scores: &[f64], labels: &[bool]) -> Result<MiaMetrics, AttackError> {
        check_inputs(scores, labels)?;
        let (mut member, mut nonmember) = (Vec::new(), Vec::new());
        for (&s, &is_member) in scores.iter().zip(labels) {
            if is_member {
                member.push(self.decide(s));
            } else {
                nonmember.push(self.decide(s));
            }
        }
        mia_metrics(&member, &nonmember)
    }
}

fn check_inputs(scores: &[f64], labels: &[bool]) -> Result<(usize, usize), AttackError> {
    if scores.len() != labels.len() {
        return Err(AttackError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if let Some(&bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(AttackError::NonFinite(bad));
    }
    let members = labels.iter().filter(|&&l| l).count();
    let nonmembers = labels.len() - members;
    if members == 0 || nonmembers == 0 {
        return Err(AttackError::SingleClass { members, nonmembers });
    }
    Ok((members, nonmembers))
}

#[derive(Clone, Copy, Debug)]
struct Candidate {
    tau: f64,
    orientation: Orientation,
    tp: usize,
    tn: usize,
    predicted_members: usize,
}

/// Selection order among candidates with the same accuracy: fewer
/// |predicted members - predicted non-members|, then the canonical
/// orientation, then smaller tau.
fn balance_policy(a: &Candidate, b: &Candidate, n: usize, canonical: Orientation) -> Ordering {
    let imbalance = |c: &Candidate| c.predicted_members.abs_diff(n - c.predicted_members);
    imbalance(a)
        .cmp(&imbalance(b))
        .then_with(|| (a.orientation != canonical).cmp(&(b.orientation != canonical)))
        .then(a.tau.total_cmp(&b.tau))
}

fn best_candidate(scores: &[f64], labels: &[bool], canonical: Orientation) -> Result<Candidate, AttackError> {
    let (p, q) = check_inputs(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // distinct values with per-class counts
    let mut values: Vec<f64> = Vec::new();
    let mut counts: Vec<(usize, usize)> = Vec::new();
    for &i in &order {
        if values.last() != Some(&scores[i]) {
            values.push(scores[i]);
            counts.push((0, 0));
        }
        let c = counts.last_mut().unwrap();
        if labels[i] {
            c.0 += 1;
        } else {
            c.1 += 1;
        }
    }
    let m = values.len();
    let n = scores.len();
    // below[i] = class counts of values with index < i
    let mut below = vec![(0usize, 0usize); m + 1];
    for i in 0..m {
        below[i + 1] = (below[i].0 + counts[i].0, below[i].1 + counts[i].1);
    }

    let tau_for = |i: usize, orientation: Orientation| -> f64 {
        if i == 0 {
            return f64::NEG_INFINITY;
        }
        if i == m {
            return f64::INFINITY;
        }
        let (lo, hi) = (values[i - 1], values[i]);
        let mid = lo + (hi - lo) / 2.0;
        match orientation {
            Orientation::HigherIsMember if mid >= hi => lo,
            Orientation::LowerIsMember if mid <= lo => hi,
            _ => mid,
        }
    };

    let mut best: Option<Candidate> = None;
    for (i, &(mem, non)) in below.iter().enumerate() {
        for orientation in [canonical, canonical.flipped()] {
            let (tp, fp) = match orientation {
                Orientation::HigherIsMember => (p - mem, q - non),
                Orientation::LowerIsMember => (mem, non),
            };
            let c = Candidate {
                tau: tau_for(i, orientation),
                orientation,
                tp,
                tn: q - fp,
                predicted_members: tp + fp,
            };
            best = Some(match best {
                None => c,
                Some(b) => {
                    // accuracy compared exactly as tp/p + tn/q over a common denominator
                    let score = |x: &Candidate| (x.tp * q + x.tn * p) as u128;
                    match score(&c).cmp(&score(&b)) {
                        Ordering::Greater => c,
                        Ordering::Less => b,
                        Ordering::Equal => {
                            if balance_policy(&c, &b, n, canonical) == Ordering::Less {
                                c
                            } else {
                                b
                            }
                        }
                    }
                }
            });
        }
    }
    Ok(best.expect("at least two candidates"))
}

/// Picks the threshold and orientation maximizing `(TPR + TNR) / 2` over
/// the sentinels and all midpoints between distinct scores.
pub fn calibrate_threshold(
    config: AttackConfig,
    scores: &[f64],
    labels: &[bool],
) -> Result<(CalibratedAttack, MiaMetrics), AttackError> {
    let canonical = config.method.canonical_orientation();
    let c = best_candidate(scores, labels, canonical)?;
    let (p, q) = check_inputs(scores, labels)?;
    let metrics = MiaMetrics::from_counts(c.tp, p, c.tn, q);
    let note = format!(
        "{} candidates x 2 orientations over {} members / {} non-members; {} predicted members; orientation {}",
        {
            let mut v = scores.to_vec();
            v.sort_by(f64::total_cmp);
            v.dedup();
            v.len() + 1
        },
        p,
        q,
        c.predicted_members,
        if c.orientation == canonical { "canonical" } else { "flipped" }
    );
    Ok((
        CalibratedAttack {
            config,
            tau: c.tau,
            orientation: c.orientation,
            calibration_note: note,
        },
        metrics,
    ))
}

/// Seed-keyed stratified fold index for every example.
pub fn stratified_folds(labels: &[bool], folds: usize, seed: u64) -> Result<Vec<usize>, AttackError> {
    if folds < 2 {
        return Err(AttackError::TooFewFolds(folds));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = vec![0; labels.len()];
    for class in [true, false] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if idx.len() < folds {
            return Err(AttackError::DegenerateFold {
                fold: idx.len(),
                detail: format!(
                    "{} {} for {folds} folds",
                    idx.len(),
                    if class { "members" } else { "non-members" }
                ),
            });
        }
        idx.shuffle(&mut rng);
        for (pos, i) in idx.into_iter().enumerate() {
            assignment[i] = pos % folds;
        }
    }
    Ok(assignment)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CvOutcome<G> {
    pub best: G,
    /// Mean held-out accuracy for each grid value, in grid order.
    pub mean_accuracy: Vec<f64>,
}

/// K-fold selection of a hyperparameter: for every grid value the threshold
/// is calibrated on the training folds and scored on the held-out fold.
/// Ties go to the smallest grid value.
pub fn cv_tune<G, F>(
    grid: &[G],
    labels: &[bool],
    folds: usize,
    seed: u64,
    canonical: Orientation,
    mut scores_for: F,
) -> Result<CvOutcome<G>, AttackError>
where
    G: Clone + PartialOrd,
    F: FnMut(&G) -> Result<Vec<f64>, AttackError>,
{
    if grid.is_empty() {
        return Err(AttackError::EmptyGrid);
    }
    let assignment = stratified_folds(labels, folds, seed)?;
    let mut mean_accuracy = Vec::with_capacity(grid.len());
    for value in grid {
        let scores = scores_for(value)?;
        if scores.len() != labels.len() {
            return Err(AttackError::LengthMismatch {
                scores: scores.len(),
                labels: labels.len(),
            });
        }
        let mut total = 0.0;
        for fold in 0..folds {
            let (mut tr_s, mut tr_l, mut member, mut nonmember) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
            for i in 0..labels.len() {
                if assignment[i] != fold {
                    tr_s.push(scores[i]);
                    tr_l.push(labels[i]);
                }
            }
            let c = best_candidate(&tr_s, &tr_l, canonical)?;
            for i in (0..labels.len()).filter(|&i| assignment[i] == fold) {
                let d = c.orientation.decide(scores[i], c.tau);
                if labels[i] {
                    member.push(d);
                } else {
                    nonmember.push(d);
                }
            }
            total += mia_metrics(&member, &nonmember)?.accuracy;
        }
        mean_accuracy.push(total / folds as f64);
    }
    let mut best = 0;
    for i in 1..grid.len() {
        let better = mean_accuracy[i] > mean_accuracy[best]
            || (mean_accuracy[i] == mean_accuracy[best] && grid[i] < grid[best]);
        if better {
            best = i;
        }
    }
    Ok(CvOutcome {
        best: grid[best].clone(),
        mean_accuracy,
    })
}
