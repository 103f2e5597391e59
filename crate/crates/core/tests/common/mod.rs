//! Independent oracles shared by the integration and acceptance suites.
#![allow(dead_code)]

use kdmia::attacks::Orientation;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Brute {
    pub accuracy: f64,
    pub tau: f64,
    pub orientation: Orientation,
}

/// Tries every sentinel and midpoint threshold in both orientations,
/// deciding each example directly, and applies the balance tie-break.
pub fn brute_force_calibration(scores: &[f64], labels: &[bool], canonical: Orientation) -> Brute {
    let mut distinct: Vec<f64> = scores.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let mut taus = vec![f64::NEG_INFINITY, f64::INFINITY];
    taus.extend(distinct.windows(2).map(|w| (w[0] + w[1]) / 2.0));
    let p = labels.iter().filter(|&&l| l).count();
    let q = labels.len() - p;
    let mut best: Option<(u128, usize, bool, f64, Orientation)> = None;
    for &tau in &taus {
        for orientation in [canonical, canonical.flipped()] {
            let d: Vec<bool> = scores.iter().map(|&s| orientation.decide(s, tau)).collect();
            let tp = d.iter().zip(labels).filter(|(d, l)| **d && **l).count();
            let tn = d.iter().zip(labels).filter(|(d, l)| !**d && !**l).count();
            let predicted = d.iter().filter(|&&x| x).count();
            let score = (tp * q + tn * p) as u128;
            let imbalance = predicted.abs_diff(labels.len() - predicted);
            let flipped = orientation != canonical;
            let better = match best {
                None => true,
                Some((bs, bi, bf, bt, _)) => {
                    score > bs
                        || (score == bs
                            && (imbalance, flipped, tau).partial_cmp(&(bi, bf, bt)) == Some(std::cmp::Ordering::Less))
                }
            };
            if better {
                best = Some((score, imbalance, flipped, tau, orientation));
            }
        }
    }
    let (score, _, _, tau, orientation) = best.expect("non-empty candidate set");
    Brute {
        accuracy: score as f64 / (2 * p * q) as f64,
        tau,
        orientation,
    }
}

/// `P(X >= k)` for `X ~ Binomial(n, 1/2)` by enumerating all `2^n` outcomes.
pub fn enumerated_tail(n: u32, k: u32) -> f64 {
    let hits = (0u64..1 << n).filter(|m| m.count_ones() >= k).count();
    hits as f64 / (1u64 << n) as f64
}
