//! Ranking metrics.

use crate::error::{Error, Result};

/// Area under the ROC curve as the Mann–Whitney statistic
/// `P(s⁺ > s⁻) + ½·P(s⁺ = s⁻)`.
///
/// Scores are sorted once; each group of tied scores contributes
/// `2·pos·neg_below + pos·neg_tied` to an integer numerator, which is divided
/// by `2·P·N` at the end, so the result equals exhaustive pair counting
/// exactly.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension {
            context: "auc",
            expected: scores.len(),
            actual: labels.len(),
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("auc: NaN score".into()));
    }
    let positives = labels.iter().filter(|&&y| y).count() as u64;
    let negatives = labels.len() as u64 - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::UndefinedMetric("AUC needs at least one positive and one negative"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let mut num2: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0u128, 0u128);
        // -0.0 and 0.0 compare equal as scores.
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                pos += 1;
            } else {
                neg += 1;
            }
            j += 1;
        }
        num2 += 2 * pos * neg_below + pos * neg;
        neg_below += neg;
        i = j;
    }
    Ok(num2 as f64 / (2 * positives as u128 * negatives as u128) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Rng;
    use proptest::prelude::*;

    fn pairwise(scores: &[f64], labels: &[bool]) -> f64 {
        let mut twice = 0u64;
        let (mut p, mut n) = (0u64, 0u64);
        for (i, &yi) in labels.iter().enumerate() {
            if yi {
                p += 1;
            } else {
                n += 1;
            }
            if !yi {
                continue;
            }
            for (j, &yj) in labels.iter().enumerate() {
                if yj {
                    continue;
                }
                if scores[i] > scores[j] {
                    twice += 2;
                } else if scores[i] == scores[j] {
                    twice += 1;
                }
            }
        }
        twice as f64 / (2 * p * n) as f64
    }

    fn labels(bits: &[u8]) -> Vec<bool> {
        bits.iter().map(|&b| b == 1).collect()
    }

    #[test]
    fn examples() {
        let s = [0.9, 0.8, 0.3, 0.2];
        assert_eq!(auc(&s, &labels(&[1, 1, 0, 0])).unwrap(), 1.0);
        assert_eq!(auc(&[0.4; 4], &labels(&[1, 0, 1, 0])).unwrap(), 0.5);
        assert_eq!(auc(&s, &labels(&[1, 0, 1, 0])).unwrap(), 0.75);
    }

    #[test]
    fn single_class_is_undefined() {
        assert!(matches!(
            auc(&[0.1, 0.2], &[true, true]),
            Err(Error::UndefinedMetric(_))
        ));
        assert!(matches!(auc(&[], &[]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn rejects_nan_and_length_mismatch() {
        assert!(auc(&[f64::NAN, 0.1], &[true, false]).is_err());
        assert!(auc(&[0.1], &[true, false]).is_err());
    }

    #[test]
    fn agrees_with_pair_counting_including_ties() {
        let mut rng = Rng::new(4);
        for _ in 0..500 {
            let n = 2 + rng.below(199);
            let levels = 1 + rng.below(12);
            let s: Vec<f64> = (0..n).map(|_| rng.below(levels) as f64 / 4.0).collect();
            let mut y: Vec<bool> = (0..n).map(|_| rng.bernoulli(0.4)).collect();
            y[0] = true;
            y[1] = false;
            assert_eq!(auc(&s, &y).unwrap(), pairwise(&s, &y));
        }
    }

    proptest! {
        #[test]
        fn invariant_under_increasing_maps(
            raw in proptest::collection::vec((-50i32..50, any::<bool>()), 2..120),
            a in 0.1f64..10.0,
            b in -5.0f64..5.0,
        ) {
            let mut s: Vec<f64> = raw.iter().map(|&(v, _)| v as f64 / 10.0).collect();
            let mut y: Vec<bool> = raw.iter().map(|&(_, l)| l).collect();
            y[0] = true;
            y[1] = false;
            s[0] = s[1];
            let base = auc(&s, &y).unwrap();
            let mapped: Vec<f64> = s.iter().map(|v| (a * v + b).exp()).collect();
            prop_assert_eq!(auc(&mapped, &y).unwrap(), base);
            let cubed: Vec<f64> = s.iter().map(|v| v * v * v + v).collect();
            prop_assert_eq!(auc(&cubed, &y).unwrap(), base);
        }
    }
}
