use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Below this many contaminated × clean pairs, AUC is computed by direct
/// pair counting.
pub const PAIR_COUNT_LIMIT: usize = 4096;

/// Pair tallies behind the Mann–Whitney statistic.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairCounts {
    pub greater: u64,
    pub ties: u64,
    pub total: u64,
}

impl PairCounts {
    /// `(greater + ties/2) / total`, evaluated as `(2·greater + ties) / (2·total)`.
    pub fn auc(&self) -> f64 {
        (2 * self.greater + self.ties) as f64 / (2 * self.total) as f64
    }
}

fn check(contaminated: &[f64], clean: &[f64]) -> Result<()> {
    if contaminated.is_empty() || clean.is_empty() {
        return Err(Error::DegenerateLabels(format!(
            "{} contaminated and {} clean scores",
            contaminated.len(),
            clean.len()
        )));
    }
    if contaminated.iter().chain(clean).any(|x| x.is_nan()) {
        return Err(Error::Config("scores contain NaN".into()));
    }
    Ok(())
}

/// Brute-force tally over every (contaminated, clean) pair.
pub fn pair_counts_brute(contaminated: &[f64], clean: &[f64]) -> PairCounts {
    let mut greater = 0u64;
    let mut ties = 0u64;
    for &c in contaminated {
        for &n in clean {
            if c > n {
                greater += 1;
            } else if c == n {
                ties += 1;
            }
        }
    }
    PairCounts {
        greater,
        ties,
        total: (contaminated.len() * clean.len()) as u64,
    }
}

/// The same tally via one sort of the clean scores and two binary searches
/// per contaminated score.
pub fn pair_counts_ranked(contaminated: &[f64], clean: &[f64]) -> PairCounts {
    let mut sorted = clean.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut greater = 0u64;
    let mut ties = 0u64;
    for &c in contaminated {
        let below = sorted.partition_point(|&n| n < c);
        let at_or_below = sorted.partition_point(|&n| n <= c);
        greater += below as u64;
        ties += (at_or_below - below) as u64;
    }
    PairCounts {
        greater,
        ties,
        total: (contaminated.len() * clean.len()) as u64,
    }
}

/// Probability that a random contaminated score exceeds a random clean one,
/// ties counting one half. Values below 0.5 are returned as is.
pub fn auc(contaminated: &[f64], clean: &[f64]) -> Result<f64> {
    check(contaminated, clean)?;
    let counts = if contaminated.len() * clean.len() <= PAIR_COUNT_LIMIT {
        pair_counts_brute(contaminated, clean)
    } else {
        pair_counts_ranked(contaminated, clean)
    };
    Ok(counts.auc())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// The leading `+∞` threshold is written as the string `"inf"`.
    #[serde(with = "extended_real")]
    pub threshold: f64,
    pub tpr: f64,
    pub fpr: f64,
}

/// ROC curve with "score ≥ threshold ⇒ contaminated", thresholds descending.
/// The first point is `(0, 0)` at threshold `+∞`.
pub fn roc_curve(contaminated: &[f64], clean: &[f64]) -> Result<Vec<RocPoint>> {
    check(contaminated, clean)?;
    let mut all: Vec<(f64, bool)> = contaminated
        .iter()
        .map(|&x| (x, true))
        .chain(clean.iter().map(|&x| (x, false)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (p, n) = (contaminated.len() as f64, clean.len() as f64);
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        tpr: 0.0,
        fpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < all.len() {
        let threshold = all[i].0;
        while i < all.len() && all[i].0 == threshold {
            if all[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold,
            tpr: tp as f64 / p,
            fpr: fp as f64 / n,
        });
    }
    Ok(points)
}

mod extended_real {
    use serde::{de, Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Finite(f64),
        Named(String),
    }

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        if x.is_finite() {
            Repr::Finite(*x).serialize(s)
        } else if x.is_nan() {
            Repr::Named("nan".into()).serialize(s)
        } else if *x > 0.0 {
            Repr::Named("inf".into()).serialize(s)
        } else {
            Repr::Named("-inf".into()).serialize(s)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Finite(x) => Ok(x),
            Repr::Named(n) => match n.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(de::Error::custom(format!("bad threshold {other:?}"))),
            },
        }
    }
}

pub fn trapezoid_area(points: &[RocPoint]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn worked_examples() {
        assert_eq!(auc(&[0.9, 0.8], &[0.1, 0.2]).unwrap(), 1.0);
        // pairs: 0.8>0.5, 0.8>0.2, 0.3<0.5, 0.3>0.2
        assert_eq!(pair_counts_brute(&[0.8, 0.3], &[0.5, 0.2]).auc(), 0.75);
        assert_eq!(auc(&[0.8, 0.3], &[0.5, 0.2]).unwrap(), 0.75);
        assert_eq!(auc(&[1.0, 1.0], &[1.0, 1.0, 1.0]).unwrap(), 0.5);
        assert_eq!(auc(&[0.1], &[0.9]).unwrap(), 0.0);
    }

    #[test]
    fn degenerate_labels() {
        assert!(matches!(auc(&[], &[1.0]), Err(Error::DegenerateLabels(_))));
        assert!(matches!(auc(&[1.0], &[]), Err(Error::DegenerateLabels(_))));
    }

    #[test]
    fn roc_shapes() {
        let perfect = roc_curve(&[0.9, 0.8], &[0.1, 0.2]).unwrap();
        assert!(perfect.iter().any(|p| p.fpr == 0.0 && p.tpr == 1.0));
        let ties = roc_curve(&[0.5, 0.5], &[0.5]).unwrap();
        assert_eq!(ties.len(), 2);
        assert_eq!((ties[0].fpr, ties[0].tpr), (0.0, 0.0));
        assert_eq!((ties[1].fpr, ties[1].tpr), (1.0, 1.0));
        for w in perfect.windows(2) {
            assert!(w[0].threshold > w[1].threshold);
            assert!(w[0].tpr <= w[1].tpr && w[0].fpr <= w[1].fpr);
        }
    }

    #[test]
    fn roc_points_round_trip_through_json() {
        let pts = roc_curve(&[0.9, 0.3], &[0.5]).unwrap();
        let json = serde_json::to_string(&pts).unwrap();
        assert!(json.contains("\"inf\""));
        let back: Vec<RocPoint> = serde_json::from_str(&json).unwrap();
        assert_eq!(back, pts);
    }

    #[test]
    fn trapezoid_matches_auc_on_random_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        for _ in 0..50 {
            let c: Vec<f64> = (0..25)
                .map(|_| (rng.random::<f64>() * 10.0).round())
                .collect();
            let n: Vec<f64> = (0..25)
                .map(|_| (rng.random::<f64>() * 10.0).round())
                .collect();
            let area = trapezoid_area(&roc_curve(&c, &n).unwrap());
            assert!((area - auc(&c, &n).unwrap()).abs() <= 1e-12);
        }
    }

    proptest! {
        #[test]
        fn ranked_equals_brute(c in proptest::collection::vec(-5i32..5, 1..40),
                               n in proptest::collection::vec(-5i32..5, 1..40)) {
            let c: Vec<f64> = c.into_iter().map(f64::from).collect();
            let n: Vec<f64> = n.into_iter().map(f64::from).collect();
            prop_assert_eq!(pair_counts_ranked(&c, &n), pair_counts_brute(&c, &n));
        }

        #[test]
        fn invariant_under_monotone_transform(c in proptest::collection::vec(-3.0f64..3.0, 1..30),
                                              n in proptest::collection::vec(-3.0f64..3.0, 1..30)) {
            let a = auc(&c, &n).unwrap();
            let tc: Vec<f64> = c.iter().map(|x| x.exp() * 2.0 + 1.0).collect();
            let tn: Vec<f64> = n.iter().map(|x| x.exp() * 2.0 + 1.0).collect();
            prop_assert_eq!(a, auc(&tc, &tn).unwrap());
        }

        #[test]
        fn negation_complements_without_ties(c in proptest::collection::hash_set(-1000i32..1000, 1..30),
                                             n in proptest::collection::hash_set(1000i32..3000, 1..30)) {
            let c: Vec<f64> = c.into_iter().map(f64::from).collect();
            let mut n: Vec<f64> = n.into_iter().map(|x| f64::from(x) - 2000.5).collect();
            n.retain(|x| !c.contains(x));
            prop_assume!(!n.is_empty());
            let neg_c: Vec<f64> = c.iter().map(|x| -x).collect();
            let neg_n: Vec<f64> = n.iter().map(|x| -x).collect();
            let sum = auc(&c, &n).unwrap() + auc(&neg_c, &neg_n).unwrap();
            prop_assert!((sum - 1.0).abs() < 1e-15);
        }
    }
}
