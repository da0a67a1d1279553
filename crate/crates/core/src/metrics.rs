//! Ranking metrics for heavily imbalanced anomaly labels. Higher scores mean
//! more anomalous.

use serde::{Deserialize, Serialize};

use crate::dataio::Label;
use crate::error::{Error, Result};

fn check(scores: &[f64], labels: &[Label]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::shape(format!("{} scores but {} labels", scores.len(), labels.len())));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::NonFinite(format!("score {s}")));
    }
    let n_anom = labels.iter().filter(|l| l.is_anomalous()).count();
    Ok((scores.len() - n_anom, n_anom))
}

fn both_classes(n_normal: usize, n_anom: usize) -> Result<()> {
    if n_normal == 0 || n_anom == 0 {
        return Err(Error::UndefinedMetric(format!(
            "need both classes, got {n_normal} normal and {n_anom} anomalous"
        )));
    }
    Ok(())
}

/// Indices sorted by score, with runs of equal scores grouped.
fn tie_groups(scores: &[f64], descending: bool) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        let o = scores[a].total_cmp(&scores[b]);
        if descending {
            o.reverse()
        } else {
            o
        }
    });
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in order {
        match groups.last_mut() {
            Some(g) if scores[g[0]] == scores[i] => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups
}

/// Mann–Whitney AUROC; ties count one half.
pub fn auroc(scores: &[f64], labels: &[Label]) -> Result<f64> {
    let (n_normal, n_anom) = check(scores, labels)?;
    both_classes(n_normal, n_anom)?;
    // Twice the pair count keeps the half-ties integral.
    let mut twice_wins: u128 = 0;
    let mut normals_below: u128 = 0;
    for g in tie_groups(scores, false) {
        let a = g.iter().filter(|&&i| labels[i].is_anomalous()).count() as u128;
        let n = g.len() as u128 - a;
        twice_wins += a * (2 * normals_below + n);
        normals_below += n;
    }
    Ok(twice_wins as f64 / 2.0 / (n_anom as f64 * n_normal as f64))
}

/// Average precision, `Σ_k (R_k − R_{k−1}) P_k` over descending thresholds
/// with tied scores entering together.
pub fn aucpr(scores: &[f64], labels: &[Label]) -> Result<f64> {
    let (n_normal, n_anom) = check(scores, labels)?;
    both_classes(n_normal, n_anom)?;
    let (mut tp, mut seen, mut ap) = (0usize, 0usize, 0.0);
    for g in tie_groups(scores, true) {
        let a = g.iter().filter(|&&i| labels[i].is_anomalous()).count();
        tp += a;
        seen += g.len();
        if a > 0 {
            ap += (a as f64 / n_anom as f64) * (tp as f64 / seen as f64);
        }
    }
    Ok(ap)
}

/// Smallest `k` with `k / n ≥ frac`.
fn quantile_rank(n: usize, frac: f64) -> usize {
    let mut k = ((frac * n as f64).ceil() as usize).clamp(1, n);
    while k > 1 && (k - 1) as f64 / n as f64 >= frac {
        k -= 1;
    }
    while k < n && (k as f64 / n as f64) < frac {
        k += 1;
    }
    k
}

/// Threshold passing `yield_frac` of normal devices and the number of
/// anomalies scored strictly above it.
pub fn recall_at_yield(scores: &[f64], labels: &[Label], yield_frac: f64) -> Result<(usize, f64)> {
    let (n_normal, _) = check(scores, labels)?;
    if !(yield_frac > 0.0 && yield_frac < 1.0) {
        return Err(Error::Range(format!("yield fraction {yield_frac} outside (0, 1)")));
    }
    if n_normal == 0 {
        return Err(Error::UndefinedMetric("no normal devices to set a yield threshold".into()));
    }
    let mut normal: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, l)| !l.is_anomalous())
        .map(|(s, _)| *s)
        .collect();
    normal.sort_by(f64::total_cmp);
    let threshold = normal[quantile_rank(n_normal, yield_frac) - 1];
    let recalled = scores
        .iter()
        .zip(labels)
        .filter(|(s, l)| l.is_anomalous() && **s > threshold)
        .count();
    Ok((recalled, threshold))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auroc: f64,
    pub aucpr: f64,
    pub recalled_count: usize,
    pub recalled_any: bool,
    pub threshold: f64,
    pub n_normal: usize,
    pub n_anomaly: usize,
}

pub fn evaluate(scores: &[f64], labels: &[Label], yield_frac: f64) -> Result<EvalReport> {
    let (n_normal, n_anomaly) = check(scores, labels)?;
    let (recalled_count, threshold) = recall_at_yield(scores, labels, yield_frac)?;
    Ok(EvalReport {
        auroc: auroc(scores, labels)?,
        aucpr: aucpr(scores, labels)?,
        recalled_count,
        recalled_any: recalled_count > 0,
        threshold,
        n_normal,
        n_anomaly,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use Label::{Anomalous as A, Normal as N};

    fn oracle_auroc(s: &[f64], l: &[Label]) -> f64 {
        let mut num = 0.0;
        let (mut na, mut nn) = (0.0, 0.0);
        for i in 0..s.len() {
            if l[i] == A {
                na += 1.0;
            } else {
                nn += 1.0;
            }
            for j in 0..s.len() {
                if l[i] == A && l[j] == N {
                    num += if s[i] > s[j] {
                        1.0
                    } else if s[i] == s[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        num / (na * nn)
    }

    fn oracle_ap(s: &[f64], l: &[Label]) -> f64 {
        let mut thresholds: Vec<f64> = s.to_vec();
        thresholds.sort_by(|a, b| b.total_cmp(a));
        thresholds.dedup();
        let na = l.iter().filter(|x| **x == A).count() as f64;
        let (mut prev_recall, mut ap) = (0.0, 0.0);
        for th in thresholds {
            let flagged: Vec<usize> = (0..s.len()).filter(|&i| s[i] >= th).collect();
            let tp = flagged.iter().filter(|&&i| l[i] == A).count() as f64;
            let recall = tp / na;
            ap += (recall - prev_recall) * tp / flagged.len() as f64;
            prev_recall = recall;
        }
        ap
    }

    fn oracle_recall(s: &[f64], l: &[Label], y: f64) -> (usize, f64) {
        let normals: Vec<f64> = (0..s.len()).filter(|&i| l[i] == N).map(|i| s[i]).collect();
        let mut candidates = normals.clone();
        candidates.sort_by(f64::total_cmp);
        let th = candidates
            .into_iter()
            .find(|c| normals.iter().filter(|v| *v <= c).count() as f64 / normals.len() as f64 >= y)
            .unwrap();
        ((0..s.len()).filter(|&i| l[i] == A && s[i] > th).count(), th)
    }

    #[test]
    fn worked_examples() {
        assert_eq!(auroc(&[1.0, 2.0, 3.0, 4.0], &[N, N, N, A]).unwrap(), 1.0);
        assert_eq!(auroc(&[1.0, 3.0, 2.0], &[N, N, A]).unwrap(), 0.5);
        assert_eq!(auroc(&[1.0, 2.0, 2.0], &[N, N, A]).unwrap(), 0.75);
        assert_eq!(aucpr(&[1.0, 3.0, 2.0], &[N, N, A]).unwrap(), 0.5);
        assert_eq!(aucpr(&[1.0, 2.0, 9.0], &[N, N, A]).unwrap(), 1.0);
    }

    #[test]
    fn yield_threshold_example() {
        let mut s: Vec<f64> = (1..=100).map(f64::from).collect();
        let mut l = vec![N; 100];
        s.push(99.5);
        l.push(A);
        assert_eq!(recall_at_yield(&s, &l, 0.95).unwrap(), (1, 95.0));
        s.push(0.0);
        l.push(A);
        assert_eq!(recall_at_yield(&s, &l, 0.95).unwrap().0, 1);
    }

    #[test]
    fn single_class_is_undefined() {
        assert!(matches!(auroc(&[1.0, 2.0], &[N, N]), Err(Error::UndefinedMetric(_))));
        assert!(matches!(aucpr(&[1.0, 2.0], &[A, A]), Err(Error::UndefinedMetric(_))));
        assert!(matches!(recall_at_yield(&[1.0], &[A], 0.9), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn random_ranker_ap_is_near_anomaly_rate() {
        use rand::Rng;
        let mut r = crate::rng::stream(9, 0);
        let (n, rate, trials) = (500, 0.1, 200);
        let mut total = 0.0;
        for _ in 0..trials {
            let s: Vec<f64> = (0..n).map(|_| r.random::<f64>()).collect();
            let l: Vec<Label> = (0..n).map(|i| if i < (rate * n as f64) as usize { A } else { N }).collect();
            total += aucpr(&s, &l).unwrap();
        }
        let mean = total / trials as f64;
        assert!((mean - rate).abs() < 0.02, "{mean}");
    }

    fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<Label>)> {
        (2usize..=50).prop_flat_map(|n| {
            (
                prop::collection::vec((0i32..12).prop_map(f64::from), n),
                prop::collection::vec(any::<bool>(), n),
            )
                .prop_filter_map("both classes", |(s, b)| {
                    let l: Vec<Label> = b.iter().map(|&x| if x { A } else { N }).collect();
                    (l.contains(&A) && l.contains(&N)).then_some((s, l))
                })
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(300))]

        #[test]
        fn matches_brute_force((s, l) in instance(), y in 0.01f64..0.99) {
            prop_assert_eq!(auroc(&s, &l).unwrap(), oracle_auroc(&s, &l));
            prop_assert!((aucpr(&s, &l).unwrap() - oracle_ap(&s, &l)).abs() <= 1e-9);
            prop_assert_eq!(recall_at_yield(&s, &l, y).unwrap(), oracle_recall(&s, &l, y));
        }

        #[test]
        fn invariant_under_increasing_transform((s, l) in instance(), y in 0.01f64..0.99) {
            let t: Vec<f64> = s.iter().map(|v| (v * 0.3).exp() + 7.0).collect();
            prop_assert_eq!(auroc(&s, &l).unwrap(), auroc(&t, &l).unwrap());
            prop_assert!((aucpr(&s, &l).unwrap() - aucpr(&t, &l).unwrap()).abs() < 1e-12);
            prop_assert_eq!(recall_at_yield(&s, &l, y).unwrap().0, recall_at_yield(&t, &l, y).unwrap().0);
        }

        #[test]
        fn negation_complements_without_ties(
            raw in prop::collection::btree_set(-1000i32..1000, 2..40),
            bits in prop::collection::vec(any::<bool>(), 40),
        ) {
            let s: Vec<f64> = raw.into_iter().map(f64::from).collect();
            let mut l: Vec<Label> = s.iter().zip(&bits).map(|(_, &b)| if b { A } else { N }).collect();
            l[0] = A;
            l[1] = N;
            let neg: Vec<f64> = s.iter().map(|v| -v).collect();
            prop_assert!((auroc(&s, &l).unwrap() + auroc(&neg, &l).unwrap() - 1.0).abs() < 1e-12);
        }
    }
}
